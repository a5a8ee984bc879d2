//! Weight checkpoint: binary file with a magic, a key=value config echo, and
//! a flat named tensor list (name, shape, raw little-endian f32 values).
//! Branches are stored under the prefixes `sr.`, `lr.`, `ref.`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flowmodel::{BranchWeights, ModelConfig};
use crate::linalg::Real;

const MAGIC: &[u8; 8] = b"RSRCKPT1";

/// An on-disk model state: config echo plus any subset of the three branches.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_echo: String,
    pub branches: BTreeMap<String, BranchWeights<f32>>,
}

impl Checkpoint {
    pub fn branch(&self, name: &str) -> Result<&BranchWeights<f32>> {
        self.branches
            .get(name)
            .ok_or_else(|| Error::BadCheckpoint(format!("missing branch {name}")))
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config_echo: &str,
    branches: &[(&str, &BranchWeights<f32>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let echo = config_echo.as_bytes();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo);
    out.extend_from_slice(&(branches.len() as u32).to_le_bytes());
    for (name, weights) in branches {
        let nb = name.as_bytes();
        out.push(nb.len() as u8);
        out.extend_from_slice(nb);
        out.push(weights.frozen as u8);
        let tensors = weights.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (tname, shape, data) in tensors {
            let tb = tname.as_bytes();
            out.extend_from_slice(&(tb.len() as u16).to_le_bytes());
            out.extend_from_slice(tb);
            out.push(shape.len() as u8);
            for d in &shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_f32().to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated("checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize) -> Result<String> {
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::BadCheckpoint("non-utf8 name".into()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 8,
    };
    let echo_len = r.u32()? as usize;
    let config_echo = r.str(echo_len)?;
    let config = ModelConfig::from_kv_lines(&config_echo)?;
    let branch_count = r.u32()? as usize;
    let mut branches = BTreeMap::new();
    for _ in 0..branch_count {
        let name_len = r.u8()? as usize;
        let name = r.str(name_len)?;
        let frozen = r.u8()? != 0;
        let tensor_count = r.u32()? as usize;
        let mut weights = BranchWeights::<f32>::zeros(&config);
        weights.frozen = frozen;
        for _ in 0..tensor_count {
            let tlen = r.u16()? as usize;
            let tname = r.str(tlen)?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            weights.set_tensor(&tname, &shape, &data)?;
        }
        branches.insert(name, weights);
    }
    Ok(Checkpoint {
        config,
        config_echo,
        branches,
    })
}
