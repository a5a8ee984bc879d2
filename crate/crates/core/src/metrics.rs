//! Full-reference quality metrics and dataset evaluation reports.
//!
//! PSNR is computed on `[0, 1]` values with MAX = 1 and capped at 100 dB.
//! SSIM is the standard single-scale form: 11×11 Gaussian window (σ = 1.5),
//! C1 = 0.01², C2 = 0.03², computed on ITU-R 601 luma for RGB inputs and
//! averaged over valid window positions.

use std::io::Write;
use std::path::Path;

use crate::datagen::{Manifest, Split};
use crate::error::{Error, Result};
use crate::image::{load_image, ImageBuffer};

pub const PSNR_CAP_DB: f64 = 100.0;

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "psnr: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    let mut mse = 0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = (*x - *y) as f64;
        mse += d * d;
    }
    mse /= a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0f64; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filtering of an f64 plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut mid = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                acc += kt * plane[y * w + x + t];
            }
            mid[y * ow + x] = acc;
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                acc += kt * mid[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "ssim: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {}x{} smaller than the {SSIM_WINDOW}-pixel window",
            a.width, a.height
        )));
    }
    let la = a.to_luma();
    let lb = b.to_luma();
    let (w, h) = (a.width, a.height);
    let pa: Vec<f64> = la.data.iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = lb.data.iter().map(|&v| v as f64).collect();
    let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
    let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
    let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

    let k = ssim_kernel();
    let (mu_a, ow, oh) = filter_valid(&pa, w, h, &k);
    let (mu_b, _, _) = filter_valid(&pb, w, h, &k);
    let (e_aa, _, _) = filter_valid(&paa, w, h, &k);
    let (e_bb, _, _) = filter_valid(&pbb, w, h, &k);
    let (e_ab, _, _) = filter_valid(&pab, w, h, &k);

    let mut acc = 0f64;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        acc += num / den;
    }
    Ok(acc / (ow * oh) as f64)
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image metric rows plus their arithmetic means.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub method: String,
    pub config_echo: String,
}

impl EvalReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("# ssim_channel=luma-bt601\n");
        for line in self.config_echo.lines() {
            out.push_str(&format!("# {line}\n"));
        }
        out.push_str("id,method,psnr,ssim\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6}\n", r.id, r.method, r.psnr, r.ssim));
        }
        out.push_str(&format!(
            "MEAN,{},{:.6},{:.6}\n",
            self.method, self.mean_psnr, self.mean_ssim
        ));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Evaluate `<outputs_dir>/<id>.png` against each test-split HR image of the
/// manifest. Rows are produced in manifest order.
pub fn eval_run(
    manifest: &Manifest,
    outputs_dir: impl AsRef<Path>,
    method: &str,
    split: Split,
    config_echo: &str,
) -> Result<EvalReport> {
    let outputs_dir = outputs_dir.as_ref();
    let rows_in: Vec<_> = manifest.rows_in_split(split).collect();
    if rows_in.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?}")));
    }
    let mut rows = Vec::with_capacity(rows_in.len());
    for m in rows_in {
        let out_path = outputs_dir.join(format!("{}.png", m.id));
        if !out_path.exists() {
            return Err(Error::MissingOutput(m.id.clone()));
        }
        let hr = load_image(&m.hr_path)?;
        let out = load_image(&out_path)?;
        rows.push(EvalRow {
            id: m.id.clone(),
            method: method.to_string(),
            psnr: psnr(&out, &hr)?,
            ssim: ssim(&out, &hr)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        method: method.to_string(),
        config_echo: config_echo.to_string(),
    })
}
