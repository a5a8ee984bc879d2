//! Image file I/O: 8-bit PNG plus binary PPM (P6) / PGM (P5).
//!
//! Both formats are lossless, so `load(save(img))` reproduces every 8-bit
//! pixel exactly. Encoding clamps to `[0, 1]` and rounds half away from zero.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_pnm(&bytes);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return decode_png(&bytes);
    }
    Err(Error::UnsupportedFormat(format!(
        "{}: not a PNG or binary PPM/PGM",
        path.display()
    )))
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.validate()?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => save_png(img, path),
        "ppm" | "pgm" => save_pnm(img, path, &ext),
        other => Err(Error::UnsupportedFormat(format!(
            "cannot encode extension .{other}"
        ))),
    }
}

/// Quantize to 8 bits: clamp then round half away from zero.
#[inline]
pub fn encode_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_bytes(img: &ImageBuffer) -> Vec<u8> {
    img.data.iter().map(|&v| encode_u8(v)).collect()
}

fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> ImageBuffer {
    ImageBuffer {
        width,
        height,
        channels,
        data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let dyn_img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(_) => Error::Truncated("png stream".into()),
            other => Error::UnsupportedFormat(format!("png: {other}")),
        })?;
    use image::DynamicImage::*;
    let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
    match dyn_img {
        ImageLuma8(img) => Ok(from_bytes(w, h, 1, img.as_raw())),
        ImageLumaA8(img) => {
            let raw: Vec<u8> = img.as_raw().chunks_exact(2).map(|p| p[0]).collect();
            Ok(from_bytes(w, h, 1, &raw))
        }
        ImageRgb8(img) => Ok(from_bytes(w, h, 3, img.as_raw())),
        ImageRgba8(img) => {
            let raw: Vec<u8> = img
                .as_raw()
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect();
            Ok(from_bytes(w, h, 3, &raw))
        }
        _ => Err(Error::UnsupportedFormat(
            "png: only 8-bit gray/rgb supported".into(),
        )),
    }
}

fn save_png(img: &ImageBuffer, path: &Path) -> Result<()> {
    let bytes = to_bytes(img);
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat(format!("png encode: {other}")),
    })
}

fn save_pnm(img: &ImageBuffer, path: &Path, ext: &str) -> Result<()> {
    let (magic, channels) = match ext {
        "pgm" => ("P5", 1),
        _ => ("P6", 3),
    };
    if img.channels != channels {
        return Err(Error::InvalidArgument(format!(
            "cannot write {}-channel image as {magic}",
            img.channels
        )));
    }
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height)
        .expect("write to vec cannot fail");
    out.extend(to_bytes(img));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary PNM decode: P5 (gray) and P6 (rgb), maxval 255.
fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => unreachable!("caller checked magic"),
    };
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_pnm_int(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!(
            "pnm dimensions {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "pnm maxval {maxval} (only 255 supported)"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(Error::Truncated(format!(
            "pnm raster: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(from_bytes(width, height, channels, &bytes[pos..pos + need]))
}

fn parse_pnm_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comments.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(Error::Truncated("pnm header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::MalformedHeader("pnm: expected integer".into()));
    }
    let text = std::str::from_utf8(&bytes[start..*pos]).expect("ascii digits");
    text.parse()
        .map_err(|_| Error::MalformedHeader(format!("pnm: bad integer {text}")))
}
