//! Seeded synthetic real-world degradation: blur, two-hop bicubic
//! downsampling, additive Gaussian noise, and a DCT compression surrogate,
//! chained in that order (optionally twice for second-order degradation).
//!
//! Every sampled parameter comes from the config seed through the
//! counter-based [`RngState`], so outputs are bit-identical across runs and
//! platforms.

use crate::error::{Error, Result};
use crate::image::{resize_bicubic, ImageBuffer};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationConfig {
    /// Gaussian blur sigma range in pixels, sampled uniformly.
    pub blur_sigma_range: (f64, f64),
    /// Final downsampling factor.
    pub down_scale: usize,
    /// Additive noise sigma range in [0,1] units.
    pub noise_sigma_range: (f64, f64),
    /// Compression surrogate quality range, 1..=100.
    pub compress_quality_range: (u32, u32),
    /// Run the whole chain twice.
    pub second_order: bool,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            blur_sigma_range: (0.2, 2.0),
            down_scale: 4,
            noise_sigma_range: (0.0, 0.03),
            compress_quality_range: (40, 95),
            second_order: true,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges_ok = self.blur_sigma_range.0 <= self.blur_sigma_range.1
            && self.blur_sigma_range.0 >= 0.0
            && self.noise_sigma_range.0 <= self.noise_sigma_range.1
            && self.noise_sigma_range.0 >= 0.0
            && self.compress_quality_range.0 <= self.compress_quality_range.1
            && self.compress_quality_range.0 >= 1
            && self.compress_quality_range.1 <= 100;
        if !ranges_ok {
            return Err(Error::InvalidConfig("degradation ranges".into()));
        }
        if self.down_scale < 1 {
            return Err(Error::InvalidConfig("down_scale must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "degrade.blur_sigma_min={}\ndegrade.blur_sigma_max={}\ndegrade.down_scale={}\n\
             degrade.noise_sigma_min={}\ndegrade.noise_sigma_max={}\n\
             degrade.quality_min={}\ndegrade.quality_max={}\n\
             degrade.second_order={}\ndegrade.seed={}\n",
            self.blur_sigma_range.0,
            self.blur_sigma_range.1,
            self.down_scale,
            self.noise_sigma_range.0,
            self.noise_sigma_range.1,
            self.compress_quality_range.0,
            self.compress_quality_range.1,
            self.second_order,
            self.seed
        )
    }
}

/// Separable Gaussian blur, kernel radius `ceil(3σ)`, normalized to sum 1,
/// edge-clamped. `sigma = 0` is the identity.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0f64;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }

    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut mid = vec![0f64; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = x as isize + ki as isize - radius;
                    acc += kv * img.get_clamped(sx, y as isize, c) as f64;
                }
                mid[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = ImageBuffer::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f64;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * mid[(sy * w + x) * ch + c];
                }
                out.data[(y * w + x) * ch + c] = acc as f32;
            }
        }
    }
    out
}

/// Per-value i.i.d. additive Gaussian noise, clamped to `[0, 1]`.
pub fn add_gaussian_noise(img: &ImageBuffer, sigma: f64, rng: &mut RngState) -> ImageBuffer {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v + (sigma * rng.normal()) as f32).clamp(0.0, 1.0);
    }
    out
}

/// JPEG Annex-K luminance quantization table.
const LUMA_QUANT: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0f64; 64];
    for i in 0..64 {
        t[i] = ((LUMA_QUANT[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// Orthonormal 8×8 DCT-II basis, `B[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0f64; 8]; 8];
    for u in 0..8 {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for x in 0..8 {
            b[u][x] = cu * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Block-DCT compression surrogate: per channel, 8×8 DCT, quantization with
/// the standard luminance table scaled by `quality`, inverse DCT, clamp.
/// Never touches disk; quality 100 introduces only rounding-level error.
pub fn jpeg_surrogate(img: &ImageBuffer, quality: u32) -> ImageBuffer {
    assert!((1..=100).contains(&quality), "quality must be in 1..=100");
    let q = quant_table(quality);
    let basis = dct_basis();
    let bw = img.width.div_ceil(8);
    let bh = img.height.div_ceil(8);
    let mut out = img.clone();

    let mut block = [[0f64; 8]; 8];
    let mut tmp = [[0f64; 8]; 8];
    let mut coef = [[0f64; 8]; 8];
    for c in 0..img.channels {
        for by in 0..bh {
            for bx in 0..bw {
                // Gather with edge replication; values in the [-128, 127] domain.
                for y in 0..8 {
                    let sy = (by * 8 + y).min(img.height - 1);
                    for x in 0..8 {
                        let sx = (bx * 8 + x).min(img.width - 1);
                        block[y][x] = img.get(sx, sy, c) as f64 * 255.0 - 128.0;
                    }
                }
                // coef = B * block * B^T
                for u in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0;
                        for y in 0..8 {
                            acc += basis[u][y] * block[y][x];
                        }
                        tmp[u][x] = acc;
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for x in 0..8 {
                            acc += tmp[u][x] * basis[v][x];
                        }
                        let qv = q[u * 8 + v];
                        coef[u][v] = (acc / qv).round() * qv;
                    }
                }
                // block = B^T * coef * B
                for y in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0;
                        for u in 0..8 {
                            acc += basis[u][y] * coef[u][v];
                        }
                        tmp[y][v] = acc;
                    }
                }
                for y in 0..8 {
                    let oy = by * 8 + y;
                    if oy >= img.height {
                        continue;
                    }
                    for x in 0..8 {
                        let ox = bx * 8 + x;
                        if ox >= img.width {
                            continue;
                        }
                        let mut acc = 0.0;
                        for v in 0..8 {
                            acc += tmp[y][v] * basis[v][x];
                        }
                        out.set(ox, oy, c, (((acc + 128.0) / 255.0) as f32).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    out
}

/// Ordered chain blur → bicubic downsample → noise → compression surrogate,
/// run twice when `second_order` is set. Output size is input / `down_scale`.
pub fn degrade_pipeline(hr: &ImageBuffer, cfg: &DegradationConfig) -> Result<ImageBuffer> {
    cfg.validate()?;
    if hr.width % cfg.down_scale != 0 || hr.height % cfg.down_scale != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} not divisible by down_scale {}",
            hr.width, hr.height, cfg.down_scale
        )));
    }
    let final_w = hr.width / cfg.down_scale;
    let final_h = hr.height / cfg.down_scale;
    let mut rng = RngState::new(cfg.seed, 0);
    let stages = if cfg.second_order { 2 } else { 1 };
    let mut img = hr.clone();
    for stage in 0..stages {
        let sigma = rng.uniform_range(cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
        img = gaussian_blur(&img, sigma);

        // Random intermediate scale in [1/down_scale, 1], then the final size.
        let s = rng.uniform_range(1.0 / cfg.down_scale as f64, 1.0);
        let last_stage = stage + 1 == stages;
        if last_stage {
            if stages == 1 {
                let iw = ((hr.width as f64 * s).round() as usize).max(final_w);
                let ih = ((hr.height as f64 * s).round() as usize).max(final_h);
                img = resize_bicubic(&img, iw, ih)?;
            }
            img = resize_bicubic(&img, final_w, final_h)?;
        } else {
            let iw = ((hr.width as f64 * s).round() as usize).max(final_w);
            let ih = ((hr.height as f64 * s).round() as usize).max(final_h);
            img = resize_bicubic(&img, iw, ih)?;
        }

        let noise_sigma = rng.uniform_range(cfg.noise_sigma_range.0, cfg.noise_sigma_range.1);
        let mut pixel_rng = RngState::new(cfg.seed, 1 + stage as u64);
        img = add_gaussian_noise(&img, noise_sigma, &mut pixel_rng);

        let quality = rng.uniform_int_range(
            cfg.compress_quality_range.0 as i64,
            cfg.compress_quality_range.1 as i64,
        ) as u32;
        img = jpeg_surrogate(&img, quality);
    }
    debug_assert_eq!(img.width, final_w);
    debug_assert_eq!(img.height, final_h);
    Ok(img)
}
