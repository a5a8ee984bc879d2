//! Tri-branch rectified-flow denoiser at toy scale.
//!
//! Images enter token space through a fixed, invertible patch arrangement
//! (the frozen stand-in for a pretrained autoencoder); three structurally
//! identical transformer branches operate on those tokens. The LR and
//! reference branches each run once on clean latents, caching per-layer
//! key/value projections; the SR branch consumes those caches in every
//! denoising step through cross-branch attention, predicting the rectified-
//! flow velocity that an Euler integrator follows from noise to image.

mod attention;
mod backward;
mod checkpoint;
mod forward;
mod weights;

pub use attention::{patch_ref_attention, patch_ref_attention_with_probs};
pub use backward::{backward_cached_branch, backward_sr, CrossGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{
    attention_mass_diagnostic, branch_forward_cache, branch_forward_cache_traced,
    velocity_forward, velocity_forward_traced, BranchCache, BranchTrace,
};
pub use weights::{BranchWeights, LayerWeights};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::linalg::{Mat, Real};
use crate::rng::RngState;

pub const FFN_MULT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side length the model operates on (training crop size).
    pub image_size: usize,
    /// Non-overlapping patch side length.
    pub patch: usize,
    /// Image channels, 1 or 3.
    pub channels: usize,
    /// Embedding width.
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Reference key/values are injected only in the first `ref_layers` layers.
    pub ref_layers: usize,
    /// Pre-softmax multiplier on reference keys.
    pub kscale: f64,
    /// Euler integration steps.
    pub sample_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 4,
            channels: 3,
            dim: 64,
            heads: 4,
            layers: 6,
            ref_layers: 6,
            kscale: 1.0,
            sample_steps: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.sample_steps == 0 {
            return Err(Error::InvalidConfig("zero model dimension".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.ref_layers > self.layers {
            return Err(Error::InvalidConfig(format!(
                "ref_layers {} > layers {}",
                self.ref_layers, self.layers
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::InvalidConfig(
                "dim must be a multiple of 4 for 2-D position encoding".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig("channels must be 1 or 3".into()));
        }
        if self.patch_values() > self.dim {
            return Err(Error::InvalidConfig(format!(
                "dim {} too small for patch {}x{}x{}",
                self.dim, self.patch, self.patch, self.channels
            )));
        }
        if !(0.0..=1.0).contains(&self.kscale) {
            return Err(Error::InvalidConfig("kscale outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn patch_values(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn token_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn ffn_hidden(&self) -> usize {
        FFN_MULT * self.dim
    }

    pub fn to_kv(&self) -> String {
        format!(
            "model.image_size={}\nmodel.patch={}\nmodel.channels={}\nmodel.dim={}\n\
             model.heads={}\nmodel.layers={}\nmodel.ref_layers={}\nmodel.kscale={}\n\
             model.sample_steps={}\n",
            self.image_size,
            self.patch,
            self.channels,
            self.dim,
            self.heads,
            self.layers,
            self.ref_layers,
            self.kscale,
            self.sample_steps
        )
    }

    pub fn from_kv_lines(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let parse_usize = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad integer {v}")))
            };
            match key.trim() {
                "model.image_size" => cfg.image_size = parse_usize(value)?,
                "model.patch" => cfg.patch = parse_usize(value)?,
                "model.channels" => cfg.channels = parse_usize(value)?,
                "model.dim" => cfg.dim = parse_usize(value)?,
                "model.heads" => cfg.heads = parse_usize(value)?,
                "model.layers" => cfg.layers = parse_usize(value)?,
                "model.ref_layers" => cfg.ref_layers = parse_usize(value)?,
                "model.sample_steps" => cfg.sample_steps = parse_usize(value)?,
                "model.kscale" => {
                    cfg.kscale = value
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad float {value}")))?
                }
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token grid of patch embeddings: the latent `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub grid_w: usize,
    pub grid_h: usize,
    /// `grid_w * grid_h` rows, `dim` columns.
    pub tokens: Mat<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn zeros(grid_w: usize, grid_h: usize, dim: usize) -> Self {
        LatentGrid {
            grid_w,
            grid_h,
            tokens: Mat::zeros(grid_w * grid_h, dim),
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn all_finite(&self) -> bool {
        self.tokens.data.iter().all(|v| v.is_finite())
    }
}

/// Fixed identity-arrangement encoder: each non-overlapping `patch`² block is
/// flattened into the leading channels of a token; remaining channels are
/// zero. No learned parameters and no bias, so the zero image maps to zero
/// tokens and [`unpatchify`] is an exact inverse.
pub fn patchify<T: Real>(img: &ImageBuffer, cfg: &ModelConfig) -> Result<LatentGrid<T>> {
    if img.width % cfg.patch != 0 || img.height % cfg.patch != 0 {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} not divisible by patch {}",
            img.width, img.height, cfg.patch
        )));
    }
    if img.channels != cfg.channels {
        return Err(Error::DimensionMismatch(format!(
            "image channels {} != model channels {}",
            img.channels, cfg.channels
        )));
    }
    let gw = img.width / cfg.patch;
    let gh = img.height / cfg.patch;
    let mut grid = LatentGrid::zeros(gw, gh, cfg.dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = grid.tokens.row_mut(gy * gw + gx);
            let mut idx = 0;
            for py in 0..cfg.patch {
                for px in 0..cfg.patch {
                    for c in 0..cfg.channels {
                        row[idx] =
                            T::of_f32(img.get(gx * cfg.patch + px, gy * cfg.patch + py, c));
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Exact inverse of [`patchify`]: reads the leading channels of each token
/// back into pixels. Values are not clamped.
pub fn unpatchify<T: Real>(grid: &LatentGrid<T>, cfg: &ModelConfig) -> ImageBuffer {
    let w = grid.grid_w * cfg.patch;
    let h = grid.grid_h * cfg.patch;
    let mut img = ImageBuffer::new(w, h, cfg.channels);
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            let row = grid.tokens.row(gy * grid.grid_w + gx);
            let mut idx = 0;
            for py in 0..cfg.patch {
                for px in 0..cfg.patch {
                    for c in 0..cfg.channels {
                        img.set(
                            gx * cfg.patch + px,
                            gy * cfg.patch + py,
                            c,
                            row[idx].to_f32(),
                        );
                        idx += 1;
                    }
                }
            }
        }
    }
    img
}

/// Straight-line interpolation `(1 - t)·z0 + t·eps`.
pub fn forward_interpolate<T: Real>(
    z0: &LatentGrid<T>,
    eps: &LatentGrid<T>,
    t: f64,
) -> Result<LatentGrid<T>> {
    if z0.tokens.rows != eps.tokens.rows || z0.tokens.cols != eps.tokens.cols {
        return Err(Error::DimensionMismatch("interpolate shape".into()));
    }
    let tv = T::of(t);
    let one_minus = T::of(1.0 - t);
    let mut out = z0.clone();
    for (o, (&a, &b)) in out
        .tokens
        .data
        .iter_mut()
        .zip(z0.tokens.data.iter().zip(eps.tokens.data.iter()))
    {
        *o = one_minus * a + tv * b;
    }
    Ok(out)
}

/// Standard-normal latent drawn from a dedicated stream of `seed`.
pub fn noise_latent<T: Real>(grid_w: usize, grid_h: usize, dim: usize, seed: u64) -> LatentGrid<T> {
    let mut rng = RngState::new(seed, 0x45505300); // "EPS"
    let mut out = LatentGrid::zeros(grid_w, grid_h, dim);
    for v in out.tokens.data.iter_mut() {
        *v = T::of(rng.normal());
    }
    out
}

/// Fixed-step Euler integration from t = 1 (noise) to t = 0 through an
/// arbitrary velocity field. Exact on straight-line fields for any step count.
pub fn euler_integrate<T: Real>(
    mut z: LatentGrid<T>,
    steps: usize,
    mut velocity: impl FnMut(&LatentGrid<T>, f64) -> LatentGrid<T>,
) -> LatentGrid<T> {
    assert!(steps >= 1);
    let dt = T::of(1.0 / steps as f64);
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let vel = velocity(&z, t);
        for (zv, &vv) in z.tokens.data.iter_mut().zip(vel.tokens.data.iter()) {
            *zv -= dt * vv;
        }
    }
    z
}

/// Sample a latent with the learned velocity field.
pub fn euler_sample<T: Real>(
    lr_cache: Option<&BranchCache<T>>,
    ref_cache: Option<&BranchCache<T>>,
    sr: &BranchWeights<T>,
    cfg: &ModelConfig,
    grid_w: usize,
    grid_h: usize,
    seed: u64,
) -> LatentGrid<T> {
    let eps = noise_latent::<T>(grid_w, grid_h, cfg.dim, seed);
    euler_integrate(eps, cfg.sample_steps, |z, t| {
        velocity_forward(z, t, lr_cache, ref_cache, sr, cfg)
    })
}

/// End-to-end single-crop super-resolution: tokenize inputs, cache the
/// conditioning branches once at t = 0, integrate, and decode. The absent-
/// reference path is the SISR model.
pub fn super_resolve<T: Real>(
    lr_up: &ImageBuffer,
    aligned_ref: Option<&ImageBuffer>,
    sr: &BranchWeights<T>,
    lr_weights: &BranchWeights<T>,
    ref_weights: Option<&BranchWeights<T>>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ImageBuffer> {
    let z_lr = patchify::<T>(lr_up, cfg)?;
    let lr_cache = branch_forward_cache(&z_lr, lr_weights, cfg, 0.0);
    let ref_cache = match aligned_ref {
        Some(img) => {
            let z_ref = patchify::<T>(img, cfg)?;
            if z_ref.tokens.rows != z_lr.tokens.rows {
                return Err(Error::DimensionMismatch(
                    "reference tokens != LR tokens".into(),
                ));
            }
            let w = ref_weights.ok_or_else(|| {
                Error::InvalidArgument("reference image given without reference weights".into())
            })?;
            Some(branch_forward_cache(&z_ref, w, cfg, 0.0))
        }
        None => None,
    };
    let z0 = euler_sample(
        Some(&lr_cache),
        ref_cache.as_ref(),
        sr,
        cfg,
        z_lr.grid_w,
        z_lr.grid_h,
        seed,
    );
    let mut img = unpatchify(&z0, cfg);
    img.clamp_unit();
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_token_count() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.token_count(), 256);
        cfg.validate().unwrap();
    }

    #[test]
    fn patchify_counts_and_inverse() {
        let cfg = ModelConfig::default();
        let img = ImageBuffer::from_fn(64, 64, 3, |x, y, c| ((x * 5 + y * 3 + c) % 17) as f32 / 17.0);
        let grid = patchify::<f32>(&img, &cfg).unwrap();
        assert_eq!(grid.token_count(), 256);
        let back = unpatchify(&grid, &cfg);
        assert_eq!(back.data, img.data);
    }

    #[test]
    fn zero_image_gives_zero_tokens() {
        let cfg = ModelConfig::default();
        let img = ImageBuffer::new(64, 64, 3);
        let grid = patchify::<f64>(&img, &cfg).unwrap();
        assert!(grid.tokens.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let mut z0 = LatentGrid::<f64>::zeros(2, 2, 4);
        let mut eps = LatentGrid::<f64>::zeros(2, 2, 4);
        z0.tokens.fill(2.0);
        eps.tokens.fill(4.0);
        assert_eq!(forward_interpolate(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(forward_interpolate(&z0, &eps, 1.0).unwrap(), eps);
        let mid = forward_interpolate(&z0, &eps, 0.5).unwrap();
        assert!(mid.tokens.data.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn euler_recovers_endpoint_of_straight_field() {
        // With v = eps - z0 the path is a straight line and Euler is exact
        // for any step count.
        let dim = 8;
        let mut z0 = LatentGrid::<f64>::zeros(2, 2, dim);
        for (i, v) in z0.tokens.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let eps = noise_latent::<f64>(2, 2, dim, 99);
        let field = {
            let z0 = z0.clone();
            let eps = eps.clone();
            move |_z: &LatentGrid<f64>, _t: f64| {
                let mut v = eps.clone();
                for (vv, &zv) in v.tokens.data.iter_mut().zip(z0.tokens.data.iter()) {
                    *vv -= zv;
                }
                v
            }
        };
        let mut results = Vec::new();
        for steps in [1usize, 5, 100] {
            let out = euler_integrate(eps.clone(), steps, field.clone());
            let max_err = out
                .tokens
                .data
                .iter()
                .zip(&z0.tokens.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0f64, f64::max);
            assert!(max_err < 1e-6, "steps {steps}: err {max_err}");
            results.push(out);
        }
        // Different step counts agree up to accumulation rounding.
        let spread = results[0]
            .tokens
            .data
            .iter()
            .zip(&results[2].tokens.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f64, f64::max);
        assert!(spread < 1e-9, "spread {spread}");
    }

    #[test]
    fn noise_latent_is_seed_deterministic() {
        let a = noise_latent::<f32>(4, 4, 16, 7);
        let b = noise_latent::<f32>(4, 4, 16, 7);
        let c = noise_latent::<f32>(4, 4, 16, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = ModelConfig {
            image_size: 32,
            dim: 48,
            heads: 2,
            layers: 3,
            ref_layers: 2,
            kscale: 0.5,
            ..ModelConfig::default()
        };
        let parsed = ModelConfig::from_kv_lines(&cfg.to_kv()).unwrap();
        assert_eq!(parsed, cfg);
    }
}
