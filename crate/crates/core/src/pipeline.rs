//! End-to-end super-resolution orchestration: bicubic upscale, optional
//! reference alignment, sliding-window tiling, per-tile denoising, and
//! blended stitching. This is the engine behind the CLI `sr` and `ablate`
//! commands and the evaluation harness.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datagen::{Manifest, Split};
use crate::error::{Error, Result};
use crate::flowmodel::{super_resolve, Checkpoint, ModelConfig};
use crate::image::{load_image, resize_bicubic, save_image, ImageBuffer};
use crate::matching::{align_reference, coarse_match, upscale_field, CorrespondenceField, MatchConfig};
use crate::metrics::{eval_run, EvalReport};
use crate::rng::RngState;
use crate::tiling::{blend_stitch, plan_tiles, tile_reference, TileRefMode};
use crate::train::ModelState;

/// How the reference enters the pipeline, mirroring the ablation rows:
/// full method, matching without warping, relative-position tiles, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    None,
    Aligned,
    RegionResize,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    White,
    Sisr,
}

#[derive(Debug, Clone)]
pub struct SrOptions {
    pub mode: RefMode,
    pub mask: MaskMode,
    pub kscale: f64,
    pub ref_layers: Option<usize>,
    pub sample_steps: Option<usize>,
    pub tile: usize,
    pub tile_step: usize,
    pub scale: usize,
    pub seed: u64,
    pub matching: MatchConfig,
}

impl Default for SrOptions {
    fn default() -> Self {
        SrOptions {
            mode: RefMode::Aligned,
            mask: MaskMode::White,
            kscale: 1.0,
            ref_layers: None,
            sample_steps: None,
            tile: 1024,
            tile_step: 256,
            scale: 4,
            seed: 0,
            matching: MatchConfig::default(),
        }
    }
}

#[derive(Debug)]
pub struct SrOutcome {
    pub image: ImageBuffer,
    pub tile_count: usize,
    pub mean_certainty: Option<f32>,
    pub fallback_tiles: usize,
}

/// Load model branches from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(ModelState<f32>, ModelConfig)> {
    let sr = ck.branch("sr")?.clone();
    let lr = ck.branches.get("lr").cloned();
    let reference = ck.branches.get("ref").cloned();
    Ok((ModelState { sr, lr, reference }, ck.config.clone()))
}

/// Extend a field's domain by edge replication (zero certainty in the pad
/// band); used when the LR plane is reflect-padded up to the tile size.
fn pad_field(field: &CorrespondenceField, w: usize, h: usize) -> CorrespondenceField {
    if field.width >= w && field.height >= h {
        return field.clone();
    }
    let mut out = CorrespondenceField::from_fn(
        w.max(field.width),
        h.max(field.height),
        field.ref_width,
        field.ref_height,
        |u, v| {
            let su = u.min(field.width - 1);
            let sv = v.min(field.height - 1);
            let i = sv * field.width + su;
            let inside = u < field.width && v < field.height;
            (
                field.map_x[i],
                field.map_y[i],
                if inside { field.certainty[i] } else { 0.0 },
            )
        },
    );
    out.orig_ref_width = field.orig_ref_width;
    out.orig_ref_height = field.orig_ref_height;
    out
}

/// Deterministic per-tile sampling seed, independent of scheduling.
fn tile_seed(seed: u64, index: usize) -> u64 {
    RngState::new(seed, 0x7119_0000 ^ index as u64).next_u64()
}

/// Run the full pipeline on one LR image (<= a few thousand pixels per side).
///
/// `lr` is the raw low-resolution input; the output has `scale`-times its
/// dimensions. The model's crop size need not equal the tile size: tiles are
/// resampled through the model resolution and back.
pub fn run_sr(
    lr: &ImageBuffer,
    reference: Option<&ImageBuffer>,
    state: &ModelState<f32>,
    model_cfg: &ModelConfig,
    opts: &SrOptions,
) -> Result<SrOutcome> {
    let mut cfg = model_cfg.clone();
    cfg.kscale = opts.kscale;
    if let Some(rl) = opts.ref_layers {
        if rl > cfg.layers {
            return Err(Error::InvalidConfig(format!(
                "ref_layers {rl} > layers {}",
                cfg.layers
            )));
        }
        cfg.ref_layers = rl;
    }
    if let Some(steps) = opts.sample_steps {
        cfg.sample_steps = steps;
    }
    cfg.validate()?;
    if opts.mode != RefMode::None && reference.is_none() {
        return Err(Error::InvalidArgument(
            "reference image required unless mode is None".into(),
        ));
    }
    if opts.mode != RefMode::None && state.reference.is_none() {
        return Err(Error::MissingCheckpoint {
            stage: 2,
            hint: "checkpoint has no reference branch; run stage 2 or pass --no-ref".into(),
        });
    }
    if state.lr.is_none() {
        return Err(Error::MissingCheckpoint {
            stage: 1,
            hint: "checkpoint has no LR branch; run stage 1 first".into(),
        });
    }

    let out_w = lr.width * opts.scale;
    let out_h = lr.height * opts.scale;
    let lr_up = resize_bicubic(lr, out_w, out_h)?;

    // Mask for certainty compositing: pure white, or the SISR output.
    let mask = match (opts.mode, opts.mask) {
        (RefMode::Aligned, MaskMode::Sisr) => {
            let sisr_opts = SrOptions {
                mode: RefMode::None,
                ..opts.clone()
            };
            run_sr(lr, None, state, model_cfg, &sisr_opts)?.image
        }
        _ => ImageBuffer::constant(out_w, out_h, lr.channels, 1.0),
    };

    // Reference preparation per mode.
    let mut mean_certainty = None;
    let (aligned_ref, field) = match (opts.mode, reference) {
        (RefMode::None, _) | (_, None) => (None, None),
        (RefMode::Aligned, Some(r)) => {
            let (aligned, field) = align_reference(&lr_up, r, &mask, &opts.matching)?;
            mean_certainty = Some(
                field.certainty.iter().sum::<f32>() / (field.width * field.height) as f32,
            );
            (Some(aligned), Some(field))
        }
        (RefMode::RegionResize, Some(r)) => {
            let coarse = coarse_match(&lr_up, r, &opts.matching)?;
            let field = upscale_field(&coarse, out_w, out_h)?;
            mean_certainty = Some(
                field.certainty.iter().sum::<f32>() / (field.width * field.height) as f32,
            );
            (None, Some(field))
        }
        (RefMode::Relative, Some(_)) => (None, None),
    };

    // Pad everything on the LR-aligned plane up to the tile size.
    let tile = opts.tile;
    let step = opts.tile_step.min(tile);
    let padded = lr_up.reflect_pad_to(tile, tile);
    let (pw, ph) = (padded.width, padded.height);
    let aligned_padded = aligned_ref.map(|a| a.reflect_pad_to(tile, tile));
    let field_padded = match field {
        Some(f) => pad_field(&f, pw, ph),
        None => {
            // Placeholder carrying the LR-plane and reference geometry for
            // the relative mode; never used for actual warping.
            let mut id = CorrespondenceField::identity(pw, ph);
            if let Some(r) = reference {
                id.ref_width = r.width;
                id.ref_height = r.height;
                id.orig_ref_width = r.width;
                id.orig_ref_height = r.height;
            }
            id
        }
    };

    let plan = plan_tiles(pw, ph, tile, step)?;
    let tile_mode = match opts.mode {
        RefMode::Aligned => TileRefMode::Aligned,
        RefMode::RegionResize => TileRefMode::RegionResize,
        RefMode::Relative => TileRefMode::Relative,
        RefMode::None => TileRefMode::Relative, // unused
    };

    let results: Vec<Result<(ImageBuffer, bool)>> = plan
        .rects
        .par_iter()
        .enumerate()
        .map(|(idx, &rect)| {
            let lr_tile = padded.crop(rect)?;
            let (ref_tile, fell_back) = match opts.mode {
                RefMode::None => (None, false),
                _ => {
                    let aligned_plane = aligned_padded.as_ref().unwrap_or(&padded);
                    let r = reference.expect("reference checked above");
                    let tr = tile_reference(rect, tile_mode, aligned_plane, r, &field_padded)?;
                    (Some(tr.image), tr.fell_back)
                }
            };
            // Resample through the model's native crop size when needed.
            let need_resize = tile != cfg.image_size;
            let lr_in = if need_resize {
                resize_bicubic(&lr_tile, cfg.image_size, cfg.image_size)?
            } else {
                lr_tile
            };
            let ref_in = match ref_tile {
                Some(rt) if need_resize => {
                    Some(resize_bicubic(&rt, cfg.image_size, cfg.image_size)?)
                }
                other => other,
            };
            let out_small = super_resolve(
                &lr_in,
                ref_in.as_ref(),
                &state.sr,
                state.lr.as_ref().expect("LR branch checked above"),
                state.reference.as_ref(),
                &cfg,
                tile_seed(opts.seed, idx),
            )?;
            let out_tile = if need_resize {
                resize_bicubic(&out_small, tile, tile)?
            } else {
                out_small
            };
            Ok((out_tile, fell_back))
        })
        .collect();

    let mut tiles = Vec::with_capacity(results.len());
    let mut fallback_tiles = 0usize;
    for r in results {
        let (img, fb) = r?;
        tiles.push(img);
        fallback_tiles += fb as usize;
    }
    let stitched = blend_stitch(&plan, &tiles)?;
    let mut image = stitched.crop(crate::image::Rect::new(0, 0, out_w, out_h))?;
    image.clamp_unit();
    Ok(SrOutcome {
        image,
        tile_count: plan.rects.len(),
        mean_certainty,
        fallback_tiles,
    })
}

/// Super-resolve every row of a manifest split, write `<label>/<id>.png`
/// under `out_dir`, and evaluate against the ground-truth HR images.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_method(
    manifest: &Manifest,
    split: Split,
    max_rows: Option<usize>,
    state: &ModelState<f32>,
    model_cfg: &ModelConfig,
    opts: &SrOptions,
    out_dir: impl AsRef<Path>,
    label: &str,
    config_echo: &str,
) -> Result<EvalReport> {
    let method_dir = out_dir.as_ref().join(label);
    std::fs::create_dir_all(&method_dir).map_err(|e| Error::io(&method_dir, e))?;
    let rows: Vec<_> = manifest.rows_in_split(split).collect();
    if rows.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?}")));
    }
    let rows = match max_rows {
        Some(cap) => &rows[..rows.len().min(cap)],
        None => &rows[..],
    };
    for row in rows {
        let lr = load_image(&row.lr_path)?;
        let reference = match opts.mode {
            RefMode::None => None,
            _ => Some(load_image(&row.ref_path)?),
        };
        let outcome = run_sr(&lr, reference.as_ref(), state, model_cfg, opts)?;
        save_image(&outcome.image, method_dir.join(format!("{}.png", row.id)))?;
    }
    // Evaluate only the rows we produced.
    let sub = Manifest {
        rows: rows.iter().map(|r| (*r).clone()).collect(),
        path: manifest.path.clone(),
    };
    eval_run(&sub, &method_dir, label, split, config_echo)
}

/// Run `f` on a dedicated rayon pool with `threads` workers (0 = default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("rayon pool");
    pool.install(f)
}

/// Write `<path>.cfg` provenance sidecar next to an output artifact.
pub fn write_config_sidecar(path: impl AsRef<Path>, echo: &str) -> Result<PathBuf> {
    let mut sidecar = path.as_ref().as_os_str().to_owned();
    sidecar.push(".cfg");
    let sidecar = PathBuf::from(sidecar);
    std::fs::write(&sidecar, echo).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}
