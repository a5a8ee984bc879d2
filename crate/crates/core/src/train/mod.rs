//! Staged training: stage 0 pretrains the SR branch as an unconditional
//! rectified-flow prior on HR crops, stage 1 trains the LR branch for SISR
//! against the frozen prior, stage 2 trains the reference branch alone with
//! both earlier branches frozen. Every stage minimizes the same
//! velocity-matching loss on straight-line interpolants.

mod adam;
mod augment;
mod gradcheck;

pub use adam::AdamState;
pub use augment::{apply_homography, augment, augment_sample, AugmentFlags};
pub use gradcheck::{grad_check, GradCheckReport};

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datagen::{homography_field, Manifest, Split};
use crate::error::{Error, Result};
use crate::flowmodel::{
    backward_cached_branch, backward_sr, branch_forward_cache, branch_forward_cache_traced,
    forward_interpolate, load_checkpoint, patchify, save_checkpoint, velocity_forward_traced,
    BranchWeights, LatentGrid, ModelConfig,
};
use crate::image::{load_image, resize_bicubic, ImageBuffer};
use crate::linalg::{Mat, Real};
use crate::matching::compose_reference;
use crate::rng::RngState;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Cap on the number of train-split samples used (None = all).
    pub max_train_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 0,
            steps: 3000,
            batch: 8,
            learning_rate: 5e-5,
            warmup_steps: 100,
            grad_clip: 1.0,
            seed: 0,
            augment: AugmentFlags::default(),
            max_train_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage > 2 {
            return Err(Error::InvalidConfig("stage must be 0, 1 or 2".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::InvalidConfig("batch must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::InvalidConfig("grad_clip must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "train.stage={}\ntrain.steps={}\ntrain.batch={}\ntrain.learning_rate={}\n\
             train.warmup_steps={}\ntrain.grad_clip={}\ntrain.seed={}\n\
             train.augment={}{}{}{}\n",
            self.stage,
            self.steps,
            self.batch,
            self.learning_rate,
            self.warmup_steps,
            self.grad_clip,
            self.seed,
            if self.augment.flip { "flip," } else { "" },
            if self.augment.crop { "crop," } else { "" },
            if self.augment.color_jitter { "color_jitter," } else { "" },
            if self.augment.homography { "homography" } else { "" },
        )
    }
}

/// The three branches; absent branches have not been trained yet.
pub struct ModelState<T> {
    pub sr: BranchWeights<T>,
    pub lr: Option<BranchWeights<T>>,
    pub reference: Option<BranchWeights<T>>,
}

/// Per-branch parameter gradients; `None` for frozen/absent branches.
pub struct LossGrads<T> {
    pub sr: Option<BranchWeights<T>>,
    pub lr: Option<BranchWeights<T>>,
    pub reference: Option<BranchWeights<T>>,
}

impl<T: Real> LossGrads<T> {
    pub fn trainable(&self) -> Option<&BranchWeights<T>> {
        self.sr
            .as_ref()
            .or(self.lr.as_ref())
            .or(self.reference.as_ref())
    }
}

/// Squared-error velocity-matching objective: mean over tokens and channels
/// of `(v - (eps - z_hr))²`, plus the gradient on `v`.
pub fn velocity_mse<T: Real>(
    v: &Mat<T>,
    z_hr: &LatentGrid<T>,
    eps: &LatentGrid<T>,
) -> (f64, Mat<T>) {
    let n = v.data.len();
    let inv_n = T::of(1.0 / n as f64);
    let two = T::of(2.0);
    let mut d = Mat::zeros(v.rows, v.cols);
    let mut loss = 0f64;
    for i in 0..n {
        let target = eps.tokens.data[i] - z_hr.tokens.data[i];
        let diff = v.data[i] - target;
        loss += (diff * diff).to_f64();
        d.data[i] = two * diff * inv_n;
    }
    (loss / n as f64, d)
}

/// One Monte-Carlo term of the rectified-flow loss with gradients routed to
/// the branch trained at `stage` (0 → SR, 1 → LR, 2 → reference). Frozen
/// branches receive no parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn flow_loss<T: Real>(
    z_hr: &LatentGrid<T>,
    z_lr: Option<&LatentGrid<T>>,
    z_ref: Option<&LatentGrid<T>>,
    state: &ModelState<T>,
    stage: u8,
    t: f64,
    eps: &LatentGrid<T>,
    cfg: &ModelConfig,
) -> Result<(f64, LossGrads<T>)> {
    let z_t = forward_interpolate(z_hr, eps, t)?;

    let mut lr_trace = None;
    let lr_cache = match (stage, z_lr) {
        (0, _) => None,
        (_, None) => return Err(Error::InvalidArgument("stage >= 1 needs z_lr".into())),
        (1, Some(z)) => {
            let w = state.lr.as_ref().ok_or_else(|| Error::MissingCheckpoint {
                stage: 1,
                hint: "LR branch weights absent".into(),
            })?;
            let (cache, trace) = branch_forward_cache_traced(z, w, cfg, 0.0);
            lr_trace = Some(trace);
            Some(cache)
        }
        (_, Some(z)) => {
            let w = state.lr.as_ref().ok_or_else(|| Error::MissingCheckpoint {
                stage: 2,
                hint: "LR branch weights absent".into(),
            })?;
            Some(branch_forward_cache(z, w, cfg, 0.0))
        }
    };

    let mut ref_trace = None;
    let ref_cache = match (stage, z_ref) {
        (2, Some(z)) => {
            let w = state
                .reference
                .as_ref()
                .ok_or_else(|| Error::MissingCheckpoint {
                    stage: 2,
                    hint: "reference branch weights absent".into(),
                })?;
            let (cache, trace) = branch_forward_cache_traced(z, w, cfg, 0.0);
            ref_trace = Some(trace);
            Some(cache)
        }
        (2, None) => return Err(Error::InvalidArgument("stage 2 needs z_ref".into())),
        (_, Some(z)) => state
            .reference
            .as_ref()
            .map(|w| branch_forward_cache(z, w, cfg, 0.0)),
        (_, None) => None,
    };

    let (v, sr_trace) = velocity_forward_traced(
        &z_t,
        t,
        lr_cache.as_ref(),
        ref_cache.as_ref(),
        &state.sr,
        cfg,
    );
    let (loss, d_out) = velocity_mse(&v.tokens, z_hr, eps);

    let want_sr = stage == 0;
    let (sr_grads, lr_cross, ref_cross) = backward_sr(&d_out, &sr_trace, &state.sr, cfg, want_sr);
    let mut grads = LossGrads {
        sr: sr_grads,
        lr: None,
        reference: None,
    };
    match stage {
        1 => {
            let trace = lr_trace.expect("stage-1 LR trace");
            let w = state.lr.as_ref().expect("LR weights");
            grads.lr = Some(backward_cached_branch(&trace, w, cfg, &lr_cross));
        }
        2 => {
            let trace = ref_trace.expect("stage-2 reference trace");
            let w = state.reference.as_ref().expect("reference weights");
            grads.reference = Some(backward_cached_branch(&trace, w, cfg, &ref_cross));
        }
        _ => {}
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct StageResult {
    pub trace: Vec<TraceRow>,
    pub checkpoint_path: PathBuf,
    pub trace_csv_path: PathBuf,
}

struct TrainSample {
    hr: ImageBuffer,
    lr_up: Option<ImageBuffer>,
    aligned_ref: Option<ImageBuffer>,
}

fn load_stage_data(
    manifest: &Manifest,
    stage: u8,
    max_samples: Option<usize>,
) -> Result<Vec<TrainSample>> {
    let rows: Vec<_> = manifest.rows_in_split(Split::Train).collect();
    if rows.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let rows = match max_samples {
        Some(cap) => &rows[..rows.len().min(cap)],
        None => &rows[..],
    };
    rows.par_iter()
        .map(|row| {
            let hr = load_image(&row.hr_path)?;
            let lr_up = if stage >= 1 {
                let lr = load_image(&row.lr_path)?;
                Some(resize_bicubic(&lr, hr.width, hr.height)?)
            } else {
                None
            };
            let aligned_ref = if stage == 2 {
                // Ground-truth alignment of the reference view; regions the
                // homography maps outside the reference composite to white.
                let reference = load_image(&row.ref_path)?;
                let field = homography_field(
                    &row.homography,
                    hr.width,
                    hr.height,
                    reference.width,
                    reference.height,
                );
                let white = ImageBuffer::constant(hr.width, hr.height, 3, 1.0);
                Some(compose_reference(&reference, &field, &white)?)
            } else {
                None
            };
            Ok(TrainSample {
                hr,
                lr_up,
                aligned_ref,
            })
        })
        .collect()
}

pub fn checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

fn grad_norm<T: Real>(g: &BranchWeights<T>) -> f64 {
    let mut acc = 0f64;
    for (_, _, data) in g.named_tensors() {
        for v in data {
            let x = v.to_f64();
            acc += x * x;
        }
    }
    acc.sqrt()
}

/// Optimizer loop for one stage: linear warmup, global-norm gradient
/// clipping, fixed batch/augmentation streams per step so loss traces are
/// reproducible for a seed regardless of data-loading parallelism.
pub fn run_stage(
    manifest: &Manifest,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    out_dir: impl AsRef<Path>,
) -> Result<StageResult> {
    tcfg.validate()?;
    mcfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Assemble branch state from prerequisite checkpoints.
    let mut state: ModelState<f32> = match tcfg.stage {
        0 => ModelState {
            sr: BranchWeights::init(mcfg, RngState::new(tcfg.seed, 0xB00).next_u64()),
            lr: None,
            reference: None,
        },
        1 => {
            let prev = out_dir.join(checkpoint_name(0));
            let ck = load_checkpoint(&prev).map_err(|_| Error::MissingCheckpoint {
                stage: 1,
                hint: format!("{} not found; run stage 0 first", prev.display()),
            })?;
            if ck.config != *mcfg {
                return Err(Error::BadCheckpoint("stage-0 config mismatch".into()));
            }
            let mut sr = ck.branch("sr")?.clone();
            sr.frozen = true;
            // The conditioning branch starts from the trained prior, so its
            // cached keys/values begin in the representation the frozen
            // attention already understands.
            let mut lr = sr.clone();
            lr.frozen = false;
            ModelState {
                sr,
                lr: Some(lr),
                reference: None,
            }
        }
        _ => {
            let prev = out_dir.join(checkpoint_name(1));
            let ck = load_checkpoint(&prev).map_err(|_| Error::MissingCheckpoint {
                stage: 2,
                hint: format!("{} not found; run stage 1 first", prev.display()),
            })?;
            if ck.config != *mcfg {
                return Err(Error::BadCheckpoint("stage-1 config mismatch".into()));
            }
            let mut sr = ck.branch("sr")?.clone();
            let mut lr = ck.branch("lr")?.clone();
            sr.frozen = true;
            lr.frozen = true;
            let mut reference = lr.clone();
            reference.frozen = false;
            ModelState {
                sr,
                lr: Some(lr),
                reference: Some(reference),
            }
        }
    };

    let data = load_stage_data(manifest, tcfg.stage, tcfg.max_train_samples)?;
    let n_data = data.len();
    let mut adam = AdamState::<f32>::new(mcfg);
    let mut trace = Vec::with_capacity(tcfg.steps);

    let crop = mcfg.image_size;
    for step in 0..tcfg.steps {
        let mut idx_rng = RngState::new(tcfg.seed ^ 0xBA7C_4000, step as u64);
        let indices: Vec<usize> = (0..tcfg.batch)
            .map(|_| idx_rng.uniform_int(n_data as u64) as usize)
            .collect();

        let per_slot: Vec<Result<(f64, LossGrads<f32>)>> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let sample = &data[idx];
                let mut rng = RngState::new(
                    tcfg.seed ^ 0x5A39_7100,
                    (step * tcfg.batch + slot) as u64,
                );
                let (hr, lr_up, aligned_ref) = augment_sample(
                    &sample.hr,
                    sample.lr_up.as_ref(),
                    sample.aligned_ref.as_ref(),
                    &tcfg.augment,
                    crop,
                    &mut rng,
                )?;
                let z_hr = patchify::<f32>(&hr, mcfg)?;
                let z_lr = lr_up.map(|img| patchify::<f32>(&img, mcfg)).transpose()?;
                let z_ref = aligned_ref
                    .map(|img| patchify::<f32>(&img, mcfg))
                    .transpose()?;
                let t = rng.uniform();
                let mut eps = LatentGrid::<f32>::zeros(z_hr.grid_w, z_hr.grid_h, mcfg.dim);
                for v in eps.tokens.data.iter_mut() {
                    *v = rng.normal_f32();
                }
                flow_loss(
                    &z_hr,
                    z_lr.as_ref(),
                    z_ref.as_ref(),
                    &state,
                    tcfg.stage,
                    t,
                    &eps,
                    mcfg,
                )
            })
            .collect();

        // Fixed-order reduction keeps traces independent of thread count.
        let mut mean_loss = 0f64;
        let mut total = BranchWeights::<f32>::zeros(mcfg);
        for r in per_slot {
            let (loss, grads) = r?;
            mean_loss += loss;
            let g = grads.trainable().ok_or_else(|| {
                Error::InvalidArgument("no trainable gradients for stage".into())
            })?;
            total.accumulate(g, 1.0 / tcfg.batch as f32);
        }
        mean_loss /= tcfg.batch as f64;

        let norm = grad_norm(&total);
        if norm > tcfg.grad_clip {
            let scale = (tcfg.grad_clip / norm) as f32;
            for (_, t) in total.named_tensors_mut() {
                for v in t {
                    *v *= scale;
                }
            }
        }
        let lr_t = tcfg.learning_rate
            * if tcfg.warmup_steps > 0 {
                ((step + 1) as f64 / tcfg.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
        let target = match tcfg.stage {
            0 => &mut state.sr,
            1 => state.lr.as_mut().expect("LR branch"),
            _ => state.reference.as_mut().expect("reference branch"),
        };
        adam.update(target, &total, lr_t);
        trace.push(TraceRow {
            step,
            stage: tcfg.stage,
            loss: mean_loss,
            grad_norm: norm,
            lr: lr_t,
        });
    }

    // Persist the checkpoint (trained branch plus untouched predecessors)
    // and the loss trace.
    let echo = format!("{}{}", mcfg.to_kv(), tcfg.to_kv());
    let ckpt_path = out_dir.join(checkpoint_name(tcfg.stage));
    state.sr.frozen = true;
    let mut branches: Vec<(&str, &BranchWeights<f32>)> = vec![("sr", &state.sr)];
    if let Some(lr) = state.lr.as_mut() {
        lr.frozen = true;
        branches.push(("lr", lr));
    }
    if let Some(rf) = state.reference.as_mut() {
        rf.frozen = true;
        branches.push(("ref", rf));
    }
    save_checkpoint(&ckpt_path, &echo, &branches)?;

    let csv_path = out_dir.join(format!("stage{}_loss.csv", tcfg.stage));
    let mut csv = String::from("step,stage,loss,grad_norm,lr\n");
    for row in &trace {
        csv.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9}\n",
            row.step, row.stage, row.loss, row.grad_norm, row.lr
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(StageResult {
        trace,
        checkpoint_path: ckpt_path,
        trace_csv_path: csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::noise_latent;

    fn mini_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 4,
            patch: 2,
            channels: 3,
            dim: 16,
            heads: 2,
            layers: 2,
            ref_layers: 2,
            kscale: 1.0,
            sample_steps: 2,
        }
    }

    #[test]
    fn perfect_velocity_stub_has_zero_loss() {
        let z_hr = noise_latent::<f64>(2, 2, 16, 1);
        let eps = noise_latent::<f64>(2, 2, 16, 2);
        let mut v = eps.tokens.clone();
        for (a, &b) in v.data.iter_mut().zip(z_hr.tokens.data.iter()) {
            *a -= b;
        }
        let (loss, d) = velocity_mse(&v, &z_hr, &eps);
        assert_eq!(loss, 0.0);
        assert!(d.data.iter().all(|&x| x.abs() < 1e-8));
    }

    #[test]
    fn zero_velocity_stub_matches_scalar_oracle() {
        let z_hr = noise_latent::<f64>(2, 2, 16, 3);
        let eps = noise_latent::<f64>(2, 2, 16, 4);
        let v = Mat::<f64>::zeros(4, 16);
        let (loss, _) = velocity_mse(&v, &z_hr, &eps);
        let mut oracle = 0f64;
        for i in 0..64 {
            let t = eps.tokens.data[i] - z_hr.tokens.data[i];
            oracle += t * t;
        }
        oracle /= 64.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn stage2_gradients_only_touch_reference_branch() {
        let cfg = mini_cfg();
        let state = ModelState {
            sr: BranchWeights::<f64>::init(&cfg, 1),
            lr: Some(BranchWeights::<f64>::init(&cfg, 2)),
            reference: Some(BranchWeights::<f64>::init(&cfg, 3)),
        };
        let z_hr = noise_latent::<f64>(2, 2, cfg.dim, 10);
        let z_lr = noise_latent::<f64>(2, 2, cfg.dim, 11);
        let z_ref = noise_latent::<f64>(2, 2, cfg.dim, 12);
        let eps = noise_latent::<f64>(2, 2, cfg.dim, 13);
        let (loss, grads) = flow_loss(
            &z_hr,
            Some(&z_lr),
            Some(&z_ref),
            &state,
            2,
            0.4,
            &eps,
            &cfg,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(grads.sr.is_none(), "frozen SR must receive no gradients");
        assert!(grads.lr.is_none(), "frozen LR must receive no gradients");
        let g = grads.reference.expect("reference gradients");
        assert!(grad_norm(&g) > 0.0);
    }

    #[test]
    fn stage0_trains_sr_only() {
        let cfg = mini_cfg();
        let state = ModelState {
            sr: BranchWeights::<f64>::init(&cfg, 1),
            lr: None,
            reference: None,
        };
        let z_hr = noise_latent::<f64>(2, 2, cfg.dim, 20);
        let eps = noise_latent::<f64>(2, 2, cfg.dim, 21);
        let (_, grads) = flow_loss(&z_hr, None, None, &state, 0, 0.6, &eps, &cfg).unwrap();
        assert!(grads.sr.is_some());
        assert!(grads.lr.is_none());
        assert!(grads.reference.is_none());
    }

    #[test]
    fn invalid_grad_clip_rejected() {
        let tcfg = TrainConfig {
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        assert!(tcfg.validate().is_err());
    }
}
