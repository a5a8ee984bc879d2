//! Finite-difference verification of the hand-written backward passes.
//!
//! Runs the full staged loss on a miniature configuration in f64 and
//! compares every trainable parameter's analytic gradient against a central
//! difference with h = 1e-3.

use crate::error::{Error, Result};
use crate::flowmodel::{BranchWeights, LatentGrid, ModelConfig};
use crate::rng::RngState;
use crate::train::{flow_loss, LossGrads, ModelState};

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        image_size: 2,
        patch: 1,
        channels: 3,
        dim: 8,
        heads: 2,
        layers: 2,
        ref_layers: 2,
        kscale: 0.7,
        sample_steps: 2,
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub params_checked: usize,
}

/// Fill every tensor (including the zero-initialized residual projections)
/// with small random values so all backward paths carry signal.
fn randomize_all<T: crate::linalg::Real>(w: &mut BranchWeights<T>, rng: &mut RngState, scale: f64) {
    for (_, tensor) in w.named_tensors_mut() {
        for v in tensor {
            *v = T::of(scale * rng.normal());
        }
    }
    // Sane layer-norm gains.
    for lw in w.layers.iter_mut() {
        for g in lw.ln1_g.iter_mut().chain(lw.ln2_g.iter_mut()) {
            *g = T::of(1.0 + 0.05 * rng.normal());
        }
    }
    for g in w.lnf_g.iter_mut() {
        *g = T::of(1.0 + 0.05 * rng.normal());
    }
}

fn random_latent(grid: usize, dim: usize, rng: &mut RngState) -> LatentGrid<f64> {
    let mut z = LatentGrid::<f64>::zeros(grid, grid, dim);
    for v in z.tokens.data.iter_mut() {
        *v = rng.normal();
    }
    z
}

struct Fixture {
    state: ModelState<f64>,
    z_hr: LatentGrid<f64>,
    z_lr: LatentGrid<f64>,
    z_ref: LatentGrid<f64>,
    eps: LatentGrid<f64>,
    t: f64,
}

fn build_fixture(stage: u8, seed: u64, cfg: &ModelConfig) -> Fixture {
    let mut rng = RngState::new(seed, 0x47_43); // "GC"
    let mut sr = BranchWeights::<f64>::init(cfg, rng.next_u64());
    randomize_all(&mut sr, &mut rng, 0.08);
    let mut lr = BranchWeights::<f64>::init(cfg, rng.next_u64());
    randomize_all(&mut lr, &mut rng, 0.08);
    let mut reference = BranchWeights::<f64>::init(cfg, rng.next_u64());
    randomize_all(&mut reference, &mut rng, 0.08);
    sr.frozen = stage != 0;
    lr.frozen = stage != 1;
    let grid = cfg.grid_side();
    Fixture {
        state: ModelState {
            sr,
            lr: (stage >= 1).then_some(lr),
            reference: (stage >= 2).then_some(reference),
        },
        z_hr: random_latent(grid, cfg.dim, &mut rng),
        z_lr: random_latent(grid, cfg.dim, &mut rng),
        z_ref: random_latent(grid, cfg.dim, &mut rng),
        eps: random_latent(grid, cfg.dim, &mut rng),
        t: 0.05 + 0.9 * rng.uniform(),
    }
}

fn loss_of(f: &Fixture, stage: u8, cfg: &ModelConfig) -> Result<(f64, LossGrads<f64>)> {
    flow_loss(
        &f.z_hr,
        (stage >= 1).then_some(&f.z_lr),
        (stage >= 2).then_some(&f.z_ref),
        &f.state,
        stage,
        f.t,
        &f.eps,
        cfg,
    )
}

/// Compare analytic gradients of the stage loss against central finite
/// differences (h = 1e-3, f64). Frozen branches are asserted to receive no
/// gradients and are excluded from the comparison set.
pub fn grad_check(stage: u8, seed: u64) -> Result<GradCheckReport> {
    let cfg = mini_config();
    grad_check_with(stage, seed, &cfg)
}

pub fn grad_check_with(stage: u8, seed: u64, cfg: &ModelConfig) -> Result<GradCheckReport> {
    let mut fixture = build_fixture(stage, seed, cfg);
    let (_, grads) = loss_of(&fixture, stage, cfg)?;

    match stage {
        0 => {
            if grads.lr.is_some() || grads.reference.is_some() {
                return Err(Error::InvalidArgument(
                    "stage 0 produced gradients for absent branches".into(),
                ));
            }
        }
        1 => {
            if grads.sr.is_some() {
                return Err(Error::InvalidArgument(
                    "frozen SR branch received gradients in stage 1".into(),
                ));
            }
        }
        _ => {
            if grads.sr.is_some() || grads.lr.is_some() {
                return Err(Error::InvalidArgument(
                    "frozen branches received gradients in stage 2".into(),
                ));
            }
        }
    }
    let analytic = grads
        .trainable()
        .ok_or_else(|| Error::InvalidArgument("no trainable gradients".into()))?
        .clone();

    let grad_scale = analytic.max_abs().max(1e-12);
    let h = 1e-3;
    let mut max_rel = 0f64;
    let mut worst = String::new();
    let mut checked = 0usize;

    let tensor_names: Vec<(String, usize)> = analytic
        .named_tensors()
        .into_iter()
        .map(|(n, _, d)| (n, d.len()))
        .collect();

    for (tname, len) in tensor_names {
        for i in 0..len {
            let orig = {
                let branch = trainable_mut(&mut fixture.state, stage);
                let slot = tensor_slot(branch, &tname);
                let orig = slot[i];
                slot[i] = orig + h;
                orig
            };
            let (lp, _) = loss_of(&fixture, stage, cfg)?;
            {
                let branch = trainable_mut(&mut fixture.state, stage);
                tensor_slot(branch, &tname)[i] = orig - h;
            }
            let (lm, _) = loss_of(&fixture, stage, cfg)?;
            {
                let branch = trainable_mut(&mut fixture.state, stage);
                tensor_slot(branch, &tname)[i] = orig;
            }
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic_value(&analytic, &tname, i);
            let denom = an.abs().max(fd.abs()).max(1e-3 * grad_scale);
            let rel = (an - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{tname}[{i}]");
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_tensor: worst,
        params_checked: checked,
    })
}

fn trainable_mut<'a>(state: &'a mut ModelState<f64>, stage: u8) -> &'a mut BranchWeights<f64> {
    match stage {
        0 => &mut state.sr,
        1 => state.lr.as_mut().expect("LR branch"),
        _ => state.reference.as_mut().expect("reference branch"),
    }
}

fn tensor_slot<'a>(branch: &'a mut BranchWeights<f64>, name: &str) -> &'a mut [f64] {
    branch
        .named_tensors_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, d)| d)
        .expect("tensor exists")
}

fn analytic_value(grads: &BranchWeights<f64>, name: &str, i: usize) -> f64 {
    grads
        .named_tensors()
        .into_iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, _, d)| d[i])
        .expect("tensor exists")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage0_gradients_verify() {
        let report = grad_check(0, 41).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "stage 0: {} at {}",
            report.max_rel_error,
            report.worst_tensor
        );
    }

    #[test]
    fn stage1_gradients_verify() {
        let report = grad_check(1, 42).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "stage 1: {} at {}",
            report.max_rel_error,
            report.worst_tensor
        );
    }

    #[test]
    fn stage2_gradients_verify() {
        let report = grad_check(2, 43).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "stage 2: {} at {}",
            report.max_rel_error,
            report.worst_tensor
        );
    }

    #[test]
    fn partial_ref_depth_gradients_verify() {
        // ref_layers < layers: the deeper layer receives no injected
        // gradient, exercising the exclusion path.
        let cfg = ModelConfig {
            ref_layers: 1,
            ..mini_config()
        };
        let report = grad_check_with(2, 44, &cfg).unwrap();
        assert!(
            report.max_rel_error < 1e-3,
            "partial depth: {} at {}",
            report.max_rel_error,
            report.worst_tensor
        );
    }
}
