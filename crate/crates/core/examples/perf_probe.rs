use refsr_core::flowmodel::*;
use refsr_core::linalg::Mat;
use refsr_core::train::{flow_loss, ModelState};
use std::time::Instant;

fn timeit<R>(name: &str, iters: usize, mut f: impl FnMut() -> R) {
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(f());
    }
    println!("{name}: {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}

fn main() {
    let cfg = ModelConfig {
        image_size: 32,
        ..ModelConfig::default()
    };
    let sr = BranchWeights::<f32>::init(&cfg, 1);
    let lr_w = BranchWeights::<f32>::init(&cfg, 2);
    let ref_w = BranchWeights::<f32>::init(&cfg, 3);
    let z = noise_latent::<f32>(8, 8, cfg.dim, 5);
    let z_hr = noise_latent::<f32>(8, 8, cfg.dim, 6);
    let eps = noise_latent::<f32>(8, 8, cfg.dim, 7);

    timeit("branch_forward_cache (plain)", 50, || {
        branch_forward_cache(&z, &lr_w, &cfg, 0.0)
    });
    timeit("branch_forward_cache_traced", 50, || {
        branch_forward_cache_traced(&z, &ref_w, &cfg, 0.0)
    });
    let lr_cache = branch_forward_cache(&z, &lr_w, &cfg, 0.0);
    let ref_cache = branch_forward_cache(&z, &ref_w, &cfg, 0.0);
    timeit("velocity_forward (plain)", 50, || {
        velocity_forward(&z_hr, 0.5, Some(&lr_cache), Some(&ref_cache), &sr, &cfg)
    });
    timeit("velocity_forward_traced", 50, || {
        velocity_forward_traced(&z_hr, 0.5, Some(&lr_cache), Some(&ref_cache), &sr, &cfg)
    });
    let (_, trace) = velocity_forward_traced(&z_hr, 0.5, Some(&lr_cache), Some(&ref_cache), &sr, &cfg);
    let d_out = Mat::<f32>::zeros(64, cfg.dim);
    timeit("backward_sr (no param grads)", 50, || {
        backward_sr(&d_out, &trace, &sr, &cfg, false)
    });
    timeit("backward_sr (with param grads)", 50, || {
        backward_sr(&d_out, &trace, &sr, &cfg, true)
    });
    let (_, ref_trace) = branch_forward_cache_traced(&z, &ref_w, &cfg, 0.0);
    let (_, _, ref_cross) = backward_sr(&d_out, &trace, &sr, &cfg, false);
    timeit("backward_cached_branch", 50, || {
        backward_cached_branch(&ref_trace, &ref_w, &cfg, &ref_cross)
    });
    // whole stage-2 loss
    let state = ModelState { sr: sr.clone(), lr: Some(lr_w.clone()), reference: Some(ref_w.clone()) };
    timeit("flow_loss stage2 (one sample)", 30, || {
        flow_loss(&z_hr, Some(&z), Some(&z), &state, 2, 0.5, &eps, &cfg).unwrap()
    });
    timeit("flow_loss stage0 (one sample)", 30, || {
        flow_loss(&z_hr, None, None, &state, 0, 0.5, &eps, &cfg).unwrap()
    });
}
