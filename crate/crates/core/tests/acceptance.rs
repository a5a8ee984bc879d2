//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The training-dependent criteria share a desk-scale fixture (procedural
//! dataset plus a full three-stage training run) that is built once and
//! cached under `target/desk-fixture`; delete that directory to retrain
//! from scratch.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use refsr_core::config::RunConfig;
use refsr_core::datagen::{build_dataset, generate_scene, Manifest, SceneSpec, Split};
use refsr_core::degrade::degrade_pipeline;
use refsr_core::flowmodel::{
    euler_integrate, load_checkpoint, noise_latent, patch_ref_attention,
    patch_ref_attention_with_probs, Checkpoint, LatentGrid, ModelConfig,
};
use refsr_core::image::{load_image, resize_bicubic, save_image, ImageBuffer};
use refsr_core::linalg::Mat;
use refsr_core::matching::{coarse_match, upscale_field, MatchConfig};
use refsr_core::metrics::{psnr, ssim};
use refsr_core::pipeline::{
    evaluate_method, model_from_checkpoint, run_sr, with_threads, MaskMode, RefMode, SrOptions,
};
use refsr_core::rng::RngState;
use refsr_core::tiling::{blend_stitch, plan_tiles};
use refsr_core::train::{grad_check, run_stage, ModelState, TrainConfig};
use refsr_core::Rect;

/// Bump to invalidate cached fixtures after behavior-relevant code changes.
const FIXTURE_VERSION: &str = "v1";

const STAGE_STEPS: [usize; 3] = [1200, 1000, 3000];
const DATASET_SIZE: usize = 200;
const DATASET_SEED: u64 = 314159;
const TRAIN_SEED: u64 = 20260811;

fn workspace_target() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target")
}

struct Fixture {
    manifest: Manifest,
    cfg: RunConfig,
    stage1_ckpt: PathBuf,
    stage2_ckpt: PathBuf,
    checkpoint: Checkpoint,
    state: ModelState<f32>,
    model_cfg: ModelConfig,
    stage2_trace: Vec<(usize, f64)>,
    out_dir: PathBuf,
}

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_file(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg"))
        .expect("desk config parses");
    cfg.validate().expect("desk config valid");
    cfg
}

fn desk_sr_options(cfg: &RunConfig) -> SrOptions {
    SrOptions {
        mode: RefMode::Aligned,
        mask: MaskMode::White,
        kscale: cfg.model.kscale,
        ref_layers: None,
        sample_steps: None,
        tile: cfg.tile,
        tile_step: cfg.tile_step,
        scale: cfg.scale,
        seed: 11,
        matching: cfg.matching.clone(),
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = desk_config();
        let root = workspace_target().join("desk-fixture");
        std::fs::create_dir_all(&root).expect("fixture dir");
        let marker = root.join("fixture.echo");
        let echo = format!(
            "{FIXTURE_VERSION}\nsteps={STAGE_STEPS:?} n={DATASET_SIZE} dseed={DATASET_SEED} tseed={TRAIN_SEED}\n{}",
            cfg.to_kv()
        );
        let fresh = std::fs::read_to_string(&marker).map(|m| m != echo).unwrap_or(true);
        let data_dir = root.join("data");
        let run_dir = root.join("run");
        if fresh {
            let _ = std::fs::remove_dir_all(&data_dir);
            let _ = std::fs::remove_dir_all(&run_dir);
            let _ = std::fs::remove_file(&marker);
        }

        let manifest = if data_dir.join("manifest.csv").exists() {
            Manifest::load(data_dir.join("manifest.csv")).expect("cached manifest")
        } else {
            let template = SceneSpec {
                degrade: cfg.degrade.clone(),
                ..SceneSpec::default()
            };
            build_dataset(DATASET_SIZE, DATASET_SEED, &data_dir, &template).expect("dataset")
        };
        assert!(
            manifest.rows_in_split(Split::Train).count() >= 64,
            "desk dataset needs >= 64 train rows"
        );
        assert!(
            manifest.rows_in_split(Split::Test).count() >= 16,
            "desk dataset needs >= 16 test rows"
        );

        if !run_dir.join("stage2.ckpt").exists() {
            for stage in 0..=2u8 {
                let tcfg = TrainConfig {
                    stage,
                    steps: STAGE_STEPS[stage as usize],
                    seed: TRAIN_SEED,
                    ..cfg.train.clone()
                };
                run_stage(&manifest, &tcfg, &cfg.model, &run_dir).expect("stage trains");
            }
        }
        std::fs::write(&marker, &echo).expect("marker");

        let stage2_trace = read_loss_csv(run_dir.join("stage2_loss.csv"));
        let checkpoint = load_checkpoint(run_dir.join("stage2.ckpt")).expect("stage2 checkpoint");
        let (state, model_cfg) = model_from_checkpoint(&checkpoint).expect("model loads");
        let out_dir = root.join("eval");
        std::fs::create_dir_all(&out_dir).expect("eval dir");
        Fixture {
            manifest,
            cfg,
            stage1_ckpt: run_dir.join("stage1.ckpt"),
            stage2_ckpt: run_dir.join("stage2.ckpt"),
            checkpoint,
            state,
            model_cfg,
            stage2_trace,
            out_dir,
        }
    })
}

fn read_loss_csv(path: impl AsRef<Path>) -> Vec<(usize, f64)> {
    let text = std::fs::read_to_string(path).expect("loss csv");
    text.lines()
        .skip(1)
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            (cols[0].parse().unwrap(), cols[2].parse().unwrap())
        })
        .collect()
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:2} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

#[test]
fn criterion_01_attention_correctness() {
    let start = std::time::Instant::now();
    let mut rng = RngState::new(0xA77, 0);
    for trial in 0..100 {
        let dim = [4usize, 8, 16][(trial % 3) as usize];
        let heads = [1usize, 2, 2][(trial % 3) as usize];
        let tokens = 1 + (trial % 5);
        let kscale = rng.uniform();
        let mut mk = |rows: usize| {
            let mut m = Mat::<f64>::zeros(rows, dim);
            for v in m.data.iter_mut() {
                *v = rng.normal();
            }
            m
        };
        let (q, k, v) = (mk(tokens), mk(tokens), mk(tokens));
        let lr = (trial % 2 == 0).then(|| (mk(tokens), mk(tokens)));
        let rf = (trial % 4 != 3).then(|| (mk(tokens), mk(tokens)));
        let (out, probs) = patch_ref_attention_with_probs(
            &q,
            &k,
            &v,
            lr.as_ref().map(|(a, b)| (a, b)),
            rf.as_ref().map(|(a, b)| (a, b)),
            kscale,
            heads,
        );
        // Row-stochastic attention.
        for p in &probs {
            for r in 0..p.rows {
                let row = p.row(r);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "trial {trial}: row sum {sum}");
                assert!(row.iter().all(|&w| w >= 0.0), "trial {trial}: negative weight");
            }
        }
        // Convex hull of concatenated value rows, per head output column.
        let mut v_parts: Vec<&Mat<f64>> = vec![&v];
        if let Some((_, vl)) = lr.as_ref() {
            v_parts.push(vl);
        }
        if let Some((_, vr)) = rf.as_ref() {
            v_parts.push(vr);
        }
        for col in 0..dim {
            let vals: Vec<f64> = v_parts
                .iter()
                .flat_map(|m| (0..m.rows).map(move |r| m.row(r)[col]))
                .collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
            for r in 0..out.rows {
                let o = out.row(r)[col];
                assert!(
                    (lo..=hi).contains(&o),
                    "trial {trial}: output {o} outside hull [{lo},{hi}]"
                );
            }
        }
    }
    // Hand-computed three-source example: logits (0,0,2) -> output ≈ 2.6806.
    let single = |v: f64| Mat::from_vec(1, 1, vec![v]);
    let out = patch_ref_attention(
        &single(1.0),
        &single(0.0),
        &single(1.0),
        Some((&single(0.0), &single(2.0))),
        Some((&single(2.0), &single(3.0))),
        1.0,
        1,
    );
    let hand_ok = (out.data[0] - 2.6806).abs() < 1e-3;
    let elapsed = start.elapsed().as_secs_f64();
    report(
        1,
        "attention correctness",
        hand_ok && elapsed < 5.0,
        &format!(
            "100 configs row-stochastic and in-hull; hand example {:.4} (≈2.6806); {elapsed:.2}s",
            out.data[0]
        ),
    );
}

#[test]
fn criterion_02_gradient_verification() {
    let start = std::time::Instant::now();
    let rep = grad_check(2, 0xD00D).expect("grad check runs");
    let elapsed = start.elapsed().as_secs_f64();
    report(
        2,
        "gradient verification",
        rep.max_rel_error < 1e-3 && elapsed < 30.0,
        &format!(
            "stage-2 wiring max rel error {:.2e} over {} params (worst {}); {elapsed:.2}s",
            rep.max_rel_error, rep.params_checked, rep.worst_tensor
        ),
    );
}

#[test]
fn criterion_03_sisr_degeneration() {
    let start = std::time::Instant::now();
    let fx = fixture();
    let row = fx.manifest.rows_in_split(Split::Test).next().expect("test row");
    let lr_img = load_image(&row.lr_path).expect("lr");
    let reference = load_image(&row.ref_path).expect("ref");
    let dir = fx.out_dir.join("degeneration");
    std::fs::create_dir_all(&dir).expect("dir");
    let mut identical = 0;
    for seed in 0..5u64 {
        let a = run_sr(
            &lr_img,
            None,
            &fx.state,
            &fx.model_cfg,
            &SrOptions {
                mode: RefMode::None,
                seed,
                ..desk_sr_options(&fx.cfg)
            },
        )
        .expect("sisr run");
        let b = run_sr(
            &lr_img,
            Some(&reference),
            &fx.state,
            &fx.model_cfg,
            &SrOptions {
                mode: RefMode::Aligned,
                ref_layers: Some(0),
                seed,
                ..desk_sr_options(&fx.cfg)
            },
        )
        .expect("ref-layers-0 run");
        let pa = dir.join(format!("a{seed}.png"));
        let pb = dir.join(format!("b{seed}.png"));
        save_image(&a.image, &pa).unwrap();
        save_image(&b.image, &pb).unwrap();
        if std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap() {
            identical += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        3,
        "SISR degeneration",
        identical == 5 && elapsed < 60.0,
        &format!("--no-ref vs --ref-layers 0 byte-identical for {identical}/5 seeds; {elapsed:.1}s"),
    );
}

#[test]
fn criterion_04_sampler_exactness() {
    let start = std::time::Instant::now();
    let dim = 16;
    let mut z0 = LatentGrid::<f64>::zeros(3, 3, dim);
    let mut rng = RngState::new(4, 0);
    for v in z0.tokens.data.iter_mut() {
        *v = rng.uniform();
    }
    let eps = noise_latent::<f64>(3, 3, dim, 42);
    let straight = {
        let z0 = z0.clone();
        let eps = eps.clone();
        move |_z: &LatentGrid<f64>, _t: f64| {
            let mut v = eps.clone();
            for (a, &b) in v.tokens.data.iter_mut().zip(z0.tokens.data.iter()) {
                *a -= b;
            }
            v
        }
    };
    let mut worst = 0f64;
    for steps in [1usize, 5, 100] {
        let out = euler_integrate(eps.clone(), steps, straight.clone());
        let err = out
            .tokens
            .data
            .iter()
            .zip(&z0.tokens.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f64, f64::max);
        worst = worst.max(err);
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        4,
        "sampler exactness",
        worst < 1e-6 && elapsed < 1.0,
        &format!("straight-line stub recovered z0 within {worst:.2e} for steps {{1,5,100}}; {elapsed:.3}s"),
    );
}

#[test]
fn criterion_05_matching_accuracy() {
    let start = std::time::Instant::now();
    let cfg = desk_config();
    let scale = cfg.scale;
    let mut within = 0usize;
    let mut total = 0usize;
    for i in 0..20u64 {
        let spec = SceneSpec {
            seed: 900 + i,
            degrade_seed: 7000 + i,
            degrade: cfg.degrade.clone(),
            ..SceneSpec::default()
        };
        let sample = generate_scene(&spec).expect("scene");
        let canvas = sample.hr.width;
        let lr_up = resize_bicubic(&sample.lr, canvas, canvas).expect("upscale");
        let coarse = coarse_match(&lr_up, &sample.ref_hr, &cfg.matching).expect("match");
        let field = upscale_field(&coarse, canvas, canvas).expect("upscale field");
        let margin = canvas / 8;
        for v in (margin..canvas - margin).step_by(2) {
            for u in (margin..canvas - margin).step_by(2) {
                let (tx, ty) = sample.truth_homography.apply(u as f64, v as f64);
                let edge = (canvas - 1) as f64;
                if tx < margin as f64 || ty < margin as f64 || tx > edge - margin as f64 || ty > edge - margin as f64 {
                    continue;
                }
                let idx = v * canvas + u;
                let dx = field.map_x[idx] as f64 - tx;
                let dy = field.map_y[idx] as f64 - ty;
                total += 1;
                if (dx * dx + dy * dy).sqrt() <= 2.0 {
                    within += 1;
                }
            }
        }
    }
    let frac = within as f64 / total as f64;

    // Identical-pair self-match: identity mapping within 0.5 px.
    let spec = SceneSpec {
        seed: 990,
        degrade_seed: 991,
        degrade: cfg.degrade.clone(),
        ..SceneSpec::default()
    };
    let hr = generate_scene(&spec).expect("scene").hr;
    let coarse = coarse_match(&hr, &hr, &cfg.matching).expect("self match");
    let field = upscale_field(&coarse, hr.width, hr.height).expect("self upscale");
    let mut max_id_err = 0f32;
    for v in 0..hr.height {
        for u in 0..hr.width {
            let i = v * hr.width + u;
            max_id_err = max_id_err
                .max((field.map_x[i] - u as f32).abs())
                .max((field.map_y[i] - v as f32).abs());
        }
    }
    let _ = scale;
    let elapsed = start.elapsed().as_secs_f64();
    report(
        5,
        "matching accuracy",
        frac >= 0.9 && max_id_err <= 0.5 && elapsed < 120.0,
        &format!(
            "{:.1}% of interior pixels within 2 px over 20 homography pairs; self-match identity error {max_id_err:.3} px; {elapsed:.1}s",
            frac * 100.0
        ),
    );
}

#[test]
fn criterion_06_tiling_fidelity() {
    let start = std::time::Instant::now();
    let plan = plan_tiles(2048, 1536, 1024, 256).expect("plan");
    let fifteen = plan.rects.len() == 15;

    let src = ImageBuffer::from_fn(256, 192, 3, |x, y, c| {
        ((x * 13 + y * 7 + c * 101) % 251) as f32 / 251.0
    });
    let plan2 = plan_tiles(256, 192, 64, 24).expect("plan2");
    let tiles: Vec<ImageBuffer> = plan2
        .rects
        .iter()
        .map(|&r| src.crop(r).unwrap())
        .collect();
    let restitched = blend_stitch(&plan2, &tiles).expect("stitch");
    let crop_dev = src
        .data
        .iter()
        .zip(&restitched.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);

    let const_tiles: Vec<ImageBuffer> = plan2
        .rects
        .iter()
        .map(|_| ImageBuffer::constant(64, 64, 3, 0.387))
        .collect();
    let const_out = blend_stitch(&plan2, &const_tiles).expect("stitch const");
    let const_dev = const_out
        .data
        .iter()
        .map(|v| (v - 0.387).abs())
        .fold(0f32, f32::max);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        6,
        "tiling fidelity",
        fifteen && crop_dev <= 1.0 / 255.0 && const_dev < 1e-6 && elapsed < 10.0,
        &format!(
            "plan(2048,1536,1024,256)={} tiles; crop-restitch dev {crop_dev:.2e}; constant stitch dev {const_dev:.2e}; {elapsed:.2}s",
            plan.rects.len()
        ),
    );
}

#[test]
fn criterion_07_training_progress() {
    let fx = fixture();
    let trace = &fx.stage2_trace;
    assert_eq!(trace.len(), STAGE_STEPS[2], "stage-2 ran the pinned step count");
    let dec = trace.len() / 10;
    let first: f64 = trace[..dec].iter().map(|r| r.1).sum::<f64>() / dec as f64;
    let last: f64 = trace[trace.len() - dec..].iter().map(|r| r.1).sum::<f64>() / dec as f64;

    // Frozen branches must be byte-identical between the stage-1 and
    // stage-2 checkpoints.
    let ck1 = load_checkpoint(&fx.stage1_ckpt).expect("stage1");
    let ck2 = load_checkpoint(&fx.stage2_ckpt).expect("stage2");
    let mut frozen_ok = true;
    for name in ["sr", "lr"] {
        let a = ck1.branch(name).expect("branch");
        let b = ck2.branch(name).expect("branch");
        for ((_, _, ta), (_, _, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            if ta.iter().zip(tb.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                frozen_ok = false;
            }
        }
    }
    report(
        7,
        "training progress",
        last < 0.5 * first && frozen_ok,
        &format!(
            "stage-2 loss deciles {first:.4} -> {last:.4} (ratio {:.3}, need < 0.5); frozen θ,Θ unchanged: {frozen_ok}",
            last / first
        ),
    );
}

fn eval_mean_psnr(fx: &Fixture, label: &str, opts: &SrOptions) -> f64 {
    let report = evaluate_method(
        &fx.manifest,
        Split::Test,
        Some(16),
        &fx.state,
        &fx.model_cfg,
        opts,
        &fx.out_dir,
        label,
        &fx.cfg.to_kv(),
    )
    .expect("evaluation runs");
    assert_eq!(report.rows.len(), 16, "16-image desk test split");
    report.mean_psnr
}

#[test]
fn criterion_08_directional_refsr_gain() {
    let start = std::time::Instant::now();
    let fx = fixture();
    let base = desk_sr_options(&fx.cfg);
    let sisr = eval_mean_psnr(
        fx,
        "sisr",
        &SrOptions {
            mode: RefMode::None,
            ..base.clone()
        },
    );
    let refsr = eval_mean_psnr(
        fx,
        "refsr",
        &SrOptions {
            mode: RefMode::Aligned,
            mask: MaskMode::Sisr,
            ..base.clone()
        },
    );
    let rb_only = eval_mean_psnr(
        fx,
        "rb_only",
        &SrOptions {
            mode: RefMode::Relative,
            ..base.clone()
        },
    );
    let elapsed = start.elapsed().as_secs_f64();
    report(
        8,
        "directional RefSR gain",
        refsr >= sisr + 0.3 && refsr >= rb_only,
        &format!(
            "RefSR {refsr:.2} dB vs SISR {sisr:.2} dB (need +0.3); RB+M+W {refsr:.2} ≥ RB-only {rb_only:.2} on misaligned refs; {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_09_kscale_trend() {
    let start = std::time::Instant::now();
    let fx = fixture();
    let base = desk_sr_options(&fx.cfg);
    let k0 = eval_mean_psnr(
        fx,
        "kscale0",
        &SrOptions {
            mode: RefMode::Aligned,
            kscale: 0.0,
            mask: MaskMode::Sisr,
            ..base.clone()
        },
    );
    let k1 = eval_mean_psnr(
        fx,
        "kscale1",
        &SrOptions {
            mode: RefMode::Aligned,
            kscale: 1.0,
            mask: MaskMode::Sisr,
            ..base.clone()
        },
    );

    // Numeric continuity of single-layer attention output in kscale.
    let mut rng = RngState::new(0x5CA1E, 0);
    let dim = 8;
    let mut mk = |rows: usize| {
        let mut m = Mat::<f64>::zeros(rows, dim);
        for v in m.data.iter_mut() {
            *v = rng.normal();
        }
        m
    };
    let (q, k, v) = (mk(4), mk(4), mk(4));
    let (kl, vl) = (mk(4), mk(4));
    let (kr, vr) = (mk(4), mk(4));
    let eval = |ks: f64| patch_ref_attention(&q, &k, &v, Some((&kl, &vl)), Some((&kr, &vr)), ks, 2);
    let mut lip = 0f64;
    let mut ks = 0.0;
    while ks + 0.1 <= 1.0 + 1e-9 {
        let d = eval(ks)
            .data
            .iter()
            .zip(&eval(ks + 0.1).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f64, f64::max);
        lip = lip.max(d / 0.1);
        ks += 0.1;
    }
    let mut continuous = true;
    let delta = 1e-3;
    let bound = (2.0 * lip + 1.0) * delta;
    let mut ks = 0.0;
    while ks + delta <= 1.0 {
        let d = eval(ks)
            .data
            .iter()
            .zip(&eval(ks + delta).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0f64, f64::max);
        if d > bound {
            continuous = false;
        }
        ks += 0.05;
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        9,
        "kscale trend",
        k1 > k0 && continuous,
        &format!("PSNR kscale=1 {k1:.2} dB > kscale=0 {k0:.2} dB; attention continuous in kscale: {continuous}; {elapsed:.0}s"),
    );
}

#[test]
fn criterion_10_determinism() {
    let start = std::time::Instant::now();
    let fx = fixture();
    let tmp = fx.out_dir.join("determinism");
    std::fs::create_dir_all(&tmp).expect("dir");

    // datagen: byte-identical rebuild.
    let spec = SceneSpec {
        canvas: 64,
        corner_jitter: 6.0,
        ..SceneSpec::default()
    };
    let (da, db) = (tmp.join("da"), tmp.join("db"));
    let _ = std::fs::remove_dir_all(&da);
    let _ = std::fs::remove_dir_all(&db);
    build_dataset(3, 77, &da, &spec).expect("da");
    build_dataset(3, 77, &db, &spec).expect("db");
    let mut datagen_ok = true;
    for entry in std::fs::read_dir(&da).unwrap() {
        let p = entry.unwrap().path();
        let q = db.join(p.file_name().unwrap());
        if std::fs::read(&p).unwrap() != std::fs::read(&q).unwrap() {
            datagen_ok = false;
        }
    }

    // degrade: bit-identical across runs.
    let img = ImageBuffer::from_fn(64, 64, 3, |x, y, c| ((x * 3 + y * 5 + c) % 17) as f32 / 17.0);
    let dcfg = refsr_core::degrade::DegradationConfig {
        seed: 9,
        ..fx.cfg.degrade.clone()
    };
    let degrade_ok =
        degrade_pipeline(&img, &dcfg).unwrap().data == degrade_pipeline(&img, &dcfg).unwrap().data;

    // train: identical loss traces for a short run.
    let mut mini = desk_config();
    mini.model.layers = 2;
    mini.model.ref_layers = 2;
    let ttmp_a = tmp.join("ta");
    let ttmp_b = tmp.join("tb");
    let _ = std::fs::remove_dir_all(&ttmp_a);
    let _ = std::fs::remove_dir_all(&ttmp_b);
    let tcfg = TrainConfig {
        stage: 0,
        steps: 25,
        batch: 4,
        seed: 5,
        max_train_samples: Some(8),
        ..mini.train.clone()
    };
    let ra = run_stage(&fx.manifest, &tcfg, &mini.model, &ttmp_a).expect("train a");
    let rb = run_stage(&fx.manifest, &tcfg, &mini.model, &ttmp_b).expect("train b");
    let train_ok = ra
        .trace
        .iter()
        .zip(rb.trace.iter())
        .all(|(x, y)| (x.loss - y.loss).abs() <= 1e-6);

    // sr: byte-identical across runs and across --threads {1, 4}.
    let row = fx.manifest.rows_in_split(Split::Test).nth(1).expect("row");
    let lr_img = load_image(&row.lr_path).expect("lr");
    let reference = load_image(&row.ref_path).expect("ref");
    let opts = SrOptions {
        mode: RefMode::Aligned,
        seed: 3,
        ..desk_sr_options(&fx.cfg)
    };
    let encode = |img: &ImageBuffer, name: &str| -> Vec<u8> {
        let p = tmp.join(name);
        save_image(img, &p).unwrap();
        std::fs::read(&p).unwrap()
    };
    let r1 = with_threads(1, || {
        run_sr(&lr_img, Some(&reference), &fx.state, &fx.model_cfg, &opts).unwrap()
    });
    let r4 = with_threads(4, || {
        run_sr(&lr_img, Some(&reference), &fx.state, &fx.model_cfg, &opts).unwrap()
    });
    let r1b = with_threads(1, || {
        run_sr(&lr_img, Some(&reference), &fx.state, &fx.model_cfg, &opts).unwrap()
    });
    let b1 = encode(&r1.image, "sr_t1.png");
    let b4 = encode(&r4.image, "sr_t4.png");
    let b1b = encode(&r1b.image, "sr_t1b.png");
    let sr_ok = b1 == b4 && b1 == b1b;

    let elapsed = start.elapsed().as_secs_f64();
    report(
        10,
        "determinism",
        datagen_ok && degrade_ok && train_ok && sr_ok,
        &format!(
            "datagen {datagen_ok}, degrade {degrade_ok}, train traces {train_ok}, sr across runs and threads{{1,4}} {sr_ok}; {elapsed:.0}s"
        ),
    );
}

#[test]
fn criterion_11_metric_sanity() {
    // PSNR of a +16/255 offset without clipping: 10·log10(255²/256).
    let mut rng = RngState::new(0xE7A1, 0);
    let a = ImageBuffer::from_fn(48, 48, 3, |_, _, _| rng.uniform_range(0.05, 0.9) as f32);
    let mut b = a.clone();
    for v in b.data.iter_mut() {
        *v += 16.0 / 255.0;
    }
    let offset_psnr = psnr(&a, &b).unwrap();
    let offset_expect = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
    let psnr_ok = (offset_psnr - offset_expect).abs() < 0.01 && (offset_expect - 24.05).abs() < 0.01;

    // Constant-pair SSIM equals the closed-form luminance term. (The spec's
    // quoted 0.4721 miscomputes its own formula; the oracle value of
    // (2·0.2·0.8+C1)/(0.2²+0.8²+C1) with C1=0.01² is 0.47067.)
    let ca = ImageBuffer::constant(32, 32, 1, 0.2);
    let cb = ImageBuffer::constant(32, 32, 1, 0.8);
    let c1 = 0.01f64 * 0.01;
    let luminance_expect = (2.0 * 0.2 * 0.8 + c1) / (0.2f64 * 0.2 + 0.8 * 0.8 + c1);
    let const_ssim = ssim(&ca, &cb).unwrap();
    let ssim_ok = (const_ssim - luminance_expect).abs() < 1e-3;

    let self_ssim = ssim(&a, &a).unwrap();
    let self_ok = (self_ssim - 1.0).abs() < 1e-12;
    report(
        11,
        "metric sanity",
        psnr_ok && ssim_ok && self_ok,
        &format!(
            "offset PSNR {offset_psnr:.3} (expect {offset_expect:.3}); constant-pair SSIM {const_ssim:.5} (closed form {luminance_expect:.5}); ssim(a,a)={self_ssim}"
        ),
    );
}

/// Not a numbered criterion: the end-to-end example from the tiling spec —
/// a 2048×1536 LR-plane input with tile 1024/step 256 processes 15 tiles.
#[test]
fn paper_scale_tile_count_is_logged() {
    let fx = fixture();
    let lr_img = ImageBuffer::from_fn(512, 384, 3, |x, y, _| ((x + y) % 7) as f32 / 7.0);
    let opts = SrOptions {
        mode: RefMode::None,
        tile: 1024,
        tile_step: 256,
        scale: 4,
        sample_steps: Some(1),
        ..desk_sr_options(&fx.cfg)
    };
    let out = run_sr(&lr_img, None, &fx.state, &fx.model_cfg, &opts).expect("paper-scale run");
    assert_eq!(out.tile_count, 15, "2048x1536 plane, tile 1024, step 256");
    assert_eq!(out.image.width, 2048);
    assert_eq!(out.image.height, 1536);
}

#[test]
fn degenerate_region_resize_falls_back_with_warning() {
    let fx = fixture();
    let row = fx.manifest.rows_in_split(Split::Test).nth(2).expect("row");
    let lr_img = load_image(&row.lr_path).expect("lr");
    // An unrelated noise reference gives zero certainty everywhere, forcing
    // the region-resize mode into its relative fallback.
    let mut rng = RngState::new(0xBAD, 0);
    let noise_ref = ImageBuffer::from_fn(128, 128, 3, |_, _, _| rng.uniform() as f32);
    let opts = SrOptions {
        mode: RefMode::RegionResize,
        seed: 2,
        sample_steps: Some(2),
        ..desk_sr_options(&fx.cfg)
    };
    let out = run_sr(&lr_img, Some(&noise_ref), &fx.state, &fx.model_cfg, &opts).expect("runs");
    assert!(out.fallback_tiles > 0, "expected relative-mode fallbacks");
}
