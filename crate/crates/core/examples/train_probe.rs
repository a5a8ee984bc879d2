use refsr_core::config::RunConfig;
use refsr_core::datagen::{build_dataset, Manifest, SceneSpec, Split};
use refsr_core::flowmodel::load_checkpoint;
use refsr_core::image::{load_image, resize_bicubic};
use refsr_core::matching::MatchConfig;
use refsr_core::metrics::psnr;
use refsr_core::pipeline::{model_from_checkpoint, run_sr, MaskMode, RefMode, SrOptions};
use refsr_core::train::{run_stage, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lrs: Vec<f64> = args
        .get(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or(vec![4e-4, 1e-3, 1e-3]);
    let steps: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or(vec![600, 600, 600]);
    let tag: String = args.get(3).cloned().unwrap_or("x".into());

    let dir = std::path::PathBuf::from("/tmp/probe");
    let data_dir = dir.join("data");
    let run_dir = dir.join(format!("run_{tag}"));
    std::fs::create_dir_all(&run_dir).unwrap();

    let mut cfg = RunConfig::default();
    cfg.model.image_size = 32;
    cfg.model.dim = 48;
    cfg.model.validate().unwrap();

    let manifest = if data_dir.join("manifest.csv").exists() {
        Manifest::load(data_dir.join("manifest.csv")).unwrap()
    } else {
        build_dataset(80, 1234, &data_dir, &SceneSpec::default()).unwrap()
    };

    for stage in 0..=2u8 {
        let tcfg = TrainConfig {
            stage,
            steps: steps[stage as usize],
            batch: 8,
            learning_rate: lrs[stage as usize],
            warmup_steps: 100,
            grad_clip: 1.0,
            seed: 7,
            max_train_samples: Some(64),
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let result = run_stage(&manifest, &tcfg, &cfg.model, &run_dir).unwrap();
        let n = result.trace.len();
        let dec = (n / 10).max(1);
        let head: f64 = result.trace[..dec].iter().map(|r| r.loss).sum::<f64>() / dec as f64;
        let tail: f64 = result.trace[n - dec..].iter().map(|r| r.loss).sum::<f64>() / dec as f64;
        println!(
            "stage {stage} lr {}: {:.0}s ({:.3}s/step) loss {:.4} -> {:.4} (ratio {:.3})",
            lrs[stage as usize],
            t0.elapsed().as_secs_f64(),
            t0.elapsed().as_secs_f64() / n as f64,
            head,
            tail,
            tail / head
        );
    }

    // t-bucket loss diagnostic on the trained stage-2 state
    {
        use refsr_core::flowmodel::*;
        use refsr_core::rng::RngState;
        use refsr_core::train::{flow_loss, ModelState};
        let ck = load_checkpoint(run_dir.join("stage2.ckpt")).unwrap();
        let (state, mcfg) = model_from_checkpoint(&ck).unwrap();
        let grid = mcfg.grid_side();
        let rows: Vec<_> = manifest.rows_in_split(Split::Train).take(8).collect();
        let mut buckets = [0f64; 5];
        let mut counts = [0usize; 5];
        for (ri, row) in rows.iter().enumerate() {
            let hr = load_image(&row.hr_path).unwrap();
            let lr_img = load_image(&row.lr_path).unwrap();
            let up = resize_bicubic(&lr_img, hr.width, hr.height).unwrap();
            let crop = |img: &refsr_core::ImageBuffer| img.crop(refsr_core::Rect::new(0, 0, 32, 32)).unwrap();
            let z_hr = patchify::<f32>(&crop(&hr), &mcfg).unwrap();
            let z_lr = patchify::<f32>(&crop(&up), &mcfg).unwrap();
            for bi in 0..5 {
                for rep in 0..4 {
                    let mut srng = RngState::new(999, (ri * 40 + bi * 8 + rep) as u64);
                    let t = (bi as f64 + srng.uniform()) / 5.0;
                    let mut eps = LatentGrid::<f32>::zeros(grid, grid, mcfg.dim);
                    for v in eps.tokens.data.iter_mut() { *v = srng.normal_f32(); }
                    let st = ModelState { sr: state.sr.clone(), lr: state.lr.clone(), reference: state.reference.clone() };
                    let (loss, _) = flow_loss(&z_hr, Some(&z_lr), Some(&z_hr), &st, 2, t, &eps, &mcfg).unwrap();
                    buckets[bi] += loss;
                    counts[bi] += 1;
                }
            }
        }
        for bi in 0..5 {
            println!("t-bucket [{:.1},{:.1}): loss {:.4}", bi as f64 / 5.0, (bi + 1) as f64 / 5.0, buckets[bi] / counts[bi] as f64);
        }
    }

    // quick eval on 6 test rows: bicubic vs SISR vs RefSR(aligned) vs RB-only
    let ck = load_checkpoint(run_dir.join("stage2.ckpt")).unwrap();
    let (state, model_cfg) = model_from_checkpoint(&ck).unwrap();
    let matching = MatchConfig {
        working_size: 256,
        search_radius: 64,
        ..MatchConfig::default()
    };
    let base = SrOptions {
        mask: MaskMode::White,
        tile: 32,
        tile_step: 16,
        scale: 4,
        seed: 5,
        matching,
        ..SrOptions::default()
    };
    let rows: Vec<_> = manifest.rows_in_split(Split::Test).take(6).collect();
    let mut sums = [0f64; 4];
    for row in &rows {
        let lr_img = load_image(&row.lr_path).unwrap();
        let hr = load_image(&row.hr_path).unwrap();
        let reference = load_image(&row.ref_path).unwrap();
        let up = resize_bicubic(&lr_img, hr.width, hr.height).unwrap();
        sums[0] += psnr(&up, &hr).unwrap();
        let sisr = run_sr(&lr_img, None, &state, &model_cfg, &SrOptions { mode: RefMode::None, ..base.clone() }).unwrap();
        sums[1] += psnr(&sisr.image, &hr).unwrap();
        let refsr = run_sr(&lr_img, Some(&reference), &state, &model_cfg, &SrOptions { mode: RefMode::Aligned, ..base.clone() }).unwrap();
        sums[2] += psnr(&refsr.image, &hr).unwrap();
        let rb = run_sr(&lr_img, Some(&reference), &state, &model_cfg, &SrOptions { mode: RefMode::Relative, ..base.clone() }).unwrap();
        sums[3] += psnr(&rb.image, &hr).unwrap();
    }
    let n = rows.len() as f64;
    println!(
        "mean PSNR over {} test rows: bicubic {:.2}  SISR {:.2}  RefSR {:.2}  RB-only {:.2}",
        rows.len(),
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n
    );
}
