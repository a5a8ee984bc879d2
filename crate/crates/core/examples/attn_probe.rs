// Where does attention mass go, and how much does each cache actually help?
use refsr_core::datagen::{Manifest, Split};
use refsr_core::flowmodel::*;
use refsr_core::image::{load_image, resize_bicubic};
use refsr_core::pipeline::model_from_checkpoint;
use refsr_core::rng::RngState;
use refsr_core::train::velocity_mse;
use refsr_core::Rect;

fn main() {
    let run = std::env::args().nth(1).unwrap_or("/tmp/probe/run_fix".into());
    let ck = load_checkpoint(format!("{run}/stage2.ckpt")).unwrap();
    let (state, cfg) = model_from_checkpoint(&ck).unwrap();
    let manifest = Manifest::load("/tmp/probe/data/manifest.csv").unwrap();
    let grid = cfg.grid_side();

    let rows: Vec<_> = manifest.rows_in_split(Split::Train).take(8).collect();
    let mut with_both = 0f64;
    let mut no_ref = 0f64;
    let mut no_cond = 0f64;
    let mut n = 0f64;
    for (ri, row) in rows.iter().enumerate() {
        let hr = load_image(&row.hr_path).unwrap();
        let lr_img = load_image(&row.lr_path).unwrap();
        let up = resize_bicubic(&lr_img, hr.width, hr.height).unwrap();
        let crop = |img: &refsr_core::ImageBuffer| img.crop(Rect::new(32, 32, 32, 32)).unwrap();
        let z_hr = patchify::<f32>(&crop(&hr), &cfg).unwrap();
        let z_lr = patchify::<f32>(&crop(&up), &cfg).unwrap();
        let lr_cache = branch_forward_cache(&z_lr, state.lr.as_ref().unwrap(), &cfg, 0.0);
        let ref_cache = branch_forward_cache(&z_hr, state.reference.as_ref().unwrap(), &cfg, 0.0);
        for rep in 0..6 {
            let mut srng = RngState::new(31, (ri * 6 + rep) as u64);
            let t = 0.2 + 0.6 * srng.uniform();
            let mut eps = LatentGrid::<f32>::zeros(grid, grid, cfg.dim);
            for v in eps.tokens.data.iter_mut() {
                *v = srng.normal_f32();
            }
            let z_t = forward_interpolate(&z_hr, &eps, t).unwrap();
            let eval = |lr_c: Option<&BranchCache<f32>>, ref_c: Option<&BranchCache<f32>>| -> f64 {
                let v = velocity_forward(&z_t, t, lr_c, ref_c, &state.sr, &cfg);
                velocity_mse(&v.tokens, &z_hr, &eps).0
            };
            with_both += eval(Some(&lr_cache), Some(&ref_cache));
            no_ref += eval(Some(&lr_cache), None);
            no_cond += eval(None, None);
            n += 1.0;
        }
    }
    println!("mid-t loss: both {:.4} | lr-only {:.4} | unconditional {:.4}", with_both / n, no_ref / n, no_cond / n);

    let row = rows[0];
    let hr = load_image(&row.hr_path).unwrap();
    let lr_img = load_image(&row.lr_path).unwrap();
    let up = resize_bicubic(&lr_img, hr.width, hr.height).unwrap();
    let crop = |img: &refsr_core::ImageBuffer| img.crop(Rect::new(32, 32, 32, 32)).unwrap();
    let z_hr = patchify::<f32>(&crop(&hr), &cfg).unwrap();
    let z_lr = patchify::<f32>(&crop(&up), &cfg).unwrap();
    let lr_cache = branch_forward_cache(&z_lr, state.lr.as_ref().unwrap(), &cfg, 0.0);
    let ref_cache = branch_forward_cache(&z_hr, state.reference.as_ref().unwrap(), &cfg, 0.0);
    let mut srng = RngState::new(77, 0);
    let mut eps = LatentGrid::<f32>::zeros(grid, grid, cfg.dim);
    for v in eps.tokens.data.iter_mut() {
        *v = srng.normal_f32();
    }
    let z_t = forward_interpolate(&z_hr, &eps, 0.5).unwrap();
    let stats = attention_mass_diagnostic(&z_t, 0.5, Some(&lr_cache), Some(&ref_cache), &state.sr, &cfg);
    let uniform = 1.0 / (3.0 * grid as f64 * grid as f64);
    for (l, s) in stats.iter().enumerate() {
        println!(
            "layer {l}: mass self {:.3} lr {:.3} ref {:.3} | same-pos lr {:.4} (uniform {uniform:.4})",
            s[0], s[1], s[2], s[3]
        );
    }
}
