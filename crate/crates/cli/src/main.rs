//! Command-line driver: dataset generation, staged training, tiled
//! SISR/RefSR inference with ablation switches, matching debug, evaluation,
//! and ablation sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use refsr_core::config::RunConfig;
use refsr_core::datagen::{build_dataset, SceneSpec, Split};
use refsr_core::flowmodel::load_checkpoint;
use refsr_core::image::{load_image, resize_bicubic, save_image};
use refsr_core::matching::align_reference;
use refsr_core::metrics::eval_run;
use refsr_core::pipeline::{
    evaluate_method, model_from_checkpoint, run_sr, with_threads, write_config_sidecar, MaskMode,
    RefMode, SrOptions,
};
use refsr_core::train::{run_stage, TrainConfig};
use refsr_core::ImageBuffer;

#[derive(Parser)]
#[command(name = "refsr", version, about = "Reference-based super-resolution workbench")]
struct Cli {
    /// key=value configuration file (CLI flags take precedence)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a single configuration key, e.g. -S model.dim=64 (repeatable)
    #[arg(long = "set", short = 'S', global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural paired-viewpoint dataset with a manifest
    Datagen(DatagenArgs),
    /// Train one stage (0: SR prior, 1: LR branch, 2: reference branch)
    Train(TrainArgs),
    /// Super-resolve one LR image
    Sr(SrArgs),
    /// Matching debug: write the aligned reference, certainty heat map and field sidecar
    Match(MatchArgs),
    /// Evaluate a directory of outputs against a manifest split
    Eval(EvalArgs),
    /// Ablation sweep over reference modes and kscale
    Ablate(AblateArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Number of samples
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Scene canvas side length in pixels
    #[arg(long)]
    canvas: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest CSV
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    stage: u8,
    /// Directory for checkpoints and loss traces
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on train-split samples
    #[arg(long)]
    max_samples: Option<usize>,
}

#[derive(Args)]
struct SrArgs {
    /// Input LR image
    #[arg(long)]
    input: PathBuf,
    /// Output image path (.png or .ppm)
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to run
    #[arg(long)]
    ckpt: PathBuf,
    /// Reference HR image
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Run the plain SISR path
    #[arg(long)]
    no_ref: bool,
    /// Skip matching: relative-position reference tiles
    #[arg(long)]
    no_match: bool,
    /// Match but do not warp: resized matched-region tiles
    #[arg(long)]
    no_warp: bool,
    #[arg(long)]
    kscale: Option<f64>,
    #[arg(long)]
    ref_layers: Option<usize>,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long)]
    tile_step: Option<usize>,
    #[arg(long)]
    sample_steps: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Certainty-composite fallback: white | sisr
    #[arg(long)]
    mask: Option<String>,
}

#[derive(Args)]
struct MatchArgs {
    /// Input LR image
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory containing <id>.png outputs
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    method: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory (per-method images, per-method reports, summary CSV)
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated kscale grid, e.g. 0,0.5,1
    #[arg(long, default_value = "0,0.5,1")]
    kscale_grid: String,
    /// Cap on evaluated test rows
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv}"))?;
        cfg.apply_kv(k, v)?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn sr_mode(args: &SrArgs) -> Result<RefMode> {
    let mode = match (args.no_ref, args.no_match, args.no_warp) {
        (true, _, _) => RefMode::None,
        (false, true, false) => RefMode::Relative,
        (false, false, true) => RefMode::RegionResize,
        (false, false, false) => RefMode::Aligned,
        (false, true, true) => bail!("--no-match and --no-warp are mutually exclusive"),
    };
    if mode != RefMode::None && args.reference.is_none() {
        bail!("--ref <path> is required unless --no-ref is given");
    }
    Ok(mode)
}

fn sr_options(cfg: &RunConfig, args: &SrArgs, has_lr_branch: bool) -> Result<SrOptions> {
    let mode = sr_mode(args)?;
    let mask = match args.mask.as_deref() {
        Some("white") => MaskMode::White,
        Some("sisr") => MaskMode::Sisr,
        Some(other) => bail!("unknown mask mode {other} (expected white|sisr)"),
        // The SISR output is the preferred compositing fallback whenever an
        // LR branch is available.
        None => {
            if has_lr_branch {
                MaskMode::Sisr
            } else {
                MaskMode::White
            }
        }
    };
    Ok(SrOptions {
        mode,
        mask,
        kscale: args.kscale.unwrap_or(cfg.model.kscale),
        ref_layers: args.ref_layers,
        sample_steps: args.sample_steps,
        tile: args.tile.unwrap_or(cfg.tile),
        tile_step: args.tile_step.unwrap_or(cfg.tile_step),
        scale: args.scale.unwrap_or(cfg.scale),
        seed: args.seed.unwrap_or(cfg.seed),
        matching: cfg.matching.clone(),
    })
}

fn cmd_datagen(cfg: &RunConfig, args: &DatagenArgs) -> Result<()> {
    let template = SceneSpec {
        canvas: args.canvas.unwrap_or(128),
        degrade: cfg.degrade.clone(),
        ..SceneSpec::default()
    };
    let manifest = build_dataset(args.n, args.seed, &args.out, &template)?;
    write_config_sidecar(args.out.join("manifest.csv"), &cfg.to_kv())?;
    println!(
        "wrote {} samples ({} train / {} val / {} test) under {}",
        manifest.rows.len(),
        manifest.rows_in_split(Split::Train).count(),
        manifest.rows_in_split(Split::Val).count(),
        manifest.rows_in_split(Split::Test).count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let manifest = refsr_core::datagen::Manifest::load(&args.manifest)?;
    let mut tcfg = TrainConfig {
        stage: args.stage,
        ..cfg.train.clone()
    };
    if let Some(s) = args.steps {
        tcfg.steps = s;
    }
    if let Some(b) = args.batch {
        tcfg.batch = b;
    }
    if let Some(lr) = args.lr {
        tcfg.learning_rate = lr;
    }
    if let Some(seed) = args.seed {
        tcfg.seed = seed;
    }
    if let Some(cap) = args.max_samples {
        tcfg.max_train_samples = Some(cap);
    }
    let result = run_stage(&manifest, &tcfg, &cfg.model, &args.out)?;
    let last = result.trace.last().expect("at least one step");
    println!(
        "stage {} done: {} steps, final loss {:.4}; checkpoint {}, trace {}",
        args.stage,
        result.trace.len(),
        last.loss,
        result.checkpoint_path.display(),
        result.trace_csv_path.display()
    );
    Ok(())
}

fn cmd_sr(cfg: &RunConfig, args: &SrArgs) -> Result<()> {
    sr_mode(args)?;
    let ck = load_checkpoint(&args.ckpt)?;
    let (state, model_cfg) = model_from_checkpoint(&ck)?;
    let opts = sr_options(cfg, args, state.lr.is_some())?;
    let lr_img = load_image(&args.input)?;
    let reference = match &args.reference {
        Some(p) if opts.mode != RefMode::None => Some(load_image(p)?),
        _ => None,
    };
    let outcome = run_sr(&lr_img, reference.as_ref(), &state, &model_cfg, &opts)?;
    save_image(&outcome.image, &args.out)?;
    write_config_sidecar(&args.out, &format!("{}{}", cfg.to_kv(), ck.config_echo))?;
    println!(
        "processed {} tiles -> {} ({}x{})",
        outcome.tile_count,
        args.out.display(),
        outcome.image.width,
        outcome.image.height
    );
    if let Some(c) = outcome.mean_certainty {
        println!("mean matching certainty {c:.3}");
    }
    if outcome.fallback_tiles > 0 {
        println!(
            "warning: {} tiles fell back to relative reference lookup",
            outcome.fallback_tiles
        );
    }
    Ok(())
}

fn cmd_match(cfg: &RunConfig, args: &MatchArgs) -> Result<()> {
    let lr_img = load_image(&args.input)?;
    let reference = load_image(&args.reference)?;
    let scale = args.scale.unwrap_or(cfg.scale);
    let lr_up = resize_bicubic(&lr_img, lr_img.width * scale, lr_img.height * scale)?;
    let mask = ImageBuffer::constant(lr_up.width, lr_up.height, lr_up.channels, 1.0);
    let (aligned, field) = align_reference(&lr_up, &reference, &mask, &cfg.matching)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_image(&aligned, args.out.join("aligned_ref.png"))?;
    save_image(&field.certainty_image(), args.out.join("certainty.png"))?;
    field.save(args.out.join("field.bin"))?;
    write_config_sidecar(args.out.join("aligned_ref.png"), &cfg.to_kv())?;
    let mean_c: f32 =
        field.certainty.iter().sum::<f32>() / (field.width * field.height) as f32;
    println!(
        "aligned reference, certainty heat map and field written to {} (mean certainty {mean_c:.3})",
        args.out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other}"),
    }
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let manifest = refsr_core::datagen::Manifest::load(&args.manifest)?;
    let report = eval_run(
        &manifest,
        &args.outputs,
        &args.method,
        parse_split(&args.split)?,
        &cfg.to_kv(),
    )?;
    report.write_csv(&args.out)?;
    println!(
        "{}: mean psnr {:.3} dB, mean ssim {:.4} over {} images -> {}",
        args.method,
        report.mean_psnr,
        report.mean_ssim,
        report.rows.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<()> {
    let manifest = refsr_core::datagen::Manifest::load(&args.manifest)?;
    let ck = load_checkpoint(&args.ckpt)?;
    let (state, model_cfg) = model_from_checkpoint(&ck)?;
    std::fs::create_dir_all(&args.out)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let echo = format!("{}{}", cfg.to_kv(), ck.config_echo);

    let base = SrOptions {
        mask: MaskMode::White,
        tile: cfg.tile,
        tile_step: cfg.tile_step,
        scale: cfg.scale,
        seed,
        matching: cfg.matching.clone(),
        ..SrOptions::default()
    };
    let mut rows: Vec<(String, f64, SrOptions)> = vec![
        (
            "sisr".into(),
            1.0,
            SrOptions {
                mode: RefMode::None,
                ..base.clone()
            },
        ),
        (
            "rb".into(),
            1.0,
            SrOptions {
                mode: RefMode::Relative,
                ..base.clone()
            },
        ),
        (
            "rb_m".into(),
            1.0,
            SrOptions {
                mode: RefMode::RegionResize,
                ..base.clone()
            },
        ),
        (
            "rb_m_w".into(),
            1.0,
            SrOptions {
                mode: RefMode::Aligned,
                ..base.clone()
            },
        ),
    ];
    for ks in args.kscale_grid.split(',') {
        let ks: f64 = ks
            .trim()
            .parse()
            .map_err(|_| anyhow!("bad kscale value {ks}"))?;
        rows.push((
            format!("kscale_{ks}"),
            ks,
            SrOptions {
                mode: RefMode::Aligned,
                kscale: ks,
                ..base.clone()
            },
        ));
    }

    let mut summary = String::from("label,kscale,mean_psnr,mean_ssim\n");
    for (label, ks, opts) in &rows {
        let report = evaluate_method(
            &manifest,
            Split::Test,
            args.rows,
            &state,
            &model_cfg,
            opts,
            &args.out,
            label,
            &echo,
        )?;
        report.write_csv(args.out.join(format!("{label}.csv")))?;
        summary.push_str(&format!(
            "{label},{ks},{:.6},{:.6}\n",
            report.mean_psnr, report.mean_ssim
        ));
        println!(
            "{label}: mean psnr {:.3} dB, mean ssim {:.4}",
            report.mean_psnr, report.mean_ssim
        );
    }
    let summary_path = args.out.join("ablation.csv");
    std::fs::write(&summary_path, &summary)?;
    write_config_sidecar(&summary_path, &echo)?;
    println!("summary -> {}", summary_path.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;
    cfg.validate()?;
    let threads = cli.threads.unwrap_or(cfg.threads);
    with_threads(threads, || match &cli.command {
        Command::Datagen(args) => cmd_datagen(&cfg, args),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Sr(args) => cmd_sr(&cfg, args),
        Command::Match(args) => cmd_match(&cfg, args),
        Command::Eval(args) => cmd_eval(&cfg, args),
        Command::Ablate(args) => cmd_ablate(&cfg, args),
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
