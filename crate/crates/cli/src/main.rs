use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvhair_core::alignment::{aligner_for, AlignedImage, AlignerKind};
use mvhair_core::batch::{run_batch, score_manifest};
use mvhair_core::config::{BackendKind, RunConfig};
use mvhair_core::evaluation::{classify_scenario, yaw_from_keypoints, ScenarioConfig};
use mvhair_core::latent::estimate_mean_latent;
use mvhair_core::pipeline::{build_backend, run_transfer, save_guides, save_latent, RunInputs, RunOptions};
use mvhair_core::semantics::{Keypoints, SemanticMap};
use mvhair_core::Error;

/// Multi-view guided latent optimization for hairstyle transfer.
#[derive(Parser, Debug)]
#[command(name = "mvhair", version)]
struct Cli {
    /// Root under which run directories are created when no explicit output is given.
    #[arg(long, global = true, env = "SALON_RUN_DIR", default_value = "runs")]
    run_root: PathBuf,

    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transfer the hair of one portrait onto another.
    Transfer(TransferArgs),
    /// Run every pair of a manifest and tabulate the results.
    Batch(BatchArgs),
    /// Score finished outputs listed in a manifest.
    Eval(EvalArgs),
    /// Label a pair with its pose band and inpainting/hat flags.
    Classify(ClassifyArgs),
    /// Build and save the guides and masks only.
    Guide(GuideArgs),
    /// Estimate the backend's mean latent code.
    MeanLatent(MeanLatentArgs),
}

/// Run configuration: a JSON file, then individual overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage1_iters: Option<usize>,
    #[arg(long)]
    stage2_iters: Option<usize>,
    #[arg(long)]
    stage3_iters: Option<usize>,
    /// Canvas side length (also sets the toy generator's resolution).
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, value_parser = parse_aligner)]
    aligner: Option<AlignerKind>,
    /// Toy generator parameter file replacing the seeded weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Request the external generator backend.
    #[arg(long)]
    external_backend: bool,
    /// Paste the face image's background back into the result.
    #[arg(long)]
    paste_back: bool,
    /// Number of mapped samples averaged for the mean latent.
    #[arg(long)]
    mean_samples: Option<usize>,
}

fn parse_aligner(s: &str) -> Result<AlignerKind, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown aligner {s:?} (similarity2d, identity, external3d)"))
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let (s1, s2, s3) = (
            self.stage1_iters.unwrap_or(c.stage1.iters),
            self.stage2_iters.unwrap_or(c.stage2.iters),
            self.stage3_iters.unwrap_or(c.stage3.iters),
        );
        if (s1, s2, s3) != (c.stage1.iters, c.stage2.iters, c.stage3.iters) {
            c = c.with_iterations(s1, s2, s3);
        }
        if let Some(r) = self.resolution {
            c.resolution = r;
            c.backend.toy.resolution = r;
        }
        if let Some(a) = self.aligner {
            c.aligner = a;
        }
        if let Some(p) = &self.checkpoint {
            c.backend.checkpoint = Some(p.clone());
        }
        if self.external_backend {
            c.backend.kind = BackendKind::External;
        }
        if self.paste_back {
            c.paste_back = true;
        }
        if let Some(n) = self.mean_samples {
            c.seeds.mean_latent_samples = n;
        }
        Ok(c)
    }
}

/// The six per-pair inputs; each overrides the config file's value.
#[derive(Args, Debug, Default)]
struct InputArgs {
    #[arg(long)]
    face_image: Option<PathBuf>,
    #[arg(long)]
    face_semantics: Option<PathBuf>,
    #[arg(long)]
    face_keypoints: Option<PathBuf>,
    #[arg(long)]
    hair_image: Option<PathBuf>,
    #[arg(long)]
    hair_semantics: Option<PathBuf>,
    #[arg(long)]
    hair_keypoints: Option<PathBuf>,
}

impl InputArgs {
    fn apply(&self, c: &mut RunConfig) {
        let set = |dst: &mut PathBuf, src: &Option<PathBuf>| {
            if let Some(p) = src {
                *dst = p.clone();
            }
        };
        set(&mut c.inputs.face_image, &self.face_image);
        set(&mut c.inputs.face_semantics, &self.face_semantics);
        set(&mut c.inputs.face_keypoints, &self.face_keypoints);
        set(&mut c.inputs.hair_image, &self.hair_image);
        set(&mut c.inputs.hair_semantics, &self.hair_semantics);
        set(&mut c.inputs.hair_keypoints, &self.hair_keypoints);
    }
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    inputs: InputArgs,
    /// Run directory (default: <run-root>/<face>__<hair>).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Reuse stages already completed in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct BatchArgs {
    /// CSV with columns face_image, face_semantics, face_keypoints, hair_image,
    /// hair_semantics, hair_keypoints and an optional name.
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding the run directories and tables (default: <run-root>).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long, short, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// CSV with the transfer inputs plus output_image and optional output_keypoints.
    manifest: PathBuf,
    #[arg(long, value_parser = parse_aligner, default_value = "similarity2d")]
    aligner: AlignerKind,
    /// Where rows.csv and summary.csv go (default: next to the manifest).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    face_semantics: PathBuf,
    #[arg(long)]
    face_keypoints: PathBuf,
    #[arg(long)]
    hair_semantics: PathBuf,
    #[arg(long)]
    hair_keypoints: PathBuf,
    #[arg(long, value_parser = parse_aligner, default_value = "similarity2d")]
    aligner: AlignerKind,
}

#[derive(Args, Debug)]
struct GuideArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    inputs: InputArgs,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MeanLatentArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Output state file.
    #[arg(long, short)]
    output: PathBuf,
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

fn default_run_dir(root: &Path, c: &RunConfig) -> PathBuf {
    root.join(format!(
        "{}__{}",
        stem(&c.inputs.face_image),
        stem(&c.inputs.hair_image)
    ))
}

fn transfer(cli: &Cli, args: &TransferArgs) -> Result<ExitCode, Error> {
    let mut config = args.config.build()?;
    args.inputs.apply(&mut config);
    config.output_dir = Some(
        args.output
            .clone()
            .unwrap_or_else(|| default_run_dir(&cli.run_root, &config)),
    );
    let record = run_transfer(&config, RunOptions { resume: args.resume })?;
    for w in &record.warnings {
        log::warn!("{w}");
    }
    for s in &record.stages {
        println!("{}: final loss {:.6}", s.stage, s.final_loss);
    }
    println!("{}", record.run_dir.join("final.png").display());
    Ok(ExitCode::SUCCESS)
}

fn batch(cli: &Cli, args: &BatchArgs) -> Result<ExitCode, Error> {
    let config = args.config.build()?;
    let root = args.output.clone().unwrap_or_else(|| cli.run_root.clone());
    let report = run_batch(
        &args.manifest,
        &config,
        &root,
        args.jobs,
        RunOptions { resume: args.resume },
    )?;
    print_summary(&report);
    println!("{}", root.join("summary.csv").display());
    Ok(if report.failures() > 0 {
        eprintln!("{} of {} rows failed", report.failures(), report.rows.len());
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    })
}

fn eval(args: &EvalArgs) -> Result<ExitCode, Error> {
    let config = RunConfig {
        aligner: args.aligner,
        ..RunConfig::default()
    };
    let report = score_manifest(&args.manifest, &config)?;
    let dir = args
        .output
        .clone()
        .unwrap_or_else(|| args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    report.save(&dir)?;
    print_summary(&report);
    Ok(if report.failures() > 0 {
        ExitCode::from(4)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_summary(report: &mvhair_core::batch::BatchReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    println!(
        "{:>3}  {:<32} {:>5} {:>8} {:>7} {:>7}",
        "#", "config", "n", "psnr", "ssim", "lpips"
    );
    for s in &report.summary {
        let idx = s.index.map_or_else(String::new, |i| i.to_string());
        println!(
            "{idx:>3}  {:<32} {:>5} {:>8} {:>7} {:>7}",
            s.config,
            s.count,
            fmt(s.psnr),
            fmt(s.ssim),
            fmt(s.lpips_like)
        );
    }
}

fn classify(args: &ClassifyArgs) -> Result<ExitCode, Error> {
    let face_sem = SemanticMap::load_png(&args.face_semantics)?;
    let face_kp = Keypoints::load(&args.face_keypoints)?;
    let hair_sem = SemanticMap::load_png(&args.hair_semantics)?;
    let hair_kp = Keypoints::load(&args.hair_keypoints)?;
    let placeholder = mvhair_core::raster::Image::new(hair_sem.width(), hair_sem.height());
    let hair = AlignedImage::new(placeholder, hair_sem, hair_kp.clone())?;
    let aligned = aligner_for(args.aligner).align(&hair, &face_kp)?;
    let (yf, yh) = (yaw_from_keypoints(&face_kp)?, yaw_from_keypoints(&hair_kp)?);
    let label = classify_scenario(&face_sem, &aligned.sem, &face_kp, &aligned.kp, yf, yh)?;
    let config = ScenarioConfig::of(&label);
    let out = serde_json::json!({
        "label": label,
        "yaw_face": yf,
        "yaw_hair": yh,
        "config": config.to_string(),
        "table_row": config.index(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn guide(cli: &Cli, args: &GuideArgs) -> Result<ExitCode, Error> {
    let mut config = args.config.build()?;
    args.inputs.apply(&mut config);
    let dir = args
        .output
        .clone()
        .unwrap_or_else(|| default_run_dir(&cli.run_root, &config));
    let inputs = RunInputs::load(&config.inputs, config.resolution)?;
    let guides = inputs.guides(&config)?;
    save_guides(&dir, &guides)?;
    for (view, w) in guides.warnings() {
        log::warn!("{view} guide: {w:?}");
    }
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn mean_latent(args: &MeanLatentArgs) -> Result<ExitCode, Error> {
    let config = args.config.build()?;
    config.validate()?;
    let backend = build_backend(&config.backend)?;
    let seed = args.seed.unwrap_or(config.seeds.mean_latent);
    let w0 = estimate_mean_latent(&backend, config.seeds.mean_latent_samples, seed)?;
    if let Some(parent) = args.output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_latent(&args.output, &w0)?;
    println!("{}", args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Transfer(a) => transfer(&cli, a),
        Command::Batch(a) => batch(&cli, a),
        Command::Eval(a) => eval(a),
        Command::Classify(a) => classify(a),
        Command::Guide(a) => guide(&cli, a),
        Command::MeanLatent(a) => mean_latent(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
