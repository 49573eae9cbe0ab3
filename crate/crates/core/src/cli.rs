//! Command-line driver. Exit codes: 0 success, 1 validation error, 2 runtime
//! failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{composite, random_rotation_baseline, sample_baseline_spec, sample_crop_spec};
use crate::imageio::{list_images, load_image, save_image, write_dataset, generate_synthetic, DatasetSpec};
use crate::model::{gradcheck, load_checkpoint, ModelParams};
use crate::trainer::{fit, load_dataset, plan_heatmap, prepare_sample, reconstruct_panel, FrozenPlanObjective, TrainConfig};
use crate::transport::{ot_loss, sinkhorn_solve, TransportProblem, DEFAULT_EPSILON_REL, DEFAULT_MAX_ITERS, DEFAULT_TOL};

/// Largest gradcheck error accepted as a pass.
const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-3;
const GRADCHECK_BATCH: usize = 2;

#[derive(Debug, Parser)]
#[command(name = "ma3e", version, about = "Angle-aware masked autoencoder pretraining toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of oriented shapes.
    Synth(SynthArgs),
    /// Composite every image in a directory with a rotated crop.
    Compose(ComposeArgs),
    /// Pretrain a model from a config file.
    Pretrain(PretrainArgs),
    /// Render original | composite | masked | reconstruction for one image.
    Reconstruct(ReconstructArgs),
    /// Dump and render the crop transport plan for one image.
    Plan(PlanArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Solve an entropic transport problem for a cost matrix file.
    #[command(name = "ot-solve")]
    OtSolve(OtSolveArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Directory of PPM/PGM images.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Crop side in pixels.
    #[arg(long, default_value_t = 32)]
    pub a: usize,
    /// Patch size; crop placements are multiples of it.
    #[arg(long, default_value_t = 8)]
    pub p: usize,
    /// Degrees.
    #[arg(long, default_value_t = -45.0, allow_negative_numbers = true)]
    pub theta_min: f64,
    /// Degrees.
    #[arg(long, default_value_t = 45.0, allow_negative_numbers = true)]
    pub theta_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rotate the crop in place without the enclosing square (corners go black).
    #[arg(long)]
    pub baseline_random_rotation: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// key = value config file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// key = value config file; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Minimum number of parameters to check.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct OtSolveArgs {
    /// Whitespace-separated cost matrix, one row per line.
    #[arg(long)]
    pub cost: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON_REL)]
    pub epsilon_rel: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
}

/// Parses argv and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Compose(a) => compose(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Plan(a) => plan(a),
        Command::Gradcheck(a) => grad_check(a),
        Command::OtSolve(a) => ot_solve(a),
    }
}

fn print_seed(seed: u64) {
    println!("seed: {seed}");
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Unwritable {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Unreadable {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?;
            TrainConfig::from_text(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    print_seed(args.seed);
    let mut spec = DatasetSpec::new(args.count, args.size, args.seed);
    spec.channels = args.channels;
    let images = generate_synthetic(&spec)?;
    write_dataset(&spec, &images, &args.out_dir)?;
    println!("wrote {} images to {}", images.len(), args.out_dir.display());
    Ok(())
}

fn compose(args: ComposeArgs) -> Result<()> {
    print_seed(args.seed);
    if !(args.theta_min <= args.theta_max) {
        return Err(Error::invalid(format!(
            "theta-min {} exceeds theta-max {}",
            args.theta_min, args.theta_max
        )));
    }
    let range = (args.theta_min.to_radians(), args.theta_max.to_radians());
    let paths = list_images(&args.input)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no images in {}", args.input.display())));
    }
    create_dir(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for path in &paths {
        let img = load_image(path)?;
        let sample = if args.baseline_random_rotation {
            let spec = sample_baseline_spec(img.height(), img.width(), args.p, args.a, range, &mut rng)?;
            random_rotation_baseline(&img, &spec)?
        } else {
            let spec = sample_crop_spec(img.height(), img.width(), args.p, args.a, range, &mut rng)?;
            composite(&img, &spec)?
        };
        let name = path.file_name().expect("listed images have names");
        let out_path = args.out.join(name);
        save_image(&sample.composite, &out_path)?;
        write_text(&out_path.with_extension("spec.txt"), &sample.spec.to_sidecar())?;
    }
    println!("composed {} images into {}", paths.len(), args.out.display());
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    print_seed(cfg.seed);
    let summary = fit(&cfg, &args.out_dir)?;
    if let Some((last, _)) = summary.reports.last() {
        println!("final l_rec: {:.6e}", last.l_rec);
    }
    println!("checkpoint: {}", summary.final_checkpoint().display());
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    print_seed(args.seed);
    let ck = load_checkpoint(&args.ckpt)?;
    let img = load_image(&args.image)?;
    let out = reconstruct_panel(&ck, &img, args.seed)?;
    create_dir(&args.out)?;
    let ext = if out.panel.channels() == 1 { "pgm" } else { "ppm" };
    save_image(&out.panel, args.out.join(format!("panel.{ext}")))?;
    save_image(&out.reconstruction, args.out.join(format!("reconstruction.{ext}")))?;
    write_text(&args.out.join("mask.txt"), &out.sample.layout.to_text())?;
    if let Some(spec) = &out.sample.spec {
        write_text(&args.out.join("spec.txt"), &spec.to_sidecar())?;
    }
    println!("wrote panel to {}", args.out.display());
    Ok(())
}

fn plan(args: PlanArgs) -> Result<()> {
    print_seed(args.seed);
    let ck = load_checkpoint(&args.ckpt)?;
    let img = load_image(&args.image)?;
    let out = plan_heatmap(&ck, &img, args.seed)?;
    create_dir(&args.out)?;
    save_image(&out.heatmap, args.out.join("plan.pgm"))?;
    write_text(&args.out.join("plan.txt"), &out.matrix_text())?;
    println!(
        "plan {}x{}: sum {:.9}, iterations {}, marginal error {:.3e}",
        out.plan.n(),
        out.plan.n(),
        out.plan.plan.sum(),
        out.plan.iterations,
        out.plan.marginal_error
    );
    Ok(())
}

fn grad_check(args: GradcheckArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    print_seed(cfg.seed);
    let images = load_dataset(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = images
        .iter()
        .take(GRADCHECK_BATCH)
        .map(|img| prepare_sample(img, &cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::init(&cfg.model_config(), &mut rng)?;
    let objective = FrozenPlanObjective::new(&params, &batch, &cfg)?;
    let report = gradcheck(&objective, &params, args.samples, GRADCHECK_STEP, &mut rng)?;
    for (group, err) in &report.per_group {
        println!("{group:<32} {err:.3e}");
    }
    println!(
        "checked {} parameters, max relative error {:.3e} at {}",
        report.checked, report.max_rel_error, report.worst
    );
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Error::CheckFailed(format!(
            "gradient mismatch {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

/// Reads a whitespace-separated square matrix.
pub fn parse_matrix(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| Error::invalid(format!("bad number {v:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::invalid("empty cost matrix"));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::shape("cost matrix rows differ in length"));
    }
    let cols = rows[0].len();
    Array2::from_shape_vec((n, cols), rows.concat()).map_err(|e| Error::shape(e.to_string()))
}

fn ot_solve(args: OtSolveArgs) -> Result<()> {
    // Sinkhorn is deterministic; the seed line keeps every run's output uniform.
    print_seed(0);
    let text = fs::read_to_string(&args.cost).map_err(|e| Error::Unreadable {
        path: args.cost.clone(),
        reason: e.to_string(),
    })?;
    let cost = parse_matrix(&text)?;
    let problem = TransportProblem::uniform(cost.clone(), args.epsilon_rel).with_limits(args.max_iters, args.tol);
    let plan = sinkhorn_solve(&problem)?;
    for row in plan.plan.outer_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        println!("{}", cells.join(" "));
    }
    println!("value: {:.12e}", ot_loss(&cost, &plan)?);
    println!(
        "iterations: {} converged: {} marginal error: {:.3e}",
        plan.iterations, plan.converged, plan.marginal_error
    );
    Ok(())
}
