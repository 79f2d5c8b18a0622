//! Operator CLI: dataset generation, training, latent tuning, evaluation
//! and trajectory sampling.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
//! 4 I/O error. `DPMP_THREADS` caps worker parallelism for every command.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpmp::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use dpmp::config::{ConfigError, RunConfig};
use dpmp::dataset_io::{encode_trajectory_pair, load_dataset, save_dataset, DatasetIoError};
use dpmp::linalg::fnv1a64;
use dpmp::metrics::distribution_consistency;
use dpmp::pipeline::{
    basis_for, predict_weights, prepare_targets, stage1_train_autoencoder, stage2_train_heads,
    stage3_tune_encoder, DpmpModel, PipelineError, Space, VariantKind,
};
use dpmp::promp::{
    sample_trajectory, sigma_offset_trajectory, trajectory_distribution, PrompError, Trajectory,
};
use dpmp::report::{
    error_bars_svg, evaluate_models, format_run_log, paired_trajectory, run_experiment,
    ReportError,
};
use dpmp::scene::{build_dataset, Dataset};

#[derive(Parser)]
#[command(name = "dpmp", version, about = "image-conditioned trajectory distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Override demonstrations per scene.
        #[arg(long)]
        n_repeats: Option<usize>,
    },
    /// Train one model variant (stages 1 and 2).
    Train {
        #[command(flatten)]
        common: Common,
        /// Model variant: direct, ae, vae or cvae.
        #[arg(long)]
        variant: String,
        /// Prediction space: joint or task.
        #[arg(long, default_value = "task")]
        space: String,
        /// Dataset container directory.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Domain-specific latent tuning (stage 3) of a trained checkpoint.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Trained checkpoint of an autoencoder variant.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container directory.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Evaluate checkpoints (or run the full comparison) into CSV + SVG.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset container directory.
        #[arg(long)]
        dataset: PathBuf,
        /// Training seeds for the full comparison (used when no
        /// checkpoints are given).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Checkpoints to evaluate; when omitted the full variant
        /// comparison is trained and evaluated in place.
        checkpoints: Vec<PathBuf>,
    },
    /// Sample trajectories from a trained checkpoint for one scene.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Scene index within the dataset.
        #[arg(long)]
        scene_id: usize,
        /// Sigma offset for the band trajectories.
        #[arg(short, default_value_t = 0.0)]
        k: f64,
        /// Number of random samples.
        #[arg(short, default_value_t = 0)]
        n: usize,
    },
}

enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatasetIoError> for CliError {
    fn from(e: DatasetIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Pipeline(p) => p.into(),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Divergence { .. } => CliError::Numerical(e.to_string()),
            PipelineError::Promp(p) => p.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<PrompError> for CliError {
    fn from(e: PrompError) -> Self {
        match e {
            PrompError::Linalg(_) | PrompError::DegenerateMarginal { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Pipeline(p) => p.into(),
            ReportError::Metrics(m) => CliError::Numerical(m.to_string()),
            ReportError::Scene(s) => CliError::Config(s.to_string()),
            ReportError::RunLogParse(m) => CliError::Io(m),
        }
    }
}

impl From<dpmp::scene::SceneError> for CliError {
    fn from(e: dpmp::scene::SceneError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_variant(tag: &str) -> Result<VariantKind, CliError> {
    VariantKind::from_tag(tag)
        .ok_or_else(|| CliError::Config(format!("unknown variant {tag:?} (direct|ae|vae|cvae)")))
}

fn parse_space(tag: &str) -> Result<Space, CliError> {
    Space::from_tag(tag)
        .ok_or_else(|| CliError::Config(format!("unknown space {tag:?} (joint|task)")))
}

fn write_out(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn cmd_gen_data(common: &Common, n_repeats: Option<usize>) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    if let Some(r) = n_repeats {
        cfg.scene.n_repeats = r;
        cfg.validate()?;
    }
    let dataset = build_dataset(&cfg.scene_config(), cfg.seed)?;
    std::fs::create_dir_all(&common.out)?;
    save_dataset(&dataset, &common.out)?;
    let manifest = std::fs::read(common.out.join("manifest"))?;
    println!(
        "dataset: {} scenes, {} demos (seed {})",
        dataset.scenes.len(),
        dataset.demos.len(),
        dataset.seed
    );
    println!("manifest_hash {:016x}", fnv1a64(&manifest));
    Ok(())
}

fn checkpoint_name(model: &DpmpModel) -> String {
    let prefix = if model.stage3_done { "l-" } else { "" };
    format!("{prefix}{}-{}.ckpt", model.variant.tag(), model.space.tag())
}

fn load_dataset_checked(path: &Path, cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dataset = load_dataset(path)?;
    let arch = cfg.model_arch();
    if dataset.gen.image_h != arch.image_h || dataset.gen.image_w != arch.image_w {
        return Err(CliError::Config(format!(
            "dataset images are {}x{}, config expects {}x{}",
            dataset.gen.image_h, dataset.gen.image_w, arch.image_h, arch.image_w
        )));
    }
    if dataset.gen.n_steps != arch.n_steps {
        return Err(CliError::Config(format!(
            "dataset trajectories have {} steps, config expects {}",
            dataset.gen.n_steps, arch.n_steps
        )));
    }
    Ok(dataset)
}

fn cmd_train(
    common: &Common,
    variant: &str,
    space: &str,
    dataset_path: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let variant = parse_variant(variant)?;
    let space = parse_space(space)?;
    let dataset = load_dataset_checked(dataset_path, &cfg)?;
    let basis = cfg.basis_config();
    let phi = basis_for(&basis)?;
    let train_cfg = cfg.train_config();
    let targets = prepare_targets(
        &dataset,
        space,
        &basis,
        &phi,
        train_cfg.shrinkage,
        train_cfg.obs_noise,
    )?;
    let mut model = DpmpModel::init(variant, space, &cfg.model_arch(), cfg.seed)?;
    let mut stages: Vec<(&str, dpmp::pipeline::LossCurve)> = Vec::new();
    if variant.has_autoencoder() {
        let curve = stage1_train_autoencoder(&mut model, &dataset, &train_cfg)?;
        println!(
            "stage1: {} epochs, loss {} -> {}",
            curve.train.len(),
            curve.train.first().unwrap_or(&f64::NAN),
            curve.train.last().unwrap_or(&f64::NAN)
        );
        stages.push(("stage1", curve));
    }
    let curve = stage2_train_heads(&mut model, &dataset, &targets, &phi, &train_cfg)?;
    println!(
        "stage2: {} epochs, loss {} -> {}",
        curve.train.len(),
        curve.train.first().unwrap_or(&f64::NAN),
        curve.train.last().unwrap_or(&f64::NAN)
    );
    stages.push(("stage2", curve));

    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join(checkpoint_name(&model));
    save_checkpoint(&model, &ckpt_path)?;
    let stage_refs: Vec<(&str, &dpmp::pipeline::LossCurve)> =
        stages.iter().map(|(n, c)| (*n, c)).collect();
    let log = format_run_log(&cfg, variant.tag(), space.tag(), &stage_refs);
    write_out(
        &common
            .out
            .join(format!("{}-{}.log", variant.tag(), space.tag())),
        log.as_bytes(),
    )?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn cmd_tune(common: &Common, checkpoint: &Path, dataset_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let mut model = load_checkpoint(checkpoint)?;
    if !model.variant.has_autoencoder() {
        return Err(CliError::Config(format!(
            "variant {} has no encoder to tune",
            model.variant.tag()
        )));
    }
    let dataset = load_dataset_checked(dataset_path, &cfg)?;
    let basis = cfg.basis_config();
    let phi = basis_for(&basis)?;
    let train_cfg = cfg.train_config();
    let targets = prepare_targets(
        &dataset,
        model.space,
        &basis,
        &phi,
        train_cfg.shrinkage,
        train_cfg.obs_noise,
    )?;
    let curve = stage3_tune_encoder(&mut model, &dataset, &targets, &phi, &train_cfg)?;
    println!(
        "stage3: {} evaluations, loss {} -> {}",
        curve.train.len(),
        curve.train.first().unwrap_or(&f64::NAN),
        curve.train.last().unwrap_or(&f64::NAN)
    );
    std::fs::create_dir_all(&common.out)?;
    let ckpt_path = common.out.join(checkpoint_name(&model));
    save_checkpoint(&model, &ckpt_path)?;
    let log = format_run_log(
        &cfg,
        &format!("l-{}", model.variant.tag()),
        model.space.tag(),
        &[("stage3", &curve)],
    );
    write_out(
        &common
            .out
            .join(format!("l-{}-{}.log", model.variant.tag(), model.space.tag())),
        log.as_bytes(),
    )?;
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    dataset_path: &Path,
    seeds: Option<Vec<u64>>,
    checkpoints: &[PathBuf],
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let result = if checkpoints.is_empty() {
        let seeds =
            seeds.unwrap_or_else(|| (cfg.seed..cfg.seed + 5).collect::<Vec<u64>>());
        println!("running full comparison over seeds {seeds:?}");
        run_experiment(&cfg, &seeds)?
    } else {
        let missing: Vec<String> = checkpoints
            .iter()
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Io(format!(
                "missing checkpoints: {}",
                missing.join(", ")
            )));
        }
        let dataset = load_dataset_checked(dataset_path, &cfg)?;
        let models = checkpoints
            .iter()
            .map(|p| load_checkpoint(p))
            .collect::<Result<Vec<_>, _>>()?;
        evaluate_models(&cfg, &dataset, &models)?
    };
    std::fs::create_dir_all(&common.out)?;
    let bars = result.error_bars_csv();
    write_out(&common.out.join("cases.csv"), result.cases_csv().as_bytes())?;
    write_out(
        &common.out.join("variant_error.csv"),
        result.variant_error_csv().as_bytes(),
    )?;
    write_out(
        &common.out.join("space_comparison.csv"),
        result.space_comparison_csv().as_bytes(),
    )?;
    write_out(
        &common.out.join("clustering.csv"),
        result.clustering_csv().as_bytes(),
    )?;
    write_out(&common.out.join("error_bars.csv"), bars.as_bytes())?;
    write_out(
        &common.out.join("error_bars.svg"),
        error_bars_svg(&bars).as_bytes(),
    )?;
    println!("wrote evaluation tables to {}", common.out.display());
    Ok(())
}

fn cmd_sample(
    common: &Common,
    checkpoint: &Path,
    dataset_path: &Path,
    scene_id: usize,
    k: f64,
    n: usize,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let model = load_checkpoint(checkpoint)?;
    let dataset = load_dataset_checked(dataset_path, &cfg)?;
    if scene_id >= dataset.scenes.len() {
        return Err(CliError::Config(format!(
            "scene {scene_id} out of range (dataset has {})",
            dataset.scenes.len()
        )));
    }
    let basis = cfg.basis_config();
    let phi = basis_for(&basis)?;
    let train_cfg = cfg.train_config();
    let wd = predict_weights(&model, &dataset.scenes[scene_id])?;
    let td = trajectory_distribution(&wd, &phi, train_cfg.obs_noise, dataset.gen.dt())?;
    std::fs::create_dir_all(&common.out)?;

    let mut outputs: Vec<(String, Trajectory)> =
        vec![("mean.traj".into(), td.mean_trajectory())];
    if k != 0.0 {
        outputs.push((
            format!("plus_{k}sigma.traj"),
            sigma_offset_trajectory(&td, k),
        ));
        outputs.push((
            format!("minus_{k}sigma.traj"),
            sigma_offset_trajectory(&td, -k),
        ));
    }
    for i in 0..n {
        let sample = sample_trajectory(
            &wd,
            &phi,
            train_cfg.obs_noise,
            dataset.gen.dt(),
            dpmp::linalg::derive_seed(cfg.seed, &format!("sample/{scene_id}/{i}")),
        )?;
        outputs.push((format!("sample_{i:03}.traj"), sample));
    }
    for (name, traj) in &outputs {
        let (joint, task) = paired_trajectory(traj, model.space);
        write_out(
            &common.out.join(name),
            &encode_trajectory_pair(&joint, &task)?,
        )?;
    }
    let report = distribution_consistency(
        &wd,
        &phi,
        train_cfg.obs_noise,
        cfg.metric.consistency_samples,
        cfg.seed,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut text = format!(
        "samples {}\nmax_rel_deviation {}\n",
        report.n_samples, report.max_rel_deviation
    );
    for (j, dev) in report.per_joint.iter().enumerate() {
        text.push_str(&format!("joint {j} deviation {dev}\n"));
    }
    write_out(&common.out.join("consistency.txt"), text.as_bytes())?;
    println!(
        "wrote {} trajectory files (max variance deviation {:.4})",
        outputs.len(),
        report.max_rel_deviation
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { common, n_repeats } => cmd_gen_data(common, *n_repeats),
        Command::Train {
            common,
            variant,
            space,
            dataset,
        } => cmd_train(common, variant, space, dataset),
        Command::Tune {
            common,
            checkpoint,
            dataset,
        } => cmd_tune(common, checkpoint, dataset),
        Command::Eval {
            common,
            dataset,
            seeds,
            checkpoints,
        } => cmd_eval(common, dataset, seeds.clone(), checkpoints),
        Command::Sample {
            common,
            checkpoint,
            dataset,
            scene_id,
            k,
            n,
        } => cmd_sample(common, checkpoint, dataset, *scene_id, *k, *n),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
