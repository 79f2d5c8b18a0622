//! Benchmark orchestration and report emission.
//!
//! Runs the variant comparison (all four model families, both prediction
//! spaces, several training seeds against one dataset), evaluates
//! final-pose and distribution errors on the test split, tunes the
//! autoencoder variants, and renders everything as CSV tables plus an SVG
//! bar chart. Also defines the run-log text format the trainer writes and
//! the plots are sourced from.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::config::RunConfig;
use crate::metrics::{davies_bouldin, pose_error, MetricsError, PoseError};
use crate::pipeline::{
    basis_for, encode_latents, evaluate_distribution_loss, predict, prepare_targets,
    stage1_train_autoencoder, stage2_train_heads, stage3_tune_encoder, DpmpModel, LossCurve,
    PipelineError, SceneTargets, Space, TrainConfig, VariantKind,
};
use crate::promp::{sigma_offset_trajectory, PhiMatrix, TrajectoryDistribution};
use crate::scene::{build_dataset, joint_to_task, Dataset, SceneError};

#[derive(Error, Debug)]
pub enum ReportError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("run log parse error: {0}")]
    RunLogParse(String),
}

pub const RUN_LOG_MAGIC: &str = "dpmp-runlog";
pub const RUN_LOG_VERSION: u32 = 1;

/// Per-stage losses recorded in a run-log.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub name: String,
    pub curve: LossCurve,
}

/// Parsed run-log contents.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config_hash: String,
    pub variant: String,
    pub space: String,
    pub stages: Vec<StageLog>,
    pub config_text: String,
}

/// Render a run-log: header, per-epoch losses, then the full resolved
/// configuration between `config_begin`/`config_end` markers.
pub fn format_run_log(
    config: &RunConfig,
    variant: &str,
    space: &str,
    stages: &[(&str, &LossCurve)],
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{RUN_LOG_MAGIC} {RUN_LOG_VERSION}");
    let _ = writeln!(out, "config_hash {}", config.config_hash());
    let _ = writeln!(out, "variant {variant}");
    let _ = writeln!(out, "space {space}");
    for (name, curve) in stages {
        for (epoch, loss) in curve.train.iter().enumerate() {
            if let Some(val) = curve.val.get(epoch) {
                let _ = writeln!(out, "stage {name} epoch {epoch} train {loss} val {val}");
            } else {
                let _ = writeln!(out, "stage {name} epoch {epoch} train {loss}");
            }
        }
    }
    out.push_str("config_begin\n");
    out.push_str(&config.canonical_dump());
    out.push_str("config_end\n");
    out
}

/// Parse run-log text; tolerant of arbitrary input, never panics.
pub fn parse_run_log(text: &str) -> Result<RunLog, ReportError> {
    let bad = |msg: &str| ReportError::RunLogParse(msg.to_string());
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input"))?;
    let mut head = header.split_whitespace();
    if head.next() != Some(RUN_LOG_MAGIC) {
        return Err(bad("missing run-log header"));
    }
    let version: u32 = head
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != RUN_LOG_VERSION {
        return Err(ReportError::RunLogParse(format!(
            "unsupported run-log version {version}"
        )));
    }
    let mut config_hash = None;
    let mut variant = None;
    let mut space = None;
    let mut stages: Vec<StageLog> = Vec::new();
    let mut config_text = String::new();
    let mut in_config = false;
    let mut config_closed = false;
    for line in lines {
        if in_config {
            if line == "config_end" {
                in_config = false;
                config_closed = true;
            } else {
                config_text.push_str(line);
                config_text.push('\n');
            }
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["config_begin"] => in_config = true,
            ["config_hash", h] => config_hash = Some(h.to_string()),
            ["variant", v] => variant = Some(v.to_string()),
            ["space", s] => space = Some(s.to_string()),
            ["stage", name, "epoch", epoch, rest @ ..] => {
                let epoch: usize = epoch.parse().map_err(|_| bad("bad epoch"))?;
                let (train, val) = match rest {
                    ["train", t] => (t.parse::<f64>().map_err(|_| bad("bad loss"))?, None),
                    ["train", t, "val", v] => (
                        t.parse::<f64>().map_err(|_| bad("bad loss"))?,
                        Some(v.parse::<f64>().map_err(|_| bad("bad loss"))?),
                    ),
                    _ => return Err(bad("malformed stage line")),
                };
                if stages.last().map(|s| s.name.as_str()) != Some(*name) {
                    stages.push(StageLog {
                        name: name.to_string(),
                        curve: LossCurve::default(),
                    });
                }
                let stage = stages.last_mut().unwrap();
                if epoch != stage.curve.train.len() {
                    return Err(bad("epochs out of order"));
                }
                stage.curve.train.push(train);
                if let Some(v) = val {
                    stage.curve.val.push(v);
                }
            }
            _ => return Err(bad("unknown run-log line")),
        }
    }
    if in_config || !config_closed {
        return Err(bad("config block not closed"));
    }
    Ok(RunLog {
        config_hash: config_hash.ok_or_else(|| bad("missing config_hash"))?,
        variant: variant.ok_or_else(|| bad("missing variant"))?,
        space: space.ok_or_else(|| bad("missing space"))?,
        stages,
        config_text,
    })
}

/// The final sample of a trajectory as a task-space pose vector.
///
/// Joint-space trajectories go through the inverse surrogate kinematics
/// first.
pub fn final_pose_vector(traj: &crate::promp::Trajectory, space: Space) -> [f64; 7] {
    let col = traj.final_point();
    let native: [f64; 7] = std::array::from_fn(|d| col[d]);
    match space {
        Space::Task => native,
        Space::Joint => joint_to_task(&native),
    }
}

/// Pair a native-space trajectory with its surrogate-map image so it can
/// be written in the two-block demonstration file layout.
pub fn paired_trajectory(
    traj: &crate::promp::Trajectory,
    space: Space,
) -> (crate::promp::Trajectory, crate::promp::Trajectory) {
    let t_len = traj.n_steps();
    let mut other = crate::promp::Trajectory {
        values: nalgebra::DMatrix::zeros(7, t_len),
        dt: traj.dt,
    };
    for t in 0..t_len {
        let col: [f64; 7] = std::array::from_fn(|d| traj.values[(d, t)]);
        let mapped = match space {
            Space::Task => crate::scene::task_to_joint(&col),
            Space::Joint => joint_to_task(&col),
        };
        for d in 0..7 {
            other.values[(d, t)] = mapped[d];
        }
    }
    match space {
        Space::Task => (other, traj.clone()),
        Space::Joint => (traj.clone(), other),
    }
}

/// Final-pose errors of one prediction at a given sigma offset.
fn pose_at_offset(
    td: &TrajectoryDistribution,
    space: Space,
    k: f64,
    target: &[f64; 7],
) -> Result<PoseError, ReportError> {
    let traj = sigma_offset_trajectory(td, k);
    let pose = final_pose_vector(&traj, space);
    Ok(pose_error(&pose, target)?)
}

fn mean_pose_errors(errors: &[PoseError]) -> PoseError {
    let n = errors.len() as f64;
    PoseError {
        position: errors.iter().map(|e| e.position).sum::<f64>() / n,
        orientation: errors.iter().map(|e| e.orientation).sum::<f64>() / n,
    }
}

/// Test-set final-pose evaluation of one model at several sigma offsets.
pub fn eval_final_pose(
    model: &DpmpModel,
    dataset: &Dataset,
    phi: &PhiMatrix,
    obs_noise: f64,
    indices: &[usize],
    offsets: &[f64],
) -> Result<Vec<PoseError>, ReportError> {
    let mut per_offset: Vec<Vec<PoseError>> = vec![Vec::new(); offsets.len()];
    for &i in indices {
        let scene = &dataset.scenes[i];
        let td = predict(model, scene, phi, obs_noise, dataset.gen.dt())?;
        let target = scene.target_pose.as_vector();
        for (oi, k) in offsets.iter().enumerate() {
            per_offset[oi].push(pose_at_offset(&td, model.space, *k, &target)?);
        }
    }
    Ok(per_offset.iter().map(|v| mean_pose_errors(v)).collect())
}

/// Everything measured for one `(variant, space, seed)` case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub variant: VariantKind,
    pub space: Space,
    pub seed: u64,
    /// Distribution error (the training-style metric) on the test split.
    pub rmse: f64,
    pub pose_mean: PoseError,
    pub pose_sigma: PoseError,
    pub pose_band_plus: PoseError,
    pub pose_band_minus: PoseError,
    pub tuned: Option<TunedCase>,
}

/// Stage-3 outcome for an autoencoder variant.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedCase {
    pub rmse: f64,
    pub pose_mean: PoseError,
    pub pose_sigma: PoseError,
    pub pose_band_plus: PoseError,
    pub pose_band_minus: PoseError,
    /// Davies-Bouldin of all-scene latents labeled by plant configuration,
    /// before and after tuning.
    pub db_before: f64,
    pub db_after: f64,
}

/// One full benchmark: 4 variants × 2 spaces × the given seeds, with
/// stage-3 tuning of task-space autoencoder variants.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub seeds: Vec<u64>,
    pub cases: Vec<CaseResult>,
}

fn case_metrics(
    model: &DpmpModel,
    dataset: &Dataset,
    targets: &[SceneTargets],
    phi: &PhiMatrix,
    train_cfg: &TrainConfig,
    table_sigma: f64,
    band_sigma: f64,
) -> Result<(f64, [PoseError; 4]), ReportError> {
    let test = &dataset.split.test;
    let rmse = evaluate_distribution_loss(model, dataset, targets, phi, train_cfg, test)?;
    let poses = eval_final_pose(
        model,
        dataset,
        phi,
        train_cfg.obs_noise,
        test,
        &[0.0, table_sigma, band_sigma, -band_sigma],
    )?;
    Ok((rmse, [poses[0], poses[1], poses[2], poses[3]]))
}

/// Davies-Bouldin of the model's latents over all scenes, labeled by
/// plant configuration.
fn config_clustering(model: &DpmpModel, dataset: &Dataset) -> Result<f64, ReportError> {
    let all: Vec<usize> = (0..dataset.scenes.len()).collect();
    let latents = encode_latents(model, dataset, &all)?;
    let labels: Vec<u32> = dataset.scenes.iter().map(|s| s.config_id).collect();
    Ok(davies_bouldin(&latents, &labels)?.davies_bouldin)
}

/// Train one case end to end. `pretrained` supplies a cached stage-1
/// encoder/decoder (the result is identical to training in place, since
/// stage-1 streams depend only on `(seed, architecture)`).
#[allow(clippy::too_many_arguments)]
fn run_case(
    run: &RunConfig,
    dataset: &Dataset,
    targets: &[SceneTargets],
    phi: &PhiMatrix,
    variant: VariantKind,
    space: Space,
    seed: u64,
    tune: bool,
    pretrained: Option<&(crate::pipeline::EncoderNet, Option<crate::nn::Mlp>)>,
) -> Result<(CaseResult, DpmpModel, Option<DpmpModel>), ReportError> {
    let arch = run.model_arch();
    let mut train_cfg = run.train_config();
    train_cfg.seed = seed;
    let mut model = DpmpModel::init(variant, space, &arch, seed)?;
    if variant.has_autoencoder() {
        if let Some((encoder, decoder)) = pretrained {
            model.encoder = encoder.clone();
            model.decoder = decoder.clone();
            model.stage1_done = true;
        } else {
            stage1_train_autoencoder(&mut model, dataset, &train_cfg)?;
        }
    }
    stage2_train_heads(&mut model, dataset, targets, phi, &train_cfg)?;
    let (rmse, poses) = case_metrics(
        &model,
        dataset,
        targets,
        phi,
        &train_cfg,
        run.metric.table_sigma,
        run.metric.band_sigma,
    )?;
    let mut tuned_model = None;
    let tuned = if tune && variant.has_autoencoder() {
        let db_before = config_clustering(&model, dataset)?;
        let mut t = model.clone();
        stage3_tune_encoder(&mut t, dataset, targets, phi, &train_cfg)?;
        let db_after = config_clustering(&t, dataset)?;
        let (t_rmse, t_poses) = case_metrics(
            &t,
            dataset,
            targets,
            phi,
            &train_cfg,
            run.metric.table_sigma,
            run.metric.band_sigma,
        )?;
        tuned_model = Some(t);
        Some(TunedCase {
            rmse: t_rmse,
            pose_mean: t_poses[0],
            pose_sigma: t_poses[1],
            pose_band_plus: t_poses[2],
            pose_band_minus: t_poses[3],
            db_before,
            db_after,
        })
    } else {
        None
    };
    Ok((
        CaseResult {
            variant,
            space,
            seed,
            rmse,
            pose_mean: poses[0],
            pose_sigma: poses[1],
            pose_band_plus: poses[2],
            pose_band_minus: poses[3],
            tuned,
        },
        model,
        tuned_model,
    ))
}

/// Run one `(variant, space, seed)` case standalone, returning the trained
/// model (and the tuned one when requested). Bit-identical to the same
/// case inside [`run_experiment`].
pub fn run_single_case(
    run: &RunConfig,
    dataset: &Dataset,
    variant: VariantKind,
    space: Space,
    seed: u64,
    tune: bool,
) -> Result<(CaseResult, DpmpModel, Option<DpmpModel>), ReportError> {
    let basis = run.basis_config();
    let phi = basis_for(&basis)?;
    let train_cfg = run.train_config();
    let targets = prepare_targets(
        dataset,
        space,
        &basis,
        &phi,
        train_cfg.shrinkage,
        train_cfg.obs_noise,
    )?;
    run_case(
        run, dataset, &targets, &phi, variant, space, seed, tune, None,
    )
}

/// The full comparison over `seeds`: every variant in both spaces, with
/// stage-3 tuning of the task-space autoencoder variants. Deterministic
/// for a given `(run, seeds)`.
pub fn run_experiment(run: &RunConfig, seeds: &[u64]) -> Result<ExperimentResult, ReportError> {
    let dataset = build_dataset(&run.scene_config(), run.seed)?;
    let basis = run.basis_config();
    let phi = basis_for(&basis)?;
    let train_cfg = run.train_config();
    let targets_joint = prepare_targets(
        &dataset,
        Space::Joint,
        &basis,
        &phi,
        train_cfg.shrinkage,
        train_cfg.obs_noise,
    )?;
    let targets_task = prepare_targets(
        &dataset,
        Space::Task,
        &basis,
        &phi,
        train_cfg.shrinkage,
        train_cfg.obs_noise,
    )?;

    // Stage 1 depends only on (architecture, seed): train each combination
    // once, in parallel, and share the result across variants and spaces.
    let arch = run.model_arch();
    let stage1_jobs: Vec<(&str, u64)> = ["ae", "vae"]
        .iter()
        .flat_map(|tag| seeds.iter().map(move |s| (*tag, *s)))
        .collect();
    let stage1_results = crate::workers::run_indexed(stage1_jobs.len(), |i| {
        let (tag, seed) = stage1_jobs[i];
        let variant = if tag == "ae" {
            VariantKind::Ae
        } else {
            VariantKind::Vae
        };
        let mut cfg = run.train_config();
        cfg.seed = seed;
        let mut model = DpmpModel::init(variant, Space::Task, &arch, seed)?;
        stage1_train_autoencoder(&mut model, &dataset, &cfg)?;
        Ok::<_, ReportError>((model.encoder, model.decoder))
    });
    let mut stage1_cache: HashMap<(String, u64), (crate::pipeline::EncoderNet, Option<crate::nn::Mlp>)> =
        HashMap::new();
    for (job, result) in stage1_jobs.iter().zip(stage1_results) {
        stage1_cache.insert((job.0.to_string(), job.1), result?);
    }

    let variants = [
        VariantKind::Direct,
        VariantKind::Ae,
        VariantKind::Vae,
        VariantKind::Cvae,
    ];
    let spaces = [Space::Task, Space::Joint];
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &space in &spaces {
            for &variant in &variants {
                jobs.push((variant, space, seed));
            }
        }
    }
    let case_results = crate::workers::run_indexed(jobs.len(), |i| {
        let (variant, space, seed) = jobs[i];
        let targets = match space {
            Space::Joint => &targets_joint,
            Space::Task => &targets_task,
        };
        let pretrained = if variant.has_autoencoder() {
            stage1_cache.get(&(variant.arch_tag().to_string(), seed))
        } else {
            None
        };
        let tune = space == Space::Task;
        run_case(
            run, &dataset, targets, &phi, variant, space, seed, tune, pretrained,
        )
        .map(|(case, _, _)| case)
    });
    let cases = case_results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentResult {
        seeds: seeds.to_vec(),
        cases,
    })
}

/// Evaluate already-trained models (e.g. loaded checkpoints) against a
/// dataset. Models are grouped as one case per base model, in input
/// order; a later model with the same variant and space and a completed
/// stage 3 is attached to its base as the tuned result. The case `seed`
/// records the input position, since checkpoints do not carry their
/// training seed.
pub fn evaluate_models(
    run: &RunConfig,
    dataset: &Dataset,
    models: &[DpmpModel],
) -> Result<ExperimentResult, ReportError> {
    let basis = run.basis_config();
    let phi = basis_for(&basis)?;
    let train_cfg = run.train_config();
    let mut targets_by_space: HashMap<&'static str, Vec<SceneTargets>> = HashMap::new();
    for space in [Space::Joint, Space::Task] {
        if models.iter().any(|m| m.space == space) {
            targets_by_space.insert(
                space.tag(),
                prepare_targets(
                    dataset,
                    space,
                    &basis,
                    &phi,
                    train_cfg.shrinkage,
                    train_cfg.obs_noise,
                )?,
            );
        }
    }
    let mut used = vec![false; models.len()];
    let mut cases = Vec::new();
    for (i, model) in models.iter().enumerate() {
        if used[i] || model.stage3_done {
            continue;
        }
        used[i] = true;
        let targets = &targets_by_space[model.space.tag()];
        let (rmse, poses) = case_metrics(
            model,
            dataset,
            targets,
            &phi,
            &train_cfg,
            run.metric.table_sigma,
            run.metric.band_sigma,
        )?;
        let tuned_idx = models.iter().enumerate().position(|(k, m)| {
            !used[k] && m.stage3_done && m.variant == model.variant && m.space == model.space
        });
        let tuned = match tuned_idx {
            Some(k) => {
                used[k] = true;
                let t = &models[k];
                let (t_rmse, t_poses) = case_metrics(
                    t,
                    dataset,
                    targets,
                    &phi,
                    &train_cfg,
                    run.metric.table_sigma,
                    run.metric.band_sigma,
                )?;
                Some(TunedCase {
                    rmse: t_rmse,
                    pose_mean: t_poses[0],
                    pose_sigma: t_poses[1],
                    pose_band_plus: t_poses[2],
                    pose_band_minus: t_poses[3],
                    db_before: config_clustering(model, dataset)?,
                    db_after: config_clustering(t, dataset)?,
                })
            }
            None => None,
        };
        cases.push(CaseResult {
            variant: model.variant,
            space: model.space,
            seed: i as u64,
            rmse,
            pose_mean: poses[0],
            pose_sigma: poses[1],
            pose_band_plus: poses[2],
            pose_band_minus: poses[3],
            tuned,
        });
    }
    // Tuned models without a base still get their own row.
    for (i, model) in models.iter().enumerate() {
        if used[i] {
            continue;
        }
        let targets = &targets_by_space[model.space.tag()];
        let (rmse, poses) = case_metrics(
            model,
            dataset,
            targets,
            &phi,
            &train_cfg,
            run.metric.table_sigma,
            run.metric.band_sigma,
        )?;
        cases.push(CaseResult {
            variant: model.variant,
            space: model.space,
            seed: i as u64,
            rmse,
            pose_mean: poses[0],
            pose_sigma: poses[1],
            pose_band_plus: poses[2],
            pose_band_minus: poses[3],
            tuned: None,
        });
    }
    Ok(ExperimentResult {
        seeds: (0..cases.len() as u64).collect(),
        cases,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Lower median of a value list.
pub fn median(values: &[f64]) -> f64 {
    try_median(values).expect("median of a non-empty list")
}

/// Lower median, or `None` for an empty list.
pub fn try_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in medians"));
    Some(sorted[(sorted.len() - 1) / 2])
}

impl ExperimentResult {
    fn select(&self, variant: VariantKind, space: Space) -> Vec<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| c.variant == variant && c.space == space)
            .collect()
    }

    /// Median over seeds of a per-case value.
    pub fn median_of(
        &self,
        variant: VariantKind,
        space: Space,
        f: impl Fn(&CaseResult) -> f64,
    ) -> f64 {
        self.try_median_of(variant, space, f)
            .expect("cases exist for this variant and space")
    }

    /// Median over seeds, or `None` when no case matches.
    pub fn try_median_of(
        &self,
        variant: VariantKind,
        space: Space,
        f: impl Fn(&CaseResult) -> f64,
    ) -> Option<f64> {
        let values: Vec<f64> = self.select(variant, space).iter().map(|c| f(c)).collect();
        try_median(&values)
    }

    /// Raw per-case table: one row per (variant, space, seed), both before
    /// and after tuning where tuning applies.
    pub fn cases_csv(&self) -> String {
        let mut out = String::from(
            "variant,space,seed,tuned,rmse,pos_mean,ori_mean,pos_sigma,ori_sigma,\
             pos_band_plus,ori_band_plus,pos_band_minus,ori_band_minus,db_config\n",
        );
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{},{},base,{},{},{},{},{},{},{},{},{},",
                c.variant.tag(),
                c.space.tag(),
                c.seed,
                fmt(c.rmse),
                fmt(c.pose_mean.position),
                fmt(c.pose_mean.orientation),
                fmt(c.pose_sigma.position),
                fmt(c.pose_sigma.orientation),
                fmt(c.pose_band_plus.position),
                fmt(c.pose_band_plus.orientation),
                fmt(c.pose_band_minus.position),
                fmt(c.pose_band_minus.orientation),
            );
            if let Some(t) = &c.tuned {
                let _ = writeln!(
                    out,
                    "{},{},{},l,{},{},{},{},{},{},{},{},{},{}|{}",
                    c.variant.tag(),
                    c.space.tag(),
                    c.seed,
                    fmt(t.rmse),
                    fmt(t.pose_mean.position),
                    fmt(t.pose_mean.orientation),
                    fmt(t.pose_sigma.position),
                    fmt(t.pose_sigma.orientation),
                    fmt(t.pose_band_plus.position),
                    fmt(t.pose_band_plus.orientation),
                    fmt(t.pose_band_minus.position),
                    fmt(t.pose_band_minus.orientation),
                    fmt(t.db_before),
                    fmt(t.db_after),
                );
            }
        }
        out
    }

    /// Distribution-error comparison across variants (median over seeds).
    pub fn variant_error_csv(&self) -> String {
        let mut out = String::from("variant,space,rmse_median\n");
        for space in [Space::Joint, Space::Task] {
            for variant in [
                VariantKind::Direct,
                VariantKind::Ae,
                VariantKind::Vae,
                VariantKind::Cvae,
            ] {
                if let Some(v) = self.try_median_of(variant, space, |c| c.rmse) {
                    let _ = writeln!(out, "{},{},{}", variant.tag(), space.tag(), fmt(v));
                }
            }
        }
        out
    }

    /// Joint-versus-task final-pose accuracy for the mean and the
    /// `table_sigma` trajectories (median over seeds).
    pub fn space_comparison_csv(&self) -> String {
        let mut out = String::from(
            "variant,space,pos_mean,ori_mean,pos_sigma,ori_sigma\n",
        );
        for variant in [
            VariantKind::Direct,
            VariantKind::Ae,
            VariantKind::Vae,
            VariantKind::Cvae,
        ] {
            for space in [Space::Joint, Space::Task] {
                let (Some(pm), Some(om), Some(ps), Some(os)) = (
                    self.try_median_of(variant, space, |c| c.pose_mean.position),
                    self.try_median_of(variant, space, |c| c.pose_mean.orientation),
                    self.try_median_of(variant, space, |c| c.pose_sigma.position),
                    self.try_median_of(variant, space, |c| c.pose_sigma.orientation),
                ) else {
                    continue;
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    variant.tag(),
                    space.tag(),
                    fmt(pm),
                    fmt(om),
                    fmt(ps),
                    fmt(os),
                );
            }
        }
        out
    }

    /// Latent clustering before/after tuning (median over seeds),
    /// task-space autoencoder variants.
    pub fn clustering_csv(&self) -> String {
        let mut out = String::from("variant,db_base,db_tuned\n");
        for variant in [VariantKind::Ae, VariantKind::Vae, VariantKind::Cvae] {
            let before: Vec<f64> = self
                .select(variant, Space::Task)
                .iter()
                .filter_map(|c| c.tuned.as_ref().map(|t| t.db_before))
                .collect();
            let after: Vec<f64> = self
                .select(variant, Space::Task)
                .iter()
                .filter_map(|c| c.tuned.as_ref().map(|t| t.db_after))
                .collect();
            if before.is_empty() {
                continue;
            }
            let _ = writeln!(
                out,
                "{},{},{}",
                variant.tag(),
                fmt(median(&before)),
                fmt(median(&after))
            );
        }
        out
    }

    /// Final-point position error bars (median over seeds): base and tuned
    /// models, each at the mean and ±`band_sigma` trajectories, task space.
    pub fn error_bars_csv(&self) -> String {
        let mut out = String::from("variant,model,stat,position_error\n");
        for variant in [VariantKind::Ae, VariantKind::Vae, VariantKind::Cvae] {
            let cases = self.select(variant, Space::Task);
            if cases.is_empty() {
                continue;
            }
            let rows: [(&str, Box<dyn Fn(&CaseResult) -> Option<f64>>); 6] = [
                ("base_mean", Box::new(|c: &CaseResult| Some(c.pose_mean.position))),
                (
                    "base_plus",
                    Box::new(|c: &CaseResult| Some(c.pose_band_plus.position)),
                ),
                (
                    "base_minus",
                    Box::new(|c: &CaseResult| Some(c.pose_band_minus.position)),
                ),
                (
                    "l_mean",
                    Box::new(|c: &CaseResult| c.tuned.as_ref().map(|t| t.pose_mean.position)),
                ),
                (
                    "l_plus",
                    Box::new(|c: &CaseResult| c.tuned.as_ref().map(|t| t.pose_band_plus.position)),
                ),
                (
                    "l_minus",
                    Box::new(|c: &CaseResult| {
                        c.tuned.as_ref().map(|t| t.pose_band_minus.position)
                    }),
                ),
            ];
            for (stat, get) in &rows {
                let values: Vec<f64> = cases.iter().filter_map(|c| get(c)).collect();
                if values.is_empty() {
                    continue;
                }
                let (model, bare) = stat.split_once('_').unwrap();
                let _ = writeln!(out, "{},{},{},{}", variant.tag(), model, bare, fmt(median(&values)));
            }
        }
        out
    }
}

/// Bar chart of the error-bars CSV. The SVG is generated from the parsed
/// CSV text, so chart labels carry exactly the CSV numbers.
pub fn error_bars_svg(csv: &str) -> String {
    let rows: Vec<(&str, &str, &str, &str)> = csv
        .lines()
        .skip(1)
        .filter_map(|line| {
            let mut parts = line.split(',');
            Some((
                parts.next()?,
                parts.next()?,
                parts.next()?,
                parts.next()?,
            ))
        })
        .collect();
    let max_value = rows
        .iter()
        .filter_map(|r| r.3.parse::<f64>().ok())
        .fold(1e-9f64, f64::max);
    let bar_w = 34.0;
    let gap = 10.0;
    let group_gap = 30.0;
    let chart_h = 260.0;
    let base_y = 300.0;
    let width = 60.0 + rows.len() as f64 * (bar_w + gap) + 2.0 * group_gap;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"360\" font-family=\"monospace\" font-size=\"10\">",
        width.ceil()
    );
    let _ = writeln!(
        out,
        "<text x=\"10\" y=\"20\">final-point position error (median over seeds)</text>"
    );
    let mut x = 50.0;
    let mut last_variant = "";
    for (variant, model, stat, value_str) in rows {
        if !last_variant.is_empty() && variant != last_variant {
            x += group_gap;
        }
        last_variant = variant;
        let value: f64 = value_str.parse().unwrap_or(0.0);
        let h = (value / max_value) * chart_h;
        let color = match model {
            "base" => "#7a9e7e",
            _ => "#4a6fa5",
        };
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{:.2}\" width=\"{bar_w}\" height=\"{h:.2}\" fill=\"{color}\"/>",
            base_y - h
        );
        let _ = writeln!(
            out,
            "<text x=\"{x:.1}\" y=\"{:.2}\" transform=\"rotate(-60 {x:.1} {:.2})\">{value_str}</text>",
            base_y - h - 4.0,
            base_y - h - 4.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{x:.1}\" y=\"315\">{}</text>",
            format_args!("{variant}:{model}:{stat}")
        );
        x += bar_w + gap;
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_config() -> RunConfig {
        RunConfig::from_toml_str("seed = 5\n").unwrap()
    }

    #[test]
    fn run_log_round_trips() {
        let cfg = sample_config();
        let stage1 = LossCurve {
            train: vec![1.0, 0.5, 0.25],
            val: vec![],
        };
        let stage2 = LossCurve {
            train: vec![0.4, 0.3],
            val: vec![0.5, 0.45],
        };
        let text = format_run_log(
            &cfg,
            "vae",
            "task",
            &[("stage1", &stage1), ("stage2", &stage2)],
        );
        let log = parse_run_log(&text).unwrap();
        assert_eq!(log.config_hash, cfg.config_hash());
        assert_eq!(log.variant, "vae");
        assert_eq!(log.space, "task");
        assert_eq!(log.stages.len(), 2);
        assert_eq!(log.stages[0].curve.train, stage1.train);
        assert_eq!(log.stages[1].curve.val, stage2.val);
        assert_eq!(
            RunConfig::from_toml_str(&log.config_text).unwrap(),
            cfg,
            "embedded config parses back"
        );
    }

    #[test]
    fn run_log_rejects_garbage() {
        assert!(parse_run_log("").is_err());
        assert!(parse_run_log("dpmp-runlog 99\nconfig_begin\nconfig_end\n").is_err());
        assert!(parse_run_log("dpmp-runlog 1\nwhatever\n").is_err());
        // Unterminated config block.
        assert!(parse_run_log("dpmp-runlog 1\nconfig_hash x\nvariant a\nspace task\nconfig_begin\n").is_err());
    }

    #[test]
    fn median_is_the_lower_middle() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn svg_carries_csv_numbers_verbatim() {
        let csv = "variant,model,stat,position_error\nae,base,mean,0.123456\nae,l,mean,0.045678\n";
        let svg = error_bars_svg(csv);
        assert!(svg.contains("0.123456"));
        assert!(svg.contains("0.045678"));
        assert!(svg.contains("</svg>"));
    }
}
