//! Experiment configuration, stage pipelines and artifact handling.
//!
//! Every stage writes into `<out>/<stage>/`: `checkpoint.json`,
//! `metrics.csv` and `summary.json`, plus stage-specific extras
//! (`pairs.jsonl`, `tracker.json`, `trajectories.jsonl`, `report.csv`).
//! Post-training stages read the checkpoint named by their `init_from`
//! field, which is either a stage name or a file path.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align_dpo::{build_pairs, dpo_loss_and_grad, generate_candidates, write_pairs_jsonl, DpoConfig, PreferencePair};
use crate::align_grpo::{grpo_update, rollout_groups, GrpoConfig, SigmaAnneal};
use crate::align_mpo::{mpo_train_iteration, AdvantageNormalizer, MpoConfig, MpoState, TrackerConfig};
use crate::error::{Error, Result};
use crate::flow::{fm_loss_and_grad, ode_sample_many, TimeGrid, TimestepSampler};
use crate::gradcheck::{run_suite, GradcheckConfig, GradcheckReport};
use crate::net::{average_params, write_atomic, AdamWConfig, Checkpoint, NetworkSpec, OptimizerState, ParamVector, VelocityNet};
use crate::prompttok::{segment_prompt, TokenSpan};
use crate::rewards::RewardModel;
use crate::rng::{self, Rng};
use crate::sde::Trajectory;
use crate::worldgen::{read_records_jsonl, FilterReport, FilterThresholds, Target, Task};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FLOW_ALIGN_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Sft,
    Dpo,
    Grpo,
    Mpo,
    Eval,
    Gradcheck,
    Tokenize,
    Curate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::Grpo => "grpo",
            Stage::Mpo => "mpo",
            Stage::Eval => "eval",
            Stage::Gradcheck => "gradcheck",
            Stage::Tokenize => "tokenize",
            Stage::Curate => "curate",
        }
    }

    fn parse(name: &str) -> Option<Stage> {
        [
            Stage::Pretrain,
            Stage::Sft,
            Stage::Dpo,
            Stage::Grpo,
            Stage::Mpo,
            Stage::Eval,
            Stage::Gradcheck,
            Stage::Tokenize,
            Stage::Curate,
        ]
        .into_iter()
        .find(|s| s.as_str() == name)
    }

    fn key(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Learning rate 5e-6 and batch 64 for the RL stages.
    #[value(name = "rl-text")]
    RlText,
    /// Learning rate 1e-5, GRPO batch 32, 300 GRPO iterations, 4000 DPO steps.
    #[value(name = "table1")]
    Table1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainStage {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub sampler: TimestepSampler,
    pub log_every: usize,
}

impl Default for PretrainStage {
    fn default() -> Self {
        PretrainStage {
            steps: 20_000,
            batch_size: 128,
            optimizer: AdamWConfig::with_lr(1e-3),
            sampler: TimestepSampler::logit_normal(),
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftStage {
    pub init_from: String,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub sampler: TimestepSampler,
    pub candidates_per_condition: usize,
    pub reward_threshold: f64,
    /// Independent fine-tuning runs whose parameters are averaged.
    pub average_runs: usize,
    pub grid: TimeGrid,
    pub log_every: usize,
}

impl Default for SftStage {
    fn default() -> Self {
        SftStage {
            init_from: "pretrain".into(),
            steps: 2_000,
            batch_size: 128,
            optimizer: AdamWConfig::with_lr(3e-4),
            sampler: TimestepSampler::uniform(),
            candidates_per_condition: 1_024,
            reward_threshold: 0.8,
            average_runs: 3,
            grid: TimeGrid::new(12),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoStage {
    pub init_from: String,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub loss: DpoConfig,
    /// Prompt instances per condition, each with its own candidate set.
    pub groups_per_condition: usize,
    pub candidates_per_group: usize,
    pub score_noise: f64,
    /// Each round re-snapshots generator and reference, then trains `steps`.
    pub rounds: usize,
    pub grid: TimeGrid,
    pub log_every: usize,
}

impl Default for DpoStage {
    fn default() -> Self {
        DpoStage {
            init_from: "pretrain".into(),
            steps: 2_000,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            loss: DpoConfig::default(),
            groups_per_condition: 64,
            candidates_per_group: 6,
            score_noise: 0.1,
            rounds: 1,
            grid: TimeGrid::new(12),
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoStage {
    pub init_from: String,
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    pub group_size: usize,
    pub batch_size: usize,
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub grid: TimeGrid,
    pub sigma_start: f64,
    pub sigma_floor: f64,
    pub dump_trajectories: bool,
}

impl Default for GrpoStage {
    fn default() -> Self {
        let g = GrpoConfig::new(300);
        GrpoStage {
            init_from: "pretrain".into(),
            iterations: 300,
            optimizer: AdamWConfig::default(),
            group_size: g.group_size,
            batch_size: g.batch_size,
            clip_eps: g.clip_eps,
            inner_epochs: g.inner_epochs,
            grid: g.grid,
            sigma_start: g.sigma.start,
            sigma_floor: g.sigma.floor,
            dump_trajectories: false,
        }
    }
}

impl GrpoStage {
    pub fn config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            inner_epochs: self.inner_epochs,
            grid: self.grid,
            sigma: SigmaAnneal {
                start: self.sigma_start,
                floor: self.sigma_floor,
                total_iters: self.iterations,
            },
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpoStage {
    pub init_from: String,
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    pub gamma: f64,
    pub eta: f64,
    pub adv_clip: f64,
    pub grid: TimeGrid,
    pub sigma_start: f64,
    pub sigma_floor: f64,
    pub tracker: TrackerConfig,
    pub normalizer: AdvantageNormalizer,
    pub dump_trajectories: bool,
}

impl Default for MpoStage {
    fn default() -> Self {
        let m = MpoConfig::new(300);
        MpoStage {
            init_from: "pretrain".into(),
            iterations: 300,
            optimizer: AdamWConfig::default(),
            gamma: m.gamma,
            eta: m.eta,
            adv_clip: m.adv_clip,
            grid: m.grid,
            sigma_start: m.sigma.start,
            sigma_floor: m.sigma.floor,
            tracker: m.tracker,
            normalizer: m.normalizer,
            dump_trajectories: false,
        }
    }
}

impl MpoStage {
    pub fn config(&self) -> MpoConfig {
        MpoConfig {
            gamma: self.gamma,
            eta: self.eta,
            adv_clip: self.adv_clip,
            grid: self.grid,
            sigma: SigmaAnneal {
                start: self.sigma_start,
                floor: self.sigma_floor,
                total_iters: self.iterations,
            },
            tracker: self.tracker,
            normalizer: self.normalizer,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    pub init_from: String,
    pub samples_per_condition: usize,
    pub grid: TimeGrid,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            init_from: "pretrain".into(),
            samples_per_condition: 2_000,
            grid: TimeGrid::new(12),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckStage {
    /// Random architectures per loss.
    pub configs: usize,
    pub h: f64,
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckStage {
    fn default() -> Self {
        let g = GradcheckConfig::default();
        GradcheckStage {
            configs: 20,
            h: g.h,
            floor: g.floor,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeStage {
    pub prompts: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurateStage {
    /// JSON-lines metadata records.
    pub records: Option<PathBuf>,
    pub thresholds: FilterThresholds,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Defaults to the 64-64 toy network sized for the task.
    pub network: Option<NetworkSpec>,
    pub stage: Option<Stage>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub pretrain: PretrainStage,
    pub sft: SftStage,
    pub dpo: DpoStage,
    pub grpo: GrpoStage,
    pub mpo: MpoStage,
    pub eval: EvalStage,
    pub gradcheck: GradcheckStage,
    pub tokenize: TokenizeStage,
    pub curate: CurateStage,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        self.task.validate()?;
        let spec = match &self.network {
            Some(s) => s.clone(),
            None => NetworkSpec {
                data_dim: self.task.conditions[0].dim(),
                ..NetworkSpec::toy_2d(self.task.conditions.len())
            },
        };
        spec.validate()?;
        if spec.condition_count != self.task.conditions.len() {
            return Err(Error::Config(format!(
                "network has {} conditions, task has {}",
                spec.condition_count,
                self.task.conditions.len()
            )));
        }
        if spec.data_dim != self.task.conditions[0].dim() {
            return Err(Error::Config("network and task dimensions differ".into()));
        }
        Ok(spec)
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::RlText => {
                for opt in [&mut self.grpo.optimizer, &mut self.mpo.optimizer] {
                    opt.lr = 5e-6;
                }
                self.grpo.batch_size = 64;
            }
            Preset::Table1 => {
                for opt in [&mut self.dpo.optimizer, &mut self.grpo.optimizer, &mut self.mpo.optimizer] {
                    opt.lr = 1e-5;
                }
                self.dpo.batch_size = 64;
                self.dpo.steps = 4_000;
                self.grpo.batch_size = 32;
                self.grpo.iterations = 300;
            }
        }
    }
}

/// Append-only metrics table: `stage, iteration, columns...`.
pub struct MetricsLog {
    stage: String,
    columns: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
    writer: Option<csv::Writer<File>>,
}

impl MetricsLog {
    pub fn in_memory(stage: &str, columns: &[&str]) -> Self {
        MetricsLog {
            stage: stage.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            writer: None,
        }
    }

    pub fn to_file(path: &Path, stage: &str, columns: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["stage", "iteration"];
        header.extend_from_slice(columns);
        w.write_record(&header)?;
        w.flush()?;
        let mut log = Self::in_memory(stage, columns);
        log.writer = Some(w);
        Ok(log)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[(usize, Vec<f64>)] {
        &self.rows
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, r)| r[i]).collect())
    }

    pub fn push(&mut self, iteration: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Contract(format!(
                "metrics row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if let Some((last, _)) = self.rows.last() {
            if iteration < *last {
                return Err(Error::Contract(format!("iteration {iteration} after {last}")));
            }
        }
        if let Some(w) = self.writer.as_mut() {
            let mut rec = vec![self.stage.clone(), iteration.to_string()];
            rec.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            w.flush()?;
        }
        self.rows.push((iteration, values.to_vec()));
        Ok(())
    }
}

/// Where fm batches come from.
pub enum DataSource<'a> {
    /// Fresh target samples, conditions cycled through the batch.
    Task(&'a Task),
    /// Uniform draws with replacement from a fixed pool.
    Pool(&'a [(Vec<f64>, usize)]),
}

impl DataSource<'_> {
    pub fn batch(&self, n: usize, rng: &mut Rng) -> Result<Vec<(Vec<f64>, usize)>> {
        match self {
            DataSource::Task(task) => {
                let cc = task.conditions.len();
                if cc == 0 {
                    return Err(Error::Config("task has no conditions".into()));
                }
                Ok((0..n)
                    .map(|i| (task.conditions[i % cc].sample_one(rng), i % cc))
                    .collect())
            }
            DataSource::Pool(pool) => {
                if pool.is_empty() {
                    return Err(Error::Config("training pool is empty".into()));
                }
                Ok((0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect())
            }
        }
    }
}

fn check_loss(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("loss {loss}"),
        })
    }
}

/// Flow-matching updates; `theta` holds the last good parameters if an
/// error is returned. Rows are logged at `offset + step`.
#[allow(clippy::too_many_arguments)]
pub fn train_fm(
    net: &VelocityNet,
    theta: &mut ParamVector,
    opt: &mut OptimizerState,
    data: &DataSource,
    sampler: &TimestepSampler,
    steps: usize,
    batch_size: usize,
    seed: u64,
    log: &mut MetricsLog,
    log_every: usize,
    offset: usize,
) -> Result<()> {
    for step in 0..steps {
        let mut r = rng::substream(seed, &[step as u64]);
        let batch = data.batch(batch_size, &mut r)?;
        let (loss, grad) = fm_loss_and_grad(net, theta, &batch, sampler, &mut r)?;
        check_loss(loss, step)?;
        let report = opt.adamw_step(theta, &grad)?;
        if log_every > 0 && (step % log_every == 0 || step + 1 == steps) {
            log.push(offset + step, &[loss, report.grad_norm])?;
        }
    }
    Ok(())
}

pub const FM_COLUMNS: [&str; 2] = ["loss", "grad_norm"];

pub fn pretrain(
    net: &VelocityNet,
    theta: &mut ParamVector,
    task: &Task,
    stage: &PretrainStage,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<()> {
    let mut opt = OptimizerState::new(net.param_count(), stage.optimizer);
    train_fm(
        net,
        theta,
        &mut opt,
        &DataSource::Task(task),
        &stage.sampler,
        stage.steps,
        stage.batch_size,
        seed,
        log,
        stage.log_every,
        0,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SftSummary {
    pub candidates: usize,
    pub kept: usize,
    pub runs: usize,
}

/// Fine-tunes on the high-reward subset of the upstream model's own
/// samples, repeated `average_runs` times and averaged.
pub fn sft(
    net: &VelocityNet,
    upstream: &ParamVector,
    task: &Task,
    stage: &SftStage,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<(ParamVector, SftSummary)> {
    if stage.average_runs == 0 {
        return Err(Error::Config("average_runs must be at least 1".into()));
    }
    let rewards = task.rewards();
    let mut pool = Vec::new();
    let mut candidates = 0;
    for c in 0..task.conditions.len() {
        let pts = ode_sample_many(
            net,
            upstream,
            c,
            &stage.grid,
            stage.candidates_per_condition,
            rng::substream(seed, &[0, c as u64]).gen(),
        )?;
        candidates += pts.len();
        pool.extend(
            pts.into_iter()
                .filter(|x| rewards.reward(x, c) >= stage.reward_threshold)
                .map(|x| (x, c)),
        );
    }
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "no candidate reached reward {}",
            stage.reward_threshold
        )));
    }
    let mut runs = Vec::with_capacity(stage.average_runs);
    for k in 0..stage.average_runs {
        let mut theta = upstream.clone();
        let mut opt = OptimizerState::new(net.param_count(), stage.optimizer);
        train_fm(
            net,
            &mut theta,
            &mut opt,
            &DataSource::Pool(&pool),
            &stage.sampler,
            stage.steps,
            stage.batch_size,
            rng::substream(seed, &[1, k as u64]).gen(),
            log,
            stage.log_every,
            k * stage.steps,
        )?;
        runs.push(theta);
    }
    let averaged = average_params(&runs, None)?;
    Ok((
        averaged,
        SftSummary {
            candidates,
            kept: pool.len(),
            runs: stage.average_runs,
        },
    ))
}

pub const DPO_COLUMNS: [&str; 5] = ["round", "loss", "accuracy", "skipped", "grad_norm"];

/// Offline preference pairs from a frozen snapshot: several prompt
/// instances per condition, each scored and paired on its own.
pub fn dpo_pairs(
    net: &VelocityNet,
    snapshot: &ParamVector,
    task: &Task,
    stage: &DpoStage,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let rewards = task.rewards();
    let mut pairs = Vec::new();
    for c in 0..task.conditions.len() {
        for g in 0..stage.groups_per_condition {
            let mut r = rng::substream(seed, &[c as u64, g as u64]);
            let cands = generate_candidates(
                net,
                snapshot,
                c,
                stage.candidates_per_group,
                &stage.grid,
                &rewards,
                stage.score_noise,
                &mut r,
            )?;
            pairs.extend(build_pairs(&cands));
        }
    }
    Ok(pairs)
}

/// Returns the pairs of the last round.
pub fn dpo(
    net: &VelocityNet,
    theta: &mut ParamVector,
    task: &Task,
    stage: &DpoStage,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<Vec<PreferencePair>> {
    if stage.rounds == 0 || stage.batch_size == 0 {
        return Err(Error::Config("dpo needs rounds >= 1 and batch_size >= 1".into()));
    }
    let mut opt = OptimizerState::new(net.param_count(), stage.optimizer);
    let mut pairs = Vec::new();
    for round in 0..stage.rounds {
        let reference = theta.clone();
        pairs = dpo_pairs(net, &reference, task, stage, rng::substream(seed, &[0, round as u64]).gen())?;
        if pairs.is_empty() {
            return Err(Error::Config("no preference pairs could be built".into()));
        }
        for step in 0..stage.steps {
            let mut r = rng::substream(seed, &[1, round as u64, step as u64]);
            let batch: Vec<PreferencePair> = (0..stage.batch_size)
                .map(|_| pairs[r.gen_range(0..pairs.len())].clone())
                .collect();
            let out = dpo_loss_and_grad(net, theta, &reference, &stage.loss, &batch, &mut r)?;
            check_loss(out.loss, step)?;
            let report = opt.adamw_step(theta, &out.grad)?;
            if stage.log_every > 0 && (step % stage.log_every == 0 || step + 1 == stage.steps) {
                log.push(
                    round * stage.steps + step,
                    &[round as f64, out.loss, out.accuracy, out.skipped as f64, report.grad_norm],
                )?;
            }
        }
    }
    Ok(pairs)
}

/// One JSON object per trajectory: `{iteration, trajectory}`.
pub struct TrajectoryDump {
    out: BufWriter<File>,
}

impl TrajectoryDump {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(TrajectoryDump {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write(&mut self, iteration: usize, traj: &Trajectory) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            iteration: usize,
            trajectory: &'a Trajectory,
        }
        serde_json::to_writer(&mut self.out, &Line { iteration, trajectory: traj })?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub const GRPO_COLUMNS: [&str; 8] = [
    "mean_reward",
    "std_reward",
    "mean_ratio",
    "clip_fraction",
    "grad_norm",
    "sigma",
    "trajectories",
    "optimizer_steps",
];

#[allow(clippy::too_many_arguments)]
pub fn grpo(
    net: &VelocityNet,
    theta: &mut ParamVector,
    rewards: &dyn RewardModel,
    condition_count: usize,
    stage: &GrpoStage,
    seed: u64,
    log: &mut MetricsLog,
    mut dump: Option<&mut TrajectoryDump>,
) -> Result<()> {
    let cfg = stage.config();
    cfg.validate()?;
    let mut opt = OptimizerState::new(net.param_count(), stage.optimizer);
    for it in 0..stage.iterations {
        let snapshot = theta.clone();
        let groups = rollout_groups(net, &snapshot, &cfg, condition_count, rewards, it, seed)?;
        if let Some(d) = dump.as_deref_mut() {
            for traj in groups.iter().flat_map(|g| &g.trajectories) {
                d.write(it, traj)?;
            }
        }
        let m = grpo_update(net, theta, &mut opt, &cfg, &groups, it)?;
        log.push(
            it,
            &[
                m.mean_reward,
                m.std_reward,
                m.mean_ratio,
                m.clip_fraction,
                m.grad_norm,
                m.sigma,
                m.trajectories as f64,
                m.optimizer_steps as f64,
            ],
        )?;
    }
    Ok(())
}

pub const MPO_COLUMNS: [&str; 11] = [
    "condition", "reward", "raw_A", "norm_A", "w_c", "Q", "mu_c", "var_c", "grad_norm", "g_t",
    "optimizer_steps",
];

#[allow(clippy::too_many_arguments)]
pub fn mpo(
    net: &VelocityNet,
    theta: &mut ParamVector,
    rewards: &dyn RewardModel,
    condition_count: usize,
    stage: &MpoStage,
    seed: u64,
    log: &mut MetricsLog,
    mut dump: Option<&mut TrajectoryDump>,
) -> Result<MpoState> {
    let cfg = stage.config();
    cfg.validate()?;
    let mut state = MpoState::new(&cfg);
    let mut opt = OptimizerState::new(net.param_count(), stage.optimizer);
    for it in 0..stage.iterations {
        let step = mpo_train_iteration(net, theta, &mut opt, &cfg, &mut state, condition_count, rewards, it, seed)?;
        if let Some(d) = dump.as_deref_mut() {
            d.write(it, &step.trajectory)?;
        }
        let m = step.metrics;
        log.push(
            it,
            &[
                m.condition as f64,
                m.reward,
                m.raw_a,
                m.norm_a,
                m.w_c,
                m.q,
                m.mu_c,
                m.var_c,
                m.grad_norm,
                m.g_t,
                state.optimizer_steps as f64,
            ],
        )?;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionEval {
    pub condition: usize,
    pub samples: usize,
    /// Fraction of samples assigned to each mixture component.
    pub coverage: Vec<f64>,
    /// Fraction within three standard deviations of some component.
    pub in_mode: f64,
    pub mean_reward: f64,
    pub mean_realism: f64,
}

/// Metrics for given points; with target samples this is the oracle path.
pub fn evaluate_points(task: &Task, condition: usize, points: &[Vec<f64>]) -> Result<ConditionEval> {
    let spec = task
        .conditions
        .get(condition)
        .ok_or_else(|| Error::Contract(format!("unknown condition {condition}")))?;
    if points.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let modes = match &spec.target {
        Target::Mixture { components } => components.len(),
        Target::TwoMoons { .. } => 0,
    };
    let n = points.len() as f64;
    let mut counts = vec![0usize; modes];
    let (mut reward, mut realism) = (0.0, 0.0);
    for x in points {
        if let Some(k) = spec.covering_mode(x) {
            counts[k] += 1;
        }
        reward += spec.reward.evaluate(x);
        realism += spec.realism(x);
    }
    let coverage: Vec<f64> = counts.iter().map(|&k| k as f64 / n).collect();
    Ok(ConditionEval {
        condition,
        samples: points.len(),
        in_mode: coverage.iter().sum(),
        coverage,
        mean_reward: reward / n,
        mean_realism: realism / n,
    })
}

pub fn evaluate(
    net: &VelocityNet,
    theta: &ParamVector,
    task: &Task,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<Vec<ConditionEval>> {
    if n == 0 {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    (0..task.conditions.len())
        .map(|c| {
            let pts = ode_sample_many(net, theta, c, grid, n, rng::substream(seed, &[c as u64]).gen())?;
            evaluate_points(task, c, &pts)
        })
        .collect()
}

/// Stage name or explicit path to a checkpoint file.
pub fn resolve_upstream(out_root: &Path, init_from: &str) -> Result<PathBuf> {
    let (path, hint) = match Stage::parse(init_from) {
        Some(s) => (
            out_root.join(s.as_str()).join("checkpoint.json"),
            format!("; run `flow-align {}` first", s.as_str()),
        ),
        None => (PathBuf::from(init_from), String::new()),
    };
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Dependency(format!(
            "checkpoint {} not found{hint}",
            path.display()
        )))
    }
}

pub fn resolve_out_root(cli: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_upstream(out_root: &Path, init_from: &str, spec: &NetworkSpec) -> Result<ParamVector> {
    let ckpt = Checkpoint::load(&resolve_upstream(out_root, init_from)?)?;
    if &ckpt.spec != spec {
        return Err(Error::Config(format!(
            "checkpoint from {init_from} was trained with a different network spec"
        )));
    }
    Ok(ckpt.params())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Saves `last_good.json` when training diverged.
fn keep_last_good<T>(dir: &Path, spec: &NetworkSpec, theta: &ParamVector, res: Result<T>) -> Result<T> {
    if let Err(Error::Divergence { .. }) = &res {
        Checkpoint::new(spec, theta, 0).save(&dir.join("last_good.json"))?;
    }
    res
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_root: PathBuf,
    pub seed: u64,
    pub dump_trajectories: bool,
}

/// Runs one stage and returns its JSON summary.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<serde_json::Value> {
    let dir = opts.out_root.join(stage.as_str());
    let stage_seed: u64 = rng::substream(opts.seed, &[stage.key()]).gen();
    let summary = match stage {
        Stage::Tokenize => {
            #[derive(Serialize)]
            struct Segmented<'a> {
                prompt: &'a str,
                spans: Vec<TokenSpan>,
            }
            let out: Vec<_> = cfg
                .tokenize
                .prompts
                .iter()
                .map(|p| Segmented {
                    prompt: p,
                    spans: segment_prompt(p),
                })
                .collect();
            serde_json::to_value(out)?
        }
        Stage::Gradcheck => {
            let g = &cfg.gradcheck;
            let reports = run_suite(g.configs, opts.seed, &GradcheckConfig { h: g.h, floor: g.floor })?;
            write_gradcheck_csv(&dir.join("report.csv"), &reports)?;
            let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let summary = serde_json::json!({
                "cases": reports.len(),
                "max_rel_error": max,
                "tolerance": g.tolerance,
            });
            write_json(&dir.join("summary.json"), &summary)?;
            if !(max < g.tolerance) {
                return Err(Error::Contract(format!(
                    "gradient check failed: max relative error {max:e} >= {:e}",
                    g.tolerance
                )));
            }
            summary
        }
        Stage::Curate => {
            let path = cfg
                .curate
                .records
                .as_ref()
                .ok_or_else(|| Error::Config("curate.records is not set".into()))?;
            let records = read_records_jsonl(path)?;
            let report = FilterReport::tally(&records, &cfg.curate.thresholds);
            std::fs::create_dir_all(&dir)?;
            report.write_csv(&dir.join("report.csv"))?;
            serde_json::json!({ "records": records.len(), "kept": report.kept })
        }
        _ => run_training_stage(stage, cfg, opts, &dir, stage_seed)?,
    };
    Ok(summary)
}

fn run_training_stage(
    stage: Stage,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    dir: &Path,
    seed: u64,
) -> Result<serde_json::Value> {
    let spec = cfg.network_spec()?;
    let net = VelocityNet::new(spec.clone())?;
    let task = &cfg.task;
    let cc = task.conditions.len();
    let rewards = task.rewards();
    let metrics = |cols: &[&str]| MetricsLog::to_file(&dir.join("metrics.csv"), stage.as_str(), cols);
    let dump = |enabled: bool| -> Result<Option<TrajectoryDump>> {
        if enabled || opts.dump_trajectories {
            TrajectoryDump::create(&dir.join("trajectories.jsonl")).map(Some)
        } else {
            Ok(None)
        }
    };

    let (theta, summary) = match stage {
        Stage::Pretrain => {
            let mut log = metrics(&FM_COLUMNS)?;
            let mut theta = net.init_params(seed);
            let res = pretrain(&net, &mut theta, task, &cfg.pretrain, seed, &mut log);
            keep_last_good(dir, &spec, &theta, res)?;
            let last = log.rows().last().map_or(f64::NAN, |(_, r)| r[0]);
            (theta, serde_json::json!({ "steps": cfg.pretrain.steps, "final_loss": last }))
        }
        Stage::Sft => {
            let upstream = load_upstream(&opts.out_root, &cfg.sft.init_from, &spec)?;
            let mut log = metrics(&FM_COLUMNS)?;
            let res = sft(&net, &upstream, task, &cfg.sft, seed, &mut log);
            let (theta, s) = keep_last_good(dir, &spec, &upstream, res)?;
            (theta, serde_json::to_value(s)?)
        }
        Stage::Dpo => {
            let mut theta = load_upstream(&opts.out_root, &cfg.dpo.init_from, &spec)?;
            let mut log = metrics(&DPO_COLUMNS)?;
            let res = dpo(&net, &mut theta, task, &cfg.dpo, seed, &mut log);
            let pairs = keep_last_good(dir, &spec, &theta, res)?;
            write_pairs_jsonl(&dir.join("pairs.jsonl"), &pairs)?;
            let acc = log.column("accuracy").and_then(|a| a.last().copied());
            (theta, serde_json::json!({ "pairs": pairs.len(), "final_accuracy": acc }))
        }
        Stage::Grpo => {
            let mut theta = load_upstream(&opts.out_root, &cfg.grpo.init_from, &spec)?;
            let mut log = metrics(&GRPO_COLUMNS)?;
            let mut d = dump(cfg.grpo.dump_trajectories)?;
            let res = grpo(&net, &mut theta, &rewards, cc, &cfg.grpo, seed, &mut log, d.as_mut());
            keep_last_good(dir, &spec, &theta, res)?;
            if let Some(d) = d {
                d.finish()?;
            }
            let r = log.column("mean_reward").unwrap_or_default();
            (
                theta,
                serde_json::json!({
                    "iterations": cfg.grpo.iterations,
                    "first_mean_reward": r.first(),
                    "last_mean_reward": r.last(),
                }),
            )
        }
        Stage::Mpo => {
            let mut theta = load_upstream(&opts.out_root, &cfg.mpo.init_from, &spec)?;
            let mut log = metrics(&MPO_COLUMNS)?;
            let mut d = dump(cfg.mpo.dump_trajectories)?;
            let res = mpo(&net, &mut theta, &rewards, cc, &cfg.mpo, seed, &mut log, d.as_mut());
            let state = keep_last_good(dir, &spec, &theta, res)?;
            if let Some(d) = d {
                d.finish()?;
            }
            state.tracker.save(&dir.join("tracker.json"))?;
            (
                theta,
                serde_json::json!({
                    "iterations": cfg.mpo.iterations,
                    "trajectories": state.trajectories,
                    "optimizer_steps": state.optimizer_steps,
                }),
            )
        }
        Stage::Eval => {
            let theta = load_upstream(&opts.out_root, &cfg.eval.init_from, &spec)?;
            let e = &cfg.eval;
            let evals = evaluate(&net, &theta, task, e.samples_per_condition, &e.grid, seed)?;
            write_eval_csv(&dir.join("metrics.csv"), &evals)?;
            let summary = serde_json::to_value(&evals)?;
            write_json(&dir.join("summary.json"), &summary)?;
            return Ok(summary);
        }
        Stage::Gradcheck | Stage::Tokenize | Stage::Curate => unreachable!("handled by run_stage"),
    };
    Checkpoint::new(&spec, &theta, 0).save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_gradcheck_csv(path: &Path, reports: &[GradcheckReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["loss", "seed", "params", "max_rel_error", "worst_index"])?;
    for r in reports {
        w.write_record([
            r.kind.as_str().to_string(),
            r.seed.to_string(),
            r.params.to_string(),
            r.max_rel_error.to_string(),
            r.worst_index.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

fn write_eval_csv(path: &Path, evals: &[ConditionEval]) -> Result<()> {
    let modes = evals.iter().map(|e| e.coverage.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["stage".to_string(), "condition".into(), "samples".into()];
    header.extend((0..modes).map(|k| format!("coverage_{k}")));
    header.extend(["in_mode".into(), "mean_reward".into(), "mean_realism".into()]);
    w.write_record(&header)?;
    for e in evals {
        let mut rec = vec!["eval".to_string(), e.condition.to_string(), e.samples.to_string()];
        rec.extend((0..modes).map(|k| e.coverage.get(k).copied().unwrap_or(0.0).to_string()));
        rec.extend([e.in_mode.to_string(), e.mean_reward.to_string(), e.mean_realism.to_string()]);
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}
