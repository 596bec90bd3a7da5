//! Monolithic policy optimization.
//!
//! One SDE trajectory and one optimizer step per iteration. The baseline
//! comes from a persistent per-condition Gaussian belief updated with a
//! scalar Kalman filter whose process noise is proportional to the policy
//! KL caused by the step just taken. Advantages are normalized by running
//! EMA statistics, conditions are drawn by an uncertainty-driven
//! curriculum, and the update is advantage-weighted regression of the
//! velocity onto the straight-line target of the sampled trajectory.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align_grpo::SigmaAnneal;
use crate::error::{Error, Result};
use crate::flow::{target_velocity, TimeGrid};
use crate::net::{OptimizerState, ParamVector, VelocityNet};
use crate::rewards::RewardModel;
use crate::rng::{self, Rng};
use crate::sde::{sde_rollout, trajectory_kl, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTrackerEntry {
    pub mu: f64,
    pub var: f64,
    pub n: u64,
}

impl ValueTrackerEntry {
    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub obs_var: f64,
    pub alpha: f64,
    pub init_mu: f64,
    pub init_var: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            obs_var: 0.25,
            alpha: 1.0,
            init_mu: 0.5,
            init_var: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn prior(&self) -> ValueTrackerEntry {
        ValueTrackerEntry {
            mu: self.init_mu,
            var: self.init_var,
            n: 0,
        }
    }
}

/// One Kalman cycle on a scalar belief.
pub fn tracker_update(
    entry: &ValueTrackerEntry,
    r: f64,
    q: f64,
    cfg: &TrackerConfig,
) -> Result<ValueTrackerEntry> {
    if !r.is_finite() {
        return Err(Error::NumericInput(format!("reward {r}")));
    }
    if !(q >= 0.0) {
        return Err(Error::Contract(format!("process noise {q} must be >= 0")));
    }
    let gain = if entry.var == 0.0 {
        0.0
    } else {
        entry.var / (entry.var + cfg.obs_var)
    };
    Ok(ValueTrackerEntry {
        mu: entry.mu + gain * (r - entry.mu),
        var: (1.0 - gain) * entry.var + q,
        n: entry.n + 1,
    })
}

/// Beliefs for every condition seen so far; unseen ones use the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTracker {
    pub cfg: TrackerConfig,
    pub entries: BTreeMap<usize, ValueTrackerEntry>,
}

impl ValueTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        ValueTracker {
            cfg,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, c: usize) -> ValueTrackerEntry {
        self.entries.get(&c).copied().unwrap_or_else(|| self.cfg.prior())
    }

    pub fn observe(&mut self, c: usize, r: f64, q: f64) -> Result<ValueTrackerEntry> {
        let next = tracker_update(&self.get(c), r, q, &self.cfg)?;
        self.entries.insert(c, next);
        Ok(next)
    }

    /// `{condition_id: {mu, var, n}}`
    pub fn save(&self, path: &Path) -> Result<()> {
        let table: BTreeMap<String, ValueTrackerEntry> =
            self.entries.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        crate::net::write_atomic(path, serde_json::to_string_pretty(&table)?.as_bytes())
    }

    pub fn load(path: &Path, cfg: TrackerConfig) -> Result<Self> {
        let table: BTreeMap<String, ValueTrackerEntry> =
            serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut entries = BTreeMap::new();
        for (k, v) in table {
            let id = k
                .parse()
                .map_err(|_| Error::Config(format!("bad condition id {k:?} in tracker table")))?;
            entries.insert(id, v);
        }
        Ok(ValueTracker { cfg, entries })
    }
}

/// `Q = alpha * KL(before -> after)` on the stored states of `traj`.
pub fn kl_process_noise(
    net: &VelocityNet,
    before: &ParamVector,
    after: &ParamVector,
    traj: &Trajectory,
    alpha: f64,
    t_min: f64,
) -> Result<f64> {
    let kl = trajectory_kl(net, before, after, traj, t_min)?;
    Ok(alpha * kl)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageNormalizer {
    pub mu_a: f64,
    pub var_a: f64,
    pub lambda: f64,
    pub eps: f64,
}

impl Default for AdvantageNormalizer {
    fn default() -> Self {
        AdvantageNormalizer {
            mu_a: 0.0,
            var_a: 1.0,
            lambda: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdvantageNormalizer {
    /// Normalizes with the current statistics, then folds `a` into them.
    pub fn normalize(&mut self, a: f64) -> f64 {
        let out = (a - self.mu_a) / (self.var_a.sqrt() + self.eps);
        self.mu_a = self.lambda * self.mu_a + (1.0 - self.lambda) * a;
        let dev = a - self.mu_a;
        self.var_a = (self.lambda * self.var_a + (1.0 - self.lambda) * dev * dev).max(self.eps * self.eps);
        out
    }
}

pub fn normalize_advantage(norm: &AdvantageNormalizer, a: f64) -> (f64, AdvantageNormalizer) {
    let mut next = *norm;
    let out = next.normalize(a);
    (out, next)
}

/// Per-condition `(sigma_c, n_c)` with the balance coefficient `eta`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumState {
    pub sigma: Vec<f64>,
    pub n: Vec<u64>,
    pub eta: f64,
}

impl CurriculumState {
    pub fn from_tracker(tracker: &ValueTracker, condition_count: usize, eta: f64) -> Self {
        let entries: Vec<_> = (0..condition_count).map(|c| tracker.get(c)).collect();
        CurriculumState {
            sigma: entries.iter().map(|e| e.sigma()).collect(),
            n: entries.iter().map(|e| e.n).collect(),
            eta,
        }
    }

    /// `p(c) ∝ sigma_c + eta / sqrt(n_c + 1)`; uniform when every weight is zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = self
            .sigma
            .iter()
            .zip(&self.n)
            .map(|(s, &n)| s + self.eta / ((n + 1) as f64).sqrt())
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter().map(|x| x / total).collect()
        } else {
            vec![1.0 / w.len() as f64; w.len()]
        }
    }
}

pub fn curriculum_sample(state: &CurriculumState, rng: &mut Rng) -> Result<usize> {
    if state.sigma.is_empty() {
        return Err(Error::Contract("curriculum has no conditions".into()));
    }
    let p = state.probabilities();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, pc) in p.iter().enumerate() {
        acc += pc;
        if u < acc {
            return Ok(c);
        }
    }
    Ok(p.len() - 1)
}

/// `1 + gamma |r - mu_c| / (sigma_c + eps)`
pub fn surprise_weight(r: f64, entry: &ValueTrackerEntry, gamma: f64, eps: f64) -> f64 {
    1.0 + gamma * (r - entry.mu).abs() / (entry.sigma() + eps)
}

/// `weight * mean_t |v(z_t, c, t) - (z_t - z_0) / t|^2` with `z_0` the
/// trajectory endpoint; `weight` is a constant.
pub fn mpo_loss_and_grad(
    net: &VelocityNet,
    theta: &ParamVector,
    traj: &Trajectory,
    weight: f64,
    t_min: f64,
) -> Result<(f64, ParamVector)> {
    if traj.steps.is_empty() {
        return Err(Error::Contract("trajectory has no steps".into()));
    }
    let n = traj.steps.len() as f64;
    let mut grad = ParamVector::zeros(net.param_count());
    let mut loss = 0.0;
    for record in &traj.steps {
        if record.t < t_min * (1.0 - 1e-9) {
            return Err(Error::Contract(format!("stored step at t={} below t_min", record.t)));
        }
        let target = target_velocity(&record.x, &traj.x_final, record.t);
        let (v, cache) = net.forward(theta, &record.x, record.t, traj.condition)?;
        let resid: Vec<f64> = v.iter().zip(&target).map(|(a, b)| a - b).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>();
        if weight != 0.0 {
            let up: Vec<f64> = resid.iter().map(|r| weight * 2.0 * r / n).collect();
            net.backward_into(theta, &cache, &up, &mut grad)?;
        }
    }
    Ok((weight * loss / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpoConfig {
    pub gamma: f64,
    pub eta: f64,
    pub adv_clip: f64,
    pub grid: TimeGrid,
    pub sigma: SigmaAnneal,
    pub tracker: TrackerConfig,
    pub normalizer: AdvantageNormalizer,
    pub eps: f64,
}

impl MpoConfig {
    pub fn new(total_iters: usize) -> Self {
        MpoConfig {
            gamma: 0.5,
            eta: 1.0,
            adv_clip: 3.0,
            grid: TimeGrid::new(12),
            sigma: SigmaAnneal::new(total_iters),
            tracker: TrackerConfig::default(),
            normalizer: AdvantageNormalizer::default(),
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.eta >= 0.0 && self.adv_clip > 0.0) {
            return Err(Error::Config("need gamma >= 0, eta >= 0, adv_clip > 0".into()));
        }
        if !(self.sigma.floor > 0.0 && self.sigma.start >= 0.0) {
            return Err(Error::Config("sigma anneal needs start >= 0 and a positive floor".into()));
        }
        if !(self.tracker.obs_var > 0.0 && self.tracker.init_var > 0.0 && self.tracker.alpha >= 0.0) {
            return Err(Error::Config("tracker needs obs_var > 0, init_var > 0, alpha >= 0".into()));
        }
        if !(self.normalizer.lambda > 0.0 && self.normalizer.lambda < 1.0) {
            return Err(Error::Config("normalizer lambda must lie in (0, 1)".into()));
        }
        self.grid.validate()
    }
}

/// Mutable run state; a single writer advances it one iteration at a time.
#[derive(Clone, Debug)]
pub struct MpoState {
    pub tracker: ValueTracker,
    pub normalizer: AdvantageNormalizer,
    pub trajectories: u64,
    pub optimizer_steps: u64,
}

impl MpoState {
    pub fn new(cfg: &MpoConfig) -> Self {
        MpoState {
            tracker: ValueTracker::new(cfg.tracker),
            normalizer: cfg.normalizer,
            trajectories: 0,
            optimizer_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MpoMetrics {
    pub iteration: usize,
    pub condition: usize,
    pub reward: f64,
    pub raw_a: f64,
    pub norm_a: f64,
    pub w_c: f64,
    pub q: f64,
    pub mu_c: f64,
    pub var_c: f64,
    pub grad_norm: f64,
    pub g_t: f64,
}

#[derive(Clone, Debug)]
pub struct MpoStep {
    pub metrics: MpoMetrics,
    pub trajectory: Trajectory,
}

/// curriculum draw -> one rollout -> reward -> advantage -> one AdamW step
/// -> process noise from the step's KL -> Kalman update of the sampled
/// condition.
#[allow(clippy::too_many_arguments)]
pub fn mpo_train_iteration(
    net: &VelocityNet,
    theta: &mut ParamVector,
    opt: &mut OptimizerState,
    cfg: &MpoConfig,
    state: &mut MpoState,
    condition_count: usize,
    rewards: &dyn RewardModel,
    iteration: usize,
    seed: u64,
) -> Result<MpoStep> {
    let mut r = rng::substream(seed, &[iteration as u64]);
    let curriculum = CurriculumState::from_tracker(&state.tracker, condition_count, cfg.eta);
    let c = curriculum_sample(&curriculum, &mut r)?;
    let g_t = cfg.sigma.at(iteration);

    let traj = sde_rollout(net, theta, c, &cfg.grid, g_t, &mut r)?;
    state.trajectories += 1;
    let reward = rewards.reward(&traj.x_final, c);
    let belief = state.tracker.get(c);
    let raw_a = reward - belief.mu;
    let norm_a = state.normalizer.normalize(raw_a).clamp(-cfg.adv_clip, cfg.adv_clip);
    let w_c = surprise_weight(reward, &belief, cfg.gamma, cfg.eps);

    let before = theta.clone();
    let (_, grad) = mpo_loss_and_grad(net, theta, &traj, w_c * norm_a, cfg.grid.t_min)?;
    let report = opt.adamw_step(theta, &grad)?;
    state.optimizer_steps += 1;

    let q = kl_process_noise(net, &before, theta, &traj, cfg.tracker.alpha, cfg.grid.t_min)?;
    let updated = state.tracker.observe(c, reward, q)?;
    let metrics = MpoMetrics {
        iteration,
        condition: c,
        reward,
        raw_a,
        norm_a,
        w_c,
        q,
        mu_c: updated.mu,
        var_c: updated.var,
        grad_norm: report.grad_norm,
        g_t,
    };
    let mut trajectory = traj;
    trajectory.reward = Some(reward);
    Ok(MpoStep { metrics, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{AdamWConfig, NetworkSpec};
    use crate::sde::StepRecord;

    #[test]
    fn kalman_examples() {
        let cfg = TrackerConfig { obs_var: 1.0, ..TrackerConfig::default() };
        let e = tracker_update(&ValueTrackerEntry { mu: 0.0, var: 1.0, n: 0 }, 2.0, 0.0, &cfg).unwrap();
        assert_eq!((e.mu, e.var, e.n), (1.0, 0.5, 1));
        let frozen = tracker_update(&ValueTrackerEntry { mu: 0.3, var: 0.0, n: 4 }, 2.0, 0.2, &cfg).unwrap();
        assert_eq!((frozen.mu, frozen.var), (0.3, 0.2));
        assert!(tracker_update(&e, 1.0, -0.1, &cfg).is_err());
        assert!(tracker_update(&e, f64::NAN, 0.0, &cfg).is_err());
    }

    #[test]
    fn kalman_converges_on_constant_signal() {
        let cfg = TrackerConfig::default();
        for (mu, var) in [(0.0, 1.0), (5.0, 0.01), (-3.0, 10.0)] {
            let mut e = ValueTrackerEntry { mu, var, n: 0 };
            for _ in 0..400 {
                let next = tracker_update(&e, 1.0, 0.0, &cfg).unwrap();
                assert!(next.var <= e.var);
                assert!((next.mu - 1.0).abs() <= (e.mu - 1.0).abs());
                e = next;
            }
            // Q = 0 reduces to a precision-weighted running mean.
            let k = cfg.obs_var / var;
            let closed = (k * mu + 400.0) / (k + 400.0);
            assert!((e.mu - closed).abs() < 1e-9, "{mu} {var} -> {} vs {closed}", e.mu);
        }
    }

    proptest::proptest! {
        #[test]
        fn kalman_sanity(mu in -5.0f64..5.0, var in 0.0f64..10.0, r in -5.0f64..5.0, q in 0.0f64..2.0, obs in 0.01f64..5.0) {
            let cfg = TrackerConfig { obs_var: obs, ..TrackerConfig::default() };
            let e = ValueTrackerEntry { mu, var, n: 0 };
            let next = tracker_update(&e, r, q, &cfg).unwrap();
            let gain = var / (var + obs);
            proptest::prop_assert!((0.0..=1.0).contains(&gain));
            proptest::prop_assert!(next.var <= var + q + 1e-12);
            proptest::prop_assert!(next.var >= 0.0);
        }
    }

    #[test]
    fn normalizer_examples() {
        let (a, _) = normalize_advantage(&AdvantageNormalizer::default(), 0.0);
        assert_eq!(a, 0.0);
        let (a, next) = normalize_advantage(&AdvantageNormalizer::default(), 2.0);
        assert!((a - 2.0).abs() < 1e-7);
        assert!((next.mu_a - 0.02).abs() < 1e-15);
        assert!((next.var_a - (0.99 + 0.01 * 1.98 * 1.98)).abs() < 1e-12);
    }

    #[test]
    fn normalizer_constant_stream_decays() {
        // Oracle: iterate the recurrence directly.
        let (lambda, c) = (0.99, 0.8);
        let (mut mu, mut var) = (0.0f64, 1.0f64);
        let mut expected = 0.0;
        for _ in 0..2000 {
            expected = (c - mu) / (var.sqrt() + 1e-8);
            mu = lambda * mu + (1.0 - lambda) * c;
            var = (lambda * var + (1.0 - lambda) * (c - mu).powi(2)).max(1e-16);
        }
        let mut norm = AdvantageNormalizer::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            last = norm.normalize(c);
        }
        assert!((last - expected).abs() < 1e-12);
        assert!(last.abs() < 0.05, "{last}");
    }

    #[test]
    fn curriculum_probabilities() {
        let s = CurriculumState { sigma: vec![0.0, 0.0], n: vec![0, 0], eta: 1.0 };
        assert_eq!(s.probabilities(), vec![0.5, 0.5]);
        let s = CurriculumState { sigma: vec![1.0, 0.0], n: vec![99, 99], eta: 1.0 };
        let p = s.probabilities();
        assert!((p[0] - 11.0 / 12.0).abs() < 1e-12 && (p[1] - 1.0 / 12.0).abs() < 1e-12);
        let zero = CurriculumState { sigma: vec![0.0; 3], n: vec![5; 3], eta: 0.0 };
        assert_eq!(zero.probabilities(), vec![1.0 / 3.0; 3]);
        let empty = CurriculumState { sigma: vec![], n: vec![], eta: 1.0 };
        assert!(curriculum_sample(&empty, &mut rng::seeded(0)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn curriculum_never_starves(sig in proptest::collection::vec(0.0f64..3.0, 1..8), seen in 0u64..10_000, eta in 0.01f64..2.0) {
            let k = sig.len();
            let s = CurriculumState { sigma: sig.clone(), n: vec![seen; k], eta };
            let p = s.probabilities();
            let max_sigma = sig.iter().copied().fold(0.0, f64::max);
            let bound = eta / ((seen + 1) as f64).sqrt() / (k as f64 * (max_sigma + eta));
            for pc in p {
                proptest::prop_assert!(pc > 0.0);
                proptest::prop_assert!(pc >= bound * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn surprise_examples() {
        let e = ValueTrackerEntry { mu: 0.4, var: 0.04, n: 3 };
        assert_eq!(surprise_weight(0.4, &e, 0.5, 1e-8), 1.0);
        assert!((surprise_weight(0.6, &e, 0.5, 0.0) - 1.5).abs() < 1e-12);
        assert_eq!(surprise_weight(3.0, &e, 0.0, 1e-8), 1.0);
    }

    fn setup() -> (VelocityNet, ParamVector) {
        let net = VelocityNet::new(NetworkSpec::toy_2d(2)).unwrap();
        let theta = net.init_params(2);
        (net, theta)
    }

    #[test]
    fn zero_weight_is_inert() {
        let (net, theta) = setup();
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(12), 0.1, &mut rng::seeded(0)).unwrap();
        let (loss, grad) = mpo_loss_and_grad(&net, &theta, &traj, 0.0, 1e-3).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_steps_below_t_min() {
        let (net, theta) = setup();
        let mut traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(3), 0.1, &mut rng::seeded(0)).unwrap();
        traj.steps[2].t = 1e-5;
        assert!(matches!(mpo_loss_and_grad(&net, &theta, &traj, 1.0, 1e-3), Err(Error::Contract(_))));
    }

    #[test]
    fn positive_weight_descent_reduces_residual() {
        let (net, theta) = setup();
        let traj = sde_rollout(&net, &theta, 1, &TimeGrid::new(12), 0.1, &mut rng::seeded(4)).unwrap();
        let (base, grad) = mpo_loss_and_grad(&net, &theta, &traj, 2.0, 1e-3).unwrap();
        let mut improved = false;
        for lr in [1e-1, 1e-2, 1e-3, 1e-4] {
            let mut moved = theta.clone();
            moved.axpy(-lr, &grad);
            let (after, _) = mpo_loss_and_grad(&net, &moved, &traj, 2.0, 1e-3).unwrap();
            if after < base {
                improved = true;
                break;
            }
        }
        assert!(improved);
    }

    #[test]
    fn process_noise_cases() {
        let (net, theta) = setup();
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(6), 0.1, &mut rng::seeded(1)).unwrap();
        assert_eq!(kl_process_noise(&net, &theta, &theta, &traj, 1.0, 1e-3).unwrap(), 0.0);
        let other = net.init_params(3);
        assert_eq!(kl_process_noise(&net, &theta, &other, &traj, 0.0, 1e-3).unwrap(), 0.0);
        assert!(kl_process_noise(&net, &theta, &other, &traj, 1.0, 1e-3).unwrap() > 0.0);
    }

    #[test]
    fn process_noise_scalar_drift_gap() {
        // d = 1, velocity 1 vs 0 at t = 1 (no score term), |dt| = 0.1, sigma = 1.
        let net = VelocityNet::new(NetworkSpec {
            data_dim: 1,
            hidden_widths: vec![],
            activation: Default::default(),
            time_embed_dim: 0,
            condition_count: 1,
            condition_embed_dim: 0,
        })
        .unwrap();
        let traj = Trajectory {
            condition: 0,
            steps: vec![StepRecord {
                t: 1.0,
                x: vec![0.0],
                drift: vec![0.0],
                sigma: 1.0,
                dt: -0.1,
                noise: vec![0.0],
                x_next: vec![0.0],
                logprob: 0.0,
            }],
            x_final: vec![0.0],
            reward: None,
        };
        let q = kl_process_noise(
            &net,
            &ParamVector(vec![0.0, 1.0]),
            &ParamVector(vec![0.0, 0.0]),
            &traj,
            0.7,
            1e-3,
        )
        .unwrap();
        assert!((q - 0.7 * 0.05).abs() < 1e-15);
    }

    #[test]
    fn one_rollout_one_step_per_iteration() {
        let (net, mut theta) = setup();
        let cfg = MpoConfig::new(20);
        let mut state = MpoState::new(&cfg);
        let mut opt = OptimizerState::new(net.param_count(), AdamWConfig::with_lr(1e-3));
        let reward = |x: &[f64], _c: usize| crate::rewards::sigmoid(x[0]);
        for it in 0..20 {
            mpo_train_iteration(&net, &mut theta, &mut opt, &cfg, &mut state, 2, &reward, it, 9).unwrap();
            assert_eq!(state.trajectories, it as u64 + 1);
            assert_eq!(state.optimizer_steps, it as u64 + 1);
        }
        let n: u64 = state.tracker.entries.values().map(|e| e.n).sum();
        assert_eq!(n, 20);
    }

    #[test]
    fn constant_reward_drives_raw_advantage_to_zero() {
        let (net, mut theta) = setup();
        let cfg = MpoConfig::new(2000);
        let mut state = MpoState::new(&cfg);
        let mut opt = OptimizerState::new(net.param_count(), AdamWConfig::with_lr(1e-4));
        let reward = |_: &[f64], _c: usize| 0.7;
        let mut last = f64::INFINITY;
        for it in 0..2000 {
            last = mpo_train_iteration(&net, &mut theta, &mut opt, &cfg, &mut state, 2, &reward, it, 4)
                .unwrap()
                .metrics
                .raw_a;
        }
        assert!(last.abs() < 1e-3, "{last}");
    }

    #[test]
    fn tracker_table_round_trip() {
        let mut t = ValueTracker::new(TrackerConfig::default());
        t.observe(3, 0.9, 0.01).unwrap();
        t.observe(0, 0.1, 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracker.json");
        t.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"3\"") && text.contains("\"mu\""));
        assert_eq!(ValueTracker::load(&path, t.cfg).unwrap(), t);
    }
}
