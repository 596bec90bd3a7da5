//! Group-relative policy optimization over SDE rollouts.
//!
//! Each group holds `G` trajectories for one condition. Rewards are
//! standardized within the group (population std) and every denoising step
//! contributes a PPO-style clipped ratio term.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TimeGrid;
use crate::net::{OptimizerState, ParamVector, VelocityNet};
use crate::rewards::RewardModel;
use crate::rng;
use crate::sde::{sde_rollout, step_logprob_with_grad, Trajectory};

pub const STD_GUARD: f64 = 1e-8;

/// `(r - mean) / std` with the population standard deviation; all zeros
/// when the group is (numerically) constant.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_GUARD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Diffusion coefficient schedule across training iterations: linear from
/// `start` towards zero, never below `floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaAnneal {
    pub start: f64,
    pub floor: f64,
    pub total_iters: usize,
}

impl SigmaAnneal {
    pub fn new(total_iters: usize) -> Self {
        SigmaAnneal {
            start: 0.1,
            floor: 1e-4,
            total_iters,
        }
    }

    pub fn at(&self, iteration: usize) -> f64 {
        let frac = if self.total_iters == 0 {
            0.0
        } else {
            (iteration as f64 / self.total_iters as f64).min(1.0)
        };
        (self.start * (1.0 - frac)).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub condition: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Group {
    pub fn new(condition: usize, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::Contract("one reward per trajectory required".into()));
        }
        let advantages = group_advantages(&rewards)?;
        Ok(Group {
            condition,
            trajectories,
            rewards,
            advantages,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub inner_epochs: usize,
    pub grid: TimeGrid,
    pub sigma: SigmaAnneal,
    /// Trajectories per iteration; `batch_size / group_size` groups.
    pub batch_size: usize,
}

impl GrpoConfig {
    pub fn new(total_iters: usize) -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            inner_epochs: 1,
            grid: TimeGrid::new(12),
            sigma: SigmaAnneal::new(total_iters),
            batch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.clip_eps > 0.0) || self.inner_epochs == 0 {
            return Err(Error::Config("clip_eps > 0 and inner_epochs >= 1 required".into()));
        }
        if self.batch_size < self.group_size {
            return Err(Error::Config("batch_size smaller than one group".into()));
        }
        if !(self.sigma.floor > 0.0) {
            return Err(Error::Config("sigma floor must be positive".into()));
        }
        self.grid.validate()
    }

    pub fn groups_per_iter(&self) -> usize {
        self.batch_size / self.group_size
    }
}

#[derive(Clone, Debug)]
pub struct Surrogate {
    /// Clipped objective (to be maximized).
    pub objective: f64,
    /// Gradient of `-objective`.
    pub grad: ParamVector,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate over stored trajectories. Each step's `logprob` is the
/// snapshot (old-policy) value.
pub fn grpo_loss_and_grad(
    net: &VelocityNet,
    theta: &ParamVector,
    groups: &[Group],
    clip_eps: f64,
    t_min: f64,
) -> Result<Surrogate> {
    let items: Vec<(&Trajectory, f64)> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter().zip(g.advantages.iter().copied()))
        .collect();
    let total_steps: usize = items.iter().map(|(t, _)| t.steps.len()).sum();
    if total_steps == 0 {
        return Err(Error::Contract("no trajectory steps to optimize".into()));
    }
    let n = total_steps as f64;

    let partials = items
        .par_iter()
        .map(|(traj, adv)| {
            let mut grad = ParamVector::zeros(net.param_count());
            let (mut obj, mut ratio_sum, mut clipped) = (0.0, 0.0, 0usize);
            for record in &traj.steps {
                let lp = step_logprob_with_grad(net, theta, record, traj.condition, t_min)?;
                let ratio = (lp.logprob - record.logprob).exp();
                let unclipped = ratio * adv;
                let clipped_term = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
                ratio_sum += ratio;
                if unclipped <= clipped_term {
                    obj += unclipped;
                    // d(-ratio * A)/dv = -A * ratio * dlogp/dv, averaged over all steps.
                    let up: Vec<f64> = lp.dlogp_dv.iter().map(|d| -adv * ratio * d / n).collect();
                    net.backward_into(theta, &lp.cache, &up, &mut grad)?;
                } else {
                    obj += clipped_term;
                    clipped += 1;
                }
            }
            Ok((obj, ratio_sum, clipped, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grad = ParamVector::zeros(net.param_count());
    let (mut obj, mut ratio_sum, mut clipped) = (0.0, 0.0, 0usize);
    for (o, r, c, g) in partials {
        obj += o;
        ratio_sum += r;
        clipped += c;
        grad.axpy(1.0, &g);
    }
    Ok(Surrogate {
        objective: obj / n,
        grad,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrpoMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub sigma: f64,
    pub trajectories: usize,
    pub optimizer_steps: usize,
}

/// Rolls `G` trajectories per group under `snapshot` and scores them.
/// Group `k` of iteration `i` uses condition `(i * groups + k) mod count`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_groups(
    net: &VelocityNet,
    snapshot: &ParamVector,
    cfg: &GrpoConfig,
    condition_count: usize,
    rewards: &dyn RewardModel,
    iteration: usize,
    seed: u64,
) -> Result<Vec<Group>> {
    cfg.validate()?;
    if condition_count == 0 {
        return Err(Error::Contract("no conditions to train on".into()));
    }
    let sigma = cfg.sigma.at(iteration);
    let n_groups = cfg.groups_per_iter();
    (0..n_groups)
        .map(|k| {
            let condition = (iteration * n_groups + k) % condition_count;
            let trajectories = (0..cfg.group_size)
                .into_par_iter()
                .map(|i| {
                    let mut r =
                        rng::substream(seed, &[iteration as u64, k as u64, condition as u64, i as u64]);
                    let mut traj = sde_rollout(net, snapshot, condition, &cfg.grid, sigma, &mut r)?;
                    traj.reward = Some(rewards.reward(&traj.x_final, condition));
                    Ok(traj)
                })
                .collect::<Result<Vec<_>>>()?;
            let rs = trajectories.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
            Group::new(condition, trajectories, rs)
        })
        .collect()
}

/// `inner_epochs` optimizer steps on the surrogate of freshly rolled groups.
pub fn grpo_update(
    net: &VelocityNet,
    theta: &mut ParamVector,
    opt: &mut OptimizerState,
    cfg: &GrpoConfig,
    groups: &[Group],
    iteration: usize,
) -> Result<GrpoMetrics> {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Contract("no groups to optimize".into()));
    }
    let mean_reward = all.iter().sum::<f64>() / all.len() as f64;
    let std_reward =
        (all.iter().map(|r| (r - mean_reward).powi(2)).sum::<f64>() / all.len() as f64).sqrt();

    let mut last = None;
    for _ in 0..cfg.inner_epochs {
        let s = grpo_loss_and_grad(net, theta, groups, cfg.clip_eps, cfg.grid.t_min)?;
        let report = opt.adamw_step(theta, &s.grad)?;
        last = Some((s, report.grad_norm));
    }
    let (s, grad_norm) = last.expect("inner_epochs >= 1");
    Ok(GrpoMetrics {
        iteration,
        mean_reward,
        std_reward,
        mean_ratio: s.mean_ratio,
        clip_fraction: s.clip_fraction,
        grad_norm,
        sigma: cfg.sigma.at(iteration),
        trajectories: all.len(),
        optimizer_steps: cfg.inner_epochs,
    })
}

/// Snapshot, roll out, score, then update.
#[allow(clippy::too_many_arguments)]
pub fn grpo_train_iteration(
    net: &VelocityNet,
    theta: &mut ParamVector,
    opt: &mut OptimizerState,
    cfg: &GrpoConfig,
    condition_count: usize,
    rewards: &dyn RewardModel,
    iteration: usize,
    seed: u64,
) -> Result<GrpoMetrics> {
    let snapshot = theta.clone();
    let groups = rollout_groups(net, &snapshot, cfg, condition_count, rewards, iteration, seed)?;
    grpo_update(net, theta, opt, cfg, &groups, iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{AdamWConfig, NetworkSpec};
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let k = 1.224_744_871_391_589;
        assert!((a[0] + k).abs() < 1e-12 && a[1].abs() < 1e-12 && (a[2] - k).abs() < 1e-12);
        assert_eq!(group_advantages(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantages(&[0.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        assert!(group_advantages(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn advantages_standardized_and_invariant(
            rs in prop::collection::vec(-10.0f64..10.0, 2..16),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let a = group_advantages(&rs).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
            if a.iter().any(|&x| x != 0.0) {
                prop_assert!((var - 1.0).abs() < 1e-9);
                let moved: Vec<f64> = rs.iter().map(|r| scale * r + shift).collect();
                let b = group_advantages(&moved).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn sigma_anneals_to_floor() {
        let s = SigmaAnneal::new(100);
        assert_eq!(s.at(0), 0.1);
        assert!((s.at(50) - 0.05).abs() < 1e-15);
        assert_eq!(s.at(100), 1e-4);
        assert_eq!(s.at(1000), 1e-4);
    }

    fn setup() -> (VelocityNet, ParamVector) {
        let net = VelocityNet::new(NetworkSpec::toy_2d(2)).unwrap();
        let theta = net.init_params(21);
        (net, theta)
    }

    fn rollouts(net: &VelocityNet, theta: &ParamVector) -> Vec<Group> {
        let grid = TimeGrid::new(4);
        (0..2)
            .map(|c| {
                let trajs: Vec<_> = (0..4)
                    .map(|i| sde_rollout(net, theta, c, &grid, 0.3, &mut rng::seeded(10 * c as u64 + i)).unwrap())
                    .collect();
                let rs = trajs.iter().map(|t| t.x_final[0]).collect();
                Group::new(c, trajs, rs).unwrap()
            })
            .collect()
    }

    #[test]
    fn surrogate_at_snapshot_is_zero() {
        let (net, theta) = setup();
        let groups = rollouts(&net, &theta);
        let s = grpo_loss_and_grad(&net, &theta, &groups, 0.2, 1e-3).unwrap();
        assert!(s.objective.abs() < 1e-12);
        assert_eq!(s.mean_ratio, 1.0);
        assert_eq!(s.clip_fraction, 0.0);
    }

    #[test]
    fn clipping_arithmetic() {
        let (ratio, adv, eps) = (1.5f64, 1.0, 0.2);
        let term = (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
        assert!((term - 1.2).abs() < 1e-15);
    }

    #[test]
    fn constant_reward_leaves_params_unchanged() {
        let (net, mut theta) = setup();
        let before = theta.clone();
        let mut opt = OptimizerState::new(
            net.param_count(),
            AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(1e-2) },
        );
        let mut cfg = GrpoConfig::new(10);
        cfg.batch_size = 16;
        let m = grpo_train_iteration(&net, &mut theta, &mut opt, &cfg, 2, &|_: &[f64], _| 0.7, 0, 1)
            .unwrap();
        assert_eq!(theta, before);
        assert_eq!(m.mean_ratio, 1.0);
        assert_eq!(m.grad_norm, 0.0);
        assert_eq!(m.trajectories, 16);
    }

    #[test]
    fn zero_sigma_trajectories_are_refused() {
        let (net, theta) = setup();
        let grid = TimeGrid::new(3);
        let trajs: Vec<_> = (0..2)
            .map(|i| sde_rollout(&net, &theta, 0, &grid, 0.0, &mut rng::seeded(i)).unwrap())
            .collect();
        let g = Group::new(0, trajs, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            grpo_loss_and_grad(&net, &theta, &[g], 0.2, 1e-3),
            Err(Error::UndefinedKernel(_))
        ));
    }
}
