//! Central finite-difference checks for every training loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align_dpo::{dpo_loss_and_grad_fixed, draw_pairs, DpoConfig, PreferencePair};
use crate::align_grpo::{grpo_loss_and_grad, Group};
use crate::align_mpo::mpo_loss_and_grad;
use crate::error::{Error, Result};
use crate::flow::{draw_flow_batch, fm_loss_and_grad_fixed, TimeGrid, TimestepSampler};
use crate::net::{Activation, NetworkSpec, ParamVector, VelocityNet};
use crate::rng::{self, Rng};
use crate::sde::sde_rollout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Fm,
    Dpo,
    Grpo,
    Mpo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Fm, LossKind::Dpo, LossKind::Grpo, LossKind::Mpo];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Fm => "fm",
            LossKind::Dpo => "dpo",
            LossKind::Grpo => "grpo",
            LossKind::Mpo => "mpo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub h: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { h: 1e-5, floor: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: LossKind,
    pub seed: u64,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// `|a - f| / max(|a|, |f|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn finite_difference<F>(f: F, theta: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    let mut probe = theta.clone();
    let mut out = ParamVector::zeros(theta.len());
    for i in 0..theta.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = f(&probe)?;
        probe.0[i] = orig - h;
        let down = f(&probe)?;
        probe.0[i] = orig;
        out.0[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Returns `(max relative error, index of the worst coordinate)`.
pub fn compare(analytic: &ParamVector, numeric: &ParamVector, floor: f64) -> Result<(f64, usize)> {
    if analytic.len() != numeric.len() {
        return Err(Error::Contract("gradient lengths differ".into()));
    }
    let mut worst = (0.0, 0);
    for (i, (a, f)) in analytic.0.iter().zip(&numeric.0).enumerate() {
        let e = relative_error(*a, *f, floor);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(worst)
}

/// Small random architecture covering every optional block.
pub fn random_spec(rng: &mut Rng) -> NetworkSpec {
    let depth = rng.gen_range(0..=2);
    NetworkSpec {
        data_dim: rng.gen_range(1..=3),
        hidden_widths: (0..depth).map(|_| rng.gen_range(2..=6)).collect(),
        activation: Activation::Tanh,
        time_embed_dim: 2 * rng.gen_range(0..=2),
        condition_count: rng.gen_range(1..=3),
        condition_embed_dim: rng.gen_range(0..=3),
    }
}

fn perturbed(theta: &ParamVector, scale: f64, rng: &mut Rng) -> ParamVector {
    let noise = rng::normal_vec(rng, theta.len());
    ParamVector(theta.0.iter().zip(noise).map(|(a, z)| a + scale * z).collect())
}

pub fn check_case(kind: LossKind, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut r = rng::substream(seed, &[kind as u64]);
    let spec = random_spec(&mut r);
    let net = VelocityNet::new(spec)?;
    let d = net.data_dim();
    let cc = net.spec().condition_count;
    let theta = perturbed(&net.init_params(r.gen()), 0.1, &mut r);
    let points = |n: usize, r: &mut Rng| -> Vec<(Vec<f64>, usize)> {
        (0..n).map(|_| (rng::normal_vec(r, d), r.gen_range(0..cc))).collect()
    };

    let (analytic, numeric) = match kind {
        LossKind::Fm => {
            let batch = points(5, &mut r);
            let items = draw_flow_batch(&batch, &TimestepSampler::uniform(), &mut r)?;
            let loss = |th: &ParamVector| Ok(fm_loss_and_grad_fixed(&net, th, &items)?.0);
            (fm_loss_and_grad_fixed(&net, &theta, &items)?.1, finite_difference(loss, &theta, cfg.h)?)
        }
        LossKind::Dpo => {
            let reference = perturbed(&theta, 0.05, &mut r);
            let pairs: Vec<PreferencePair> = points(4, &mut r)
                .into_iter()
                .map(|(w, c)| PreferencePair {
                    condition: c,
                    winner_x0: w,
                    loser_x0: rng::normal_vec(&mut r, d),
                })
                .collect();
            let dcfg = DpoConfig {
                beta_eff: 5.0,
                skip_factor: None,
                ..DpoConfig::default()
            };
            let draws = draw_pairs(&pairs, &dcfg.t_sampler, &mut r)?;
            let loss = |th: &ParamVector| Ok(dpo_loss_and_grad_fixed(&net, th, &reference, &dcfg, &draws)?.loss);
            (
                dpo_loss_and_grad_fixed(&net, &theta, &reference, &dcfg, &draws)?.grad,
                finite_difference(loss, &theta, cfg.h)?,
            )
        }
        LossKind::Grpo => {
            let old = perturbed(&theta, 1e-3, &mut r);
            let grid = TimeGrid::new(3);
            let mut groups = Vec::new();
            for _ in 0..2 {
                let c = r.gen_range(0..cc);
                let trajs = (0..3)
                    .map(|_| sde_rollout(&net, &old, c, &grid, 0.5, &mut r))
                    .collect::<Result<Vec<_>>>()?;
                let rewards = (0..3).map(|_| r.gen::<f64>()).collect();
                groups.push(Group::new(c, trajs, rewards)?);
            }
            let loss = |th: &ParamVector| Ok(-grpo_loss_and_grad(&net, th, &groups, 0.2, grid.t_min)?.objective);
            (
                grpo_loss_and_grad(&net, &theta, &groups, 0.2, grid.t_min)?.grad,
                finite_difference(loss, &theta, cfg.h)?,
            )
        }
        LossKind::Mpo => {
            let grid = TimeGrid::new(4);
            let c = r.gen_range(0..cc);
            let traj = sde_rollout(&net, &theta, c, &grid, 0.1, &mut r)?;
            let weight = r.gen_range(-2.0..2.0);
            let loss = |th: &ParamVector| Ok(mpo_loss_and_grad(&net, th, &traj, weight, grid.t_min)?.0);
            (
                mpo_loss_and_grad(&net, &theta, &traj, weight, grid.t_min)?.1,
                finite_difference(loss, &theta, cfg.h)?,
            )
        }
    };
    let (max_rel_error, worst_index) = compare(&analytic, &numeric, cfg.floor)?;
    Ok(GradcheckReport {
        kind,
        seed,
        params: net.param_count(),
        max_rel_error,
        worst_index,
    })
}

/// `configs` random architectures per loss kind.
pub fn run_suite(configs: usize, seed: u64, cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::with_capacity(configs * LossKind::ALL.len());
    for kind in LossKind::ALL {
        for i in 0..configs {
            out.push(check_case(kind, rng::substream(seed, &[i as u64]).gen(), cfg)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_quadratic() {
        let theta = ParamVector(vec![1.0, -2.0, 0.5]);
        let g = finite_difference(|p| Ok(p.0.iter().map(|x| x * x).sum()), &theta, 1e-5).unwrap();
        for (a, b) in g.0.iter().zip(&theta.0) {
            assert!((a - 2.0 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-4), 0.0);
        assert_eq!(relative_error(2.0, 1.0, 1e-4), 0.5);
        assert!((relative_error(1e-8, 0.0, 1e-4) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let theta = ParamVector(vec![0.3, 0.7]);
        let numeric = finite_difference(|p| Ok(p.0[0] * p.0[1]), &theta, 1e-5).unwrap();
        let wrong = ParamVector(vec![0.7, 0.0]);
        let (err, idx) = compare(&wrong, &numeric, 1e-4).unwrap();
        assert_eq!(idx, 1);
        assert!(err > 0.9);
    }

    #[test]
    fn each_loss_passes_on_a_few_seeds() {
        let cfg = GradcheckConfig::default();
        for kind in LossKind::ALL {
            for seed in 0..3 {
                let rep = check_case(kind, seed, &cfg).unwrap();
                assert!(rep.max_rel_error < 1e-5, "{rep:?}");
            }
        }
    }
}
