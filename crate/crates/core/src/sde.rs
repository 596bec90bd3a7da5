//! Stochastic reformulation of the flow ODE.
//!
//! The reverse-time drift adds a score correction to the learned velocity:
//!
//! ```text
//! drift = v + sigma^2 / (2t) * (x + (1 - t) v)
//! ```
//!
//! and Euler-Maruyama steps use `x' = x + drift dt + sigma sqrt(|dt|) noise`
//! with `dt < 0`. Each step stores the Gaussian log-density of `x'` so that
//! policy ratios and KL divergences can be recomputed under other
//! parameters on the same states.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TimeGrid;
use crate::net::{ForwardCache, ParamVector, VelocityNet};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub drift: Vec<f64>,
    pub sigma: f64,
    pub dt: f64,
    pub noise: Vec<f64>,
    pub x_next: Vec<f64>,
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub condition: usize,
    pub steps: Vec<StepRecord>,
    pub x_final: Vec<f64>,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn total_logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.logprob).sum()
    }

    pub fn is_chain_consistent(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].x_next == w[1].x)
            && self.steps.last().is_none_or(|s| s.x_next == self.x_final)
            && self.steps.iter().all(|s| {
                let scale = s.sigma * s.dt.abs().sqrt();
                s.x.iter()
                    .zip(&s.drift)
                    .zip(&s.noise)
                    .zip(&s.x_next)
                    .all(|(((x, d), n), xn)| step_coordinate(*x, *d, s.dt, scale, *n) == *xn)
            })
    }

    /// Writes one JSON object per step.
    pub fn dump_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        crate::net::write_atomic(path, &out)
    }
}

fn step_coordinate(x: f64, drift: f64, dt: f64, noise_scale: f64, noise: f64) -> f64 {
    if noise_scale == 0.0 {
        x + drift * dt
    } else {
        x + drift * dt + noise_scale * noise
    }
}

/// `d drift / d v`, a scalar because the correction is isotropic.
pub fn drift_velocity_gain(t: f64, sigma: f64) -> f64 {
    1.0 + sigma * sigma * (1.0 - t) / (2.0 * t)
}

/// Drift from a precomputed velocity.
pub fn drift_from_velocity(x: &[f64], v: &[f64], t: f64, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return v.to_vec();
    }
    let k = sigma * sigma / (2.0 * t);
    x.iter()
        .zip(v)
        .map(|(xi, vi)| vi + k * (xi + (1.0 - t) * vi))
        .collect()
}

fn check_time(t: f64, t_min: f64) -> Result<()> {
    // Grid times are computed as `1 + k dt`; allow for their rounding at the last step.
    if t < t_min * (1.0 - 1e-9) {
        return Err(Error::Domain(format!("t={t} below t_min={t_min}")));
    }
    Ok(())
}

pub fn drift(
    net: &VelocityNet,
    theta: &ParamVector,
    x: &[f64],
    t: f64,
    c: usize,
    sigma: f64,
    t_min: f64,
) -> Result<Vec<f64>> {
    drift_with_cache(net, theta, x, t, c, sigma, t_min).map(|(d, _)| d)
}

fn drift_with_cache(
    net: &VelocityNet,
    theta: &ParamVector,
    x: &[f64],
    t: f64,
    c: usize,
    sigma: f64,
    t_min: f64,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_time(t, t_min)?;
    let (v, cache) = net.forward(theta, x, t, c)?;
    Ok((drift_from_velocity(x, &v, t, sigma), cache))
}

/// Diagonal Gaussian log-density with shared variance `var`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

fn transition_mean(x: &[f64], drift: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(drift).map(|(a, d)| a + d * dt).collect()
}

/// Builds a step record from its inputs and a fixed noise draw.
#[allow(clippy::too_many_arguments)]
pub fn sde_step_with_noise(
    net: &VelocityNet,
    theta: &ParamVector,
    x: &[f64],
    t: f64,
    dt: f64,
    c: usize,
    sigma: f64,
    noise: Vec<f64>,
    t_min: f64,
) -> Result<StepRecord> {
    if !(sigma >= 0.0) {
        return Err(Error::Contract(format!("sigma must be non-negative, got {sigma}")));
    }
    let drift = drift(net, theta, x, t, c, sigma, t_min)?;
    let scale = sigma * dt.abs().sqrt();
    let x_next: Vec<f64> = x
        .iter()
        .zip(&drift)
        .zip(&noise)
        .map(|((xi, di), ni)| step_coordinate(*xi, *di, dt, scale, *ni))
        .collect();
    if x_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite SDE state at t={t}"),
        });
    }
    let logprob = if sigma > 0.0 {
        gaussian_logpdf(&x_next, &transition_mean(x, &drift, dt), sigma * sigma * dt.abs())
    } else {
        0.0
    };
    Ok(StepRecord {
        t,
        x: x.to_vec(),
        drift,
        sigma,
        dt,
        noise,
        x_next,
        logprob,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn sde_step(
    net: &VelocityNet,
    theta: &ParamVector,
    x: &[f64],
    t: f64,
    dt: f64,
    c: usize,
    sigma: f64,
    t_min: f64,
    rng: &mut Rng,
) -> Result<StepRecord> {
    let noise = rng::normal_vec(rng, x.len());
    sde_step_with_noise(net, theta, x, t, dt, c, sigma, noise, t_min)
}

/// Rollout from `x1` with one sigma per step.
pub fn sde_rollout_from(
    net: &VelocityNet,
    theta: &ParamVector,
    c: usize,
    grid: &TimeGrid,
    x1: Vec<f64>,
    sigmas: &[f64],
    rng: &mut Rng,
) -> Result<Trajectory> {
    grid.validate()?;
    if sigmas.len() != grid.steps {
        return Err(Error::Contract(format!(
            "{} sigmas for {} steps",
            sigmas.len(),
            grid.steps
        )));
    }
    let dt = grid.dt();
    let mut x = x1;
    let mut steps = Vec::with_capacity(grid.steps);
    for (k, &sigma) in sigmas.iter().enumerate() {
        let record = sde_step(net, theta, &x, grid.time(k), dt, c, sigma, grid.t_min, rng)
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { step: k, detail },
                other => other,
            })?;
        x = record.x_next.clone();
        steps.push(record);
    }
    Ok(Trajectory {
        condition: c,
        steps,
        x_final: x,
        reward: None,
    })
}

/// Draws `x1 ~ N(0, I)` then runs a constant-sigma rollout.
pub fn sde_rollout(
    net: &VelocityNet,
    theta: &ParamVector,
    c: usize,
    grid: &TimeGrid,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let x1 = rng::normal_vec(rng, net.data_dim());
    sde_rollout_from(net, theta, c, grid, x1, &vec![sigma; grid.steps], rng)
}

fn require_noise(record: &StepRecord) -> Result<()> {
    if !(record.sigma > 0.0) {
        return Err(Error::UndefinedKernel(format!(
            "step at t={} has sigma={}",
            record.t, record.sigma
        )));
    }
    Ok(())
}

/// Log-density of `record.x_next` under the kernel induced by `theta`.
pub fn step_logprob_under(
    net: &VelocityNet,
    theta: &ParamVector,
    record: &StepRecord,
    c: usize,
    t_min: f64,
) -> Result<f64> {
    step_logprob_with_grad(net, theta, record, c, t_min).map(|s| s.logprob)
}

/// Log-probability of a stored step together with what backward needs.
pub struct StepLogprob {
    pub logprob: f64,
    pub cache: ForwardCache,
    /// `d logprob / d v` at the stored state.
    pub dlogp_dv: Vec<f64>,
}

pub fn step_logprob_with_grad(
    net: &VelocityNet,
    theta: &ParamVector,
    record: &StepRecord,
    c: usize,
    t_min: f64,
) -> Result<StepLogprob> {
    require_noise(record)?;
    let (drift, cache) =
        drift_with_cache(net, theta, &record.x, record.t, c, record.sigma, t_min)?;
    let mean = transition_mean(&record.x, &drift, record.dt);
    let var = record.sigma * record.sigma * record.dt.abs();
    let logprob = gaussian_logpdf(&record.x_next, &mean, var);
    let gain = drift_velocity_gain(record.t, record.sigma);
    let dlogp_dv = record
        .x_next
        .iter()
        .zip(&mean)
        .map(|(xn, m)| (xn - m) / var * record.dt * gain)
        .collect();
    Ok(StepLogprob {
        logprob,
        cache,
        dlogp_dv,
    })
}

/// Mean per-step KL between the transition kernels of two parameter
/// vectors, evaluated at the stored states.
pub fn trajectory_kl(
    net: &VelocityNet,
    theta_old: &ParamVector,
    theta_new: &ParamVector,
    traj: &Trajectory,
    t_min: f64,
) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::Contract("trajectory has no steps".into()));
    }
    let mut total = 0.0;
    for record in &traj.steps {
        require_noise(record)?;
        let c = traj.condition;
        let old = drift(net, theta_old, &record.x, record.t, c, record.sigma, t_min)?;
        let new = drift(net, theta_new, &record.x, record.t, c, record.sigma, t_min)?;
        total += step_kl(&old, &new, record.dt, record.sigma);
    }
    Ok(total / traj.steps.len() as f64)
}

/// KL between two Gaussians with means differing by `(a - b) dt` and
/// shared variance `sigma^2 |dt|`.
pub fn step_kl(drift_a: &[f64], drift_b: &[f64], dt: f64, sigma: f64) -> f64 {
    let sq: f64 = drift_a
        .iter()
        .zip(drift_b)
        .map(|(a, b)| ((a - b) * dt).powi(2))
        .sum();
    sq / (2.0 * sigma * sigma * dt.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ode_sample, DEFAULT_T_MIN};
    use crate::net::{Activation, NetworkSpec};

    fn scalar_bias_net(bias: f64) -> (VelocityNet, ParamVector) {
        let net = VelocityNet::new(NetworkSpec {
            data_dim: 1,
            hidden_widths: vec![],
            activation: Activation::Tanh,
            time_embed_dim: 0,
            condition_count: 1,
            condition_embed_dim: 0,
        })
        .unwrap();
        (net, ParamVector(vec![0.0, bias]))
    }

    fn toy() -> (VelocityNet, ParamVector) {
        let net = VelocityNet::new(NetworkSpec::toy_2d(2)).unwrap();
        let theta = net.init_params(17);
        (net, theta)
    }

    #[test]
    fn drift_cases() {
        assert_eq!(drift_from_velocity(&[1.0, 0.0], &[0.3, 0.1], 0.4, 0.0), vec![0.3, 0.1]);
        let t = 0.25;
        let v = [-1.0 / (1.0 - t), 2.0 / (1.0 - t)];
        let d = drift_from_velocity(&[1.0, -2.0], &v, t, 0.3);
        assert!((d[0] - v[0]).abs() < 1e-15 && (d[1] - v[1]).abs() < 1e-15);
        let d = drift_from_velocity(&[1.0, 0.0], &[0.0, 1.0], 0.5, 0.1);
        assert!((d[0] - 0.01).abs() < 1e-15 && (d[1] - 1.005).abs() < 1e-15);
    }

    #[test]
    fn drift_rejects_small_t() {
        let (net, theta) = toy();
        assert!(matches!(
            drift(&net, &theta, &[0.0, 0.0], 1e-4, 0, 0.1, DEFAULT_T_MIN),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_sigma_step_is_euler_step() {
        let (net, theta) = toy();
        let x = [0.3, -0.7];
        let rec = sde_step(&net, &theta, &x, 0.6, -0.1, 1, 0.0, DEFAULT_T_MIN, &mut rng::seeded(1))
            .unwrap();
        let v = net.velocity(&theta, &x, 0.6, 1).unwrap();
        let euler: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + b * -0.1).collect();
        assert_eq!(rec.x_next, euler);
        assert_eq!(rec.logprob, 0.0);
    }

    #[test]
    fn stochastic_term_scale() {
        let (net, theta) = scalar_bias_net(0.0);
        let rec =
            sde_step_with_noise(&net, &theta, &[0.0], 0.5, -0.1, 0, 0.1, vec![1.0], DEFAULT_T_MIN)
                .unwrap();
        assert!((rec.x_next[0] - 0.031623).abs() < 1e-6);
    }

    #[test]
    fn logprob_at_mode() {
        let (net, theta) = toy();
        let rec = sde_step_with_noise(
            &net,
            &theta,
            &[0.2, 0.1],
            0.5,
            -0.1,
            0,
            0.3,
            vec![0.0, 0.0],
            DEFAULT_T_MIN,
        )
        .unwrap();
        let expect = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI * 0.09 * 0.1).ln();
        assert!((rec.logprob - expect).abs() < 1e-12);
    }

    #[test]
    fn logprob_matches_independent_density() {
        // Multivariate normal density written out as a product of 1D densities.
        let (net, theta) = toy();
        let mut r = rng::seeded(8);
        let traj = sde_rollout(&net, &theta, 1, &TimeGrid::new(12), 0.2, &mut r).unwrap();
        for s in &traj.steps {
            let var = s.sigma * s.sigma * s.dt.abs();
            let mut density = 1.0;
            for i in 0..2 {
                let mean = s.x[i] + s.drift[i] * s.dt;
                let z = s.x_next[i] - mean;
                density *= (-z * z / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            assert!((s.logprob - density.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_zero_sigma_matches_ode() {
        let (net, theta) = toy();
        for steps in [1, 12, 100] {
            let grid = TimeGrid::new(steps);
            let traj = sde_rollout(&net, &theta, 0, &grid, 0.0, &mut rng::seeded(steps as u64))
                .unwrap();
            let ode = ode_sample(&net, &theta, 0, &grid, &mut rng::seeded(steps as u64)).unwrap();
            assert_eq!(traj.x_final, ode.endpoint());
        }
    }

    #[test]
    fn rollout_is_deterministic_and_chained() {
        let (net, theta) = toy();
        let grid = TimeGrid::new(12);
        let a = sde_rollout(&net, &theta, 1, &grid, 0.1, &mut rng::seeded(2)).unwrap();
        let b = sde_rollout(&net, &theta, 1, &grid, 0.1, &mut rng::seeded(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_chain_consistent());
        assert_eq!(a.steps.len(), 12);
        let sum: f64 = a.steps.iter().map(|s| s.logprob).sum();
        assert_eq!(a.total_logprob(), sum);
    }

    #[test]
    fn zero_network_zero_sigma_keeps_noise() {
        let net = VelocityNet::new(NetworkSpec::toy_2d(1)).unwrap();
        let theta = ParamVector::zeros(net.param_count());
        let mut r = rng::seeded(4);
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(12), 0.0, &mut r).unwrap();
        assert_eq!(traj.x_final, traj.steps[0].x);
    }

    #[test]
    fn logprob_under_generating_params_matches_record() {
        let (net, theta) = toy();
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(12), 0.1, &mut rng::seeded(6))
            .unwrap();
        for s in &traj.steps {
            let lp = step_logprob_under(&net, &theta, s, 0, DEFAULT_T_MIN).unwrap();
            assert_eq!(lp, s.logprob);
            assert_eq!((lp - s.logprob).exp(), 1.0);
        }
    }

    #[test]
    fn logprob_hand_case() {
        let (net, theta) = scalar_bias_net(1.0);
        let record = StepRecord {
            t: 1.0,
            x: vec![0.0],
            drift: vec![0.0],
            sigma: 1.0,
            dt: -0.1,
            noise: vec![0.0],
            x_next: vec![-0.1],
            logprob: 0.0,
        };
        // At t = 1 the score term vanishes, so drift = v = 1.
        let lp = step_logprob_under(&net, &theta, &record, 0, DEFAULT_T_MIN).unwrap();
        assert!((lp + 0.5 * (0.2 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let zero = StepRecord { sigma: 0.0, ..record };
        assert!(matches!(
            step_logprob_under(&net, &theta, &zero, 0, DEFAULT_T_MIN),
            Err(Error::UndefinedKernel(_))
        ));
    }

    #[test]
    fn kl_cases() {
        assert!((step_kl(&[1.0], &[0.0], -0.1, 1.0) - 0.05).abs() < 1e-15);
        let (net, theta) = toy();
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(12), 0.1, &mut rng::seeded(6))
            .unwrap();
        assert_eq!(trajectory_kl(&net, &theta, &theta, &traj, DEFAULT_T_MIN).unwrap(), 0.0);
        let other = net.init_params(99);
        assert!(trajectory_kl(&net, &theta, &other, &traj, DEFAULT_T_MIN).unwrap() > 0.0);
    }

    #[test]
    fn kl_depends_only_on_states() {
        let (net, theta) = toy();
        let other = net.init_params(5);
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(12), 0.1, &mut rng::seeded(6))
            .unwrap();
        let mut scrambled = traj.clone();
        for s in &mut scrambled.steps {
            s.noise = vec![9.0, -9.0];
            s.logprob = 0.0;
        }
        assert_eq!(
            trajectory_kl(&net, &theta, &other, &traj, DEFAULT_T_MIN).unwrap(),
            trajectory_kl(&net, &theta, &other, &scrambled, DEFAULT_T_MIN).unwrap()
        );
    }

    #[test]
    fn dump_writes_one_line_per_step() {
        let (net, theta) = toy();
        let traj = sde_rollout(&net, &theta, 0, &TimeGrid::new(5), 0.1, &mut rng::seeded(1))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.jsonl");
        traj.dump_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<StepRecord> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, traj.steps);
    }
}
