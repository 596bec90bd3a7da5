//! Rectified-flow objective, timestep samplers and the Euler ODE sampler.
//!
//! Time runs from data (`t = 0`) to noise (`t = 1`):
//! `x_t = (1 - t) x0 + t eps`, target velocity `u = eps - x0`.
//! Sampling integrates from `t = 1` down to `t_min` with negative steps.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ParamVector, VelocityNet};
use crate::rng::{self, Rng};

pub const DEFAULT_T_MIN: f64 = 1e-3;
const LOGIT_NORMAL_CAP: f64 = 1.0 - 1e-6;
/// Samples per reduction chunk; fixed so sums do not depend on thread count.
pub(crate) const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub u: Vec<f64>,
}

pub fn interpolate(x0: &[f64], eps: &[f64], t: f64) -> Result<FlowSample> {
    if x0.len() != eps.len() {
        return Err(Error::Contract("x0 and eps differ in dimension".into()));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("interpolation time {t} outside (0, 1]")));
    }
    let xt = x0
        .iter()
        .zip(eps)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect();
    let u = x0.iter().zip(eps).map(|(a, e)| e - a).collect();
    Ok(FlowSample {
        x0: x0.to_vec(),
        eps: eps.to_vec(),
        t,
        xt,
        u,
    })
}

/// Velocity that carries `zt` straight to `z0` over the remaining time `t`.
pub fn target_velocity(zt: &[f64], z0: &[f64], t: f64) -> Vec<f64> {
    zt.iter().zip(z0).map(|(a, b)| (a - b) / t).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerKind {
    LogitNormal { m: f64, s: f64 },
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepSampler {
    pub kind: SamplerKind,
    pub t_min: f64,
}

impl TimestepSampler {
    pub fn uniform() -> Self {
        TimestepSampler {
            kind: SamplerKind::Uniform,
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn logit_normal() -> Self {
        TimestepSampler {
            kind: SamplerKind::LogitNormal { m: 0.0, s: 1.0 },
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min <= 0.1) {
            return Err(Error::Config(format!("t_min {} outside (0, 0.1]", self.t_min)));
        }
        if let SamplerKind::LogitNormal { m, s } = self.kind {
            if !m.is_finite() || !(s > 0.0) {
                return Err(Error::Config(format!("bad logit-normal parameters m={m}, s={s}")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self.kind {
            SamplerKind::Uniform => self.t_min + (1.0 - self.t_min) * rng.gen::<f64>(),
            SamplerKind::LogitNormal { m, s } => {
                let z = Normal::new(m, s).expect("validated").sample(rng);
                let t = 1.0 / (1.0 + (-z).exp());
                t.clamp(self.t_min, LOGIT_NORMAL_CAP)
            }
        }
    }
}

/// One conditioned training point with its drawn time and noise.
#[derive(Clone, Debug)]
pub struct FlowItem {
    pub condition: usize,
    pub sample: FlowSample,
}

/// Draws `(t, eps)` for every batch member, in batch order.
pub fn draw_flow_batch(
    batch: &[(Vec<f64>, usize)],
    sampler: &TimestepSampler,
    rng: &mut Rng,
) -> Result<Vec<FlowItem>> {
    sampler.validate()?;
    batch
        .iter()
        .map(|(x0, c)| {
            let t = sampler.sample(rng);
            let eps = rng::normal_vec(rng, x0.len());
            Ok(FlowItem {
                condition: *c,
                sample: interpolate(x0, &eps, t)?,
            })
        })
        .collect()
}

/// Mean squared velocity residual and its gradient on fixed draws.
pub fn fm_loss_and_grad_fixed(
    net: &VelocityNet,
    theta: &ParamVector,
    items: &[FlowItem],
) -> Result<(f64, ParamVector)> {
    if items.is_empty() {
        return Err(Error::Contract("flow-matching batch is empty".into()));
    }
    let n = items.len() as f64;
    let partials = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = ParamVector::zeros(net.param_count());
            let mut loss = 0.0;
            for item in chunk {
                let s = &item.sample;
                let (v, cache) = net.forward(theta, &s.xt, s.t, item.condition)?;
                let resid: Vec<f64> = v.iter().zip(&s.u).map(|(a, b)| a - b).collect();
                loss += resid.iter().map(|r| r * r).sum::<f64>();
                let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
                net.backward_into(theta, &cache, &upstream, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_partials(net.param_count(), partials, n))
}

pub(crate) fn reduce_partials(
    len: usize,
    partials: Vec<(f64, ParamVector)>,
    n: f64,
) -> (f64, ParamVector) {
    let mut grad = ParamVector::zeros(len);
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grad.axpy(1.0, &g);
    }
    (loss / n, grad)
}

/// Flow-matching loss on a batch of `(x0, condition)` with freshly drawn `t` and noise.
pub fn fm_loss_and_grad(
    net: &VelocityNet,
    theta: &ParamVector,
    batch: &[(Vec<f64>, usize)],
    sampler: &TimestepSampler,
    rng: &mut Rng,
) -> Result<(f64, ParamVector)> {
    let items = draw_flow_batch(batch, sampler, rng)?;
    fm_loss_and_grad_fixed(net, theta, &items)
}

/// Integration grid shared by the ODE and SDE samplers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeGrid {
    pub steps: usize,
    pub t_min: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid::new(12)
    }
}

impl TimeGrid {
    pub fn new(steps: usize) -> Self {
        TimeGrid {
            steps,
            t_min: DEFAULT_T_MIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min {} outside (0, 1)", self.t_min)));
        }
        Ok(())
    }

    /// Negative step size.
    pub fn dt(&self) -> f64 {
        -(1.0 - self.t_min) / self.steps as f64
    }

    /// Start time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        1.0 + k as f64 * self.dt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdePath {
    pub condition: usize,
    /// `states[0]` is the initial noise; `states[steps]` the endpoint.
    pub states: Vec<Vec<f64>>,
    pub times: Vec<f64>,
}

impl OdePath {
    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("path has at least the start state")
    }
}

/// Deterministic Euler integration from `x1` at `t = 1`.
pub fn ode_integrate(
    net: &VelocityNet,
    theta: &ParamVector,
    c: usize,
    x1: &[f64],
    grid: &TimeGrid,
) -> Result<OdePath> {
    grid.validate()?;
    let dt = grid.dt();
    let mut states = Vec::with_capacity(grid.steps + 1);
    let mut times = Vec::with_capacity(grid.steps + 1);
    let mut x = x1.to_vec();
    for k in 0..grid.steps {
        let t = grid.time(k);
        let v = net.velocity(theta, &x, t, c)?;
        let next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + b * dt).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: k,
                detail: "non-finite ODE state".into(),
            });
        }
        states.push(std::mem::replace(&mut x, next));
        times.push(t);
    }
    states.push(x);
    times.push(grid.time(grid.steps));
    Ok(OdePath {
        condition: c,
        states,
        times,
    })
}

/// Draws `eps ~ N(0, I)` and integrates the ODE from it.
pub fn ode_sample(
    net: &VelocityNet,
    theta: &ParamVector,
    c: usize,
    grid: &TimeGrid,
    rng: &mut Rng,
) -> Result<OdePath> {
    let eps = rng::normal_vec(rng, net.data_dim());
    ode_integrate(net, theta, c, &eps, grid)
}

/// `n` ODE endpoints, each from its own substream of `seed`.
pub fn ode_sample_many(
    net: &VelocityNet,
    theta: &ParamVector,
    c: usize,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, &[c as u64, i as u64]);
            ode_sample(net, theta, c, grid, &mut r).map(|p| p.endpoint().to_vec())
        })
        .collect()
}
