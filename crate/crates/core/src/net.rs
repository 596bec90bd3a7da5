//! Dense velocity network `v(x, t, c)` with exact reverse-mode gradients,
//! AdamW, global-norm clipping, parameter averaging and JSON checkpoints.
//!
//! Input to the first layer is the concatenation of the data point, a
//! sinusoidal embedding of `t` and a learned embedding row for condition `c`.
//! Hidden layers use `tanh`; the output layer is linear.
//!
//! Parameter layout (flat, fixed): for every layer in order, its weight
//! matrix row-major (`out x in`) followed by its bias vector; the condition
//! embedding table (`condition_count x condition_embed_dim`, row-major)
//! comes last.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub data_dim: usize,
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Number of sinusoidal time features; must be even.
    pub time_embed_dim: usize,
    pub condition_count: usize,
    pub condition_embed_dim: usize,
}

impl NetworkSpec {
    pub fn toy_2d(condition_count: usize) -> Self {
        NetworkSpec {
            data_dim: 2,
            hidden_widths: vec![64, 64],
            activation: Activation::Tanh,
            time_embed_dim: 8,
            condition_count,
            condition_embed_dim: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be at least 1".into()));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("hidden layer {i} has zero width")));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        if self.condition_count == 0 {
            return Err(Error::Config("condition_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_embed_dim + self.condition_embed_dim
    }

    pub fn output_dim(&self) -> usize {
        self.data_dim
    }

    /// `(fan_in, fan_out)` per dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim();
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.output_dim()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum::<usize>()
            + self.condition_count * self.condition_embed_dim
    }
}

/// Flat parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.0 {
            *a *= alpha;
        }
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Activations recorded by [`VelocityNet::forward`] for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    param_len: usize,
    condition: usize,
    /// `acts[0]` is the network input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the output layer")
    }
}

/// A validated network layout. Parameters are passed separately so the
/// same net can evaluate policy, reference and snapshot vectors.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    spec: NetworkSpec,
    layers: Vec<LayerLayout>,
    embed_offset: usize,
    param_count: usize,
}

impl VelocityNet {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut offset = 0;
        for (fan_in, fan_out) in spec.layer_dims() {
            let weight_offset = offset;
            let bias_offset = weight_offset + fan_in * fan_out;
            offset = bias_offset + fan_out;
            layers.push(LayerLayout {
                fan_in,
                fan_out,
                weight_offset,
                bias_offset,
            });
        }
        let embed_offset = offset;
        let param_count = offset + spec.condition_count * spec.condition_embed_dim;
        Ok(VelocityNet {
            spec,
            layers,
            embed_offset,
            param_count,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    /// Glorot-uniform weights, zero biases, unit-range embedding rows.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::seeded(seed);
        let mut values = vec![0.0; self.param_count];
        for layer in &self.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let weights =
                &mut values[layer.weight_offset..layer.weight_offset + layer.fan_in * layer.fan_out];
            for w in weights {
                *w = rng.gen_range(-limit..limit);
            }
        }
        for e in &mut values[self.embed_offset..] {
            *e = rng.gen_range(-1.0..1.0);
        }
        ParamVector(values)
    }

    fn check_params(&self, theta: &ParamVector) -> Result<()> {
        if theta.len() != self.param_count {
            return Err(Error::Contract(format!(
                "parameter vector has {} entries, network expects {}",
                theta.len(),
                self.param_count
            )));
        }
        Ok(())
    }

    /// Builds the first-layer input `[x, time features, condition row]`.
    pub fn input_features(&self, theta: &ParamVector, x: &[f64], t: f64, c: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.spec.input_dim());
        input.extend_from_slice(x);
        input.extend(time_features(t, self.spec.time_embed_dim));
        let width = self.spec.condition_embed_dim;
        let row = self.embed_offset + c * width;
        input.extend_from_slice(&theta.0[row..row + width]);
        input
    }

    pub fn forward(
        &self,
        theta: &ParamVector,
        x: &[f64],
        t: f64,
        c: usize,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_params(theta)?;
        if x.len() != self.spec.data_dim {
            return Err(Error::Contract(format!(
                "point has dimension {}, network expects {}",
                x.len(),
                self.spec.data_dim
            )));
        }
        if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput(format!("x={x:?}, t={t}")));
        }
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain(format!("t={t} outside (0, 1]")));
        }
        if c >= self.spec.condition_count {
            return Err(Error::Contract(format!(
                "condition {c} out of range (count {})",
                self.spec.condition_count
            )));
        }

        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.input_features(theta, x, t, c));
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = &acts[l];
            let w = &theta.0[layer.weight_offset..layer.bias_offset];
            let b = &theta.0[layer.bias_offset..layer.bias_offset + layer.fan_out];
            let mut out: Vec<f64> = w
                .chunks_exact(layer.fan_in)
                .zip(b)
                .map(|(row, bias)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias)
                .collect();
            if l != last {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out);
        }
        let output = acts[self.layers.len()].clone();
        Ok((
            output,
            ForwardCache {
                param_len: self.param_count,
                condition: c,
                acts,
            },
        ))
    }

    pub fn velocity(&self, theta: &ParamVector, x: &[f64], t: f64, c: usize) -> Result<Vec<f64>> {
        self.forward(theta, x, t, c).map(|(v, _)| v)
    }

    /// Gradient of `<upstream, forward(theta, ...)>` with respect to `theta`.
    pub fn backward(
        &self,
        theta: &ParamVector,
        cache: &ForwardCache,
        upstream: &[f64],
    ) -> Result<ParamVector> {
        let mut grad = ParamVector::zeros(self.param_count);
        self.backward_into(theta, cache, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grad`.
    pub fn backward_into(
        &self,
        theta: &ParamVector,
        cache: &ForwardCache,
        upstream: &[f64],
        grad: &mut ParamVector,
    ) -> Result<()> {
        self.check_params(theta)?;
        if cache.param_len != self.param_count
            || grad.len() != self.param_count
            || cache.acts.len() != self.layers.len() + 1
        {
            return Err(Error::Contract(
                "forward cache does not match this network".into(),
            ));
        }
        if upstream.len() != self.spec.output_dim() {
            return Err(Error::Contract(format!(
                "upstream gradient has {} entries, output has {}",
                upstream.len(),
                self.spec.output_dim()
            )));
        }

        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[l];
            let g = &mut grad.0;
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = layer.weight_offset + o * layer.fan_in;
                for (gw, &a) in g[row..row + layer.fan_in].iter_mut().zip(input) {
                    *gw += d * a;
                }
                g[layer.bias_offset + o] += d;
            }

            let needs_input_grad = l > 0 || self.spec.condition_embed_dim > 0;
            if !needs_input_grad {
                break;
            }
            let w = &theta.0[layer.weight_offset..layer.bias_offset];
            let mut prev = vec![0.0; layer.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (p, &wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            if l > 0 {
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            } else {
                let width = self.spec.condition_embed_dim;
                let start = self.spec.data_dim + self.spec.time_embed_dim;
                let row = self.embed_offset + cache.condition * width;
                for (ge, &p) in grad.0[row..row + width].iter_mut().zip(&prev[start..]) {
                    *ge += p;
                }
            }
        }
        Ok(())
    }
}

/// Sinusoid pairs `sin(pi 2^i t), cos(pi 2^i t)`. The lowest pair has
/// period 2, so the embedding separates `t = 1` from `t -> 0`.
pub fn time_features(t: f64, dim: usize) -> impl Iterator<Item = f64> {
    (0..dim / 2).flat_map(move |i| {
        let angle = PI * (1u64 << i) as f64 * t;
        [angle.sin(), angle.cos()]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm threshold; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub step_count: u64,
    pub config: AdamWConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global norm of the raw gradient, before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, config: AdamWConfig) -> Self {
        OptimizerState {
            first_moment: ParamVector::zeros(param_count),
            second_moment: ParamVector::zeros(param_count),
            step_count: 0,
            config,
        }
    }

    pub fn adamw_step(&mut self, theta: &mut ParamVector, grad: &ParamVector) -> Result<StepReport> {
        if theta.len() != grad.len() || theta.len() != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "optimizer shapes differ: theta {}, grad {}, state {}",
                theta.len(),
                grad.len(),
                self.first_moment.len()
            )));
        }
        let grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step_count as usize,
                detail: "non-finite gradient".into(),
            });
        }
        let cfg = self.config;
        let clip_scale = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            cfg.clip_norm / grad_norm
        } else {
            1.0
        };

        self.step_count += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step_count as i32);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        let m = &mut self.first_moment.0;
        let v = &mut self.second_moment.0;
        for i in 0..theta.0.len() {
            let g = grad.0[i] * clip_scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta.0[i] = theta.0[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(StepReport {
            grad_norm,
            clip_scale,
        })
    }
}

/// Elementwise convex combination. `weights = None` means uniform.
pub fn average_params(models: &[ParamVector], weights: Option<&[f64]>) -> Result<ParamVector> {
    let first = models
        .first()
        .ok_or_else(|| Error::Contract("cannot average zero models".into()))?;
    if models.iter().any(|m| m.len() != first.len()) {
        return Err(Error::Contract("models differ in length".into()));
    }
    let uniform;
    let weights = match weights {
        Some(w) => {
            if w.len() != models.len() {
                return Err(Error::Contract(format!(
                    "{} weights for {} models",
                    w.len(),
                    models.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("weights sum to {total}, not 1")));
            }
            w
        }
        None => {
            uniform = vec![1.0 / models.len() as f64; models.len()];
            &uniform[..]
        }
    };
    let mut out = ParamVector::zeros(first.len());
    for i in 0..first.len() {
        // Identical inputs must average to themselves bitwise, so skip the
        // weighted sum when every model agrees on this coordinate.
        let v0 = first.0[i];
        if models.iter().all(|m| m.0[i] == v0) {
            out.0[i] = v0;
        } else {
            out.0[i] = models.iter().zip(weights).map(|(m, w)| w * m.0[i]).sum();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub values: Vec<f64>,
    pub step_count: u64,
}

impl Checkpoint {
    pub fn new(spec: &NetworkSpec, theta: &ParamVector, step_count: u64) -> Self {
        Checkpoint {
            spec: spec.clone(),
            values: theta.0.clone(),
            step_count,
        }
    }

    pub fn params(&self) -> ParamVector {
        ParamVector(self.values.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        ckpt.spec.validate()?;
        if ckpt.values.len() != ckpt.spec.param_count() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} values, spec implies {}",
                ckpt.values.len(),
                ckpt.spec.param_count()
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput(
                "refusing to checkpoint non-finite parameters".into(),
            ));
        }
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
