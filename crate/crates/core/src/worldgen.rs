//! Synthetic conditional targets plus the deterministic curation and
//! sampling rules applied to training data.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{EnsembleSpec, RewardSpec};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub cov: Vec<Vec<f64>>,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn isotropic(mean: Vec<f64>, std: f64, weight: f64) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { std * std } else { 0.0 }).collect())
            .collect();
        GaussianComponent { mean, cov, weight }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Mixture { components: Vec<GaussianComponent> },
    TwoMoons { noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub id: usize,
    pub target: Target,
    #[serde(default)]
    pub category: String,
    pub reward: EnsembleSpec,
}

/// Lower-triangular Cholesky factor; `None` unless positive definite.
pub fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        if a[i].len() != n {
            return None;
        }
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn mahalanobis_sq(x: &[f64], mean: &[f64], chol: &[Vec<f64>]) -> f64 {
    // Forward substitution solves L z = x - mean; |z|^2 is the distance.
    let n = mean.len();
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| chol[i][k] * z[k]).sum();
        z[i] = (x[i] - mean[i] - s) / chol[i][i];
    }
    z.iter().map(|v| v * v).sum()
}

impl ConditionSpec {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        match &self.target {
            Target::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::Config(format!("condition {} has no components", self.id)));
                }
                let d = components[0].mean.len();
                for comp in components {
                    if comp.mean.len() != d || cholesky(&comp.cov).is_none() || comp.cov.len() != d {
                        return Err(Error::Config(format!(
                            "condition {}: component covariance must be {d}x{d} positive definite",
                            self.id
                        )));
                    }
                    if !(comp.weight >= 0.0) {
                        return Err(Error::Config("negative mixture weight".into()));
                    }
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "condition {}: mixture weights sum to {total}",
                        self.id
                    )));
                }
                Ok(())
            }
            Target::TwoMoons { noise } if !(*noise >= 0.0) => {
                Err(Error::Config("two-moons noise must be non-negative".into()))
            }
            Target::TwoMoons { .. } => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.target {
            Target::Mixture { components } => components[0].mean.len(),
            Target::TwoMoons { .. } => 2,
        }
    }

    pub fn sample_data(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Vec<f64> {
        match &self.target {
            Target::Mixture { components } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (k, comp) in components.iter().enumerate() {
                    acc += comp.weight;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                let comp = &components[pick];
                let chol = cholesky(&comp.cov).expect("validated covariance");
                let z = rng::normal_vec(rng, comp.mean.len());
                comp.mean
                    .iter()
                    .enumerate()
                    .map(|(i, m)| m + (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>())
                    .collect()
            }
            Target::TwoMoons { noise } => {
                let angle = rng.gen::<f64>() * std::f64::consts::PI;
                let upper = rng.gen::<bool>();
                let (x, y) = if upper {
                    (angle.cos(), angle.sin())
                } else {
                    (1.0 - angle.cos(), 0.5 - angle.sin())
                };
                let jitter = Normal::new(0.0, noise.max(1e-12)).expect("positive std");
                vec![x + jitter.sample(rng), y + jitter.sample(rng)]
            }
        }
    }

    /// Component index whose 3-sigma ellipsoid contains `x`, nearest first.
    pub fn covering_mode(&self, x: &[f64]) -> Option<usize> {
        let Target::Mixture { components } = &self.target else {
            return None;
        };
        components
            .iter()
            .enumerate()
            .filter_map(|(k, comp)| {
                let chol = cholesky(&comp.cov)?;
                let d2 = mahalanobis_sq(x, &comp.mean, &chol);
                (d2 <= 9.0).then_some((k, d2))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    /// Target density relative to its highest component mean, clamped to 1.
    pub fn realism(&self, x: &[f64]) -> f64 {
        let Target::Mixture { components } = &self.target else {
            return 0.0;
        };
        let density = |p: &[f64]| -> f64 {
            components
                .iter()
                .map(|comp| {
                    let chol = cholesky(&comp.cov).expect("validated covariance");
                    let det: f64 = (0..chol.len()).map(|i| chol[i][i]).product();
                    comp.weight * (-0.5 * mahalanobis_sq(p, &comp.mean, &chol)).exp() / det
                })
                .sum()
        };
        let peak = components
            .iter()
            .map(|c| density(&c.mean))
            .fold(0.0, f64::max);
        if peak > 0.0 {
            (density(x) / peak).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// A set of conditions; condition ids equal their index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub conditions: Vec<ConditionSpec>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::Config("task has no conditions".into()));
        }
        let d = self.conditions[0].dim();
        for (i, c) in self.conditions.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!("condition at index {i} has id {}", c.id)));
            }
            if c.dim() != d {
                return Err(Error::Config("conditions differ in dimension".into()));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn rewards(&self) -> crate::rewards::ConditionRewards {
        crate::rewards::ConditionRewards(self.conditions.iter().map(|c| c.reward.clone()).collect())
    }

    /// Equal modes at `(+-2, 0)` with standard deviation `std`, one
    /// condition per reward normal; `normals[c] = +1` prefers the right mode.
    pub fn two_gaussians(std: f64, normals: &[f64], temperature: f64) -> Self {
        let conditions = normals
            .iter()
            .enumerate()
            .map(|(id, &side)| ConditionSpec {
                id,
                target: Target::Mixture {
                    components: vec![
                        GaussianComponent::isotropic(vec![-2.0, 0.0], std, 0.5),
                        GaussianComponent::isotropic(vec![2.0, 0.0], std, 0.5),
                    ],
                },
                category: if side > 0.0 { "prefer-right" } else { "prefer-left" }.into(),
                reward: EnsembleSpec::single(RewardSpec::Region {
                    normal: vec![side, 0.0],
                    offset: 0.0,
                    temperature,
                }),
            })
            .collect();
        Task { conditions }
    }

    /// `n` points per condition, interleaved by condition.
    pub fn training_pool(&self, n_per_condition: usize, rng: &mut Rng) -> Vec<(Vec<f64>, usize)> {
        let mut out = Vec::with_capacity(n_per_condition * self.conditions.len());
        for _ in 0..n_per_condition {
            for c in &self.conditions {
                out.push((c.sample_one(rng), c.id));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub aspect_ratio: Option<f64>,
    pub aesthetic: f64,
    #[serde(default)]
    pub watermark: bool,
    #[serde(default)]
    pub aigc: bool,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub style: String,
}

impl MetadataRecord {
    pub fn new(width: u32, height: u32, aesthetic: f64) -> Self {
        MetadataRecord {
            width,
            height,
            aspect_ratio: None,
            aesthetic,
            watermark: false,
            aigc: false,
            category: String::new(),
            style: String::new(),
        }
    }

    pub fn aspect(&self) -> f64 {
        self.aspect_ratio
            .unwrap_or(self.width as f64 / self.height as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub min_short_edge: u32,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub min_aesthetic: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_short_edge: 384,
            min_aspect: 0.25,
            max_aspect: 4.0,
            min_aesthetic: 4.5,
        }
    }
}

/// Rejection reasons in evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Resolution,
    Aspect,
    Aesthetic,
    Watermark,
    Aigc,
}

impl RejectReason {
    pub const ALL: [RejectReason; 5] = [
        RejectReason::Resolution,
        RejectReason::Aspect,
        RejectReason::Aesthetic,
        RejectReason::Watermark,
        RejectReason::Aigc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Resolution => "resolution",
            RejectReason::Aspect => "aspect",
            RejectReason::Aesthetic => "aesthetic",
            RejectReason::Watermark => "watermark",
            RejectReason::Aigc => "aigc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Reject(RejectReason),
}

pub fn filter_record(rec: &MetadataRecord, th: &FilterThresholds) -> FilterDecision {
    let aspect = rec.aspect();
    let reason = if rec.width.min(rec.height) < th.min_short_edge {
        Some(RejectReason::Resolution)
    } else if !(aspect >= th.min_aspect && aspect <= th.max_aspect) {
        Some(RejectReason::Aspect)
    } else if !(rec.aesthetic >= th.min_aesthetic) {
        Some(RejectReason::Aesthetic)
    } else if rec.watermark {
        Some(RejectReason::Watermark)
    } else if rec.aigc {
        Some(RejectReason::Aigc)
    } else {
        None
    };
    reason.map_or(FilterDecision::Keep, FilterDecision::Reject)
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<MetadataRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Kept count plus one count per rejection reason.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterReport {
    pub kept: usize,
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl FilterReport {
    pub fn tally(records: &[MetadataRecord], th: &FilterThresholds) -> Self {
        let mut report = FilterReport::default();
        for rec in records {
            match filter_record(rec, th) {
                FilterDecision::Keep => report.kept += 1,
                FilterDecision::Reject(r) => *report.rejected.entry(r).or_default() += 1,
            }
        }
        report
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["outcome", "count"])?;
        w.write_record(["kept", &self.kept.to_string()])?;
        for reason in RejectReason::ALL {
            let n = self.rejected.get(&reason).copied().unwrap_or(0);
            w.write_record([reason.as_str(), &n.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        crate::net::write_atomic(path, &bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionLevel {
    Entity,
    Phrase,
    Composition,
    Photographic,
}

pub const CAPTION_LEVELS: [CaptionLevel; 4] = [
    CaptionLevel::Entity,
    CaptionLevel::Phrase,
    CaptionLevel::Composition,
    CaptionLevel::Photographic,
];
pub const CAPTION_LEVEL_PROBS: [f64; 4] = [0.05, 0.1, 0.2, 0.65];

/// Cumulative lookup of a uniform variate in `[0, 1)`.
pub fn caption_level_from_uniform(u: f64) -> CaptionLevel {
    let mut acc = 0.0;
    for (level, p) in CAPTION_LEVELS.iter().zip(CAPTION_LEVEL_PROBS) {
        acc += p;
        if u < acc {
            return *level;
        }
    }
    CaptionLevel::Photographic
}

pub fn caption_level_pick(rng: &mut Rng) -> CaptionLevel {
    caption_level_from_uniform(rng.gen())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharStats {
    pub accuracy: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharSamplingConfig {
    pub exponent: f64,
    pub phase_out_threshold: f64,
    pub base_synthetic_ratio: f64,
}

impl Default for CharSamplingConfig {
    fn default() -> Self {
        CharSamplingConfig {
            exponent: 1.0,
            phase_out_threshold: 0.95,
            base_synthetic_ratio: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharSampling {
    pub weights: Vec<f64>,
    pub synthetic_ratio: f64,
}

/// Error-driven sampling weights over symbols and the share of synthetic
/// text data; the share drops to zero once every symbol is well learned.
pub fn dynamic_char_weights(stats: &CharStats, cfg: &CharSamplingConfig) -> Result<CharSampling> {
    if stats.accuracy.is_empty() {
        return Err(Error::Contract("no symbols in character statistics".into()));
    }
    if stats.accuracy.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Contract("accuracies must lie in [0, 1]".into()));
    }
    let raw: Vec<f64> = stats
        .accuracy
        .iter()
        .map(|a| (1.0 - a).powf(cfg.exponent))
        .collect();
    let total: f64 = raw.iter().sum();
    let n = raw.len() as f64;
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / n; raw.len()]
    };
    let min_acc = stats.accuracy.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_err = stats.accuracy.iter().map(|a| 1.0 - a).sum::<f64>() / n;
    let synthetic_ratio = if min_acc >= cfg.phase_out_threshold {
        0.0
    } else {
        cfg.base_synthetic_ratio * mean_err
    };
    Ok(CharSampling {
        weights,
        synthetic_ratio,
    })
}
