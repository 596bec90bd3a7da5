//! Analytic reward models on `[0, 1]` and their weighted ensembles.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `sigmoid((<normal, x> - offset) / temperature)`
    Region {
        normal: Vec<f64>,
        offset: f64,
        temperature: f64,
    },
    /// `exp(-|x - target|^2 / (2 scale^2))`
    ModeProximity { target: Vec<f64>, scale: f64 },
    /// Isotropic Gaussian mixture density relative to its highest mode.
    Realism {
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        bandwidth: f64,
    },
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            RewardSpec::Region { temperature, .. } if !(*temperature > 0.0) => {
                Err(Error::Config(format!("region temperature {temperature} must be > 0")))
            }
            RewardSpec::ModeProximity { scale, .. } if !(*scale > 0.0) => {
                Err(Error::Config(format!("mode scale {scale} must be > 0")))
            }
            RewardSpec::Realism {
                means,
                weights,
                bandwidth,
            } => {
                if means.is_empty() || means.len() != weights.len() {
                    return Err(Error::Config("realism mixture needs one weight per mean".into()));
                }
                if !(*bandwidth > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::Config("realism bandwidth/weights invalid".into()));
                }
                if weights.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::Config("realism weights are all zero".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            RewardSpec::Region {
                normal,
                offset,
                temperature,
            } => region_reward(x, normal, *offset, *temperature),
            RewardSpec::ModeProximity { target, scale } => {
                let sq: f64 = x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * scale * scale)).exp()
            }
            RewardSpec::Realism {
                means,
                weights,
                bandwidth,
            } => realism_reward(x, means, weights, *bandwidth),
        }
    }
}

pub fn region_reward(x: &[f64], normal: &[f64], offset: f64, temperature: f64) -> f64 {
    let proj: f64 = x.iter().zip(normal).map(|(a, b)| a * b).sum();
    sigmoid((proj - offset) / temperature)
}

/// Unnormalized mixture density; the shared Gaussian constant cancels in the ratio.
fn mixture_kernel_sum(x: &[f64], means: &[Vec<f64>], weights: &[f64], bandwidth: f64) -> f64 {
    means
        .iter()
        .zip(weights)
        .map(|(m, w)| {
            let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
            w * (-sq / (2.0 * bandwidth * bandwidth)).exp()
        })
        .sum()
}

/// `p(x) / max_k p(mean_k)`, clamped to 1 where overlapping components
/// put the true maximum between means.
pub fn realism_reward(x: &[f64], means: &[Vec<f64>], weights: &[f64], bandwidth: f64) -> f64 {
    let peak = means
        .iter()
        .map(|m| mixture_kernel_sum(m, means, weights, bandwidth))
        .fold(0.0, f64::max);
    if peak <= 0.0 {
        return 0.0;
    }
    (mixture_kernel_sum(x, means, weights, bandwidth) / peak).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedReward {
    pub spec: RewardSpec,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: Vec<WeightedReward>,
}

impl EnsembleSpec {
    pub fn single(spec: RewardSpec) -> Self {
        EnsembleSpec {
            members: vec![WeightedReward { spec, weight: 1.0 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Config("reward ensemble is empty".into()));
        }
        for m in &self.members {
            m.spec.validate()?;
            if !(m.weight >= 0.0) {
                return Err(Error::Config(format!("negative ensemble weight {}", m.weight)));
            }
        }
        let total: f64 = self.members.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("ensemble weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.members
            .iter()
            .map(|m| m.weight * m.spec.evaluate(x))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }
}

/// Scores a final sample for a given condition.
pub trait RewardModel: Sync {
    fn reward(&self, x: &[f64], condition: usize) -> f64;
}

/// One ensemble per condition id.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionRewards(pub Vec<EnsembleSpec>);

impl RewardModel for ConditionRewards {
    fn reward(&self, x: &[f64], condition: usize) -> f64 {
        self.0[condition].evaluate(x)
    }
}

impl<F: Fn(&[f64], usize) -> f64 + Sync> RewardModel for F {
    fn reward(&self, x: &[f64], condition: usize) -> f64 {
        self(x, condition)
    }
}

/// Maps a continuous reward onto the 1..=5 annotation scale with labeler noise.
pub fn noisy_score(reward: f64, noise_std: f64, rng: &mut Rng) -> u8 {
    let noise = if noise_std > 0.0 {
        Normal::new(0.0, noise_std).expect("positive std").sample(rng)
    } else {
        0.0
    };
    (1.0 + 4.0 * (reward + noise).clamp(0.0, 1.0)).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn region() -> RewardSpec {
        RewardSpec::Region {
            normal: vec![1.0, 0.0],
            offset: 0.5,
            temperature: 0.8,
        }
    }

    fn two_modes() -> RewardSpec {
        RewardSpec::Realism {
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            weights: vec![0.5, 0.5],
            bandwidth: 0.3,
        }
    }

    #[test]
    fn region_values() {
        assert_eq!(region().evaluate(&[0.5, 3.0]), 0.5);
        assert!((region().evaluate(&[1.3, 0.0]) - 0.731_058_578_630_004_9).abs() < 1e-12);
        let a = region().evaluate(&[0.1, 0.0]);
        let b = region().evaluate(&[0.2, 0.0]);
        assert!(b > a);
    }

    #[test]
    fn realism_values() {
        let single = RewardSpec::Realism {
            means: vec![vec![1.0, 1.0]],
            weights: vec![1.0],
            bandwidth: 0.5,
        };
        assert_eq!(single.evaluate(&[1.0, 1.0]), 1.0);
        assert!(single.evaluate(&[1e3, -1e3]) < 1e-300);
        // Midpoint of two equal, well-separated modes: direct density ratio.
        let mid = two_modes().evaluate(&[0.0, 0.0]);
        let k = |d2: f64| (-d2 / (2.0 * 0.09)).exp();
        let expect = (0.5 * k(4.0) + 0.5 * k(4.0)) / (0.5 * k(0.0) + 0.5 * k(16.0));
        assert!((mid - expect).abs() < 1e-15);
    }

    #[test]
    fn ensemble_cases() {
        let low = RewardSpec::ModeProximity {
            target: vec![0.0, 0.0],
            scale: 1.0,
        };
        let x = [0.0, (-2.0 * 0.2f64.ln()).sqrt()];
        assert!((low.evaluate(&x) - 0.2).abs() < 1e-12);
        let e = EnsembleSpec {
            members: vec![
                WeightedReward { spec: low.clone(), weight: 0.5 },
                WeightedReward { spec: region(), weight: 0.5 },
            ],
        };
        e.validate().unwrap();
        let r2 = region().evaluate(&x);
        assert!((e.evaluate(&x) - 0.5 * (0.2 + r2)).abs() < 1e-12);
        let single = EnsembleSpec::single(region());
        assert_eq!(single.evaluate(&[0.9, 0.0]), region().evaluate(&[0.9, 0.0]));
        let bad = EnsembleSpec {
            members: vec![WeightedReward { spec: low, weight: 0.7 }],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noisy_scores_follow_the_mapping() {
        let mut r = rng::seeded(0);
        assert_eq!(noisy_score(1.0, 0.0, &mut r), 5);
        assert_eq!(noisy_score(0.0, 0.0, &mut r), 1);
        assert_eq!(noisy_score(0.5, 0.0, &mut r), 3);
        for _ in 0..1000 {
            assert!((1..=5).contains(&noisy_score(0.7, 0.1, &mut r)));
        }
    }

    proptest! {
        #[test]
        fn rewards_bounded_and_ensemble_convex(x in -50.0f64..50.0, y in -50.0f64..50.0, w in 0.0f64..1.0) {
            let p = [x, y];
            let members = [region(), two_modes(), RewardSpec::ModeProximity { target: vec![1.0, -1.0], scale: 2.0 }];
            for m in &members {
                let r = m.evaluate(&p);
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert_eq!(r.to_bits(), m.evaluate(&p).to_bits());
            }
            let e = EnsembleSpec { members: vec![
                WeightedReward { spec: members[0].clone(), weight: w },
                WeightedReward { spec: members[1].clone(), weight: 1.0 - w },
            ]};
            let (a, b) = (members[0].evaluate(&p), members[1].evaluate(&p));
            let v = e.evaluate(&p);
            prop_assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
            prop_assert!((v - (w * a + (1.0 - w) * b)).abs() < 1e-12);
        }
    }
}
