//! Preference pairs and the Diffusion-DPO objective for flow matching.
//!
//! For a pair `(winner, loser)` sharing condition `c`, both samples are
//! noised to a shared time `t` with independent noise. With
//! `delta = |u - v_theta(x_t)|^2 - |u - v_ref(x_t)|^2` the pair loss is
//!
//! ```text
//! -log sigmoid(-beta * (delta_w - delta_l))
//! ```
//!
//! The condition id stands for any conditioning record (prompt, or source
//! image plus instruction for editing pairs).

use std::collections::BTreeMap;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{interpolate, ode_sample, FlowSample, TimeGrid, TimestepSampler};
use crate::net::{ParamVector, VelocityNet};
use crate::rewards::{noisy_score, sigmoid, RewardModel};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub condition: usize,
    pub x0: Vec<f64>,
    pub score: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub condition: usize,
    #[serde(rename = "winner")]
    pub winner_x0: Vec<f64>,
    #[serde(rename = "loser")]
    pub loser_x0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    /// Stands in for `beta * T * omega(lambda_t)`.
    pub beta_eff: f64,
    pub t_sampler: TimestepSampler,
    /// Drop pairs whose gradient norm exceeds this multiple of the batch
    /// median; `None` keeps every pair.
    pub skip_factor: Option<f64>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta_eff: 100.0,
            t_sampler: TimestepSampler::uniform(),
            skip_factor: Some(10.0),
        }
    }
}

/// Winners scored 4-5 against losers scored 1-2, within each condition.
/// Neutral (3) candidates never appear.
pub fn build_pairs(candidates: &[ScoredCandidate]) -> Vec<PreferencePair> {
    let mut by_condition: BTreeMap<usize, Vec<&ScoredCandidate>> = BTreeMap::new();
    for cand in candidates {
        by_condition.entry(cand.condition).or_default().push(cand);
    }
    let mut pairs = Vec::new();
    for (condition, group) in by_condition {
        let winners = group.iter().filter(|c| c.score >= 4);
        for w in winners {
            for l in group.iter().filter(|c| c.score <= 2) {
                pairs.push(PreferencePair {
                    condition,
                    winner_x0: w.x0.clone(),
                    loser_x0: l.x0.clone(),
                });
            }
        }
    }
    pairs
}

/// `n` ODE samples of a frozen snapshot, scored on the 1..=5 scale.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    net: &VelocityNet,
    theta: &ParamVector,
    condition: usize,
    n: usize,
    grid: &TimeGrid,
    rewards: &dyn RewardModel,
    score_noise: f64,
    rng: &mut Rng,
) -> Result<Vec<ScoredCandidate>> {
    (0..n)
        .map(|_| {
            let path = ode_sample(net, theta, condition, grid, rng)?;
            let x0 = path.endpoint().to_vec();
            let score = noisy_score(rewards.reward(&x0, condition), score_noise, rng);
            Ok(ScoredCandidate {
                condition,
                x0,
                score,
            })
        })
        .collect()
}

/// Noised winner and loser at a shared time.
#[derive(Clone, Debug)]
pub struct PairDraw {
    pub condition: usize,
    pub winner: FlowSample,
    pub loser: FlowSample,
}

pub fn draw_pairs(
    pairs: &[PreferencePair],
    sampler: &TimestepSampler,
    rng: &mut Rng,
) -> Result<Vec<PairDraw>> {
    sampler.validate()?;
    pairs
        .iter()
        .map(|p| {
            let t = sampler.sample(rng);
            let eps_w = rng::normal_vec(rng, p.winner_x0.len());
            let eps_l = rng::normal_vec(rng, p.loser_x0.len());
            Ok(PairDraw {
                condition: p.condition,
                winner: interpolate(&p.winner_x0, &eps_w, t)?,
                loser: interpolate(&p.loser_x0, &eps_l, t)?,
            })
        })
        .collect()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logit inside the sigmoid: `-beta (delta_w - delta_l)`.
pub fn pair_logit(beta_eff: f64, delta_w: f64, delta_l: f64) -> f64 {
    -beta_eff * (delta_w - delta_l)
}

/// `-log sigmoid(logit)`.
pub fn pair_loss(beta_eff: f64, delta_w: f64, delta_l: f64) -> f64 {
    softplus(-pair_logit(beta_eff, delta_w, delta_l))
}

#[derive(Clone, Debug)]
pub struct DpoBatch {
    pub loss: f64,
    pub grad: ParamVector,
    pub skipped: usize,
    /// Fraction of kept pairs whose logit is positive.
    pub accuracy: f64,
    pub logits: Vec<f64>,
}

struct PairTerm {
    loss: f64,
    logit: f64,
    grad: ParamVector,
}

fn squared_residual(v: &[f64], u: &[f64]) -> f64 {
    v.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn pair_term(
    net: &VelocityNet,
    theta: &ParamVector,
    reference: &ParamVector,
    beta: f64,
    draw: &PairDraw,
) -> Result<PairTerm> {
    let c = draw.condition;
    let (w, l) = (&draw.winner, &draw.loser);
    let (vw, cache_w) = net.forward(theta, &w.xt, w.t, c)?;
    let (vl, cache_l) = net.forward(theta, &l.xt, l.t, c)?;
    let vw_ref = net.velocity(reference, &w.xt, w.t, c)?;
    let vl_ref = net.velocity(reference, &l.xt, l.t, c)?;
    let delta_w = squared_residual(&vw, &w.u) - squared_residual(&vw_ref, &w.u);
    let delta_l = squared_residual(&vl, &l.u) - squared_residual(&vl_ref, &l.u);
    let logit = pair_logit(beta, delta_w, delta_l);
    let loss = softplus(-logit);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite DPO loss".into(),
        });
    }
    // d loss / d delta_w = beta * sigmoid(-logit); opposite sign for delta_l.
    let scale = beta * sigmoid(-logit);
    let up_w: Vec<f64> = vw.iter().zip(&w.u).map(|(a, b)| scale * 2.0 * (a - b)).collect();
    let up_l: Vec<f64> = vl.iter().zip(&l.u).map(|(a, b)| -scale * 2.0 * (a - b)).collect();
    let mut grad = ParamVector::zeros(net.param_count());
    net.backward_into(theta, &cache_w, &up_w, &mut grad)?;
    net.backward_into(theta, &cache_l, &up_l, &mut grad)?;
    Ok(PairTerm { loss, logit, grad })
}

/// Loss and gradient on fixed draws; the reference is not differentiated.
pub fn dpo_loss_and_grad_fixed(
    net: &VelocityNet,
    theta: &ParamVector,
    reference: &ParamVector,
    cfg: &DpoConfig,
    draws: &[PairDraw],
) -> Result<DpoBatch> {
    if draws.is_empty() {
        return Err(Error::Contract("DPO batch is empty".into()));
    }
    if !(cfg.beta_eff > 0.0) {
        return Err(Error::Config(format!("beta_eff {} must be > 0", cfg.beta_eff)));
    }
    let terms = draws
        .par_iter()
        .map(|d| pair_term(net, theta, reference, cfg.beta_eff, d))
        .collect::<Result<Vec<_>>>()?;

    let keep: Vec<bool> = match cfg.skip_factor {
        Some(k) if terms.len() > 1 => {
            let mut norms: Vec<f64> = terms.iter().map(|t| t.grad.norm()).collect();
            let limit = k * median(&mut norms);
            terms.iter().map(|t| t.grad.norm() <= limit).collect()
        }
        _ => vec![true; terms.len()],
    };
    let kept = keep.iter().filter(|&&k| k).count();
    let n = kept.max(1) as f64;
    let mut grad = ParamVector::zeros(net.param_count());
    let mut loss = 0.0;
    let mut correct = 0;
    let mut logits = Vec::with_capacity(kept);
    for (term, _) in terms.iter().zip(&keep).filter(|(_, &k)| k) {
        loss += term.loss;
        grad.axpy(1.0 / n, &term.grad);
        correct += usize::from(term.logit > 0.0);
        logits.push(term.logit);
    }
    Ok(DpoBatch {
        loss: loss / n,
        grad,
        skipped: terms.len() - kept,
        accuracy: correct as f64 / n,
        logits,
    })
}

pub fn dpo_loss_and_grad(
    net: &VelocityNet,
    theta: &ParamVector,
    reference: &ParamVector,
    cfg: &DpoConfig,
    pairs: &[PreferencePair],
    rng: &mut Rng,
) -> Result<DpoBatch> {
    let draws = draw_pairs(pairs, &cfg.t_sampler, rng)?;
    dpo_loss_and_grad_fixed(net, theta, reference, cfg, &draws)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    crate::net::write_atomic(path, &out)
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            pairs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;

    fn cand(condition: usize, score: u8, tag: f64) -> ScoredCandidate {
        ScoredCandidate {
            condition,
            x0: vec![tag, 0.0],
            score,
        }
    }

    #[test]
    fn pairs_from_scores() {
        let cands: Vec<_> = [5, 4, 3, 2, 1, 1]
            .iter()
            .enumerate()
            .map(|(i, &s)| cand(0, s, i as f64))
            .collect();
        let pairs = build_pairs(&cands);
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|p| p.winner_x0[0] != 2.0 && p.loser_x0[0] != 2.0));

        let neutral: Vec<_> = (0..6).map(|i| cand(0, 3, i as f64)).collect();
        assert!(build_pairs(&neutral).is_empty());

        let one = build_pairs(&[cand(1, 4, 0.0), cand(1, 2, 1.0)]);
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].winner_x0[0], one[0].loser_x0[0]), (0.0, 1.0));
    }

    #[test]
    fn pairs_never_cross_conditions() {
        let pairs = build_pairs(&[cand(0, 5, 0.0), cand(1, 1, 1.0), cand(1, 4, 2.0)]);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].condition, 1);
    }

    #[test]
    fn scalar_loss_values() {
        assert!((pair_loss(100.0, 0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let beta = 100.0;
        let l = pair_loss(beta, -2.0 / beta, 0.0);
        assert!((l - 0.126_928_011_042_973).abs() < 1e-12, "{l}");
        // Swapping winner and loser negates the logit.
        assert_eq!(pair_logit(beta, 0.3, 0.1), -pair_logit(beta, 0.1, 0.3));
    }

    #[test]
    fn anchor_is_ln2() {
        let net = VelocityNet::new(NetworkSpec::toy_2d(2)).unwrap();
        let theta = net.init_params(1);
        let pairs = vec![
            PreferencePair { condition: 0, winner_x0: vec![2.0, 0.1], loser_x0: vec![-2.0, 0.0] },
            PreferencePair { condition: 1, winner_x0: vec![-1.9, 0.3], loser_x0: vec![2.2, -0.1] },
        ];
        let batch = dpo_loss_and_grad(
            &net,
            &theta,
            &theta,
            &DpoConfig::default(),
            &pairs,
            &mut rng::seeded(3),
        )
        .unwrap();
        assert!((batch.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(batch.skipped, 0);
    }

    #[test]
    fn loss_is_order_invariant() {
        let net = VelocityNet::new(NetworkSpec::toy_2d(1)).unwrap();
        let theta = net.init_params(1);
        let reference = net.init_params(2);
        let pairs: Vec<_> = (0..5)
            .map(|i| PreferencePair {
                condition: 0,
                winner_x0: vec![i as f64 * 0.3, 1.0],
                loser_x0: vec![-1.0, i as f64 * 0.2],
            })
            .collect();
        let cfg = DpoConfig { skip_factor: None, ..DpoConfig::default() };
        let draws = draw_pairs(&pairs, &cfg.t_sampler, &mut rng::seeded(5)).unwrap();
        let a = dpo_loss_and_grad_fixed(&net, &theta, &reference, &cfg, &draws).unwrap();
        let mut rev = draws.clone();
        rev.reverse();
        let b = dpo_loss_and_grad_fixed(&net, &theta, &reference, &cfg, &rev).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_with_winner_residual() {
        let beta = 50.0;
        let mut last = f64::INFINITY;
        for dw in [0.2, 0.1, 0.0, -0.1, -0.2] {
            let l = pair_loss(beta, dw, 0.05);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn outlier_pairs_are_skipped() {
        let net = VelocityNet::new(NetworkSpec::toy_2d(1)).unwrap();
        let theta = net.init_params(1);
        let reference = net.init_params(2);
        let mut pairs: Vec<_> = (0..6)
            .map(|i| PreferencePair {
                condition: 0,
                winner_x0: vec![0.1 * i as f64, 0.0],
                loser_x0: vec![0.0, 0.1 * i as f64],
            })
            .collect();
        pairs.push(PreferencePair {
            condition: 0,
            winner_x0: vec![1e4, 0.0],
            loser_x0: vec![0.0, 0.0],
        });
        let cfg = DpoConfig { beta_eff: 1e-3, ..DpoConfig::default() };
        let batch =
            dpo_loss_and_grad(&net, &theta, &reference, &cfg, &pairs, &mut rng::seeded(1)).unwrap();
        assert_eq!(batch.skipped, 1);
    }

    #[test]
    fn pair_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = vec![PreferencePair { condition: 3, winner_x0: vec![0.1, 0.2], loser_x0: vec![-1.0, 1e-17] }];
        write_pairs_jsonl(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"condition\":3,\"winner\":[0.1,0.2],\"loser\":"));
        assert_eq!(read_pairs_jsonl(&path).unwrap(), pairs);
    }
}
