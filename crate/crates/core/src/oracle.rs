//! Simulated annotators and majority-vote aggregation.
//!
//! [`aggregate`] is the single aggregation path for both simulated and live
//! human votes.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    #[serde(rename = "discard")]
    Discard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl Confidence {
    pub fn level(self) -> f64 {
        match self {
            Confidence::Low => 0.0,
            Confidence::Medium => 1.0,
            Confidence::High => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub choice: Choice,
    pub confidence: Confidence,
    pub voter: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AGreater,
    BGreater,
    Rejected,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub a: usize,
    pub b: usize,
    pub discard: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.a + self.b + self.discard
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedLabel {
    pub pair_id: String,
    pub decision: Decision,
    pub tally: Tally,
    /// Share of all votes held by the larger of A and B.
    pub agreement: f64,
    pub mean_confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationRule {
    pub theta_agree: f64,
    pub theta_conf: Confidence,
}

impl Default for AggregationRule {
    fn default() -> Self {
        Self {
            theta_agree: 0.8,
            theta_conf: Confidence::Medium,
        }
    }
}

/// Majority vote with pruning. A pair is rejected when discard holds at
/// least as many votes as either answer, when A and B tie, when agreement
/// falls below `theta_agree`, or when mean confidence falls below
/// `theta_conf`.
pub fn aggregate(pair_id: &str, votes: &[Vote], rule: AggregationRule) -> AggregatedLabel {
    let mut tally = Tally::default();
    let mut conf = 0.0;
    for v in votes {
        match v.choice {
            Choice::A => tally.a += 1,
            Choice::B => tally.b += 1,
            Choice::Discard => tally.discard += 1,
        }
        conf += v.confidence.level();
    }
    let total = tally.total().max(1) as f64;
    let agreement = tally.a.max(tally.b) as f64 / total;
    let mean_confidence = conf / total;
    let discard_wins = tally.discard > 0 && tally.discard >= tally.a.max(tally.b);
    let decision = if votes.is_empty()
        || discard_wins
        || tally.a == tally.b
        || agreement < rule.theta_agree
        || mean_confidence < rule.theta_conf.level()
    {
        Decision::Rejected
    } else if tally.a > tally.b {
        Decision::AGreater
    } else {
        Decision::BGreater
    };
    AggregatedLabel {
        pair_id: pair_id.to_string(),
        decision,
        tally,
        agreement,
        mean_confidence,
    }
}

/// How likely a single annotator is to flip the true order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Never flips.
    None,
    Constant { p_flip: f64 },
    /// `p_flip(Δ) = 0.5·(1 − tanh(|Δ|/scale))`.
    Psychometric { scale: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Psychometric { scale: 0.5 }
    }
}

impl NoiseModel {
    pub fn p_flip(&self, delta: f64) -> f64 {
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Constant { p_flip } => p_flip,
            NoiseModel::Psychometric { scale } => 0.5 * (1.0 - (delta.abs() / scale).tanh()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Constant { p_flip } if !(0.0..=1.0).contains(&p_flip) => {
                Err(Error::config("oracle.noise.p_flip", "must be in [0, 1]"))
            }
            NoiseModel::Psychometric { scale } if !(scale > 0.0) => {
                Err(Error::config("oracle.noise.scale", "must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Discard probability: 1 at a tie, falling linearly to 0 at `tau`.
pub fn p_discard(delta: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        0.0
    } else {
        (1.0 - delta.abs() / tau).max(0.0)
    }
}

fn confidence_for(p_flip: f64) -> Confidence {
    if p_flip <= 0.1 {
        Confidence::High
    } else if p_flip <= 0.3 {
        Confidence::Medium
    } else {
        Confidence::Low
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub noise: NoiseModel,
    pub votes_per_pair: usize,
    pub tau_discard: f64,
    pub rule: AggregationRule,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            noise: NoiseModel::default(),
            votes_per_pair: 5,
            tau_discard: 0.15,
            rule: AggregationRule::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.votes_per_pair % 2 == 0 {
            return Err(Error::config("oracle.votes_per_pair", "must be odd"));
        }
        if !(0.0..=1.0).contains(&self.rule.theta_agree) {
            return Err(Error::config("oracle.rule.theta_agree", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Votes from `k` simulated annotators on a pair whose true gap is
/// `delta = y^A[a] − y^B[a]`.
pub fn simulate_votes(delta: f64, noise: NoiseModel, k: usize, tau: f64, rng: &mut Rng) -> Result<Vec<Vote>> {
    if k % 2 == 0 {
        return Err(Error::Invalid(format!("vote count must be odd, got {k}")));
    }
    let p_d = p_discard(delta, tau);
    let p_flip = noise.p_flip(delta);
    let mut votes = Vec::with_capacity(k);
    for i in 0..k {
        let voter = format!("sim-{i}");
        if p_d > 0.0 && rng.random_bool(p_d) {
            votes.push(Vote {
                choice: Choice::Discard,
                confidence: Confidence::Medium,
                voter,
            });
            continue;
        }
        let truth_is_a = if delta == 0.0 { rng.random_bool(0.5) } else { delta > 0.0 };
        let flip = p_flip > 0.0 && rng.random_bool(p_flip.min(1.0));
        let choice = if truth_is_a != flip { Choice::A } else { Choice::B };
        votes.push(Vote {
            choice,
            confidence: confidence_for(p_flip),
            voter,
        });
    }
    Ok(votes)
}

/// Simulates and aggregates votes for one pair.
pub fn annotate(pair_id: &str, delta: f64, cfg: &OracleConfig, rng: &mut Rng) -> Result<(AggregatedLabel, Vec<Vote>)> {
    let votes = simulate_votes(delta, cfg.noise, cfg.votes_per_pair, cfg.tau_discard, rng)?;
    Ok((aggregate(pair_id, &votes, cfg.rule), votes))
}

const TRIALS_PER_CHUNK: usize = 1000;

/// Fraction of `trials` simulated pairs (true gap `delta`, well above
/// `tau`) whose A/B majority contradicts the truth. Seeded per chunk so the
/// result does not depend on `exec`.
pub fn wrong_majority_rate(noise: NoiseModel, k: usize, delta: f64, trials: usize, seed: u64, exec: Exec) -> Result<f64> {
    if k % 2 == 0 {
        return Err(Error::Invalid(format!("vote count must be odd, got {k}")));
    }
    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);
    let counts = exec.map_range(chunks, |c| -> Result<usize> {
        let mut rng = seed::rng(seed::derive_index(seed, "oracle-trials", c as u64));
        let n = TRIALS_PER_CHUNK.min(trials - c * TRIALS_PER_CHUNK);
        let mut wrong = 0;
        for _ in 0..n {
            let votes = simulate_votes(delta, noise, k, 0.0, &mut rng)?;
            let a = votes.iter().filter(|v| v.choice == Choice::A).count();
            let b = votes.iter().filter(|v| v.choice == Choice::B).count();
            let majority_a = a > b;
            if majority_a != (delta > 0.0) {
                wrong += 1;
            }
        }
        Ok(wrong)
    });
    let mut wrong = 0;
    for c in counts {
        wrong += c?;
    }
    Ok(wrong as f64 / trials as f64)
}
