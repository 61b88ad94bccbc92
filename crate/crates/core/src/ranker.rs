//! Siamese attribute ranker trained with the RankNet pairwise loss.
//!
//! A ranker is one ReLU MLP `S² → H1 → H2 → 1` applied to both images of a
//! pair with the same weights. The pair posterior is the logistic of the
//! score difference and the loss is its negative log, evaluated as
//! `softplus(−(v_i − v_j))`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{sgd_step, sigmoid, softplus, StepOutcome, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{BoundMlp, Mlp};
use crate::pairs::{LabeledPair, Order};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerModel {
    pub network: Mlp,
    pub attribute: usize,
    pub image_side: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankerArch {
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Default for RankerArch {
    fn default() -> Self {
        Self {
            hidden1: 128,
            hidden2: 64,
        }
    }
}

impl RankerModel {
    /// He-initialized ranker for one attribute.
    pub fn new(image_side: usize, arch: &RankerArch, attribute: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed, &["ranker", "init"]));
        let d = image_side * image_side;
        Self {
            network: Mlp::he(&[d, arch.hidden1, arch.hidden2, 1], &mut rng),
            attribute,
            image_side,
            seed,
        }
    }

    pub fn input_width(&self) -> usize {
        self.image_side * self.image_side
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let ok = image.shape() == [self.image_side, self.image_side]
            || image.shape() == [1, self.input_width()];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "score",
                format!(
                    "image [{}x{}], ranker expects [{}x{}]",
                    image.rows(),
                    image.cols(),
                    self.image_side,
                    self.image_side
                ),
            ))
        }
    }

    pub fn score(&self, image: &Tensor) -> Result<f64> {
        self.check_image(image)?;
        let row = Tensor::new(1, self.input_width(), image.data().to_vec())?;
        Ok(self.network.infer(&row)?.item())
    }

    /// Scores many images in one pass.
    pub fn score_batch(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(images.len() * self.input_width());
        for img in images {
            self.check_image(img)?;
            data.extend_from_slice(img.data());
        }
        let x = Tensor::new(images.len(), self.input_width(), data)?;
        Ok(self.network.infer(&x)?.into_data())
    }

    /// Scores an already-stacked `B×S²` batch on `tape`.
    pub fn forward(&self, tape: &Tape, bound: &BoundMlp, images: Var) -> Result<Var> {
        self.network.forward(tape, bound, images)
    }
}

/// `p_ij = 1 / (1 + e^{−(v_i − v_j)})`.
pub fn pairwise_posterior(v_i: f64, v_j: f64) -> f64 {
    sigmoid(v_i - v_j)
}

/// `−ln p` for a posterior strictly inside (0, 1).
pub fn rank_loss(p_ij: f64) -> Result<f64> {
    if !(p_ij > 0.0 && p_ij < 1.0) {
        return Err(Error::domain("rank_loss", format!("posterior {p_ij} outside (0, 1)")));
    }
    Ok(-p_ij.ln())
}

/// Rank loss from scores in the overflow-free form `ln(1 + e^{−(v_i − v_j)})`.
pub fn rank_loss_from_scores(v_i: f64, v_j: f64) -> f64 {
    softplus(-(v_i - v_j))
}

/// Mean pair loss on the tape. `signs` is `B×1` with `+1` where the first
/// image is greater and `−1` otherwise.
pub fn pair_loss(tape: &Tape, first_scores: Var, second_scores: Var, signs: Var) -> Result<Var> {
    let diff = tape.sub(first_scores, second_scores)?;
    let margin = tape.mul(signs, diff)?;
    Ok(tape.mean(tape.softplus(tape.neg(margin))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative per-epoch decay of the learning rate.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epoch_cap: usize,
    pub minibatch: usize,
    /// Stop once the epoch loss moved less than this over `convergence_window` epochs.
    pub convergence_tol: f64,
    pub convergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_decay: 0.98,
            weight_decay: 1e-4,
            epoch_cap: 150,
            minibatch: 32,
            convergence_tol: 1e-6,
            convergence_window: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{field}.lr"), "must be finite and >= 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("{field}.lr_decay"), "must be in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{field}.weight_decay"), "must be >= 0"));
        }
        if self.minibatch == 0 {
            return Err(Error::config(format!("{field}.minibatch"), "must be >= 1"));
        }
        if self.convergence_window == 0 {
            return Err(Error::config(format!("{field}.convergence_window"), "must be >= 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub skipped_steps: usize,
}

/// Whether a loss trace has settled: the last value is within `tol` of the
/// one `window` epochs earlier.
pub fn has_converged(trace: &[f64], window: usize, tol: f64) -> bool {
    trace.len() > window && (trace[trace.len() - 1] - trace[trace.len() - 1 - window]).abs() < tol
}

fn stack(images: &[&Tensor], width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * width);
    for img in images {
        if img.len() != width {
            return Err(Error::shape("stack", format!("image of {} pixels, expected {width}", img.len())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(images.len(), width, data)
}

/// One SGD step of the ranker on a set of ordered pairs; returns the loss.
pub fn ranker_step(model: &mut RankerModel, batch: &[&LabeledPair], lr: f64, weight_decay: f64) -> Result<(f64, StepOutcome)> {
    let width = model.input_width();
    let firsts: Vec<&Tensor> = batch.iter().map(|p| p.first.pixels.as_ref()).collect();
    let seconds: Vec<&Tensor> = batch.iter().map(|p| p.second.pixels.as_ref()).collect();
    let mut signs = Vec::with_capacity(batch.len());
    for p in batch {
        let order = p
            .order
            .ok_or_else(|| Error::Invalid(format!("pair {} has no ordering label", p.id)))?;
        signs.push(order.sign());
    }
    let tape = Tape::new();
    let bound = model.network.bind(&tape, true);
    let a = tape.constant(stack(&firsts, width)?);
    let b = tape.constant(stack(&seconds, width)?);
    let s = tape.constant(Tensor::new(batch.len(), 1, signs)?);
    let va = model.forward(&tape, &bound, a)?;
    let vb = model.forward(&tape, &bound, b)?;
    let loss = pair_loss(&tape, va, vb, s)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let gs: Vec<Tensor> = bound
        .vars
        .iter()
        .zip(model.network.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    let outcome = if loss_value.is_finite() {
        sgd_step(&mut model.network.params_mut(), &gs, lr, weight_decay)?
    } else {
        StepOutcome::AbortedNonFinite
    };
    Ok((loss_value, outcome))
}

/// Minibatch SGD on the mean rank loss until convergence or the epoch cap.
pub fn train_ranker(model: &mut RankerModel, pairs: &[LabeledPair], cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    cfg.validate("ranker_train")?;
    if pairs.is_empty() {
        return Err(Error::Invalid("cannot train a ranker on zero pairs".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.order.is_none()) {
        return Err(Error::Invalid(format!("pair {} has no ordering label", p.id)));
    }
    let mut rng = seed::rng(seed::derive(seed, &["ranker", "shuffle"]));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epoch_cap {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&LabeledPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, outcome) = ranker_step(model, &batch, lr, cfg.weight_decay)?;
            if outcome == StepOutcome::AbortedNonFinite {
                report.skipped_steps += 1;
                continue;
            }
            total += loss;
            batches += 1;
        }
        report.loss_trace.push(total / batches.max(1) as f64);
        if has_converged(&report.loss_trace, cfg.convergence_window, cfg.convergence_tol) {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Pairwise accuracy with an arbitrary scoring function. Ties are errors.
pub fn evaluate_with(pairs: &[LabeledPair], score: impl Fn(&LabeledPair) -> (f64, f64)) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty pair set".into()));
    }
    let mut correct = 0usize;
    for p in pairs {
        let order = p
            .order
            .ok_or_else(|| Error::Invalid(format!("test pair {} has no label", p.id)))?;
        let (vi, vj) = score(p);
        if Order::from_difference(vi - vj) == Some(order) {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

const EVAL_CHUNK: usize = 128;

/// Pairwise accuracy of `model`. Each distinct image is scored once, in
/// parallel chunks; the correct-count reduction is sequential.
pub fn evaluate(model: &RankerModel, pairs: &[LabeledPair], exec: Exec) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty pair set".into()));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut images: Vec<&Arc<Tensor>> = Vec::new();
    for p in pairs {
        for img in [&p.first, &p.second] {
            index.entry(img.id.as_str()).or_insert_with(|| {
                images.push(&img.pixels);
                images.len() - 1
            });
        }
    }
    let chunks: Vec<&[&Arc<Tensor>]> = images.chunks(EVAL_CHUNK).collect();
    let scored = exec.map(&chunks, |chunk| {
        let refs: Vec<&Tensor> = chunk.iter().map(|a| a.as_ref()).collect();
        model.score_batch(&refs)
    });
    let mut scores = Vec::with_capacity(images.len());
    for s in scored {
        scores.extend(s?);
    }
    evaluate_with(pairs, |p| (scores[index[p.first.id.as_str()]], scores[index[p.second.id.as_str()]]))
}
