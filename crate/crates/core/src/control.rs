//! The adversarial control network.
//!
//! A Gaussian seed `q ∈ R^{2M}` feeds two independent ReLU stacks
//! (`q → 64 → 32 → N`), one per image of the pair. Each stack output is
//! batch-normalized and then mapped to attribute units with the frozen pool
//! statistics, `y = μ + σ ⊙ n`. The latents are not learned:
//! `z^A = q[0..M)` and `z^B = q[M..2M)`.
//!
//! The control is trained on the negated rank loss of the pairs it makes,
//! plus an optional hinge that keeps the target-attribute gap above the
//! discard threshold.

use serde::{Deserialize, Serialize};

use crate::autograd::{sgd_step, StepOutcome, Tape, Var};
use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::nn::{BoundMlp, Mlp};
use crate::pairs::Order;
use crate::ranker::{pair_loss, RankerModel};
use crate::seed;
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-attribute mean and population standard deviation (floored at 1e-6).
pub fn compute_scaling_stats(strengths: &[Vec<f64>]) -> Result<ScalingStats> {
    if strengths.len() < 2 {
        return Err(Error::Invalid(format!(
            "scaling statistics need at least 2 images, got {}",
            strengths.len()
        )));
    }
    let n = strengths[0].len();
    if strengths.iter().any(|s| s.len() != n) {
        return Err(Error::shape("scaling_stats", "rows of unequal length"));
    }
    let count = strengths.len() as f64;
    let mut mean = vec![0.0; n];
    for s in strengths {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for s in strengths {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|v| (v / count).sqrt().max(SIGMA_FLOOR)).collect();
    Ok(ScalingStats { mean, std })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlArch {
    pub hidden: Vec<usize>,
}

impl Default for ControlArch {
    fn default() -> Self {
        Self { hidden: vec![64, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlModel {
    pub branch_a: Mlp,
    pub branch_b: Mlp,
    pub scaling: ScalingStats,
    pub latent_dim: usize,
    pub seed: u64,
}

/// Generator inputs for one synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlParams {
    pub y_a: Vec<f64>,
    pub z_a: Vec<f64>,
    pub y_b: Vec<f64>,
    pub z_b: Vec<f64>,
}

impl ControlParams {
    /// Ordering implied by the target attribute's strengths; `None` on a tie.
    pub fn auto_order(&self, attribute: usize) -> Option<Order> {
        Order::from_difference(self.y_a[attribute] - self.y_b[attribute])
    }

    pub fn gap(&self, attribute: usize) -> f64 {
        self.y_a[attribute] - self.y_b[attribute]
    }
}

/// Tape handles for one control forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ControlOutputs {
    pub y_a: Var,
    pub y_b: Var,
    pub z_a: Var,
    pub z_b: Var,
}

#[derive(Clone, Debug)]
pub struct BoundControl {
    pub a: BoundMlp,
    pub b: BoundMlp,
}

impl BoundControl {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.a.vars.iter().chain(&self.b.vars).copied()
    }
}

impl ControlModel {
    pub fn new(arch: &ControlArch, scaling: ScalingStats, latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::config("control.latent_dim", "must be >= 1"));
        }
        if scaling.mean.len() != scaling.std.len() || scaling.mean.is_empty() {
            return Err(Error::config("control.scaling", "mean and std must be equal, non-empty length"));
        }
        let n = scaling.mean.len();
        let mut widths = vec![2 * latent_dim];
        widths.extend(&arch.hidden);
        widths.push(n);
        let mut rng_a = seed::rng(seed::derive(seed, &["control", "branch_a"]));
        let mut rng_b = seed::rng(seed::derive(seed, &["control", "branch_b"]));
        Ok(Self {
            branch_a: Mlp::he(&widths, &mut rng_a),
            branch_b: Mlp::he(&widths, &mut rng_b),
            scaling,
            latent_dim,
            seed,
        })
    }

    pub fn seed_dim(&self) -> usize {
        2 * self.latent_dim
    }

    pub fn num_attributes(&self) -> usize {
        self.scaling.mean.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.branch_a.params();
        p.extend(self.branch_b.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.branch_a.params_mut();
        p.extend(self.branch_b.params_mut());
        p
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundControl {
        BoundControl {
            a: self.branch_a.bind(tape, trainable),
            b: self.branch_b.bind(tape, trainable),
        }
    }

    /// Maps a `B×2M` seed minibatch (B ≥ 2) to generator inputs on `tape`.
    pub fn forward(&self, tape: &Tape, bound: &BoundControl, q: Var) -> Result<ControlOutputs> {
        let [b, width] = tape.shape(q);
        if width != self.seed_dim() {
            return Err(Error::shape(
                "control",
                format!("seed of length {width}, expected {}", self.seed_dim()),
            ));
        }
        if b < 2 {
            return Err(Error::shape("control", "minibatch of 1; batch normalization needs at least 2 seeds"));
        }
        let mean = tape.constant(Tensor::row(&self.scaling.mean));
        let std = tape.constant(Tensor::row(&self.scaling.std));
        let branch = |mlp: &Mlp, bm: &BoundMlp| -> Result<Var> {
            let raw = mlp.forward(tape, bm, q)?;
            let normalized = tape.batchnorm(raw, BATCHNORM_EPS)?;
            tape.add_row(tape.mul_row(normalized, std)?, mean)
        };
        let y_a = branch(&self.branch_a, &bound.a)?;
        let y_b = branch(&self.branch_b, &bound.b)?;
        let m = self.latent_dim;
        Ok(ControlOutputs {
            y_a,
            y_b,
            z_a: tape.slice_cols(q, 0, m)?,
            z_b: tape.slice_cols(q, m, m)?,
        })
    }

    /// Control parameters for every row of `q`, without gradient tracking.
    pub fn generate(&self, q: &Tensor) -> Result<Vec<ControlParams>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let qv = tape.constant(q.clone());
        let out = self.forward(&tape, &bound, qv)?;
        Ok(read_params(&tape, &out))
    }
}

pub fn read_params(tape: &Tape, out: &ControlOutputs) -> Vec<ControlParams> {
    let (ya, yb, za, zb) = (
        tape.value(out.y_a).clone(),
        tape.value(out.y_b).clone(),
        tape.value(out.z_a).clone(),
        tape.value(out.z_b).clone(),
    );
    (0..ya.rows())
        .map(|r| ControlParams {
            y_a: ya.row_slice(r).to_vec(),
            z_a: za.row_slice(r).to_vec(),
            y_b: yb.row_slice(r).to_vec(),
            z_b: zb.row_slice(r).to_vec(),
        })
        .collect()
}

/// Draws a `count×dim` standard-normal seed matrix.
pub fn sample_seeds(count: usize, dim: usize, rng: &mut seed::Rng) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..count * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(count, dim, data)
}

/// Negated rank loss.
pub fn control_loss(tape: &Tape, rank_loss: Var) -> Var {
    tape.neg(rank_loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HingeGuard {
    pub lambda: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig {
    pub attribute: usize,
    pub ranker_lr: f64,
    pub control_lr: f64,
    pub weight_decay: f64,
    pub hinge: Option<HingeGuard>,
}

/// Every quantity one adversarial forward pass builds on its tape.
pub struct AdversarialGraph {
    pub tape: Tape,
    pub ranker: BoundMlp,
    pub control: BoundControl,
    pub outputs: ControlOutputs,
    pub rank_loss: Var,
    pub control_loss: Var,
}

/// `q → (y, z) → rendered pair → scores → L_rank`, with the pair ordered by
/// the auto-label `sign(y^A[a] − y^B[a])`. The control objective is
/// `−L_rank`, plus the hinge `λ·mean(max(0, τ − |y^A[a] − y^B[a]|))` when
/// enabled. The generator contributes no leaves.
pub fn build_adversarial_graph(
    ranker: &RankerModel,
    control: &ControlModel,
    generator: &GeneratorSpec,
    q: &Tensor,
    attribute: usize,
    hinge: Option<HingeGuard>,
) -> Result<AdversarialGraph> {
    if attribute >= control.num_attributes() {
        return Err(Error::Invalid(format!("attribute {attribute} out of range")));
    }
    let tape = Tape::new();
    let cb = control.bind(&tape, true);
    let rb = ranker.network.bind(&tape, true);
    let qv = tape.constant(q.clone());
    let out = control.forward(&tape, &cb, qv)?;
    let img_a = generator.render_batch(&tape, out.y_a, out.z_a)?;
    let img_b = generator.render_batch(&tape, out.y_b, out.z_b)?;
    let va = ranker.forward(&tape, &rb, img_a)?;
    let vb = ranker.forward(&tape, &rb, img_b)?;

    let gap = tape.sub(tape.slice_cols(out.y_a, attribute, 1)?, tape.slice_cols(out.y_b, attribute, 1)?)?;
    let signs: Vec<f64> = tape
        .value(gap)
        .data()
        .iter()
        .map(|&d| Order::from_difference(d).map_or(0.0, Order::sign))
        .collect();
    let signs = tape.constant(Tensor::new(signs.len(), 1, signs)?);
    let rank_loss = pair_loss(&tape, va, vb, signs)?;
    let mut objective = control_loss(&tape, rank_loss);
    if let Some(h) = hinge {
        let abs_gap = tape.mul(signs, gap)?;
        let shortfall = tape.relu(tape.add_scalar(tape.neg(abs_gap), h.tau));
        let penalty = tape.scale(tape.mean(shortfall), h.lambda);
        objective = tape.add(objective, penalty)?;
    }
    Ok(AdversarialGraph {
        tape,
        ranker: rb,
        control: cb,
        outputs: out,
        rank_loss,
        control_loss: objective,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub rank_loss: f64,
    pub control_loss: f64,
    pub params: Vec<ControlParams>,
    /// True when a non-finite loss or gradient skipped the update.
    pub skipped: bool,
}

/// One simultaneous update: the ranker descends `L_rank`, the control
/// descends `L_control`. A single reverse pass from `L_control` yields both,
/// since the hinge does not touch the ranker and so
/// `∂L_rank/∂θ_ranker = −∂L_control/∂θ_ranker` exactly.
pub fn adversarial_step(
    ranker: &mut RankerModel,
    control: &mut ControlModel,
    generator: &GeneratorSpec,
    q: &Tensor,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let g = build_adversarial_graph(ranker, control, generator, q, cfg.attribute, cfg.hinge)?;
    let rank_loss = g.tape.value(g.rank_loss).item();
    let ctrl_loss = g.tape.value(g.control_loss).item();
    let params = read_params(&g.tape, &g.outputs);
    if !rank_loss.is_finite() || !ctrl_loss.is_finite() {
        return Ok(StepReport {
            rank_loss,
            control_loss: ctrl_loss,
            params,
            skipped: true,
        });
    }
    let grads = g.tape.backward(g.control_loss)?;
    let ranker_grads: Vec<Tensor> = g
        .ranker
        .vars
        .iter()
        .zip(ranker.network.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()).map(|x| -x))
        .collect();
    let control_grads: Vec<Tensor> = g
        .control
        .vars()
        .zip(control.params())
        .map(|(v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    if ranker_grads.iter().chain(&control_grads).any(|t| !t.is_finite()) {
        return Ok(StepReport {
            rank_loss,
            control_loss: ctrl_loss,
            params,
            skipped: true,
        });
    }
    let r = sgd_step(&mut ranker.network.params_mut(), &ranker_grads, cfg.ranker_lr, cfg.weight_decay)?;
    let c = sgd_step(&mut control.params_mut(), &control_grads, cfg.control_lr, cfg.weight_decay)?;
    debug_assert!(r == StepOutcome::Applied && c == StepOutcome::Applied);
    Ok(StepReport {
        rank_loss,
        control_loss: ctrl_loss,
        params,
        skipped: false,
    })
}
