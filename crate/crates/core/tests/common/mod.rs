//! Shared helpers for the integration tests: a central finite-difference
//! gradient oracle and small fixtures.
#![allow(dead_code)]

use attic_core::autograd::{Tape, Var};
use attic_core::control::{build_adversarial_graph, ControlArch, ControlModel, HingeGuard, ScalingStats};
use attic_core::generator::GeneratorSpec;
use attic_core::nn::Mlp;
use attic_core::ranker::{pair_loss, RankerArch, RankerModel};
use attic_core::seed::{self, Rng};
use attic_core::tensor::Tensor;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 100;

/// Gradients whose norm is below this are compared absolutely: a bias that
/// cancels out of the loss has an exact zero gradient and a numeric one made
/// of rounding noise.
pub const NORM_FLOOR: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Builds a scalar loss from leaf inputs on a tape.
pub type LossFn<'a> = dyn Fn(&Tape, &[Var]) -> Var + 'a;

/// Largest relative error between backward and central differences over
/// every input tensor of `f`.
pub fn check_gradients(f: &LossFn<'_>, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
    check_against(&analytic, inputs, &|w| {
        let t = Tape::new();
        let vs: Vec<Var> = w.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&t, &vs);
        let v = t.value(l).item();
        v
    })
}

/// Compares precomputed gradients with central differences of `eval`.
pub fn check_against(analytic: &[Tensor], inputs: &[Tensor], eval: &dyn Fn(&[Tensor]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.len());
        for i in 0..input.len() {
            let x = input.data()[i];
            work[k].data_mut()[i] = x + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = x - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(analytic[k].data(), &numeric));
    }
    worst
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in ±[lo, hi], away from zero (keeps ReLU kinks out of reach of
/// the finite-difference step).
pub fn away_from_zero(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// `sum(x ⊙ w)` with a fixed random weight, so non-scalar outputs get a
/// generic upstream gradient.
pub fn weighted_sum(tape: &Tape, x: Var, rng_seed: u64) -> Var {
    let [r, c] = tape.shape(x);
    let w = uniform(r, c, -1.0, 1.0, &mut seed::rng(rng_seed));
    let w = tape.constant(w);
    tape.sum(tape.mul(x, w).unwrap())
}

/// Fresh layers have zero biases, so a row whose hidden units are all off
/// sits exactly on the next ReLU kink. Nonzero biases keep finite
/// differences away from it.
fn jitter_biases(mlp: &mut Mlp, seed: u64) {
    let mut r = seed::rng(seed::derive(seed, &["bias"]));
    for layer in &mut mlp.layers {
        let [_, c] = layer.bias.shape();
        layer.bias = away_from_zero(1, c, 0.05, 0.5, &mut r);
    }
}

/// Small ranker for gradient checks and fast loops.
pub fn tiny_ranker(side: usize, seed: u64) -> RankerModel {
    let mut m = RankerModel::new(side, &RankerArch { hidden1: 6, hidden2: 4 }, 0, seed);
    jitter_biases(&mut m.network, seed);
    m
}

pub fn tiny_control(attrs: usize, latent: usize, seed: u64) -> ControlModel {
    let s = ScalingStats {
        mean: vec![0.1; attrs],
        std: vec![0.8; attrs],
    };
    let mut c = ControlModel::new(&ControlArch { hidden: vec![5, 4] }, s, latent, seed).unwrap();
    jitter_biases(&mut c.branch_a, seed + 1);
    jitter_biases(&mut c.branch_b, seed + 2);
    c
}

/// One named family of randomized gradient checks.
pub struct GradCase {
    pub name: &'static str,
    pub worst: f64,
    pub instances: usize,
}

fn run_case(name: &'static str, instances: usize, mut one: impl FnMut(u64) -> f64) -> GradCase {
    let worst = (0..instances as u64).map(&mut one).fold(0.0, f64::max);
    GradCase { name, worst, instances }
}

/// The full gradient suite: every differentiable tape operation, the
/// generator, the ranker loss, the control network and the end-to-end
/// adversarial objective, each on `INSTANCES` random instances.
pub fn gradient_suite() -> Vec<GradCase> {
    let n = INSTANCES;
    let rng = |label: &str, i: u64| seed::rng(seed::derive_index(seed::derive(99, &[label]), "instance", i));
    let mut cases = Vec::new();

    cases.push(run_case("matmul", n, |i| {
        let mut r = rng("matmul", i);
        let (m, k, p) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = uniform(m, k, -1.0, 1.0, &mut r);
        let b = uniform(k, p, -1.0, 1.0, &mut r);
        check_gradients(&|t, v| weighted_sum(t, t.matmul(v[0], v[1]).unwrap(), i), &[a, b])
    }));
    type Binary = fn(&Tape, Var, Var) -> Var;
    let binaries: [(&'static str, Binary); 3] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
    ];
    for (name, op) in binaries {
        cases.push(run_case(name, n, |i| {
            let mut r = rng(name, i);
            let (m, k) = (r.random_range(1..4), r.random_range(1..4));
            let a = uniform(m, k, -2.0, 2.0, &mut r);
            // Every third instance broadcasts a 1×1 operand.
            let b = if i % 3 == 0 {
                uniform(1, 1, -2.0, 2.0, &mut r)
            } else {
                uniform(m, k, -2.0, 2.0, &mut r)
            };
            check_gradients(&|t, v| weighted_sum(t, op(t, v[0], v[1]), i), &[a, b])
        }));
    }
    cases.push(run_case("add_row", n, |i| {
        let mut r = rng("add_row", i);
        let (m, k) = (r.random_range(1..4), r.random_range(1..4));
        let (x, row) = (uniform(m, k, -1.0, 1.0, &mut r), uniform(1, k, -1.0, 1.0, &mut r));
        check_gradients(&|t, v| weighted_sum(t, t.add_row(v[0], v[1]).unwrap(), i), &[x, row])
    }));
    cases.push(run_case("mul_row", n, |i| {
        let mut r = rng("mul_row", i);
        let (m, k) = (r.random_range(1..4), r.random_range(1..4));
        let (x, row) = (uniform(m, k, -1.0, 1.0, &mut r), uniform(1, k, -1.0, 1.0, &mut r));
        check_gradients(&|t, v| weighted_sum(t, t.mul_row(v[0], v[1]).unwrap(), i), &[x, row])
    }));
    cases.push(run_case("expand_cols", n, |i| {
        let mut r = rng("expand_cols", i);
        let (m, w) = (r.random_range(1..4), r.random_range(1..5));
        let x = uniform(m, 1, -1.0, 1.0, &mut r);
        check_gradients(&|t, v| weighted_sum(t, t.expand_cols(v[0], w).unwrap(), i), &[x])
    }));
    cases.push(run_case("slice_cols", n, |i| {
        let mut r = rng("slice_cols", i);
        let (m, k) = (r.random_range(1..4), r.random_range(2..6));
        let start = r.random_range(0..k);
        let len = r.random_range(1..=k - start);
        let x = uniform(m, k, -1.0, 1.0, &mut r);
        check_gradients(&|t, v| weighted_sum(t, t.slice_cols(v[0], start, len).unwrap(), i), &[x])
    }));
    cases.push(run_case("scale", n, |i| {
        let mut r = rng("scale", i);
        let c = r.random_range(-3.0..3.0);
        let x = uniform(2, 3, -1.0, 1.0, &mut r);
        check_gradients(&|t, v| weighted_sum(t, t.scale(v[0], c), i), &[x])
    }));
    cases.push(run_case("add_scalar", n, |i| {
        let mut r = rng("add_scalar", i);
        let c = r.random_range(-3.0..3.0);
        let x = uniform(3, 2, -1.0, 1.0, &mut r);
        check_gradients(&|t, v| weighted_sum(t, t.square(t.add_scalar(v[0], c)), i), &[x])
    }));
    cases.push(run_case("neg", n, |i| {
        let x = uniform(2, 2, -1.0, 1.0, &mut rng("neg", i));
        check_gradients(&|t, v| weighted_sum(t, t.neg(v[0]), i), &[x])
    }));
    type UnaryOp = fn(&Tape, Var) -> Var;
    let unaries: [(&'static str, UnaryOp, f64, f64, bool); 10] = [
        ("relu", |t, x| t.relu(x), 0.01, 2.0, true),
        ("sigmoid", |t, x| t.sigmoid(x), 0.0, 4.0, true),
        ("tanh", |t, x| t.tanh(x), 0.0, 3.0, true),
        ("exp", |t, x| t.exp(x), 0.0, 2.0, true),
        ("log", |t, x| t.log(x).unwrap(), 0.1, 4.0, false),
        ("softplus", |t, x| t.softplus(x), 0.0, 6.0, true),
        ("sin", |t, x| t.sin(x), 0.0, 3.0, true),
        ("cos", |t, x| t.cos(x), 0.0, 3.0, true),
        ("square", |t, x| t.square(x), 0.0, 2.0, true),
        ("recip", |t, x| t.recip(x).unwrap(), 0.2, 3.0, true),
    ];
    for (name, op, lo, hi, signed) in unaries {
        cases.push(run_case(name, n, |i| {
            let mut r = rng(name, i);
            let (m, k) = (r.random_range(1..4), r.random_range(1..4));
            let x = if signed {
                away_from_zero(m, k, lo, hi, &mut r)
            } else {
                uniform(m, k, lo, hi, &mut r)
            };
            check_gradients(&|t, v| weighted_sum(t, op(t, v[0]), i), &[x])
        }));
    }
    cases.push(run_case("sum", n, |i| {
        let x = uniform(3, 4, -1.0, 1.0, &mut rng("sum", i));
        check_gradients(&|t, v| t.square(t.sum(v[0])), &[x])
    }));
    cases.push(run_case("mean", n, |i| {
        let x = uniform(4, 2, -1.0, 1.0, &mut rng("mean", i));
        check_gradients(&|t, v| t.square(t.mean(v[0])), &[x])
    }));
    cases.push(run_case("batchnorm", n, |i| {
        let mut r = rng("batchnorm", i);
        let (b, d) = (r.random_range(2..6), r.random_range(1..4));
        let x = uniform(b, d, -2.0, 2.0, &mut r);
        check_gradients(&|t, v| weighted_sum(t, t.batchnorm(v[0], 1e-5).unwrap(), i), &[x])
    }));

    let generator = GeneratorSpec::new(6, 4, 4).unwrap();
    cases.push(run_case("generator", n, |i| {
        let mut r = rng("generator", i);
        let b = r.random_range(1..3);
        let y = uniform(b, 4, -2.0, 2.0, &mut r);
        let z = uniform(b, 4, -1.5, 1.5, &mut r);
        check_gradients(&|t, v| weighted_sum(t, generator.render_batch(t, v[0], v[1]).unwrap(), i), &[y, z])
    }));

    cases.push(run_case("ranker_pair_loss", n, |i| {
        let mut r = rng("ranker", i);
        let model = tiny_ranker(4, i);
        let b = r.random_range(1..4);
        let a = uniform(b, 16, 0.0, 1.0, &mut r);
        let c = uniform(b, 16, 0.0, 1.0, &mut r);
        let signs: Vec<f64> = (0..b).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let signs = Tensor::new(b, 1, signs).unwrap();
        let mut inputs: Vec<Tensor> = model.network.params().into_iter().cloned().collect();
        inputs.extend([a, c]);
        let layers = model.network.layers.len();
        check_gradients(
            &|t, v| {
                let bound = attic_core::nn::BoundMlp {
                    vars: v[..2 * layers].to_vec(),
                };
                let va = model.forward(t, &bound, v[2 * layers]).unwrap();
                let vb = model.forward(t, &bound, v[2 * layers + 1]).unwrap();
                let s = t.constant(signs.clone());
                pair_loss(t, va, vb, s).unwrap()
            },
            &inputs,
        )
    }));

    cases.push(run_case("control_forward", n, |i| {
        let mut r = rng("control", i);
        let control = tiny_control(3, 2, i);
        let b = r.random_range(3..6);
        let q = uniform(b, 4, -2.0, 2.0, &mut r);
        let mut inputs: Vec<Tensor> = control.params().into_iter().cloned().collect();
        inputs.push(q);
        let half = control.branch_a.layers.len() * 2;
        check_gradients(
            &|t, v| {
                let bound = attic_core::control::BoundControl {
                    a: attic_core::nn::BoundMlp { vars: v[..half].to_vec() },
                    b: attic_core::nn::BoundMlp {
                        vars: v[half..2 * half].to_vec(),
                    },
                };
                let out = control.forward(t, &bound, v[2 * half]).unwrap();
                let ya = weighted_sum(t, out.y_a, i);
                let yb = weighted_sum(t, out.y_b, i + 1000);
                let za = weighted_sum(t, out.z_a, i + 2000);
                t.add(t.add(ya, yb).unwrap(), za).unwrap()
            },
            &inputs,
        )
    }));

    let gen4 = GeneratorSpec::new(4, 3, 2).unwrap();
    cases.push(run_case("adversarial_objective", n, |i| {
        let mut r = rng("adversarial", i);
        let ranker = tiny_ranker(4, i);
        let control = tiny_control(3, 2, i + 7);
        let q = uniform(4, 4, -2.0, 2.0, &mut r);
        let hinge = (i % 2 == 0).then_some(HingeGuard { lambda: 1.0, tau: 0.15 });
        let g = build_adversarial_graph(&ranker, &control, &gen4, &q, 1, hinge).unwrap();
        let grads = g.tape.backward(g.control_loss).unwrap();
        let vars: Vec<Var> = g.control.vars().chain(g.ranker.vars.iter().copied()).collect();
        let mut inputs: Vec<Tensor> = control.params().into_iter().cloned().collect();
        let nc = inputs.len();
        inputs.extend(ranker.network.params().into_iter().cloned());
        let analytic: Vec<Tensor> = vars.iter().zip(&inputs).map(|(v, t)| grads.get_or_zeros(*v, t.shape())).collect();
        check_against(&analytic, &inputs, &|w| {
            let mut c = control.clone();
            let mut rk = ranker.clone();
            for (p, x) in c.params_mut().into_iter().zip(&w[..nc]) {
                *p = x.clone();
            }
            for (p, x) in rk.network.params_mut().into_iter().zip(&w[nc..]) {
                *p = x.clone();
            }
            let g = build_adversarial_graph(&rk, &c, &gen4, &q, 1, hinge).unwrap();
            let v = g.tape.value(g.control_loss).item();
            v
        })
    }));
    cases
}

/// A world and models small enough for multi-batch runs in a test.
pub fn small_config(strategy: &str, seed: u64) -> attic_core::experiment::ExperimentConfig {
    let mut cfg = attic_core::experiment::ExperimentConfig::from_json(
        r#"{
            "world": { "image_side": 8, "pool_size": 200 },
            "real_pairs": 30,
            "test_pairs": 40,
            "batches": 3,
            "batch_size": 6,
            "ranker": { "hidden1": 8, "hidden2": 4 },
            "train": { "epoch_cap": 6 },
            "control": { "hidden": [8, 4] },
            "adversarial": { "epoch_cap": 3, "minibatch": 6, "steps_per_epoch": 1 }
        }"#,
    )
    .unwrap();
    cfg.set("strategy", strategy).unwrap();
    cfg.seed = seed;
    cfg
}
