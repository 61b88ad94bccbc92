//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see them; P7 is the long one (the full default-world sweep).
mod common;

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::time::Instant;

use attic_core::baselines::{fill_budget, ControlSource, Labeler, Strategy};
use attic_core::control::{build_adversarial_graph, compute_scaling_stats, sample_seeds, ControlModel};
use attic_core::curves::emit_curves;
use attic_core::exec::Exec;
use attic_core::experiment::{pretrain, run_experiment, ExperimentConfig, ExperimentRecord, ExperimentState, Mode};
use attic_core::oracle::{wrong_majority_rate, NoiseModel};
use attic_core::pairs::Order;
use attic_core::ranker::{pairwise_posterior, rank_loss, rank_loss_from_scores, train_ranker};
use attic_core::rundir::{replay_dir, run_to_dir};
use attic_core::seed;
use attic_core::world::{sample_pool, WorldConfig};

fn verdict(id: &str, ok: bool, detail: impl Display) -> bool {
    println!("{id} {} {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

#[test]
fn p1_gradient_suite() {
    let t = Instant::now();
    let cases = common::gradient_suite();
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let all = cases.iter().all(|c| c.instances == common::INSTANCES && c.worst <= common::FD_TOLERANCE);
    let detail = format!(
        "gradient suite: {} ops x {} instances, worst rel err {worst:.2e} (tol 1e-4), {secs:.1} s (limit 120 s)",
        cases.len(),
        common::INSTANCES
    );
    assert!(verdict("P1", all && secs <= 120.0, detail));
}

#[test]
fn p2_ranknet_identities() {
    let tie = pairwise_posterior(0.37, 0.37) == 0.5;
    let ln2 = (rank_loss(0.5).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12
        && (rank_loss_from_scores(1.25, 1.25) - std::f64::consts::LN_2).abs() <= 1e-12;
    let mut rng = seed::rng(2);
    let mut anti: f64 = 0.0;
    let mut stable: f64 = 0.0;
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (rand::Rng::random_range(&mut rng, -40.0..40.0), rand::Rng::random_range(&mut rng, -40.0..40.0));
        anti = anti.max((pairwise_posterior(a, b) + pairwise_posterior(b, a) - 1.0).abs());
        let d: f64 = rand::Rng::random_range(&mut rng, -30.0..=30.0);
        stable = stable.max((rank_loss(pairwise_posterior(d, 0.0)).unwrap() - rank_loss_from_scores(d, 0.0)).abs());
    }
    for d in [-30.0, 30.0, 0.0] {
        stable = stable.max((rank_loss(pairwise_posterior(d, 0.0)).unwrap() - rank_loss_from_scores(d, 0.0)).abs());
    }
    let ok = tie && ln2 && anti <= 1e-12 && stable <= 1e-12;
    let detail = format!("ranknet identities: p(v,v)=0.5 {tie}, tie loss ln2 {ln2}, antisymmetry {anti:.1e}, stable form {stable:.1e} (tol 1e-12)");
    assert!(verdict("P2", ok, detail));
}

#[test]
fn p3_adversarial_exactness() {
    let gen = attic_core::generator::GeneratorSpec::new(8, 3, 2).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for state in 0..20 {
        let ranker = common::tiny_ranker(8, state);
        let control = common::tiny_control(3, 2, 100 + state);
        let q = sample_seeds(6, control.seed_dim(), &mut seed::rng(state)).unwrap();
        let g = build_adversarial_graph(&ranker, &control, &gen, &q, (state % 3) as usize, None).unwrap();
        let gc = g.tape.backward(g.control_loss).unwrap();
        let gr = g.tape.backward(g.rank_loss).unwrap();
        for (v, p) in g.control.vars().zip(control.params()) {
            let (c, r) = (gc.get_or_zeros(v, p.shape()), gr.get_or_zeros(v, p.shape()));
            for (x, y) in c.data().iter().zip(r.data()) {
                worst = worst.max((x + y).abs());
                checked += 1;
            }
        }
    }
    let frozen = gen.trainable_parameter_count() == 0;
    let detail = format!(
        "adversarial exactness: 20 states, {checked} control weights, max |dLc/dw + dLr/dw| = {worst:.1e} (tol 1e-12), generator trainable params {}",
        gen.trainable_parameter_count()
    );
    assert!(verdict("P3", worst <= 1e-12 && frozen, detail));
}

#[test]
fn p4_auto_labels() {
    let cfg = WorldConfig::default();
    let pool = sample_pool(&cfg, 4).unwrap();
    let strengths: Vec<Vec<f64>> = pool.iter().map(|i| i.true_y.clone()).collect();
    let scaling = compute_scaling_stats(&strengths).unwrap();
    let control = ControlModel::new(&Default::default(), scaling, cfg.latent_dim, 4).unwrap();
    let attribute = 2;
    let mut source = ControlSource::new(control, cfg.generator().unwrap(), attribute, 100, "p4", 4);
    let filled = fill_budget(&mut source, &Labeler::Auto, 1000, 2000, 4).unwrap();
    let agree = filled
        .accepted
        .iter()
        .filter(|p| {
            let gap = p.first.y.as_ref().unwrap()[attribute] - p.second.y.as_ref().unwrap()[attribute];
            p.order.is_some() && p.order == Order::from_difference(gap)
        })
        .count();
    let detail = format!("auto-label rule: {agree}/{} accepted pairs carry sign(yA[a] - yB[a])", filled.accepted.len());
    assert!(verdict("P4", agree == 1000 && filled.accepted.len() == 1000, detail));
}

fn bitwise(a: &attic_core::nn::Mlp, b: &attic_core::nn::Mlp) -> bool {
    a.params()
        .iter()
        .zip(b.params())
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits()))
}

#[test]
fn p5_protocol_fidelity() {
    let cfg = common::small_config("attic", 55);
    let reference = pretrain(&cfg, Exec::Sequential).unwrap();
    let mut state = ExperimentState::new(cfg.clone(), Exec::Sequential).unwrap();
    let (mut reset_ok, mut carry_ok, mut ledger_ok) = (true, true, true);
    while !state.is_finished() {
        let start_control = state.control.clone();
        let used_before = state.synthetic.len();
        let row = state.run_batch().unwrap().clone();
        let k = state.batches_done();
        // Every retrain starts from ranker₀: an independent one lands on the same bits.
        let mut fresh = reference.ranker0.clone();
        let mut pairs = reference.real.labeled.clone();
        pairs.extend(state.synthetic.iter().cloned());
        train_ranker(&mut fresh, &pairs, &cfg.train, seed::derive(cfg.seed, &["train"])).unwrap();
        reset_ok &= bitwise(&fresh.network, &state.ranker.network) && bitwise(&state.pre.ranker0.network, &reference.ranker0.network);
        if k > 1 {
            carry_ok &= start_control.as_ref() == Some(&state.control_history[k - 2]);
        }
        carry_ok &= state.control.as_ref() == state.control_history.last();
        ledger_ok &= row.accepted == cfg.batch_size
            && state.synthetic.len() == used_before + row.accepted
            && row.labels_used == cfg.real_pairs + state.synthetic.len();
    }
    let detail = format!("protocol over 3 batches: ranker reset bitwise {reset_ok}, control carried over {carry_ok}, label ledger exact {ledger_ok}");
    assert!(verdict("P5", reset_ok && carry_ok && ledger_ok, detail));
}

/// Binomial enumeration: the wrong answer wins a strict majority of `k`.
fn wrong_majority_oracle(p: f64, k: u32) -> f64 {
    let choose = |n: u32, r: u32| (0..r).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1));
    (k / 2 + 1..=k)
        .map(|j| choose(k, j) * p.powi(j as i32) * (1.0 - p).powi((k - j) as i32))
        .sum()
}

#[test]
fn p6_oracle_calibration() {
    let expected = wrong_majority_oracle(0.1, 5);
    let rate = wrong_majority_rate(NoiseModel::Constant { p_flip: 0.1 }, 5, 1.0, 100_000, 6, Exec::Parallel).unwrap();
    let ok = (expected - 0.00856).abs() < 1e-12 && (rate - 0.00856).abs() <= 0.002;
    let detail = format!("oracle calibration: wrong-majority rate {rate:.5} over 1e5 trials, enumeration {expected:.5}, target 0.00856 +- 0.002");
    assert!(verdict("P6", ok, detail));
}

const P7_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const P7_STRATEGIES: [Strategy; 4] = [Strategy::Attic, Strategy::RandomSynthesis, Strategy::Jitter, Strategy::SemanticJitter];

#[test]
fn p7_default_world_study() {
    let t = Instant::now();
    let mut cells = Vec::new();
    for strategy in P7_STRATEGIES {
        for attribute in 0..4 {
            for seed in P7_SEEDS {
                let mut cfg = ExperimentConfig::default();
                cfg.strategy = strategy;
                cfg.attribute = attribute;
                cfg.seed = seed;
                cfg.mode = Mode::Auto;
                cells.push(cfg);
            }
        }
    }
    let records: Vec<ExperimentRecord> = Exec::Parallel.map(&cells, |cfg| {
        let state = run_experiment(cfg.clone(), Exec::Sequential).unwrap();
        let g: Vec<String> = state.record.rows.iter().map(|r| format!("{:+.3}", r.gain_vs_real)).collect();
        eprintln!("  {} a{} s{} acc0 {:.3} gains {}", cfg.strategy, cfg.attribute, cfg.seed, state.record.rows[0].accuracy, g.join(" "));
        state.record
    });
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let curves = emit_curves(&records).unwrap();
    if let Ok(dir) = std::env::var("ATTIC_P7_OUT") {
        let dir = Path::new(&dir);
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("curves.csv"), curves.to_csv()).unwrap();
        fs::write(dir.join("summary.csv"), curves.summary_csv()).unwrap();
    }
    for s in P7_STRATEGIES {
        let row: Vec<String> = (0..=5).map(|b| format!("{:+.4}", curves.averaged_gain(s, b).unwrap())).collect();
        println!("    {:<16} averaged gain by batch: {}", s.name(), row.join(" "));
    }
    let attic = curves.averaged_gain(Strategy::Attic, 5).unwrap();
    let random = curves.averaged_gain(Strategy::RandomSynthesis, 5).unwrap();
    let margin = attic >= 0.01;
    let beats = attic >= random;
    let detail = format!(
        "default-world study (5 seeds x 4 attributes, auto mode): ATTIC gain {:+.2} pts (need >= +1.0) {}, random synthesis {:+.2} pts, ATTIC >= random {}; {minutes:.1} min for {} runs",
        100.0 * attic,
        if margin { "ok" } else { "short" },
        100.0 * random,
        beats,
        records.len()
    );
    println!("P7a {} ATTIC margin over Real", if margin { "PASS" } else { "FAIL" });
    println!("P7b {} ATTIC versus random synthesis", if beats { "PASS" } else { "FAIL" });
    assert!(verdict("P7", margin && beats, detail));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn p8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config("attic", 88);
    cfg.world.image_side = 16;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_to_dir(cfg.clone(), &a, Exec::Parallel).unwrap();
    run_to_dir(cfg, &b, Exec::Sequential).unwrap();
    let curves = fs::read(a.join("curves.csv")).unwrap() == fs::read(b.join("curves.csv")).unwrap();
    let (ca, cb) = (dir_bytes(&a.join("checkpoints")), dir_bytes(&b.join("checkpoints")));
    let ckpts = ca == cb && !ca.is_empty();
    let detail = format!("determinism: curves.csv identical {curves}, {} checkpoints identical {ckpts}", ca.len());
    assert!(verdict("P8", curves && ckpts, detail));
}

#[test]
fn p9_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::small_config("attic", 99);
    cfg.world.image_side = 32;
    cfg.batches = 3;
    cfg.batch_size = 50;
    run_to_dir(cfg, tmp.path(), Exec::Parallel).unwrap();
    let report = replay_dir(tmp.path(), Some(100), 9).unwrap();
    let detail = format!(
        "replay: {} sampled pairs re-rendered, {} mismatches, {} skipped",
        report.checked,
        report.mismatches.len(),
        report.skipped
    );
    assert!(verdict("P9", report.checked == 100 && report.ok(), detail));
}
