//! The active loop: pretraining, per-batch candidate creation, labeling,
//! training-set growth, ranker resets and evaluation.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::{
    fill_budget, jitter_pairs, real_plus_pairs, CandidateSource, ControlSource, Filled, JitterRange, Labeler,
    SemanticJitterSource, Strategy, DEFAULT_SEMANTIC_OFFSETS,
};
use crate::control::{
    adversarial_step, compute_scaling_stats, sample_seeds, ControlArch, ControlModel, ControlParams, HingeGuard,
    ScalingStats, StepConfig,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generator::GeneratorSpec;
use crate::oracle::OracleConfig;
use crate::pairs::LabeledPair;
use crate::ranker::{evaluate, has_converged, train_ranker, RankerArch, RankerModel, TrainConfig, TrainReport};
use crate::seed;
use crate::world::{make_real_pairs, make_test_pairs, sample_pool, split_pool, PoolSplit, RealPairSet, WorldConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Synthetic pairs are labeled by annotators; half the real pairs are used.
    Normal,
    /// Synthetic pairs are labeled from their generating strengths.
    #[default]
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub epoch_cap: usize,
    pub steps_per_epoch: usize,
    pub minibatch: usize,
    pub ranker_lr: f64,
    pub control_lr: f64,
    /// Per-epoch decay of the control learning rate within a batch.
    pub control_lr_decay: f64,
    pub weight_decay: f64,
    /// Weight of the minimum-gap hinge; 0 disables it.
    pub hinge_lambda: f64,
    /// Hinge margin; defaults to the world's discard threshold.
    pub hinge_tau: Option<f64>,
    pub convergence_tol: f64,
    pub convergence_window: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            epoch_cap: 100,
            steps_per_epoch: 2,
            minibatch: 32,
            ranker_lr: 0.02,
            control_lr: 0.01,
            control_lr_decay: 0.95,
            weight_decay: 1e-4,
            hinge_lambda: 1.0,
            hinge_tau: None,
            convergence_tol: 1e-6,
            convergence_window: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub attribute: usize,
    pub strategy: Strategy,
    pub mode: Mode,
    /// Real labeled pairs drawn for the attribute (Normal mode uses half).
    pub real_pairs: usize,
    pub test_pairs: usize,
    pub batches: usize,
    /// Accepted pairs added per batch.
    pub batch_size: usize,
    pub seed: u64,
    pub ranker: RankerArch,
    pub train: TrainConfig,
    pub control: ControlArch,
    pub adversarial: AdversarialConfig,
    pub oracle: OracleConfig,
    pub jitter: JitterRange,
    pub semantic_offsets: Vec<f64>,
    /// Candidates asked per batch may not exceed this multiple of `batch_size`.
    pub max_ask_factor: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            attribute: 0,
            strategy: Strategy::Attic,
            mode: Mode::Auto,
            real_pairs: 300,
            test_pairs: 500,
            batches: 5,
            batch_size: 100,
            seed: 0,
            ranker: RankerArch::default(),
            train: TrainConfig::default(),
            control: ControlArch::default(),
            adversarial: AdversarialConfig::default(),
            oracle: OracleConfig::default(),
            jitter: JitterRange::default(),
            semantic_offsets: DEFAULT_SEMANTIC_OFFSETS.to_vec(),
            max_ask_factor: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.attribute >= self.world.num_attributes {
            return Err(Error::config("attribute", format!("must be < {}", self.world.num_attributes)));
        }
        if self.real_pairs == 0 || (self.mode == Mode::Normal && self.real_pairs < 2) {
            return Err(Error::config("real_pairs", "too few real pairs for the mode"));
        }
        if self.test_pairs == 0 {
            return Err(Error::config("test_pairs", "must be >= 1"));
        }
        if self.batches > 0 && self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.ranker.hidden1 == 0 || self.ranker.hidden2 == 0 {
            return Err(Error::config("ranker", "hidden widths must be >= 1"));
        }
        if self.control.hidden.contains(&0) {
            return Err(Error::config("control.hidden", "widths must be >= 1"));
        }
        self.train.validate("train")?;
        let adv = &self.adversarial;
        if adv.minibatch < 2 {
            return Err(Error::config("adversarial.minibatch", "batch normalization needs >= 2"));
        }
        if adv.steps_per_epoch == 0 || adv.convergence_window == 0 {
            return Err(Error::config("adversarial.steps_per_epoch", "must be >= 1"));
        }
        for (field, v) in [
            ("adversarial.ranker_lr", adv.ranker_lr),
            ("adversarial.control_lr", adv.control_lr),
            ("adversarial.weight_decay", adv.weight_decay),
            ("adversarial.hinge_lambda", adv.hinge_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and >= 0"));
            }
        }
        if !(adv.control_lr_decay > 0.0 && adv.control_lr_decay <= 1.0) {
            return Err(Error::config("adversarial.control_lr_decay", "must be in (0, 1]"));
        }
        if let Some(t) = adv.hinge_tau {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::config("adversarial.hinge_tau", "must be finite and >= 0"));
            }
        }
        self.oracle.validate()?;
        let j = &self.jitter;
        if !(j.translate_px >= 0.0 && j.rotate_deg >= 0.0 && j.brightness >= 0.0) {
            return Err(Error::config("jitter", "magnitudes must be >= 0"));
        }
        if !(j.scale[0] > 0.0 && j.scale[0] <= j.scale[1] && j.contrast[0] >= 0.0 && j.contrast[0] <= j.contrast[1]) {
            return Err(Error::config("jitter", "ranges must be ordered and positive"));
        }
        if self.strategy == Strategy::SemanticJitter && self.semantic_offsets.is_empty() {
            return Err(Error::config("semantic_offsets", "must not be empty"));
        }
        if self.max_ask_factor == 0 {
            return Err(Error::config("max_ask_factor", "must be >= 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Sets a dotted key such as `adversarial.control_lr=0.005`. The value
    /// is parsed as JSON, falling back to a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::config(key, "unknown key"))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
        *self = serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("serializable")))
    }

    fn hinge(&self) -> Option<HingeGuard> {
        (self.adversarial.hinge_lambda > 0.0).then(|| HingeGuard {
            lambda: self.adversarial.hinge_lambda,
            tau: self.adversarial.hinge_tau.unwrap_or(self.world.tau_discard),
        })
    }

    fn labeler(&self) -> Labeler {
        match self.mode {
            Mode::Auto => Labeler::Auto,
            Mode::Normal => Labeler::Oracle(self.oracle.clone()),
        }
    }

    /// Real pairs that enter training.
    pub fn real_used(&self) -> usize {
        match self.mode {
            Mode::Auto => self.real_pairs,
            Mode::Normal => self.real_pairs / 2,
        }
    }
}

/// One curve point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch: usize,
    /// Ordered pairs in the training set (real plus added).
    pub labels_used: usize,
    pub accepted: usize,
    pub asked: usize,
    pub rejection_rate: f64,
    pub accuracy: f64,
    pub gain_vs_real: f64,
    pub train_loss: Vec<f64>,
    /// Mean adversarial rank loss per epoch (empty for other strategies).
    pub adversarial_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub strategy: Strategy,
    pub attribute: usize,
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub rows: Vec<BatchRow>,
}

impl ExperimentRecord {
    pub fn final_gain(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.gain_vs_real)
    }
}

/// Control outputs for one probe seed after an adversarial epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub batch: usize,
    pub epoch: usize,
    pub params: ControlParams,
}

pub struct Pretrained {
    pub ranker0: RankerModel,
    pub scaling: ScalingStats,
    pub real: RealPairSet,
    pub test: RealPairSet,
    pub split: PoolSplit,
    pub report: TrainReport,
    pub accuracy: f64,
}

fn pretrain_seed(cfg: &ExperimentConfig) -> u64 {
    seed::derive(cfg.seed, &["train"])
}

/// Samples the world, draws real and test pairs, and trains ranker₀ on the
/// real pairs alone.
pub fn pretrain(cfg: &ExperimentConfig, exec: Exec) -> Result<Pretrained> {
    cfg.validate()?;
    let s = cfg.seed;
    let pool = sample_pool(&cfg.world, seed::derive(s, &["world"]))?;
    let split = split_pool(pool);
    let tau = cfg.world.tau_discard;
    let mut real = make_real_pairs(&split.labeled, cfg.attribute, cfg.real_pairs, tau, seed::derive(s, &["real"]))?;
    let used = cfg.real_used();
    real.pairs.truncate(used);
    real.labeled.truncate(used);
    if real.labeled.is_empty() {
        return Err(Error::Invalid("no real pairs to pretrain on".into()));
    }
    let test = make_test_pairs(&split.test, cfg.attribute, cfg.test_pairs, tau, seed::derive(s, &["test"]))?;
    let strengths: Vec<Vec<f64>> = split.stats.iter().map(|i| i.true_y.clone()).collect();
    let scaling = compute_scaling_stats(&strengths)?;
    let mut ranker0 = RankerModel::new(cfg.world.image_side, &cfg.ranker, cfg.attribute, seed::derive(s, &["ranker0"]));
    let report = train_ranker(&mut ranker0, &real.labeled, &cfg.train, pretrain_seed(cfg))?;
    let accuracy = evaluate(&ranker0, &test.labeled, exec)?;
    Ok(Pretrained {
        ranker0,
        scaling,
        real,
        test,
        split,
        report,
        accuracy,
    })
}

/// A batch whose candidates are being labeled.
pub struct PendingBatch {
    pub index: usize,
    /// Present for strategies whose candidates need labels.
    pub source: Option<Box<dyn CandidateSource>>,
    /// Pairs that arrive with labels (jitter, pseudo pairs).
    pub prelabeled: Vec<LabeledPair>,
    pub adversarial_loss: Vec<f64>,
}

pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub generator: GeneratorSpec,
    pub pre: Pretrained,
    /// Adversarially trained (ATTIC) or frozen random control network.
    pub control: Option<ControlModel>,
    /// Added pairs so far, in batch order.
    pub synthetic: Vec<LabeledPair>,
    /// Ranker after the latest retraining.
    pub ranker: RankerModel,
    pub record: ExperimentRecord,
    pub trace: Vec<TracePoint>,
    /// Control-net snapshots at the end of each batch's adversarial phase.
    pub control_history: Vec<ControlModel>,
    pub exec: Exec,
    pseudo_reserve: Vec<LabeledPair>,
}

impl ExperimentState {
    pub fn new(config: ExperimentConfig, exec: Exec) -> Result<Self> {
        let pre = pretrain(&config, exec)?;
        let generator = config.world.generator()?;
        let control = match config.strategy {
            Strategy::Attic | Strategy::RandomSynthesis => Some(ControlModel::new(
                &config.control,
                pre.scaling.clone(),
                config.world.latent_dim,
                seed::derive(config.seed, &["control"]),
            )?),
            _ => None,
        };
        let pseudo_reserve = if config.strategy == Strategy::RealPlus {
            real_plus_pairs(
                &pre.split.stats,
                config.attribute,
                config.batches * config.batch_size,
                config.world.tau_discard,
                seed::derive(config.seed, &["pseudo"]),
            )?
        } else {
            Vec::new()
        };
        let record = ExperimentRecord {
            strategy: config.strategy,
            attribute: config.attribute,
            seed: config.seed,
            mode: config.mode,
            config_hash: config.hash(),
            rows: vec![BatchRow {
                batch: 0,
                labels_used: pre.real.labeled.len(),
                accepted: 0,
                asked: 0,
                rejection_rate: 0.0,
                accuracy: pre.accuracy,
                gain_vs_real: 0.0,
                train_loss: pre.report.loss_trace.clone(),
                adversarial_loss: Vec::new(),
            }],
        };
        Ok(Self {
            ranker: pre.ranker0.clone(),
            generator,
            control,
            synthetic: Vec::new(),
            record,
            trace: Vec::new(),
            control_history: Vec::new(),
            exec,
            pseudo_reserve,
            pre,
            config,
        })
    }

    /// Batches completed so far.
    pub fn batches_done(&self) -> usize {
        self.record.rows.len() - 1
    }

    pub fn is_finished(&self) -> bool {
        self.batches_done() >= self.config.batches
    }

    fn batch_seed(&self, index: usize, label: &str) -> u64 {
        seed::derive_index(seed::derive(self.config.seed, &[label]), "batch", index as u64)
    }

    /// Adversarial training of a fresh ranker₀ copy against the persistent
    /// control network. Returns the per-epoch mean rank loss.
    fn adversarial_phase(&mut self, index: usize) -> Result<Vec<f64>> {
        let cfg = self.config.adversarial.clone();
        let hinge = self.config.hinge();
        let attribute = self.config.attribute;
        let mut rng = seed::rng(self.batch_seed(index, "adversarial"));
        let control = self.control.as_mut().expect("attic has a control net");
        let probe = sample_seeds(cfg.minibatch, control.seed_dim(), &mut seed::rng(seed::derive(self.config.seed, &["probe"])))?;
        let mut ranker = self.pre.ranker0.clone();
        let mut trace = Vec::with_capacity(cfg.epoch_cap);
        for epoch in 0..cfg.epoch_cap {
            let step = StepConfig {
                attribute,
                ranker_lr: cfg.ranker_lr,
                control_lr: cfg.control_lr * cfg.control_lr_decay.powi(epoch as i32),
                weight_decay: cfg.weight_decay,
                hinge,
            };
            let mut total = 0.0;
            let mut applied = 0usize;
            for _ in 0..cfg.steps_per_epoch {
                let q = sample_seeds(cfg.minibatch, control.seed_dim(), &mut rng)?;
                let report = adversarial_step(&mut ranker, control, &self.generator, &q, &step)?;
                if !report.skipped {
                    total += report.rank_loss;
                    applied += 1;
                }
            }
            trace.push(if applied == 0 { f64::NAN } else { total / applied as f64 });
            self.trace.push(TracePoint {
                batch: index,
                epoch,
                params: control.generate(&probe)?.swap_remove(0),
            });
            if has_converged(&trace, cfg.convergence_window, cfg.convergence_tol) {
                break;
            }
        }
        Ok(trace)
    }

    /// Runs the synthesis step of the next batch and returns it for labeling.
    pub fn begin_batch(&mut self) -> Result<PendingBatch> {
        if self.is_finished() {
            return Err(Error::Invalid("all batches are done".into()));
        }
        let index = self.batches_done() + 1;
        let cfg = &self.config;
        let prefix = format!("b{index}");
        let mut pending = PendingBatch {
            index,
            source: None,
            prelabeled: Vec::new(),
            adversarial_loss: Vec::new(),
        };
        match cfg.strategy {
            Strategy::Real => {}
            Strategy::RealPlus => {
                let t = cfg.batch_size;
                pending.prelabeled = self.pseudo_reserve[(index - 1) * t..index * t].to_vec();
            }
            Strategy::Jitter => {
                pending.prelabeled =
                    jitter_pairs(&self.pre.real.labeled, cfg.batch_size, &cfg.jitter, self.batch_seed(index, "jitter"))?;
                for p in &mut pending.prelabeled {
                    p.id = format!("{prefix}-{}", p.id);
                }
            }
            Strategy::SemanticJitter => {
                pending.source = Some(Box::new(SemanticJitterSource::new(
                    self.pre.split.stats.clone(),
                    self.generator.clone(),
                    cfg.attribute,
                    cfg.semantic_offsets.clone(),
                    prefix,
                    self.batch_seed(index, "candidates"),
                )?));
            }
            Strategy::RandomSynthesis | Strategy::Attic => {
                if cfg.strategy == Strategy::Attic {
                    pending.adversarial_loss = self
                        .adversarial_phase(index)
                        .map_err(|e| e.in_batch(index))?;
                }
                let control = self.control.clone().expect("control strategies have a net");
                self.control_history.push(control.clone());
                pending.source = Some(Box::new(ControlSource::new(
                    control,
                    self.generator.clone(),
                    self.config.attribute,
                    self.config.batch_size,
                    prefix,
                    self.batch_seed(index, "candidates"),
                )));
            }
        }
        Ok(pending)
    }

    /// Labels a pending batch with the configured labeler (auto or simulated
    /// annotators).
    pub fn label_batch(&self, pending: &mut PendingBatch) -> Result<Filled> {
        let t = self.config.batch_size;
        match pending.source.as_mut() {
            None => {
                let accepted = std::mem::take(&mut pending.prelabeled);
                Ok(Filled {
                    asked: accepted.len(),
                    accepted,
                    rejected: 0,
                })
            }
            Some(source) => fill_budget(
                source.as_mut(),
                &self.config.labeler(),
                t,
                t * self.config.max_ask_factor,
                self.batch_seed(pending.index, "labels"),
            ),
        }
    }

    /// Appends accepted pairs, resets the ranker to ranker₀, retrains on all
    /// pairs, evaluates, and records the row.
    pub fn complete_batch(&mut self, pending: PendingBatch, filled: Filled) -> Result<&BatchRow> {
        let index = pending.index;
        if index != self.batches_done() + 1 {
            return Err(Error::Invalid(format!("batch {index} is not the open batch")));
        }
        let accepted = filled.accepted.len();
        let rejection_rate = filled.rejection_rate();
        self.synthetic.extend(filled.accepted);
        let (ranker, report) = if self.synthetic.is_empty() {
            (self.pre.ranker0.clone(), self.pre.report.clone())
        } else {
            let mut ranker = self.pre.ranker0.clone();
            let mut pairs = self.pre.real.labeled.clone();
            pairs.extend(self.synthetic.iter().cloned());
            let report = train_ranker(&mut ranker, &pairs, &self.config.train, pretrain_seed(&self.config))
                .map_err(|e| e.in_batch(index))?;
            (ranker, report)
        };
        let accuracy = evaluate(&ranker, &self.pre.test.labeled, self.exec).map_err(|e| e.in_batch(index))?;
        self.ranker = ranker;
        self.record.rows.push(BatchRow {
            batch: index,
            labels_used: self.pre.real.labeled.len() + self.synthetic.len(),
            accepted,
            asked: filled.asked,
            rejection_rate,
            accuracy,
            gain_vs_real: accuracy - self.pre.accuracy,
            train_loss: report.loss_trace,
            adversarial_loss: pending.adversarial_loss,
        });
        Ok(self.record.rows.last().expect("just pushed"))
    }

    /// One full batch with automatic or simulated labeling.
    pub fn run_batch(&mut self) -> Result<&BatchRow> {
        let mut pending = self.begin_batch()?;
        let index = pending.index;
        let filled = self.label_batch(&mut pending).map_err(|e| e.in_batch(index))?;
        self.complete_batch(pending, filled)
    }
}

/// Pretrains and runs every configured batch.
pub fn run_experiment(config: ExperimentConfig, exec: Exec) -> Result<ExperimentState> {
    let mut state = ExperimentState::new(config, exec)?;
    while !state.is_finished() {
        state.run_batch()?;
    }
    Ok(state)
}
