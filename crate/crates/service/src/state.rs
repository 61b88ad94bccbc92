//! Service state: experiments, open batches and annotation tasks.
//!
//! Every mutation is appended to `events.jsonl` after it succeeds. On
//! startup the log is replayed through the same code paths; training and
//! candidate generation are seed-deterministic, so replay rebuilds the
//! exact state.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use attic_core::baselines::Strategy;
use attic_core::curves::{emit_curves, Curves};
use attic_core::exec::Exec;
use attic_core::experiment::{BatchRow, ExperimentConfig, ExperimentState, Mode, PendingBatch};
use attic_core::generator::ATTRIBUTE_NAMES;
use attic_core::imageio::write_png;
use attic_core::oracle::{aggregate, Decision, Vote};
use attic_core::pairs::{LabeledPair, Order, PairImage, Provenance};
use attic_core::rundir::content_key;
use attic_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceMode {
    /// Synthetic pairs of Normal-mode experiments wait for human votes.
    Live,
    /// Every batch is labeled by the simulated annotators.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Accepted,
    Rejected,
}

struct Task {
    experiment: String,
    batch: usize,
    pair: LabeledPair,
    votes: BTreeMap<String, Vote>,
    status: TaskStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub experiment_id: String,
    pub batch: usize,
    pub attribute: usize,
    pub attribute_name: String,
    pub image_a: String,
    pub image_b: String,
    pub votes: usize,
    pub votes_needed: usize,
    pub status: TaskStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

struct OpenBatch {
    pending: PendingBatch,
    tasks: Vec<String>,
    accepted: Vec<LabeledPair>,
    asked: usize,
    rejected: usize,
}

struct Experiment {
    state: ExperimentState,
    open: Option<OpenBatch>,
    live: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentStatus {
    pub id: String,
    pub strategy: Strategy,
    pub mode: Mode,
    pub attribute: usize,
    pub live: bool,
    pub batches_done: usize,
    pub batches_total: usize,
    pub open_batch: Option<usize>,
    pub accepted: usize,
    pub batch_size: usize,
    pub finished: bool,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Event {
    ExperimentCreated { id: String, config: Box<ExperimentConfig> },
    Vote { task_id: String, vote: Vote },
    Advanced { id: String },
}

pub struct Service {
    data_dir: PathBuf,
    mode: ServiceMode,
    exec: Exec,
    experiments: BTreeMap<String, Experiment>,
    tasks: HashMap<String, Task>,
    log: Option<File>,
    next_id: usize,
}

fn core_error(e: CoreError) -> ApiError {
    match e {
        CoreError::Config { field, reason } => ApiError::validation(vec![(field, reason)]),
        CoreError::Batch { batch, source } => {
            let inner = core_error(*source);
            ApiError::new(inner.status, format!("batch {batch}: {}", inner.message))
        }
        other => ApiError::internal(other.to_string()),
    }
}

impl Service {
    /// Opens `data_dir`, replaying any existing event log.
    pub fn open(data_dir: &Path, mode: ServiceMode, exec: Exec) -> Result<Self, ApiError> {
        fs::create_dir_all(data_dir.join("static")).map_err(|e| ApiError::internal(e.to_string()))?;
        let mut svc = Self {
            data_dir: data_dir.to_owned(),
            mode,
            exec,
            experiments: BTreeMap::new(),
            tasks: HashMap::new(),
            log: None,
            next_id: 1,
        };
        let path = data_dir.join("events.jsonl");
        if path.exists() {
            let file = File::open(&path).map_err(|e| ApiError::internal(e.to_string()))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| ApiError::internal(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from a crash mid-write is dropped.
                let Ok(event) = serde_json::from_str::<Event>(&line) else {
                    tracing::warn!(line = n + 1, "skipping unreadable event");
                    continue;
                };
                svc.apply(event)?;
            }
        }
        svc.log = Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| ApiError::internal(e.to_string()))?,
        );
        Ok(svc)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn apply(&mut self, event: Event) -> Result<(), ApiError> {
        match event {
            Event::ExperimentCreated { id, config } => self.do_create(id, *config),
            Event::Vote { task_id, vote } => self.do_vote(&task_id, vote).map(drop),
            Event::Advanced { id } => self.do_advance(&id).map(drop),
        }
    }

    fn record(&mut self, event: &Event) -> Result<(), ApiError> {
        if let Some(log) = self.log.as_mut() {
            let mut line = serde_json::to_vec(event).expect("serializable");
            line.push(b'\n');
            log.write_all(&line)
                .and_then(|()| log.sync_data())
                .map_err(|e| ApiError::internal(format!("event log: {e}")))?;
        }
        Ok(())
    }

    pub fn create_experiment(&mut self, config: ExperimentConfig) -> Result<ExperimentStatus, ApiError> {
        config.validate().map_err(core_error)?;
        let id = format!("exp-{}", self.next_id);
        self.do_create(id.clone(), config.clone())?;
        self.record(&Event::ExperimentCreated {
            id: id.clone(),
            config: Box::new(config),
        })?;
        self.status(&id)
    }

    fn do_create(&mut self, id: String, config: ExperimentConfig) -> Result<(), ApiError> {
        let live = self.mode == ServiceMode::Live && config.mode == Mode::Normal && config.strategy.is_synthetic();
        let state = ExperimentState::new(config, self.exec).map_err(core_error)?;
        self.next_id += 1;
        self.experiments.insert(id.clone(), Experiment { state, open: None, live });
        self.open_next(&id)
    }

    /// Opens the next batch of a live experiment and issues its tasks.
    fn open_next(&mut self, id: &str) -> Result<(), ApiError> {
        let exp = self.experiments.get_mut(id).expect("known experiment");
        if !exp.live || exp.state.is_finished() {
            return Ok(());
        }
        let pending = exp.state.begin_batch().map_err(core_error)?;
        exp.open = Some(OpenBatch {
            pending,
            tasks: Vec::new(),
            accepted: Vec::new(),
            asked: 0,
            rejected: 0,
        });
        let t = exp.state.config.batch_size;
        self.issue(id, t)
    }

    fn issue(&mut self, id: &str, n: usize) -> Result<(), ApiError> {
        let exp = self.experiments.get_mut(id).expect("known experiment");
        let cap = exp.state.config.batch_size * exp.state.config.max_ask_factor;
        let open = exp.open.as_mut().expect("open batch");
        let n = n.min(cap.saturating_sub(open.asked));
        if n == 0 {
            return Ok(());
        }
        let source = open.pending.source.as_mut().expect("live batches have a source");
        let candidates = source.next_candidates(n).map_err(core_error)?;
        let static_dir = self.data_dir.join("static");
        for pair in candidates {
            let task_id = format!("{id}-{}", pair.id);
            for (img, side) in [(&pair.first, "a"), (&pair.second, "b")] {
                let path = static_dir.join(format!("{}.png", image_key(&task_id, side)));
                if !path.exists() {
                    write_png(&path, &img.pixels).map_err(core_error)?;
                }
            }
            open.asked += 1;
            open.tasks.push(task_id.clone());
            self.tasks.insert(
                task_id,
                Task {
                    experiment: id.to_owned(),
                    batch: open.pending.index,
                    pair,
                    votes: BTreeMap::new(),
                    status: TaskStatus::Open,
                },
            );
        }
        Ok(())
    }

    pub fn has_live_experiment(&self) -> bool {
        self.experiments.values().any(|e| e.live && !e.state.is_finished())
    }

    fn view(&self, task_id: &str, task: &Task) -> TaskView {
        let needed = self.experiments[&task.experiment].state.config.oracle.votes_per_pair;
        TaskView {
            task_id: task_id.to_owned(),
            experiment_id: task.experiment.clone(),
            batch: task.batch,
            attribute: task.pair.attribute,
            attribute_name: ATTRIBUTE_NAMES.get(task.pair.attribute).unwrap_or(&"attribute").to_string(),
            image_a: format!("/static/{}.png", image_key(task_id, "a")),
            image_b: format!("/static/{}.png", image_key(task_id, "b")),
            votes: task.votes.len(),
            votes_needed: needed,
            status: task.status,
            decision: match task.status {
                TaskStatus::Open => None,
                TaskStatus::Rejected => Some(Decision::Rejected),
                TaskStatus::Accepted => Some(match task.pair.order {
                    Some(Order::FirstGreater) => Decision::AGreater,
                    _ => Decision::BGreater,
                }),
            },
        }
    }

    /// Open tasks, fewest votes first.
    pub fn list_tasks(&self, limit: usize) -> Result<Vec<TaskView>, ApiError> {
        if !self.has_live_experiment() {
            return Err(ApiError::conflict("no live experiment is running"));
        }
        let mut open: Vec<(&String, &Task)> = self.tasks.iter().filter(|(_, t)| t.status == TaskStatus::Open).collect();
        open.sort_by(|a, b| a.1.votes.len().cmp(&b.1.votes.len()).then_with(|| a.0.cmp(b.0)));
        Ok(open.into_iter().take(limit).map(|(id, t)| self.view(id, t)).collect())
    }

    pub fn vote(&mut self, task_id: &str, vote: Vote) -> Result<TaskView, ApiError> {
        if vote.voter.trim().is_empty() {
            return Err(ApiError::validation(vec![("voter".into(), "must not be empty".into())]));
        }
        let view = self.do_vote(task_id, vote.clone())?;
        self.record(&Event::Vote {
            task_id: task_id.to_owned(),
            vote,
        })?;
        Ok(view)
    }

    fn do_vote(&mut self, task_id: &str, vote: Vote) -> Result<TaskView, ApiError> {
        let task = self
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown task {task_id}")))?;
        if task.status != TaskStatus::Open {
            return Err(ApiError::conflict(format!("task {task_id} is closed")));
        }
        let exp_id = task.experiment.clone();
        let exp = self.experiments.get_mut(&exp_id).expect("task experiment exists");
        let (k, rule) = (exp.state.config.oracle.votes_per_pair, exp.state.config.oracle.rule);
        task.votes.insert(vote.voter.clone(), vote);
        if task.votes.len() >= k {
            let votes: Vec<Vote> = task.votes.values().cloned().collect();
            let label = aggregate(&task.pair.id, &votes, rule);
            let open = exp.open.as_mut().expect("open tasks belong to an open batch");
            let order = match label.decision {
                Decision::AGreater => Some(Order::FirstGreater),
                Decision::BGreater => Some(Order::SecondGreater),
                Decision::Rejected => None,
            };
            match order {
                Some(order) => {
                    task.status = TaskStatus::Accepted;
                    task.pair.order = Some(order);
                    task.pair.provenance = Provenance::SyntheticHuman;
                    task.pair.votes = Some(votes);
                    open.accepted.push(task.pair.clone());
                }
                None => {
                    task.status = TaskStatus::Rejected;
                    open.rejected += 1;
                    self.issue(&exp_id, 1)?;
                }
            }
        }
        let task = &self.tasks[task_id];
        Ok(self.view(task_id, task))
    }

    /// Completes the open batch (live) or runs a whole labeled batch
    /// (simulated), then opens the next one.
    pub fn advance(&mut self, id: &str) -> Result<BatchRow, ApiError> {
        let row = self.do_advance(id)?;
        self.record(&Event::Advanced { id: id.to_owned() })?;
        Ok(row)
    }

    fn do_advance(&mut self, id: &str) -> Result<BatchRow, ApiError> {
        let exp = self
            .experiments
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown experiment {id}")))?;
        if exp.state.is_finished() {
            return Err(ApiError::conflict("all batches are done"));
        }
        let row = if exp.live {
            let open = exp.open.as_ref().expect("live experiments keep a batch open");
            let t = exp.state.config.batch_size;
            if open.accepted.len() < t {
                return Err(ApiError::conflict(format!(
                    "batch {} has {} of {t} accepted labels",
                    open.pending.index,
                    open.accepted.len()
                )));
            }
            let open = exp.open.take().expect("checked");
            for task_id in &open.tasks {
                self.tasks.remove(task_id);
            }
            let filled = attic_core::baselines::Filled {
                accepted: open.accepted,
                asked: open.asked,
                rejected: open.rejected,
            };
            exp.state.complete_batch(open.pending, filled).map_err(core_error)?.clone()
        } else {
            exp.state.run_batch().map_err(core_error)?.clone()
        };
        self.open_next(id)?;
        Ok(row)
    }

    pub fn status(&self, id: &str) -> Result<ExperimentStatus, ApiError> {
        let exp = self
            .experiments
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown experiment {id}")))?;
        let cfg = &exp.state.config;
        Ok(ExperimentStatus {
            id: id.to_owned(),
            strategy: cfg.strategy,
            mode: cfg.mode,
            attribute: cfg.attribute,
            live: exp.live,
            batches_done: exp.state.batches_done(),
            batches_total: cfg.batches,
            open_batch: exp.open.as_ref().map(|o| o.pending.index),
            accepted: exp.open.as_ref().map_or(0, |o| o.accepted.len()),
            batch_size: cfg.batch_size,
            finished: exp.state.is_finished(),
            accuracy: exp.state.record.rows.last().map_or(0.0, |r| r.accuracy),
        })
    }

    pub fn list_experiments(&self) -> Vec<ExperimentStatus> {
        self.experiments.keys().map(|id| self.status(id).expect("listed")).collect()
    }

    pub fn curves(&self, id: &str) -> Result<Curves, ApiError> {
        let exp = self
            .experiments
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown experiment {id}")))?;
        emit_curves(std::slice::from_ref(&exp.state.record)).map_err(core_error)
    }

    /// Images of an open task, for tests and tooling.
    pub fn task_images(&self, task_id: &str) -> Option<(&PairImage, &PairImage)> {
        self.tasks.get(task_id).map(|t| (&t.pair.first, &t.pair.second))
    }

    /// True strength gap of a task's candidate.
    pub fn task_gap(&self, task_id: &str) -> Option<f64> {
        let t = self.tasks.get(task_id)?;
        attic_core::baselines::candidate_gap(&t.pair).ok()
    }
}

/// Content-addressed static name of one image of a task.
pub fn image_key(task_id: &str, side: &str) -> String {
    content_key(&format!("{task_id}/{side}"))
}
