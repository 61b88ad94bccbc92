//! On-disk layout of a run:
//!
//! ```text
//! config.json   curves.csv   summary.csv   record.json   trace.json
//! log.jsonl     checkpoints/*.json          pairs/<id>-{a,b}.png + <id>.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::curves::{emit_curves, Curves};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::experiment::{ExperimentConfig, ExperimentRecord, ExperimentState, TracePoint};
use crate::generator::GeneratorSpec;
use crate::imageio::{encode_png, write_png};
use crate::oracle::Vote;
use crate::pairs::{LabeledPair, Order, Provenance};
use crate::seed;
use crate::tensor::Tensor;

/// Hex SHA-256 of a string, used for content-addressed file names.
pub fn content_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub id: String,
    pub png: String,
    pub y: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSidecar {
    pub id: String,
    pub attribute: usize,
    pub order: Option<Order>,
    pub provenance: Provenance,
    pub first: ImageSidecar,
    pub second: ImageSidecar,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<Vote>>,
}

pub struct RunDir {
    pub root: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("pairs"))?;
        let log = OpenOptions::new().create(true).append(true).open(root.join("log.jsonl"))?;
        Ok(Self {
            root: root.to_owned(),
            log: BufWriter::new(log),
        })
    }

    pub fn log(&mut self, event: serde_json::Value) -> Result<()> {
        serde_json::to_writer(&mut self.log, &event)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        Ok(())
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::write(self.root.join("config.json"), cfg.to_json_pretty())?;
        Ok(())
    }

    pub fn write_checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(&self.root.join("checkpoints").join(format!("{name}.json")))
    }

    pub fn write_pair(&self, pair: &LabeledPair) -> Result<()> {
        let dir = self.root.join("pairs");
        let image = |img: &crate::pairs::PairImage, side: &str| -> Result<ImageSidecar> {
            let png = format!("{}-{side}.png", pair.id);
            write_png(&dir.join(&png), &img.pixels)?;
            Ok(ImageSidecar {
                id: img.id.clone(),
                png,
                y: img.y.clone(),
                z: img.z.clone(),
            })
        };
        let sidecar = PairSidecar {
            id: pair.id.clone(),
            attribute: pair.attribute,
            order: pair.order,
            provenance: pair.provenance,
            first: image(&pair.first, "a")?,
            second: image(&pair.second, "b")?,
            votes: pair.votes.clone(),
        };
        fs::write(dir.join(format!("{}.json", pair.id)), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn write_curves(&self, curves: &Curves) -> Result<()> {
        fs::write(self.root.join("curves.csv"), curves.to_csv())?;
        fs::write(self.root.join("summary.csv"), curves.summary_csv())?;
        Ok(())
    }

    pub fn write_record(&self, record: &ExperimentRecord) -> Result<()> {
        fs::write(self.root.join("record.json"), serde_json::to_string_pretty(record)?)?;
        Ok(())
    }

    pub fn write_trace(&self, trace: &[TracePoint]) -> Result<()> {
        fs::write(self.root.join("trace.json"), serde_json::to_string(trace)?)?;
        Ok(())
    }
}

pub fn load_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json(&fs::read_to_string(dir.join("config.json"))?)
}

pub fn load_record(dir: &Path) -> Result<ExperimentRecord> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("record.json"))?)?)
}

pub fn load_trace(dir: &Path) -> Result<Vec<TracePoint>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("trace.json"))?)?)
}

/// Writes everything a finished or in-progress batch produced.
pub fn archive_batch(run: &mut RunDir, state: &ExperimentState, first_new: usize, wall_ms: u128) -> Result<()> {
    let row = state.record.rows.last().expect("baseline row");
    for pair in &state.synthetic[first_new..] {
        run.write_pair(pair)?;
    }
    run.write_checkpoint(&format!("ranker_b{}", row.batch), &Checkpoint::from_ranker(&state.ranker))?;
    if let Some(control) = &state.control {
        run.write_checkpoint(&format!("control_b{}", row.batch), &Checkpoint::from_control(control))?;
    }
    run.log(json!({
        "event": "batch",
        "batch": row.batch,
        "accuracy": row.accuracy,
        "gain_vs_real": row.gain_vs_real,
        "accepted": row.accepted,
        "asked": row.asked,
        "labels_used": row.labels_used,
        "wall_ms": wall_ms as u64,
    }))
}

/// Writes the end-of-run files.
pub fn finish_run(run: &mut RunDir, state: &ExperimentState) -> Result<()> {
    run.write_curves(&emit_curves(std::slice::from_ref(&state.record))?)?;
    run.write_record(&state.record)?;
    run.write_trace(&state.trace)?;
    run.log(json!({"event": "finished", "batches": state.batches_done()}))
}

/// Runs an experiment and archives it under `dir`.
pub fn run_to_dir(config: ExperimentConfig, dir: &Path, exec: Exec) -> Result<ExperimentState> {
    config.validate()?;
    let mut run = RunDir::create(dir)?;
    run.write_config(&config)?;
    let started = Instant::now();
    let mut state = ExperimentState::new(config, exec)?;
    run.write_checkpoint("ranker0", &Checkpoint::from_ranker(&state.pre.ranker0))?;
    run.log(json!({
        "event": "pretrained",
        "config_hash": state.record.config_hash,
        "accuracy": state.pre.accuracy,
        "real_pairs": state.pre.real.len(),
        "wall_ms": started.elapsed().as_millis() as u64,
    }))?;
    while !state.is_finished() {
        let t = Instant::now();
        let first_new = state.synthetic.len();
        state.run_batch()?;
        archive_batch(&mut run, &state, first_new, t.elapsed().as_millis())?;
    }
    finish_run(&mut run, &state)?;
    Ok(state)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub checked: usize,
    /// Pairs without stored generator inputs.
    pub skipped: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

pub fn list_sidecars(dir: &Path) -> Result<Vec<PairSidecar>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.join("pairs"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
        .collect()
}

fn replay_image(generator: &GeneratorSpec, pairs_dir: &Path, img: &ImageSidecar) -> Result<bool> {
    let (Some(y), Some(z)) = (&img.y, &img.z) else {
        return Ok(false);
    };
    let fresh = encode_png(&generator.render(y, z)?)?;
    Ok(fs::read(pairs_dir.join(&img.png))? == fresh)
}

/// Re-renders archived pairs from their stored `(y, z)` and compares PNG
/// bytes. With `sample = Some(n)`, checks a seeded random subset of `n`.
pub fn replay_dir(dir: &Path, sample_size: Option<usize>, sample_seed: u64) -> Result<ReplayReport> {
    let generator = load_config(dir)?.world.generator()?;
    let all = list_sidecars(dir)?;
    let (replayable, skipped): (Vec<_>, Vec<_>) =
        all.into_iter().partition(|p| p.first.y.is_some() && p.second.y.is_some());
    let chosen: Vec<&PairSidecar> = match sample_size {
        Some(n) if n < replayable.len() => {
            let mut rng = seed::rng(seed::derive(sample_seed, &["replay"]));
            let mut idx = sample(&mut rng, replayable.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &replayable[i]).collect()
        }
        _ => replayable.iter().collect(),
    };
    let pairs_dir = dir.join("pairs");
    let mut report = ReplayReport {
        skipped: skipped.len(),
        ..ReplayReport::default()
    };
    for p in chosen {
        report.checked += 1;
        let ok = replay_image(&generator, &pairs_dir, &p.first)? && replay_image(&generator, &pairs_dir, &p.second)?;
        if !ok {
            report.mismatches.push(p.id.clone());
        }
    }
    Ok(report)
}

/// Probe-seed trajectory of one batch as a strip: image A on top, image B
/// below, one column per recorded epoch.
pub fn trace_strip(generator: &GeneratorSpec, points: &[TracePoint]) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::Invalid("empty trace".into()));
    }
    let s = generator.image_side;
    let w = s * points.len();
    let mut data = vec![0.0; 2 * s * w];
    for (k, p) in points.iter().enumerate() {
        let imgs = [
            generator.render(&p.params.y_a, &p.params.z_a)?,
            generator.render(&p.params.y_b, &p.params.z_b)?,
        ];
        for (half, img) in imgs.iter().enumerate() {
            for r in 0..s {
                let row = (half * s + r) * w + k * s;
                data[row..row + s].copy_from_slice(img.row_slice(r));
            }
        }
    }
    Tensor::new(2 * s, w, data)
}
