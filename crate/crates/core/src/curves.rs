//! Learning-curve tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::Strategy;
use crate::error::{Error, Result};
use crate::experiment::ExperimentRecord;

pub const CSV_HEADER: &str = "strategy,attribute,batch,labels_used,accuracy,gain_vs_real,rejection_rate,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: Strategy,
    pub attribute: usize,
    pub batch: usize,
    pub labels_used: usize,
    pub accuracy: f64,
    pub gain_vs_real: f64,
    pub rejection_rate: f64,
    pub seed: u64,
}

/// Mean gain of one strategy at one batch, per attribute (`None` = average
/// over attributes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub attribute: Option<usize>,
    pub batch: usize,
    pub mean_gain: f64,
    pub mean_accuracy: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub rows: Vec<CurveRow>,
    pub summary: Vec<SummaryRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn curve_rows(record: &ExperimentRecord) -> Vec<CurveRow> {
    record
        .rows
        .iter()
        .map(|r| CurveRow {
            strategy: record.strategy,
            attribute: record.attribute,
            batch: r.batch,
            labels_used: r.labels_used,
            accuracy: r.accuracy,
            gain_vs_real: r.gain_vs_real,
            rejection_rate: r.rejection_rate,
            seed: record.seed,
        })
        .collect()
}

/// Flattens records into curve rows and averages gains over seeds, then
/// over attributes. The attribute average weights attributes equally.
pub fn emit_curves(records: &[ExperimentRecord]) -> Result<Curves> {
    if records.is_empty() {
        return Err(Error::Invalid("no experiment records".into()));
    }
    let rows: Vec<CurveRow> = records.iter().flat_map(curve_rows).collect();
    let mut per_attr: BTreeMap<(Strategy, usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let e = per_attr.entry((r.strategy, r.batch, r.attribute)).or_default();
        e.0.push(r.gain_vs_real);
        e.1.push(r.accuracy);
    }
    let mut summary = Vec::new();
    let mut averaged: BTreeMap<(Strategy, usize), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for ((strategy, batch, attribute), (gains, accs)) in &per_attr {
        let row = SummaryRow {
            strategy: *strategy,
            attribute: Some(*attribute),
            batch: *batch,
            mean_gain: mean(gains),
            mean_accuracy: mean(accs),
            runs: gains.len(),
        };
        let e = averaged.entry((*strategy, *batch)).or_default();
        e.0.push(row.mean_gain);
        e.1.push(row.mean_accuracy);
        e.2 += row.runs;
        summary.push(row);
    }
    for ((strategy, batch), (gains, accs, runs)) in averaged {
        summary.push(SummaryRow {
            strategy,
            attribute: None,
            batch,
            mean_gain: mean(&gains),
            mean_accuracy: mean(&accs),
            runs,
        });
    }
    Ok(Curves { rows, summary })
}

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.strategy, r.attribute, r.batch, r.labels_used, r.accuracy, r.gain_vs_real, r.rejection_rate, r.seed
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("strategy,attribute,batch,mean_gain,mean_accuracy,runs\n");
        for r in &self.summary {
            let attr = r.attribute.map_or_else(|| "all".to_owned(), |a| a.to_string());
            out.push_str(&format!(
                "{},{attr},{},{},{},{}\n",
                r.strategy, r.batch, r.mean_gain, r.mean_accuracy, r.runs
            ));
        }
        out
    }

    /// Attribute-averaged gain of `strategy` at `batch`.
    pub fn averaged_gain(&self, strategy: Strategy, batch: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.strategy == strategy && r.batch == batch && r.attribute.is_none())
            .map(|r| r.mean_gain)
    }
}

/// Parses a curves CSV written by [`Curves::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Invalid("curves file has an unexpected header".into()));
    }
    let bad = |n: usize| Error::Invalid(format!("curves line {n} is malformed"));
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 2));
            }
            Ok(CurveRow {
                strategy: f[0].parse()?,
                attribute: f[1].parse().map_err(|_| bad(i + 2))?,
                batch: f[2].parse().map_err(|_| bad(i + 2))?,
                labels_used: f[3].parse().map_err(|_| bad(i + 2))?,
                accuracy: f[4].parse().map_err(|_| bad(i + 2))?,
                gain_vs_real: f[5].parse().map_err(|_| bad(i + 2))?,
                rejection_rate: f[6].parse().map_err(|_| bad(i + 2))?,
                seed: f[7].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}
