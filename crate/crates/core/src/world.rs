//! The procedural attribute world: a curated pool of "real" images with
//! known attribute strengths, and the real and held-out pair sets drawn
//! from it.
//!
//! Attributes are drawn from a correlated Gaussian truncated to a box that
//! covers only part of what the generator can render. Nuisance latents are
//! standard normal.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::generator::GeneratorSpec;
use crate::imageio;
use crate::pairs::{LabeledPair, Order, PairImage, Provenance};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_attributes: usize,
    pub latent_dim: usize,
    pub image_side: usize,
    pub pool_size: usize,
    pub attr_mean: Vec<f64>,
    /// Row-major `N×N` covariance.
    pub attr_cov: Vec<Vec<f64>>,
    /// Per-attribute `[lo, hi]`.
    pub truncation: Vec<[f64; 2]>,
    pub tau_discard: f64,
    /// Ceiling on the share of eligible pairs with `|Δ| < 2·tau_discard`.
    pub fine_grained_ceiling: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::with_dims(4, 4, 32)
    }
}

impl WorldConfig {
    pub const DEFAULT_CORRELATION: f64 = 0.6;

    /// Zero mean, unit variance, pairwise correlation 0.6, box `[-1, 1]`.
    pub fn with_dims(num_attributes: usize, latent_dim: usize, image_side: usize) -> Self {
        let n = num_attributes;
        let attr_cov = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 1.0 } else { Self::DEFAULT_CORRELATION })
                    .collect()
            })
            .collect();
        Self {
            num_attributes,
            latent_dim,
            image_side,
            pool_size: 1000,
            attr_mean: vec![0.0; n],
            attr_cov,
            truncation: vec![[-1.0, 1.0]; n],
            tau_discard: 0.15,
            fine_grained_ceiling: 0.3,
        }
    }

    pub fn generator(&self) -> Result<GeneratorSpec> {
        GeneratorSpec::new(self.image_side, self.num_attributes, self.latent_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator()?;
        let n = self.num_attributes;
        if self.attr_mean.len() != n {
            return Err(Error::config("world.attr_mean", format!("expected {n} entries")));
        }
        if self.attr_cov.len() != n || self.attr_cov.iter().any(|r| r.len() != n) {
            return Err(Error::config("world.attr_cov", format!("expected a {n}x{n} matrix")));
        }
        for i in 0..n {
            for j in 0..n {
                if (self.attr_cov[i][j] - self.attr_cov[j][i]).abs() > 1e-12 {
                    return Err(Error::config("world.attr_cov", "not symmetric"));
                }
            }
        }
        cholesky(&self.attr_cov)
            .ok_or_else(|| Error::config("world.attr_cov", "not positive definite"))?;
        if self.truncation.len() != n {
            return Err(Error::config("world.truncation", format!("expected {n} intervals")));
        }
        for (j, [lo, hi]) in self.truncation.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::config(format!("world.truncation[{j}]"), "empty interval"));
            }
        }
        if !(self.tau_discard >= 0.0) {
            return Err(Error::config("world.tau_discard", "must be >= 0"));
        }
        Ok(())
    }
}

/// Lower Cholesky factor, or `None` if `a` is not positive definite.
pub fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldImage {
    pub id: String,
    pub pixels: Arc<Tensor>,
    pub true_y: Vec<f64>,
    pub true_z: Vec<f64>,
}

impl WorldImage {
    pub fn as_pair_image(&self) -> PairImage {
        PairImage {
            id: self.id.clone(),
            pixels: Arc::clone(&self.pixels),
            y: Some(self.true_y.clone()),
            z: Some(self.true_z.clone()),
        }
    }
}

const MAX_TRUNCATION_TRIES: usize = 1000;
const RENDER_CHUNK: usize = 64;

/// Draws `pool_size` images. Attributes come from the truncated Gaussian
/// (rejection sampling, clipped to the box if it keeps missing).
pub fn sample_pool(config: &WorldConfig, seed: u64) -> Result<Vec<WorldImage>> {
    config.validate()?;
    let generator = config.generator()?;
    let chol = cholesky(&config.attr_cov).expect("validated");
    let (n, m) = (config.num_attributes, config.latent_dim);
    let mut rng = seed::rng(seed::derive(seed, &["world", "pool"]));

    let mut ys = Vec::with_capacity(config.pool_size);
    let mut zs = Vec::with_capacity(config.pool_size);
    for _ in 0..config.pool_size {
        let mut y = vec![0.0; n];
        for attempt in 0..MAX_TRUNCATION_TRIES {
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = config.attr_mean[i] + (0..=i).map(|k| chol[i][k] * eps[k]).sum::<f64>();
            }
            let inside = y
                .iter()
                .zip(&config.truncation)
                .all(|(v, [lo, hi])| v >= lo && v <= hi);
            if inside {
                break;
            }
            if attempt + 1 == MAX_TRUNCATION_TRIES {
                for (v, [lo, hi]) in y.iter_mut().zip(&config.truncation) {
                    *v = v.clamp(*lo, *hi);
                }
            }
        }
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        ys.push(y);
        zs.push(z);
    }

    let chunks: Vec<(usize, usize)> = (0..config.pool_size)
        .step_by(RENDER_CHUNK)
        .map(|s| (s, (s + RENDER_CHUNK).min(config.pool_size)))
        .collect();
    let rendered = Exec::default().map(&chunks, |&(s, e)| {
        let yt = Tensor::from_rows(&ys[s..e])?;
        let zt = Tensor::from_rows(&zs[s..e])?;
        generator.render_rows(&yt, &zt)
    });

    let side = config.image_side;
    let mut pool = Vec::with_capacity(config.pool_size);
    for (chunk, images) in chunks.iter().zip(rendered) {
        let images = images?;
        for (r, idx) in (chunk.0..chunk.1).enumerate() {
            let pixels = Tensor::new(side, side, images.row_slice(r).to_vec())?;
            pool.push(WorldImage {
                id: format!("w{idx:05}"),
                pixels: Arc::new(pixels),
                true_y: ys[idx].clone(),
                true_z: zs[idx].clone(),
            });
        }
    }
    Ok(pool)
}

/// Disjoint parts of a pool by role: 60% generator statistics / pseudo
/// pairs, 20% labeled real pairs, 20% held-out test pairs.
#[derive(Clone, Debug)]
pub struct PoolSplit {
    pub stats: Vec<WorldImage>,
    pub labeled: Vec<WorldImage>,
    pub test: Vec<WorldImage>,
}

pub fn split_pool(pool: Vec<WorldImage>) -> PoolSplit {
    let n = pool.len();
    let stats_end = n * 6 / 10;
    let labeled_end = stats_end + n * 2 / 10;
    let mut it = pool.into_iter();
    let stats = it.by_ref().take(stats_end).collect();
    let labeled = it.by_ref().take(labeled_end - stats_end).collect();
    let test = it.collect();
    PoolSplit { stats, labeled, test }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealPair {
    pub first: String,
    pub second: String,
    pub order: Order,
}

#[derive(Clone, Debug)]
pub struct RealPairSet {
    pub attribute: usize,
    pub pairs: Vec<RealPair>,
    /// The same pairs with images attached, ready for training or evaluation.
    pub labeled: Vec<LabeledPair>,
}

impl RealPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_ids(&self) -> std::collections::BTreeSet<&str> {
        self.pairs
            .iter()
            .flat_map(|p| [p.first.as_str(), p.second.as_str()])
            .collect()
    }
}

fn eligible_pairs(pool: &[WorldImage], attr: usize, tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            let d = pool[i].true_y[attr] - pool[j].true_y[attr];
            if d != 0.0 && d.abs() >= tau {
                out.push((i, j));
            }
        }
    }
    out
}

/// Samples `n` distinct eligible pairs (`|Δy[attr]| ≥ tau`) and labels them
/// by the true ordering. Presentation order within a pair is randomized.
pub fn make_real_pairs(pool: &[WorldImage], attr: usize, n: usize, tau: f64, seed: u64) -> Result<RealPairSet> {
    sample_pairs(pool, attr, n, tau, seed, Provenance::Real, "real")
}

/// As [`make_real_pairs`], intended for a held-out pool.
pub fn make_test_pairs(pool: &[WorldImage], attr: usize, n: usize, tau: f64, seed: u64) -> Result<RealPairSet> {
    sample_pairs(pool, attr, n, tau, seed, Provenance::Real, "test")
}

pub(crate) fn sample_pairs(
    pool: &[WorldImage],
    attr: usize,
    n: usize,
    tau: f64,
    seed: u64,
    provenance: Provenance,
    label: &str,
) -> Result<RealPairSet> {
    if pool.is_empty() {
        return Err(Error::Invalid("pool is empty".into()));
    }
    let dims = pool[0].true_y.len();
    if attr >= dims {
        return Err(Error::Invalid(format!("attribute {attr} out of range 0..{dims}")));
    }
    let eligible = eligible_pairs(pool, attr, tau);
    if eligible.len() < n {
        return Err(Error::InsufficientPairs {
            requested: n,
            achievable: eligible.len(),
        });
    }
    let mut rng = seed::rng(seed::derive(seed, &["pairs", label]));
    let chosen = sample(&mut rng, eligible.len(), n);
    let mut pairs = Vec::with_capacity(n);
    let mut labeled = Vec::with_capacity(n);
    for k in chosen.iter() {
        let (mut i, mut j) = eligible[k];
        if rng.random_bool(0.5) {
            std::mem::swap(&mut i, &mut j);
        }
        let (a, b) = (&pool[i], &pool[j]);
        let order = Order::from_difference(a.true_y[attr] - b.true_y[attr]).expect("eligible pairs are not ties");
        pairs.push(RealPair {
            first: a.id.clone(),
            second: b.id.clone(),
            order,
        });
        labeled.push(LabeledPair {
            id: format!("{label}-{}-{}", a.id, b.id),
            first: a.as_pair_image(),
            second: b.as_pair_image(),
            attribute: attr,
            order: Some(order),
            provenance,
            votes: None,
        });
    }
    Ok(RealPairSet {
        attribute: attr,
        pairs,
        labeled,
    })
}

/// Share of eligible pairs whose gap lies in `[tau, 2·tau)`.
pub fn fine_grained_fraction(pool: &[WorldImage], attr: usize, tau: f64) -> f64 {
    let eligible = eligible_pairs(pool, attr, tau);
    if eligible.is_empty() {
        return 0.0;
    }
    let fine = eligible
        .iter()
        .filter(|&&(i, j)| (pool[i].true_y[attr] - pool[j].true_y[attr]).abs() < 2.0 * tau)
        .count();
    fine as f64 / eligible.len() as f64
}

#[derive(Serialize)]
struct Sidecar<'a> {
    id: &'a str,
    y: &'a [f64],
    z: &'a [f64],
}

/// Writes `<id>.png` and `<id>.json` (`{id, y, z}`) for every image.
pub fn export_pool(pool: &[WorldImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for img in pool {
        imageio::write_png(&dir.join(format!("{}.png", img.id)), &img.pixels)?;
        let sidecar = Sidecar {
            id: &img.id,
            y: &img.true_y,
            z: &img.true_z,
        };
        std::fs::write(dir.join(format!("{}.json", img.id)), serde_json::to_vec_pretty(&sidecar)?)?;
    }
    Ok(())
}
