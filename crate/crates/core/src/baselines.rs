//! Training-set augmentation strategies and the shared labeling driver.
//!
//! Synthetic strategies (adversarial control, random control, semantic
//! jitter) produce unlabeled candidates from a [`CandidateSource`];
//! [`fill_budget`] labels them until the accepted-label budget is met,
//! replenishing after rejections. Jitter and pseudo pairs carry their labels
//! from the start.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::control::{sample_seeds, ControlModel, ControlParams};
use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::oracle::{annotate, Decision, OracleConfig};
use crate::pairs::{LabeledPair, Order, PairImage, Provenance};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;
use crate::world::{sample_pairs, WorldImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Real,
    RealPlus,
    Jitter,
    SemanticJitter,
    RandomSynthesis,
    Attic,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Real,
        Strategy::RealPlus,
        Strategy::Jitter,
        Strategy::SemanticJitter,
        Strategy::RandomSynthesis,
        Strategy::Attic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Real => "real",
            Strategy::RealPlus => "real_plus",
            Strategy::Jitter => "jitter",
            Strategy::SemanticJitter => "semantic_jitter",
            Strategy::RandomSynthesis => "random_synthesis",
            Strategy::Attic => "attic",
        }
    }

    /// Whether candidates need an annotator (or auto-labeling).
    pub fn is_synthetic(self) -> bool {
        matches!(self, Strategy::SemanticJitter | Strategy::RandomSynthesis | Strategy::Attic)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ranges for independent per-image jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterRange {
    /// Maximum shift in pixels along each axis.
    pub translate_px: f64,
    pub scale: [f64; 2],
    pub rotate_deg: f64,
    pub contrast: [f64; 2],
    /// Maximum absolute brightness offset (grayscale stand-in for color jitter).
    pub brightness: f64,
}

impl Default for JitterRange {
    fn default() -> Self {
        Self {
            translate_px: 3.0,
            scale: [0.9, 1.1],
            rotate_deg: 10.0,
            contrast: [0.8, 1.2],
            brightness: 0.1,
        }
    }
}

impl JitterRange {
    pub fn none() -> Self {
        Self {
            translate_px: 0.0,
            scale: [1.0, 1.0],
            rotate_deg: 0.0,
            contrast: [1.0, 1.0],
            brightness: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterTransform {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rotate_rad: f64,
    pub contrast: f64,
    pub brightness: f64,
}

impl JitterTransform {
    pub const IDENTITY: Self = Self {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
        rotate_rad: 0.0,
        contrast: 1.0,
        brightness: 0.0,
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            dx,
            dy,
            ..Self::IDENTITY
        }
    }

    pub fn sample(range: &JitterRange, rng: &mut Rng) -> Self {
        let sym = |rng: &mut Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let span = |rng: &mut Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Self {
            dx: sym(rng, range.translate_px),
            dy: sym(rng, range.translate_px),
            scale: span(rng, range.scale),
            rotate_rad: sym(rng, range.rotate_deg) * PI / 180.0,
            contrast: span(rng, range.contrast),
            brightness: sym(rng, range.brightness),
        }
    }

    /// Applies the transform about the image centre with bilinear sampling
    /// and edge-replicated borders. `dx` moves content right, `dy` down.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let (h, w) = (image.rows(), image.cols());
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.rotate_rad.sin_cos();
        let sample = |r: f64, c: f64| -> f64 {
            let r = r.clamp(0.0, (h - 1) as f64);
            let c = c.clamp(0.0, (w - 1) as f64);
            let (r0, c0) = (r.floor() as usize, c.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (fr, fc) = (r - r0 as f64, c - c0 as f64);
            let top = image.get(r0, c0) * (1.0 - fc) + image.get(r0, c1) * fc;
            let bottom = image.get(r1, c0) * (1.0 - fc) + image.get(r1, c1) * fc;
            top * (1.0 - fr) + bottom * fr
        };
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                // Inverse map: undo translation, then rotation, then scale.
                let (u, v) = (j as f64 - cx - self.dx, i as f64 - cy - self.dy);
                let (su, sv) = ((cos * u + sin * v) / self.scale, (cos * v - sin * u) / self.scale);
                let p = sample(sv + cy, su + cx);
                let p = p + (self.contrast - 1.0) * (p - 0.5) + self.brightness;
                out.push(p.clamp(0.0, 1.0));
            }
        }
        Tensor::new(h, w, out).expect("sized")
    }
}

/// Jittered copies of randomly chosen source pairs. Both images are
/// transformed independently; the label is inherited.
pub fn jitter_pairs(source: &[LabeledPair], budget: usize, range: &JitterRange, seed: u64) -> Result<Vec<LabeledPair>> {
    if source.is_empty() {
        return Err(Error::Invalid("jitter needs at least one source pair".into()));
    }
    let mut rng = seed::rng(seed::derive(seed, &["jitter"]));
    let mut out = Vec::with_capacity(budget);
    for k in 0..budget {
        let src = source.choose(&mut rng).expect("non-empty");
        let mut jitter_image = |img: &PairImage, tag: &str| PairImage {
            id: format!("{}~j{k}{tag}", img.id),
            pixels: Arc::new(JitterTransform::sample(range, &mut rng).apply(&img.pixels)),
            y: None,
            z: None,
        };
        let first = jitter_image(&src.first, "a");
        let second = jitter_image(&src.second, "b");
        out.push(LabeledPair {
            id: format!("jitter-{k}-{}", src.id),
            first,
            second,
            attribute: src.attribute,
            order: src.order,
            provenance: Provenance::Jitter,
            votes: None,
        });
    }
    Ok(out)
}

/// Pseudo pairs from the generator-statistics pool, ordered by true strength.
pub fn real_plus_pairs(stats_pool: &[WorldImage], attr: usize, budget: usize, tau: f64, seed: u64) -> Result<Vec<LabeledPair>> {
    if budget == 0 {
        return Ok(Vec::new());
    }
    Ok(sample_pairs(stats_pool, attr, budget, tau, seed, Provenance::Pseudo, "pseudo")?.labeled)
}

/// Semantic-jitter offsets used when none are configured.
pub const DEFAULT_SEMANTIC_OFFSETS: [f64; 6] = [-1.0, -0.6, -0.3, 0.3, 0.6, 1.0];

/// Produces unlabeled candidate pairs on demand.
pub trait CandidateSource: Send {
    fn next_candidates(&mut self, n: usize) -> Result<Vec<LabeledPair>>;
}

fn rendered_pair(
    generator: &GeneratorSpec,
    id: String,
    attr: usize,
    params: &ControlParams,
    first_pixels: Option<Arc<Tensor>>,
) -> Result<LabeledPair> {
    let side = generator.image_side;
    let first_pixels = match first_pixels {
        Some(p) => p,
        None => Arc::new(generator.render(&params.y_a, &params.z_a)?),
    };
    debug_assert_eq!(first_pixels.shape(), [side, side]);
    Ok(LabeledPair {
        first: PairImage {
            id: format!("{id}-a"),
            pixels: first_pixels,
            y: Some(params.y_a.clone()),
            z: Some(params.z_a.clone()),
        },
        second: PairImage {
            id: format!("{id}-b"),
            pixels: Arc::new(generator.render(&params.y_b, &params.z_b)?),
            y: Some(params.y_b.clone()),
            z: Some(params.z_b.clone()),
        },
        id,
        attribute: attr,
        order: None,
        provenance: Provenance::SyntheticAuto,
        votes: None,
    })
}

/// Candidates from a control network: seeds are drawn in chunks of
/// `chunk` so batch normalization always sees the same batch size.
pub struct ControlSource {
    pub control: ControlModel,
    pub generator: GeneratorSpec,
    pub attribute: usize,
    pub chunk: usize,
    pub prefix: String,
    rng: Rng,
    buffer: VecDeque<ControlParams>,
    issued: usize,
}

impl ControlSource {
    pub fn new(
        control: ControlModel,
        generator: GeneratorSpec,
        attribute: usize,
        chunk: usize,
        prefix: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            control,
            generator,
            attribute,
            chunk: chunk.max(2),
            prefix: prefix.into(),
            rng: seed::rng(seed::derive(seed, &["control-source"])),
            buffer: VecDeque::new(),
            issued: 0,
        }
    }
}

impl CandidateSource for ControlSource {
    fn next_candidates(&mut self, n: usize) -> Result<Vec<LabeledPair>> {
        while self.buffer.len() < n {
            let q = sample_seeds(self.chunk, self.control.seed_dim(), &mut self.rng)?;
            self.buffer.extend(self.control.generate(&q)?);
        }
        let mut out = Vec::with_capacity(n);
        for params in self.buffer.drain(..n) {
            let id = format!("{}-{:05}", self.prefix, self.issued);
            self.issued += 1;
            out.push(rendered_pair(&self.generator, id, self.attribute, &params, None)?);
        }
        Ok(out)
    }
}

/// Semantic jitter: an anchor image and a copy with only attribute `a`
/// moved by a fixed offset.
pub struct SemanticJitterSource {
    pub anchors: Vec<WorldImage>,
    pub generator: GeneratorSpec,
    pub attribute: usize,
    pub offsets: Vec<f64>,
    pub prefix: String,
    rng: Rng,
    issued: usize,
}

impl SemanticJitterSource {
    pub fn new(
        anchors: Vec<WorldImage>,
        generator: GeneratorSpec,
        attribute: usize,
        offsets: Vec<f64>,
        prefix: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if anchors.is_empty() || offsets.is_empty() {
            return Err(Error::Invalid("semantic jitter needs anchors and offsets".into()));
        }
        Ok(Self {
            anchors,
            generator,
            attribute,
            offsets,
            prefix: prefix.into(),
            rng: seed::rng(seed::derive(seed, &["semantic-jitter"])),
            issued: 0,
        })
    }
}

impl CandidateSource for SemanticJitterSource {
    fn next_candidates(&mut self, n: usize) -> Result<Vec<LabeledPair>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let anchor = self.anchors.choose(&mut self.rng).expect("non-empty");
            let delta = *self.offsets.choose(&mut self.rng).expect("non-empty");
            let mut moved = anchor.true_y.clone();
            moved[self.attribute] += delta;
            let params = ControlParams {
                y_a: anchor.true_y.clone(),
                z_a: anchor.true_z.clone(),
                y_b: moved,
                z_b: anchor.true_z.clone(),
            };
            let id = format!("{}-{:05}", self.prefix, self.issued);
            self.issued += 1;
            out.push(rendered_pair(
                &self.generator,
                id,
                self.attribute,
                &params,
                Some(Arc::clone(&anchor.pixels)),
            )?);
        }
        Ok(out)
    }
}

/// How candidate pairs get their order.
#[derive(Clone, Debug)]
pub enum Labeler {
    /// Order by the generating strengths; exact ties are rejected.
    Auto,
    /// Simulated annotators with majority aggregation.
    Oracle(OracleConfig),
}

/// True strength gap `y_first[a] − y_second[a]` of a rendered candidate.
pub fn candidate_gap(pair: &LabeledPair) -> Result<f64> {
    match (&pair.first.y, &pair.second.y) {
        (Some(a), Some(b)) => Ok(a[pair.attribute] - b[pair.attribute]),
        _ => Err(Error::Invalid(format!("pair {} has no generator inputs", pair.id))),
    }
}

/// Labels one candidate; `None` means rejected.
pub fn label_candidate(mut pair: LabeledPair, labeler: &Labeler, rng: &mut Rng) -> Result<Option<LabeledPair>> {
    let gap = candidate_gap(&pair)?;
    match labeler {
        Labeler::Auto => Ok(Order::from_difference(gap).map(|o| {
            pair.order = Some(o);
            pair.provenance = Provenance::SyntheticAuto;
            pair
        })),
        Labeler::Oracle(cfg) => {
            let (label, votes) = annotate(&pair.id, gap, cfg, rng)?;
            let order = match label.decision {
                Decision::AGreater => Order::FirstGreater,
                Decision::BGreater => Order::SecondGreater,
                Decision::Rejected => return Ok(None),
            };
            pair.order = Some(order);
            pair.provenance = Provenance::SyntheticHuman;
            pair.votes = Some(votes);
            Ok(Some(pair))
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Filled {
    pub accepted: Vec<LabeledPair>,
    pub asked: usize,
    pub rejected: usize,
}

impl Filled {
    pub fn rejection_rate(&self) -> f64 {
        if self.asked == 0 {
            0.0
        } else {
            self.rejected as f64 / self.asked as f64
        }
    }
}

/// Labels candidates until exactly `budget` are accepted. Gives up after
/// `max_asked` candidates.
pub fn fill_budget(
    source: &mut dyn CandidateSource,
    labeler: &Labeler,
    budget: usize,
    max_asked: usize,
    seed: u64,
) -> Result<Filled> {
    let mut rng = seed::rng(seed::derive(seed, &["labeler"]));
    let mut filled = Filled::default();
    while filled.accepted.len() < budget {
        let need = budget - filled.accepted.len();
        if filled.asked + need > max_asked {
            return Err(Error::Invalid(format!(
                "label budget {budget} not met after {} candidates ({} accepted)",
                filled.asked,
                filled.accepted.len()
            )));
        }
        for cand in source.next_candidates(need)? {
            filled.asked += 1;
            match label_candidate(cand, labeler, &mut rng)? {
                Some(p) => filled.accepted.push(p),
                None => filled.rejected += 1,
            }
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{compute_scaling_stats, ControlArch};
    use crate::oracle::NoiseModel;
    use crate::world::{sample_pool, WorldConfig};

    fn world() -> (WorldConfig, Vec<WorldImage>) {
        let cfg = WorldConfig {
            pool_size: 40,
            ..WorldConfig::default()
        };
        let pool = sample_pool(&cfg, 3).unwrap();
        (cfg, pool)
    }

    #[test]
    fn zero_jitter_is_identity() {
        let (_, pool) = world();
        let img = &pool[0].pixels;
        assert_eq!(&JitterTransform::IDENTITY.apply(img), img.as_ref());
        let pairs = sample_pairs(&pool, 0, 5, 0.15, 1, Provenance::Real, "real").unwrap().labeled;
        for p in jitter_pairs(&pairs, 10, &JitterRange::none(), 2).unwrap() {
            let src = pairs.iter().find(|s| p.id.ends_with(&s.id)).unwrap();
            assert_eq!(p.first.pixels, src.first.pixels);
            assert_eq!(p.second.pixels, src.second.pixels);
            assert_eq!(p.order, src.order);
        }
    }

    #[test]
    fn jitter_keeps_labels() {
        let (_, pool) = world();
        let pairs = sample_pairs(&pool, 1, 8, 0.15, 1, Provenance::Real, "real").unwrap().labeled;
        let jittered = jitter_pairs(&pairs, 30, &JitterRange::default(), 5).unwrap();
        assert_eq!(jittered.len(), 30);
        for p in &jittered {
            let src = pairs.iter().find(|s| p.id.ends_with(&s.id)).unwrap();
            assert_eq!(p.order, src.order);
            assert_eq!(p.provenance, Provenance::Jitter);
        }
        assert!(jitter_pairs(&[], 1, &JitterRange::default(), 1).is_err());
    }

    #[test]
    fn translation_roundtrip_restores_interior() {
        let (_, pool) = world();
        let img = &pool[3].pixels;
        let there = JitterTransform::translation(2.0, -1.0).apply(img);
        let back = JitterTransform::translation(-2.0, 1.0).apply(&there);
        let s = img.rows();
        for i in 1..s - 1 {
            for j in 2..s - 2 {
                assert_eq!(back.get(i, j), img.get(i, j), "({i},{j})");
            }
        }
    }

    #[test]
    fn real_plus_labels_follow_truth() {
        let (_, pool) = world();
        assert!(real_plus_pairs(&pool, 0, 0, 0.15, 1).unwrap().is_empty());
        let pairs = real_plus_pairs(&pool, 2, 25, 0.15, 1).unwrap();
        for p in &pairs {
            let d = p.first.y.as_ref().unwrap()[2] - p.second.y.as_ref().unwrap()[2];
            assert_eq!(Order::from_difference(d), p.order);
            assert_eq!(p.provenance, Provenance::Pseudo);
        }
    }

    #[test]
    fn semantic_jitter_moves_one_coordinate() {
        let (cfg, pool) = world();
        let g = cfg.generator().unwrap();
        let mut src = SemanticJitterSource::new(pool.clone(), g.clone(), 1, DEFAULT_SEMANTIC_OFFSETS.to_vec(), "sj", 4).unwrap();
        for p in src.next_candidates(20).unwrap() {
            let (ya, yb) = (p.first.y.as_ref().unwrap(), p.second.y.as_ref().unwrap());
            for j in 0..4 {
                if j == 1 {
                    assert_ne!(ya[j], yb[j]);
                } else {
                    assert_eq!(ya[j], yb[j]);
                }
            }
            assert_eq!(p.first.z, p.second.z);
        }
    }

    #[test]
    fn semantic_zero_offset_is_rejected_and_counted() {
        let (cfg, pool) = world();
        let g = cfg.generator().unwrap();
        let mut src = SemanticJitterSource::new(pool.clone(), g.clone(), 0, vec![0.0], "sj", 4).unwrap();
        let oracle = Labeler::Oracle(OracleConfig::default());
        let err = fill_budget(&mut src, &oracle, 3, 30, 1).unwrap_err();
        assert!(err.to_string().contains("not met"));
        let mut src = SemanticJitterSource::new(pool.clone(), g.clone(), 0, vec![0.0], "sj", 4).unwrap();
        let c = src.next_candidates(1).unwrap().remove(0);
        assert!(label_candidate(c, &oracle, &mut seed::rng(1)).unwrap().is_none());
    }

    #[test]
    fn semantic_large_offset_labels_in_offset_direction() {
        let (cfg, pool) = world();
        let g = cfg.generator().unwrap();
        let mut src = SemanticJitterSource::new(pool.clone(), g.clone(), 2, vec![0.6], "sj", 8).unwrap();
        let oracle = Labeler::Oracle(OracleConfig {
            noise: NoiseModel::None,
            ..OracleConfig::default()
        });
        let filled = fill_budget(&mut src, &oracle, 50, 50, 3).unwrap();
        assert_eq!(filled.rejected, 0);
        // y_b = y_a + 0.6, so the second image is always greater.
        assert!(filled.accepted.iter().all(|p| p.order == Some(Order::SecondGreater)));
    }

    #[test]
    fn random_synthesis_is_deterministic_and_fills_budget() {
        let (cfg, pool) = world();
        let g = cfg.generator().unwrap();
        let stats = compute_scaling_stats(&pool.iter().map(|i| i.true_y.clone()).collect::<Vec<_>>()).unwrap();
        let control = ControlModel::new(&ControlArch::default(), stats, cfg.latent_dim, 7).unwrap();
        let oracle = Labeler::Oracle(OracleConfig::default());
        let run = || {
            let mut src = ControlSource::new(control.clone(), g.clone(), 0, 16, "rs", 9);
            fill_budget(&mut src, &oracle, 20, 1000, 2).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.accepted.len(), 20);
        assert_eq!(a.asked, 20 + a.rejected);
        assert_eq!(a.accepted, b.accepted);
    }
}
