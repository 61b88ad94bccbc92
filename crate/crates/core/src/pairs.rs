//! Labeled image pairs, the unit of training data for a ranker.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::oracle::Vote;
use crate::tensor::Tensor;

/// Which image of a pair shows more of the attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    FirstGreater,
    SecondGreater,
}

impl Order {
    /// Ordering implied by `a − b`; `None` on an exact tie.
    pub fn from_difference(delta: f64) -> Option<Self> {
        if delta > 0.0 {
            Some(Order::FirstGreater)
        } else if delta < 0.0 {
            Some(Order::SecondGreater)
        } else {
            None
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Order::FirstGreater => Order::SecondGreater,
            Order::SecondGreater => Order::FirstGreater,
        }
    }

    /// `+1` when the first image is greater.
    pub fn sign(self) -> f64 {
        match self {
            Order::FirstGreater => 1.0,
            Order::SecondGreater => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    SyntheticHuman,
    SyntheticAuto,
    Pseudo,
    Jitter,
}

/// One image of a pair plus what is known about how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct PairImage {
    pub id: String,
    pub pixels: Arc<Tensor>,
    /// Generator inputs, when the image was rendered from known `(y, z)`.
    pub y: Option<Vec<f64>>,
    pub z: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub id: String,
    pub first: PairImage,
    pub second: PairImage,
    pub attribute: usize,
    /// `None` marks a pair nobody has ordered yet; trainers reject it.
    pub order: Option<Order>,
    pub provenance: Provenance,
    /// Individual annotator votes behind a human label.
    pub votes: Option<Vec<Vote>>,
}

impl LabeledPair {
    /// Both images are rendered from stored generator inputs.
    pub fn is_replayable(&self) -> bool {
        self.first.y.is_some() && self.first.z.is_some() && self.second.y.is_some() && self.second.z.is_some()
    }
}
