//! Versioned JSON weight dumps for rankers and control networks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{ControlModel, ScalingStats};
use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp};
use crate::ranker::RankerModel;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ranker,
    Control,
}

/// Flat weight dump. Parameters are listed as `w0, b0, w1, b1, …`; a
/// control checkpoint lists branch A's parameters followed by branch B's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub attribute: Option<usize>,
    pub seed: u64,
    pub shapes: Vec<[usize; 2]>,
    /// Row-major parameter arrays, one per entry of `shapes`.
    pub weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingStats>,
}

fn dump(params: &[&Tensor]) -> (Vec<[usize; 2]>, Vec<Vec<f64>>) {
    params.iter().map(|p| (p.shape(), p.data().to_vec())).unzip()
}

fn mlp_from(shapes: &[[usize; 2]], weights: &[Vec<f64>]) -> Result<Mlp> {
    if shapes.is_empty() || shapes.len() % 2 != 0 || shapes.len() != weights.len() {
        return Err(Error::Checkpoint("parameter list must be weight/bias pairs".into()));
    }
    let mut layers = Vec::with_capacity(shapes.len() / 2);
    for k in (0..shapes.len()).step_by(2) {
        let t = |i: usize| Tensor::new(shapes[i][0], shapes[i][1], weights[i].clone());
        let (weight, bias) = (t(k)?, t(k + 1)?);
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::Checkpoint(format!("layer {} bias shape mismatch", k / 2)));
        }
        if let Some(prev) = layers.last().map(Dense::outputs) {
            if prev != weight.rows() {
                return Err(Error::Checkpoint(format!("layer {} input width mismatch", k / 2)));
            }
        }
        layers.push(Dense { weight, bias });
    }
    Ok(Mlp { layers })
}

impl Checkpoint {
    pub fn from_ranker(model: &RankerModel) -> Self {
        let (shapes, weights) = dump(&model.network.params());
        Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Ranker,
            attribute: Some(model.attribute),
            seed: model.seed,
            shapes,
            weights,
            image_side: Some(model.image_side),
            latent_dim: None,
            scaling: None,
        }
    }

    pub fn from_control(model: &ControlModel) -> Self {
        let (shapes, weights) = dump(&model.params());
        Self {
            format_version: FORMAT_VERSION,
            kind: ModelKind::Control,
            attribute: None,
            seed: model.seed,
            shapes,
            weights,
            image_side: None,
            latent_dim: Some(model.latent_dim),
            scaling: Some(model.scaling.clone()),
        }
    }

    fn check(&self, kind: ModelKind) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format_version {}", self.format_version)));
        }
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn to_ranker(&self) -> Result<RankerModel> {
        self.check(ModelKind::Ranker)?;
        let network = mlp_from(&self.shapes, &self.weights)?;
        let side = self.image_side.ok_or_else(|| Error::Checkpoint("missing image_side".into()))?;
        if network.widths()[0] != side * side || *network.widths().last().expect("non-empty") != 1 {
            return Err(Error::Checkpoint("ranker widths do not match image_side".into()));
        }
        Ok(RankerModel {
            network,
            attribute: self.attribute.ok_or_else(|| Error::Checkpoint("missing attribute".into()))?,
            image_side: side,
            seed: self.seed,
        })
    }

    pub fn to_control(&self) -> Result<ControlModel> {
        self.check(ModelKind::Control)?;
        let half = self.shapes.len() / 2;
        if self.shapes.len() % 4 != 0 {
            return Err(Error::Checkpoint("control needs two equal branches".into()));
        }
        let branch_a = mlp_from(&self.shapes[..half], &self.weights[..half])?;
        let branch_b = mlp_from(&self.shapes[half..], &self.weights[half..])?;
        if branch_a.widths() != branch_b.widths() {
            return Err(Error::Checkpoint("control branches differ in shape".into()));
        }
        let scaling = self.scaling.clone().ok_or_else(|| Error::Checkpoint("missing scaling".into()))?;
        let latent_dim = self.latent_dim.ok_or_else(|| Error::Checkpoint("missing latent_dim".into()))?;
        let n = *branch_a.widths().last().expect("non-empty");
        if scaling.mean.len() != n || scaling.std.len() != n || branch_a.widths()[0] != 2 * latent_dim {
            return Err(Error::Checkpoint("control widths do not match scaling/latent_dim".into()));
        }
        Ok(ControlModel {
            branch_a,
            branch_b,
            scaling,
            latent_dim,
            seed: self.seed,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
