//! Frozen, differentiable attribute-conditioned image generator.
//!
//! Each image is a single anisotropic Gaussian blob on a background:
//!
//! | input  | controls                                   |
//! |--------|--------------------------------------------|
//! | `y[0]` | size: `r = 0.10 + 0.25·σ(y0)`              |
//! | `y[1]` | brightness: `A = 0.2 + 0.8·σ(y1)`          |
//! | `y[2]` | elongation: `e = 0.9·σ(y2)`                |
//! | `y[3]` | tilt: `θ = π·σ(y3) − π/2`                  |
//! | `z[0]`, `z[1]` | centre: `0.4·tanh(z)`              |
//! | `z[2]` | background: `b = 0.1·σ(z2)`                |
//!
//! Axes are `σ_maj = r(1+e)`, `σ_min = r(1−e)`. The raw intensity
//! `b + A·exp(−((u′/σ_maj)² + (v′/σ_min)²)/2)` is squashed by
//! `σ(4·(raw − 0.5))`, so every pixel lies strictly inside (0, 1) and no
//! gradient is ever clipped. Missing inputs (N < 4 or M < 3) read as zero.
//!
//! The generator has no trainable parameters; rendering is a pure function
//! of `(y, z)` and identical whether an image is rendered alone or in a batch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of attributes the blob world can express.
pub const MAX_ATTRIBUTES: usize = 4;

pub const ATTRIBUTE_NAMES: [&str; MAX_ATTRIBUTES] = ["size", "brightness", "elongation", "tilt"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub image_side: usize,
    pub num_attributes: usize,
    pub latent_dim: usize,
}

impl GeneratorSpec {
    pub fn new(image_side: usize, num_attributes: usize, latent_dim: usize) -> Result<Self> {
        if image_side == 0 {
            return Err(Error::config("image_side", "must be >= 1"));
        }
        if !(1..=MAX_ATTRIBUTES).contains(&num_attributes) {
            return Err(Error::config(
                "num_attributes",
                format!("must be in 1..={MAX_ATTRIBUTES}, got {num_attributes}"),
            ));
        }
        if latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be >= 1"));
        }
        Ok(Self {
            image_side,
            num_attributes,
            latent_dim,
        })
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    /// Trainable parameters in the generator. Always zero.
    pub fn trainable_parameter_count(&self) -> usize {
        0
    }

    /// Pixel-centre coordinates in `[-1, 1]`, `u` left to right, `v` top to bottom.
    fn grid(&self, rows: usize) -> (Tensor, Tensor) {
        let s = self.image_side;
        let coord = |k: usize| -1.0 + (2 * k + 1) as f64 / s as f64;
        let mut u = Vec::with_capacity(rows * s * s);
        let mut v = Vec::with_capacity(rows * s * s);
        for _ in 0..rows {
            for i in 0..s {
                for j in 0..s {
                    u.push(coord(j));
                    v.push(coord(i));
                }
            }
        }
        (
            Tensor::new(rows, s * s, u).expect("sized"),
            Tensor::new(rows, s * s, v).expect("sized"),
        )
    }

    /// Renders a batch on `tape`: `y` is `B×N`, `z` is `B×M`, output `B×S²`.
    pub fn render_batch(&self, tape: &Tape, y: Var, z: Var) -> Result<Var> {
        let [b, n] = tape.shape(y);
        let [bz, m] = tape.shape(z);
        if n != self.num_attributes || m != self.latent_dim || b != bz {
            return Err(Error::shape(
                "render",
                format!(
                    "y [{b}x{n}], z [{bz}x{m}]; generator expects N={}, M={}",
                    self.num_attributes, self.latent_dim
                ),
            ));
        }
        for v in [y, z] {
            if !tape.value(v).is_finite() {
                return Err(Error::NonFinite("generator input".into()));
            }
        }
        let d = self.pixels();
        let zero = || tape.constant(Tensor::zeros(b, 1));
        let ycol = |j: usize| if j < n { tape.slice_cols(y, j, 1) } else { Ok(zero()) };
        let zcol = |j: usize| if j < m { tape.slice_cols(z, j, 1) } else { Ok(zero()) };

        let radius = tape.add_scalar(tape.scale(tape.sigmoid(ycol(0)?), 0.25), 0.10);
        let amplitude = tape.add_scalar(tape.scale(tape.sigmoid(ycol(1)?), 0.8), 0.2);
        let ecc = tape.scale(tape.sigmoid(ycol(2)?), 0.9);
        let theta = tape.add_scalar(tape.scale(tape.sigmoid(ycol(3)?), PI), -PI / 2.0);
        let cx = tape.scale(tape.tanh(zcol(0)?), 0.4);
        let cy = tape.scale(tape.tanh(zcol(1)?), 0.4);
        let background = tape.scale(tape.sigmoid(zcol(2)?), 0.1);

        let sigma_major = tape.mul(radius, tape.add_scalar(ecc, 1.0))?;
        let sigma_minor = tape.mul(radius, tape.add_scalar(tape.neg(ecc), 1.0))?;
        let inv_major = tape.recip(tape.square(sigma_major))?;
        let inv_minor = tape.recip(tape.square(sigma_minor))?;

        let (gu, gv) = self.grid(b);
        let gu = tape.constant(gu);
        let gv = tape.constant(gv);
        let du = tape.sub(gu, tape.expand_cols(cx, d)?)?;
        let dv = tape.sub(gv, tape.expand_cols(cy, d)?)?;
        let cos = tape.expand_cols(tape.cos(theta), d)?;
        let sin = tape.expand_cols(tape.sin(theta), d)?;
        let u_rot = tape.add(tape.mul(cos, du)?, tape.mul(sin, dv)?)?;
        let v_rot = tape.sub(tape.mul(cos, dv)?, tape.mul(sin, du)?)?;
        let quad = tape.add(
            tape.mul(tape.square(u_rot), tape.expand_cols(inv_major, d)?)?,
            tape.mul(tape.square(v_rot), tape.expand_cols(inv_minor, d)?)?,
        )?;
        let blob = tape.exp(tape.scale(quad, -0.5));
        let raw = tape.add(
            tape.expand_cols(background, d)?,
            tape.mul(tape.expand_cols(amplitude, d)?, blob)?,
        )?;
        Ok(tape.sigmoid(tape.add_scalar(tape.scale(raw, 4.0), -2.0)))
    }

    /// Renders many `(y, z)` rows without gradient tracking; returns `B×S²`.
    pub fn render_rows(&self, ys: &Tensor, zs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let y = tape.constant(ys.clone());
        let z = tape.constant(zs.clone());
        let out = self.render_batch(&tape, y, z)?;
        let img = tape.value(out).clone();
        Ok(img)
    }

    /// Renders one `S×S` image.
    pub fn render(&self, y: &[f64], z: &[f64]) -> Result<Tensor> {
        let img = self.render_rows(&vec_row(y)?, &vec_row(z)?)?;
        img.reshape(self.image_side, self.image_side)
    }
}

fn vec_row(v: &[f64]) -> Result<Tensor> {
    if v.is_empty() {
        return Err(Error::shape("render", "empty input vector"));
    }
    Ok(Tensor::row(v))
}

/// Ground-truth attribute strengths of the image rendered from `y`.
/// In this world the generating coordinate is the strength itself.
pub fn true_attribute_strength(y: &[f64]) -> Vec<f64> {
    y.to_vec()
}

/// Image statistics that each attribute moves monotonically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobStats {
    /// Total intensity above the darkest pixel.
    pub area: f64,
    pub mean_intensity: f64,
    /// Ratio of principal second moments, `>= 1`.
    pub axis_ratio: f64,
    /// Principal-axis angle in `(-π/2, π/2]`, measured from +u towards +v.
    pub angle: f64,
}

pub fn blob_stats(image: &Tensor) -> BlobStats {
    let s = image.rows();
    let data = image.data();
    let floor = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let coord = |k: usize| -1.0 + (2 * k + 1) as f64 / s as f64;
    let mut w_sum = 0.0;
    let (mut mu, mut mv) = (0.0, 0.0);
    for i in 0..s {
        for j in 0..s {
            let w = data[i * s + j] - floor;
            w_sum += w;
            mu += w * coord(j);
            mv += w * coord(i);
        }
    }
    mu /= w_sum;
    mv /= w_sum;
    let (mut cuu, mut cvv, mut cuv) = (0.0, 0.0, 0.0);
    for i in 0..s {
        for j in 0..s {
            let w = data[i * s + j] - floor;
            let (du, dv) = (coord(j) - mu, coord(i) - mv);
            cuu += w * du * du;
            cvv += w * dv * dv;
            cuv += w * du * dv;
        }
    }
    let tr = cuu + cvv;
    let det = cuu * cvv - cuv * cuv;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    BlobStats {
        area: w_sum,
        mean_intensity: data.iter().sum::<f64>() / data.len() as f64,
        axis_ratio: l1 / l2,
        angle: 0.5 * (2.0 * cuv).atan2(cuu - cvv),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;

    fn small_generator() -> GeneratorSpec {
        GeneratorSpec::new(32, 4, 4).unwrap()
    }

    #[test]
    fn origin_renders_centered_blob() {
        let g = small_generator();
        let img = g.render(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(img.shape(), [32, 32]);
        // Amplitude 0.6 on background 0.05 at the centre; the four central
        // pixels are symmetric about the origin.
        let c = [img.get(15, 15), img.get(15, 16), img.get(16, 15), img.get(16, 16)];
        assert!(c.iter().all(|&v| (v - c[0]).abs() < 1e-12));
        let corner = img.get(0, 0);
        assert!((corner - sigmoid(4.0 * (0.05 - 0.5))).abs() < 1e-6);
        let peak_raw = 0.05 + 0.6;
        assert!(c[0] < sigmoid(4.0 * (peak_raw - 0.5)));
        assert!(c[0] > corner);
    }

    #[test]
    fn tilt_negation_on_circle_is_mirror_invariant() {
        let g = small_generator();
        let a = g.render(&[0.3, 0.2, -40.0, 1.3], &[0.0; 4]).unwrap();
        let b = g.render(&[0.3, 0.2, -40.0, -1.3], &[0.0; 4]).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn pixels_in_unit_interval_even_for_extreme_inputs() {
        let g = small_generator();
        for y in [[50.0, 50.0, 50.0, 50.0], [-50.0, -50.0, -50.0, -50.0]] {
            let img = g.render(&y, &[30.0, -30.0, 30.0, 0.0]).unwrap();
            assert!(img.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let g = small_generator();
        assert!(g.render(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4]).is_err());
        assert!(g.render(&[0.0; 3], &[0.0; 4]).is_err());
    }

    #[test]
    fn batch_and_single_render_are_bitwise_equal() {
        let g = small_generator();
        let ys = Tensor::from_rows(&[[0.1, -0.4, 0.7, 0.2], [1.0, 0.5, -0.3, -1.1]]).unwrap();
        let zs = Tensor::from_rows(&[[0.2, -0.1, 0.3, 0.0], [-0.6, 0.4, -0.2, 0.9]]).unwrap();
        let batch = g.render_rows(&ys, &zs).unwrap();
        for r in 0..2 {
            let one = g.render(ys.row_slice(r), zs.row_slice(r)).unwrap();
            assert_eq!(one.data(), batch.row_slice(r));
        }
    }

    #[test]
    fn identity_strengths() {
        assert_eq!(true_attribute_strength(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(true_attribute_strength(&[1.0, -2.0, 0.5, 0.0]), vec![1.0, -2.0, 0.5, 0.0]);
    }

    #[test]
    fn fewer_attributes_default_to_zero() {
        let two = GeneratorSpec::new(16, 2, 1).unwrap();
        let four = GeneratorSpec::new(16, 4, 3).unwrap();
        let a = two.render(&[0.4, -0.2], &[0.0]).unwrap();
        let b = four.render(&[0.4, -0.2, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert!(GeneratorSpec::new(16, 5, 1).is_err());
    }

    fn stat_sweep(attr: usize, stat: impl Fn(&BlobStats) -> f64) -> Vec<f64> {
        let g = small_generator();
        (0..20)
            .map(|k| {
                let mut y = [0.0, 0.0, 0.8, 0.0];
                y[attr] = -2.0 + 4.0 * k as f64 / 19.0;
                stat(&blob_stats(&g.render(&y, &[0.1, -0.2, 0.0, 0.0]).unwrap()))
            })
            .collect()
    }

    #[test]
    fn each_attribute_moves_its_statistic_monotonically() {
        let strictly_increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        assert!(strictly_increasing(&stat_sweep(0, |s| s.area)));
        assert!(strictly_increasing(&stat_sweep(1, |s| s.mean_intensity)));
        assert!(strictly_increasing(&stat_sweep(2, |s| s.axis_ratio)));
        assert!(strictly_increasing(&stat_sweep(3, |s| s.angle)));
    }
}
