//! Flow-time interpolation states and K-component prediction sets.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A point on the noise-to-data path: K trajectory sets at flow time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// Shape `[K, A, 2*T_f]`, normalized displacement space.
    pub values: Array3<f64>,
    /// Flow time in `[0, 1)`.
    pub t: f64,
}

impl FlowState {
    pub fn new(values: Array3<f64>, t: f64) -> Result<Self> {
        if !(t.is_finite() && (0.0..1.0).contains(&t)) {
            return Err(Error::Config(format!("flow time must lie in [0, 1), got {t}")));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("flow state contains non-finite values".into()));
        }
        Ok(FlowState { values, t })
    }

    pub fn k(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Network output: K waypoint hypotheses and their confidence logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Shape `[K, A, 2*T_f]`.
    pub waypoints: Array3<f64>,
    /// Shape `[K]`.
    pub logits: Array1<f64>,
}

impl PredictionSet {
    pub fn new(waypoints: Array3<f64>, logits: Array1<f64>) -> Result<Self> {
        let k = waypoints.shape()[0];
        if k == 0 {
            return Err(Error::Config("prediction set needs K >= 1".into()));
        }
        if logits.len() != k {
            return Err(Error::shape(
                "prediction logits",
                format!("[{k}]"),
                format!("[{}]", logits.len()),
            ));
        }
        if !waypoints.iter().all(|v| v.is_finite()) || !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("prediction set contains non-finite values".into()));
        }
        Ok(PredictionSet { waypoints, logits })
    }

    pub fn k(&self) -> usize {
        self.waypoints.shape()[0]
    }

    /// Softmax of the logits (numerically stabilized).
    pub fn probs(&self) -> Array1<f64> {
        softmax(&self.logits)
    }
}

/// Numerically stable softmax over a vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Linear path between noise and data: `(1 - t) * y0 + t * y1`.
pub fn interpolate(y0: &Array3<f64>, y1: &Array3<f64>, t: f64) -> Result<Array3<f64>> {
    if y0.shape() != y1.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?}", y0.shape()),
            format!("{:?}", y1.shape()),
        ));
    }
    if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
        return Err(Error::Config(format!("interpolation time must lie in [0, 1], got {t}")));
    }
    Ok(y0 * (1.0 - t) + y1 * t)
}

/// Repeat one `[A, 2*T_f]` target across the K axis.
pub fn tile_targets(y1: &Array2<f64>, k: usize) -> Array3<f64> {
    let (a_n, w) = y1.dim();
    let mut out = Array3::zeros((k, a_n, w));
    for mut row in out.axis_iter_mut(Axis(0)) {
        row.assign(y1);
    }
    out
}

/// Draw one `[A, 2*T_f]` standard-normal sample and repeat it K times: all
/// K hypotheses start from the same noise, so they stay comparable and the
/// network alone differentiates them.
pub fn tied_noise(k: usize, a_n: usize, t_f: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let base: Array2<f64> = Array2::from_shape_simple_fn((a_n, 2 * t_f), || StandardNormal.sample(rng));
    tile_targets(&base, k)
}

/// Draw a fully independent `[K, A, 2*T_f]` standard-normal tensor.
pub fn untied_noise(k: usize, a_n: usize, t_f: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn((k, a_n, 2 * t_f), || StandardNormal.sample(rng))
}
