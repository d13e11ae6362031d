//! Min-max normalization of future displacements.
//!
//! Networks operate on displacements relative to each agent's last observed
//! position, scaled per axis into `[-1, 1]` by extrema measured on the
//! training split. The mapping never clips: out-of-range test data simply
//! falls outside `[-1, 1]` and still round-trips exactly.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min_disp: [f64; 2],
    pub max_disp: [f64; 2],
}

impl Normalizer {
    /// Scan per-axis displacement extrema over the given (training) scenes.
    ///
    /// A degenerate result (`min == max` on an axis) is not an error here;
    /// it surfaces as a configuration error from the first normalize or
    /// denormalize call.
    pub fn fit(scenes: &[Scene]) -> Result<Self> {
        let mut min_disp = [f64::INFINITY; 2];
        let mut max_disp = [f64::NEG_INFINITY; 2];
        let mut seen = false;
        for scene in scenes {
            scene.validate()?;
            for agent in &scene.agents {
                let anchor = agent.past[agent.past.len() - 1];
                for p in &agent.future {
                    for axis in 0..2 {
                        let d = p[axis] - anchor[axis];
                        min_disp[axis] = min_disp[axis].min(d);
                        max_disp[axis] = max_disp[axis].max(d);
                        seen = true;
                    }
                }
            }
        }
        if !seen {
            return Err(Error::Config("cannot fit normalizer on an empty split".into()));
        }
        Ok(Normalizer { min_disp, max_disp })
    }

    /// Error out if an axis has no spread (the affine map is not invertible).
    pub fn validate(&self) -> Result<()> {
        for axis in 0..2 {
            let (lo, hi) = (self.min_disp[axis], self.max_disp[axis]);
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!(
                    "degenerate normalizer on axis {axis}: min_disp={lo}, max_disp={hi}"
                )));
            }
        }
        Ok(())
    }

    fn to_unit(&self, d: f64, axis: usize) -> f64 {
        2.0 * (d - self.min_disp[axis]) / (self.max_disp[axis] - self.min_disp[axis]) - 1.0
    }

    fn from_unit(&self, u: f64, axis: usize) -> f64 {
        self.min_disp[axis] + (u + 1.0) * (self.max_disp[axis] - self.min_disp[axis]) / 2.0
    }

    /// Map absolute future positions `[A, T_f, 2]` to normalized
    /// displacements `[A, 2*T_f]` (frame-major, x then y per frame).
    ///
    /// `future` need not be the scene's own ground truth; any candidate
    /// future for this scene's agents (e.g. cached model samples) uses the
    /// same anchors.
    pub fn normalize_future(&self, future: &Array3<f64>, scene: &Scene) -> Result<Array2<f64>> {
        self.validate()?;
        let (a_n, t_f) = (scene.n_agents(), scene.t_f());
        if future.shape() != [a_n, t_f, 2] {
            return Err(Error::shape(
                "normalize_future",
                format!("[{a_n}, {t_f}, 2]"),
                format!("{:?}", future.shape()),
            ));
        }
        let anchors = scene.last_observed();
        let mut out = Array2::zeros((a_n, 2 * t_f));
        for a in 0..a_n {
            for t in 0..t_f {
                for axis in 0..2 {
                    let d = future[[a, t, axis]] - anchors[[a, axis]];
                    out[[a, 2 * t + axis]] = self.to_unit(d, axis);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`normalize_future`]: `[A, 2*T_f]` back to absolute
    /// positions `[A, T_f, 2]`.
    pub fn denormalize_future(&self, normalized: &Array2<f64>, scene: &Scene) -> Result<Array3<f64>> {
        self.validate()?;
        let (a_n, t_f) = (scene.n_agents(), scene.t_f());
        if normalized.shape() != [a_n, 2 * t_f] {
            return Err(Error::shape(
                "denormalize_future",
                format!("[{a_n}, {}]", 2 * t_f),
                format!("{:?}", normalized.shape()),
            ));
        }
        let anchors = scene.last_observed();
        let mut out = Array3::zeros((a_n, t_f, 2));
        for a in 0..a_n {
            for t in 0..t_f {
                for axis in 0..2 {
                    let d = self.from_unit(normalized[[a, 2 * t + axis]], axis);
                    out[[a, t, axis]] = anchors[[a, axis]] + d;
                }
            }
        }
        Ok(out)
    }

    /// Denormalize a K-component hypothesis set `[K, A, 2*T_f]` to absolute
    /// coordinates `[K, A, T_f, 2]`.
    pub fn denormalize_set(&self, normalized: &Array3<f64>, scene: &Scene) -> Result<Array4<f64>> {
        let (k_n, a_n, t_f) = (normalized.shape()[0], scene.n_agents(), scene.t_f());
        let mut out = Array4::zeros((k_n, a_n, t_f, 2));
        for k in 0..k_n {
            let abs = self.denormalize_future(&normalized.index_axis(ndarray::Axis(0), k).to_owned(), scene)?;
            out.index_axis_mut(ndarray::Axis(0), k).assign(&abs);
        }
        Ok(out)
    }
}
