//! Evaluation of K-hypothesis forecasts.
//!
//! Two families of displacement metrics are reported side by side:
//! marginal best-of-K (each agent picks its own best hypothesis) and joint
//! best-of-K (the whole scene shares one hypothesis index). Horizons are
//! expressed in future frames.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;

fn check_shapes(preds: &Array4<f64>, gt: &Array3<f64>, horizon: usize) -> Result<()> {
    let (k, a_n, t_f) = (preds.shape()[0], preds.shape()[1], preds.shape()[2]);
    if k == 0 {
        return Err(Error::shape("predictions", "K >= 1", "K = 0"));
    }
    if gt.shape() != [a_n, t_f, 2] || preds.shape()[3] != 2 {
        return Err(Error::shape(
            "predictions vs ground truth",
            format!("[K, {}, {}, 2] vs {:?}", gt.shape()[0], gt.shape()[1], gt.shape()),
            format!("{:?} vs {:?}", preds.shape(), gt.shape()),
        ));
    }
    if horizon == 0 || horizon > t_f {
        return Err(Error::Config(format!(
            "horizon must be in 1..={t_f} frames, got {horizon}"
        )));
    }
    Ok(())
}

/// Per-frame Euclidean displacement between hypothesis `k` for agent `a`
/// and the ground truth, averaged over the first `horizon` frames.
fn ade_cell(preds: &Array4<f64>, gt: &Array3<f64>, k: usize, a: usize, horizon: usize) -> f64 {
    let mut acc = 0.0;
    for t in 0..horizon {
        let dx = preds[[k, a, t, 0]] - gt[[a, t, 0]];
        let dy = preds[[k, a, t, 1]] - gt[[a, t, 1]];
        acc += (dx * dx + dy * dy).sqrt();
    }
    acc / horizon as f64
}

/// Displacement at the last frame of the horizon window.
fn fde_cell(preds: &Array4<f64>, gt: &Array3<f64>, k: usize, a: usize, horizon: usize) -> f64 {
    let t = horizon - 1;
    let dx = preds[[k, a, t, 0]] - gt[[a, t, 0]];
    let dy = preds[[k, a, t, 1]] - gt[[a, t, 1]];
    (dx * dx + dy * dy).sqrt()
}

/// Marginal best-of-K average displacement error: each agent takes its
/// own best hypothesis, and the per-agent minima are averaged.
pub fn min_ade(preds: &Array4<f64>, gt: &Array3<f64>, horizon: usize) -> Result<f64> {
    check_shapes(preds, gt, horizon)?;
    let (k_n, a_n) = (preds.shape()[0], preds.shape()[1]);
    let mut total = 0.0;
    for a in 0..a_n {
        let best = (0..k_n)
            .map(|k| ade_cell(preds, gt, k, a, horizon))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / a_n as f64)
}

/// Marginal best-of-K final displacement error at the horizon frame.
pub fn min_fde(preds: &Array4<f64>, gt: &Array3<f64>, horizon: usize) -> Result<f64> {
    check_shapes(preds, gt, horizon)?;
    let (k_n, a_n) = (preds.shape()[0], preds.shape()[1]);
    let mut total = 0.0;
    for a in 0..a_n {
        let best = (0..k_n)
            .map(|k| fde_cell(preds, gt, k, a, horizon))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / a_n as f64)
}

/// Joint best-of-K: one hypothesis index is shared by every agent in the
/// scene, chosen to minimize the scene-mean error. Returns (JADE, JFDE).
pub fn joint_ade_fde(preds: &Array4<f64>, gt: &Array3<f64>, horizon: usize) -> Result<(f64, f64)> {
    check_shapes(preds, gt, horizon)?;
    let (k_n, a_n) = (preds.shape()[0], preds.shape()[1]);
    let mut jade = f64::INFINITY;
    let mut jfde = f64::INFINITY;
    for k in 0..k_n {
        let mut ade = 0.0;
        let mut fde = 0.0;
        for a in 0..a_n {
            ade += ade_cell(preds, gt, k, a, horizon);
            fde += fde_cell(preds, gt, k, a, horizon);
        }
        jade = jade.min(ade / a_n as f64);
        jfde = jfde.min(fde / a_n as f64);
    }
    Ok((jade, jfde))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub jade: f64,
    pub jfde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_scenes: usize,
    /// Keyed by horizon in future frames.
    pub horizons: BTreeMap<usize, HorizonMetrics>,
    pub mean_wallclock_s: f64,
    pub mean_nfe: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        for (h, m) in &self.horizons {
            if !(ok(m.min_ade) && ok(m.min_fde) && ok(m.jade) && ok(m.jfde)) {
                return Err(Error::Config(format!(
                    "report has a non-finite or negative metric at horizon {h}"
                )));
            }
        }
        if !(ok(self.mean_wallclock_s) && ok(self.mean_nfe)) {
            return Err(Error::Config(
                "report has non-finite timing or NFE fields".into(),
            ));
        }
        Ok(())
    }
}

/// Run `sample` over every scene, timing each call, and average all
/// metrics at each requested horizon.
pub fn evaluate<F>(scenes: &[Scene], horizons: &[usize], mut sample: F) -> Result<EvalReport>
where
    F: FnMut(&Scene) -> Result<(Array4<f64>, u64)>,
{
    if scenes.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    if horizons.is_empty() {
        return Err(Error::Config("evaluation needs at least one horizon".into()));
    }
    let mut acc: BTreeMap<usize, HorizonMetrics> = horizons
        .iter()
        .map(|&h| {
            (
                h,
                HorizonMetrics {
                    min_ade: 0.0,
                    min_fde: 0.0,
                    jade: 0.0,
                    jfde: 0.0,
                },
            )
        })
        .collect();
    let mut wallclock = 0.0;
    let mut nfe_total = 0u64;
    for scene in scenes {
        let start = Instant::now();
        let (preds, nfe) = sample(scene)?;
        wallclock += start.elapsed().as_secs_f64();
        nfe_total += nfe;
        let gt = scene.future_tensor();
        for (&h, m) in acc.iter_mut() {
            m.min_ade += min_ade(&preds, &gt, h)?;
            m.min_fde += min_fde(&preds, &gt, h)?;
            let (jade, jfde) = joint_ade_fde(&preds, &gt, h)?;
            m.jade += jade;
            m.jfde += jfde;
        }
    }
    let n = scenes.len() as f64;
    for m in acc.values_mut() {
        m.min_ade /= n;
        m.min_fde /= n;
        m.jade /= n;
        m.jfde /= n;
    }
    let report = EvalReport {
        n_scenes: scenes.len(),
        horizons: acc,
        mean_wallclock_s: wallclock / n,
        mean_nfe: nfe_total as f64 / n,
    };
    report.validate()?;
    Ok(report)
}

/// Plain-text companion table for a report. `dt` converts frame horizons
/// to seconds for the first column.
pub fn render_table(report: &EvalReport, dt: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>8} {:>8} {:>10} {:>10} {:>10} {:>10}\n",
        "frames", "seconds", "minADE", "minFDE", "JADE", "JFDE"
    ));
    for (h, m) in &report.horizons {
        out.push_str(&format!(
            "{:>8} {:>8.2} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            h,
            *h as f64 * dt,
            m.min_ade,
            m.min_fde,
            m.jade,
            m.jfde
        ));
    }
    out.push_str(&format!(
        "scenes: {}   mean wallclock/scene: {:.6}s   mean NFE/sample: {:.1}\n",
        report.n_scenes, report.mean_wallclock_s, report.mean_nfe
    ));
    out
}
