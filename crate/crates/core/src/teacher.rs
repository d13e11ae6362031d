//! Teacher training: correlated K-hypothesis flow matching.
//!
//! Each step interpolates tied noise toward the normalized future at a
//! logit-normal flow time, asks the network for K clean-data hypotheses,
//! and descends a winner-take-all squared error plus a cross-entropy that
//! teaches the confidence head which hypothesis won.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, TensorValue};
use crate::context::build_context;
use crate::error::{Error, Result};
use crate::flow::{interpolate, tied_noise, tile_targets, PredictionSet};
use crate::network::{BatchInput, Model, TrainCtx};
use crate::norm::Normalizer;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::subsystem_rng;
use crate::scene::Scene;

/// Logit-normal flow-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSchedule {
    pub mu_t: f64,
    pub sigma_t: f64,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        TimeSchedule { mu_t: -0.5, sigma_t: 1.5 }
    }
}

impl TimeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_t > 0.0 && self.mu_t.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("time schedule needs finite mu_t and sigma_t > 0".into()))
        }
    }
}

/// Draw t strictly inside (0, 1): the logistic of a normal draw.
pub fn sample_time(schedule: &TimeSchedule, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let kappa = schedule.mu_t + schedule.sigma_t * z;
    let t = 1.0 / (1.0 + (-kappa).exp());
    t.clamp(1e-12, 1.0 - 1e-12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub seed: Option<u64>,
    pub mask_enabled: bool,
    /// Emit a log record every this many steps (the final step always logs).
    pub log_every: u64,
    /// Checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: u64,
    pub schedule: TimeSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            max_steps: 2000,
            seed: None,
            mask_enabled: true,
            log_every: 50,
            checkpoint_every: 0,
            schedule: TimeSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push("weight_decay must be nonnegative".to_string());
        }
        if self.max_steps == 0 {
            problems.push("max_steps must be >= 1".to_string());
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("training needs a resolved seed".into()))
    }
}

/// Index of the hypothesis closest to the target in squared Frobenius
/// distance; ties go to the lowest index.
pub fn closest_index(hypotheses: ArrayView3<f64>, target: ArrayView2<f64>) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (j, hyp) in hypotheses.outer_iter().enumerate() {
        let d: f64 = hyp
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Value-form winner-take-all loss for one scene: squared Frobenius error
/// of the winning hypothesis plus softmax cross-entropy on the winner index.
pub fn fm_loss(pred: &PredictionSet, y1: &Array2<f64>) -> Result<FmLossValue> {
    if pred.waypoints.shape()[1..] != *y1.shape() {
        return Err(Error::shape(
            "fm_loss target",
            format!("{:?}", &pred.waypoints.shape()[1..]),
            format!("{:?}", y1.shape()),
        ));
    }
    if !y1.iter().all(|v| v.is_finite()) {
        return Err(Error::Config("fm_loss target contains non-finite values".into()));
    }
    let j = closest_index(pred.waypoints.view(), y1.view());
    let regression: f64 = pred
        .waypoints
        .index_axis(Axis(0), j)
        .iter()
        .zip(y1.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let logits = &pred.logits;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let ce = lse - logits[j];
    Ok(FmLossValue {
        total: regression + ce,
        regression,
        ce,
        winner: j,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmLossValue {
    pub total: f64,
    pub regression: f64,
    pub ce: f64,
    pub winner: usize,
}

/// Graph nodes for the batch-summed loss (caller scales by 1/B).
pub struct FmLossNodes {
    pub total: NodeId,
    pub regression: NodeId,
    pub ce: NodeId,
    pub winners: Vec<usize>,
}

/// Build the winner-take-all loss over a batched forward. Winners are
/// selected from current values and treated as constants, so no gradient
/// flows through the argmin.
pub fn fm_loss_graph(
    tape: &mut Tape,
    waypoints: NodeId,
    logits: NodeId,
    y1: &Array3<f64>,
) -> Result<FmLossNodes> {
    let shape = tape.shape(waypoints);
    let (b_n, _k_n, a_n, tw) = (shape[0], shape[1], shape[2], shape[3]);
    if y1.shape() != [b_n, a_n, tw] {
        return Err(Error::shape(
            "fm_loss_graph targets",
            format!("[{b_n}, {a_n}, {tw}]"),
            format!("{:?}", y1.shape()),
        ));
    }
    let way_vals = tape.value(waypoints).clone();
    let y1_leaf = tape.leaf(y1.clone().into_dyn());

    let mut winners = Vec::with_capacity(b_n);
    let mut reg_total: Option<NodeId> = None;
    let mut ce_total: Option<NodeId> = None;
    for b in 0..b_n {
        let scene_ways = way_vals
            .index_axis(Axis(0), b)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("scene hypotheses 3-D");
        let target = y1.index_axis(Axis(0), b);
        let j = closest_index(scene_ways, target);
        winners.push(j);

        let scene_node = tape.select(waypoints, b); // [K, A, tw]
        let winner_node = tape.select(scene_node, j); // [A, tw]
        let y1_scene = tape.select(y1_leaf, b);
        let diff = tape.sub(winner_node, y1_scene);
        let sq = tape.mul(diff, diff);
        let reg = tape.sum_all(sq);
        reg_total = Some(match reg_total {
            Some(acc) => tape.add(acc, reg),
            None => reg,
        });

        let scene_logits = tape.select(logits, b); // [K]
        let ce = tape.cross_entropy_index(scene_logits, j);
        ce_total = Some(match ce_total {
            Some(acc) => tape.add(acc, ce),
            None => ce,
        });
    }
    let regression = reg_total.expect("non-empty batch");
    let ce = ce_total.expect("non-empty batch");
    let total = tape.add(regression, ce);
    Ok(FmLossNodes {
        total,
        regression,
        ce,
        winners,
    })
}

/// Absolute residual between the velocity-space objective and the
/// data-space objective it is algebraically equal to.
pub fn loss_equivalence_check(v: &Array2<f64>, y0: &Array2<f64>, y1: &Array2<f64>, t: f64) -> f64 {
    let velocity_form: f64 = v
        .iter()
        .zip(y1.iter().zip(y0.iter()))
        .map(|(v, (y1, y0))| {
            let d = v - (y1 - y0);
            d * d
        })
        .sum();
    let data_form: f64 = v
        .iter()
        .zip(y1.iter().zip(y0.iter()))
        .map(|(v, (y1, y0))| {
            let yt = (1.0 - t) * y0 + t * y1;
            let d = (yt + (1.0 - t) * v - y1) / (1.0 - t);
            d * d
        })
        .sum();
    (velocity_form - data_form).abs()
}

/// One scene, fully prepared for training.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub ctx: Array2<f64>,
    pub type_ids: Vec<usize>,
    /// Normalized future, `[A, 2*t_f]`.
    pub y1: Array2<f64>,
}

pub fn prepare_items(model: &Model, scenes: &[Scene], normalizer: &Normalizer) -> Result<Vec<TrainItem>> {
    scenes
        .iter()
        .map(|scene| {
            let ctx = build_context(scene)?;
            let type_ids = model.type_ids(scene)?;
            let y1 = normalizer.normalize_future(&scene.future_tensor(), scene)?;
            Ok(TrainItem {
                ctx: ctx.values,
                type_ids,
                y1,
            })
        })
        .collect()
}

/// One log line of training progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub regression: f64,
    pub ce: f64,
    pub t_mean: f64,
    pub wallclock_s: f64,
}

struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n, // force a shuffle on first use
        }
    }

    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos >= self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Run the training loop, invoking `on_record` at every logging boundary.
pub fn train_teacher<F>(
    model: &mut Model,
    items: &[TrainItem],
    cfg: &TrainConfig,
    mut on_record: F,
) -> Result<Vec<StepRecord>>
where
    F: FnMut(&Model, &StepRecord) -> Result<()>,
{
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let seed = cfg.require_seed()?;
    let k = model.cfg.k;
    let t_f = model.dims.t_f;

    let mut shuffle_rng = subsystem_rng(seed, "teacher/shuffle");
    let mut draw_rng = subsystem_rng(seed, "teacher/draws");
    let mut forward_rng = subsystem_rng(seed, "teacher/forward");

    let mut sampler = EpochSampler::new(items.len());
    let mut opt = AdamW::new(AdamWConfig::new(cfg.learning_rate, cfg.weight_decay));
    let start = Instant::now();
    let mut records = Vec::new();

    for step in 0..cfg.max_steps {
        let batch = sampler.next_batch(cfg.batch_size, &mut shuffle_rng);

        // Per-scene draws happen in batch order so grouping cannot change
        // the random stream.
        let mut draws = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let a_n = items[idx].type_ids.len();
            let t = sample_time(&cfg.schedule, &mut draw_rng);
            let y0 = tied_noise(k, a_n, t_f, &mut draw_rng);
            draws.push((idx, t, y0));
        }
        let t_mean = draws.iter().map(|(_, t, _)| *t).sum::<f64>() / draws.len() as f64;

        // Group scenes by agent count; each group is one forward/backward.
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (slot, (idx, _, _)) in draws.iter().enumerate() {
            groups.entry(items[*idx].type_ids.len()).or_default().push(slot);
        }

        let inv_b = 1.0 / batch.len() as f64;
        let mut grad_acc: BTreeMap<String, TensorValue> = BTreeMap::new();
        let (mut loss_v, mut reg_v, mut ce_v) = (0.0, 0.0, 0.0);

        for (a_n, slots) in groups {
            let bg = slots.len();
            let cw = model.dims.ctx_width();
            let tw = model.dims.traj_width();
            let mut ctx = Array3::zeros((bg, a_n, cw));
            let mut y1 = Array3::zeros((bg, a_n, tw));
            let mut yt = Array4::zeros((bg, k, a_n, tw));
            let mut times = Vec::with_capacity(bg);
            let mut type_ids = Vec::with_capacity(bg);
            for (row, &slot) in slots.iter().enumerate() {
                let (idx, t, ref y0) = draws[slot];
                let item = &items[idx];
                ctx.index_axis_mut(Axis(0), row).assign(&item.ctx);
                y1.index_axis_mut(Axis(0), row).assign(&item.y1);
                let targets = tile_targets(&item.y1, k);
                let interp = interpolate(y0, &targets, t)?;
                yt.index_axis_mut(Axis(0), row).assign(&interp);
                times.push(t);
                type_ids.push(item.type_ids.clone());
            }

            let mut tape = Tape::new();
            let nodes = model.params.nodes(&mut tape);
            let fwd = model.forward_batch(
                &mut tape,
                &nodes,
                &BatchInput {
                    ctx: &ctx,
                    type_ids: &type_ids,
                    traj: &yt,
                    times: Some(&times),
                },
                Some(TrainCtx {
                    rng: &mut forward_rng,
                    mask_enabled: cfg.mask_enabled,
                }),
            )?;
            let loss = fm_loss_graph(&mut tape, fwd.waypoints, fwd.logits, &y1)?;
            loss_v += tape.scalar(loss.total) * inv_b;
            reg_v += tape.scalar(loss.regression) * inv_b;
            ce_v += tape.scalar(loss.ce) * inv_b;

            let grads = tape.backward(loss.total);
            for (name, id) in nodes.iter() {
                if let Some(g) = grads.get(*id) {
                    grad_acc
                        .entry(name.clone())
                        .and_modify(|acc| *acc += g)
                        .or_insert_with(|| g.clone());
                }
            }
        }

        if !loss_v.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("non-finite loss {loss_v}"),
            });
        }
        for g in grad_acc.values_mut() {
            g.mapv_inplace(|v| v * inv_b);
        }
        opt.step(&mut model.params, &grad_acc).map_err(|e| match e {
            Error::Training { msg, .. } => Error::Training { step, msg },
            other => other,
        })?;

        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.max_steps {
            let record = StepRecord {
                step,
                loss: loss_v,
                regression: reg_v,
                ce: ce_v,
                t_mean,
                wallclock_s: start.elapsed().as_secs_f64(),
            };
            on_record(model, &record)?;
            records.push(record);
        }
    }
    Ok(records)
}
