//! The forecasting networks.
//!
//! Teacher: maps K noisy trajectory sets, per-agent context, and a flow time
//! to K waypoint hypotheses plus confidence logits. Student: the same
//! architecture fed raw noise, with no flow-time pathway at all.
//!
//! Layout of one forward pass (`B` scenes, `K` hypotheses, `A` agents):
//!
//! * context encoder: per-agent MLP over history features, plus a learnable
//!   per-agent-type embedding, then `n_enc_layers` of self-attention over
//!   the agent axis (pre-norm, residual);
//! * trajectory embedding: MLP over each `(k, agent)` trajectory vector; in
//!   teacher training this embedding is zeroed for a whole scene with
//!   probability `mask_threshold(t)` so late flow times cannot shortcut
//!   through the near-clean input;
//! * token assembly: trajectory embedding + broadcast encoder output +
//!   (teacher) flow-time embedding + fixed sinusoidal encodings over the
//!   hypothesis and agent axes;
//! * decoder: `n_dec_blocks` blocks, each attending over the hypothesis
//!   axis, then the agent axis, then a feed-forward sublayer;
//! * heads: a linear waypoint head per token and a scalar confidence head
//!   averaged over agents.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, TensorValue};
use crate::context::{ContextTensor, CONTEXT_FEATURES};
use crate::error::{Error, Result};
use crate::flow::{FlowState, PredictionSet};
use crate::scene::Scene;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_blocks: usize,
    /// Dropout rate on attention probabilities (train mode only).
    pub dropout: f64,
    /// Hypotheses produced per scene.
    pub k: usize,
    /// Steepness of the trajectory-embedding mask schedule.
    pub mask_k: f64,
    /// Midpoint of the mask schedule.
    pub mask_m: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            d_model: 128,
            d_ff: 512,
            n_heads: 8,
            n_enc_layers: 4,
            n_dec_blocks: 4,
            dropout: 0.1,
            k: 20,
            mask_k: 20.0,
            mask_m: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.d_model % 2 != 0 {
            problems.push("d_model must be positive and even".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads.max(1) != 0 {
            problems.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be positive".to_string());
        }
        if self.n_enc_layers == 0 || self.n_dec_blocks == 0 {
            problems.push("need at least one encoder layer and one decoder block".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push("dropout must lie in [0, 1)".to_string());
        }
        if self.k == 0 {
            problems.push("k must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Dataset-derived dimensions baked into a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub t_p: usize,
    pub t_f: usize,
    pub agent_types: Vec<String>,
}

impl ModelDims {
    pub fn ctx_width(&self) -> usize {
        CONTEXT_FEATURES * self.t_p
    }

    pub fn traj_width(&self) -> usize {
        2 * self.t_f
    }

    pub fn type_index(&self, agent_type: &str) -> Result<usize> {
        self.agent_types
            .iter()
            .position(|t| t == agent_type)
            .ok_or_else(|| Error::UnknownAgentType(agent_type.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Student,
}

/// Logistic schedule deciding how often the trajectory embedding is zeroed
/// during teacher training: near t=1 the interpolant is almost the answer,
/// so the mask forces the context pathway to stay informative.
pub fn mask_threshold(t: f64, k: f64, m: f64) -> f64 {
    1.0 / (1.0 + (-k * (t - m)).exp())
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter tensors with deterministic ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, TensorValue>,
}

enum Init {
    /// Normal with std `1/sqrt(fan_in)`, times an extra factor.
    FanIn { fan_in: usize, factor: f64 },
    /// Small-normal embedding rows.
    Embedding,
    Zero,
    One,
}

fn attn_param_specs(prefix: &str, d: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{proj}"), vec![d, d], Init::FanIn { fan_in: d, factor: 1.0 }));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.{bias}"), vec![d], Init::Zero));
    }
    out
}

fn ln_param_specs(prefix: &str, d: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}.gamma"), vec![d], Init::One),
        (format!("{prefix}.beta"), vec![d], Init::Zero),
    ]
}

fn ffn_param_specs(prefix: &str, d: usize, ff: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}.w1"), vec![d, ff], Init::FanIn { fan_in: d, factor: 1.0 }),
        (format!("{prefix}.b1"), vec![ff], Init::Zero),
        (format!("{prefix}.w2"), vec![ff, d], Init::FanIn { fan_in: ff, factor: 1.0 }),
        (format!("{prefix}.b2"), vec![d], Init::Zero),
    ]
}

fn mlp_param_specs(prefix: &str, d_in: usize, d: usize) -> Vec<(String, Vec<usize>, Init)> {
    vec![
        (format!("{prefix}.w1"), vec![d_in, d], Init::FanIn { fan_in: d_in, factor: 1.0 }),
        (format!("{prefix}.b1"), vec![d], Init::Zero),
        (format!("{prefix}.w2"), vec![d, d], Init::FanIn { fan_in: d, factor: 1.0 }),
        (format!("{prefix}.b2"), vec![d], Init::Zero),
    ]
}

/// The full, ordered parameter layout for a model variant.
fn param_specs(kind: ModelKind, cfg: &NetworkConfig, dims: &ModelDims) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut specs = Vec::new();
    specs.extend(mlp_param_specs("ctx_mlp", dims.ctx_width(), d));
    specs.push(("type_embed".to_string(), vec![dims.agent_types.len(), d], Init::Embedding));
    for i in 0..cfg.n_enc_layers {
        specs.extend(ln_param_specs(&format!("enc.{i}.ln1"), d));
        specs.extend(attn_param_specs(&format!("enc.{i}.attn"), d));
        specs.extend(ln_param_specs(&format!("enc.{i}.ln2"), d));
        specs.extend(ffn_param_specs(&format!("enc.{i}.ffn"), d, cfg.d_ff));
    }
    specs.extend(ln_param_specs("enc_out_ln", d));
    specs.extend(mlp_param_specs("traj_mlp", dims.traj_width(), d));
    if kind == ModelKind::Teacher {
        specs.push(("time_mlp.w".to_string(), vec![d, d], Init::FanIn { fan_in: d, factor: 1.0 }));
        specs.push(("time_mlp.b".to_string(), vec![d], Init::Zero));
    }
    for i in 0..cfg.n_dec_blocks {
        specs.extend(ln_param_specs(&format!("dec.{i}.ln_h"), d));
        specs.extend(attn_param_specs(&format!("dec.{i}.attn_h"), d));
        specs.extend(ln_param_specs(&format!("dec.{i}.ln_a"), d));
        specs.extend(attn_param_specs(&format!("dec.{i}.attn_a"), d));
        specs.extend(ln_param_specs(&format!("dec.{i}.ln_f"), d));
        specs.extend(ffn_param_specs(&format!("dec.{i}.ffn"), d, cfg.d_ff));
    }
    specs.extend(ln_param_specs("dec_out_ln", d));
    // Waypoint head starts tiny so early hypotheses sit near zero
    // displacement and the winner selection is not dominated by init noise.
    specs.push((
        "head_way.w".to_string(),
        vec![d, dims.traj_width()],
        Init::FanIn { fan_in: d, factor: 1e-2 },
    ));
    specs.push(("head_way.b".to_string(), vec![dims.traj_width()], Init::Zero));
    specs.push(("head_conf.w".to_string(), vec![d, 1], Init::FanIn { fan_in: d, factor: 1.0 }));
    specs.push(("head_conf.b".to_string(), vec![1], Init::Zero));
    specs
}

impl ParameterSet {
    /// Freshly initialized parameters; draw order is fixed by the param_specs
    /// list, so a given seed always produces the same tensors.
    pub fn init(kind: ModelKind, cfg: &NetworkConfig, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in param_specs(kind, cfg, dims) {
            let value = match init {
                Init::FanIn { fan_in, factor } => {
                    let std = factor / (fan_in as f64).sqrt();
                    ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                }
                Init::Embedding => ArrayD::from_shape_simple_fn(IxDyn(&shape), || {
                    let z: f64 = StandardNormal.sample(rng);
                    z * 0.02
                }),
                Init::Zero => ArrayD::zeros(IxDyn(&shape)),
                Init::One => ArrayD::from_elem(IxDyn(&shape), 1.0),
            };
            tensors.insert(name, value);
        }
        ParameterSet { tensors }
    }

    /// Rebuild from named tensors, checking the layout matches the variant.
    pub fn from_tensors(
        kind: ModelKind,
        cfg: &NetworkConfig,
        dims: &ModelDims,
        tensors: BTreeMap<String, TensorValue>,
    ) -> Result<Self> {
        let specs = param_specs(kind, cfg, dims);
        if tensors.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &specs {
            match tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                _ => {}
            }
        }
        Ok(ParameterSet { tensors })
    }

    pub fn get(&self, name: &str) -> &TensorValue {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorValue {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorValue)> {
        self.tensors.iter()
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Place every tensor on a tape as a leaf, in name order.
    pub fn nodes(&self, tape: &mut Tape) -> ParamNodes {
        let map = self
            .tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone())))
            .collect();
        ParamNodes { map }
    }
}

/// Tape handles for every parameter of one forward pass.
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter node `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

// ---------------------------------------------------------------------------
// Sinusoidal encodings
// ---------------------------------------------------------------------------

/// Standard geometric sinusoid at a real-valued position.
pub fn sinusoid_point(pos: f64, d: usize) -> Array1<f64> {
    let mut out = Array1::zeros(d);
    for i in 0..d / 2 {
        let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = (pos * rate).sin();
        out[2 * i + 1] = (pos * rate).cos();
    }
    out
}

fn sinusoid_table(n: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, d));
    for p in 0..n {
        out.row_mut(p).assign(&sinusoid_point(p as f64, d));
    }
    out
}

/// Flow time embedded as a sinusoid over `[0, 1000]` followed by the
/// teacher's learned linear projection.
pub fn embed_flow_time(t: f64, params: &ParameterSet, cfg: &NetworkConfig) -> Array1<f64> {
    let sin = sinusoid_point(1000.0 * t, cfg.d_model);
    let w = params
        .get("time_mlp.w")
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("time_mlp.w 2-D");
    let b = params
        .get("time_mlp.b")
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("time_mlp.b 1-D");
    sin.dot(&w) + &b
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: NetworkConfig,
    pub dims: ModelDims,
    pub params: ParameterSet,
    nfe: AtomicU64,
}

/// Batched forward input. `B` scenes must share an agent count.
pub struct BatchInput<'a> {
    /// `[B, A, 6*t_p]`
    pub ctx: &'a Array3<f64>,
    /// Per scene, `A` agent-type indices.
    pub type_ids: &'a [Vec<usize>],
    /// `[B, K, A, 2*t_f]`: noisy trajectories (teacher) or noise (student).
    pub traj: &'a Array4<f64>,
    /// Per-scene flow time; required for the teacher, absent for the student.
    pub times: Option<&'a [f64]>,
}

/// Extra state for training-mode forwards.
pub struct TrainCtx<'r> {
    pub rng: &'r mut ChaCha8Rng,
    /// Whether the trajectory-embedding mask schedule is active.
    pub mask_enabled: bool,
}

/// Tape handles of a forward pass's outputs.
pub struct Forward {
    /// `[B, K, A, 2*t_f]`
    pub waypoints: NodeId,
    /// `[B, K]`
    pub logits: NodeId,
    /// Per-scene mask decisions actually drawn (teacher train mode).
    pub masked: Vec<bool>,
}

impl Model {
    pub fn new(kind: ModelKind, cfg: NetworkConfig, dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if dims.agent_types.is_empty() {
            return Err(Error::Config("model needs at least one agent type".into()));
        }
        let params = ParameterSet::init(kind, &cfg, &dims, rng);
        Ok(Model {
            kind,
            cfg,
            dims,
            params,
            nfe: AtomicU64::new(0),
        })
    }

    pub fn from_parts(kind: ModelKind, cfg: NetworkConfig, dims: ModelDims, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            kind,
            cfg,
            dims,
            params,
            nfe: AtomicU64::new(0),
        })
    }

    /// Network forward evaluations since the last reset.
    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }

    /// Agent-type indices for a scene, validated against the registry.
    pub fn type_ids(&self, scene: &Scene) -> Result<Vec<usize>> {
        scene
            .agents
            .iter()
            .map(|a| self.dims.type_index(&a.agent_type))
            .collect()
    }

    /// Full batched forward pass on a caller-provided tape.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        input: &BatchInput,
        mut train: Option<TrainCtx>,
    ) -> Result<Forward> {
        let (b_n, a_n) = (input.ctx.shape()[0], input.ctx.shape()[1]);
        let (k_n, tw) = (input.traj.shape()[1], self.dims.traj_width());
        if input.ctx.shape()[2] != self.dims.ctx_width() {
            return Err(Error::shape(
                "forward context",
                format!("[B, A, {}]", self.dims.ctx_width()),
                format!("{:?}", input.ctx.shape()),
            ));
        }
        if input.traj.shape() != [b_n, k_n, a_n, tw] {
            return Err(Error::shape(
                "forward trajectories",
                format!("[{b_n}, K, {a_n}, {tw}]"),
                format!("{:?}", input.traj.shape()),
            ));
        }
        if input.type_ids.len() != b_n || input.type_ids.iter().any(|ids| ids.len() != a_n) {
            return Err(Error::shape("forward type ids", format!("{b_n} x {a_n}"), "ragged"));
        }
        for ids in input.type_ids {
            for &id in ids {
                if id >= self.dims.agent_types.len() {
                    return Err(Error::UnknownAgentType(format!("type index {id}")));
                }
            }
        }
        match (self.kind, input.times) {
            (ModelKind::Teacher, None) => {
                return Err(Error::Config("teacher forward needs per-scene flow times".into()))
            }
            (ModelKind::Student, Some(_)) => {
                return Err(Error::Config("student forward takes no flow times".into()))
            }
            (ModelKind::Teacher, Some(ts)) if ts.len() != b_n => {
                return Err(Error::shape("flow times", format!("[{b_n}]"), format!("[{}]", ts.len())))
            }
            _ => {}
        }
        if !input.ctx.iter().all(|v| v.is_finite()) || !input.traj.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("forward input contains non-finite values".into()));
        }

        self.nfe.fetch_add(1, Ordering::Relaxed);
        let d = self.cfg.d_model;

        // Encoder over the agent axis.
        let h_enc = self.encode_tokens(tape, nodes, input, train.as_mut())?; // [B, A, d]

        // Trajectory embedding per (k, agent) token.
        let traj_leaf = tape.leaf(input.traj.clone().into_dyn());
        let flat = tape.reshape(traj_leaf, &[b_n * k_n * a_n, tw]);
        let emb = self.mlp(tape, nodes, "traj_mlp", flat);
        let mut traj_emb = tape.reshape(emb, &[b_n, k_n, a_n, d]);

        // Scene-level masking of the trajectory embedding (teacher training).
        let mut masked = vec![false; b_n];
        if let (ModelKind::Teacher, Some(tc)) = (self.kind, train.as_mut()) {
            if tc.mask_enabled {
                let times = input.times.expect("teacher times checked above");
                let mut mask = Array4::<f64>::zeros((b_n, 1, 1, 1));
                for b in 0..b_n {
                    let p = mask_threshold(times[b], self.cfg.mask_k, self.cfg.mask_m);
                    let fire = tc.rng.random::<f64>() < p;
                    masked[b] = fire;
                    mask[[b, 0, 0, 0]] = if fire { 0.0 } else { 1.0 };
                }
                let mask_leaf = tape.leaf(mask.into_dyn());
                let mask_b = tape.broadcast_to(mask_leaf, &[b_n, k_n, a_n, d]);
                traj_emb = tape.mul(traj_emb, mask_b);
            }
        }

        // Token assembly.
        let h3 = tape.reshape(h_enc, &[b_n, 1, a_n, d]);
        let h_b = tape.broadcast_to(h3, &[b_n, k_n, a_n, d]);
        let mut tokens = tape.add(traj_emb, h_b);

        if let (ModelKind::Teacher, Some(times)) = (self.kind, input.times) {
            let mut sin = Array2::zeros((b_n, d));
            for (b, &t) in times.iter().enumerate() {
                sin.row_mut(b).assign(&sinusoid_point(1000.0 * t, d));
            }
            let sin_leaf = tape.leaf(sin.into_dyn());
            let proj = tape.matmul(sin_leaf, nodes.get("time_mlp.w"));
            let proj = tape.add_bias(proj, nodes.get("time_mlp.b"));
            let proj4 = tape.reshape(proj, &[b_n, 1, 1, d]);
            let time_b = tape.broadcast_to(proj4, &[b_n, k_n, a_n, d]);
            tokens = tape.add(tokens, time_b);
        }

        let pe_h = tape.leaf(sinusoid_table(k_n, d).into_dyn());
        let pe_h4 = tape.reshape(pe_h, &[1, k_n, 1, d]);
        let pe_h_b = tape.broadcast_to(pe_h4, &[b_n, k_n, a_n, d]);
        tokens = tape.add(tokens, pe_h_b);

        let pe_a = tape.leaf(sinusoid_table(a_n, d).into_dyn());
        let pe_a4 = tape.reshape(pe_a, &[1, 1, a_n, d]);
        let pe_a_b = tape.broadcast_to(pe_a4, &[b_n, k_n, a_n, d]);
        tokens = tape.add(tokens, pe_a_b);

        // Factorized decoder.
        for i in 0..self.cfg.n_dec_blocks {
            // Attend across hypotheses: fold agents into the batch.
            let normed = self.layer_norm(tape, nodes, &format!("dec.{i}.ln_h"), tokens);
            let perm = tape.permute(normed, &[0, 2, 1, 3]); // [B, A, K, d]
            let folded = tape.reshape(perm, &[b_n * a_n, k_n, d]);
            let attended = self.attention(tape, nodes, &format!("dec.{i}.attn_h"), folded, train.as_mut());
            let unf = tape.reshape(attended, &[b_n, a_n, k_n, d]);
            let back = tape.permute(unf, &[0, 2, 1, 3]);
            tokens = tape.add(tokens, back);

            // Attend across agents: fold hypotheses into the batch.
            let normed = self.layer_norm(tape, nodes, &format!("dec.{i}.ln_a"), tokens);
            let folded = tape.reshape(normed, &[b_n * k_n, a_n, d]);
            let attended = self.attention(tape, nodes, &format!("dec.{i}.attn_a"), folded, train.as_mut());
            let back = tape.reshape(attended, &[b_n, k_n, a_n, d]);
            tokens = tape.add(tokens, back);

            let normed = self.layer_norm(tape, nodes, &format!("dec.{i}.ln_f"), tokens);
            let ff = self.ffn(tape, nodes, &format!("dec.{i}.ffn"), normed);
            tokens = tape.add(tokens, ff);
        }
        tokens = self.layer_norm(tape, nodes, "dec_out_ln", tokens);

        // Heads.
        let flat_tokens = tape.reshape(tokens, &[b_n * k_n * a_n, d]);
        let way = tape.matmul(flat_tokens, nodes.get("head_way.w"));
        let way = tape.add_bias(way, nodes.get("head_way.b"));
        let waypoints = tape.reshape(way, &[b_n, k_n, a_n, tw]);

        let conf = tape.matmul(flat_tokens, nodes.get("head_conf.w"));
        let conf = tape.add_bias(conf, nodes.get("head_conf.b"));
        let conf3 = tape.reshape(conf, &[b_n, k_n, a_n]);
        let logits = tape.mean_axis(conf3, 2);

        Ok(Forward {
            waypoints,
            logits,
            masked,
        })
    }

    /// Encoder stack producing `[B, A, d]` agent embeddings.
    fn encode_tokens(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        input: &BatchInput,
        mut train: Option<&mut TrainCtx>,
    ) -> Result<NodeId> {
        let (b_n, a_n) = (input.ctx.shape()[0], input.ctx.shape()[1]);
        let d = self.cfg.d_model;

        let ctx_leaf = tape.leaf(input.ctx.clone().into_dyn());
        let flat = tape.reshape(ctx_leaf, &[b_n * a_n, self.dims.ctx_width()]);
        let mlp_out = self.mlp(tape, nodes, "ctx_mlp", flat);

        let idx: Vec<usize> = input.type_ids.iter().flat_map(|ids| ids.iter().copied()).collect();
        let type_rows = tape.gather_rows(nodes.get("type_embed"), &idx);
        let tokens_flat = tape.add(mlp_out, type_rows);
        let mut tokens = tape.reshape(tokens_flat, &[b_n, a_n, d]);

        for i in 0..self.cfg.n_enc_layers {
            let normed = self.layer_norm(tape, nodes, &format!("enc.{i}.ln1"), tokens);
            let attended = self.attention(tape, nodes, &format!("enc.{i}.attn"), normed, train.as_deref_mut());
            tokens = tape.add(tokens, attended);
            let normed = self.layer_norm(tape, nodes, &format!("enc.{i}.ln2"), tokens);
            let ff = self.ffn(tape, nodes, &format!("enc.{i}.ffn"), normed);
            tokens = tape.add(tokens, ff);
        }
        Ok(self.layer_norm(tape, nodes, "enc_out_ln", tokens))
    }

    /// Multi-head self-attention over the middle axis of `[N, L, d]`.
    fn attention(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        prefix: &str,
        x: NodeId,
        train: Option<&mut TrainCtx>,
    ) -> NodeId {
        let shape = tape.shape(x);
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let h = self.cfg.n_heads;
        let dh = d / h;

        let flat = tape.reshape(x, &[n * l, d]);
        let mut heads = |w: &str, b: &str| {
            let p = tape.matmul(flat, nodes.get(&format!("{prefix}.{w}")));
            let p = tape.add_bias(p, nodes.get(&format!("{prefix}.{b}")));
            let p = tape.reshape(p, &[n, l, h, dh]);
            tape.permute(p, &[0, 2, 1, 3]) // [N, h, L, dh]
        };
        let q = heads("wq", "bq");
        let k = heads("wk", "bk");
        let v = heads("wv", "bv");

        let kt = tape.permute(k, &[0, 1, 3, 2]);
        let scores = tape.batch_matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let mut probs = tape.softmax_last(scaled);
        if let Some(tc) = train {
            if self.cfg.dropout > 0.0 {
                probs = tape.dropout(probs, self.cfg.dropout, tc.rng);
            }
        }
        let ctxv = tape.batch_matmul(probs, v);
        let merged = tape.permute(ctxv, &[0, 2, 1, 3]);
        let merged = tape.reshape(merged, &[n * l, d]);
        let out = tape.matmul(merged, nodes.get(&format!("{prefix}.wo")));
        let out = tape.add_bias(out, nodes.get(&format!("{prefix}.bo")));
        tape.reshape(out, &[n, l, d])
    }

    /// Two-layer GELU MLP applied to the trailing axis of a 2-D input.
    fn mlp(&self, tape: &mut Tape, nodes: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
        let h = tape.matmul(x, nodes.get(&format!("{prefix}.w1")));
        let h = tape.add_bias(h, nodes.get(&format!("{prefix}.b1")));
        let h = tape.gelu(h);
        let h = tape.matmul(h, nodes.get(&format!("{prefix}.w2")));
        tape.add_bias(h, nodes.get(&format!("{prefix}.b2")))
    }

    /// Position-wise feed-forward over the last axis of any-rank input.
    fn ffn(&self, tape: &mut Tape, nodes: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
        let shape = tape.shape(x);
        let d = *shape.last().unwrap();
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = tape.reshape(x, &[n, d]);
        let h = tape.matmul(flat, nodes.get(&format!("{prefix}.w1")));
        let h = tape.add_bias(h, nodes.get(&format!("{prefix}.b1")));
        let h = tape.gelu(h);
        let h = tape.matmul(h, nodes.get(&format!("{prefix}.w2")));
        let h = tape.add_bias(h, nodes.get(&format!("{prefix}.b2")));
        tape.reshape(h, &shape)
    }

    fn layer_norm(&self, tape: &mut Tape, nodes: &ParamNodes, prefix: &str, x: NodeId) -> NodeId {
        let gamma = nodes.get(&format!("{prefix}.gamma"));
        let beta = nodes.get(&format!("{prefix}.beta"));
        tape.layer_norm(x, gamma, beta, LN_EPS)
    }

    // -- single-scene convenience wrappers (eval mode) ----------------------

    /// Encoder output for one scene: `[A, d_model]`.
    pub fn encode_context(&self, ctx: &ContextTensor, type_ids: &[usize]) -> Result<Array2<f64>> {
        let (a_n, w) = (ctx.n_agents(), ctx.values.ncols());
        let ctx3 = ctx.values.clone().into_shape_with_order((1, a_n, w)).expect("ctx batch");
        let ids = type_ids.to_vec();
        let dummy_traj = Array4::zeros((1, 1, a_n, self.dims.traj_width()));
        let mut tape = Tape::new();
        let nodes = self.params.nodes(&mut tape);
        let input = BatchInput {
            ctx: &ctx3,
            type_ids: std::slice::from_ref(&ids),
            traj: &dummy_traj,
            times: None,
        };
        let out = self.encode_tokens(&mut tape, &nodes, &input, None)?;
        let v = tape.value(out).clone();
        Ok(v.into_shape_with_order((a_n, self.cfg.d_model))
            .expect("encoder output shape")
            .into_dimensionality()
            .expect("encoder output 2-D"))
    }

    /// Teacher prediction for one scene in eval mode.
    pub fn forward_teacher(&self, state: &FlowState, ctx: &ContextTensor, type_ids: &[usize]) -> Result<PredictionSet> {
        if self.kind != ModelKind::Teacher {
            return Err(Error::Config("forward_teacher on a student model".into()));
        }
        self.forward_single(&state.values, ctx, type_ids, Some(state.t))
    }

    /// Student prediction for one scene (deterministic in `z`).
    pub fn forward_student(&self, z: &Array3<f64>, ctx: &ContextTensor, type_ids: &[usize]) -> Result<PredictionSet> {
        if self.kind != ModelKind::Student {
            return Err(Error::Config("forward_student on a teacher model".into()));
        }
        self.forward_single(z, ctx, type_ids, None)
    }

    fn forward_single(
        &self,
        traj: &Array3<f64>,
        ctx: &ContextTensor,
        type_ids: &[usize],
        t: Option<f64>,
    ) -> Result<PredictionSet> {
        let (k_n, a_n, tw) = (traj.shape()[0], traj.shape()[1], traj.shape()[2]);
        let ctx3 = ctx
            .values
            .clone()
            .into_shape_with_order((1, ctx.n_agents(), ctx.values.ncols()))
            .expect("ctx batch");
        let traj4 = traj.clone().into_shape_with_order((1, k_n, a_n, tw)).expect("traj batch");
        let times: Vec<f64> = t.into_iter().collect();
        let ids = type_ids.to_vec();
        let mut tape = Tape::new();
        let nodes = self.params.nodes(&mut tape);
        let fwd = self.forward_batch(
            &mut tape,
            &nodes,
            &BatchInput {
                ctx: &ctx3,
                type_ids: std::slice::from_ref(&ids),
                traj: &traj4,
                times: if times.is_empty() { None } else { Some(&times) },
            },
            None,
        )?;
        let waypoints = tape
            .value(fwd.waypoints)
            .clone()
            .into_shape_with_order((k_n, a_n, tw))
            .expect("waypoints shape")
            .into_dimensionality::<ndarray::Ix3>()
            .expect("waypoints 3-D");
        let logits = tape
            .value(fwd.logits)
            .clone()
            .into_shape_with_order(k_n)
            .expect("logits shape")
            .into_dimensionality::<ndarray::Ix1>()
            .expect("logits 1-D");
        PredictionSet::new(waypoints, logits)
    }
}
