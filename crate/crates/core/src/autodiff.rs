//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation as it computes values eagerly; calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates vector-Jacobian products into every node, leaves included.
//! The op set is exactly what the forecasting networks need, nothing more.
//! Inference uses the same forward code and simply never calls `backward`.
//!
//! All stored values are owned, standard-layout `ArrayD<f64>`; scalars are
//! zero-dimensional arrays.

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type TensorValue = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `x + b` with `b` a vector over the last axis.
    AddBias(NodeId, NodeId),
    /// 2-D `a @ b`.
    MatMul(NodeId, NodeId),
    /// `[..., m, k] @ [..., k, n]` with equal leading batch axes.
    BatchMatMul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    BroadcastTo(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: TensorValue,
        inv_std: TensorValue,
    },
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        mask: TensorValue,
    },
    /// Row lookup into a `[rows, d]` table.
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    /// `x.index_axis(0, index)`.
    Select {
        x: NodeId,
        index: usize,
    },
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    /// Frobenius norm (not squared) reduced to a scalar.
    FrobNorm(NodeId),
    /// Softmax cross-entropy of 1-D logits against a fixed class index.
    CrossEntropyIndex {
        logits: NodeId,
        target: usize,
        probs: TensorValue,
    },
}

struct Node {
    value: TensorValue,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorValue {
        &self.nodes[id.0].value
    }

    /// The value of a single-element node as `f64`.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on a node with {} elements", v.len());
        *v.iter().next().expect("empty tensor")
    }

    fn push(&mut self, value: TensorValue, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: impl Into<TensorValue>) -> NodeId {
        self.push(value.into(), Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x);
        let bs = self.shape(b);
        assert_eq!(bs.len(), 1, "add_bias: bias must be 1-D");
        assert_eq!(xs.last(), bs.last(), "add_bias: last axis mismatch");
        let bv = self.value(b).clone();
        let v = self.value(x) + &bv.broadcast(IxDyn(&xs)).expect("bias broadcast");
        self.push(v, Op::AddBias(x, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bmm(self.value(a), self.value(b));
        self.push(v, Op::BatchMatMul(a, b))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone();
        assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape: element count");
        let v = v.into_shape_with_order(IxDyn(shape)).expect("reshape standard layout");
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(v, Op::Permute(x, axes.to_vec()))
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("broadcast {:?} -> {:?}", self.shape(x), shape))
            .to_owned();
        self.push(v, Op::BroadcastTo(x))
    }

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        self.push(v, Op::SoftmaxLast(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let d = *xv.shape().last().expect("layer_norm needs an axis") as f64;
        let mut xhat = xv.clone();
        let mut inv_std = ArrayD::zeros(IxDyn(&xv.shape()[..xv.ndim() - 1]));
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let s = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mu) * s);
            *is = s;
        }
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let shape = xv.shape().to_vec();
        let v = &xhat * &gv.broadcast(IxDyn(&shape)).expect("gamma broadcast")
            + &bv.broadcast(IxDyn(&shape)).expect("beta broadcast");
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(gelu_tanh);
        self.push(v, Op::Gelu(x))
    }

    /// Inverted dropout: keeps entries with probability `1 - p`, scaling
    /// survivors by `1/(1-p)`. Train-time only; skip the call in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout rate must lie in [0, 1)");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask = ArrayD::from_shape_simple_fn(IxDyn(&self.shape(x)), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let tv = self.value(table).view().into_dimensionality::<Ix2>().expect("gather table 2-D");
        let mut v = ndarray::Array2::zeros((idx.len(), tv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).assign(&tv.row(i));
        }
        self.push(v.into_dyn(), Op::GatherRows { table, idx: idx.to_vec() })
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = self.value(x).index_axis(Axis(0), index).to_owned();
        self.push(v, Op::Select { x, index })
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.value(x).mean_axis(Axis(axis)).expect("mean_axis");
        self.push(v, Op::MeanAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn frob_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::FrobNorm(x))
    }

    pub fn cross_entropy_index(&mut self, logits: NodeId, target: usize) -> NodeId {
        let lv = self.value(logits).view().into_dimensionality::<Ix1>().expect("logits 1-D");
        assert!(target < lv.len(), "cross_entropy_index: target out of range");
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = lv.mapv(|z| (z - max).exp());
        let sum = exp.sum();
        let probs = (&exp / sum).into_dyn();
        let loss = sum.ln() + max - lv[target];
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::CrossEntropyIndex {
            logits,
            target,
            probs,
        })
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.value(id).shape().to_vec()
    }

    /// Reverse sweep from a single-element `root`. Returns per-node adjoints.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<TensorValue>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_val = &self.nodes[root.0].value;
        assert_eq!(root_val.len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(ArrayD::from_elem(root_val.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.accumulate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, dy: &TensorValue, grads: &mut [Option<TensorValue>]) {
        // ndarray's `dot` fast paths can hand back Fortran-layout results;
        // normalizing here keeps every stored adjoint reshape-safe.
        let mut send = |id: NodeId, g: TensorValue| {
            let g = if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().into_owned()
            };
            match &mut grads[id.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                send(*b, -dy);
            }
            Op::Mul(a, b) => {
                send(*a, dy * self.value(*b));
                send(*b, dy * self.value(*a));
            }
            Op::Scale(x, c) => send(*x, dy * *c),
            Op::AddBias(x, b) => {
                send(*x, dy.clone());
                let db = sum_to_shape(dy, &self.shape(*b));
                send(*b, db);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                send(*a, dyv.dot(&bv.t()).into_dyn());
                send(*b, av.t().dot(&dyv).into_dyn());
            }
            Op::BatchMatMul(a, b) => {
                let da = bmm(dy, &transpose_last2(self.value(*b)));
                let db = bmm(&transpose_last2(self.value(*a)), dy);
                send(*a, da);
                send(*b, db);
            }
            Op::Reshape(x) => {
                let v = dy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&self.shape(*x)))
                    .expect("reshape backward");
                send(*x, v);
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (to, &from) in axes.iter().enumerate() {
                    inv[from] = to;
                }
                let v = dy.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                send(*x, v);
            }
            Op::BroadcastTo(x) => send(*x, sum_to_shape(dy, &self.shape(*x))),
            Op::SoftmaxLast(x) => {
                let y = self.value(i_node(i));
                let mut dx = dy * y;
                for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    row.iter_mut().zip(yrow.iter()).for_each(|(r, &yv)| *r -= dot * yv);
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = xhat.shape().to_vec();
                let d = *shape.last().unwrap() as f64;
                let gv = self.value(*gamma).broadcast(IxDyn(&shape)).unwrap().to_owned();
                let dxhat = dy * &gv;
                send(*gamma, sum_to_shape(&(dy * xhat), &self.shape(*gamma)));
                send(*beta, sum_to_shape(dy, &self.shape(*beta)));
                let mut dx = dxhat.clone();
                for ((mut row, xrow), &is) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(xhat.rows())
                    .zip(inv_std.iter())
                {
                    let mean_d = row.sum() / d;
                    let mean_dx: f64 = row.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    row.iter_mut()
                        .zip(xrow.iter())
                        .for_each(|(r, &xh)| *r = is * (*r - mean_d - xh * mean_dx));
                }
                send(*x, dx);
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).mapv(gelu_tanh_grad) * dy;
                send(*x, dx);
            }
            Op::Dropout { x, mask } => send(*x, dy * mask),
            Op::GatherRows { table, idx } => {
                let mut dt = ArrayD::zeros(IxDyn(&self.shape(*table)));
                {
                    let mut dt2 = dt.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let dy2 = dy.view().into_dimensionality::<Ix2>().unwrap();
                    for (r, &row_idx) in idx.iter().enumerate() {
                        let mut target = dt2.row_mut(row_idx);
                        target += &dy2.row(r);
                    }
                }
                send(*table, dt);
            }
            Op::Select { x, index } => {
                let mut dx = ArrayD::zeros(IxDyn(&self.shape(*x)));
                dx.index_axis_mut(Axis(0), *index).assign(dy);
                send(*x, dx);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let n = shape[*axis] as f64;
                let expanded = dy
                    .clone()
                    .insert_axis(Axis(*axis))
                    .broadcast(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                send(*x, expanded / n);
            }
            Op::SumAll(x) => {
                let g = dy.iter().next().copied().unwrap_or(0.0);
                send(*x, ArrayD::from_elem(IxDyn(&self.shape(*x)), g));
            }
            Op::FrobNorm(x) => {
                let norm = self.scalar(i_node(i));
                let g = dy.iter().next().copied().unwrap_or(0.0);
                let dx = if norm > 1e-300 {
                    self.value(*x) * (g / norm)
                } else {
                    ArrayD::zeros(IxDyn(&self.shape(*x)))
                };
                send(*x, dx);
            }
            Op::CrossEntropyIndex { logits, target, probs } => {
                let g = dy.iter().next().copied().unwrap_or(0.0);
                let mut dl = probs * g;
                dl[IxDyn(&[*target])] -= g;
                send(*logits, dl);
            }
        }
    }
}

fn i_node(i: usize) -> NodeId {
    NodeId(i)
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<TensorValue>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` if the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&TensorValue> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_tanh_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Batched matmul over the last two axes; leading axes must match exactly.
fn bmm(a: &TensorValue, b: &TensorValue) -> TensorValue {
    let (ar, br) = (a.ndim(), b.ndim());
    assert!(ar >= 2 && br >= 2, "bmm operands need >= 2 dims");
    assert_eq!(ar, br, "bmm operands need equal rank");
    assert_eq!(&a.shape()[..ar - 2], &b.shape()[..br - 2], "bmm batch axes differ");
    let (m, ka) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    assert_eq!(ka, kb, "bmm inner dimensions differ");
    let batch: usize = a.shape()[..ar - 2].iter().product();

    let a_std = a.as_standard_layout();
    let b_std = b.as_standard_layout();
    let a3 = a_std.view().into_shape_with_order((batch, m, ka)).expect("bmm lhs reshape");
    let b3 = b_std.view().into_shape_with_order((batch, kb, n)).expect("bmm rhs reshape");
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    let mut shape = a.shape()[..ar - 2].to_vec();
    shape.push(m);
    shape.push(n);
    out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn transpose_last2(x: &TensorValue) -> TensorValue {
    let r = x.ndim();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    x.view().permuted_axes(IxDyn(&axes)).as_standard_layout().into_owned()
}

/// Sum `dy` down to `target` shape, inverting a numpy-style broadcast.
fn sum_to_shape(dy: &TensorValue, target: &[usize]) -> TensorValue {
    let mut v = dy.clone();
    while v.ndim() > target.len() {
        v = v.sum_axis(Axis(0));
    }
    for (axis, (&have, &want)) in v.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if have != want {
            assert_eq!(want, 1, "sum_to_shape: incompatible shapes");
            v = v.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    v
}

pub mod check {
    //! Finite-difference gradient verification used throughout the test
    //! suites: evaluate a scalar function of a flat parameter vector, compare
    //! its analytic gradient against central differences.

    /// Central finite differences of `f` at `x`.
    pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], eps: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            g[i] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    /// Worst relative disagreement between two gradients, with a floor that
    /// keeps near-zero entries from dominating.
    pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        assert_eq!(analytic.len(), numeric.len());
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::check::{finite_diff, max_rel_error};
    use super::*;
    use crate::rng::subsystem_rng;
    use ndarray::IxDyn;

    const TOL: f64 = 1e-6;
    const EPS: f64 = 1e-5;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = subsystem_rng(seed, "adtest");
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    /// Check d/dx of `weights . flatten(build(x))` against central
    /// differences, probing every output entry of the op under test.
    fn check_op(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Tape, NodeId) -> NodeId,
    ) -> f64 {
        let n: usize = shape.iter().product();
        let x0 = rand_vec(n, seed);
        let eval = |xs: &[f64]| -> (f64, Option<Vec<f64>>, usize) {
            let mut tape = Tape::new();
            let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(shape), xs.to_vec()).unwrap());
            let y = build(&mut tape, x);
            let m = tape.value(y).len();
            let w = tape.leaf(ArrayD::from_shape_vec(IxDyn(&tape.shape(y)), rand_vec(m, seed + 1)).unwrap());
            let prod = tape.mul(y, w);
            let loss = tape.sum_all(prod);
            (tape.scalar(loss), None::<Vec<f64>>, x.0)
        };
        // Analytic gradient.
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(shape), x0.clone()).unwrap());
        let y = build(&mut tape, x);
        let m = tape.value(y).len();
        let w = tape.leaf(ArrayD::from_shape_vec(IxDyn(&tape.shape(y)), rand_vec(m, seed + 1)).unwrap());
        let prod = tape.mul(y, w);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let analytic: Vec<f64> = grads.get(x).unwrap().iter().cloned().collect();
        let numeric = finite_diff(|xs| eval(xs).0, &x0, EPS);
        max_rel_error(&analytic, &numeric)
    }

    #[test]
    fn elementwise_ops_match_fd() {
        let err = check_op(&[3, 4], 1, |t, x| {
            let c = t.leaf(ArrayD::from_elem(IxDyn(&[3, 4]), 0.7));
            let a = t.add(x, c);
            let s = t.sub(a, x);
            let m = t.mul(s, x);
            t.scale(m, -1.3)
        });
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn matmul_matches_fd_both_sides() {
        let err_a = check_op(&[3, 4], 2, |t, x| {
            let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[4, 2]), rand_vec(8, 99)).unwrap());
            t.matmul(x, b)
        });
        let err_b = check_op(&[4, 2], 3, |t, x| {
            let a = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), rand_vec(12, 98)).unwrap());
            t.matmul(a, x)
        });
        assert!(err_a < TOL && err_b < TOL, "{err_a} {err_b}");
    }

    #[test]
    fn batch_matmul_matches_fd() {
        let err_a = check_op(&[2, 3, 2, 4], 4, |t, x| {
            let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3, 4, 2]), rand_vec(48, 97)).unwrap());
            t.batch_matmul(x, b)
        });
        let err_b = check_op(&[2, 3, 4, 2], 5, |t, x| {
            let a = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3, 2, 4]), rand_vec(48, 96)).unwrap());
            t.batch_matmul(a, x)
        });
        assert!(err_a < TOL && err_b < TOL, "{err_a} {err_b}");
    }

    #[test]
    fn bmm_agrees_with_matmul_on_single_batch() {
        let mut tape = Tape::new();
        let a = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3, 4]), rand_vec(12, 6)).unwrap());
        let b = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 4, 5]), rand_vec(20, 7)).unwrap());
        let y = tape.batch_matmul(a, b);
        let a2 = tape.reshape(a, &[3, 4]);
        let b2 = tape.reshape(b, &[4, 5]);
        let y2 = tape.matmul(a2, b2);
        let y2r = tape.reshape(y2, &[1, 3, 5]);
        assert_eq!(tape.value(y), tape.value(y2r));
    }

    #[test]
    fn shape_ops_match_fd() {
        let err = check_op(&[2, 3, 4], 8, |t, x| {
            let p = t.permute(x, &[2, 0, 1]);
            let r = t.reshape(p, &[4, 6]);
            let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), rand_vec(6, 95)).unwrap());
            t.add_bias(r, b)
        });
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn broadcast_matches_fd() {
        let err = check_op(&[1, 3, 1], 9, |t, x| t.broadcast_to(x, &[2, 3, 4]));
        assert!(err < TOL, "rel err {err}");
        // Leading-axis expansion.
        let err2 = check_op(&[3, 4], 10, |t, x| {
            let r = t.reshape(x, &[1, 3, 4]);
            t.broadcast_to(r, &[5, 3, 4])
        });
        assert!(err2 < TOL, "rel err {err2}");
    }

    #[test]
    fn softmax_matches_fd() {
        let err = check_op(&[3, 5], 11, |t, x| t.softmax_last(x));
        assert!(err < TOL, "rel err {err}");
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 4]), rand_vec(8, 12)).unwrap());
        let y = tape.softmax_last(x);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_matches_fd_all_inputs() {
        let err_x = check_op(&[4, 6], 13, |t, x| {
            let g = t.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), rand_vec(6, 94)).unwrap());
            let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), rand_vec(6, 93)).unwrap());
            t.layer_norm(x, g, b, 1e-5)
        });
        let err_g = check_op(&[6], 14, |t, g| {
            let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[4, 6]), rand_vec(24, 92)).unwrap());
            let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), rand_vec(6, 91)).unwrap());
            t.layer_norm(x, g, b, 1e-5)
        });
        let err_b = check_op(&[6], 15, |t, b| {
            let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[4, 6]), rand_vec(24, 90)).unwrap());
            let g = t.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), rand_vec(6, 89)).unwrap());
            t.layer_norm(x, g, b, 1e-5)
        });
        assert!(err_x < 1e-5 && err_g < TOL && err_b < TOL, "{err_x} {err_g} {err_b}");
    }

    #[test]
    fn gelu_matches_fd() {
        let err = check_op(&[3, 7], 16, |t, x| t.gelu(x));
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn dropout_scales_and_masks() {
        let err = check_op(&[6, 5], 17, |t, x| {
            let mut rng = subsystem_rng(5, "dropout");
            t.dropout(x, 0.4, &mut rng)
        });
        assert!(err < TOL, "rel err {err}");
        // Zero rate is the identity (same node).
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let mut rng = subsystem_rng(5, "dropout");
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
    }

    #[test]
    fn gather_select_mean_match_fd() {
        let err_g = check_op(&[5, 3], 18, |t, x| t.gather_rows(x, &[4, 0, 0, 2]));
        let err_s = check_op(&[4, 3, 2], 19, |t, x| t.select(x, 2));
        let err_m = check_op(&[3, 4, 5], 20, |t, x| t.mean_axis(x, 1));
        assert!(err_g < TOL && err_s < TOL && err_m < TOL, "{err_g} {err_s} {err_m}");
    }

    #[test]
    fn reductions_match_fd() {
        let x0 = rand_vec(12, 21);
        // frob_norm
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), xs.to_vec()).unwrap());
            let n = t.frob_norm(x);
            t.scalar(n)
        };
        let numeric = finite_diff(f, &x0, EPS);
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), x0.clone()).unwrap());
        let n = t.frob_norm(x);
        let grads = t.backward(n);
        let analytic: Vec<f64> = grads.get(x).unwrap().iter().cloned().collect();
        assert!(max_rel_error(&analytic, &numeric) < TOL);

        // cross entropy
        let l0 = rand_vec(5, 22);
        let ce = |xs: &[f64]| {
            let mut t = Tape::new();
            let l = t.leaf(ArrayD::from_shape_vec(IxDyn(&[5]), xs.to_vec()).unwrap());
            let y = t.cross_entropy_index(l, 3);
            t.scalar(y)
        };
        let numeric = finite_diff(ce, &l0, EPS);
        let mut t = Tape::new();
        let l = t.leaf(ArrayD::from_shape_vec(IxDyn(&[5]), l0.clone()).unwrap());
        let y = t.cross_entropy_index(l, 3);
        let grads = t.backward(y);
        let analytic: Vec<f64> = grads.get(l).unwrap().iter().cloned().collect();
        assert!(max_rel_error(&analytic, &numeric) < TOL);
    }

    #[test]
    fn cross_entropy_reference_values() {
        // Uniform two-way logits: ln 2.
        let mut t = Tape::new();
        let l = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.0]).unwrap());
        let y = t.cross_entropy_index(l, 0);
        assert!((t.scalar(y) - std::f64::consts::LN_2).abs() < 1e-12);
        // Single class: ln 1 = 0.
        let l1 = t.leaf(ArrayD::from_shape_vec(IxDyn(&[1]), vec![3.7]).unwrap());
        let y1 = t.cross_entropy_index(l1, 0);
        assert!(t.scalar(y1).abs() < 1e-12);
    }

    #[test]
    fn fan_in_through_shared_node_accumulates() {
        // loss = sum(x*x) + sum(x) touches x twice; gradient must sum.
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap());
        let sq = t.mul(x, x);
        let s1 = t.sum_all(sq);
        let s2 = t.sum_all(x);
        let loss = t.add(s1, s2);
        let grads = t.backward(loss);
        let g: Vec<f64> = grads.get(x).unwrap().iter().cloned().collect();
        assert_eq!(g, vec![3.0, -3.0, 2.0]);
    }

    #[test]
    fn backward_skips_unrelated_nodes() {
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let unrelated = t.leaf(ArrayD::from_elem(IxDyn(&[2]), 5.0));
        let s = t.sum_all(x);
        let grads = t.backward(s);
        assert!(grads.get(unrelated).is_none());
        assert!(grads.get(x).is_some());
    }
}
