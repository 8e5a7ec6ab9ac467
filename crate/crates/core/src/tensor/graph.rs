use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, split_axis, swap_axes};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to the input of [`Graph::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[..., m, k] x b[k, n]` (shared right operand) or batched when `b`
    /// carries the same leading dims as `a`.
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    /// Elementwise with `b` broadcast over the leading dims of `a`.
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Minimum { a: Var, b: Var },
    SoftmaxLast { a: Var },
    LayerNormLast { a: Var, inv_std: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    SwapAxes { a: Var, d0: usize, d1: usize },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    /// `softmax(q k^T * scale) v` over the last two dims; keeps the
    /// attention probabilities for the backward pass.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// A define-by-run computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v` (zeros if `v` does not influence the loss).
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var> {
        ensure_finite(op, value.data())?;
        self.nodes.push(Node {
            value,
            op: node_op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that is not tied to any parameter (inputs, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// A leaf holding a copy of a registered parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).tensor.clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Attention probabilities recorded by an [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: inner dims differ")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}: batch dims differ"),
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let b_off = if shared_rhs { 0 } else { bi * k * n };
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        )
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sb, sa) {
            return Err(Error::shape(
                name,
                format!("{sb:?} does not broadcast onto {sa:?}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Tensor::new(sa.to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b })
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.unary(a, |x| x * factor);
        self.push("scale", t, Op::Scale { a, factor })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.unary(a, |x| x + c);
        self.push("add_scalar", t, Op::AddScalar { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f64::tanh);
        self.push("tanh", t, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, f64::exp);
        self.push("exp", t, Op::Exp { a })
    }

    /// Natural log with the input clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| x.max(LOG_FLOOR).ln());
        self.push("log", t, Op::Log { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Contract(format!("clamp bounds {lo} > {hi}")));
        }
        let t = self.unary(a, |x| x.clamp(lo, hi));
        self.push("clamp", t, Op::Clamp { a, lo, hi })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "minimum",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let t = self.broadcast_binary("minimum", a, b, f64::min)?;
        self.push("minimum", t, Op::Minimum { a, b })
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", t, Op::SoftmaxLast { a })
    }

    /// Normalize each last-dim slice to zero mean and unit variance (no
    /// affine transform; compose with `mul`/`add` for gain and bias).
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", t, Op::LayerNormLast { a, inv_std })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean { a })
    }

    fn reduce_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<(Tensor, usize)> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::shape(
                name,
                format!("axis {axis} out of range for {:?}", t.shape()),
            ));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let data = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::new(shape, out)?, len))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (t, _) = self.reduce_axis("sum_axis", a, axis)?;
        self.push("sum_axis", t, Op::SumAxis { a, axis })
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut t, len) = self.reduce_axis("mean_axis", a, axis)?;
        let inv = 1.0 / len as f64;
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
        self.push("mean_axis", t, Op::MeanAxis { a, axis })
    }

    /// Exchange two axes (a transpose when they are the last two).
    pub fn swap_axes(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let t = self.value(a);
        if d0 >= t.rank() || d1 >= t.rank() {
            return Err(Error::shape(
                "swap_axes",
                format!("axes ({d0},{d1}) out of range for {:?}", t.shape()),
            ));
        }
        let data = swap_axes(t.data(), t.shape(), d0, d1);
        let mut shape = t.shape().to_vec();
        shape.swap(d0, d1);
        self.push("swap_axes", Tensor::new(shape, data)?, Op::SwapAxes { a, d0, d1 })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        self.swap_axes(a, r - 2, r - 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape { a })
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!(
                    "[{start}, {}) along axis {axis} of {:?}",
                    start + len,
                    t.shape()
                ),
            ));
        }
        let (outer, full, inner) = split_axis(t.shape(), axis);
        let data = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { a, axis, start })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", "axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base_shape:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Scaled dot-product attention core over the last two dims:
    /// `softmax(q k^T * scale) v`, with shared leading (batch) dims.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        let r = sq.len();
        let ok = r >= 2
            && sk.len() == r
            && sv.len() == r
            && sq[..r - 2] == sk[..r - 2]
            && sq[..r - 2] == sv[..r - 2]
            && sq[r - 1] == sk[r - 1]
            && sk[r - 2] == sv[r - 2];
        if !ok {
            return Err(Error::shape(
                "attention",
                format!("q {sq:?}, k {sk:?}, v {sv:?}"),
            ));
        }
        let (tq, d) = (sq[r - 2], sq[r - 1]);
        let tk = sk[r - 2];
        let dv = sv[r - 1];
        let batch: usize = sq[..r - 2].iter().product();
        let mut probs = vec![0.0; batch * tq * tk];
        let mut out = vec![0.0; batch * tq * dv];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for b in 0..batch {
                let p = &mut probs[b * tq * tk..(b + 1) * tq * tk];
                gemm_nt_acc(
                    &qd[b * tq * d..(b + 1) * tq * d],
                    &kd[b * tk * d..(b + 1) * tk * d],
                    p,
                    tq,
                    d,
                    tk,
                );
                for row in p.chunks_mut(tk) {
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                gemm_acc(
                    p,
                    &vd[b * tk * dv..(b + 1) * tk * dv],
                    &mut out[b * tq * dv..(b + 1) * tq * dv],
                    tq,
                    tk,
                    dv,
                );
            }
        }
        let mut shape = sq[..r - 2].to_vec();
        shape.extend([tq, dv]);
        self.push(
            "attention",
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
        )
    }

    /// Backpropagate from the scalar `loss`, accumulating into the gradients
    /// of every trainable parameter that appears in the graph. Calling it
    /// twice without [`ParamStore::zero_grad`] adds the contributions.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                if store.get(id).trainable {
                    store.accumulate_grad(id, g);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to every node, without touching
    /// any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = val(*a);
                let bv = val(*b);
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let b_off = if *shared_rhs { 0 } else { bi * k * n };
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    gemm_nt_acc(
                        gc,
                        &bv[b_off..b_off + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                    gemm_tn_acc(
                        &av[bi * m * k..(bi + 1) * m * k],
                        gc,
                        &mut gb[b_off..b_off + k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g);
                let nb = val(*b).len();
                accumulate(grads, *b, &fold(g, nb));
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g);
                let nb = val(*b).len();
                let gb: Vec<f64> = fold(g, nb).into_iter().map(|x| -x).collect();
                accumulate(grads, *b, &gb);
            }
            Op::Mul { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                let nb = bv.len();
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect();
                let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &fold(&prod, nb));
            }
            Op::Scale { a, factor } => {
                let ga: Vec<f64> = g.iter().map(|x| x * factor).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddScalar { a } | Op::Reshape { a } => accumulate(grads, *a, g),
            Op::Tanh { a } => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Exp { a } => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(gi, y)| gi * y).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Log { a } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| if x > LOG_FLOOR { gi / x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Clamp { a, lo, hi } => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Minimum { a, b } => {
                let av = val(*a);
                let bv = val(*b);
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::SoftmaxLast { a } => {
                let d = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::LayerNormLast { a, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                let df = d as f64;
                let mut ga = vec![0.0; g.len()];
                for (((gr, yr), dst), inv) in g
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(ga.chunks_mut(d))
                    .zip(inv_std)
                {
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = inv / df * (df * gi - sum_g - yi * sum_gy);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::Sum { a } => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let factor = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (x, s) in dst.iter_mut().zip(src) {
                            *x = s * factor;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::SwapAxes { a, d0, d1 } => {
                let ga = swap_axes(g, node.value.shape(), *d0, *d1);
                accumulate(grads, *a, &ga);
            }
            Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape();
                let (outer, full, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    ga[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *a, &ga);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(grads, v, &gv);
                    offset += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let sq = self.nodes[q.0].value.shape();
                let r = sq.len();
                let (tq, d) = (sq[r - 2], sq[r - 1]);
                let tk = self.nodes[k.0].value.shape()[r - 2];
                let dv = self.nodes[v.0].value.shape()[r - 1];
                let batch: usize = sq[..r - 2].iter().product();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; tq * tk];
                for b in 0..batch {
                    let p = &probs[b * tq * tk..(b + 1) * tq * tk];
                    let go = &g[b * tq * dv..(b + 1) * tq * dv];
                    let vb = &vd[b * tk * dv..(b + 1) * tk * dv];
                    // dV = P^T dO
                    gemm_tn_acc(p, go, &mut gv[b * tk * dv..(b + 1) * tk * dv], tq, tk, dv);
                    // dP = dO V^T
                    dp.iter_mut().for_each(|x| *x = 0.0);
                    gemm_nt_acc(go, vb, &mut dp, tq, dv, tk);
                    // dS = P o (dP - rowsum(dP o P)), folded with the scale
                    for (dr, pr) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                        let dot: f64 = dr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for (x, y) in dr.iter_mut().zip(pr) {
                            *x = y * (*x - dot) * scale;
                        }
                    }
                    let kb = &kd[b * tk * d..(b + 1) * tk * d];
                    let qb = &qd[b * tq * d..(b + 1) * tq * d];
                    gemm_acc(&dp, kb, &mut gq[b * tq * d..(b + 1) * tq * d], tq, tk, d);
                    gemm_tn_acc(&dp, qb, &mut gk[b * tk * d..(b + 1) * tk * d], tq, tk, d);
                }
                accumulate(grads, *q, &gq);
                accumulate(grads, *k, &gk);
                accumulate(grads, *v, &gv);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Sum a broadcast gradient back onto the trailing block of size `n`.
fn fold(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
