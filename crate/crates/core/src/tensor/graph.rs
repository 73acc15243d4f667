use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par::Exec;

use super::kernels::{self, AttnDims, ConvDims};
use super::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    AddBias(Var, Var),
    Relu(Var),
    MaxOverTime {
        x: Var,
        argmax: Vec<usize>,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        probs: Vec<T>,
        dims: AttnDims,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward/backward computation.
///
/// Build one per training step; it is cheap to create and is dropped after
/// the optimizer has read the parameter gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    exec: Exec,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.get(id);
        let v = self.leaf(entry.value.clone(), entry.trainable);
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every bound trainable parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.nodes[v.0].grad.clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = self.value(a);
        let value = Tensor {
            shape: va.shape().to_vec(),
            data: va.data().iter().map(|&x| x * c).collect(),
        };
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.exec, self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let Some(&fan_in) = sx.last() else {
            return Err(Error::shape("linear", "scalar input"));
        };
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(Error::shape("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {out_dim} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut data = kernels::matmul(
            self.exec,
            self.value(x).data(),
            self.value(w).data(),
            rows,
            fan_in,
            out_dim,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o = *o + bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(&shape, data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Rows of `table[V,E]` gathered by `ids`, shaped `[index_shape..., E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table {st:?}")));
        }
        let (vocab, dim) = (st[0], st[1]);
        if index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding_lookup",
                format!("{} ids for index shape {index_shape:?}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} outside table of {vocab} rows"),
            ));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Valid 1-D convolution: `x[B,S,D]` with filters `w[M,W,D]` gives `[B,S-W+1,M]`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[2] {
            return Err(Error::shape("conv1d_valid", format!("input {sx:?}, filters {sw:?}")));
        }
        if sw[1] == 0 || sx[1] < sw[1] {
            return Err(Error::shape(
                "conv1d_valid",
                format!("sequence of {} shorter than filter width {}", sx[1], sw[1]),
            ));
        }
        let dims = ConvDims {
            batch: sx[0],
            seq: sx[1],
            in_dim: sx[2],
            maps: sw[0],
            width: sw[1],
        };
        let data = kernels::conv1d_forward(self.exec, self.value(x).data(), self.value(w).data(), dims);
        let value = Tensor::new(&[dims.batch, dims.positions(), dims.maps], data)?;
        Ok(self.push(value, Op::Conv1d { x, w, dims }, &[x, w]))
    }

    /// `x[..., M] + b[M]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let m = sb[0];
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().map(|&v| v.max(T::zero())).collect(),
        };
        self.push(value, Op::Relu(x), &[x])
    }

    /// Max over the time axis of `x[B,P,M]`, considering only positions with
    /// `valid[b*P + p]`. Ties go to the lowest position.
    pub fn max_over_time(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || valid.len() != sx[0] * sx[1] {
            return Err(Error::shape(
                "max_over_time",
                format!("input {sx:?}, mask of {}", valid.len()),
            ));
        }
        let (b, p, m) = (sx[0], sx[1], sx[2]);
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(b * m);
        let mut argmax = Vec::with_capacity(b * m);
        for bi in 0..b {
            let ok = &valid[bi * p..(bi + 1) * p];
            if !ok.iter().any(|&v| v) {
                return Err(Error::shape(
                    "max_over_time",
                    format!("sequence shorter than filter (example {bi} has no valid window)"),
                ));
            }
            for mi in 0..m {
                let mut best: Option<(T, usize)> = None;
                for (pi, _) in ok.iter().enumerate().filter(|(_, &v)| v) {
                    let idx = (bi * p + pi) * m + mi;
                    match best {
                        Some((bv, _)) if vx[idx] <= bv => {}
                        _ => best = Some((vx[idx], idx)),
                    }
                }
                let (bv, idx) = best.unwrap();
                data.push(bv);
                argmax.push(idx);
            }
        }
        let value = Tensor::new(&[b, m], data)?;
        Ok(self.push(value, Op::MaxOverTime { x, argmax }, &[x]))
    }

    /// Flat indices into the input chosen by a [`Graph::max_over_time`] node.
    pub fn argmax_of(&self, pooled: Var) -> Option<&[usize]> {
        match &self.nodes[pooled.0].op {
            Op::MaxOverTime { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(Error::shape("mean", format!("axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_at_axis(&sx, axis);
        let vx = self.value(x).data();
        let inv = T::one() / T::of(n as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &vx[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d = *d * inv);
        let mut shape = sx;
        shape.remove(axis);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    /// Mean over the batch of `−log softmax(logits[b])[labels[b]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() || sl[0] == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {sl:?}, {} labels", labels.len()),
            ));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let vl = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (bi, &label) in labels.iter().enumerate() {
            let row = &vl[bi * c..(bi + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for (p, &v) in probs[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total = total + (lse - row[label]);
        }
        let loss = total / T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Inverted dropout. Identity when `!train` or `p == 0`; otherwise the
    /// keep-mask is drawn from a ChaCha stream seeded by `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout p={p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Normalize the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some(&e) = sx.last() else {
            return Err(Error::shape("layer_norm", "scalar input"));
        };
        if self.shape(gamma) != [e] || self.shape(beta) != [e] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {sx:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::of(1e-5);
        let inv_e = T::one() / T::of(e as f64);
        let vx = self.value(x).data();
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.len() / e;
        let mut xhat = vec![T::zero(); vx.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.len()];
        for r in 0..rows {
            let row = &vx[r * e..(r + 1) * e];
            let mean = row.iter().copied().sum::<T>() * inv_e;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_e;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..e {
                let h = (row[i] - mean) * is;
                xhat[r * e + i] = h;
                data[r * e + i] = h * g[i] + bta[i];
            }
        }
        let value = Tensor::new(&sx, data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product self-attention over `[B,S,E]` projections.
    /// `key_mask[b*S + s]` is false for PAD positions, which neither attend
    /// nor are attended to.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: &[bool]) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(Error::shape(
                "scaled_dot_product_attention",
                format!("q {sq:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || !sq[2].is_multiple_of(heads) {
            return Err(Error::shape(
                "scaled_dot_product_attention",
                format!("dim {} not divisible by {heads} heads", sq[2]),
            ));
        }
        if key_mask.len() != sq[0] * sq[1] {
            return Err(Error::shape(
                "scaled_dot_product_attention",
                format!("mask of {} for {sq:?}", key_mask.len()),
            ));
        }
        let dims = AttnDims {
            batch: sq[0],
            seq: sq[1],
            dim: sq[2],
            heads,
        };
        let (out, probs) = kernels::attention_forward(
            self.exec,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            key_mask,
            dims,
        );
        let value = Tensor::new(&sq, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                mask: key_mask.to_vec(),
                probs,
                dims,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a scalar `loss`, leaving `∂loss/∂node` on every
    /// reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        let loss_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let exec = self.exec;
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, like(*a, gd.iter().zip(vb).map(|(&x, &y)| x * y).collect()));
                acc(*b, like(*b, gd.iter().zip(va).map(|(&x, &y)| x * y).collect()));
            }
            Op::Scale(a, c) => acc(*a, like(*a, gd.iter().map(|&x| x * *c).collect())),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(*a, like(*a, vec![gd[0]; n]));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ga = kernels::matmul_nt(exec, gd, self.value(*b).data(), m, n, k);
                let gb = kernels::matmul_tn(exec, self.value(*a).data(), gd, m, k, n);
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (fan_in, out_dim) = (sw[0], sw[1]);
                let rows = self.value(*x).numel() / fan_in;
                if self.nodes[x.0].requires_grad {
                    let gx = kernels::matmul_nt(exec, gd, self.value(*w).data(), rows, out_dim, fan_in);
                    acc(*x, like(*x, gx));
                }
                if self.nodes[w.0].requires_grad {
                    let gw = kernels::matmul_tn(exec, self.value(*x).data(), gd, rows, fan_in, out_dim);
                    acc(*w, like(*w, gw));
                }
                if let Some(b) = b {
                    acc(*b, like(*b, column_sums(gd, out_dim)));
                }
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let dim = st[1];
                let mut gt = vec![T::zero(); st[0] * dim];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &gd[row * dim..(row + 1) * dim];
                    for (t, &s) in gt[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                        *t = *t + s;
                    }
                }
                acc(*table, like(*table, gt));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = g.shape();
                let (outer, total, inner) = split_at_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[start..start + len * inner]);
                    }
                    offset += len;
                    acc(v, like(v, part));
                }
            }
            Op::Conv1d { x, w, dims } => {
                if self.nodes[x.0].requires_grad {
                    let gx = kernels::conv1d_backward_input(exec, gd, self.value(*w).data(), *dims);
                    acc(*x, like(*x, gx));
                }
                if self.nodes[w.0].requires_grad {
                    let gw = kernels::conv1d_backward_weight(exec, gd, self.value(*x).data(), *dims);
                    acc(*w, like(*w, gw));
                }
            }
            Op::AddBias(x, b) => {
                let m = self.shape(*b)[0];
                acc(*x, g.clone());
                acc(*b, like(*b, column_sums(gd, m)));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(vx)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*x, like(*x, gx));
            }
            Op::MaxOverTime { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(gd) {
                    gx[idx] = gx[idx] + gv;
                }
                acc(*x, like(*x, gx));
            }
            Op::Mean { x, axis } => {
                let (outer, n, inner) = split_at_axis(self.shape(*x), *axis);
                let inv = T::one() / T::of(n as f64);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for j in 0..inner {
                            gx[(o * n + a) * inner + j] = gd[o * inner + j] * inv;
                        }
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (bi, &label) in labels.iter().enumerate() {
                    gl[bi * c + label] = gl[bi * c + label] - scale;
                }
                acc(*logits, like(*logits, gl));
            }
            Op::Dropout { x, mask } => {
                acc(*x, like(*x, gd.iter().zip(mask).map(|(&a, &m)| a * m).collect()));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let e = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let rows = gd.len() / e;
                let ef = T::of(e as f64);
                let mut gx = vec![T::zero(); gd.len()];
                let mut gg = vec![T::zero(); e];
                let mut gb = vec![T::zero(); e];
                for r in 0..rows {
                    let grow = &gd[r * e..(r + 1) * e];
                    let hrow = &xhat[r * e..(r + 1) * e];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for j in 0..e {
                        let dh = grow[j] * gam[j];
                        sum_d = sum_d + dh;
                        sum_dh = sum_dh + dh * hrow[j];
                        gg[j] = gg[j] + grow[j] * hrow[j];
                        gb[j] = gb[j] + grow[j];
                    }
                    let k = inv_std[r] / ef;
                    for j in 0..e {
                        let dh = grow[j] * gam[j];
                        gx[r * e + j] = k * (ef * dh - sum_d - hrow[j] * sum_dh);
                    }
                }
                acc(*x, like(*x, gx));
                acc(*gamma, like(*gamma, gg));
                acc(*beta, like(*beta, gb));
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                probs,
                dims,
            } => {
                let (gq, gk, gv) = kernels::attention_backward(
                    exec,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    mask,
                    *dims,
                );
                acc(*q, like(*q, gq));
                acc(*k, like(*k, gk));
                acc(*v, like(*v, gv));
            }
        }
        Ok(())
    }
}

fn column_sums<T: Real>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}
