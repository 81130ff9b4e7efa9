use std::collections::{BTreeMap, HashMap};

use super::{axis_split, gemm, transpose2, ParamStore, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, inv_std: Vec<f64> },
    Relu(Var),
    Max { x: Var, axis: usize, argmax: Vec<usize> },
    L2Normalize { x: Var, axis: usize, eps: f64, norms: Vec<f64> },
    Mse(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, which is
/// a topological order, so backward is one reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    param_lookup: HashMap<String, Var>,
}

/// Gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradients of all registered parameters, keyed by name. Parameters the
    /// loss does not depend on get a zero gradient.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.shapes[v.0].iter().product()]);
                (name.clone(), Tensor::from_parts(self.shapes[v.0].clone(), g))
            })
            .collect()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, lhs: a.shape.clone(), rhs: b.shape.clone() }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Axis { op, axis, shape: t.shape.clone() });
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.data.iter().all(|v| v.is_finite()), "non-finite output of {op:?}");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it takes part in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Registers the named parameter from `store` as a trainable leaf. Asking
    /// for the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf(t.clone().with_grad());
        self.params.insert(name.to_string(), v);
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Matrix product. Supports `[m,k] x [k,n]`, batched `[b,m,k] x [b,k,n]`
    /// and shared-weight `[b,m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match (ta.shape.as_slice(), tb.shape.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                Tensor::from_parts(vec![m, n], gemm(&ta.data, &tb.data, m, k, n))
            }
            (&[bs, m, k], &[k2, n]) if k == k2 => {
                Tensor::from_parts(vec![bs, m, n], gemm(&ta.data, &tb.data, bs * m, k, n))
            }
            (&[bs, m, k], &[bs2, k2, n]) if bs == bs2 && k == k2 => {
                let mut data = Vec::with_capacity(bs * m * n);
                for i in 0..bs {
                    data.extend(gemm(
                        &ta.data[i * m * k..(i + 1) * m * k],
                        &tb.data[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    ));
                }
                Tensor::from_parts(vec![bs, m, n], data)
            }
            _ => return Err(shape_err("matmul", ta, tb)),
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape.clone(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a rank-1 `bias` along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.rank() != 1 || ta.shape.last() != Some(&tb.shape[0]) {
            return Err(shape_err("add_bias", ta, tb));
        }
        let n = tb.shape[0];
        let data = ta.data.iter().enumerate().map(|(i, x)| x + tb.data[i % n]).collect();
        let out = Tensor::from_parts(ta.shape.clone(), data);
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape.clone(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape.clone(), ta.data.iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(TensorError::Invalid { op: "transpose", msg: "needs rank >= 2".into() });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let r = ta.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&ax| ax >= r || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::Invalid { op: "permute", msg: format!("bad axes {axes:?} for rank {r}") });
        }
        let shape: Vec<usize> = axes.iter().map(|&ax| ta.shape[ax]).collect();
        let data = permute_data(&ta.data, &ta.shape, axes);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() || shape.contains(&0) {
            return Err(TensorError::Shape { op: "reshape", lhs: ta.shape.clone(), rhs: shape.to_vec() });
        }
        let out = Tensor::from_parts(shape.to_vec(), ta.data.clone());
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&v| self.value(v))
            .ok_or_else(|| TensorError::Invalid { op: "concat", msg: "no inputs".into() })?;
        check_axis("concat", first, axis)?;
        let mut shape = first.shape.clone();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let same_rest = t.rank() == shape.len()
                && t.shape.iter().zip(&shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(shape_err("concat", first, t));
            }
            total += t.shape[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("softmax", ta, axis)?;
        let (outer, len, inner) = axis_split(&ta.shape, axis);
        let mut data = ta.data.clone();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let m = (0..len).map(|i| data[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..len {
                    let e = (data[idx(i)] - m).exp();
                    data[idx(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    data[idx(i)] /= s;
                }
            }
        }
        let out = Tensor::from_parts(ta.shape.clone(), data);
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid { op: "layer_norm", msg: format!("eps must be > 0, got {eps}") });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape.last().unwrap();
        if tg.shape != [d] || tb.shape != [d] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.len() / d;
        let mut data = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..d {
                data[r * d + i] = (row[i] - mean) * is * tg.data[i] + tb.data[i];
            }
        }
        let out = Tensor::from_parts(tx.shape.clone(), data);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, inv_std }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_parts(ta.shape.clone(), ta.data.iter().map(|v| v.max(0.0)).collect());
        self.push(out, Op::Relu(a), &[a])
    }

    /// Maximum along `axis` (the axis is removed). Ties go to the lowest
    /// index, which also receives the whole gradient.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        check_axis("max", ta, axis)?;
        let (outer, len, inner) = axis_split(&ta.shape, axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                let mut bv = ta.data[o * len * inner + j];
                for i in 1..len {
                    let v = ta.data[(o * len + i) * inner + j];
                    if v > bv {
                        bv = v;
                        best = i;
                    }
                }
                data.push(bv);
                argmax.push(best);
            }
        }
        let mut shape = ta.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Max { x: a, axis, argmax }, &[a]))
    }

    /// `x / (||x||_2 + eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        check_axis("l2_normalize", ta, axis)?;
        let (outer, len, inner) = axis_split(&ta.shape, axis);
        let mut data = ta.data.clone();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let n = (0..len).map(|i| data[idx(i)] * data[idx(i)]).sum::<f64>().sqrt();
                norms.push(n);
                for i in 0..len {
                    data[idx(i)] /= n + eps;
                }
            }
        }
        let out = Tensor::from_parts(ta.shape.clone(), data);
        Ok(self.push(out, Op::L2Normalize { x: a, axis, eps, norms }, &[a]))
    }

    /// Mean squared difference; returns a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mse", ta, tb));
        }
        let s = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let out = Tensor::scalar(s / ta.len() as f64);
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `softmax(Q K^T / sqrt(d)) V` over batched `[b, n, d]` operands.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self.shape(q).last().unwrap();
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let last = self.value(scores).rank() - 1;
        let weights = self.softmax(scores, last)?;
        self.matmul(weights, v)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                match (ta.shape.as_slice(), tb.shape.as_slice()) {
                    (&[m, k], &[_, n]) | (&[_, m, k], &[_, n]) => {
                        let m = if ta.rank() == 3 { ta.shape[0] * m } else { m };
                        if wants(a) {
                            acc(a, gemm(g, &transpose2(&tb.data, k, n), m, n, k));
                        }
                        if wants(b) {
                            acc(b, gemm(&transpose2(&ta.data, m, k), g, k, m, n));
                        }
                    }
                    (&[bs, m, k], &[_, _, n]) => {
                        let mut da = Vec::with_capacity(bs * m * k);
                        let mut db = Vec::with_capacity(bs * k * n);
                        for i in 0..bs {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ta.data[i * m * k..(i + 1) * m * k];
                            let bi = &tb.data[i * k * n..(i + 1) * k * n];
                            if wants(a) {
                                da.extend(gemm(gi, &transpose2(bi, k, n), m, n, k));
                            }
                            if wants(b) {
                                db.extend(gemm(&transpose2(ai, m, k), gi, k, m, n));
                            }
                        }
                        if wants(a) {
                            acc(a, da);
                        }
                        if wants(b) {
                            acc(b, db);
                        }
                    }
                    _ => unreachable!("matmul shapes validated in forward"),
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::AddBias(a, bias) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    acc(bias, db);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if wants(a) {
                    acc(a, g.iter().zip(&tb.data).map(|(x, y)| x * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(&ta.data).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, s) => acc(a, g.iter().map(|x| x * s).collect()),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(*a, permute_data(g, &node.value.shape, &inverse));
            }
            &Op::Reshape(a) => acc(a, g.to_vec()),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(&node.value.shape, *axis);
                let mut offset = 0;
                let total = node.value.shape[*axis] * inner;
                for &p in parts {
                    let chunk = self.value(p).shape[*axis] * inner;
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(p, d);
                    }
                    offset += chunk;
                }
            }
            &Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(&y.shape, axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * y.data[idx(i)]).sum();
                        for i in 0..len {
                            dx[idx(i)] = y.data[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                acc(a, dx);
            }
            Op::LayerNorm { x, gamma, beta, inv_std } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let d = tg.len();
                let rows = tx.len() / d;
                let mut dx = vec![0.0; tx.len()];
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &tx.data[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let is = inv_std[r];
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * is;
                        let gi = g[r * d + i];
                        dg[i] += gi * xhat[i];
                        dbeta[i] += gi;
                        dxhat[i] = gi * tg.data[i];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        dx[r * d + i] = is * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                if wants(*x) {
                    acc(*x, dx);
                }
                if wants(*gamma) {
                    acc(*gamma, dg);
                }
                if wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            &Op::Relu(a) => {
                let ta = self.value(a);
                acc(a, g.iter().zip(&ta.data).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Max { x, axis, argmax } => {
                let tx = self.value(*x);
                let (outer, len, inner) = axis_split(&tx.shape, *axis);
                let mut dx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let r = o * inner + j;
                        dx[(o * len + argmax[r]) * inner + j] = g[r];
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                let tx = self.value(*x);
                let (outer, len, inner) = axis_split(&tx.shape, *axis);
                let mut dx = vec![0.0; tx.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let n = norms[o * inner + j];
                        let denom = n + eps;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * tx.data[idx(i)]).sum();
                        for i in 0..len {
                            let mut v = g[idx(i)] / denom;
                            if n > 0.0 {
                                v -= tx.data[idx(i)] * dot / (denom * denom * n);
                            }
                            dx[idx(i)] = v;
                        }
                    }
                }
                acc(*x, dx);
            }
            &Op::Mse(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let c = 2.0 * g[0] / ta.len() as f64;
                let diff: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| c * (x - y)).collect();
                if wants(b) {
                    acc(b, diff.iter().map(|v| -v).collect());
                }
                if wants(a) {
                    acc(a, diff);
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                acc(a, vec![g[0]; n]);
            }
        }
    }
}

/// Reorders row-major `data` of `shape` so output axis `i` is input axis
/// `axes[i]`.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; r];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
