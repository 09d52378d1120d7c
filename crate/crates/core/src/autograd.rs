//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every primitive as it is evaluated. Leaves either come
//! from a [`ParamStore`] (trainable unless frozen) or are constants.
//! [`Graph::backward`] replays the tape in reverse and only visits nodes that
//! can reach a trainable leaf, so frozen sub-networks cost a forward pass only.

use std::collections::BTreeMap;

use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor};

/// Score added to disallowed attention positions before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, idx: Vec<usize> },
    RepeatRows { x: Var, times: usize },
    MergeRows { base: Var, src: Var, positions: Vec<usize> },
    GroupMeanRows { x: Var, group: usize },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    CosineRows { a: Var, b: Var },
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, total: T },
    Attention(Box<AttnSaved<T>>),
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct AttnSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    n_q: usize,
    n_kv: usize,
    scale: T,
    probs: Vec<T>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn mat(&self, rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::new(vec![rows, cols], data).expect("internal shape")
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used for probing inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls with one name share the leaf.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.param(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter bound in this graph.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, &v)| (name.clone(), grads.get_or_zero(v)))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(config_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.mat(m, n, out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(config_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = self.mat(m, n, out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::MatMulNt(a, b), ng))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(config_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).numel() != n {
            return Err(config_err("add_row", format!("bias {:?} for width {n}", self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let t = self.mat(m, n, out);
        let ng = self.ng(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies by a single-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(config_err("mul_scalar", "scalar operand must have one element"));
        }
        let sv = self.value(s).item();
        let t = self.value(a).map(|x| x * sv);
        let ng = self.ng(&[a, s]);
        Ok(self.push(t, Op::MulScalar(a, s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = self.mat(m, n, out);
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != n {
                return Err(config_err("layer_norm", format!("affine {:?} for width {n}", self.shape(p))));
            }
        }
        let eps = T::lit(eps);
        let nt = T::from_usize(n).unwrap();
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * r;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gamma {
            let gd = self.value(gv).data();
            for row in out.chunks_mut(n) {
                for (o, &gj) in row.iter_mut().zip(gd) {
                    *o *= gj;
                }
            }
        }
        if let Some(bv) = beta {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(n) {
                for (o, &bj) in row.iter_mut().zip(bd) {
                    *o += bj;
                }
            }
        }
        let t = self.mat(m, n, out);
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let ng = self.ng(&deps);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(config_err("embedding", format!("id {bad} outside table of {rows} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = self.mat(ids.len(), d, out);
        let ng = self.ng(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(config_err("select_rows", format!("row {bad} of {rows}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = self.mat(idx.len(), d, out);
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SelectRows { x, idx: idx.to_vec() }, ng))
    }

    /// Tiles the whole matrix `times` times along rows.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let t = self.mat(m * times, n, out);
        let ng = self.ng(&[x]);
        self.push(t, Op::RepeatRows { x, times }, ng)
    }

    /// Copy of `base` whose rows at `positions` are replaced by the rows of `src`.
    pub fn merge_rows(&mut self, base: Var, src: Var, positions: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(base);
        let (ms, ns) = self.dims(src);
        if ns != n || ms != positions.len() || positions.iter().any(|&p| p >= m) {
            return Err(config_err("merge_rows", format!("[{ms},{ns}] into [{m},{n}] at {} positions", positions.len())));
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (r, &p) in positions.iter().enumerate() {
            out[p * n..(p + 1) * n].copy_from_slice(&s[r * n..(r + 1) * n]);
        }
        let t = self.mat(m, n, out);
        let ng = self.ng(&[base, src]);
        Ok(self.push(t, Op::MergeRows { base, src, positions: positions.to_vec() }, ng))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if group == 0 || m % group != 0 {
            return Err(config_err("group_mean_rows", format!("{m} rows in groups of {group}")));
        }
        let src = self.value(x).data();
        let inv = T::one() / T::from_usize(group).unwrap();
        let mut out = vec![T::zero(); (m / group) * n];
        for r in 0..m {
            let o = &mut out[(r / group) * n..(r / group + 1) * n];
            for (ov, &sv) in o.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *ov += sv * inv;
            }
        }
        let t = self.mat(m / group, n, out);
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GroupMeanRows { x, group }, ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n) {
            let nr = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12));
            for v in row.iter_mut() {
                *v = *v / nr;
            }
            norms.push(nr);
        }
        let t = self.mat(m, n, out);
        let ng = self.ng(&[x]);
        self.push(t, Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Per-row cosine similarity, shape `[m, 1]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err("cosine_rows", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (m, n) = self.dims(a);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out = (0..m)
            .map(|i| {
                let (ra, rb) = (&da[i * n..(i + 1) * n], &db[i * n..(i + 1) * n]);
                cosine(ra, rb)
            })
            .collect();
        let t = self.mat(m, 1, out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::CosineRows { a, b }, ng))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(config_err("mse", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = T::from_usize(ta.numel()).unwrap();
        let v = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), ng))
    }

    /// Weighted mean cross-entropy of integer targets; positions with weight 0 contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m || weights.is_some_and(|w| w.len() != m) {
            return Err(config_err("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(config_err("cross_entropy", format!("target {bad} outside {n} classes")));
        }
        let weights = weights.map_or_else(|| vec![T::one(); m], <[T]>::to_vec);
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        let total: T = weights.iter().copied().sum();
        for (i, row) in probs.chunks_mut(n).enumerate() {
            softmax_in_place(row);
            if weights[i] != T::zero() {
                loss += -weights[i] * row[targets[i]].max(T::min_positive_value()).ln();
            }
        }
        let value = if total > T::zero() { loss / total } else { T::zero() };
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs, total },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` independent samples.
    ///
    /// `q` is `[batch·n_q, d]`, `k`/`v` are `[batch·n_kv, d]`; `allowed` is the
    /// row-major `n_q × n_kv` mask shared by all samples and heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        allowed: &[bool],
    ) -> Result<Var> {
        let (rq, d) = self.dims(q);
        let (rk, dk) = self.dims(k);
        let (rv, dv) = self.dims(v);
        if batch == 0 || rq % batch != 0 || rk % batch != 0 || rk != rv || d != dk || d != dv {
            return Err(config_err("attention", format!("q [{rq},{d}] k [{rk},{dk}] v [{rv},{dv}] batch {batch}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(config_err("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let (n_q, n_kv) = (rq / batch, rk / batch);
        if allowed.len() != n_q * n_kv {
            return Err(config_err("attention", format!("mask of {} entries for {n_q}x{n_kv}", allowed.len())));
        }
        if let Some(i) = (0..n_q).find(|&i| !allowed[i * n_kv..(i + 1) * n_kv].iter().any(|&a| a)) {
            return Err(config_err("attention", format!("query row {i} has no allowed key")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let masked = T::lit(MASKED_SCORE);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * n_q * n_kv];
        let mut out = vec![T::zero(); rq * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n_q {
                    let qi = &qd[(b * n_q + i) * d + off..(b * n_q + i) * d + off + dh];
                    let p = &mut probs[((b * heads + h) * n_q + i) * n_kv..((b * heads + h) * n_q + i + 1) * n_kv];
                    for j in 0..n_kv {
                        let kj = &kd[(b * n_kv + j) * d + off..(b * n_kv + j) * d + off + dh];
                        let mut s = T::zero();
                        for (&x, &y) in qi.iter().zip(kj) {
                            s += x * y;
                        }
                        s *= scale;
                        if !allowed[i * n_kv + j] {
                            s += masked;
                        }
                        p[j] = s;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(b * n_q + i) * d + off..(b * n_q + i) * d + off + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * n_kv + j) * d + off..(b * n_kv + j) * d + off + dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += pj * vv;
                        }
                    }
                }
            }
        }
        let t = self.mat(rq, d, out);
        let ng = self.ng(&[q, k, v]);
        let saved = AttnSaved { q, k, v, batch, heads, n_q, n_kv, scale, probs };
        Ok(self.push(t, Op::Attention(Box::new(saved)), ng))
    }

    /// Forward value `quantized`, backward identity onto `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<T>) -> Result<Var> {
        if self.shape(x) != quantized.shape() {
            return Err(config_err("straight_through", format!("{:?} vs {:?}", self.shape(x), quantized.shape())));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(quantized, Op::StraightThrough(x), ng))
    }

    /// Constant copy of `x`; no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(v), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(v), Op::Mean(a), ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(config_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.wants(*a) {
                    let ga = matmul_nt(gy, self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = matmul_tn(self.value(*a).data(), gy, m, k, n);
                    self.accum(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.wants(*a) {
                    let ga = matmul(gy, self.value(*b).data(), m, n, k);
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = matmul_tn(gy, self.value(*a).data(), m, n, k);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gy.to_vec());
                self.accum(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gy.to_vec());
                self.accum(grads, *b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accum(grads, *a, gy.iter().zip(vb).map(|(&g, &x)| g * x).collect());
                }
                if self.wants(*b) {
                    self.accum(grads, *b, gy.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddRow(a, bias) => {
                self.accum(grads, *a, gy.to_vec());
                if self.wants(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![T::zero(); n];
                    for row in gy.chunks(n) {
                        for (o, &g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    self.accum(grads, *bias, gb);
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, gy.iter().map(|&g| g * *c).collect()),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                if self.wants(*a) {
                    self.accum(grads, *a, gy.iter().map(|&g| g * sv).collect());
                }
                if self.wants(*s) {
                    let gs = gy.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).sum();
                    self.accum(grads, *s, vec![gs]);
                }
            }
            Op::Exp(a) => self.accum(grads, *a, gy.iter().zip(y.data()).map(|(&g, &e)| g * e).collect()),
            Op::Tanh(a) => {
                self.accum(grads, *a, gy.iter().zip(y.data()).map(|(&g, &t)| g * (T::one() - t * t)).collect())
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, gy.iter().zip(x).map(|(&g, &xv)| g * gelu_parts(xv).1).collect())
            }
            Op::Sigmoid(a) => self.accum(
                grads,
                *a,
                gy.iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect(),
            ),
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut gx = vec![T::zero(); gy.len()];
                for ((gr, pr), ox) in gy.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(pr).map(|(&g, &p)| g * p).sum();
                    for ((o, &g), &p) in ox.iter_mut().zip(gr).zip(pr) {
                        *o = p * (g - dot);
                    }
                }
                self.accum(grads, *a, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (m, n) = self.dims(*x);
                let nt = T::from_usize(n).unwrap();
                if let Some(gv) = gamma {
                    if self.wants(*gv) {
                        let mut gg = vec![T::zero(); n];
                        for (gr, xr) in gy.chunks(n).zip(xhat.chunks(n)) {
                            for ((o, &g), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                                *o += g * xh;
                            }
                        }
                        self.accum(grads, *gv, gg);
                    }
                }
                if let Some(bv) = beta {
                    if self.wants(*bv) {
                        let mut gb = vec![T::zero(); n];
                        for gr in gy.chunks(n) {
                            for (o, &g) in gb.iter_mut().zip(gr) {
                                *o += g;
                            }
                        }
                        self.accum(grads, *bv, gb);
                    }
                }
                if self.wants(*x) {
                    let gamma_v = gamma.map(|gv| self.value(gv).data());
                    let mut gx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let gr = &gy[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        let dxhat: Vec<T> = match gamma_v {
                            Some(gd) => gr.iter().zip(gd).map(|(&g, &w)| g * w).collect(),
                            None => gr.to_vec(),
                        };
                        let mean_d = dxhat.iter().copied().sum::<T>() / nt;
                        let mean_dx = dxhat.iter().zip(xr).map(|(&d, &xh)| d * xh).sum::<T>() / nt;
                        for j in 0..n {
                            gx[i * n + j] = rstd[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = self.dims(*table);
                let mut gt = vec![T::zero(); rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &g) in gt[id * d..(id + 1) * d].iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                        *o += g;
                    }
                }
                self.accum(grads, *table, gt);
            }
            Op::SelectRows { x, idx } => {
                let (rows, d) = self.dims(*x);
                let mut gx = vec![T::zero(); rows * d];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &g) in gx[i * d..(i + 1) * d].iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                        *o += g;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::RepeatRows { x, times } => {
                let len = self.value(*x).numel();
                let mut gx = vec![T::zero(); len];
                for t in 0..*times {
                    for (o, &g) in gx.iter_mut().zip(&gy[t * len..(t + 1) * len]) {
                        *o += g;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::MergeRows { base, src, positions } => {
                let n = y.cols();
                if self.wants(*base) {
                    let mut gb = gy.to_vec();
                    for &p in positions {
                        gb[p * n..(p + 1) * n].iter_mut().for_each(|v| *v = T::zero());
                    }
                    self.accum(grads, *base, gb);
                }
                if self.wants(*src) {
                    let mut gs = Vec::with_capacity(positions.len() * n);
                    for &p in positions {
                        gs.extend_from_slice(&gy[p * n..(p + 1) * n]);
                    }
                    self.accum(grads, *src, gs);
                }
            }
            Op::GroupMeanRows { x, group } => {
                let (m, n) = self.dims(*x);
                let inv = T::one() / T::from_usize(*group).unwrap();
                let mut gx = vec![T::zero(); m * n];
                for r in 0..m {
                    let g = &gy[(r / group) * n..(r / group + 1) * n];
                    for (o, &gv) in gx[r * n..(r + 1) * n].iter_mut().zip(g) {
                        *o = gv * inv;
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = y.cols();
                let mut gx = vec![T::zero(); gy.len()];
                for (i, ((gr, yr), ox)) in gy.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &yv)| g * yv).sum();
                    for ((o, &g), &yv) in ox.iter_mut().zip(gr).zip(yr) {
                        *o = (g - yv * dot) / norms[i];
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::CosineRows { a, b } => {
                let (m, n) = self.dims(*a);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); m * n];
                let mut gb = vec![T::zero(); m * n];
                for i in 0..m {
                    let (ra, rb) = (&va[i * n..(i + 1) * n], &vb[i * n..(i + 1) * n]);
                    let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
                    let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
                    let c = y.data()[i];
                    for j in 0..n {
                        ga[i * n + j] = gy[i] * (rb[j] / (na * nb) - c * ra[j] / (na * na));
                        gb[i * n + j] = gy[i] * (ra[j] / (na * nb) - c * rb[j] / (nb * nb));
                    }
                }
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let c = T::lit(2.0) * gy[0] / T::from_usize(va.len()).unwrap();
                let diff: Vec<T> = va.iter().zip(vb).map(|(&x, &z)| c * (x - z)).collect();
                if self.wants(*b) {
                    self.accum(grads, *b, diff.iter().map(|&d| -d).collect());
                }
                self.accum(grads, *a, diff);
            }
            Op::CrossEntropy { logits, targets, weights, probs, total } => {
                let n = self.dims(*logits).1;
                let mut gx = vec![T::zero(); probs.len()];
                if *total > T::zero() {
                    for (i, (pr, ox)) in probs.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                        let w = weights[i] * gy[0] / *total;
                        if w == T::zero() {
                            continue;
                        }
                        for (o, &p) in ox.iter_mut().zip(pr) {
                            *o = w * p;
                        }
                        ox[targets[i]] -= w;
                    }
                }
                self.accum(grads, *logits, gx);
            }
            Op::Attention(s) => self.attention_backward(s, gy, grads),
            Op::StraightThrough(x) => self.accum(grads, *x, gy.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![gy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let g = gy[0] / T::from_usize(n).unwrap();
                self.accum(grads, *a, vec![g; n]);
            }
        }
    }

    fn attention_backward(&self, s: &AttnSaved<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let d = self.dims(s.q).1;
        let dh = d / s.heads;
        let (qd, kd, vd) = (self.value(s.q).data(), self.value(s.k).data(), self.value(s.v).data());
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); s.n_kv];
        for b in 0..s.batch {
            for h in 0..s.heads {
                let off = h * dh;
                for i in 0..s.n_q {
                    let qrow = (b * s.n_q + i) * d + off;
                    let go = &gy[qrow..qrow + dh];
                    let p = &s.probs[((b * s.heads + h) * s.n_q + i) * s.n_kv..((b * s.heads + h) * s.n_q + i + 1) * s.n_kv];
                    for j in 0..s.n_kv {
                        let vrow = (b * s.n_kv + j) * d + off;
                        let vj = &vd[vrow..vrow + dh];
                        dp[j] = go.iter().zip(vj).map(|(&g, &v)| g * v).sum();
                        if p[j] != T::zero() {
                            for (o, &g) in gv[vrow..vrow + dh].iter_mut().zip(go) {
                                *o += p[j] * g;
                            }
                        }
                    }
                    let dot: T = p.iter().zip(&dp).map(|(&pj, &dj)| pj * dj).sum();
                    for j in 0..s.n_kv {
                        let ds = p[j] * (dp[j] - dot) * s.scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = (b * s.n_kv + j) * d + off;
                        for t in 0..dh {
                            gq[qrow + t] += ds * kd[krow + t];
                            gk[krow + t] += ds * qd[qrow + t];
                        }
                    }
                }
            }
        }
        self.accum(grads, s.q, gq);
        self.accum(grads, s.k, gk);
        self.accum(grads, s.v, gv);
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::lit(1e-12));
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_value_nine_and_slope_six() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(1, 1, &[3.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn uniform_cross_entropy() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(1, 4, &[0.0; 4]));
        let l = g.cross_entropy(x, &[0], None).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let gx = grads.get(x).unwrap();
        for (a, b) in gx.data().iter().zip([-0.75, 0.25, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(1, 3, &[0.1, 0.2, 0.3]));
        let q = g.straight_through(x, t(1, 3, &[1.0, 0.0, -1.0])).unwrap();
        let w = g.constant(t(1, 3, &[2.0, -3.0, 5.0]));
        let y = g.mul(q, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(g.value(q).data(), &[1.0, 0.0, -1.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -3.0, 5.0]);
        assert_eq!(grads.get(q).unwrap().data(), grads.get(x).unwrap().data());
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(2, 3, &[0.0; 6]));
        let b = g.input(t(2, 3, &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[4, 7], |i| (i as f32 * 1.37).sin() * 5.0));
        let p = g.softmax_rows(x);
        for r in 0..4 {
            let s: f32 = g.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[3, 8], |i| ((i * 7 % 11) as f32) * 0.9 - 3.0));
        let y = g.layer_norm(x, None, None, 1e-6).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-5, "var {var}");
        }
    }

    #[test]
    fn masked_attention_row_without_keys_is_an_error() {
        let mut g = Graph::<f64>::new();
        let q = g.input(t(2, 2, &[0.0; 4]));
        let err = g.attention(q, q, q, 1, 1, &[true, false, false, false]).unwrap_err();
        assert!(err.to_string().contains("no allowed key"));
    }
}
