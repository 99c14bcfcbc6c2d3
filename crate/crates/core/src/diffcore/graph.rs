//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! The graph also carries instrumentation: multiply-add counters split by
//! [`CostTag`], and a fingerprint of every piecewise decision (relu masks,
//! gather indices, abs signs). The gradient checker compares fingerprints to
//! detect perturbations that cross a non-differentiable point.

use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Accounting category for a matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostTag {
    Other,
    /// `Q·Kᵀ` inside attention.
    AttentionScores,
    /// `A·V` inside attention.
    AttentionValues,
}

/// Runtime operation counters. Matmul costs use the `2·m·k·n` convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub attention_scores: u64,
    pub attention_values: u64,
    pub other_matmul: u64,
    pub exps: u64,
    /// Patch rows pushed through the saliency predictor.
    pub saliency_rows: u64,
}

impl OpCounters {
    pub fn attention(&self) -> u64 {
        self.attention_scores + self.attention_values
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Affine { x: Var, w: Var, b: Option<Var>, relu: bool },
    Transpose(Var),
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Abs(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows { a: Var, idx: Vec<usize> },
    GatherCols { a: Var, idx: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SegmentMean { a: Var, seg: usize },
    SqDiff { a: Var, b: Var },
    L2NormalizeRows { a: Var, norms: Vec<T> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` is unreachable from the loss or does not require grad.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    counters: OpCounters,
    fingerprint: u64,
    track_kinks: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counters: OpCounters::default(),
            fingerprint: FNV_OFFSET,
            track_kinks: false,
        }
    }

    /// A graph that folds every piecewise decision into [`Graph::fingerprint`].
    pub fn tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    /// Hash of the piecewise decisions taken so far; constant unless the
    /// graph was built with [`Graph::tracking`].
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub(crate) fn count_saliency_rows(&mut self, rows: usize) -> Result<()> {
        self.counters.saliency_rows = self
            .counters
            .saliency_rows
            .checked_add(rows as u64)
            .ok_or(Error::CounterOverflow("saliency"))?;
        Ok(())
    }

    fn mark(&mut self, word: u64) {
        if !self.track_kinks {
            return;
        }
        self.fingerprint = (self.fingerprint ^ word).wrapping_mul(FNV_PRIME);
    }

    fn mark_bits(&mut self, bits: impl Iterator<Item = bool>) {
        if !self.track_kinks {
            return;
        }
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                self.mark(word);
                word = 0;
                n = 0;
            }
        }
        self.mark(word ^ ((n as u64) << 56));
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Its gradient is tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[a.0].value;
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&x| f(x)).collect())
            .expect("elementwise: same shape");
        self.push(out, op, &[a])
    }

    fn bump(&mut self, tag: CostTag, amount: u64) -> Result<()> {
        let slot = match tag {
            CostTag::Other => &mut self.counters.other_matmul,
            CostTag::AttentionScores => &mut self.counters.attention_scores,
            CostTag::AttentionValues => &mut self.counters.attention_values,
        };
        *slot = slot
            .checked_add(amount)
            .ok_or(Error::CounterOverflow("matmul"))?;
        Ok(())
    }

    fn bump_exps(&mut self, n: usize) -> Result<()> {
        self.counters.exps = self
            .counters
            .exps
            .checked_add(n as u64)
            .ok_or(Error::CounterOverflow("exp"))?;
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false, CostTag::Other)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool, tag: CostTag) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}",
                    self.shape_of(a),
                    if ta { "ᵀ" } else { "" },
                    self.shape_of(b),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, T::zero(), &mut out);
        self.bump(tag, 2 * (m as u64) * (k as u64) * (n as u64))?;
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// `x·w + b` with `b` a `1×n` row, optionally followed by relu, as one
    /// node.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>, relu: bool) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        if k != k2 || b.is_some_and(|b| self.value(b).numel() != n) {
            return Err(Error::shape(
                "affine",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.shape_of(x),
                    self.shape_of(w),
                    b.map(|b| self.shape_of(b))
                ),
            ));
        }
        let mut out = match b {
            Some(b) => self.data(b).repeat(m),
            None => vec![T::zero(); m * n],
        };
        gemm(m, k, n, self.data(x), false, self.data(w), false, T::one(), &mut out);
        self.bump(CostTag::Other, 2 * (m as u64) * (k as u64) * (n as u64))?;
        if relu {
            if self.track_kinks {
                let mask: Vec<bool> = out.iter().map(|&v| v > T::zero()).collect();
                self.mark_bits(mask.into_iter());
            }
            out.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        let value = Tensor::matrix(m, n, out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(value, Op::Affine { x, w, b, relu }, &inputs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    fn check_tiled(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != cb || rb == 0 || ra % rb != 0 {
            return Err(Error::shape(
                op,
                format!("{:?} and {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    fn zip_tiled(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let bd = self.data(b);
        let bl = bd.len();
        let src = self.value(a);
        let mut out = Vec::with_capacity(src.numel());
        for chunk in src.data().chunks_exact(bl) {
            out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(src.shape().to_vec(), out).expect("tiled: same shape")
    }

    /// `a + b`; `b` may have fewer rows than `a` and is then tiled down the rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_tiled("add", a, b)?;
        let value = self.zip_tiled(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// `a - b` with the same tiling rule as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_tiled("sub", a, b)?;
        let value = self.zip_tiled(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() || self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} and {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let value = self.zip_tiled(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::Scale { a, c }, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_kinks {
            let mask: Vec<bool> = self.data(a).iter().map(|&x| x > T::zero()).collect();
            self.mark_bits(mask.into_iter());
        }
        self.map(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.bump_exps(self.value(a).numel())?;
        Ok(self.map(a, Op::Exp(a), |x| x.exp()))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.data(a).iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::domain(
                "log",
                format!("non-positive input {:?}", bad.as_f64()),
            ));
        }
        Ok(self.map(a, Op::Log(a), |x| x.ln()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.bump_exps(self.value(a).numel())?;
        Ok(self.map(a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        }))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let signs: Vec<bool> = self.data(a).iter().map(|&x| x >= T::zero()).collect();
        self.mark_bits(signs.into_iter());
        self.map(a, Op::Abs(a), |x| x.abs())
    }

    /// Softmax along each row, computed with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        self.bump_exps(r * c)?;
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape_of(a), out)?;
        Ok(self.push(value, Op::RowSoftmax(a), &[a]))
    }

    /// Row-wise layer normalization with learned `gamma`/`beta` of shape `1×c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape_of(x),
                    self.shape_of(gamma),
                    self.shape_of(beta)
                ),
            ));
        }
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let rows = xs.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c));
        for (((row, hrow), orow), rs_out) in rows.zip(rstd.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            *rs_out = rs;
            for ((((&xv, h), o), &gj), &bj) in row.iter().zip(hrow).zip(orow).zip(g).zip(b) {
                *h = (xv - mean) * rs;
                *o = gj * *h + bj;
            }
        }
        let value = Tensor::new(self.shape_of(x), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index set"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {:?}", self.shape_of(a)),
            ));
        }
        for &i in idx {
            self.mark(i as u64);
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::shape("gather_cols", "empty index set"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::shape(
                "gather_cols",
                format!("column {bad} out of range for {:?}", self.shape_of(a)),
            ));
        }
        for &j in idx {
            self.mark(j as u64);
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| src[i * c + j]));
        }
        let value = Tensor::matrix(r, idx.len(), out)?;
        Ok(self.push(
            value,
            Op::GatherCols {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Picks `a[i, idx[i]]` from every row into an `r×1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::shape(
                "pick",
                format!("{} indices for {:?}", idx.len(), self.shape_of(a)),
            ));
        }
        let src = self.data(a);
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let value = Tensor::matrix(r, 1, out)?;
        Ok(self.push(
            value,
            Op::Pick {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(Tensor::full(vec![1], s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        self.push(Tensor::full(vec![1], s), Op::MeanAll(a), &[a])
    }

    /// Mean of every row, as an `r×1` column.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let n = T::lit(c as f64);
        let out = self
            .data(a)
            .chunks(c)
            .map(|row| row.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::matrix(r, 1, out)?;
        Ok(self.push(value, Op::MeanRows(a), &[a]))
    }

    /// Averages consecutive groups of `seg` rows: `(r×c) -> (r/seg × c)`.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if seg == 0 || r % seg != 0 {
            return Err(Error::shape(
                "segment_mean",
                format!("{r} rows not divisible into segments of {seg}"),
            ));
        }
        let groups = r / seg;
        let n = T::lit(seg as f64);
        let src = self.data(a);
        let mut out = vec![T::zero(); groups * c];
        for i in 0..r {
            let dst = &mut out[(i / seg) * c..(i / seg + 1) * c];
            for (o, &x) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x = *x / n);
        let value = Tensor::matrix(groups, c, out)?;
        Ok(self.push(value, Op::SegmentMean { a, seg }, &[a]))
    }

    /// Elementwise `(a - b)²`.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                "sq_diff",
                format!("{:?} and {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let value = self.zip_tiled(a, b, |x, y| (x - y) * (x - y));
        Ok(self.push(value, Op::SqDiff { a, b }, &[a, b]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in src.chunks(c).enumerate() {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::domain(
                    "l2_normalize_rows",
                    format!("row {i} has norm {:?}", n.as_f64()),
                ));
            }
            norms.push(n);
            out.extend(row.iter().map(|&x| x / n));
        }
        let value = Tensor::new(self.shape_of(a), out)?;
        Ok(self.push(value, Op::L2NormalizeRows { a, norms }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch {:?} vs {:?}", self.shape_of(first), self.shape_of(p)),
                ));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let value = Tensor::matrix(rows, c, out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, g, lower);
            if !matches!(node.op, Op::Leaf) {
                upper[0] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(lower[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = self.dims(*a);
                let (rb, cb) = self.dims(*b);
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = if *tb { rb } else { cb };
                let ad = self.data(*a);
                let bd = self.data(*b);
                if let Some(da) = self.slot(lower, *a) {
                    if *ta {
                        gemm(k, n, m, bd, *tb, g, true, T::one(), da);
                    } else {
                        gemm(m, n, k, g, false, bd, !*tb, T::one(), da);
                    }
                }
                if let Some(db) = self.slot(lower, *b) {
                    if *tb {
                        gemm(n, m, k, g, true, ad, *ta, T::one(), db);
                    } else {
                        gemm(k, m, n, ad, !*ta, g, false, T::one(), db);
                    }
                }
            }
            Op::Affine { x, w, b, relu } => {
                let (m, k) = self.dims(*x);
                let n = self.dims(*w).1;
                let masked: Vec<T>;
                let gy = if *relu {
                    masked = g.iter().zip(y).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }).collect();
                    &masked[..]
                } else {
                    g
                };
                if let Some(dx) = self.slot(lower, *x) {
                    gemm(m, n, k, gy, false, self.data(*w), true, T::one(), dx);
                }
                if let Some(dw) = self.slot(lower, *w) {
                    gemm(k, m, n, self.data(*x), true, gy, false, T::one(), dw);
                }
                if let Some(db) = b.and_then(|b| self.slot(lower, b)) {
                    for row in gy.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                if let Some(da) = self.slot(lower, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(node.op, Op::Sub { .. });
                if let Some(da) = self.slot(lower, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(lower, *b) {
                    let bl = db.len();
                    for chunk in g.chunks_exact(bl) {
                        if neg {
                            db.iter_mut().zip(chunk).for_each(|(d, &gi)| *d -= gi);
                        } else {
                            db.iter_mut().zip(chunk).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                if let Some(da) = self.slot(lower, *a) {
                    zip3(da, g, bd, |gi, bi| gi * bi);
                }
                if let Some(db) = self.slot(lower, *b) {
                    zip3(db, g, ad, |gi, ai| gi * ai);
                }
            }
            Op::Scale { a, c } => {
                if let Some(da) = self.slot(lower, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += *c * gi);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(da) = self.slot(lower, *a) {
                    add_into(da, g);
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(da) = self.slot(lower, *a) {
                    zip3(da, g, x, |gi, xi| if xi > T::zero() { gi } else { T::zero() });
                }
            }
            Op::Exp(a) => {
                if let Some(da) = self.slot(lower, *a) {
                    zip3(da, g, y, |gi, yi| gi * yi);
                }
            }
            Op::Log(a) => {
                let x = self.data(*a);
                if let Some(da) = self.slot(lower, *a) {
                    zip3(da, g, x, |gi, xi| gi / xi);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.slot(lower, *a) {
                    zip3(da, g, y, |gi, yi| gi * yi * (T::one() - yi));
                }
            }
            Op::Abs(a) => {
                let x = self.data(*a);
                if let Some(da) = self.slot(lower, *a) {
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            da[i] += g[i];
                        } else if x[i] < T::zero() {
                            da[i] -= g[i];
                        }
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let c = node.value.cols();
                if let Some(da) = self.slot(lower, *a) {
                    for ((drow, grow), yrow) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.dims(*x).1;
                let gm = self.data(*gamma);
                if let Some(dg) = self.slot(lower, *gamma) {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        zip3(dg, gr, hr, |gi, hi| gi * hi);
                    }
                }
                if let Some(db) = self.slot(lower, *beta) {
                    for gr in g.chunks_exact(c) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = self.slot(lower, *x) {
                    let n = T::lit(c as f64);
                    let mut dxhat = vec![T::zero(); c];
                    let rows = g.chunks_exact(c).zip(xhat.chunks_exact(c)).zip(dx.chunks_exact_mut(c));
                    for (((gr, hr), dxr), &rs) in rows.zip(rstd) {
                        for ((d, &gi), &gj) in dxhat.iter_mut().zip(gr).zip(gm) {
                            *d = gi * gj;
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / n;
                        for ((o, &d), &h) in dxr.iter_mut().zip(&dxhat).zip(hr) {
                            *o += rs * (d - m1 - h * m2);
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let c = self.dims(*a).1;
                if let Some(da) = self.slot(lower, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut da[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::GatherCols { a, idx } => {
                let (r, c) = self.dims(*a);
                let k = idx.len();
                if let Some(da) = self.slot(lower, *a) {
                    for i in 0..r {
                        for (col, &src) in idx.iter().enumerate() {
                            da[i * c + src] += g[i * k + col];
                        }
                    }
                }
            }
            Op::Pick { a, idx } => {
                let c = self.dims(*a).1;
                if let Some(da) = self.slot(lower, *a) {
                    for (i, &j) in idx.iter().enumerate() {
                        da[i * c + j] += g[i];
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(da) = self.slot(lower, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(da) = self.slot(lower, *a) {
                    let s = g[0] / T::lit(da.len() as f64);
                    da.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanRows(a) => {
                let c = self.dims(*a).1;
                if let Some(da) = self.slot(lower, *a) {
                    let n = T::lit(c as f64);
                    for (row, &gi) in da.chunks_mut(c).zip(g) {
                        let s = gi / n;
                        row.iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::SegmentMean { a, seg } => {
                let c = self.dims(*a).1;
                if let Some(da) = self.slot(lower, *a) {
                    let n = T::lit(*seg as f64);
                    for (i, row) in da.chunks_mut(c).enumerate() {
                        let gr = &g[(i / seg) * c..(i / seg + 1) * c];
                        for j in 0..c {
                            row[j] += gr[j] / n;
                        }
                    }
                }
            }
            Op::SqDiff { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                let two = T::lit(2.0);
                if let Some(da) = self.slot(lower, *a) {
                    for i in 0..g.len() {
                        da[i] += two * (ad[i] - bd[i]) * g[i];
                    }
                }
                if let Some(db) = self.slot(lower, *b) {
                    for i in 0..g.len() {
                        db[i] -= two * (ad[i] - bd[i]) * g[i];
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let c = node.value.cols();
                if let Some(da) = self.slot(lower, *a) {
                    for (i, ((drow, grow), yrow)) in da
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .enumerate()
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for j in 0..c {
                            drow[j] += (grow[j] - yrow[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(dp) = self.slot(lower, p) {
                        add_into(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// `dst[i] += f(g[i], x[i])`.
fn zip3<T: Real>(dst: &mut [T], g: &[T], x: &[T], f: impl Fn(T, T) -> T) {
    dst.iter_mut().zip(g.iter().zip(x)).for_each(|(d, (&gi, &xi))| *d += f(gi, xi));
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}
