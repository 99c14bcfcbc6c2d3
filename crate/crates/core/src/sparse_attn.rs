//! Saliency normalization, top-K patch selection and key-restricted attention.
//!
//! Two families live here. The value-level functions ([`sparse_attention`],
//! [`dense_attention`]) are plain kernels used for inspection, timing and as
//! a reference. The `*_graph` functions record the same arithmetic on a
//! [`Graph`] for training.

use crate::diffcore::{gemm, softmax_in_place, CostTag, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// How saliency enters the attention weights over the selected keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BiasMode {
    /// Plain key restriction: weights ∝ exp(q·k/√d) over the selected set.
    None,
    /// Weights ∝ exp(q·k/√d)·ŝ_j, giving the saliency predictor a gradient
    /// path through the attention output.
    #[default]
    Saliency,
}

impl BiasMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::None => "none",
            BiasMode::Saliency => "saliency",
        }
    }
}

/// Raw and normalized saliency for one image plus the selected patch set.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyState {
    pub scores: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub theta: f64,
    pub rho: f64,
    pub k: usize,
    pub set: Vec<usize>,
}

impl SaliencyState {
    pub fn from_scores(scores: &[f64], rho: f64, theta: f64) -> Result<Self> {
        let s_hat = normalize_scores(scores)?;
        let (k, set) = select_topk(&s_hat, rho)?;
        Ok(Self {
            scores: scores.to_vec(),
            s_hat,
            theta,
            rho,
            k,
            set,
        })
    }

    /// Patches whose normalized score exceeds the threshold.
    pub fn above_threshold(&self) -> usize {
        self.s_hat.iter().filter(|&&v| v > self.theta).count()
    }
}

/// Softmax over all patch scores.
pub fn normalize_scores<T: Real>(scores: &[T]) -> Result<Vec<T>> {
    if scores.is_empty() {
        return Err(Error::shape("normalize_scores", "no scores"));
    }
    if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("saliency score {i}")));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!("rho must lie in (0, 1], got {rho}")));
    }
    Ok(())
}

/// `K = max(1, ⌊ρL⌋)`.
///
/// A 1e-9 slack absorbs representation error so that e.g. `0.29 · 100`
/// floors to 29.
pub fn budget(l: usize, rho: f64) -> Result<usize> {
    check_rho(rho)?;
    let k = (rho * l as f64 + 1e-9).floor() as usize;
    Ok(k.clamp(1, l.max(1)))
}

/// Indices of the `K` largest normalized scores, ties to the lower index,
/// returned in ascending order.
pub fn select_topk<T: Real>(s_hat: &[T], rho: f64) -> Result<(usize, Vec<usize>)> {
    let l = s_hat.len();
    if l == 0 {
        return Err(Error::shape("select_topk", "no scores"));
    }
    let k = budget(l, rho)?;
    if let Some(i) = s_hat.iter().position(|x| x.is_nan()) {
        return Err(Error::NonFinite(format!("normalized score {i}")));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        s_hat[b]
            .partial_cmp(&s_hat[a])
            .expect("no NaN")
            .then(a.cmp(&b))
    });
    let mut set = order[..k].to_vec();
    set.sort_unstable();
    Ok((k, set))
}

fn validate_set(set: &[usize], l: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::shape("sparse_attention", "empty key set"));
    }
    if set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::shape(
            "sparse_attention",
            "key set must be strictly increasing",
        ));
    }
    if let Some(&bad) = set.iter().find(|&&j| j >= l) {
        return Err(Error::shape(
            "sparse_attention",
            format!("key index {bad} out of range for L={l}"),
        ));
    }
    Ok(())
}

fn check_qkv<T: Real>(op: &'static str, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    let (lq, dq) = q.dims2();
    let (lk, dk) = k.dims2();
    let (lv, _) = v.dims2();
    if dq != dk || lq != lk || lk != lv {
        return Err(Error::shape(
            op,
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(())
}

/// Attention weights with support restricted to a column set.
///
/// Only the `L×K` block of nonzero weights is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    l: usize,
    support: Vec<usize>,
    weights: Tensor<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn rows(&self) -> usize {
        self.l
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// The compact `L×K` weights, columns aligned with [`Self::support`].
    pub fn compact(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        match self.support.binary_search(&j) {
            Ok(c) => self.weights.at(i, c),
            Err(_) => T::zero(),
        }
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.l)
            .map(|i| self.weights.row(i).iter().copied().sum())
            .collect()
    }

    /// Full `L×L` matrix with exact zeros outside the support.
    pub fn materialize(&self) -> Tensor<T> {
        let k = self.support.len();
        let mut out = vec![T::zero(); self.l * self.l];
        for i in 0..self.l {
            for (c, &j) in self.support.iter().enumerate() {
                out[i * self.l + j] = self.weights.data()[i * k + c];
            }
        }
        Tensor::matrix(self.l, self.l, out).expect("square map")
    }
}

fn gather<T: Real>(m: &Tensor<T>, rows: &[usize]) -> Vec<T> {
    let c = m.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(m.row(r));
    }
    out
}

/// Every query attends only to the keys in `set`.
///
/// Touches `L·K` score entries; the dense `L×L` map is never built.
pub fn sparse_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    set: &[usize],
    s_hat: &[T],
    bias: BiasMode,
) -> Result<(Tensor<T>, AttentionMap<T>)> {
    check_qkv("sparse_attention", q, k, v)?;
    let (l, d) = q.dims2();
    let dv = v.cols();
    validate_set(set, l)?;
    let kk = set.len();
    let ks = gather(k, set);
    let vs = gather(v, set);

    let mut scores = vec![T::zero(); l * kk];
    gemm(l, d, kk, q.data(), false, &ks, true, T::zero(), &mut scores);
    let inv = T::one() / T::lit(d as f64).sqrt();
    scores.iter_mut().for_each(|x| *x *= inv);
    if bias == BiasMode::Saliency {
        if s_hat.len() != l {
            return Err(Error::shape(
                "sparse_attention",
                format!("{} saliency values for L={l}", s_hat.len()),
            ));
        }
        let logs: Vec<T> = set
            .iter()
            .map(|&j| {
                let s = s_hat[j];
                if s > T::zero() {
                    Ok(s.ln())
                } else {
                    Err(Error::domain(
                        "sparse_attention",
                        format!("saliency {:?} at key {j} must be positive", s.as_f64()),
                    ))
                }
            })
            .collect::<Result<_>>()?;
        for row in scores.chunks_mut(kk) {
            row.iter_mut().zip(&logs).for_each(|(x, &b)| *x += b);
        }
    }
    for row in scores.chunks_mut(kk) {
        softmax_in_place(row);
    }
    let mut out = vec![T::zero(); l * dv];
    gemm(l, kk, dv, &scores, false, &vs, false, T::zero(), &mut out);
    Ok((
        Tensor::matrix(l, dv, out)?,
        AttentionMap {
            l,
            support: set.to_vec(),
            weights: Tensor::matrix(l, kk, scores)?,
        },
    ))
}

/// `softmax(QKᵀ/√d)·V` with the full `L×L` weight matrix.
pub fn dense_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_qkv("dense_attention", q, k, v)?;
    let (l, d) = q.dims2();
    let dv = v.cols();
    let mut a = vec![T::zero(); l * l];
    gemm(l, d, l, q.data(), false, k.data(), true, T::zero(), &mut a);
    let inv = T::one() / T::lit(d as f64).sqrt();
    for row in a.chunks_mut(l) {
        row.iter_mut().for_each(|x| *x *= inv);
        softmax_in_place(row);
    }
    let mut out = vec![T::zero(); l * dv];
    gemm(l, l, dv, &a, false, v.data(), false, T::zero(), &mut out);
    Ok((Tensor::matrix(l, dv, out)?, Tensor::matrix(l, l, a)?))
}

/// `log ŝ_j` for the selected keys, as a `1×K` row added to the logits.
///
/// Adding `log ŝ_j` before the row softmax is the same as multiplying each
/// numerator by `ŝ_j` and renormalizing over the set.
pub fn saliency_log_bias<T: Real>(g: &mut Graph<T>, s_hat_row: Var, set: &[usize]) -> Result<Var> {
    let picked = g.gather_cols(s_hat_row, set)?;
    g.log(picked)
}

/// Graph form of [`sparse_attention`] for one image's `L×d` projections.
pub fn sparse_attention_graph<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    set: &[usize],
    log_bias: Option<Var>,
) -> Result<Var> {
    let l = g.value(q).rows();
    validate_set(set, l)?;
    let d = g.value(k).cols();
    let ks = g.gather_rows(k, set)?;
    let vs = g.gather_rows(v, set)?;
    let scores = g.matmul_ext(q, ks, false, true, CostTag::AttentionScores)?;
    let mut logits = g.scale(scores, T::one() / T::lit(d as f64).sqrt());
    if let Some(b) = log_bias {
        logits = g.add(logits, b)?;
    }
    let a = g.row_softmax(logits)?;
    g.matmul_ext(a, vs, false, false, CostTag::AttentionValues)
}

/// Graph form of [`dense_attention`].
pub fn dense_attention_graph<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.value(k).cols();
    let scores = g.matmul_ext(q, k, false, true, CostTag::AttentionScores)?;
    let logits = g.scale(scores, T::one() / T::lit(d as f64).sqrt());
    let a = g.row_softmax(logits)?;
    g.matmul_ext(a, v, false, false, CostTag::AttentionValues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_qkv(l: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::uniform(vec![l, d], 1.0, &mut rng),
            Tensor::uniform(vec![l, d], 1.0, &mut rng),
            Tensor::uniform(vec![l, d], 1.0, &mut rng),
        )
    }

    #[test]
    fn normalize_examples() {
        let s = normalize_scores(&[0.0f64; 4]).unwrap();
        assert!(s.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let s = normalize_scores(&[2f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(normalize_scores(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.4, 0.3, 0.2, 0.1], 0.5).unwrap(), (2, vec![0, 1]));
        assert_eq!(select_topk(&[0.25f64; 4], 0.25).unwrap(), (1, vec![0]));
        let uniform = vec![1.0 / 196.0f64; 196];
        assert_eq!(select_topk(&uniform, 0.3).unwrap().0, 58);
        assert_eq!(budget(64, 0.3).unwrap(), 19);
        assert_eq!(budget(4, 0.1).unwrap(), 1);
        assert_eq!(budget(100, 0.29).unwrap(), 29);
        assert!(select_topk(&[0.5f64, 0.5], 0.0).is_err());
        assert!(select_topk(&[0.5f64, 0.5], 1.5).is_err());
    }

    #[test]
    fn topk_selects_largest_unsorted_input() {
        let (k, set) = select_topk(&[0.1, 0.4, 0.05, 0.3, 0.15], 0.4).unwrap();
        assert_eq!(k, 2);
        assert_eq!(set, vec![1, 3]);
    }

    #[test]
    fn scalar_two_key_case() {
        // Both query rows are q = [1].
        let q = Tensor::from_f64(vec![2, 1], &[1.0, 1.0]).unwrap();
        let k = Tensor::from_f64(vec![2, 1], &[1.0, -1.0]).unwrap();
        let v = Tensor::from_f64(vec![2, 1], &[0.0, 0.0]).unwrap();
        let (_, a) = sparse_attention(&q, &k, &v, &[0, 1], &[0.5, 0.5], BiasMode::None).unwrap();
        let e = std::f64::consts::E;
        assert!((a.get(0, 0) - e / (e + 1.0 / e)).abs() < 1e-15);
        assert!((a.get(0, 1) - (1.0 / e) / (e + 1.0 / e)).abs() < 1e-15);
        assert!((a.get(0, 0) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn single_key_gets_all_weight() {
        let (q, k, v) = rand_qkv(6, 4, 1);
        let (f, a) = sparse_attention(&q, &k, &v, &[3], &[1.0 / 6.0; 6], BiasMode::Saliency).unwrap();
        for i in 0..6 {
            assert_eq!(a.get(i, 3), 1.0);
            assert_eq!(f.row(i), v.row(3));
        }
    }

    #[test]
    fn uniform_dense_weights_average_values() {
        let l = 4;
        let q = Tensor::<f64>::zeros(vec![l, 2]);
        let k = Tensor::from_f64(vec![l, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut eye = vec![0.0; l * l];
        for i in 0..l {
            eye[i * l + i] = 1.0;
        }
        let v = Tensor::from_f64(vec![l, l], &eye).unwrap();
        let (f, a) = dense_attention(&q, &k, &v).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(f.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_sets() {
        let (q, k, v) = rand_qkv(4, 2, 2);
        let s = [0.25; 4];
        assert!(sparse_attention(&q, &k, &v, &[], &s, BiasMode::None).is_err());
        assert!(sparse_attention(&q, &k, &v, &[2, 1], &s, BiasMode::None).is_err());
        assert!(sparse_attention(&q, &k, &v, &[4], &s, BiasMode::None).is_err());
    }

    #[test]
    fn graph_path_matches_kernel() {
        let (q, k, v) = rand_qkv(8, 4, 3);
        let s_hat = normalize_scores(&[0.3, -0.2, 1.0, 0.1, 0.0, 0.5, -1.0, 0.2f64]).unwrap();
        let (_, set) = select_topk(&s_hat, 0.5).unwrap();
        let (f, _) = sparse_attention(&q, &k, &v, &set, &s_hat, BiasMode::Saliency).unwrap();
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
        let row = g.constant(Tensor::new(vec![1, 8], s_hat.clone()).unwrap());
        let bias = saliency_log_bias(&mut g, row, &set).unwrap();
        let out = sparse_attention_graph(&mut g, qv, kv, vv, &set, Some(bias)).unwrap();
        for (a, b) in g.value(out).data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.counters().attention(), 2 * 2 * 8 * 4 * 4);
    }

    proptest! {
        #[test]
        fn support_and_rows(seed in 0u64..1000, l in 2usize..24, d in 1usize..8, rho in 0.05f64..1.0) {
            let (q, k, v) = rand_qkv(l, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let scores = Tensor::<f64>::uniform(vec![l], 2.0, &mut rng);
            let s_hat = normalize_scores(scores.data()).unwrap();
            let (kk, set) = select_topk(&s_hat, rho).unwrap();
            prop_assert_eq!(set.len(), kk);
            for bias in [BiasMode::None, BiasMode::Saliency] {
                let (_, a) = sparse_attention(&q, &k, &v, &set, &s_hat, bias).unwrap();
                let full = a.materialize();
                for i in 0..l {
                    let sum: f64 = full.row(i).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                    for j in 0..l {
                        if set.binary_search(&j).is_err() {
                            prop_assert_eq!(full.at(i, j), 0.0);
                        } else {
                            prop_assert!(full.at(i, j) >= 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn full_set_matches_dense(seed in 0u64..1000, l in 1usize..20, d in 1usize..8) {
            let (q, k, v) = rand_qkv(l, d, seed);
            let all: Vec<usize> = (0..l).collect();
            let (fs, a) = sparse_attention(&q, &k, &v, &all, &[], BiasMode::None).unwrap();
            let (fd, ad) = dense_attention(&q, &k, &v).unwrap();
            for (x, y) in fs.data().iter().zip(fd.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in a.materialize().data().iter().zip(ad.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn topk_shift_invariant(seed in 0u64..1000, l in 1usize..40, rho in 0.05f64..1.0, c in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::<f64>::uniform(vec![l], 3.0, &mut rng);
            let shifted: Vec<f64> = s.data().iter().map(|x| x + c).collect();
            let a = normalize_scores(s.data()).unwrap();
            let b = normalize_scores(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(select_topk(&a, rho).unwrap(), select_topk(&b, rho).unwrap());
        }

        #[test]
        fn topk_dominance(seed in 0u64..1000, l in 1usize..40, rho in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::<f64>::uniform(vec![l], 3.0, &mut rng);
            let s_hat = normalize_scores(s.data()).unwrap();
            prop_assert!((s_hat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s_hat.iter().all(|&x| x > 0.0));
            let (k, set) = select_topk(&s_hat, rho).unwrap();
            prop_assert_eq!(k, ((rho * l as f64 + 1e-9).floor() as usize).max(1));
            prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
            let min_in = set.iter().map(|&i| s_hat[i]).fold(f64::INFINITY, f64::min);
            for j in (0..l).filter(|j| set.binary_search(j).is_err()) {
                prop_assert!(s_hat[j] <= min_in);
            }
        }
    }
}
