//! Contrastive, sparsity and classification objectives as graph nodes.

use crate::diffcore::{CostTag, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Added to masked self-similarities; large enough that `exp` underflows to zero.
const MASK: f64 = -1e9;

/// Two unit-norm views per image plus the temperature.
#[derive(Clone, Copy, Debug)]
pub struct ContrastBatch {
    pub z_a: Var,
    pub z_b: Var,
    pub tau: f64,
}

impl ContrastBatch {
    /// Checks pairing shape, unit norms (within 1e-6 relative to the float type's
    /// own precision) and the temperature.
    pub fn new<T: Real>(g: &Graph<T>, z_a: Var, z_b: Var, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let (a, b) = (g.value(z_a), g.value(z_b));
        if a.shape() != b.shape() || a.shape().len() != 2 || a.rows() == 0 {
            return Err(Error::shape(
                "info_nce",
                format!("views {:?} and {:?} must be matching N×d", a.shape(), b.shape()),
            ));
        }
        let tol = 1e-6f64.max(T::epsilon().as_f64() * 16.0);
        for t in [a, b] {
            for i in 0..t.rows() {
                let n: f64 = t.row(i).iter().map(|x| x.as_f64() * x.as_f64()).sum();
                if (n.sqrt() - 1.0).abs() > tol {
                    return Err(Error::domain(
                        "info_nce",
                        format!("row {i} has norm {} (expected unit vectors)", n.sqrt()),
                    ));
                }
            }
        }
        Ok(Self { z_a, z_b, tau })
    }
}

/// Symmetrized InfoNCE with both-view in-batch negatives.
///
/// Each of the `2N` vectors is an anchor; its positive is the other view of
/// the same image and its negatives are the remaining `2N−2` vectors. The
/// result is the mean over all anchors of `−log softmax(sim/τ)[positive]`.
pub fn info_nce<T: Real>(g: &mut Graph<T>, batch: &ContrastBatch) -> Result<Var> {
    let n = g.value(batch.z_a).rows();
    let z = g.concat_rows(&[batch.z_a, batch.z_b])?;
    let sims = g.matmul_ext(z, z, false, true, CostTag::Other)?;
    let sims = g.scale(sims, T::lit(1.0 / batch.tau));
    let mut mask = Tensor::zeros(vec![2 * n, 2 * n]);
    for i in 0..2 * n {
        mask.data_mut()[i * 2 * n + i] = T::lit(MASK);
    }
    let mask = g.constant(mask);
    let logits = g.add(sims, mask)?;
    let p = g.row_softmax(logits)?;
    let positives: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    let pp = g.pick(p, &positives)?;
    let lp = g.log(pp)?;
    let m = g.mean(lp);
    Ok(g.scale(m, -T::one()))
}

/// Graph nodes and reported values of the sparsity objective.
#[derive(Clone, Copy, Debug)]
pub struct SparsityTerms {
    /// `mean over images |mean_i σ((ŝ_i − θ)/t) − ρ|`, differentiable.
    pub budget_soft: Var,
    /// Same with the hard indicator `ŝ_i > θ`; a metric only.
    pub budget_hard: f64,
    /// Mean squared pixel error over selected patches.
    pub recon: Var,
    /// `budget_soft + recon`.
    pub total: Var,
}

/// `|(1/L)·#{i: ŝ_i > θ} − ρ|` for one image.
pub fn hard_budget_term<T: Real>(s_hat: &[T], theta: f64, rho: f64) -> f64 {
    let above = s_hat.iter().filter(|v| v.as_f64() > theta).count();
    (above as f64 / s_hat.len() as f64 - rho).abs()
}

/// Sparsity objective over a stack of images.
///
/// `s_hat` is `n×L`. `patches` holds all `n·L` original patch rows; `recon`
/// holds the decoder output for the selected patches in set order, as
/// produced by `recon_forward`. Reconstruction error is summed over every
/// selected patch and divided by the total number selected.
#[allow(clippy::too_many_arguments)]
pub fn sparsity_loss<T: Real>(
    g: &mut Graph<T>,
    s_hat: Var,
    theta: f64,
    rho: f64,
    patches: Var,
    recon: Var,
    sets: &[Vec<usize>],
    t_ind: f64,
) -> Result<SparsityTerms> {
    if !(t_ind > 0.0) {
        return Err(Error::config(format!("indicator temperature must be positive, got {t_ind}")));
    }
    let (n, l) = g.value(s_hat).dims2();
    if sets.len() != n || sets.iter().any(Vec::is_empty) {
        return Err(Error::domain("sparsity_loss", "every image needs a non-empty selected set"));
    }
    if g.value(patches).rows() != n * l {
        return Err(Error::shape(
            "sparsity_loss",
            format!("{} patch rows for {n} images of {l}", g.value(patches).rows()),
        ));
    }
    let mut rows = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        rows.extend(set.iter().map(|&j| i * l + j));
    }
    let selected = rows.len();

    let budget_hard = (0..n)
        .map(|i| hard_budget_term(g.value(s_hat).row(i), theta, rho))
        .sum::<f64>()
        / n as f64;

    let shifted = g.add_scalar(s_hat, T::lit(-theta));
    let shifted = g.scale(shifted, T::lit(1.0 / t_ind));
    let ind = g.sigmoid(shifted)?;
    let frac = g.mean_rows(ind)?;
    let dev = g.add_scalar(frac, T::lit(-rho));
    let dev = g.abs(dev);
    let budget_soft = g.mean(dev);

    let target = g.gather_rows(patches, &rows)?;
    let err = g.sq_diff(recon, target)?;
    let err = g.sum(err);
    let recon_term = g.scale(err, T::lit(1.0 / selected as f64));

    let total = g.add(budget_soft, recon_term)?;
    Ok(SparsityTerms {
        budget_soft,
        budget_hard,
        recon: recon_term,
        total,
    })
}

/// `L_contrast + λ·L_sparse`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, l_contrast: Var, l_sparse: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be non-negative, got {lambda}")));
    }
    let w = g.scale(l_sparse, T::lit(lambda));
    g.add(l_contrast, w)
}

/// Mean negative log-probability of the true class; `probs` is `n×C`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = g.pick(probs, labels)?;
    let lp = g.log(p)?;
    let m = g.mean(lp);
    Ok(g.scale(m, -T::one()))
}
