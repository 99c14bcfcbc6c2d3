//! Graph-building forward passes.
//!
//! Images are processed as a stack: `n` images of `L` patches each occupy
//! `n·L` consecutive rows, so the dense layers run as one large product and
//! only attention is split per image.

use super::{Arch, SaliencyInput};
use crate::diffcore::{Bound, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse_attn::{
    dense_attention_graph, saliency_log_bias, select_topk, sparse_attention, sparse_attention_graph,
    AttentionMap, BiasMode,
};

const LN_EPS: f64 = 1e-5;

fn images_in<T: Real>(g: &Graph<T>, x: Var, arch: &Arch, op: &'static str) -> Result<usize> {
    let rows = g.value(x).rows();
    let l = arch.tokens();
    if rows == 0 || rows % l != 0 {
        return Err(Error::shape(
            op,
            format!("{rows} rows is not a whole number of {l}-patch images"),
        ));
    }
    Ok(rows / l)
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    g.affine(x, w, b, false)
}

fn linear_relu<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    g.affine(x, w, b, true)
}

/// `(n·L)×(P·P·C)` patches to `(n·L)×d` embeddings: linear map plus a learned
/// position row per patch index.
pub fn embed_patches<T: Real>(g: &mut Graph<T>, b: &Bound, arch: &Arch, patches: Var) -> Result<Var> {
    if g.value(patches).cols() != arch.patch_dim() {
        return Err(Error::shape(
            "embed_patches",
            format!(
                "patch width {} vs expected {}",
                g.value(patches).cols(),
                arch.patch_dim()
            ),
        ));
    }
    images_in(g, patches, arch, "embed_patches")?;
    let e = linear(g, patches, b.get("embed.w")?, Some(b.get("embed.b")?))?;
    g.add(e, b.get("embed.pos")?)
}

/// Per-patch saliency score, `rows×1`.
pub fn saliency_forward<T: Real>(g: &mut Graph<T>, b: &Bound, arch: &Arch, input: Var) -> Result<Var> {
    let (rows, cols) = g.value(input).dims2();
    if cols != arch.saliency_in() {
        return Err(Error::shape(
            "saliency_forward",
            format!("input width {cols} vs expected {}", arch.saliency_in()),
        ));
    }
    g.count_saliency_rows(rows)?;
    let h = linear_relu(g, input, b.get("saliency.w1")?, Some(b.get("saliency.b1")?))?;
    let h = linear_relu(g, h, b.get("saliency.w2")?, Some(b.get("saliency.b2")?))?;
    linear(g, h, b.get("saliency.w3")?, Some(b.get("saliency.b3")?))
}

/// Attention used inside every encoder block.
#[derive(Clone, Copy, Debug)]
pub enum AttentionPlan<'a> {
    Dense,
    /// Keys restricted to one sorted set per image, with optional `1×K` logit biases.
    Sparse {
        sets: &'a [Vec<usize>],
        log_bias: Option<&'a [Var]>,
    },
}

/// Pre-norm encoder: `x + Attn(LN(x))`, then `x + MLP(LN(x))`, per block.
pub fn backbone_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    arch: &Arch,
    x: Var,
    plan: &AttentionPlan<'_>,
) -> Result<Var> {
    let n = images_in(g, x, arch, "backbone_forward")?;
    if g.value(x).cols() != arch.d {
        return Err(Error::shape(
            "backbone_forward",
            format!("width {} vs d={}", g.value(x).cols(), arch.d),
        ));
    }
    if let AttentionPlan::Sparse { sets, log_bias } = plan {
        if sets.len() != n || log_bias.is_some_and(|lb| lb.len() != n) {
            return Err(Error::shape(
                "backbone_forward",
                format!("{} key sets for {n} images", sets.len()),
            ));
        }
    }
    let l = arch.tokens();
    let mut x = x;
    for blk in 0..arch.n_blocks {
        let p = |s: &str| b.get(&format!("block{blk}.{s}"));
        let h = g.layer_norm(x, p("ln1.g")?, p("ln1.b")?, LN_EPS)?;
        let q = g.matmul(h, p("attn.wq")?)?;
        let k = g.matmul(h, p("attn.wk")?)?;
        let v = g.matmul(h, p("attn.wv")?)?;
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let (qi, ki, vi) = if n == 1 {
                (q, k, v)
            } else {
                let rows: Vec<usize> = (i * l..(i + 1) * l).collect();
                (
                    g.gather_rows(q, &rows)?,
                    g.gather_rows(k, &rows)?,
                    g.gather_rows(v, &rows)?,
                )
            };
            let o = match plan {
                AttentionPlan::Dense => dense_attention_graph(g, qi, ki, vi)?,
                AttentionPlan::Sparse { sets, log_bias } => {
                    sparse_attention_graph(g, qi, ki, vi, &sets[i], log_bias.map(|lb| lb[i]))?
                }
            };
            outs.push(o);
        }
        let cat = if n == 1 { outs[0] } else { g.concat_rows(&outs)? };
        let o = g.matmul(cat, p("attn.wo")?)?;
        x = g.add(x, o)?;

        let h = g.layer_norm(x, p("ln2.g")?, p("ln2.b")?, LN_EPS)?;
        let m = linear_relu(g, h, p("mlp.w1")?, Some(p("mlp.b1")?))?;
        let m = linear(g, m, p("mlp.w2")?, Some(p("mlp.b2")?))?;
        x = g.add(x, m)?;
    }
    Ok(x)
}

/// Mean-pool each image's rows, 2-layer bias-free MLP, unit-normalize: `n×d_z`.
pub fn projection_forward<T: Real>(g: &mut Graph<T>, b: &Bound, arch: &Arch, features: Var) -> Result<Var> {
    images_in(g, features, arch, "projection_forward")?;
    let pooled = g.segment_mean(features, arch.tokens())?;
    let h = linear_relu(g, pooled, b.get("proj.w1")?, None)?;
    let z = g.matmul(h, b.get("proj.w2")?)?;
    g.l2_normalize_rows(z)
}

/// Mean-pool, linear layer, softmax: class probabilities `n×C`.
pub fn classifier_forward<T: Real>(g: &mut Graph<T>, b: &Bound, arch: &Arch, features: Var) -> Result<Var> {
    images_in(g, features, arch, "classifier_forward")?;
    let pooled = g.segment_mean(features, arch.tokens())?;
    let logits = linear(g, pooled, b.get("cls.w")?, Some(b.get("cls.b")?))?;
    g.row_softmax(logits)
}

/// Linear decoder from each selected patch's feature row back to pixels.
///
/// Output rows follow the sets: image 0's selected patches in order, then image 1's, ...
pub fn recon_forward<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    arch: &Arch,
    features: Var,
    sets: &[Vec<usize>],
) -> Result<Var> {
    let n = images_in(g, features, arch, "recon_forward")?;
    let l = arch.tokens();
    if sets.len() != n {
        return Err(Error::shape(
            "recon_forward",
            format!("{} index sets for {n} images", sets.len()),
        ));
    }
    let mut rows = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        for &j in set {
            if j >= l {
                return Err(Error::shape(
                    "recon_forward",
                    format!("patch index {j} outside [0, {l})"),
                ));
            }
            rows.push(i * l + j);
        }
    }
    let picked = g.gather_rows(features, &rows)?;
    linear(g, picked, b.get("recon.w")?, Some(b.get("recon.b")?))
}

/// Where the per-image key sets come from.
#[derive(Clone, Copy, Debug)]
pub enum SelectionSource<'a, T> {
    /// Full attention; no saliency pass.
    Dense,
    /// Run the saliency predictor and keep the top `⌊ρL⌋` patches, or reuse
    /// `fixed` sets while still computing saliency.
    Predict {
        rho: f64,
        fixed: Option<&'a [Vec<usize>]>,
    },
    /// Sets and normalized scores from a frozen cache; the predictor is not run.
    Cached {
        sets: &'a [Vec<usize>],
        s_hat: &'a [Vec<T>],
    },
}

/// Graph handles produced by [`encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub embeddings: Var,
    pub features: Var,
    /// Normalized saliency `n×L` (absent in dense mode).
    pub s_hat: Option<Var>,
    /// Selected key sets, one per image (empty in dense mode).
    pub sets: Vec<Vec<usize>>,
}

/// Embed, score, select and encode a stack of images.
///
/// Selection is a hard top-K on the forward values; no gradient flows
/// through the choice of indices. With [`BiasMode::Saliency`] gradients
/// reach the scores through the attention logits.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    arch: &Arch,
    patches: Var,
    source: SelectionSource<'_, T>,
    bias: BiasMode,
) -> Result<Encoded> {
    let n = images_in(g, patches, arch, "encode")?;
    let l = arch.tokens();
    let embeddings = embed_patches(g, b, arch, patches)?;
    let (s_hat, sets) = match source {
        SelectionSource::Dense => (None, Vec::new()),
        SelectionSource::Predict { rho, fixed } => {
            let input = match arch.saliency_input {
                SaliencyInput::Raw => patches,
                SaliencyInput::Embedded => embeddings,
            };
            let s = saliency_forward(g, b, arch, input)?;
            let s = g.reshape(s, vec![n, l])?;
            let s_hat = g.row_softmax(s)?;
            let sets = match fixed {
                Some(f) if f.len() == n => f.to_vec(),
                Some(f) => {
                    return Err(Error::shape(
                        "encode",
                        format!("{} fixed sets for {n} images", f.len()),
                    ))
                }
                None => (0..n)
                    .map(|i| select_topk(g.value(s_hat).row(i), rho).map(|(_, set)| set))
                    .collect::<Result<Vec<_>>>()?,
            };
            (Some(s_hat), sets)
        }
        SelectionSource::Cached { sets, s_hat } => {
            if sets.len() != n || s_hat.len() != n || s_hat.iter().any(|r| r.len() != l) {
                return Err(Error::shape(
                    "encode",
                    format!("cache rows ({}, {}) for {n} images of L={l}", sets.len(), s_hat.len()),
                ));
            }
            let flat: Vec<T> = s_hat.iter().flatten().copied().collect();
            let c = g.constant(Tensor::matrix(n, l, flat)?);
            (Some(c), sets.to_vec())
        }
    };

    let log_bias = match (bias, s_hat) {
        (BiasMode::Saliency, Some(sh)) if !sets.is_empty() => {
            let mut v = Vec::with_capacity(n);
            for (i, set) in sets.iter().enumerate() {
                let row = if n == 1 { sh } else { g.gather_rows(sh, &[i])? };
                v.push(saliency_log_bias(g, row, set)?);
            }
            Some(v)
        }
        _ => None,
    };
    let plan = if sets.is_empty() {
        AttentionPlan::Dense
    } else {
        AttentionPlan::Sparse {
            sets: &sets,
            log_bias: log_bias.as_deref(),
        }
    };
    let features = backbone_forward(g, b, arch, embeddings, &plan)?;
    Ok(Encoded {
        embeddings,
        features,
        s_hat,
        sets,
    })
}

/// The first encoder block's attention map for one image, given its key set
/// and normalized saliency. Inspection only: built from values, no graph
/// gradients.
pub fn first_block_attention<T: Real>(
    b: &Bound,
    g: &mut Graph<T>,
    arch: &Arch,
    patches: Var,
    set: &[usize],
    s_hat: &[T],
    bias: BiasMode,
) -> Result<AttentionMap<T>> {
    if images_in(g, patches, arch, "first_block_attention")? != 1 {
        return Err(Error::shape("first_block_attention", "expected a single image"));
    }
    if arch.n_blocks == 0 {
        return Err(Error::shape("first_block_attention", "model has no encoder blocks"));
    }
    let x = embed_patches(g, b, arch, patches)?;
    let h = g.layer_norm(x, b.get("block0.ln1.g")?, b.get("block0.ln1.b")?, LN_EPS)?;
    let q = g.matmul(h, b.get("block0.attn.wq")?)?;
    let k = g.matmul(h, b.get("block0.attn.wk")?)?;
    let v = g.matmul(h, b.get("block0.attn.wv")?)?;
    let (_, map) = sparse_attention(g.value(q), g.value(k), g.value(v), set, s_hat, bias)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Arch {
        Arch {
            patch: 2,
            channels: 1,
            grid_h: 2,
            grid_w: 2,
            d: 8,
            n_blocks: 1,
            mlp_hidden: 16,
            saliency_hidden: [12, 6],
            saliency_input: SaliencyInput::Embedded,
            d_z: 4,
            n_classes: 2,
        }
    }

    fn zero(p: &mut ModelParams<f64>, name: &str) {
        p.store
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }

    fn rand_patches(g: &mut Graph<f64>, arch: &Arch, n: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(Tensor::uniform(vec![n * arch.tokens(), arch.patch_dim()], 1.0, &mut rng))
    }

    #[test]
    fn zero_embedding() {
        let arch = tiny();
        let mut p = ModelParams::<f64>::init(arch.clone(), 1).unwrap();
        zero(&mut p, "embed.w");
        zero(&mut p, "embed.pos");
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let x = rand_patches(&mut g, &arch, 2, 3);
        let e = embed_patches(&mut g, &b, &arch, x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_patches_differ_only_by_position() {
        let arch = tiny();
        let mut p = ModelParams::<f64>::init(arch.clone(), 1).unwrap();
        let patch = [0.1, 0.2, 0.3, 0.4];
        let x: Vec<f64> = patch.iter().cycle().take(16).copied().collect();
        {
            // Rows 0 and 1 share a position embedding; rows 2 and 3 do not.
            let pos = p.store.get_mut("embed.pos").unwrap().data_mut();
            let row0: Vec<f64> = pos[0..8].to_vec();
            pos[8..16].copy_from_slice(&row0);
        }
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let xv = g.constant(Tensor::from_f64(vec![4, 4], &x).unwrap());
        let e = embed_patches(&mut g, &b, &arch, xv).unwrap();
        let v = g.value(e);
        assert_eq!(v.row(0), v.row(1));
        assert_ne!(v.row(2), v.row(3));
    }

    #[test]
    fn zero_blocks_is_identity() {
        let arch = Arch {
            n_blocks: 0,
            ..tiny()
        };
        let p = ModelParams::<f64>::init(arch.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = g.constant(Tensor::uniform(vec![4, 8], 1.0, &mut rng));
        let y = backbone_forward(&mut g, &b, &arch, x, &AttentionPlan::Dense).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn dense_backbone_is_permutation_equivariant() {
        let arch = Arch {
            grid_h: 2,
            grid_w: 3,
            ..tiny()
        };
        let p = ModelParams::<f64>::init(arch.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(vec![6, 8], 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut px = Vec::new();
        for &i in &perm {
            px.extend_from_slice(x.row(i));
        }
        let px = Tensor::matrix(6, 8, px).unwrap();

        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let xv = g.constant(x);
        let pv = g.constant(px);
        let y = backbone_forward(&mut g, &b, &arch, xv, &AttentionPlan::Dense).unwrap();
        let py = backbone_forward(&mut g, &b, &arch, pv, &AttentionPlan::Dense).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for (a, c) in g.value(py).row(r).iter().zip(g.value(y).row(i)) {
                assert!((a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saliency_zero_head_and_duplicate_rows() {
        let arch = tiny();
        let mut p = ModelParams::<f64>::init(arch.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Tensor::<f64>::uniform(vec![4, 8], 1.0, &mut rng);
        let r1 = x.row(1).to_vec();
        x.data_mut()[24..32].copy_from_slice(&r1);
        let xv = g.constant(x.clone());
        let s = saliency_forward(&mut g, &b, &arch, xv).unwrap();
        assert_eq!(g.value(s).data()[1], g.value(s).data()[3]);
        assert_eq!(g.counters().saliency_rows, 4);

        zero(&mut p, "saliency.w3");
        zero(&mut p, "saliency.b3");
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let xv = g.constant(x);
        let s = saliency_forward(&mut g, &b, &arch, xv).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_is_unit_and_scale_invariant() {
        let arch = tiny();
        let p = ModelParams::<f64>::init(arch.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::<f64>::uniform(vec![8, 8], 1.0, &mut rng);
        let f2 = Tensor::new(vec![8, 8], f.data().iter().map(|x| 2.0 * x).collect()).unwrap();
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let fv = g.constant(f);
        let f2v = g.constant(f2);
        let z = projection_forward(&mut g, &b, &arch, fv).unwrap();
        let z2 = projection_forward(&mut g, &b, &arch, f2v).unwrap();
        for i in 0..2 {
            let n: f64 = g.value(z).row(i).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
        for (a, c) in g.value(z).data().iter().zip(g.value(z2).data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_closed_forms() {
        let arch = tiny();
        let mut p = ModelParams::<f64>::init(arch.clone(), 3).unwrap();
        zero(&mut p, "cls.w");
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let f = g.constant(Tensor::full(vec![4, 8], 0.7));
        let y = classifier_forward(&mut g, &b, &arch, f).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        p.store
            .get_mut("cls.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[3f64.ln(), 0.0]);
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let f = g.constant(Tensor::full(vec![4, 8], 0.7));
        let y = classifier_forward(&mut g, &b, &arch, f).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.75).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn recon_rejects_out_of_range() {
        let arch = tiny();
        let p = ModelParams::<f64>::init(arch.clone(), 3).unwrap();
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let f = g.constant(Tensor::zeros(vec![4, 8]));
        assert!(recon_forward(&mut g, &b, &arch, f, &[vec![4]]).is_err());
        let r = recon_forward(&mut g, &b, &arch, f, &[vec![0, 2]]).unwrap();
        assert_eq!(g.value(r).shape(), &[2, 4]);
    }

    #[test]
    fn encode_selects_budget_per_image() {
        let arch = Arch {
            grid_h: 4,
            grid_w: 4,
            ..tiny()
        };
        let p = ModelParams::<f64>::init(arch.clone(), 3).unwrap();
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let x = rand_patches(&mut g, &arch, 3, 1);
        let enc = encode(
            &mut g,
            &b,
            &arch,
            x,
            SelectionSource::Predict {
                rho: 0.3,
                fixed: None,
            },
            BiasMode::Saliency,
        )
        .unwrap();
        assert_eq!(enc.sets.len(), 3);
        assert!(enc.sets.iter().all(|s| s.len() == 4));
        assert_eq!(g.value(enc.features).shape(), &[48, 8]);
        assert_eq!(g.counters().attention(), 3 * 4 * 16 * 4 * 8);
    }

    #[test]
    fn frozen_saliency_gets_no_gradient() {
        let arch = tiny();
        let mut p = ModelParams::<f64>::init(arch.clone(), 3).unwrap();
        p.set_trainable(&[Group::Backbone]);
        let mut g = Graph::new();
        let b = p.store.bind(&mut g);
        let x = rand_patches(&mut g, &arch, 2, 2);
        let enc = encode(
            &mut g,
            &b,
            &arch,
            x,
            SelectionSource::Predict {
                rho: 0.5,
                fixed: None,
            },
            BiasMode::Saliency,
        )
        .unwrap();
        let y = classifier_forward(&mut g, &b, &arch, enc.features).unwrap();
        let loss = g.sum(y);
        let loss = g.scale(loss, 0.3);
        let grads = g.backward(loss).unwrap();
        p.store.absorb(&b, &grads).unwrap();
        for (name, t) in p.store.iter() {
            if Group::of(name) == Group::Saliency {
                assert!(t.grad.is_none(), "{name}");
            }
        }
    }
}
