//! The full finite-difference gradient suite: every graph primitive, every
//! model forward, every loss, and the complete pretraining objective on a
//! two-image batch. Everything runs in double precision.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{grad_check, Bound, CostTag, GradCheckConfig, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, info_nce, sparsity_loss, total_loss, ContrastBatch};
use crate::model::{
    backbone_forward, classifier_forward, embed_patches, encode, projection_forward, recon_forward, saliency_forward,
    Arch, AttentionPlan, Group, ModelParams, SaliencyInput, SelectionSource,
};
use crate::sparse_attn::{saliency_log_bias, BiasMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Diffcore,
    Model,
    Losses,
}

impl SuiteModule {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteModule::All => "all",
            SuiteModule::Diffcore => "diffcore",
            SuiteModule::Model => "model",
            SuiteModule::Losses => "losses",
        }
    }

    fn includes(self, m: SuiteModule) -> bool {
        self == SuiteModule::All || self == m
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SuiteModule::All),
            "diffcore" => Ok(SuiteModule::Diffcore),
            "model" => Ok(SuiteModule::Model),
            "losses" => Ok(SuiteModule::Losses),
            _ => Err(Error::config(format!(
                "unknown gradcheck module {s:?}; expected all, diffcore, model or losses"
            ))),
        }
    }
}

pub struct CaseOutcome {
    pub module: SuiteModule,
    pub name: &'static str,
    pub report: GradCheckReport,
}

#[derive(Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.report.passed())
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseOutcome> {
        self.cases.iter().filter(|c| !c.report.passed())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(f, "{:<9} {:<28} {}", c.module.as_str(), c.name, c.report)?;
        }
        write!(
            f,
            "{} cases, {} failed, max_rel_err={:.3e}",
            self.cases.len(),
            self.failures().count(),
            self.max_rel_err()
        )
    }
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParamStore<f64>,
    f: CaseFn,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn param(store: &mut ParamStore<f64>, name: &str, shape: &[usize], seed: u64) {
    let mut t = Tensor::uniform(shape.to_vec(), 1.0, &mut rng(seed));
    t.requires_grad = true;
    store.insert(name, t).expect("fresh name");
}

fn positive_param(store: &mut ParamStore<f64>, name: &str, shape: &[usize], seed: u64) {
    let t = Tensor::<f64>::uniform(shape.to_vec(), 1.0, &mut rng(seed));
    let mut t = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 1.5 + v).collect()).expect("same shape");
    t.requires_grad = true;
    store.insert(name, t).expect("fresh name");
}

/// `Σ y ⊙ W` for a fixed random `W`, so no output coordinate is weighted alike.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.value(y).shape().to_vec(), 1.0, &mut rng(seed ^ 0xabcdef));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn unary(name: &'static str, shape: &[usize], positive: bool, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Case {
    let mut p = ParamStore::new();
    if positive {
        positive_param(&mut p, "x", shape, 11);
    } else {
        param(&mut p, "x", shape, 11);
    }
    Case {
        name,
        params: p,
        f: Box::new(move |g, b| {
            let y = op(g, b.get("x")?)?;
            project(g, y, 1)
        }),
    }
}

fn binary(name: &'static str, sa: &[usize], sb: &[usize], op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Case {
    let mut p = ParamStore::new();
    param(&mut p, "a", sa, 21);
    param(&mut p, "b", sb, 22);
    Case {
        name,
        params: p,
        f: Box::new(move |g, b| {
            let y = op(g, b.get("a")?, b.get("b")?)?;
            project(g, y, 2)
        }),
    }
}

fn diffcore_cases() -> Vec<Case> {
    let mut cases = vec![
        binary("matmul", &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
        binary("matmul_ta", &[4, 3], &[4, 2], |g, a, b| g.matmul_ext(a, b, true, false, CostTag::Other)),
        binary("matmul_tb", &[3, 4], &[2, 4], |g, a, b| g.matmul_ext(a, b, false, true, CostTag::Other)),
        binary("matmul_ta_tb", &[4, 3], &[2, 4], |g, a, b| {
            g.matmul_ext(a, b, true, true, CostTag::Other)
        }),
        unary("transpose", &[3, 4], false, |g, x| Ok(g.transpose(x))),
        binary("add", &[3, 4], &[3, 4], |g, a, b| g.add(a, b)),
        binary("add_row_broadcast", &[3, 4], &[1, 4], |g, a, b| g.add(a, b)),
        binary("sub_row_broadcast", &[3, 4], &[1, 4], |g, a, b| g.sub(a, b)),
        binary("mul", &[3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
        unary("scale", &[2, 3], false, |g, x| Ok(g.scale(x, -1.7))),
        unary("add_scalar", &[2, 3], false, |g, x| Ok(g.add_scalar(x, 0.4))),
        unary("relu", &[4, 5], false, |g, x| Ok(g.relu(x))),
        unary("exp", &[2, 3], false, |g, x| g.exp(x)),
        unary("log", &[2, 3], true, |g, x| g.log(x)),
        unary("sigmoid", &[2, 3], false, |g, x| g.sigmoid(x)),
        unary("abs", &[4, 5], false, |g, x| Ok(g.abs(x))),
        unary("row_softmax", &[3, 5], false, |g, x| g.row_softmax(x)),
        unary("gather_rows", &[4, 3], false, |g, x| g.gather_rows(x, &[2, 0, 2, 3])),
        unary("gather_cols", &[3, 5], false, |g, x| g.gather_cols(x, &[4, 1, 3])),
        unary("pick", &[3, 4], false, |g, x| g.pick(x, &[1, 3, 0])),
        unary("sum", &[3, 4], false, |g, x| Ok(g.sum(x))),
        unary("mean", &[3, 4], false, |g, x| Ok(g.mean(x))),
        unary("mean_rows", &[3, 4], false, |g, x| g.mean_rows(x)),
        unary("segment_mean", &[6, 2], false, |g, x| g.segment_mean(x, 3)),
        binary("sq_diff", &[3, 4], &[3, 4], |g, a, b| g.sq_diff(a, b)),
        unary("l2_normalize_rows", &[3, 4], false, |g, x| g.l2_normalize_rows(x)),
        binary("concat_rows", &[2, 3], &[4, 3], |g, a, b| g.concat_rows(&[a, b, a])),
        unary("reshape", &[2, 6], false, |g, x| g.reshape(x, vec![3, 4])),
    ];
    let mut p = ParamStore::new();
    param(&mut p, "x", &[4, 6], 31);
    param(&mut p, "gamma", &[1, 6], 32);
    param(&mut p, "beta", &[1, 6], 33);
    for (name, relu, bias) in [("affine", false, true), ("affine_relu", true, true), ("affine_relu_nobias", true, false)] {
        let mut p = ParamStore::new();
        param(&mut p, "x", &[5, 4], 34);
        param(&mut p, "w", &[4, 3], 35);
        if bias {
            param(&mut p, "b", &[1, 3], 36);
        }
        cases.push(Case {
            name,
            params: p,
            f: Box::new(move |g, b| {
                let bias = if bias { Some(b.get("b")?) } else { None };
                let y = g.affine(b.get("x")?, b.get("w")?, bias, relu)?;
                project(g, y, 4)
            }),
        });
    }
    cases.push(Case {
        name: "layer_norm",
        params: p,
        f: Box::new(|g, b| {
            let y = g.layer_norm(b.get("x")?, b.get("gamma")?, b.get("beta")?, 1e-5)?;
            project(g, y, 3)
        }),
    });
    cases
}

/// A small architecture that still exercises every layer.
pub fn toy_arch() -> Arch {
    Arch {
        patch: 2,
        channels: 1,
        grid_h: 2,
        grid_w: 3,
        d: 4,
        n_blocks: 2,
        mlp_hidden: 6,
        saliency_hidden: [5, 3],
        saliency_input: SaliencyInput::Embedded,
        d_z: 3,
        n_classes: 3,
    }
}

fn toy_params(arch: &Arch, seed: u64) -> ParamStore<f64> {
    let mut p = ModelParams::<f64>::init(arch.clone(), seed).expect("toy arch is valid");
    let mut r = rng(seed ^ 0x77);
    // Move gains and biases off their constant initial values.
    for (name, t) in p.store.iter_mut() {
        let leaf = name.rsplit('.').next().unwrap_or_default();
        if leaf.starts_with('g') || leaf.starts_with('b') {
            let noise = Tensor::<f64>::uniform(t.shape().to_vec(), 0.3, &mut r);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
    }
    p.set_trainable(&[Group::Saliency, Group::Backbone]);
    p.store
}

fn toy_patches(g: &mut Graph<f64>, arch: &Arch, images: usize, seed: u64) -> Var {
    let t = Tensor::uniform(vec![images * arch.tokens(), arch.patch_dim()], 1.0, &mut rng(seed));
    g.constant(t)
}

fn model_case(name: &'static str, f: impl Fn(&mut Graph<f64>, &Bound, &Arch) -> Result<Var> + 'static) -> Case {
    let arch = toy_arch();
    Case {
        name,
        params: toy_params(&arch, 41),
        f: Box::new(move |g, b| {
            let y = f(g, b, &arch)?;
            project(g, y, 4)
        }),
    }
}

const TOY_SETS: [[usize; 3]; 2] = [[0, 2, 5], [1, 3, 4]];

fn toy_sets() -> Vec<Vec<usize>> {
    TOY_SETS.iter().map(|s| s.to_vec()).collect()
}

fn model_cases() -> Vec<Case> {
    vec![
        model_case("embed_patches", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            embed_patches(g, b, a, x)
        }),
        model_case("saliency_forward", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let e = embed_patches(g, b, a, x)?;
            saliency_forward(g, b, a, e)
        }),
        model_case("backbone_dense", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let e = embed_patches(g, b, a, x)?;
            backbone_forward(g, b, a, e, &AttentionPlan::Dense)
        }),
        model_case("backbone_sparse_biased", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let e = embed_patches(g, b, a, x)?;
            let s = saliency_forward(g, b, a, e)?;
            let s = g.reshape(s, vec![2, a.tokens()])?;
            let sh = g.row_softmax(s)?;
            let sets = toy_sets();
            let mut bias = Vec::new();
            for (i, set) in sets.iter().enumerate() {
                let row = g.gather_rows(sh, &[i])?;
                bias.push(saliency_log_bias(g, row, set)?);
            }
            let plan = AttentionPlan::Sparse {
                sets: &sets,
                log_bias: Some(&bias),
            };
            backbone_forward(g, b, a, e, &plan)
        }),
        model_case("projection_forward", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let e = embed_patches(g, b, a, x)?;
            projection_forward(g, b, a, e)
        }),
        model_case("classifier_forward", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let e = embed_patches(g, b, a, x)?;
            classifier_forward(g, b, a, e)
        }),
        model_case("recon_forward", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let e = embed_patches(g, b, a, x)?;
            recon_forward(g, b, a, e, &toy_sets())
        }),
        model_case("encode_predicted_sets", |g, b, a| {
            let x = toy_patches(g, a, 2, 5);
            let enc = encode(g, b, a, x, SelectionSource::Predict { rho: 0.5, fixed: None }, BiasMode::Saliency)?;
            Ok(enc.features)
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    let mut cases = Vec::new();

    let mut p = ParamStore::new();
    param(&mut p, "a", &[3, 4], 51);
    param(&mut p, "b", &[3, 4], 52);
    cases.push(Case {
        name: "info_nce",
        params: p,
        f: Box::new(|g, b| {
            let za = g.l2_normalize_rows(b.get("a")?)?;
            let zb = g.l2_normalize_rows(b.get("b")?)?;
            let batch = ContrastBatch::new(g, za, zb, 0.2)?;
            info_nce(g, &batch)
        }),
    });

    let mut p = ParamStore::new();
    param(&mut p, "s", &[2, 6], 53);
    param(&mut p, "recon", &[6, 4], 54);
    let patches = Tensor::<f64>::uniform(vec![12, 4], 1.0, &mut rng(55));
    cases.push(Case {
        name: "sparsity_loss",
        params: p,
        f: Box::new(move |g, b| {
            let sh = g.row_softmax(b.get("s")?)?;
            let x = g.constant(patches.clone());
            let t = sparsity_loss(g, sh, 1.0 / 6.0, 0.5, x, b.get("recon")?, &toy_sets(), 0.05)?;
            Ok(t.total)
        }),
    });

    let mut p = ParamStore::new();
    param(&mut p, "logits", &[4, 3], 56);
    cases.push(Case {
        name: "cross_entropy",
        params: p,
        f: Box::new(|g, b| {
            let probs = g.row_softmax(b.get("logits")?)?;
            cross_entropy(g, probs, &[2, 0, 1, 1])
        }),
    });

    let mut p = ParamStore::new();
    param(&mut p, "lc", &[1, 1], 57);
    param(&mut p, "ls", &[1, 1], 58);
    cases.push(Case {
        name: "total_loss",
        params: p,
        f: Box::new(|g, b| {
            let lc = g.exp(b.get("lc")?)?;
            let ls = g.exp(b.get("ls")?)?;
            total_loss(g, lc, ls, 0.5)
        }),
    });

    cases.push(end_to_end_case());
    cases
}

/// Contrastive plus weighted sparsity objective on two images, two views
/// each, through the full sparse encoder with learned selection.
fn end_to_end_case() -> Case {
    let arch = toy_arch();
    Case {
        name: "total_objective_2_images",
        params: toy_params(&arch, 61),
        f: Box::new(move |g, b| {
            let x = toy_patches(g, &arch, 4, 62);
            let source = SelectionSource::Predict { rho: 0.5, fixed: None };
            let enc = encode(g, b, &arch, x, source, BiasMode::Saliency)?;
            let z = projection_forward(g, b, &arch, enc.features)?;
            let za = g.gather_rows(z, &[0, 1])?;
            let zb = g.gather_rows(z, &[2, 3])?;
            let batch = ContrastBatch::new(g, za, zb, 0.1)?;
            let lc = info_nce(g, &batch)?;
            let s_hat = enc.s_hat.expect("sparse encode predicts saliency");
            let rec = recon_forward(g, b, &arch, enc.features, &enc.sets)?;
            let theta = 1.0 / arch.tokens() as f64;
            let ls = sparsity_loss(g, s_hat, theta, 0.5, x, rec, &enc.sets, 0.05)?;
            total_loss(g, lc, ls.total, 0.5)
        }),
    }
}

/// Runs the selected part of the suite at the given tolerance settings.
pub fn run_gradcheck_suite(module: SuiteModule, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut groups: Vec<(SuiteModule, Vec<Case>)> = Vec::new();
    if module.includes(SuiteModule::Diffcore) {
        groups.push((SuiteModule::Diffcore, diffcore_cases()));
    }
    if module.includes(SuiteModule::Model) {
        groups.push((SuiteModule::Model, model_cases()));
    }
    if module.includes(SuiteModule::Losses) {
        groups.push((SuiteModule::Losses, loss_cases()));
    }
    let mut report = SuiteReport::default();
    for (m, cases) in groups {
        for case in cases {
            let r = grad_check(|g, b| (case.f)(g, b), &case.params, cfg)?;
            report.cases.push(CaseOutcome {
                module: m,
                name: case.name,
                report: r,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes() {
        let r = run_gradcheck_suite(SuiteModule::All, &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.cases.iter().any(|c| c.name == "total_objective_2_images"));
        for c in &r.cases {
            let skipped: usize = c.report.params.iter().map(|p| p.skipped).sum();
            assert!(c.report.checked() > skipped, "{} skipped {skipped}", c.name);
        }
    }

    #[test]
    fn module_filter() {
        let r = run_gradcheck_suite(SuiteModule::Losses, &GradCheckConfig::default()).unwrap();
        assert!(r.cases.iter().all(|c| c.module == SuiteModule::Losses));
        assert_eq!("model".parse::<SuiteModule>().unwrap(), SuiteModule::Model);
        assert!("nope".parse::<SuiteModule>().is_err());
    }

    #[test]
    fn a_wrong_gradient_fails() {
        // exp's derivative used where the loss is actually 2·exp: caught as a mismatch.
        let mut p = ParamStore::new();
        param(&mut p, "x", &[2, 2], 1);
        let r = grad_check(
            |g, b| {
                let x = b.get("x")?;
                let e = g.exp(x)?;
                let s = g.sum(e);
                let frozen = Tensor::from_f64(vec![1], &[g.value(s).data()[0]])?;
                let c = g.constant(frozen);
                g.add(s, c)
            },
            &p,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
