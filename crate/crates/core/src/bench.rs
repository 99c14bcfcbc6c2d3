//! Closed-form attention costs, a check of the graph's operation counters
//! against them, and a single-threaded wall-clock harness.
//!
//! Costs follow the counter convention: a product of an `m×k` and a `k×n`
//! matrix costs `2·m·k·n` multiply-adds. Softmax exponentials and top-K
//! comparisons are reported separately.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::AttentionMode;
use crate::diffcore::{Graph, OpCounters, Tensor};
use crate::error::{Error, Result};
use crate::model::{encode, Arch, ModelParams, SelectionSource};
use crate::sparse_attn::{budget, dense_attention, sparse_attention, BiasMode};

/// Per-image forward costs of the attention path, summed over blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub l: usize,
    /// Keys per query: `L` in dense mode.
    pub k: usize,
    pub d: usize,
    pub n_blocks: usize,
    /// `QKᵀ` multiply-adds.
    pub scores: u64,
    /// `AV` multiply-adds.
    pub weighted_sum: u64,
    pub softmax_exps: u64,
    /// Zero in dense mode.
    pub saliency_mlp: u64,
    /// `⌈L·log₂L⌉` comparisons in sparse mode.
    pub selection_cmps: u64,
}

impl CostModel {
    /// Attention cost for `n_blocks` blocks of one image with `k` keys per
    /// query. Saliency and selection terms are left at zero.
    pub fn attention_only(l: usize, k: usize, d: usize, n_blocks: usize) -> Self {
        let per = 2 * (l as u64) * (k as u64) * (d as u64) * n_blocks as u64;
        Self {
            l,
            k,
            d,
            n_blocks,
            scores: per,
            weighted_sum: per,
            softmax_exps: (l * k * n_blocks) as u64,
            saliency_mlp: 0,
            selection_cmps: 0,
        }
    }

    pub fn attention(&self) -> u64 {
        self.scores + self.weighted_sum
    }

    pub fn total_madds(&self) -> u64 {
        self.attention() + self.saliency_mlp
    }

    /// Whether `self.attention() / dense.attention()` is exactly `K/L`.
    pub fn ratio_is_exact(&self, dense: &CostModel) -> bool {
        self.attention() as u128 * dense.k as u128 == dense.attention() as u128 * self.k as u128
            && dense.k == self.l
    }

    /// Live floats of one attention call (`Q`, `K`, `V`, output and the
    /// stored weights) in bytes of `elem` width. Index sets are not counted.
    pub fn activation_bytes(&self, elem: usize) -> u64 {
        let floats = 4 * self.l * self.d + self.l * self.k;
        (floats * elem) as u64
    }
}

/// Forward costs of one image under `arch` in the given mode.
pub fn flop_count(arch: &Arch, rho: f64, mode: AttentionMode) -> Result<CostModel> {
    arch.validate()?;
    let l = arch.tokens();
    match mode {
        AttentionMode::Dense => Ok(CostModel::attention_only(l, l, arch.d, arch.n_blocks)),
        AttentionMode::Sparse => {
            let k = budget(l, rho)?;
            let [h1, h2] = arch.saliency_hidden;
            let per_row = 2 * (arch.saliency_in() * h1 + h1 * h2 + h2) as u64;
            let lf = l as f64;
            Ok(CostModel {
                saliency_mlp: per_row * l as u64,
                selection_cmps: (lf * lf.log2()).ceil() as u64,
                ..CostModel::attention_only(l, k, arch.d, arch.n_blocks)
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountMismatch {
    pub op: &'static str,
    pub expected: u64,
    pub measured: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CountReport {
    pub mismatches: Vec<CountMismatch>,
}

impl CountReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares counters from a forward over `images` images against `model`.
pub fn count_check(counters: &OpCounters, model: &CostModel, images: usize) -> Result<CountReport> {
    let scale = |v: u64| v.checked_mul(images as u64).ok_or(Error::CounterOverflow("count_check"));
    let rows = if model.saliency_mlp > 0 { model.l as u64 } else { 0 };
    let checks = [
        ("attention_scores", scale(model.scores)?, counters.attention_scores),
        ("attention_values", scale(model.weighted_sum)?, counters.attention_values),
        ("saliency_rows", scale(rows)?, counters.saliency_rows),
    ];
    Ok(CountReport {
        mismatches: checks
            .into_iter()
            .filter(|(_, e, m)| e != m)
            .map(|(op, expected, measured)| CountMismatch { op, expected, measured })
            .collect(),
    })
}

/// Counters from one un-augmented encoder forward over `images` random
/// images with freshly initialized weights.
pub fn instrumented_forward(arch: &Arch, rho: f64, mode: AttentionMode, images: usize, seed: u64) -> Result<OpCounters> {
    let params = ModelParams::<f32>::init(arch.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::<f32>::uniform(vec![images * arch.tokens(), arch.patch_dim()], 1.0, &mut rng);
    let mut g = Graph::new();
    let b = params.store.bind_constant(&mut g);
    let x = g.constant(x);
    let source = match mode {
        AttentionMode::Dense => SelectionSource::Dense,
        AttentionMode::Sparse => SelectionSource::Predict { rho, fixed: None },
    };
    encode(&mut g, &b, arch, x, source, BiasMode::Saliency)?;
    Ok(*g.counters())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub trials: usize,
}

impl Timing {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        ms.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (ms.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            ms[lo] + (ms[hi] - ms[lo]) * (pos - lo as f64)
        };
        Self {
            median_ms: q(0.5),
            iqr_ms: q(0.75) - q(0.25),
            trials: ms.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionTiming {
    pub l: usize,
    pub k: usize,
    pub d: usize,
    pub dense: Timing,
    pub sparse: Timing,
}

impl AttentionTiming {
    pub fn ratio(&self) -> f64 {
        self.sparse.median_ms / self.dense.median_ms
    }
}

pub const MIN_TRIALS: usize = 10;
const WARMUP: usize = 3;

/// Median and IQR of per-call time of the dense and key-restricted kernels
/// on identical single-precision inputs. Calls alternate between the two
/// paths and run on the calling thread.
pub fn time_attention(l: usize, k: usize, d: usize, trials: usize, seed: u64) -> Result<AttentionTiming> {
    if trials < MIN_TRIALS {
        return Err(Error::config(format!("timing needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if k == 0 || k > l || d == 0 {
        return Err(Error::config(format!("invalid timing shape L={l} K={k} d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Tensor::<f32>::uniform(vec![l, d], 1.0, &mut rng);
    let kt = Tensor::<f32>::uniform(vec![l, d], 1.0, &mut rng);
    let v = Tensor::<f32>::uniform(vec![l, d], 1.0, &mut rng);
    let mut set = rand::seq::index::sample(&mut rng, l, k).into_vec();
    set.sort_unstable();
    let set = &set[..];

    let dense = || dense_attention(&q, &kt, &v).map(|r| r.0);
    let sparse = || sparse_attention(&q, &kt, &v, set, &[], BiasMode::None).map(|r| r.0);
    for _ in 0..WARMUP {
        std::hint::black_box(dense()?);
        std::hint::black_box(sparse()?);
    }
    let mut td = Vec::with_capacity(trials);
    let mut ts = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        std::hint::black_box(dense()?);
        td.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        std::hint::black_box(sparse()?);
        ts.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(AttentionTiming {
        l,
        k: set.len(),
        d,
        dense: Timing::from_samples(td),
        sparse: Timing::from_samples(ts),
    })
}

/// One configuration of a [`BenchReport`]; costs are per attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub k: usize,
    pub d: usize,
    pub flops_dense: u64,
    pub flops_sparse: u64,
    pub ratio: f64,
    pub timing: Option<AttentionTiming>,
    pub peak_bytes_dense: u64,
    pub peak_bytes_sparse: u64,
}

impl BenchRow {
    pub fn new(l: usize, k: usize, d: usize, timing: Option<AttentionTiming>) -> Self {
        let dense = CostModel::attention_only(l, l, d, 1);
        let sparse = CostModel::attention_only(l, k, d, 1);
        Self {
            l,
            k,
            d,
            flops_dense: dense.attention(),
            flops_sparse: sparse.attention(),
            ratio: sparse.attention() as f64 / dense.attention() as f64,
            timing,
            peak_bytes_dense: dense.activation_bytes(4),
            peak_bytes_sparse: sparse.activation_bytes(4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

const COLUMNS: [&str; 12] = [
    "L",
    "K",
    "d",
    "flops_dense",
    "flops_sparse",
    "ratio",
    "wall_ms_dense",
    "wall_ms_sparse",
    "iqr_ms_dense",
    "iqr_ms_sparse",
    "peak_bytes_dense",
    "peak_bytes_sparse",
];

impl BenchReport {
    /// Rows for every `(L, K, d)`; timing is skipped when `trials` is `None`.
    pub fn run(configs: &[(usize, usize, usize)], trials: Option<usize>, seed: u64) -> Result<Self> {
        let rows = configs
            .iter()
            .map(|&(l, k, d)| {
                let timing = trials.map(|t| time_attention(l, k, d, t, seed)).transpose()?;
                Ok(BenchRow::new(l, k, d, timing))
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    fn cells(&self) -> Vec<[String; 12]> {
        let ms = |t: Option<f64>| t.map_or_else(String::new, |v| format!("{v:.4}"));
        self.rows
            .iter()
            .map(|r| {
                let t = r.timing;
                [
                    r.l.to_string(),
                    r.k.to_string(),
                    r.d.to_string(),
                    r.flops_dense.to_string(),
                    r.flops_sparse.to_string(),
                    format!("{:.6}", r.ratio),
                    ms(t.map(|t| t.dense.median_ms)),
                    ms(t.map(|t| t.sparse.median_ms)),
                    ms(t.map(|t| t.dense.iqr_ms)),
                    ms(t.map(|t| t.sparse.iqr_ms)),
                    r.peak_bytes_dense.to_string(),
                    r.peak_bytes_sparse.to_string(),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Right-aligned plain-text table.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &mut dyn Iterator<Item = &str>| {
            let parts: Vec<String> = row.zip(&widths).map(|(s, &w)| format!("{s:>w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &mut COLUMNS.iter().copied());
        for r in &cells {
            line(&mut out, &mut r.iter().map(String::as_str));
        }
        out
    }
}

/// Parses a sweep such as `L=16,64,256;rho=0.1,0.3;d=64` into `(L, K, d)`
/// triples, the cartesian product in the order given. Key counts come from
/// either `K` or `rho`; `d` falls back to `default_d`.
pub fn parse_sweep(text: &str, default_d: usize) -> Result<Vec<(usize, usize, usize)>> {
    let bad = |msg: String| Error::config(format!("sweep: {msg}"));
    let mut ls = None;
    let mut ks: Option<Vec<usize>> = None;
    let mut rhos: Option<Vec<f64>> = None;
    let mut ds = None;
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=values, got {part:?}")))?;
        let list: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if list.is_empty() {
            return Err(bad(format!("no values for {key}")));
        }
        let ints = || {
            list.iter()
                .map(|v| match v.parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(bad(format!("{key} needs positive integers, got {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()
        };
        match key.trim() {
            "L" => ls = Some(ints()?),
            "K" => ks = Some(ints()?),
            "d" => ds = Some(ints()?),
            "rho" => {
                rhos = Some(
                    list.iter()
                        .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad rho {v:?}"))))
                        .collect::<Result<_>>()?,
                )
            }
            other => return Err(bad(format!("unknown key {other:?} (expected L, K, rho or d)"))),
        }
    }
    let ls = ls.ok_or_else(|| bad("missing L".into()))?;
    if ks.is_some() == rhos.is_some() {
        return Err(bad("give exactly one of K or rho".into()));
    }
    let ds = ds.unwrap_or_else(|| vec![default_d]);
    let mut out = Vec::new();
    for &l in &ls {
        let keys = match (&ks, &rhos) {
            (Some(ks), _) => ks.clone(),
            (_, Some(rs)) => rs.iter().map(|&r| budget(l, r)).collect::<Result<_>>()?,
            _ => unreachable!(),
        };
        for &k in &keys {
            if k > l {
                return Err(bad(format!("K={k} exceeds L={l}")));
            }
            for &d in &ds {
                out.push((l, k, d));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arch(side: usize) -> Arch {
        Arch {
            grid_h: side,
            grid_w: side,
            d: 8,
            n_blocks: 1,
            mlp_hidden: 8,
            saliency_hidden: [8, 4],
            d_z: 4,
            ..Arch::default()
        }
    }

    #[test]
    fn small_example() {
        let a = arch(2);
        let dense = flop_count(&a, 0.5, AttentionMode::Dense).unwrap();
        let sparse = flop_count(&a, 0.5, AttentionMode::Sparse).unwrap();
        assert_eq!((dense.attention(), sparse.attention()), (512, 256));
        assert!(sparse.ratio_is_exact(&dense));
        assert_eq!(sparse.selection_cmps, 8);
        assert_eq!(sparse.saliency_mlp, 4 * 2 * (8 * 8 + 8 * 4 + 4));
        assert_eq!(dense.saliency_mlp, 0);
        let full = flop_count(&a, 1.0, AttentionMode::Sparse).unwrap();
        assert_eq!(full.attention(), dense.attention());
    }

    #[test]
    fn large_grid_ratio() {
        let a = Arch {
            grid_h: 14,
            grid_w: 14,
            ..Arch::default()
        };
        let dense = flop_count(&a, 0.3, AttentionMode::Dense).unwrap();
        let sparse = flop_count(&a, 0.3, AttentionMode::Sparse).unwrap();
        assert_eq!(sparse.k, 58);
        let r = sparse.attention() as f64 / dense.attention() as f64;
        assert!((r - 0.2959).abs() < 1e-4, "{r}");
    }

    #[test]
    fn counters_match_the_model() {
        let a = Arch::default();
        for (mode, k) in [(AttentionMode::Dense, 64), (AttentionMode::Sparse, 19)] {
            let model = flop_count(&a, 0.3, mode).unwrap();
            assert_eq!(model.k, k);
            let c = instrumented_forward(&a, 0.3, mode, 2, 1).unwrap();
            let report = count_check(&c, &model, 2).unwrap();
            assert!(report.is_exact(), "{report:?}");
        }
    }

    #[test]
    fn off_by_one_model_is_reported() {
        let a = Arch::default();
        let c = instrumented_forward(&a, 0.3, AttentionMode::Sparse, 1, 1).unwrap();
        let mut model = flop_count(&a, 0.3, AttentionMode::Sparse).unwrap();
        model = CostModel {
            saliency_mlp: model.saliency_mlp,
            ..CostModel::attention_only(model.l, model.k + 1, model.d, model.n_blocks)
        };
        let report = count_check(&c, &model, 1).unwrap();
        let ops: Vec<_> = report.mismatches.iter().map(|m| m.op).collect();
        assert_eq!(ops, ["attention_scores", "attention_values"]);
    }

    #[test]
    fn overflow_is_an_error() {
        let model = CostModel::attention_only(1 << 20, 1 << 20, 1 << 16, 1);
        assert!(matches!(
            count_check(&OpCounters::default(), &model, 1 << 20),
            Err(Error::CounterOverflow(_))
        ));
    }

    #[test]
    fn timing_statistics() {
        let t = Timing::from_samples(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((t.median_ms, t.iqr_ms, t.trials), (3.0, 2.0, 5));
        assert!(time_attention(16, 4, 8, 9, 0).is_err());
        assert!(time_attention(16, 17, 8, 10, 0).is_err());
        let t = time_attention(16, 4, 8, 10, 0).unwrap();
        assert_eq!((t.k, t.dense.trials), (4, 10));
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(
            parse_sweep("L=16,64;rho=0.5", 8).unwrap(),
            vec![(16, 8, 8), (64, 32, 8)]
        );
        assert_eq!(parse_sweep("L=10; K=3,10; d=4,2", 8).unwrap(), vec![(10, 3, 4), (10, 3, 2), (10, 10, 4), (10, 10, 2)]);
        for bad in ["K=3", "L=8", "L=8;K=2;rho=0.5", "L=8;K=9", "L=8;K=0", "L=8;x=1", "L=8;rho=2"] {
            assert!(parse_sweep(bad, 8).is_err(), "{bad}");
        }
    }

    #[test]
    fn report_formats() {
        let r = BenchReport::run(&[(4, 2, 8), (16, 16, 4)], None, 0).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), 12);
        assert!(lines[1].starts_with("4,2,8,512,256,0.500000,"));
        let table = r.to_table();
        let widths: Vec<usize> = table.lines().map(|l| l.find("flops_dense").unwrap_or(0)).collect();
        assert!(widths[0] > 0);
        assert_eq!(table.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn ratio_and_memory_invariants(l in 1usize..300, kf in 0.0f64..1.0, d in 1usize..128) {
            let k = ((kf * l as f64) as usize).clamp(1, l);
            let row = BenchRow::new(l, k, d, None);
            prop_assert_eq!(row.flops_sparse as u128 * l as u128, row.flops_dense as u128 * k as u128);
            prop_assert!((row.ratio - k as f64 / l as f64).abs() < 1e-12);
            prop_assert!(row.peak_bytes_sparse <= row.peak_bytes_dense);
        }
    }
}
