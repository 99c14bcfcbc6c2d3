//! End-to-end acceptance checks, one line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,4,9` runs a subset. Criteria 1-4, 9 and 10 are exact
//! properties and fail the process; the empirical ones (5-8) are reported
//! and only fail it when `ACCEPTANCE_STRICT=1`.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsecontrast::bench::{count_check, flop_count, instrumented_forward, time_attention};
use sparsecontrast::config::{AttentionMode, RunConfig};
use sparsecontrast::diffcore::{GradCheckConfig, Tensor};
use sparsecontrast::error::{Error, FormatError};
use sparsecontrast::formats::{AttnCache, Checkpoint};
use sparsecontrast::gradsuite::{run_gradcheck_suite, SuiteModule};
use sparsecontrast::model::{Arch, ModelParams};
use sparsecontrast::sparse_attn::{budget, dense_attention, normalize_scores, sparse_attention, BiasMode};
use sparsecontrast::synthdata::{decode_dataset, encode_dataset, generate, Dataset, SynthSpec};
use sparsecontrast::training::{
    batch_ids, evaluate, localization_recall, pretrain_gradients, snapshot_cache, FineTuner, Pretrainer,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Res<Verdict> {
    Ok(Verdict {
        passed,
        detail: detail.into(),
    })
}

/// Pretrained sparse models keyed by seed, shared between criteria 6 and 7.
#[derive(Default)]
struct Shared {
    pretrained: HashMap<u64, ModelParams<f32>>,
}

const SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_STEPS: usize = 500;

fn train_set(seed: u64) -> Res<Dataset> {
    Ok(generate(&SynthSpec {
        n_images: 512,
        seed: 100 + seed,
        ..SynthSpec::default()
    })?)
}

/// 256 fresh images, half of them anomalous.
fn held_out_set(seed: u64) -> Res<Dataset> {
    Ok(generate(&SynthSpec {
        n_images: 256,
        seed: 1000 + seed,
        ..SynthSpec::default()
    })?)
}

fn pretrain(cfg: &RunConfig, ds: &Dataset) -> Res<ModelParams<f32>> {
    let mut t = Pretrainer::<f32>::new(cfg.clone(), ds)?;
    t.run(ds, cfg.steps, |_| {})?;
    Ok(t.params)
}

struct Downstream {
    accuracy: f64,
    auc: f64,
    attention_madds: u64,
}

/// Fine-tunes on the first `label_count` images of `ds` and scores every
/// image of `held`. Sparse runs freeze sets and scores in caches first.
fn downstream(cfg: &RunConfig, params: ModelParams<f32>, ds: &Dataset, held: &Dataset) -> Res<Downstream> {
    let sparse = cfg.attention == AttentionMode::Sparse;
    let (cache, held_cache) = if sparse {
        (Some(snapshot_cache(ds, &params, cfg)?), Some(snapshot_cache(held, &params, cfg)?))
    } else {
        (None, None)
    };
    let mut ft = FineTuner::new(cfg.clone(), params, ds)?;
    let ms = ft.run(ds, cache.as_ref(), cfg.finetune_steps, |_| {})?;
    let ids: Vec<usize> = (0..held.len()).collect();
    let e = evaluate(held, &ids, &ft.params, cfg, held_cache.as_ref())?;
    Ok(Downstream {
        accuracy: e.accuracy,
        auc: e.auc,
        attention_madds: ms.iter().map(|m| m.attention_madds).sum::<u64>() + e.attention_madds,
    })
}

fn c1_gradcheck(_: &mut Shared) -> Res<Verdict> {
    let t = Instant::now();
    let r = run_gradcheck_suite(SuiteModule::All, &GradCheckConfig::default())?;
    let secs = t.elapsed().as_secs_f64();
    let modules_covered = [SuiteModule::Diffcore, SuiteModule::Model, SuiteModule::Losses]
        .iter()
        .all(|m| r.cases.iter().any(|c| c.module == *m));
    let end_to_end = r.cases.iter().any(|c| c.name == "total_objective_2_images");
    let failed: Vec<&str> = r.failures().map(|c| c.name).collect();
    verdict(
        r.passed() && r.max_rel_err() < 1e-4 && secs < 120.0 && modules_covered && end_to_end,
        format!(
            "{} cases, max rel err {:.2e}, {:.1}s, failed {:?}",
            r.cases.len(),
            r.max_rel_err(),
            secs,
            failed
        ),
    )
}

fn c2_equivalence(_: &mut Shared) -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.random_range(1..=48);
        let d = rng.random_range(1..=16);
        let q = Tensor::<f64>::uniform(vec![l, d], 2.0, &mut rng);
        let k = Tensor::<f64>::uniform(vec![l, d], 2.0, &mut rng);
        let v = Tensor::<f64>::uniform(vec![l, d], 2.0, &mut rng);
        let (_, set) = sparsecontrast::sparse_attn::select_topk(&vec![1.0 / l as f64; l], 1.0)?;
        let (fs, map) = sparse_attention(&q, &k, &v, &set, &[], BiasMode::None)?;
        let (fd, ad) = dense_attention(&q, &k, &v)?;
        let full = map.materialize();
        for (a, b) in fs.data().iter().zip(fd.data()).chain(full.data().iter().zip(ad.data())) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-12, format!("100 instances, max |sparse - dense| {worst:.2e}"))
}

fn c3_invariants(_: &mut Shared) -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_row = 0.0f64;
    let mut leaks = 0usize;
    let mut negative = 0usize;
    for n in 0..1000 {
        let l = rng.random_range(1..=64);
        let kk = rng.random_range(1..=l);
        let d = rng.random_range(1..=16);
        let q = Tensor::<f64>::uniform(vec![l, d], 3.0, &mut rng);
        let k = Tensor::<f64>::uniform(vec![l, d], 3.0, &mut rng);
        let v = Tensor::<f64>::uniform(vec![l, d], 3.0, &mut rng);
        let mut set = rand::seq::index::sample(&mut rng, l, kk).into_vec();
        set.sort_unstable();
        let raw: Vec<f64> = (0..l).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s_hat = normalize_scores(&raw)?;
        let bias = if n % 2 == 0 { BiasMode::None } else { BiasMode::Saliency };
        let (_, map) = sparse_attention(&q, &k, &v, &set, &s_hat, bias)?;
        let a = map.materialize();
        for i in 0..l {
            let row = a.row(i);
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            negative += row.iter().filter(|&&x| x < 0.0).count();
            leaks += row
                .iter()
                .enumerate()
                .filter(|&(j, &x)| set.binary_search(&j).is_err() && x != 0.0)
                .count();
        }
    }
    verdict(
        worst_row <= 1e-6 && leaks == 0 && negative == 0,
        format!("1000 instances, max |row sum - 1| {worst_row:.2e}, {leaks} nonzero entries outside S"),
    )
}

fn c4_complexity(_: &mut Shared) -> Res<Verdict> {
    let mut bad = Vec::new();
    let mut checked = 0;
    for side in [4usize, 8, 16] {
        let arch = Arch {
            grid_h: side,
            grid_w: side,
            ..Arch::default()
        };
        let l = arch.tokens();
        let dense = instrumented_forward(&arch, 1.0, AttentionMode::Dense, 1, 4)?;
        let dense_model = flop_count(&arch, 1.0, AttentionMode::Dense)?;
        if !count_check(&dense, &dense_model, 1)?.is_exact() {
            bad.push(format!("dense L={l} counter != model"));
        }
        for rho in [0.1, 0.3, 0.5, 1.0] {
            let k = budget(l, rho)?;
            let sparse = instrumented_forward(&arch, rho, AttentionMode::Sparse, 1, 4)?;
            let model = flop_count(&arch, rho, AttentionMode::Sparse)?;
            if !count_check(&sparse, &model, 1)?.is_exact() {
                bad.push(format!("sparse L={l} rho={rho} counter != model"));
            }
            // ratio K/L exactly, in integers
            if sparse.attention() as u128 * l as u128 != dense.attention() as u128 * k as u128 {
                bad.push(format!(
                    "L={l} rho={rho}: {}/{} != {k}/{l}",
                    sparse.attention(),
                    dense.attention()
                ));
            }
            checked += 1;
        }
    }
    verdict(bad.is_empty(), format!("{checked} (L, rho) pairs exact; mismatches {bad:?}"))
}

fn c5_efficiency(_: &mut Shared) -> Res<Verdict> {
    const L: usize = 1024;
    const D: usize = 64;
    const TRIALS: usize = 30;
    let main = time_attention(L, L * 3 / 10, D, TRIALS, 5)?;
    let r = |k| time_attention(L, k, D, TRIALS, 5).map(|t| t.ratio());
    let (full, half, quarter) = (r(L)?, r(L / 2)?, r(L / 4)?);
    let monotone = half <= full * 1.05 && quarter <= half * 1.05;
    verdict(
        main.ratio() <= 0.7 && (0.9..=1.3).contains(&full) && monotone,
        format!(
            "K={} ratio {:.3} (dense {:.2}ms, sparse {:.2}ms); K=L {:.3}, L/2 {:.3}, L/4 {:.3}",
            main.k,
            main.ratio(),
            main.dense.median_ms,
            main.sparse.median_ms,
            full,
            half,
            quarter
        ),
    )
}

fn c6_localization(shared: &mut Shared) -> Res<Verdict> {
    let mut recalls = Vec::new();
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let ds = train_set(seed)?;
        let held = held_out_set(seed)?;
        let ids: Vec<usize> = (0..held.len()).filter(|&i| held.samples[i].label == 1).take(128).collect();
        let t = Instant::now();
        let params = pretrain(&cfg, &ds)?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        recalls.push(localization_recall(&held, &ids, &params, cfg.rho)?);
        shared.pretrained.insert(seed, params);
    }
    let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
    verdict(
        mean >= 0.9,
        format!(
            "recall per seed {:?}, mean {mean:.3}; slowest run {slowest:.0}s (target < 600s: {})",
            recalls.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            if slowest < 600.0 { "met" } else { "missed" }
        ),
    )
}

fn c7_downstream(shared: &mut Shared) -> Res<Verdict> {
    let ds = train_set(0)?;
    let held = held_out_set(0)?;
    let cfg = RunConfig::default();
    let params = match shared.pretrained.remove(&0) {
        Some(p) => p,
        None => pretrain(&cfg, &ds)?,
    };
    let sparse = downstream(&cfg, params, &ds, &held)?;
    let dense_cfg = RunConfig {
        attention: AttentionMode::Dense,
        ..cfg
    };
    let dense_params = pretrain(&dense_cfg, &ds)?;
    let dense = downstream(&dense_cfg, dense_params, &ds, &held)?;
    let cost = dense.attention_madds as f64 / sparse.attention_madds as f64;
    verdict(
        sparse.accuracy >= 0.95
            && sparse.auc >= 0.97
            && (dense.accuracy - sparse.accuracy).abs() <= 0.03
            && cost >= 2.0,
        format!(
            "sparse acc {:.3} auc {:.3}; dense acc {:.3} auc {:.3}; dense/sparse attention madds {cost:.2}x",
            sparse.accuracy, sparse.auc, dense.accuracy, dense.auc
        ),
    )
}

fn c8_sweep(_: &mut Shared) -> Res<Verdict> {
    let ds = train_set(0)?;
    let held = held_out_set(0)?;
    let pos: Vec<usize> = (0..held.len()).filter(|&i| held.samples[i].label == 1).collect();
    println!("    rho    K   accuracy  auc     recall  attention_madds");
    let mut acc = HashMap::new();
    for (i, rho) in [0.1, 0.3, 0.5, 1.0].into_iter().enumerate() {
        let cfg = RunConfig {
            rho,
            steps: SWEEP_STEPS,
            ..RunConfig::default()
        };
        let params = pretrain(&cfg, &ds)?;
        let recall = localization_recall(&held, &pos, &params, rho)?;
        let r = downstream(&cfg, params, &ds, &held)?;
        println!(
            "    {rho:<5}  {:<3} {:<9.3} {:<7.3} {recall:<7.3} {}",
            cfg.k(),
            r.accuracy,
            r.auc,
            r.attention_madds
        );
        acc.insert(i, r.accuracy);
    }
    verdict(
        acc[&1] >= acc[&0],
        format!("{SWEEP_STEPS} pretraining steps per rho; acc(0.3) {:.3} vs acc(0.1) {:.3}", acc[&1], acc[&0]),
    )
}

fn tiny_setup() -> Res<(RunConfig, Dataset)> {
    let cfg = RunConfig {
        height: 16,
        width: 16,
        patch: 4,
        d: 8,
        mlp_hidden: 16,
        saliency_hidden: [16, 8],
        d_z: 8,
        batch: 4,
        steps: 5,
        finetune_steps: 3,
        label_count: 8,
        ..RunConfig::default()
    };
    let ds = generate(&SynthSpec {
        n_images: 16,
        height: 16,
        width: 16,
        patch: 4,
        radius_min: 1.5,
        radius_max: 2.0,
        max_footprint: 4,
        seed: 9,
        ..SynthSpec::default()
    })?;
    Ok((cfg, ds))
}

fn structured<T: std::fmt::Debug>(r: Result<T, FormatError>) -> bool {
    matches!(
        r,
        Err(FormatError::BadMagic { .. }
            | FormatError::UnsupportedVersion { .. }
            | FormatError::Truncated { .. }
            | FormatError::Invalid { .. }
            | FormatError::TrailingBytes { .. })
    )
}

/// Bad magic, a future version, truncation at several offsets and a
/// trailing byte must each produce a structured error.
fn corruptions_rejected<T: std::fmt::Debug>(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<T, FormatError>) -> bool {
    let mut cases: Vec<Vec<u8>> = Vec::new();
    let mut magic = bytes.to_vec();
    magic[0] ^= 0xff;
    cases.push(magic);
    let mut version = bytes.to_vec();
    version[4..6].copy_from_slice(&u16::MAX.to_le_bytes());
    cases.push(version);
    for cut in [0, 3, 6, bytes.len() / 2, bytes.len() - 1] {
        cases.push(bytes[..cut].to_vec());
    }
    let mut trailing = bytes.to_vec();
    trailing.push(0);
    cases.push(trailing);
    cases.iter().all(|c| structured(decode(c)))
}

fn c9_persistence(_: &mut Shared) -> Res<Verdict> {
    let (cfg, ds) = tiny_setup()?;
    let capture = || -> Res<Checkpoint> {
        let mut t = Pretrainer::<f32>::new(cfg.clone(), &ds)?;
        t.run(&ds, cfg.steps, |_| {})?;
        Ok(Checkpoint::capture(&cfg, &t.params, Some(&t.opt)))
    };
    let (a, b) = (capture()?.encode(), capture()?.encode());
    let deterministic = a == b;

    let ckpt = Checkpoint::decode(&a)?;
    let ckpt_trip = ckpt.encode() == a;
    let ds_bytes = encode_dataset(&ds)?;
    let ds_trip = decode_dataset(&ds_bytes)? == ds && encode_dataset(&decode_dataset(&ds_bytes)?)? == ds_bytes;
    let cache = snapshot_cache(&ds, &ckpt.params, &cfg)?;
    let cache_bytes = cache.encode();
    let cache_trip = AttnCache::decode(&cache_bytes)? == cache && AttnCache::decode(&cache_bytes)?.encode() == cache_bytes;

    let corrupt = corruptions_rejected(&a, Checkpoint::decode)
        && corruptions_rejected(&ds_bytes, decode_dataset)
        && corruptions_rejected(&cache_bytes, AttnCache::decode);
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("broken.sckp");
    std::fs::write(&path, &a[..a.len() / 3])?;
    let from_disk = matches!(Checkpoint::load(&path), Err(Error::Format { .. }));

    verdict(
        deterministic && ckpt_trip && ds_trip && cache_trip && corrupt && from_disk,
        format!(
            "identical checkpoints {deterministic}; round trips ckpt {ckpt_trip} dataset {ds_trip} cache {cache_trip}; \
             structured corruption errors {}",
            corrupt && from_disk
        ),
    )
}

/// Largest saliency-parameter gradient after one objective evaluation.
fn saliency_grad(cfg: &RunConfig, ds: &Dataset, step: usize) -> Res<f64> {
    let mut params = ModelParams::<f32>::init(cfg.arch(), cfg.seed)?;
    let ids = batch_ids(ds.len(), cfg.batch, step, cfg.seed);
    pretrain_gradients(ds, &ids, &mut params, cfg, step, None)?;
    let mut seen = false;
    let mut max = 0.0f64;
    for (name, t) in params.store.iter() {
        if name.starts_with("saliency.") {
            seen = true;
            if let Some(g) = &t.grad {
                max = g.iter().fold(max, |m, v| m.max(v.abs() as f64));
            }
        }
    }
    if !seen {
        return Err("no saliency parameters in the model".into());
    }
    Ok(max)
}

fn c10_gradient_path(_: &mut Shared) -> Res<Verdict> {
    let (base, ds) = tiny_setup()?;
    let mut off = Vec::new();
    let mut on = Vec::new();
    for seed in 0..5u64 {
        let cfg = RunConfig {
            seed,
            lambda: 0.0,
            alt_period: 0,
            ..base.clone()
        };
        off.push(saliency_grad(&RunConfig { bias_mode: BiasMode::None, ..cfg.clone() }, &ds, seed as usize)?);
        on.push(saliency_grad(&RunConfig { bias_mode: BiasMode::Saliency, ..cfg }, &ds, seed as usize)?);
    }
    let zero = off.iter().all(|&g| g == 0.0);
    let nonzero = on.iter().all(|&g| g > 0.0);
    verdict(
        zero && nonzero,
        format!(
            "5 batches: max |grad| with bias none {:.1e}, smallest max |grad| with saliency bias {:.2e}",
            off.iter().fold(0.0f64, |a, &b| a.max(b)),
            on.iter().fold(f64::INFINITY, |a, &b| a.min(b))
        ),
    )
}

type Check = fn(&mut Shared) -> Res<Verdict>;

const CRITERIA: [(u32, &str, bool, Check); 10] = [
    (1, "gradient correctness", true, c1_gradcheck),
    (2, "sparse/dense equivalence", true, c2_equivalence),
    (3, "attention invariants", true, c3_invariants),
    (4, "complexity ratio K/L", true, c4_complexity),
    (5, "efficiency trend", false, c5_efficiency),
    (6, "saliency localization", false, c6_localization),
    (7, "downstream utility", false, c7_downstream),
    (8, "rho sweep", false, c8_sweep),
    (9, "determinism and persistence", true, c9_persistence),
    (10, "gradient-path contract", true, c10_gradient_path),
];

fn selected() -> Option<Vec<u32>> {
    let only = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(only.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut shared = Shared::default();
    let mut failed_exact = Vec::new();
    let mut failed_empirical = Vec::new();
    let start = Instant::now();
    for (id, name, exact, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (passed, detail) = match check(&mut shared) {
            Ok(v) => (v.passed, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.1}s]",
            if passed { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !passed {
            if exact {
                failed_exact.push(id);
            } else {
                failed_empirical.push(id);
            }
        }
    }
    println!(
        "acceptance: exact failures {failed_exact:?}, empirical failures {failed_empirical:?} ({:.0}s)",
        start.elapsed().as_secs_f64()
    );
    if failed_exact.is_empty() && (!strict || failed_empirical.is_empty()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
