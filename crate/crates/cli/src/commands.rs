use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use sparsecontrast::bench::{flop_count, parse_sweep, BenchReport};
use sparsecontrast::config::{parse_config_with_seed, AttentionMode, Precision, RunConfig, SEED_ENV};
use sparsecontrast::diffcore::{GradCheckConfig, Real};
use sparsecontrast::formats::{encode_pgm, AttnCache, Checkpoint};
use sparsecontrast::gradsuite::{run_gradcheck_suite, SuiteModule};
use sparsecontrast::model::ModelParams;
use sparsecontrast::synthdata::{generate, Dataset, SynthSpec};
use sparsecontrast::training::{
    check_dataset, evaluate, inspect_image, snapshot_cache, FineTuner, PretrainMetrics, Pretrainer,
};
use sparsecontrast::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = read_text(path)?;
    let env = std::env::var(SEED_ENV).ok();
    parse_config_with_seed(&text, env.as_deref()).map_err(|e| match e {
        Error::Config(c) => Error::Data(format!("{}: {c}", path.display())),
        other => other,
    })
}

fn load_data(path: &Path, cfg: Option<&RunConfig>) -> Result<Dataset> {
    let ds = Dataset::load(path)?;
    if let Some(cfg) = cfg {
        check_dataset(&ds, cfg)?;
    }
    Ok(ds)
}

/// Checkpoint parameters, checked against the architecture `cfg` describes.
fn load_params(path: &Path, cfg: &RunConfig) -> Result<ModelParams<f32>> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.params.arch != cfg.arch() {
        return Err(Error::Data(format!(
            "{}: checkpoint architecture does not match the config",
            path.display()
        )));
    }
    Ok(ckpt.params)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn gen_data(spec: &Path, out: &Path) -> Result<ExitCode> {
    let spec = SynthSpec::parse(&read_text(spec)?)?;
    let ds = generate(&spec)?;
    ds.save(out)?;
    let pos = ds.samples.iter().filter(|s| s.label == 1).count();
    println!("wrote {} images ({pos} anomalous) to {}", ds.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn pretrain(config: &Path, data: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let ds = load_data(data, Some(&cfg))?;
    match cfg.precision {
        Precision::Single => pretrain_in::<f32>(cfg, &ds, out),
        Precision::Double => pretrain_in::<f64>(cfg, &ds, out),
    }
}

fn pretrain_in<T: Real>(cfg: RunConfig, ds: &Dataset, out: &Path) -> Result<ExitCode> {
    let metrics_path = cfg
        .metrics_path
        .as_ref()
        .map_or_else(|| with_suffix(out, ".metrics.csv"), PathBuf::from);
    let cache_path = cfg
        .cache_path
        .as_ref()
        .map_or_else(|| with_suffix(out, ".scac"), PathBuf::from);
    let file = fs::File::create(&metrics_path).map_err(|e| Error::file(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", PretrainMetrics::CSV_HEADER)?;

    let mut trainer = Pretrainer::<T>::new(cfg.clone(), ds)?;
    let start = Instant::now();
    let every = cfg.log_every.max(1);
    let mut io = Ok(());
    trainer.run(ds, cfg.steps, |m| {
        if io.is_ok() {
            io = writeln!(csv, "{}", m.csv_row());
        }
        if (m.step + 1) % every == 0 || m.step + 1 == cfg.steps {
            eprintln!(
                "step {:>6} [{}] contrast {:.4} sparse {:.4} total {:.4} ({:.1}s)",
                m.step + 1,
                m.group,
                m.l_contrast,
                m.l_sparse_soft,
                m.l_total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    io?;
    csv.flush()?;

    Checkpoint::capture(&cfg, &trainer.params, Some(&trainer.opt)).save(out)?;
    let cache = match cfg.attention {
        AttentionMode::Sparse => Some(snapshot_cache(ds, &trainer.params, &cfg)?),
        AttentionMode::Dense => None,
    };
    if let Some(cache) = &cache {
        cache.save(&cache_path)?;
    }
    println!("checkpoint {}", out.display());
    println!("metrics    {}", metrics_path.display());
    if cache.is_some() {
        println!("cache      {}", cache_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_cache(path: Option<&Path>, cfg: &RunConfig, ds: &Dataset) -> Result<Option<AttnCache>> {
    let needed = cfg.attention == AttentionMode::Sparse && cfg.reuse_cache;
    match (path, needed) {
        (Some(p), true) => {
            let cache = AttnCache::load(p)?;
            if cache.l != cfg.tokens() {
                return Err(Error::Data(format!(
                    "{}: cache is for L={}, config has L={}",
                    p.display(),
                    cache.l,
                    cfg.tokens()
                )));
            }
            cache.check_budget(cfg.rho)?;
            if cache.len() < ds.len() {
                return Err(Error::Data(format!(
                    "{}: cache covers {} images, dataset has {}",
                    p.display(),
                    cache.len(),
                    ds.len()
                )));
            }
            Ok(Some(cache))
        }
        (None, true) => Err(Error::Data(
            "reuse_cache = true needs --cache (the SCAC file written by pretrain)".into(),
        )),
        (_, false) => Ok(None),
    }
}

pub fn finetune(config: &Path, data: &Path, ckpt: &Path, cache: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let ds = load_data(data, Some(&cfg))?;
    let params = load_params(ckpt, &cfg)?;
    let cache = load_cache(cache, &cfg, &ds)?;
    match cfg.precision {
        Precision::Single => finetune_in(cfg, &ds, params, cache.as_ref(), out),
        Precision::Double => finetune_in(cfg, &ds, params.cast::<f64>(), cache.as_ref(), out),
    }
}

fn finetune_in<T: Real>(
    cfg: RunConfig,
    ds: &Dataset,
    params: ModelParams<T>,
    cache: Option<&AttnCache>,
    out: &Path,
) -> Result<ExitCode> {
    let mut tuner = FineTuner::new(cfg.clone(), params, ds)?;
    let every = cfg.log_every.max(1);
    tuner.run(ds, cache, cfg.finetune_steps, |m| {
        if (m.step + 1) % every == 0 || m.step + 1 == cfg.finetune_steps {
            eprintln!("step {:>6} loss {:.4} batch accuracy {:.3}", m.step + 1, m.loss, m.accuracy);
        }
    })?;
    Checkpoint::capture(&cfg, &tuner.params, Some(&tuner.opt)).save(out)?;
    let held = tuner.held_out(ds);
    if !held.is_empty() {
        report(&evaluate(ds, &held, &tuner.params, &cfg, cache)?);
    }
    println!("checkpoint {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn report(m: &sparsecontrast::training::EvalMetrics) {
    println!("images            {}", m.n);
    println!("accuracy          {:.4}", m.accuracy);
    println!("auc               {:.4}", m.auc);
    println!("attention madds   {}", m.attention_madds);
}

pub fn eval(config: &Path, data: &Path, ckpt: &Path, cache: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let ds = load_data(data, Some(&cfg))?;
    let params = load_params(ckpt, &cfg)?;
    let cache = load_cache(cache, &cfg, &ds)?;
    let ids: Vec<usize> = if cfg.label_count < ds.len() {
        (cfg.label_count..ds.len()).collect()
    } else {
        (0..ds.len()).collect()
    };
    let m = match cfg.precision {
        Precision::Single => evaluate(&ds, &ids, &params, &cfg, cache.as_ref())?,
        Precision::Double => evaluate(&ds, &ids, &params.cast::<f64>(), &cfg, cache.as_ref())?,
    };
    report(&m);
    Ok(ExitCode::SUCCESS)
}

pub fn bench(config: &Path, sweep: Option<&str>, trials: usize, csv: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let configs = match sweep {
        Some(s) => parse_sweep(s, cfg.d)?,
        None => vec![(cfg.tokens(), cfg.k(), cfg.d)],
    };
    let trials = (trials > 0).then_some(trials);
    let report = BenchReport::run(&configs, trials, cfg.seed)?;
    print!("{}", report.to_table());
    if let Some(path) = csv {
        write_file(path, report.to_csv().as_bytes())?;
    }

    let arch = cfg.arch();
    let dense = flop_count(&arch, cfg.rho, AttentionMode::Dense)?;
    let sparse = flop_count(&arch, cfg.rho, AttentionMode::Sparse)?;
    println!();
    println!("per image at L={} K={} d={} blocks={}:", sparse.l, sparse.k, sparse.d, sparse.n_blocks);
    println!("{:<22}{:>14}{:>14}", "", "dense", "sparse");
    let rows = [
        ("attention madds", dense.attention(), sparse.attention()),
        ("softmax exps", dense.softmax_exps, sparse.softmax_exps),
        ("saliency mlp madds", dense.saliency_mlp, sparse.saliency_mlp),
        ("selection compares", dense.selection_cmps, sparse.selection_cmps),
        ("total madds", dense.total_madds(), sparse.total_madds()),
    ];
    for (name, d, s) in rows {
        println!("{name:<22}{d:>14}{s:>14}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(module: SuiteModule) -> Result<ExitCode> {
    let start = Instant::now();
    let report = run_gradcheck_suite(module, &GradCheckConfig::default())?;
    println!("{report}");
    println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

pub fn inspect(ckpt: &Path, data: &Path, image: usize, out: &Path, row_sums: bool) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(ckpt)?;
    let cfg = ckpt.config;
    let ds = load_data(data, Some(&cfg))?;
    let r = inspect_image(&ds, image, &ckpt.params, &cfg, row_sums)?;

    let pgm = with_suffix(out, ".pgm");
    write_file(&pgm, &encode_pgm(&r.s_hat, r.grid_h, r.grid_w)?)?;
    let set_path = with_suffix(out, ".set.txt");
    let mut text = String::new();
    for j in &r.set {
        text.push_str(&format!("{j}\n"));
    }
    write_file(&set_path, text.as_bytes())?;
    println!("heatmap {} ({}x{})", pgm.display(), r.grid_h, r.grid_w);
    println!("set     {} (K={})", set_path.display(), r.set.len());

    let sample = &ds.samples[image];
    if sample.label == 1 {
        let hit = sample.mask.iter().filter(|j| r.set.binary_search(j).is_ok()).count();
        println!("anomaly patches selected: {hit}/{}", sample.mask.len());
    }
    if let Some(rows) = r.row_sums {
        let path = with_suffix(out, ".rows.txt");
        let mut text = String::new();
        for v in &rows {
            text.push_str(&format!("{v:.9}\n"));
        }
        write_file(&path, text.as_bytes())?;
        let worst = rows.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        println!("rows    {} (max |sum - 1| = {worst:.2e})", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
