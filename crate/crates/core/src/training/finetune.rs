use super::{adamw, batch_ids, check_dataset, stack_patches, AttnCache, EVAL_CHUNK};
use crate::config::{AttentionMode, RunConfig};
use crate::diffcore::{AdamW, Bound, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{classifier_forward, encode, Group, ModelParams, SelectionSource};
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub attention_madds: u64,
    pub saliency_rows: u64,
}

impl FinetuneMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,accuracy,attention_madds,saliency_rows";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss, self.accuracy, self.attention_madds, self.saliency_rows
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub attention_madds: u64,
    pub saliency_rows: u64,
}

/// Cached sets and scores for `ids`, converted to the working precision.
type CachedRows<T> = (Vec<Vec<usize>>, Vec<Vec<T>>);

fn cached_rows<T: Real>(cache: &AttnCache, ids: &[usize]) -> Result<CachedRows<T>> {
    let mut sets = Vec::with_capacity(ids.len());
    let mut scores = Vec::with_capacity(ids.len());
    for &id in ids {
        let e = cache.get(id)?;
        sets.push(e.set.clone());
        scores.push(e.s_hat.iter().map(|&v| T::lit(v as f64)).collect());
    }
    Ok((sets, scores))
}

/// Encodes `ids` and returns class probabilities.
fn classify<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    params: &ModelParams<T>,
    ds: &Dataset,
    ids: &[usize],
    cfg: &RunConfig,
    cache: Option<&AttnCache>,
) -> Result<Var> {
    let arch = &params.arch;
    let x = stack_patches::<T>(ids.iter().map(|&i| &ds.samples[i].image), arch.patch)?;
    let x = g.constant(x);
    let rows;
    let source = match (cfg.attention, cfg.reuse_cache) {
        (AttentionMode::Dense, _) => SelectionSource::Dense,
        (AttentionMode::Sparse, true) => {
            let cache = cache.ok_or_else(|| {
                Error::Data("reuse_cache = true but no attention cache was provided".into())
            })?;
            rows = cached_rows::<T>(cache, ids)?;
            SelectionSource::Cached {
                sets: &rows.0,
                s_hat: &rows.1,
            }
        }
        (AttentionMode::Sparse, false) => SelectionSource::Predict {
            rho: cfg.rho,
            fixed: None,
        },
    };
    let enc = encode(g, b, arch, x, source, cfg.bias_mode)?;
    classifier_forward(g, b, arch, enc.features)
}

fn argmax_hits<T: Real>(probs: &crate::diffcore::Tensor<T>, labels: &[usize]) -> usize {
    (0..probs.rows())
        .filter(|&i| {
            let row = probs.row(i);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].as_f64().total_cmp(&row[b].as_f64()).then(b.cmp(&a)))
                .unwrap_or(0);
            best == labels[i]
        })
        .count()
}

/// One cross-entropy step on `ids` with the saliency predictor frozen.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<T: Real>(
    ds: &Dataset,
    ids: &[usize],
    params: &mut ModelParams<T>,
    opt: &mut AdamW<T>,
    cfg: &RunConfig,
    cache: Option<&AttnCache>,
    step: usize,
) -> Result<FinetuneMetrics> {
    let labels: Vec<usize> = ids.iter().map(|&i| ds.samples[i].label as usize).collect();
    params.set_trainable(&[Group::Backbone]);
    let mut g = Graph::new();
    let b = params.store.bind(&mut g);
    let probs = classify(&mut g, &b, params, ds, ids, cfg, cache)?;
    let loss = cross_entropy(&mut g, probs, &labels)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("fine-tuning loss at step {step}: {value}")));
    }
    let metrics = FinetuneMetrics {
        step,
        loss: value,
        accuracy: argmax_hits(g.value(probs), &labels) as f64 / ids.len() as f64,
        attention_madds: g.counters().attention(),
        saliency_rows: g.counters().saliency_rows,
    };
    let grads = g.backward(loss)?;
    params.store.absorb(&b, &grads)?;
    opt.step(&mut params.store)?;
    Ok(metrics)
}

/// Owns the state of a fine-tuning run on a fixed labeled subset.
#[derive(Clone, Debug)]
pub struct FineTuner<T: Real> {
    pub config: RunConfig,
    pub params: ModelParams<T>,
    pub opt: AdamW<T>,
    pub step: usize,
    /// Dataset indices used for training.
    pub train_ids: Vec<usize>,
}

impl<T: Real> FineTuner<T> {
    /// Starts from pretrained `params` with a fresh optimizer; trains on the
    /// first `label_count` images of the dataset.
    pub fn new(config: RunConfig, params: ModelParams<T>, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        check_dataset(ds, &config)?;
        if config.label_count > ds.len() {
            return Err(Error::Data(format!(
                "label_count {} exceeds the {} images available",
                config.label_count,
                ds.len()
            )));
        }
        let opt = AdamW::new(adamw(config.finetune_lr, &config))?;
        Ok(Self {
            train_ids: (0..config.label_count).collect(),
            config,
            params,
            opt,
            step: 0,
        })
    }

    /// Images not used for fine-tuning.
    pub fn held_out(&self, ds: &Dataset) -> Vec<usize> {
        (self.config.label_count..ds.len()).collect()
    }

    pub fn step(&mut self, ds: &Dataset, cache: Option<&AttnCache>) -> Result<FinetuneMetrics> {
        let picks = batch_ids(self.train_ids.len(), self.config.batch, self.step, self.config.seed ^ 0xF1E7);
        let ids: Vec<usize> = picks.iter().map(|&i| self.train_ids[i]).collect();
        let m = finetune_step(ds, &ids, &mut self.params, &mut self.opt, &self.config, cache, self.step)?;
        self.step += 1;
        Ok(m)
    }

    pub fn run(
        &mut self,
        ds: &Dataset,
        cache: Option<&AttnCache>,
        steps: usize,
        mut observe: impl FnMut(&FinetuneMetrics),
    ) -> Result<Vec<FinetuneMetrics>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = self.step(ds, cache)?;
            observe(&m);
            out.push(m);
        }
        Ok(out)
    }
}

/// Area under the ROC curve via the Mann–Whitney statistic with tie midranks.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("auc", "scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC is undefined for a single-class set".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Accuracy and AUC over `ids`. Binary tasks score the class-1 probability;
/// multi-class tasks average one-vs-rest AUCs.
pub fn evaluate<T: Real>(
    ds: &Dataset,
    ids: &[usize],
    params: &ModelParams<T>,
    cfg: &RunConfig,
    cache: Option<&AttnCache>,
) -> Result<EvalMetrics> {
    if ids.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let c = params.arch.n_classes;
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
    let mut hits = 0;
    let mut madds = 0u64;
    let mut sal = 0u64;
    let labels: Vec<usize> = ids.iter().map(|&i| ds.samples[i].label as usize).collect();
    for (chunk, lab) in ids.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let mut g = Graph::new();
        let b = params.store.bind_constant(&mut g);
        let p = classify(&mut g, &b, params, ds, chunk, cfg, cache)?;
        hits += argmax_hits(g.value(p), lab);
        madds = madds
            .checked_add(g.counters().attention())
            .ok_or(Error::CounterOverflow("evaluate"))?;
        sal += g.counters().saliency_rows;
        for i in 0..chunk.len() {
            probs.push(g.value(p).row(i).iter().map(|v| v.as_f64()).collect());
        }
    }
    let auc_value = if c == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        auc(&s, &pos)?
    } else {
        let mut total = 0.0;
        for k in 0..c {
            let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            total += auc(&s, &pos)?;
        }
        total / c as f64
    };
    Ok(EvalMetrics {
        n: ids.len(),
        accuracy: hits as f64 / ids.len() as f64,
        auc: auc_value,
        attention_madds: madds,
        saliency_rows: sal,
    })
}
