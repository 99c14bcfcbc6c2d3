//! Augmentation, contrastive pretraining, attention snapshots, fine-tuning
//! and evaluation.

mod augment;
mod finetune;
mod pretrain;

pub use augment::{augment, make_views, view_seed, AugmentSpec};
pub use finetune::{auc, evaluate, finetune_step, EvalMetrics, FineTuner, FinetuneMetrics};
pub use pretrain::{pretrain_gradients, pretrain_step, scheduled_groups, PretrainMetrics, Pretrainer};

pub use crate::formats::{AttnCache, CacheEntry};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::diffcore::{AdamWConfig, Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    embed_patches, first_block_attention, partition_patches, saliency_forward, Image, ModelParams, SaliencyInput,
};
use crate::sparse_attn::select_topk;
use crate::synthdata::Dataset;

/// Images per inference batch.
const EVAL_CHUNK: usize = 64;

/// Stacks the patch grids of `images` into one `(n·L)×(P·P·C)` tensor.
pub fn stack_patches<'a, T: Real>(images: impl IntoIterator<Item = &'a Image>, patch: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = 0;
    for img in images {
        let grid = partition_patches(img, patch)?;
        width = grid.patch_dim();
        rows += grid.len();
        data.extend(grid.flat().iter().map(|&v| T::lit(v as f64)));
    }
    if rows == 0 {
        return Err(Error::shape("stack_patches", "no images"));
    }
    Tensor::matrix(rows, width, data)
}

/// Dataset indices for step `step`: consecutive slices of a per-epoch
/// shuffle, with the epoch order seeded by `(seed, epoch)`.
pub fn batch_ids(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let b = batch.min(n);
    let mut current: Option<(usize, Vec<usize>)> = None;
    (0..b)
        .map(|j| {
            let pos = step * b + j;
            let epoch = pos / n;
            if current.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(view_seed(seed, 0, usize::MAX, epoch));
                order.shuffle(&mut rng);
                current = Some((epoch, order));
            }
            current.as_ref().expect("epoch order").1[pos % n]
        })
        .collect()
}

pub(crate) fn adamw(lr: f64, cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    }
}

/// Un-augmented saliency and top-K selection for each listed image.
pub fn saliency_snapshot<T: Real>(
    ds: &Dataset,
    ids: &[usize],
    params: &ModelParams<T>,
    rho: f64,
) -> Result<Vec<CacheEntry>> {
    let arch = &params.arch;
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let x = stack_patches::<T>(chunk.iter().map(|&i| &ds.samples[i].image), arch.patch)?;
        let mut g = Graph::new();
        let b = params.store.bind_constant(&mut g);
        let x = g.constant(x);
        let input = match arch.saliency_input {
            SaliencyInput::Raw => x,
            SaliencyInput::Embedded => embed_patches(&mut g, &b, arch, x)?,
        };
        let s = saliency_forward(&mut g, &b, arch, input)?;
        let s = g.reshape(s, vec![chunk.len(), arch.tokens()])?;
        let s_hat = g.row_softmax(s)?;
        for i in 0..chunk.len() {
            let row = g.value(s_hat).row(i);
            let (_, set) = select_topk(row, rho)?;
            out.push(CacheEntry {
                set,
                s_hat: row.iter().map(|v| v.as_f64() as f32).collect(),
            });
        }
    }
    Ok(out)
}

/// One forward pass per image without augmentation; stores `S` and `ŝ`.
pub fn snapshot_cache<T: Real>(ds: &Dataset, params: &ModelParams<T>, cfg: &RunConfig) -> Result<AttnCache> {
    let ids: Vec<usize> = (0..ds.len()).collect();
    let entries = saliency_snapshot(ds, &ids, params, cfg.rho)?;
    let mut cache = AttnCache::new(params.arch.tokens());
    cache.entries = ids.into_iter().zip(entries).collect();
    Ok(cache)
}

/// Mean over label-1 images of the fraction of anomaly patches inside the
/// un-augmented top-K selection.
pub fn localization_recall<T: Real>(ds: &Dataset, ids: &[usize], params: &ModelParams<T>, rho: f64) -> Result<f64> {
    let pos: Vec<usize> = ids.iter().copied().filter(|&i| ds.samples[i].label == 1).collect();
    if pos.is_empty() {
        return Err(Error::Data("no anomalous images to score".into()));
    }
    let snap = saliency_snapshot(ds, &pos, params, rho)?;
    let total: f64 = pos
        .iter()
        .zip(&snap)
        .map(|(&i, e)| {
            let mask = &ds.samples[i].mask;
            mask.iter().filter(|j| e.set.binary_search(j).is_ok()).count() as f64 / mask.len() as f64
        })
        .sum();
    Ok(total / pos.len() as f64)
}

/// Saliency, selection and optionally the first block's materialized
/// attention for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub s_hat: Vec<f64>,
    pub set: Vec<usize>,
    /// Row sums of the full `L×L` map, columns outside the set included.
    pub row_sums: Option<Vec<f64>>,
}

pub fn inspect_image<T: Real>(
    ds: &Dataset,
    id: usize,
    params: &ModelParams<T>,
    cfg: &RunConfig,
    with_rows: bool,
) -> Result<Inspection> {
    if id >= ds.len() {
        return Err(Error::Data(format!("image {id} outside a dataset of {}", ds.len())));
    }
    let arch = &params.arch;
    let entry = saliency_snapshot(ds, &[id], params, cfg.rho)?.remove(0);
    let row_sums = if with_rows {
        let mut g = Graph::new();
        let b = params.store.bind_constant(&mut g);
        let x = g.constant(stack_patches::<T>([&ds.samples[id].image], arch.patch)?);
        let s_hat: Vec<T> = entry.s_hat.iter().map(|&v| T::lit(v as f64)).collect();
        let map = first_block_attention(&b, &mut g, arch, x, &entry.set, &s_hat, cfg.bias_mode)?;
        let full = map.materialize();
        Some((0..full.rows()).map(|i| full.row(i).iter().map(|v| v.as_f64()).sum()).collect())
    } else {
        None
    };
    Ok(Inspection {
        grid_h: arch.grid_h,
        grid_w: arch.grid_w,
        s_hat: entry.s_hat.iter().map(|&v| v as f64).collect(),
        set: entry.set,
        row_sums,
    })
}

/// Checks the dataset geometry matches the model.
pub fn check_dataset(ds: &Dataset, cfg: &RunConfig) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (h, w, c) = ds.dims();
    if (h, w, c, ds.patch) != (cfg.height, cfg.width, cfg.channels, cfg.patch) {
        return Err(Error::Data(format!(
            "dataset is {h}x{w}x{c} with patch {}, config expects {}x{}x{} with patch {}",
            ds.patch, cfg.height, cfg.width, cfg.channels, cfg.patch
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen = vec![0; 10];
        for step in 0..5 {
            for i in batch_ids(10, 2, step, 7) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(batch_ids(10, 4, 3, 1), batch_ids(10, 4, 3, 1));
        assert_eq!(batch_ids(3, 8, 0, 1).len(), 3);
    }

    #[test]
    fn inspection_matches_snapshot() {
        use crate::synthdata::{generate, SynthSpec};
        let spec = SynthSpec {
            n_images: 4,
            height: 16,
            width: 16,
            patch: 4,
            radius_min: 2.0,
            radius_max: 3.0,
            max_footprint: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let cfg = RunConfig {
            height: 16,
            width: 16,
            patch: 4,
            d: 8,
            n_blocks: 1,
            mlp_hidden: 16,
            saliency_hidden: [16, 8],
            d_z: 8,
            ..RunConfig::default()
        };
        let params = ModelParams::<f64>::init(cfg.arch(), 5).unwrap();
        let r = inspect_image(&ds, 2, &params, &cfg, true).unwrap();
        let snap = saliency_snapshot(&ds, &[2], &params, cfg.rho).unwrap();
        assert_eq!(r.set, snap[0].set);
        assert_eq!((r.grid_h, r.grid_w), (4, 4));
        assert_eq!(r.s_hat.len(), 16);
        let rows = r.row_sums.unwrap();
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-6));
        assert!(inspect_image(&ds, 9, &params, &cfg, false).is_err());
    }
}
