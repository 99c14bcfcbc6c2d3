//! Versioned binary files: checkpoints, attention caches, and PGM heatmaps.

pub(crate) mod binio;
mod cache;
mod checkpoint;
mod pgm;

pub use cache::{AttnCache, CacheEntry, CACHE_MAGIC, CACHE_VERSION};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pgm::{decode_pgm, encode_pgm};
