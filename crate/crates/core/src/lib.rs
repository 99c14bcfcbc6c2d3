pub mod bench;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod formats;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod sparse_attn;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
