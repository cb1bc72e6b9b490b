//! Assembly function embeddings for binary code similarity detection.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`asm`] parses disassembled functions, normalizes their instructions
//!    and serializes them into instruction sequences.
//! 2. [`tokenizer`] turns instruction sequences into token streams and ids.
//! 3. [`dataset`] builds similar-function pairs across compilation variants
//!    and packs them into model-ready sequences.
//! 4. [`model`] and [`train`] hold the transformer encoder, its function
//!    embedding head and the generation / similarity / masked-token losses.
//! 5. [`search`] embeds functions, runs cosine top-k search and computes
//!    Recall@k over function pools.

pub mod asm;
pub mod dataset;
pub mod error;
pub mod io;
pub mod model;
pub mod numeric;
pub mod search;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
