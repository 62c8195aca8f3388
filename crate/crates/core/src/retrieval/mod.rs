//! Dataset embedding, the flat index and AP@k evaluation.

mod embed;
mod eval;
mod index;

pub use embed::{embed_reference, embed_sum_clip, ReferenceHead};
pub use eval::{ap_at_k, evaluate, CategoryAp, EvalReport, DEFAULT_K};
pub use index::{rank, EmbeddingIndex, ImageBlock, INDEX_MAGIC};
