//! Object-bias analytics and debiased continuous prompt tuning for masked
//! language models.
//!
//! The crate has two halves. The analytics half quantifies *object bias*:
//! how unevenly a prompt-queried model ranks object candidates once the
//! subject is masked out of the query. The training half tunes continuous
//! prompts against a frozen model with three joint objectives: the usual
//! MLM loss on the original prompt, a maximum-entropy term that equalizes
//! selected candidates under the subject-masked prompt, and a contrastive
//! term that pushes the mask hidden state toward the gold object embedding
//! and away from selected biased objects.
//!
//! A tiny trainable transformer MLM ([`backend::TinyMlm`]) makes the whole
//! pipeline runnable end to end on a synthetic fact world at desk scale;
//! full-size encoders can be plugged in behind the [`backend::MaskedLm`]
//! trait.
//!
//! All entropies and cross-entropies use natural log. Published tables for
//! the top-10 bias entropy quote a maximum of ~2.305, which only matches
//! ln 10 = 2.3026, not log2 10; we follow the arithmetic, not the notation.

pub mod analytics;
pub mod autodiff;
pub mod backend;
pub mod data;
pub mod diagnostics;
mod error;
pub mod objectives;
pub mod prompt;
pub mod templates;
mod tensorio;
pub mod train;

pub use error::{Error, Result};

/// Index into a backend vocabulary.
pub type TokenId = usize;
