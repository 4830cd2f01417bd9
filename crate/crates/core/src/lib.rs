//! Click-feedback image retrieval.
//!
//! A text query produces an initial ranking; a feedback agent marks some of
//! the top candidates as liked or disliked; the ranking is recomputed with
//! the feedback folded in. The crate also trains linear adapters on top of
//! frozen embeddings with feedback-derived losses and measures everything
//! with R@K / MedR / MeanR.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod ranker;
pub mod seed;
pub mod selector;
pub mod store;
pub mod trainer;
pub mod vector;

pub use encoder::{Adapter, EncodedCatalog, EncoderStack, Retriever};
pub use error::{Error, Result};
pub use eval::{run_ablation, run_protocol, AblationGrid, ProtocolParams, QueryOutcome, Report, StageMetrics};
pub use oracle::{give_feedback, OracleConfig, OracleMode};
pub use ranker::{rank, score_no_feedback, score_with_feedback, top_k, Feedback, RankerParams, Ranking};
pub use selector::{select_candidates, SelectorConfig};
pub use store::{encode_query, generate_synthetic, Dataset, EmbeddingMatrix, Item, Query, SynthConfig};
pub use trainer::{train, LossConfig, LossKind, TrainerConfig};
