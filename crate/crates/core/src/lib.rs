//! Part-informed visual-language learning for person re-identification.
//!
//! The crate covers a synthetic parsing-annotated person dataset, toy image
//! and text encoders, part-informed prompt tuning, the hierarchical fusion
//! alignment head, every training objective, the two-stage training
//! pipeline and a retrieval/consistency evaluation harness.

pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod synthgen;

pub use config::RunConfig;
pub use encoders::{EncoderConfig, EncoderOutput, FeaturePyramid, ImageEncoder, TextEmbedding, TextEncoder};
pub use error::{Error, Result};
pub use eval::{EmbeddingGallery, RetrievalReport};
pub use fusion::FusionHead;
pub use losses::LossConfig;
pub use pipeline::TrainConfig;
pub use prompts::{AlignmentTarget, PromptContextStore};
pub use synthgen::{DatasetSplit, PartLabel, SynthConfig, SyntheticSample};
