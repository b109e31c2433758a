//! Semantic-ID tokenization and reasoning re-rank tooling.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod parse;
pub mod policy;
pub mod promptgen;
pub mod reward;
pub mod rqcodec;
pub mod seed;
pub mod sid;
pub mod synth;
pub mod vector;

pub use error::{Error, Result};

pub use ablate::{AblationConfig, AblationReport, AblationRow, Block};
pub use corpus::{CoEngagementSet, Event, Interaction, InteractionLog, ItemMeta, SplitSet};
pub use embed::{ContrastiveConfig, EmbeddingStore};
pub use evalkit::{EpisodeOutput, EvalReport, EvalSplit, MarkovRetriever};
pub use parse::{ParsedOutput, Stage};
pub use policy::{MockPolicyConfig, MockPolicyKind};
pub use promptgen::{ChatMessage, ChatSample, PromptConfig, RerankEpisode, Role, Strategy};
pub use reward::{BatchScore, RewardConfig, ScoringInput};
pub use rqcodec::train::{TechniqueFlags, TrainConfig};
pub use rqcodec::{Checkpoint, CodebookStack};
pub use sid::{SemanticId, SidRegistry, UniquenessReport};
pub use vector::Matrix;
