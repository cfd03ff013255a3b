//! Training-data windowing lab for autoregressive next-item recommenders.
//!
//! The crate generates a synthetic long-history interaction corpus, trains a
//! small decayed-context next-item model under three windowing policies
//! (fixed latest window, sliding window, and mixed schedules), and evaluates
//! each trained model on recent, old and future held-out interactions plus an
//! item-embedding similarity benchmark.
//!
//! Module map:
//! - [`corpus`]: generator, corpus file IO, holdout splitting.
//! - [`windowing`]: window samplers, epoch plans, coverage analytics.
//! - [`model`]: the next-item model with exact analytic gradients.
//! - [`training`]: Adam and the epoch/batch training engine.
//! - [`eval`]: perplexity, MRR, embedding mAP/recall and comparison tables.
//! - [`experiment`]: experiment configuration and the end-to-end runner used by the CLI.

pub mod corpus;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod seed;
pub mod training;
pub mod windowing;

mod fastmath;
mod simd;
mod kernel;

pub use corpus::{
    build_test_suite, generate_corpus, read_corpus, write_corpus, CatalogSpec, EvalSequence,
    EventType, GeneratorConfig, HoldoutConfig, Interaction, SimilaritySets, TestSuite,
    UserHistory,
};
pub use eval::{compare, embedding_metrics, evaluate, mrr, perplexity, ComparisonTable, EvalReport};
pub use model::{backward, forward, init_params, nll_loss, rank_items, Gradients, ModelConfig, ModelParams};
pub use training::{optimizer_step, train, AdamHyper, AdamState, TrainConfig, TrainLog};
pub use windowing::{
    build_epoch_plan, coverage_stats, sample_for_epoch, slide_window, truncate_latest,
    CoverageReport, EpochPlan, EpochPolicy, Horizon, WindowSample,
};
