//! Residual mixture-of-experts models for next-window prediction of
//! multivariate binary event sequences.
//!
//! A population-wide GRU predictor (the base model) is trained first; a
//! mixture of small GRU experts with a GRU gating network is then trained on
//! top of the frozen base so the mixture's output, added to the base's,
//! minimizes binary cross entropy — the mixture learns what the base misses.
//! The crate also ships the from-scratch mixture ablation, a full-history
//! logistic-regression baseline, a synthetic heterogeneous-population
//! generator with an exact conditional-probability oracle, and AUPRC-based
//! evaluation.
//!
//! Everything is deterministic under explicit seeds: same seed, same data,
//! same configuration — byte-identical parameters, datasets, and reports.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, AnyModel, Checkpoint};
pub use data::{
    generate_synthetic, load_dataset, oracle_predict, parse_dataset, save_dataset,
    split_train_test, window_segment, Dataset, DatasetSplit, EventVocabulary, RawStream,
    SyntheticWorld, WindowedSequence,
};
pub use eval::{average_precision, gain_report, macro_auprc, occurrence_ratio, MetricsReport};
pub use models::{BaseModel, Combine, LrModel, MoeModel, MoeParams, RmoeModel, EPS_CLAMP};
pub use training::{
    adam_step, early_stop_check, train_base, train_moe, train_rmoe, AdamState, TrainConfig,
    TrainError, TrainHistory,
};
