//! CNN + BiGRU extraction model trained with CTC.

pub mod ctc;
pub mod metrics;
mod model;
mod train;

pub use ctc::{ctc_loss, ctc_nll, greedy_decode};
pub use metrics::{ler, levenshtein};
pub use model::{AttackConfig, AttackModel, ModelVars, ALPHABET, BLANK};
pub use train::{evaluate_ler, train, Sample, TrainConfig, TrainHistory};
