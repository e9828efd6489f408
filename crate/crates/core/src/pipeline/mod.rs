//! Two-stage training, checkpoints and parameter accounting.

pub mod checkpoint;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ModelParams, Param};

pub use checkpoint::{foundation_bytes, load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{prompt_tune, train, train_foundation, EpochLog, Stage, TrainConfig, TrainOutcome};

/// Reference full-scale model: 3.03M prompt parameters out of 89.96M.
pub const REFERENCE_PROMPT_PARAMS: f64 = 3.03e6;
pub const REFERENCE_TOTAL_PARAMS: f64 = 89.96e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub selected: usize,
    /// `selected / total`.
    pub fraction: f64,
    pub by_tag: BTreeMap<String, usize>,
}

/// Scalar counts of the parameters matching `pred`, plus totals per module tag.
pub fn count_params(params: &ModelParams, pred: impl Fn(&Param) -> bool) -> ParamCounts {
    let mut by_tag = BTreeMap::new();
    let mut selected = 0;
    for p in params.iter() {
        *by_tag.entry(p.tag.to_string()).or_insert(0) += p.value.numel();
        if pred(p) {
            selected += p.value.numel();
        }
    }
    let total = params.total_numel();
    ParamCounts {
        total,
        selected,
        fraction: if total == 0 { 0.0 } else { selected as f64 / total as f64 },
        by_tag,
    }
}

/// Counts of the prompt (non-foundation) parameters.
pub fn prompt_param_counts(params: &ModelParams) -> ParamCounts {
    count_params(params, |p| !p.tag.is_foundation())
}
