//! Index-driven enhancements of the federated training loop:
//!
//! - [`sampler`]: clients similar to the previously selected cohort get higher
//!   sampling probability, with a cooldown window against immediate
//!   reselection.
//! - [`aggregator`]: aggregation weights from the closed-form maximizer of a
//!   profit-plus-entropy objective over discounted historical similarities,
//!   verified against a numerical simplex maximizer.
//! - [`local_reg`]: local training regularizer that pushes projected features
//!   orthogonal to every client's feature index while distilling the main
//!   head's predictions into the projection head.

pub mod aggregator;
pub mod local_reg;
pub mod sampler;

pub use aggregator::{oracle_solve_aggregation, AggregationConfig, AggregatorState};
pub use local_reg::{
    local_reg_loss, DistillDirection, LocalRegConfig, LocalRegParams, LocalRegTrainable,
    RegLossOutput,
};
pub use sampler::{
    similarity_to_selected, SamplerState, SamplingConfig, SelectionOutcome,
};

use serde::{Deserialize, Serialize};

/// Which enhancements an experiment runs. All off reproduces plain FedAvg /
/// FedAvgM.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnhancementConfig {
    #[serde(default)]
    pub sampling: Option<SamplingConfig>,
    #[serde(default)]
    pub aggregation: Option<AggregationConfig>,
    #[serde(default)]
    pub local_reg: Option<LocalRegConfig>,
}

impl EnhancementConfig {
    pub fn any_enabled(&self) -> bool {
        self.sampling.is_some() || self.aggregation.is_some() || self.local_reg.is_some()
    }

    /// Everything switched off.
    pub fn none() -> Self {
        EnhancementConfig::default()
    }
}
