//! One entry point over every pruning method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{magnitude_prune, wanda_prune};
use crate::calibration::{accumulate_hessian, column_norms};
use crate::error::{PruneError, Result};
use crate::obs::{prune_layer, PruneOutcome};
use crate::rose::{
    importance_scores, loss_profile, rose_prune_layer_with, LossProfile, ReorderDirection,
    ReorderPlan,
};
use crate::tensor::{DenseMatrix, SparsityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Magnitude,
    Wanda,
    Sparsegpt,
    Rose,
    RoseAscending,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Magnitude,
        Method::Wanda,
        Method::Sparsegpt,
        Method::Rose,
        Method::RoseAscending,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::Sparsegpt => "sparsegpt",
            Method::Rose => "rose",
            Method::RoseAscending => "rose-ascending",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PruneError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PruneError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// A finished run of any method.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub outcome: PruneOutcome,
    /// Pre-pruning loss profile of the dense layer (computed for every method
    /// so reports can always show `R_rel`).
    pub profile: LossProfile,
    /// Present for the loss-ordered methods.
    pub plan: Option<ReorderPlan>,
}

impl MethodRun {
    pub fn was_reordered(&self) -> bool {
        self.plan.as_ref().is_some_and(|p| p.was_reordered)
    }
}

pub fn run_method(
    method: Method,
    w: &DenseMatrix,
    activations: &[DenseMatrix],
    config: &SparsityConfig,
) -> Result<MethodRun> {
    config.validate()?;
    let direction = match method {
        Method::Rose => Some(ReorderDirection::Descending),
        Method::RoseAscending => Some(ReorderDirection::Ascending),
        _ => None,
    };
    if let Some(direction) = direction {
        let r = rose_prune_layer_with(w, activations, config, direction)?;
        return Ok(MethodRun {
            method,
            outcome: r.outcome,
            profile: r.profile,
            plan: Some(r.plan),
        });
    }
    let norms = column_norms(activations)?;
    let profile = loss_profile(&importance_scores(w, &norms)?, config)?;
    let outcome = match method {
        Method::Magnitude => magnitude_prune(w, activations, config)?,
        Method::Wanda => wanda_prune(w, &norms, activations, config)?,
        Method::Sparsegpt => {
            let bundle = accumulate_hessian(activations, config.damp_fraction)?;
            prune_layer(w, &bundle, activations, config)?
        }
        Method::Rose | Method::RoseAscending => unreachable!(),
    };
    Ok(MethodRun {
        method,
        outcome,
        profile,
        plan: None,
    })
}
