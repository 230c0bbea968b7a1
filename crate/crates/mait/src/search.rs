//! ALS-guided mask-placement search and end-to-end soft-mask training.
//!
//! Quick empirical search, three phases in at most three trainer runs:
//! 1. Initialization: hard-mask head 0 in every layer and train.
//! 2. Assignment: from that run's ALS of head 0 per layer, mask all heads
//!    (ALS above the high threshold), keep the single mask (between the
//!    thresholds, boundaries included), or remove it (below the low one).
//! 3. Calibration: retrain, then in the all-masked layers drop each head
//!    whose own ALS falls below the low threshold. A third run happens
//!    only if calibration removed something.

use crate::error::{Error, Result};
use crate::maskgen::{HeadMask, MaskScheme};
use crate::metrics::AttentionRecord;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::train::{als_table, train_loop, TrainOptions};
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub high_threshold: f64,
    pub low_threshold: f64,
    pub probe_epochs: usize,
    pub r: usize,
    pub seed: u64,
    /// Wall-clock budget across trainer invocations.
    #[serde(skip)]
    pub timeout: Option<Duration>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            high_threshold: 0.65,
            low_threshold: 0.35,
            probe_epochs: 5,
            r: 3,
            seed: 0,
            timeout: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.low_threshold
            && self.low_threshold < self.high_threshold
            && self.high_threshold < 1.0)
        {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < low < high < 1, got {} / {}",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDecision {
    MaskAll,
    KeepSingle,
    Remove,
}

/// Assignment rule on the head-0 ALS of each layer. Boundary equality
/// keeps the single mask (the least destructive branch).
pub fn assignment_decisions(als_head0: &[f64], cfg: &SearchConfig) -> Vec<LayerDecision> {
    als_head0
        .iter()
        .map(|&a| {
            if a > cfg.high_threshold {
                LayerDecision::MaskAll
            } else if a >= cfg.low_threshold {
                LayerDecision::KeepSingle
            } else {
                LayerDecision::Remove
            }
        })
        .collect()
}

/// Scheme implied by the assignment decisions.
pub fn assignment_scheme(decisions: &[LayerDecision], heads: usize, r: usize) -> MaskScheme {
    MaskScheme {
        layers: decisions
            .iter()
            .map(|d| match d {
                LayerDecision::MaskAll => vec![HeadMask::Hard { r }; heads],
                LayerDecision::KeepSingle => {
                    let mut row = vec![HeadMask::None; heads];
                    row[0] = HeadMask::Hard { r };
                    row
                }
                LayerDecision::Remove => vec![HeadMask::None; heads],
            })
            .collect(),
    }
}

/// Calibration rule: in layers the assignment fully masked, remove each
/// head whose ALS is below the low threshold. Returns the final scheme and
/// the removed (layer, head) pairs.
pub fn calibration_scheme(
    step2: &MaskScheme,
    decisions: &[LayerDecision],
    als: &[Vec<f64>],
    cfg: &SearchConfig,
) -> (MaskScheme, Vec<(usize, usize)>) {
    let mut scheme = step2.clone();
    let mut removed = Vec::new();
    for (l, decision) in decisions.iter().enumerate() {
        if *decision != LayerDecision::MaskAll {
            continue;
        }
        for (h, hm) in scheme.layers[l].iter_mut().enumerate() {
            if hm.is_masked() && als[l][h] < cfg.low_threshold {
                *hm = HeadMask::None;
                removed.push((l, h));
            }
        }
    }
    (scheme, removed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchIteration {
    pub phase: String,
    pub scheme: MaskScheme,
    /// ALS table (layer x head) measured after training with `scheme`.
    pub als: Vec<Vec<f64>>,
}

/// Audit trail: every trainer invocation's scheme and measured ALS table,
/// plus the decisions taken. Reproducible: replaying the tables through
/// the decision functions yields `final_scheme`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchTrace {
    pub config: SearchConfig,
    pub iterations: Vec<SearchIteration>,
    pub decisions: Vec<LayerDecision>,
    pub removed: Vec<(usize, usize)>,
    pub final_scheme: MaskScheme,
    pub trainer_invocations: usize,
}

impl SearchTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Recomputes the final scheme from the recorded ALS tables alone.
    pub fn replay(&self) -> Result<MaskScheme> {
        let first = self
            .iterations
            .first()
            .ok_or_else(|| Error::Contract("trace has no iterations".into()))?;
        let heads = first.scheme.head_count();
        let head0: Vec<f64> = first.als.iter().map(|row| row[0]).collect();
        let decisions = assignment_decisions(&head0, &self.config);
        let step2 = assignment_scheme(&decisions, heads, self.config.r);
        if self.iterations.len() < 2 {
            return Ok(step2);
        }
        let (final_scheme, _) =
            calibration_scheme(&step2, &decisions, &self.iterations[1].als, &self.config);
        Ok(final_scheme)
    }
}

/// Runs the quick empirical search. `trainer` trains a fresh model with
/// the given scheme and returns its probe attention record; it must be
/// deterministic per scheme.
pub fn quick_search<F>(
    mut trainer: F,
    cfg: &SearchConfig,
    layers: usize,
    heads: usize,
) -> Result<(MaskScheme, SearchTrace)>
where
    F: FnMut(&MaskScheme) -> Result<AttentionRecord>,
{
    cfg.validate()?;
    let started = Instant::now();
    let check_budget = |calls: usize| -> Result<()> {
        if let Some(limit) = cfg.timeout {
            if started.elapsed() > limit {
                return Err(Error::Contract(format!(
                    "search timeout after {calls} trainer invocations ({:?} > {limit:?})",
                    started.elapsed()
                )));
            }
        }
        Ok(())
    };

    // 1. Initialization
    let init_scheme = MaskScheme {
        layers: (0..layers)
            .map(|_| {
                let mut row = vec![HeadMask::None; heads];
                row[0] = HeadMask::Hard { r: cfg.r };
                row
            })
            .collect(),
    };
    let record = trainer(&init_scheme)?;
    check_budget(1)?;
    let als1 = als_table(&record, cfg.r)?;
    let head0: Vec<f64> = als1.iter().map(|row| row[0]).collect();

    // 2. Assignment
    let decisions = assignment_decisions(&head0, cfg);
    let step2 = assignment_scheme(&decisions, heads, cfg.r);

    let mut iterations = vec![SearchIteration {
        phase: "initialization".into(),
        scheme: init_scheme,
        als: als1,
    }];

    // 3. Calibration: retrain with the assigned scheme, then prune
    let record2 = trainer(&step2)?;
    check_budget(2)?;
    let als2 = als_table(&record2, cfg.r)?;
    let (final_scheme, removed) = calibration_scheme(&step2, &decisions, &als2, cfg);
    iterations.push(SearchIteration {
        phase: "assignment".into(),
        scheme: step2,
        als: als2,
    });

    let mut invocations = 2;
    if !removed.is_empty() {
        let record3 = trainer(&final_scheme)?;
        check_budget(3)?;
        let als3 = als_table(&record3, cfg.r)?;
        iterations.push(SearchIteration {
            phase: "calibration".into(),
            scheme: final_scheme.clone(),
            als: als3,
        });
        invocations = 3;
    }

    let trace = SearchTrace {
        config: cfg.clone(),
        iterations,
        decisions,
        removed,
        final_scheme: final_scheme.clone(),
        trainer_invocations: invocations,
    };
    Ok((final_scheme, trace))
}

/// Trains a model whose scheme contains soft-masked heads and reports the
/// learned alpha per (layer, head).
pub fn train_soft_masks(
    config: &ModelConfig,
    params: &mut ModelParams,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    opts: &TrainOptions,
) -> Result<Vec<(usize, usize, f64)>> {
    let has_soft = config
        .scheme
        .layers
        .iter()
        .any(|row| row.iter().any(|h| matches!(h, HeadMask::Soft { .. })));
    if !has_soft {
        return Err(Error::contract("scheme contains no soft-masked heads"));
    }
    train_loop(config, params, train, val, opts)?;
    let alphas = params.soft_alphas();
    debug_assert!(alphas.iter().all(|&(_, _, a)| a > 0.0 && a < 1.0));
    Ok(alphas)
}
