//! Ablation grid: independent training runs that vary one lever at a time.
//!
//! Four axes are supported — attention style, loss composition, training
//! strata, and concept-token count. Every row trains a fresh model on the
//! shared dataset and evaluates on the full eval split, so rows within an
//! axis differ only in the lever under study. Rows run in parallel; each
//! carries its own derived seed and no state crosses rows.

use crate::data::{Dataset, StrataSelection};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalSummary};
use crate::model::{build_model, AttentionKind, ForwardOptions, ModelConfig};
use crate::seed::substream;
use crate::train::{train, LossMode, TrainConfig};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Concept-token counts swept by the `tokens` axis.
pub const TOKEN_SWEEP: [usize; 6] = [0, 4, 8, 12, 16, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Attention,
    Losses,
    Data,
    Tokens,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Attention,
        AblationAxis::Losses,
        AblationAxis::Data,
        AblationAxis::Tokens,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationAxis::Attention => "attention",
            AblationAxis::Losses => "losses",
            AblationAxis::Data => "data",
            AblationAxis::Tokens => "tokens",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(AblationAxis::Attention),
            "losses" => Ok(AblationAxis::Losses),
            "data" => Ok(AblationAxis::Data),
            "tokens" => Ok(AblationAxis::Tokens),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected attention, losses, data, or tokens)"
            ))),
        }
    }
}

/// One fully resolved grid cell, ready to run.
#[derive(Debug, Clone)]
struct RowPlan {
    axis: AblationAxis,
    variant: String,
    model: ModelConfig,
    train: TrainConfig,
}

/// One result line. Metric columns are `None` when the run diverged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub seed: u64,
    pub diverged: bool,
    pub steps: usize,
    pub existence_accuracy: Option<f64>,
    pub bleu: Option<f64>,
    /// Mean counted activation rate over the last 20% of steps.
    pub activation_rate: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows_for(&self, axis: AblationAxis) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.axis == axis.label())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// Stable per-row seed: same base, axis, and variant → same row, regardless
/// of which other rows run alongside.
fn row_seed(base: u64, axis: AblationAxis, variant: &str) -> u64 {
    substream(base, &format!("ablate/{axis}/{variant}")).random()
}

fn plans_for(
    axis: AblationAxis,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Vec<RowPlan> {
    let plan = |variant: String, model: ModelConfig, mut train: TrainConfig| {
        train.seed = row_seed(train.seed, axis, &variant);
        RowPlan {
            axis,
            variant,
            model,
            train,
        }
    };
    match axis {
        AblationAxis::Attention => [
            AttentionKind::Baseline,
            AttentionKind::MohTopk,
            AttentionKind::Remoh,
        ]
        .into_iter()
        .map(|kind| {
            let mut t = train.clone();
            t.attention = kind;
            plan(kind.label().to_string(), model.clone(), t)
        })
        .collect(),
        AblationAxis::Losses => [LossMode::None, LossMode::SprOnly, LossMode::SprHae]
            .into_iter()
            .map(|losses| {
                let mut t = train.clone();
                t.losses = losses;
                plan(losses.label().to_string(), model.clone(), t)
            })
            .collect(),
        AblationAxis::Data => data_variants()
            .into_iter()
            .map(|(name, strata)| {
                let mut t = train.clone();
                t.strata = strata;
                plan(name.to_string(), model.clone(), t)
            })
            .collect(),
        AblationAxis::Tokens => TOKEN_SWEEP
            .into_iter()
            .map(|n| {
                let mut m = model.clone();
                m.concept_tokens = n;
                plan(n.to_string(), m, train.clone())
            })
            .collect(),
    }
}

/// The four cumulative data compositions, smallest first.
fn data_variants() -> [(&'static str, StrataSelection); 4] {
    [
        (
            "anchor-only",
            StrataSelection {
                context_rich: false,
                high_fidelity: false,
                negatives: false,
            },
        ),
        (
            "anchor+negatives",
            StrataSelection {
                context_rich: false,
                high_fidelity: false,
                negatives: true,
            },
        ),
        (
            "anchor+negatives+context",
            StrataSelection {
                context_rich: true,
                high_fidelity: false,
                negatives: true,
            },
        ),
        (
            "full",
            StrataSelection {
                context_rich: true,
                high_fidelity: true,
                negatives: true,
            },
        ),
    ]
}

fn run_row(ds: &Dataset, plan: &RowPlan) -> Result<AblationRow> {
    plan.model.validate()?;
    let mut model = build_model(plan.model.clone(), plan.train.seed)?;
    for id in &ds.identities {
        model.register_concept(&id.name, plan.model.concept_tokens)?;
    }
    let seed = plan.train.seed;
    let report = match train(&mut model, ds, &plan.train) {
        Ok(r) => r,
        Err(Error::TrainingDiverged { step, .. }) => {
            return Ok(AblationRow {
                axis: plan.axis.label().to_string(),
                variant: plan.variant.clone(),
                seed,
                diverged: true,
                steps: step,
                existence_accuracy: None,
                bleu: None,
                activation_rate: None,
                final_loss: None,
            })
        }
        Err(e) => return Err(e),
    };
    let opts = ForwardOptions {
        kind: plan.train.attention,
        topk: plan.train.topk,
        temporal: true,
    };
    let eval_items: Vec<_> = ds.eval.iter().collect();
    let EvalSummary {
        existence_accuracy,
        bleu,
        ..
    } = evaluate(&model, ds, &eval_items, &opts)?;
    Ok(AblationRow {
        axis: plan.axis.label().to_string(),
        variant: plan.variant.clone(),
        seed,
        diverged: false,
        steps: report.steps,
        existence_accuracy: Some(existence_accuracy),
        bleu: Some(bleu),
        activation_rate: Some(report.tail_activation_rate(0.2)),
        final_loss: report.telemetry.last().map(|t| t.total),
    })
}

/// Run every row of the requested axes against one shared dataset.
///
/// Rows are independent and execute in parallel; output order follows the
/// axis order given, then the fixed variant order within each axis.
pub fn run_ablation(
    ds: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    axes: &[AblationAxis],
) -> Result<AblationReport> {
    if axes.is_empty() {
        return Err(Error::Config("at least one ablation axis is required".into()));
    }
    model.validate()?;
    train.validate()?;
    let plans: Vec<RowPlan> = axes
        .iter()
        .flat_map(|&axis| plans_for(axis, model, train))
        .collect();
    let rows = plans
        .par_iter()
        .map(|p| run_row(ds, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
