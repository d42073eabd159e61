//! Two-stage trainer.
//!
//! Stage 1 runs on single-frame clips with existence and appearance
//! questions only; stage 2 unfreezes the encoder tail, enables the temporal
//! embedding, and trains on full clips over all categories. Each step draws
//! a fresh batch from a step-indexed substream, so runs are reproducible
//! independent of thread count or prior steps.
//!
//! The optimizer is a momentum-free adaptive rule with per-group learning
//! rates: a decayed second-moment accumulator per parameter, gradients
//! clipped to a global norm beforehand. The sparsity coefficient β gets its
//! feedback update once per step per cross-attention layer, after the step's
//! loss has been taken with the current value.

use crate::data::{Dataset, QaCategory, QaItem, StrataSelection};
use crate::error::{Error, Result};
use crate::model::{AttentionKind, ForwardOptions, Model, ParamGroup};
use crate::objectives::{counted_sparsity, hae_term, spr_term, SparsityConfig, SparsityState};
use crate::seed::substream_indexed;
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_seed() -> u64 {
    7
}
fn default_stage1_epochs() -> usize {
    1
}
fn default_stage2_epochs() -> usize {
    7
}
fn default_steps_per_epoch() -> usize {
    250
}
fn default_batch_size() -> usize {
    2
}
fn default_lr() -> f64 {
    3e-3
}
fn default_lr_warmup() -> usize {
    50
}
fn default_lr_final() -> f64 {
    0.3
}
fn default_weight_ema() -> f64 {
    0.99
}
fn default_rms_decay() -> f64 {
    0.99
}
fn default_rms_eps() -> f64 {
    1e-8
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_attention() -> AttentionKind {
    AttentionKind::Remoh
}
fn default_topk() -> usize {
    3
}
fn default_rate_ema() -> f64 {
    0.9
}
fn default_rate_tol() -> f64 {
    0.02
}

/// Which sparsity-control terms join the language-model loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "spr-only")]
    SprOnly,
    #[default]
    #[serde(rename = "spr+hae")]
    SprHae,
}

impl LossMode {
    pub fn label(self) -> &'static str {
        match self {
            LossMode::None => "none",
            LossMode::SprOnly => "spr-only",
            LossMode::SprHae => "spr+hae",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_stage1_epochs")]
    pub stage1_epochs: usize,
    #[serde(default = "default_stage2_epochs")]
    pub stage2_epochs: usize,
    /// Batches per epoch. An "epoch" is a fixed sampling budget rather than
    /// a full pass, keeping the 1:7 stage split while the whole schedule
    /// stays a couple of thousand steps.
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_tokens: f64,
    #[serde(default = "default_lr")]
    pub lr_remoh: f64,
    #[serde(default = "default_lr")]
    pub lr_adapters: f64,
    #[serde(default = "default_lr")]
    pub lr_encoder: f64,
    /// Steps of linear warmup from zero before the decay leg starts.
    #[serde(default = "default_lr_warmup")]
    pub lr_warmup: usize,
    /// Fraction of the base rate left at the final step; the decay between
    /// warmup end and the last step is linear.
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    /// Decay for the trailing weight average the trained model is left at.
    /// Small-batch updates jitter around the basin; the average sits nearer
    /// its centre. Zero keeps the last iterate.
    #[serde(default = "default_weight_ema")]
    pub weight_ema: f64,
    #[serde(default = "default_rms_decay")]
    pub rms_decay: f64,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    #[serde(default = "default_topk")]
    pub topk: usize,
    #[serde(default)]
    pub losses: LossMode,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    /// Which training strata feed the batch sampler; evaluation is untouched.
    #[serde(default)]
    pub strata: StrataSelection,
    /// Smoothing for the counted rate fed to the β controller. A two-clip
    /// batch is a noisy estimator; feeding it raw turns β into a random walk.
    #[serde(default = "default_rate_ema")]
    pub rate_ema: f64,
    /// β holds while the smoothed rate sits within this band of the target,
    /// which stops the multiplicative update from integrating noise forever.
    #[serde(default = "default_rate_tol")]
    pub rate_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        for (name, lr) in [
            ("lr_tokens", self.lr_tokens),
            ("lr_remoh", self.lr_remoh),
            ("lr_adapters", self.lr_adapters),
            ("lr_encoder", self.lr_encoder),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return Err(Error::Config(format!(
                "rms_decay must lie in [0,1), got {}",
                self.rms_decay
            )));
        }
        if !(self.rms_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "rms_eps and clip_norm must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rate_ema) || !(self.rate_tol >= 0.0) {
            return Err(Error::Config(format!(
                "rate_ema must lie in [0,1) and rate_tol must be nonnegative, got {} and {}",
                self.rate_ema, self.rate_tol
            )));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= 1.0) {
            return Err(Error::Config(format!(
                "lr_final must lie in (0,1], got {}",
                self.lr_final
            )));
        }
        if !(0.0..1.0).contains(&self.weight_ema) {
            return Err(Error::Config(format!(
                "weight_ema must lie in [0,1), got {}",
                self.weight_ema
            )));
        }
        self.sparsity.validate()?;
        if self.attention == AttentionKind::MohTopk
            && (self.topk == 0 || self.topk > self.sparsity.routed)
        {
            return Err(Error::Config(format!(
                "topk must lie in 1..={}, got {}",
                self.sparsity.routed, self.topk
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        (self.stage1_epochs + self.stage2_epochs) * self.steps_per_epoch
    }

    pub fn stage1_steps(&self) -> usize {
        self.stage1_epochs * self.steps_per_epoch
    }

    fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Tokens => self.lr_tokens,
            ParamGroup::Remoh => self.lr_remoh,
            ParamGroup::Adapters => self.lr_adapters,
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Base => 0.0,
        }
    }

    /// Schedule multiplier at `step`: linear warmup, then linear decay down
    /// to `lr_final` at the last step.
    fn lr_scale(&self, step: usize) -> f64 {
        let warm = if self.lr_warmup > 0 {
            ((step + 1) as f64 / self.lr_warmup as f64).min(1.0)
        } else {
            1.0
        };
        let total = self.total_steps();
        let decay = if total > 1 {
            let frac = step as f64 / (total - 1) as f64;
            1.0 - (1.0 - self.lr_final) * frac
        } else {
            1.0
        };
        warm * decay
    }
}

/// Per-cross-layer sparsity telemetry for one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerTelemetry {
    pub layer: usize,
    pub beta: f64,
    pub r_s: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub stage: u8,
    pub lm: f64,
    pub spr: f64,
    pub hae: f64,
    pub total: f64,
    /// Mean β over cross layers (0 when nothing is routed).
    pub beta: f64,
    /// Mean counted sparsity over cross layers.
    pub r_s: f64,
    pub t_s: f64,
    pub grad_norm: f64,
    pub layers: Vec<LayerTelemetry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub telemetry: Vec<StepTelemetry>,
    pub steps: usize,
    pub stage1_steps: usize,
}

impl TrainReport {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.telemetry.iter().map(|t| t.total).collect()
    }

    /// Mean counted activation rate `1 − R_s` over the trailing fraction of
    /// steps. A run with no routed telemetry reports 1.0: every head of a
    /// purely shared layer is always on.
    pub fn tail_activation_rate(&self, fraction: f64) -> f64 {
        let routed: Vec<&StepTelemetry> = self
            .telemetry
            .iter()
            .filter(|t| !t.layers.is_empty())
            .collect();
        if routed.is_empty() {
            return 1.0;
        }
        let n = ((routed.len() as f64 * fraction).ceil() as usize)
            .clamp(1, routed.len());
        let tail = &routed[routed.len() - n..];
        tail.iter().map(|t| 1.0 - t.r_s).sum::<f64>() / n as f64
    }

    /// Largest β over the run, for clamp diagnostics.
    pub fn beta_saturation_fraction(&self, beta_max: f64) -> f64 {
        if self.telemetry.is_empty() {
            return 0.0;
        }
        let sat = self
            .telemetry
            .iter()
            .filter(|t| t.layers.iter().any(|l| l.beta >= beta_max))
            .count();
        sat as f64 / self.telemetry.len() as f64
    }
}

/// β controller plus its smoothed view of the counted rate.
struct SparsityCtl {
    state: SparsityState,
    ema: Option<f64>,
}

impl SparsityCtl {
    fn new(cfg: &SparsityConfig) -> Self {
        SparsityCtl {
            state: SparsityState::new(cfg),
            ema: None,
        }
    }

    /// Fold one counted-rate observation into the smoothed estimate.
    fn observe(&mut self, cfg: &TrainConfig, counted: f64) -> f64 {
        let s = match self.ema {
            Some(prev) => cfg.rate_ema * prev + (1.0 - cfg.rate_ema) * counted,
            None => counted,
        };
        self.ema = Some(s);
        s
    }

    fn adjust(&mut self, cfg: &TrainConfig, smoothed: f64) {
        if (cfg.sparsity.target_sparsity() - smoothed).abs() > cfg.rate_tol {
            self.state.update(&cfg.sparsity, smoothed);
        }
    }
}

/// Second-moment accumulators, one per stored parameter.
struct OptState {
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn new(model: &Model) -> Self {
        OptState {
            v: model
                .store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect(),
        }
    }
}

fn first_frame(frames: &Tensor) -> Tensor {
    Tensor::from_vec(1, frames.cols(), frames.row(0).to_vec()).expect("row slice fits")
}

/// Target ids for the loss: the answer tokens plus one end marker. Slots
/// past the end stay out of the loss — scoring the padding would swamp the
/// short answers this task lives on.
fn answer_target_ids(model: &Model, item: &QaItem, names: &[String]) -> Result<Vec<usize>> {
    let mut ids = model.vocab.encode(&item.answer, names)?;
    if ids.len() >= model.answer_span() {
        return Err(Error::Config(format!(
            "answer {:?} exceeds the {}-slot span",
            item.answer,
            model.answer_span()
        )));
    }
    ids.push(model.vocab.end_id());
    Ok(ids)
}

fn stage1_eligible(q: &QaItem) -> bool {
    matches!(q.category, QaCategory::Existence | QaCategory::Appearance)
}

struct StepOutcome {
    lm: f64,
    spr: f64,
    hae: f64,
    total: f64,
    grad_norm: f64,
    layers: Vec<LayerTelemetry>,
}

/// Run both stages, mutating the model in place.
pub fn train(model: &mut Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let routed_run = cfg.attention != AttentionKind::Baseline;
    if routed_run && cfg.sparsity.routed != model.cfg.routed_heads {
        return Err(Error::Config(format!(
            "sparsity config covers {} routed heads but the model has {}",
            cfg.sparsity.routed, model.cfg.routed_heads
        )));
    }
    let total_steps = cfg.total_steps();
    let stage1_steps = cfg.stage1_steps();
    let report_empty = TrainReport {
        telemetry: Vec::new(),
        steps: 0,
        stage1_steps: 0,
    };
    if total_steps == 0 {
        return Ok(report_empty);
    }

    let names = model.concept_names();
    let admitted = ds.train_subset(cfg.strata);
    let stage1_pool: Vec<&QaItem> = admitted
        .iter()
        .copied()
        .filter(|q| stage1_eligible(q))
        .collect();
    let stage2_pool = admitted;
    if stage1_steps > 0 && stage1_pool.is_empty() {
        return Err(Error::Config(
            "stage 1 needs existence or appearance items in the train split".into(),
        ));
    }
    if total_steps > stage1_steps && stage2_pool.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }

    let mut opt = OptState::new(model);
    // Trailing average of every parameter; the untouched ones ride along as
    // constants, which spares tracking the per-stage trainable set.
    let mut shadow: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|(_, p)| p.value.values().to_vec())
        .collect();
    // One β for the whole stack: the sparsity loss is a single term over all
    // cross layers, so the feedback reads the global counted rate. Per-layer
    // controllers escalate against layers whose lm-optimal density differs
    // from the target and end up pinned at the clamp.
    let mut ctl = SparsityCtl::new(&cfg.sparsity);
    let t_s = cfg.sparsity.target_sparsity();

    let mut telemetry = Vec::with_capacity(total_steps);
    let mut last_finite: Option<(usize, f64)> = None;
    let mut current_stage = 0u8;

    for step in 0..total_steps {
        let stage: u8 = if step < stage1_steps { 1 } else { 2 };
        if stage != current_stage {
            model.stage_freeze(stage)?;
            current_stage = stage;
        }
        let pool = if stage == 1 { &stage1_pool } else { &stage2_pool };

        let outcome = run_step(
            model, ds, cfg, &names, pool, step, stage, &mut ctl, &mut opt,
        );
        let outcome = match outcome {
            Ok(o) => o,
            // A numeric blow-up mid-graph is a divergence, reported with the
            // last healthy step.
            Err(Error::NonFinite { .. }) => {
                let (lf, lt) = last_finite.unwrap_or((step, f64::NAN));
                return Err(Error::TrainingDiverged {
                    step,
                    last_finite_step: lf,
                    last_total: lt,
                });
            }
            Err(e) => return Err(e),
        };
        if !outcome.total.is_finite() || !outcome.grad_norm.is_finite() {
            let (lf, lt) = last_finite.unwrap_or((step, f64::NAN));
            return Err(Error::TrainingDiverged {
                step,
                last_finite_step: lf,
                last_total: lt,
            });
        }
        last_finite = Some((step, outcome.total));
        if cfg.weight_ema > 0.0 {
            let lam = cfg.weight_ema;
            for (sh, (_, p)) in shadow.iter_mut().zip(model.store.iter()) {
                for (s, &w) in sh.iter_mut().zip(p.value.values()) {
                    *s = lam * *s + (1.0 - lam) * w;
                }
            }
        }

        let (beta_mean, rs_mean) = if outcome.layers.is_empty() {
            (0.0, 0.0)
        } else {
            let n = outcome.layers.len() as f64;
            (
                outcome.layers.iter().map(|l| l.beta).sum::<f64>() / n,
                outcome.layers.iter().map(|l| l.r_s).sum::<f64>() / n,
            )
        };
        telemetry.push(StepTelemetry {
            step,
            stage,
            lm: outcome.lm,
            spr: outcome.spr,
            hae: outcome.hae,
            total: outcome.total,
            beta: beta_mean,
            r_s: rs_mean,
            t_s,
            grad_norm: outcome.grad_norm,
            layers: outcome.layers,
        });
    }

    if cfg.weight_ema > 0.0 {
        for (sh, (_, p)) in shadow.into_iter().zip(model.store.iter_mut()) {
            p.value.values_mut().copy_from_slice(&sh);
        }
    }

    Ok(TrainReport {
        telemetry,
        steps: total_steps,
        stage1_steps,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    names: &[String],
    pool: &[&QaItem],
    step: usize,
    stage: u8,
    ctl: &mut SparsityCtl,
    opt: &mut OptState,
) -> Result<StepOutcome> {
    let mut rng = substream_indexed(cfg.seed, "train-step", step as u64);
    let batch: Vec<&QaItem> = (0..cfg.batch_size)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect();
    let opts = ForwardOptions {
        kind: cfg.attention,
        topk: cfg.topk,
        temporal: stage == 2,
    };

    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape)?;
    let mut lm_terms: Vec<Val> = Vec::with_capacity(batch.len());
    let mut layer_scores: BTreeMap<usize, Vec<Val>> = BTreeMap::new();
    for item in &batch {
        let clip = ds.clip(&item.clip_id)?;
        let frames = if stage == 1 {
            first_frame(&clip.frames)
        } else {
            clip.frames.clone()
        };
        let q_ids = model.vocab.encode(&item.question, names)?;
        let targets: Vec<&str> = item.subjects.iter().map(|s| s.as_str()).collect();
        let query = model.assemble_query(&q_ids, &targets)?;
        let out = model.forward(&mut tape, &leaves, &frames, &query, &opts)?;
        let answer_ids = answer_target_ids(model, item, names)?;
        let scored = tape.slice_rows(out.logits, 0, answer_ids.len())?;
        let ce = tape.cross_entropy(scored, &answer_ids)?;
        lm_terms.push(ce);
        for lr in out.routed {
            layer_scores.entry(lr.layer).or_default().push(lr.scores);
        }
    }

    let mut lm = lm_terms[0];
    for &t in &lm_terms[1..] {
        lm = tape.add(lm, t)?;
    }
    let lm = tape.scale(lm, 1.0 / lm_terms.len() as f64)?;

    let mut total = lm;
    let mut spr_sum = 0.0;
    let mut hae_sum = 0.0;
    let mut layers = Vec::with_capacity(layer_scores.len());
    let mut all_scores: Vec<Val> = Vec::new();
    for (layer, scores_vals) in &layer_scores {
        let scores = if scores_vals.len() == 1 {
            scores_vals[0]
        } else {
            tape.concat_rows(scores_vals)?
        };
        layers.push(LayerTelemetry {
            layer: *layer,
            beta: ctl.state.beta,
            r_s: counted_sparsity(tape.value(scores))?,
        });
        all_scores.push(scores);
    }
    if let Some(&first) = all_scores.first() {
        let scores = if all_scores.len() == 1 {
            first
        } else {
            tape.concat_rows(&all_scores)?
        };
        let counted = counted_sparsity(tape.value(scores))?;
        let smoothed = ctl.observe(cfg, counted);
        match cfg.losses {
            LossMode::None => {}
            LossMode::SprOnly | LossMode::SprHae => {
                let spr = spr_term(&mut tape, scores, ctl.state.beta)?;
                spr_sum = tape.value(spr).item()?;
                total = tape.add(total, spr)?;
                if cfg.losses == LossMode::SprHae {
                    if let Some(hae) = hae_term(&mut tape, scores, &cfg.sparsity, counted)? {
                        hae_sum = tape.value(hae).item()?;
                        total = tape.add(total, hae)?;
                    }
                }
                ctl.adjust(cfg, smoothed);
            }
        }
    }

    let lm_value = tape.value(lm).item()?;
    let total_value = tape.value(total).item()?;
    if !total_value.is_finite() {
        return Ok(StepOutcome {
            lm: lm_value,
            spr: spr_sum,
            hae: hae_sum,
            total: total_value,
            grad_norm: f64::NAN,
            layers,
        });
    }
    tape.backward(total)?;

    // Global-norm clip over every trainable gradient, then the adaptive
    // per-parameter update.
    let mut sq_norm = 0.0;
    for (id, p) in model.store.iter() {
        if !p.trainable {
            continue;
        }
        if let Some(g) = tape.grad(leaves.val(id)) {
            sq_norm += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let grad_norm = sq_norm.sqrt();
    if !grad_norm.is_finite() {
        return Ok(StepOutcome {
            lm: lm_value,
            spr: spr_sum,
            hae: hae_sum,
            total: total_value,
            grad_norm,
            layers,
        });
    }
    let clip_scale = if grad_norm > cfg.clip_norm {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    };

    let scale = cfg.lr_scale(step);
    for (idx, (id, p)) in model.store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let Some(grads) = tape.grad(leaves.val(id)) else {
            continue;
        };
        let lr = scale * cfg.lr_for(p.group);
        let v = &mut opt.v[idx];
        for ((w, &g_raw), vi) in p.value.values_mut().iter_mut().zip(grads).zip(v.iter_mut()) {
            let g = g_raw * clip_scale;
            *vi = cfg.rms_decay * *vi + (1.0 - cfg.rms_decay) * g * g;
            *w -= lr * g / (vi.sqrt() + cfg.rms_eps);
        }
    }

    Ok(StepOutcome {
        lm: lm_value,
        spr: spr_sum,
        hae: hae_sum,
        total: total_value,
        grad_norm,
        layers,
    })
}
