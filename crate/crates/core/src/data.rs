//! Synthetic clip/QA generation and the on-disk dataset manifest.
//!
//! A "clip" is a short stack of feature frames built from interpretable
//! ingredients: identity patterns (seeded unit vectors) at varying strengths,
//! a scenario basis vector, a motion drift that grows across frames, and
//! gaussian noise. Presence is defined by projection onto an identity's
//! pattern: after construction every frame is corrected until present
//! concepts project at or above `τ + 0.1` and absent concepts at or below
//! `τ − 0.1`, so no clip sits inside the decision margin.
//!
//! Per concept the default composition is 1 anchor positive, 20 context-rich
//! positives (high noise, varied scenes), 20 high-fidelity positives (low
//! noise), 20 hard negatives (a distractor identity with pattern cosine in
//! the configured band, strength capped so the concept stays absent), and 10
//! random negatives. QA pairs are drawn from the template banks; answers for
//! descriptive categories come from the clip's tags and the identity's
//! wardrobe attributes.
//!
//! On disk a dataset is a line-delimited JSON manifest plus one raw
//! little-endian `f64` file per clip; writing is byte-deterministic in the
//! seed and config.

use crate::error::{Error, Result};
use crate::seed::{substream, substream_indexed};
use crate::templates::{self, DescCategory};
use crate::tensor::Tensor;
use crate::vocab::bind;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const CLIP_DIR: &str = "clips";
/// Identity patterns of distinct concepts are redrawn until their mutual
/// cosine falls below this, keeping the recognition task well-posed.
const MAX_CONCEPT_COSINE: f64 = 0.3;
const MARGIN: f64 = 0.1;
const CORRECTION_SLACK: f64 = 0.02;
const MAX_CORRECTION_ROUNDS: usize = 12;

// ── configuration ──

fn default_frames() -> usize {
    8
}
fn default_context_rich() -> usize {
    20
}
fn default_high_fidelity() -> usize {
    20
}
fn default_hard_negatives() -> usize {
    20
}
fn default_random_negatives() -> usize {
    10
}
fn default_qa_per_clip() -> usize {
    18
}
fn default_eval_fraction() -> f64 {
    0.2
}
fn default_presence_threshold() -> f64 {
    0.5
}
fn default_hard_band() -> (f64, f64) {
    (0.7, 0.95)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Concept names, e.g. `["sks1", "sks2"]`; lowercase alphanumeric.
    pub concepts: Vec<String>,
    /// Feature width of each frame; matches the model width.
    pub d_model: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_context_rich")]
    pub context_rich: usize,
    #[serde(default = "default_high_fidelity")]
    pub high_fidelity: usize,
    #[serde(default = "default_hard_negatives")]
    pub hard_negatives: usize,
    #[serde(default = "default_random_negatives")]
    pub random_negatives: usize,
    #[serde(default = "default_qa_per_clip")]
    pub qa_per_clip: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Presence decision threshold τ; margins sit at τ ± 0.1.
    #[serde(default = "default_presence_threshold")]
    pub presence_threshold: f64,
    /// Cosine band for hard-negative distractor patterns.
    #[serde(default = "default_hard_band")]
    pub hard_band: (f64, f64),
}

impl DataConfig {
    pub fn desk_default(concepts: &[&str], d_model: usize) -> Self {
        DataConfig {
            concepts: concepts.iter().map(|s| s.to_string()).collect(),
            d_model,
            frames: default_frames(),
            context_rich: default_context_rich(),
            high_fidelity: default_high_fidelity(),
            hard_negatives: default_hard_negatives(),
            random_negatives: default_random_negatives(),
            qa_per_clip: default_qa_per_clip(),
            eval_fraction: default_eval_fraction(),
            presence_threshold: default_presence_threshold(),
            hard_band: default_hard_band(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::Config("at least one concept is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.concepts {
            validate_concept_name(name)?;
            if !seen.insert(name) {
                return Err(Error::DuplicateConcept(name.clone()));
            }
        }
        if self.d_model < 8 {
            return Err(Error::Config(format!(
                "d_model must be at least 8 for identity patterns, got {}",
                self.d_model
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("clips need at least one frame".into()));
        }
        if self.qa_per_clip == 0 {
            return Err(Error::Config("qa_per_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!(
                "eval_fraction must lie in [0, 1), got {}",
                self.eval_fraction
            )));
        }
        let tau = self.presence_threshold;
        if !(MARGIN + 0.05..=1.0 - MARGIN - 0.05).contains(&tau) {
            return Err(Error::Config(format!(
                "presence_threshold {tau} leaves no room for ±{MARGIN} margins"
            )));
        }
        let (lo, hi) = self.hard_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!(
                "hard-negative cosine band must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn present_floor(&self) -> f64 {
        self.presence_threshold + MARGIN
    }

    pub fn absent_ceiling(&self) -> f64 {
        self.presence_threshold - MARGIN
    }
}

pub fn validate_concept_name(name: &str) -> Result<()> {
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
    {
        return Err(Error::InvalidConceptName(name.to_string()));
    }
    Ok(())
}

// ── identities ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentitySignature {
    pub name: String,
    /// Unit-norm feature pattern.
    pub pattern: Vec<f64>,
    /// Index into [`templates::COLORS`].
    pub color: usize,
    /// Index into [`templates::GARMENTS`].
    pub garment: usize,
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic identity for a name under a data seed.
pub fn identity_signature(data_seed: u64, name: &str, d: usize) -> Result<IdentitySignature> {
    validate_concept_name(name)?;
    let mut rng = substream(data_seed, &format!("identity:{name}"));
    Ok(IdentitySignature {
        name: name.to_string(),
        pattern: unit_vector(d, &mut rng),
        color: rng.random_range(0..templates::COLORS.len()),
        garment: rng.random_range(0..templates::GARMENTS.len()),
    })
}

/// Distractor identity for hard negatives: pattern cosine to `target` drawn
/// from `band`, wardrobe of its own. The returned strength cap keeps the
/// target's frame projection at or below the absent ceiling.
pub fn hard_negative(
    target: &IdentitySignature,
    band: (f64, f64),
    absent_ceiling: f64,
    rng: &mut ChaCha8Rng,
) -> (IdentitySignature, f64, f64) {
    let d = target.pattern.len();
    let cos = rng.random_range(band.0..band.1);
    // Orthonormal completion of the target direction.
    let ortho = loop {
        let raw = unit_vector(d, rng);
        let proj = dot(&raw, &target.pattern);
        let mut o: Vec<f64> = raw
            .iter()
            .zip(&target.pattern)
            .map(|(r, p)| r - proj * p)
            .collect();
        let norm = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut o {
                *x /= norm;
            }
            break o;
        }
    };
    let sin = (1.0 - cos * cos).sqrt();
    let pattern: Vec<f64> = target
        .pattern
        .iter()
        .zip(&ortho)
        .map(|(p, o)| cos * p + sin * o)
        .collect();
    // At strength s the distractor pushes the target projection to s·cos;
    // cap it safely inside the absent region before noise correction.
    let strength = (absent_ceiling - CORRECTION_SLACK) / cos;
    let sig = IdentitySignature {
        name: format!("{}distractor", target.name),
        pattern,
        color: rng.random_range(0..templates::COLORS.len()),
        garment: rng.random_range(0..templates::GARMENTS.len()),
    };
    (sig, cos, strength)
}

// ── clips ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stratum {
    Anchor,
    ContextRich,
    HighFidelity,
    HardNegative,
    RandomNegative,
}

impl Stratum {
    pub fn is_positive(self) -> bool {
        matches!(self, Stratum::Anchor | Stratum::ContextRich | Stratum::HighFidelity)
    }

    fn short(self) -> &'static str {
        match self {
            Stratum::Anchor => "anchor",
            Stratum::ContextRich => "ctx",
            Stratum::HighFidelity => "hifi",
            Stratum::HardNegative => "hard",
            Stratum::RandomNegative => "rand",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clip {
    pub id: String,
    /// Concept whose stratum this clip belongs to.
    pub concept: String,
    pub stratum: Stratum,
    pub split: Split,
    /// Index into [`templates::SCENARIOS`].
    pub scenario: usize,
    /// Index into [`templates::ACTIONS`].
    pub action: usize,
    /// Concept names present in the frames.
    pub present: Vec<String>,
    /// Distractor pattern cosine, for hard negatives.
    pub distractor_cos: Option<f64>,
    #[serde(skip)]
    pub frames: Tensor,
}

impl Clip {
    pub fn contains(&self, concept: &str) -> bool {
        self.present.iter().any(|p| p == concept)
    }
}

/// One identity layered into a clip.
struct Layer<'a> {
    pattern: &'a [f64],
    strength: f64,
}

/// Render frames, then push concept projections out of the margin band.
/// `present`/`absent` list the concepts whose projections are constrained.
#[allow(clippy::too_many_arguments)]
fn render_frames(
    cfg: &DataConfig,
    layers: &[Layer],
    present: &[&IdentitySignature],
    absent: &[&IdentitySignature],
    scenario_vec: &[f64],
    action_vec: &[f64],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let d = cfg.d_model;
    let f_count = cfg.frames;
    let mut frames = Tensor::zeros(f_count, d);
    for f in 0..f_count {
        let drift = if f_count > 1 {
            0.25 * f as f64 / (f_count - 1) as f64
        } else {
            0.0
        };
        let row = frames.row_mut(f);
        for layer in layers {
            for (r, p) in row.iter_mut().zip(layer.pattern) {
                *r += layer.strength * p;
            }
        }
        for (i, r) in row.iter_mut().enumerate() {
            *r += 0.3 * scenario_vec[i] + drift * action_vec[i];
            let n: f64 = StandardNormal.sample(rng);
            *r += noise_sigma * n;
        }
    }

    let floor = cfg.present_floor();
    let ceil = cfg.absent_ceiling();
    for f in 0..f_count {
        let row = frames.row_mut(f);
        let mut settled = false;
        for _ in 0..MAX_CORRECTION_ROUNDS {
            let mut moved = false;
            for id in present {
                let proj = dot(row, &id.pattern);
                if proj < floor {
                    let delta = floor - proj + CORRECTION_SLACK;
                    for (r, p) in row.iter_mut().zip(&id.pattern) {
                        *r += delta * p;
                    }
                    moved = true;
                }
            }
            for id in absent {
                let proj = dot(row, &id.pattern);
                if proj > ceil {
                    let delta = ceil - proj - CORRECTION_SLACK;
                    for (r, p) in row.iter_mut().zip(&id.pattern) {
                        *r += delta * p;
                    }
                    moved = true;
                }
            }
            if !moved {
                settled = true;
                break;
            }
        }
        if !settled {
            return Err(Error::Generation(format!(
                "frame {f} projections failed to settle within {MAX_CORRECTION_ROUNDS} correction rounds"
            )));
        }
    }
    Ok(frames)
}

// ── QA items ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaCategory {
    Existence,
    Action,
    Appearance,
    Location,
}

impl From<DescCategory> for QaCategory {
    fn from(c: DescCategory) -> Self {
        match c {
            DescCategory::Action => QaCategory::Action,
            DescCategory::Appearance => QaCategory::Appearance,
            DescCategory::Location => QaCategory::Location,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QaItem {
    pub clip_id: String,
    pub category: QaCategory,
    pub polarity: Polarity,
    /// Concept names referenced by the question, in binding order.
    pub subjects: Vec<String>,
    pub question: String,
    pub answer: String,
}

/// Build one QA pair for `clip` from the addressed template row.
///
/// For `Existence` with two subjects the first must be the present one (or
/// both absent); descriptive categories need their single subject present.
pub fn qa_from_template(
    clip: &Clip,
    identities: &[IdentitySignature],
    category: QaCategory,
    subjects: &[String],
    row: usize,
) -> Result<QaItem> {
    let find = |name: &String| {
        identities
            .iter()
            .find(|i| &i.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.clone()))
    };
    match (category, subjects) {
        (QaCategory::Existence, [single]) => {
            find(single)?;
            let q = templates::EXIST_Q
                .get(row)
                .ok_or_else(|| Error::Template(format!("existence row {row} out of range")))?;
            let present = clip.contains(single);
            let a = if present {
                templates::EXIST_YES[row]
            } else {
                templates::EXIST_NO[row]
            };
            Ok(QaItem {
                clip_id: clip.id.clone(),
                category,
                polarity: if present {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
                subjects: subjects.to_vec(),
                question: bind(q, &[single.as_str()])?,
                answer: bind(a, &[single.as_str()])?,
            })
        }
        (QaCategory::Existence, [first, second]) => {
            find(first)?;
            find(second)?;
            let p1 = clip.contains(first);
            let p2 = clip.contains(second);
            let names = [first.as_str(), second.as_str()];
            let (q, a, polarity) = match (p1, p2) {
                (true, true) => {
                    let q = templates::EXIST2_Q.get(row).ok_or_else(|| {
                        Error::Template(format!("two-entity row {row} out of range"))
                    })?;
                    (*q, templates::EXIST2_BOTH_YES[row], Polarity::Positive)
                }
                (true, false) => {
                    let q = templates::EXIST2_Q
                        .get(row)
                        .filter(|_| row < templates::EXIST2_MIXED.len())
                        .ok_or_else(|| {
                            Error::Template(format!("mixed row {row} out of range"))
                        })?;
                    (*q, templates::EXIST2_MIXED[row], Polarity::Mixed)
                }
                (false, false) => {
                    let q = templates::EXIST2_Q
                        .get(row)
                        .filter(|_| row < templates::EXIST2_BOTH_NO.len())
                        .ok_or_else(|| {
                            Error::Template(format!("both-no row {row} out of range"))
                        })?;
                    (*q, templates::EXIST2_BOTH_NO[row], Polarity::Negative)
                }
                (false, true) => {
                    return Err(Error::Template(
                        "two-entity existence binds the present concept first".into(),
                    ))
                }
            };
            Ok(QaItem {
                clip_id: clip.id.clone(),
                category,
                polarity,
                subjects: subjects.to_vec(),
                question: bind(q, &names)?,
                answer: bind(a, &names)?,
            })
        }
        (QaCategory::Existence, _) => Err(Error::Template(format!(
            "existence templates take one or two subjects, got {}",
            subjects.len()
        ))),
        (desc, [single]) => {
            let id = find(single)?;
            if !clip.contains(single) {
                return Err(Error::Template(format!(
                    "descriptive question about {single:?} requires presence in clip {:?}",
                    clip.id
                )));
            }
            let cat = match desc {
                QaCategory::Action => DescCategory::Action,
                QaCategory::Appearance => DescCategory::Appearance,
                QaCategory::Location => DescCategory::Location,
                QaCategory::Existence => unreachable!("matched above"),
            };
            let rows: Vec<usize> = templates::desc_rows(cat).collect();
            let q_idx = *rows
                .get(row)
                .ok_or_else(|| Error::Template(format!("{cat:?} row {row} out of range")))?;
            let answer_t = match cat {
                DescCategory::Action => templates::ACTION_ANSWER
                    .replace("<action>", templates::ACTIONS[clip.action]),
                DescCategory::Appearance => templates::APPEARANCE_ANSWER
                    .replace("<color>", templates::COLORS[id.color])
                    .replace("<garment>", templates::GARMENTS[id.garment]),
                DescCategory::Location => templates::LOCATION_ANSWER
                    .replace("<scenario>", templates::SCENARIOS[clip.scenario]),
            };
            Ok(QaItem {
                clip_id: clip.id.clone(),
                category,
                polarity: Polarity::Positive,
                subjects: subjects.to_vec(),
                question: bind(templates::DESC_Q[q_idx], &[single.as_str()])?,
                answer: bind(&answer_t, &[single.as_str()])?,
            })
        }
        (_, _) => Err(Error::Template(format!(
            "descriptive templates take exactly one subject, got {}",
            subjects.len()
        ))),
    }
}

// ── dataset assembly ──

/// Serialized form is the dataset manifest: everything except the rendered
/// frames, which regenerate bit-exactly from `config` and `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DataConfig,
    pub seed: u64,
    pub identities: Vec<IdentitySignature>,
    pub clips: Vec<Clip>,
    pub train: Vec<QaItem>,
    pub eval: Vec<QaItem>,
}

/// Which training strata feed the train split; evaluation always uses the
/// full eval split so ablation rows stay comparable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StrataSelection {
    pub context_rich: bool,
    pub high_fidelity: bool,
    pub negatives: bool,
}

impl Default for StrataSelection {
    fn default() -> Self {
        StrataSelection {
            context_rich: true,
            high_fidelity: true,
            negatives: true,
        }
    }
}

impl StrataSelection {
    pub fn admits(&self, stratum: Stratum) -> bool {
        match stratum {
            Stratum::Anchor => true,
            Stratum::ContextRich => self.context_rich,
            Stratum::HighFidelity => self.high_fidelity,
            Stratum::HardNegative | Stratum::RandomNegative => self.negatives,
        }
    }
}

impl Dataset {
    pub fn concepts(&self) -> Vec<String> {
        self.config.concepts.clone()
    }

    pub fn clip(&self, id: &str) -> Result<&Clip> {
        self.clips
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::Manifest(format!("unknown clip id {id:?}")))
    }

    /// Train items whose clips fall in the admitted strata.
    pub fn train_subset(&self, sel: StrataSelection) -> Vec<&QaItem> {
        let by_id: HashMap<&str, Stratum> =
            self.clips.iter().map(|c| (c.id.as_str(), c.stratum)).collect();
        self.train
            .iter()
            .filter(|item| by_id.get(item.clip_id.as_str()).is_some_and(|s| sel.admits(*s)))
            .collect()
    }
}

fn eval_marks(count: usize, fraction: f64) -> Vec<bool> {
    // Spread eval picks evenly through the index range rather than taking a
    // contiguous tail, so every stratum's eval slice sees varied scenes. The
    // half-step offset rounds the eval share to nearest and keeps index 0
    // (the anchor, for its stratum) in train whenever fraction < 1/2.
    (0..count)
        .map(|i| {
            let before = (i as f64 * fraction + 0.5).floor();
            let after = ((i + 1) as f64 * fraction + 0.5).floor();
            after > before
        })
        .collect()
}

/// Generate the complete dataset for a config and seed.
pub fn build_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.d_model;

    // Concept identities, redrawn until pairwise separation holds.
    let mut identities: Vec<IdentitySignature> = Vec::new();
    for name in &cfg.concepts {
        let mut sig = identity_signature(seed, name, d)?;
        let mut attempt = 0u64;
        while identities
            .iter()
            .any(|other| dot(&sig.pattern, &other.pattern).abs() > MAX_CONCEPT_COSINE)
        {
            attempt += 1;
            if attempt > 64 {
                return Err(Error::Generation(format!(
                    "could not separate identity pattern for {name:?}"
                )));
            }
            let mut rng = substream_indexed(seed, &format!("identity-redraw:{name}"), attempt);
            sig.pattern = unit_vector(d, &mut rng);
        }
        identities.push(sig);
    }

    let scenario_vecs: Vec<Vec<f64>> = (0..templates::SCENARIOS.len())
        .map(|i| {
            let mut rng = substream_indexed(seed, "scenario", i as u64);
            unit_vector(d, &mut rng)
        })
        .collect();
    let action_vecs: Vec<Vec<f64>> = (0..templates::ACTIONS.len())
        .map(|i| {
            let mut rng = substream_indexed(seed, "action", i as u64);
            unit_vector(d, &mut rng)
        })
        .collect();

    let mut clips: Vec<Clip> = Vec::new();
    let mut clip_counter = 0u64;
    for (ci, concept) in cfg.concepts.iter().enumerate() {
        let target = identities[ci].clone();
        let absent_ids: Vec<&IdentitySignature> = identities
            .iter()
            .filter(|i| i.name != target.name)
            .collect();
        let strata: Vec<(Stratum, usize, f64)> = vec![
            (Stratum::Anchor, 1, 0.02),
            (Stratum::ContextRich, cfg.context_rich, 0.15),
            (Stratum::HighFidelity, cfg.high_fidelity, 0.04),
            (Stratum::HardNegative, cfg.hard_negatives, 0.10),
            (Stratum::RandomNegative, cfg.random_negatives, 0.10),
        ];
        for (stratum, count, sigma) in strata {
            let marks = eval_marks(count, cfg.eval_fraction);
            for (k, &mark) in marks.iter().enumerate() {
                let mut rng = substream_indexed(seed, "clip", clip_counter);
                clip_counter += 1;
                let scenario = rng.random_range(0..templates::SCENARIOS.len());
                let action = rng.random_range(0..templates::ACTIONS.len());
                let mut distractor_cos = None;

                let (layers_owned, present_names): (Vec<(Vec<f64>, f64)>, Vec<String>) =
                    match stratum {
                        s if s.is_positive() => {
                            let strength = match s {
                                Stratum::ContextRich => rng.random_range(0.7..1.0),
                                _ => rng.random_range(0.8..1.0),
                            };
                            (
                                vec![(target.pattern.clone(), strength)],
                                vec![target.name.clone()],
                            )
                        }
                        Stratum::HardNegative => {
                            let (sig, cos, strength) = hard_negative(
                                &target,
                                cfg.hard_band,
                                cfg.absent_ceiling(),
                                &mut rng,
                            );
                            distractor_cos = Some(cos);
                            (vec![(sig.pattern, strength)], vec![])
                        }
                        _ => {
                            // Random negative: an unrelated identity at full
                            // strength.
                            let pattern = unit_vector(d, &mut rng);
                            let strength = rng.random_range(0.7..1.0);
                            (vec![(pattern, strength)], vec![])
                        }
                    };
                let layers: Vec<Layer> = layers_owned
                    .iter()
                    .map(|(p, s)| Layer {
                        pattern: p,
                        strength: *s,
                    })
                    .collect();
                let present_refs: Vec<&IdentitySignature> = identities
                    .iter()
                    .filter(|i| present_names.contains(&i.name))
                    .collect();
                let mut absent_refs: Vec<&IdentitySignature> = absent_ids.clone();
                if !present_names.contains(&target.name) {
                    absent_refs.push(&target);
                }

                let frames = render_frames(
                    cfg,
                    &layers,
                    &present_refs,
                    &absent_refs,
                    &scenario_vecs[scenario],
                    &action_vecs[action],
                    sigma,
                    &mut rng,
                )?;
                clips.push(Clip {
                    id: format!("{}-{}-{:03}", concept, stratum.short(), k),
                    concept: concept.clone(),
                    stratum,
                    split: if mark { Split::Eval } else { Split::Train },
                    scenario,
                    action,
                    present: present_names,
                    distractor_cos,
                    frames,
                });
            }
        }
    }

    // QA expansion.
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (k, clip) in clips.iter().enumerate() {
        let mut rng = substream_indexed(seed, "qa", k as u64);
        let items = clip_qa(clip, cfg, &identities, &mut rng)?;
        match clip.split {
            Split::Train => train.extend(items),
            Split::Eval => eval.extend(items),
        }
    }

    Ok(Dataset {
        config: cfg.clone(),
        seed,
        identities,
        clips,
        train,
        eval,
    })
}

/// Category cycle for one clip's QA expansion.
fn qa_pattern(clip: &Clip, two_entity_possible: bool) -> Vec<(QaCategory, bool)> {
    // (category, two_entity)
    if clip.stratum.is_positive() {
        let mut base = vec![(QaCategory::Existence, false); 8];
        base.extend(vec![(QaCategory::Existence, two_entity_possible); 2]);
        base.extend(vec![(QaCategory::Appearance, false); 3]);
        base.extend(vec![(QaCategory::Action, false); 3]);
        base.extend(vec![(QaCategory::Location, false); 2]);
        base
    } else {
        let mut base = vec![(QaCategory::Existence, false); 14];
        base.extend(vec![(QaCategory::Existence, two_entity_possible); 4]);
        base
    }
}

fn clip_qa(
    clip: &Clip,
    cfg: &DataConfig,
    identities: &[IdentitySignature],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<QaItem>> {
    let concepts = &cfg.concepts;
    let two_possible = concepts.len() >= 2;
    let pattern = qa_pattern(clip, two_possible);
    let mut items = Vec::with_capacity(cfg.qa_per_clip);
    for j in 0..cfg.qa_per_clip {
        let (category, two) = pattern[j % pattern.len()];
        let item = match (category, two) {
            (QaCategory::Existence, false) => {
                let row = rng.random_range(0..templates::EXIST_Q.len());
                qa_from_template(clip, identities, category, std::slice::from_ref(&clip.concept), row)?
            }
            (QaCategory::Existence, true) => {
                // On positives the stratum concept is the present one; on
                // negatives neither concept appears, so the order is free.
                let other = concepts
                    .iter()
                    .find(|c| **c != clip.concept)
                    .expect("two_entity requires a second concept")
                    .clone();
                let row = rng.random_range(0..templates::EXIST2_MIXED.len());
                let subjects = vec![clip.concept.clone(), other];
                qa_from_template(clip, identities, category, &subjects, row)?
            }
            (desc, _) => {
                let cat = match desc {
                    QaCategory::Action => DescCategory::Action,
                    QaCategory::Appearance => DescCategory::Appearance,
                    QaCategory::Location => DescCategory::Location,
                    QaCategory::Existence => unreachable!(),
                };
                let rows = templates::desc_rows(cat).count();
                let row = rng.random_range(0..rows);
                qa_from_template(clip, identities, desc, std::slice::from_ref(&clip.concept), row)?
            }
        };
        items.push(item);
    }
    Ok(items)
}

// ── manifest I/O ──

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ManifestRecord {
    Header {
        schema_version: u32,
        seed: u64,
        config: DataConfig,
    },
    Identity(IdentitySignature),
    Clip {
        #[serde(flatten)]
        meta: Clip,
        path: String,
    },
    Qa(QaItem),
}

/// Write `manifest.jsonl` plus one raw f64 little-endian file per clip.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join(CLIP_DIR))?;
    let file = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    let mut w = BufWriter::new(file);
    let mut emit = |rec: &ManifestRecord| -> Result<()> {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(&ManifestRecord::Header {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: dataset.seed,
        config: dataset.config.clone(),
    })?;
    for id in &dataset.identities {
        emit(&ManifestRecord::Identity(id.clone()))?;
    }
    for clip in &dataset.clips {
        let rel = format!("{CLIP_DIR}/{}.bin", clip.id);
        emit(&ManifestRecord::Clip {
            meta: clip.clone(),
            path: rel.clone(),
        })?;
        let mut bytes = Vec::with_capacity(clip.frames.len() * 8);
        for v in clip.frames.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&rel), bytes)?;
    }
    for item in dataset.train.iter().chain(&dataset.eval) {
        emit(&ManifestRecord::Qa(item.clone()))?;
    }
    w.flush()?;
    Ok(())
}

/// Load a dataset written by [`write_manifest`].
pub fn read_manifest(dir: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Manifest(format!("cannot open manifest in {dir:?}: {e}")))?;
    let reader = BufReader::new(file);
    let mut header: Option<(u64, DataConfig)> = None;
    let mut identities = Vec::new();
    let mut clips: Vec<Clip> = Vec::new();
    let mut qa: Vec<QaItem> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
        match rec {
            ManifestRecord::Header {
                schema_version,
                seed,
                config,
            } => {
                if schema_version != MANIFEST_SCHEMA_VERSION {
                    return Err(Error::Manifest(format!(
                        "unsupported schema version {schema_version}, expected {MANIFEST_SCHEMA_VERSION}"
                    )));
                }
                if header.is_some() {
                    return Err(Error::Manifest("duplicate header record".into()));
                }
                header = Some((seed, config));
            }
            ManifestRecord::Identity(id) => identities.push(id),
            ManifestRecord::Clip { mut meta, path } => {
                let (_, cfg) = header
                    .as_ref()
                    .ok_or_else(|| Error::Manifest("clip record before header".into()))?;
                let bytes = std::fs::read(dir.join(&path)).map_err(|e| {
                    Error::Manifest(format!("clip file {path:?} unreadable: {e}"))
                })?;
                let expect = cfg.frames * cfg.d_model * 8;
                if bytes.len() != expect {
                    return Err(Error::Manifest(format!(
                        "clip file {path:?} holds {} bytes, expected {expect}",
                        bytes.len()
                    )));
                }
                let values: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
                    .collect();
                meta.frames = Tensor::from_vec(cfg.frames, cfg.d_model, values)?;
                clips.push(meta);
            }
            ManifestRecord::Qa(item) => qa.push(item),
        }
    }
    let (seed, config) = header.ok_or_else(|| Error::Manifest("missing header record".into()))?;
    let split_of: HashMap<&str, Split> =
        clips.iter().map(|c| (c.id.as_str(), c.split)).collect();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for item in qa {
        match split_of.get(item.clip_id.as_str()) {
            Some(Split::Train) => train.push(item),
            Some(Split::Eval) => eval.push(item),
            None => {
                return Err(Error::Manifest(format!(
                    "qa record references unknown clip {:?}",
                    item.clip_id
                )))
            }
        }
    }
    Ok(Dataset {
        config,
        seed,
        identities,
        clips,
        train,
        eval,
    })
}
