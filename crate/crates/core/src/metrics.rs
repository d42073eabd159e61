//! Evaluation metrics.
//!
//! Existence questions are scored by polarity: the decoded answer is matched
//! against the yes/no/mixed answer banks by token F1 and the winning bank's
//! polarity is compared with the gold label. Descriptive questions are scored
//! with corpus-free sentence BLEU.

use crate::data::{Dataset, Polarity, QaCategory, QaItem};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tape::Tape;
use crate::templates;
use crate::vocab::{bind, tokenize};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const BLEU_MAX_N: usize = 4;

// ── BLEU ──

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for
/// `n = 1..=max_n`, times the brevity penalty.
///
/// Orders without any hypothesis n-gram are excluded from the mean. A zero
/// match count at order n ≥ 2 is smoothed to `(0+1)/(count+1)`; a zero at
/// n = 1 is not, so disjoint token sets score exactly 0.
pub fn bleu(hypothesis: &[String], reference: &[String], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Config("BLEU needs a nonempty reference".into()));
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU needs max_n ≥ 1".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let hyp = ngram_counts(hypothesis, n);
        if hyp.is_empty() {
            continue;
        }
        let total: usize = hyp.values().sum();
        let refc = ngram_counts(reference, n);
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            if n == 1 {
                return Ok(0.0);
            }
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let precision = (log_sum / orders as f64).exp();
    let (h, r) = (hypothesis.len() as f64, reference.len() as f64);
    let brevity = if h >= r { 1.0 } else { (1.0 - r / h).exp() };
    Ok(precision * brevity)
}

// ── token F1 and polarity ──

/// Multiset token F1 between two token sequences.
pub fn token_f1(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in a {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (a.len() + b.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarityCall {
    pub polarity: Polarity,
    pub f1: f64,
}

/// Classify a decoded answer by its nearest existence-bank row.
///
/// Every bank row that binds the item's subjects competes; the best token-F1
/// row wins and ties stay with the earlier polarity (positive, then negative,
/// then mixed), which keeps the call deterministic.
pub fn classify_polarity(answer: &[String], subjects: &[String]) -> PolarityCall {
    let names: Vec<&str> = subjects.iter().map(|s| s.as_str()).collect();
    let banks: [(Polarity, &[&str]); 5] = [
        (Polarity::Positive, &templates::EXIST_YES),
        (Polarity::Positive, &templates::EXIST2_BOTH_YES),
        (Polarity::Negative, &templates::EXIST_NO),
        (Polarity::Negative, &templates::EXIST2_BOTH_NO),
        (Polarity::Mixed, &templates::EXIST2_MIXED),
    ];
    let mut best = PolarityCall {
        polarity: Polarity::Positive,
        f1: -1.0,
    };
    for (polarity, bank) in banks {
        for row in bank {
            // Rows whose slots don't fit this subject count simply don't
            // compete.
            let Ok(text) = bind(row, &names) else {
                continue;
            };
            let f1 = token_f1(answer, &tokenize(&text));
            if f1 > best.f1 {
                best = PolarityCall { polarity, f1 };
            }
        }
    }
    best
}

/// Fraction of (decoded answer, subjects, gold) triples whose polarity call
/// matches the gold label.
pub fn polarity_tally(items: &[(Vec<String>, Vec<String>, Polarity)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("polarity tally over an empty slice".into()));
    }
    let hits = items
        .iter()
        .filter(|(answer, subjects, gold)| classify_polarity(answer, subjects).polarity == *gold)
        .count();
    Ok(hits as f64 / items.len() as f64)
}

// ── model decoding ──

/// Greedy decode: per-slot argmax over the text vocabulary, cut at `<end>`.
pub fn decode_answer(
    model: &Model,
    clip: &crate::tensor::Tensor,
    item: &QaItem,
    opts: &ForwardOptions,
) -> Result<Vec<String>> {
    let names = model.concept_names();
    let q_ids = model.vocab.encode(&item.question, &names)?;
    let targets: Vec<&str> = item.subjects.iter().map(|s| s.as_str()).collect();
    let query = model.assemble_query(&q_ids, &targets)?;
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape)?;
    let out = model.forward(&mut tape, &leaves, clip, &query, opts)?;
    let logits = tape.value(out.logits);
    let ids: Vec<usize> = logits
        .iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("nonempty vocabulary")
        })
        .collect();
    model.vocab.decode_tokens(&ids, &names)
}

fn clip_for<'d>(ds: &'d Dataset, item: &QaItem) -> Result<&'d crate::data::Clip> {
    ds.clip(&item.clip_id)
}

/// Existence accuracy over the given items.
pub fn eval_existence(
    model: &Model,
    ds: &Dataset,
    items: &[&QaItem],
    opts: &ForwardOptions,
) -> Result<f64> {
    let calls = items
        .iter()
        .filter(|q| q.category == QaCategory::Existence)
        .map(|q| {
            let clip = clip_for(ds, q)?;
            let decoded = decode_answer(model, &clip.frames, q, opts)?;
            Ok((decoded, q.subjects.clone(), q.polarity))
        })
        .collect::<Result<Vec<_>>>()?;
    polarity_tally(&calls)
}

/// Mean sentence BLEU over the given descriptive items.
pub fn eval_bleu(model: &Model, ds: &Dataset, items: &[&QaItem], opts: &ForwardOptions) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for q in items.iter().filter(|q| q.category != QaCategory::Existence) {
        let clip = clip_for(ds, q)?;
        let decoded = decode_answer(model, &clip.frames, q, opts)?;
        sum += bleu(&decoded, &tokenize(&q.answer), BLEU_MAX_N)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("no descriptive items to score".into()));
    }
    Ok(sum / n as f64)
}

// ── reports ──

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: QaCategory,
    pub items: usize,
    /// Accuracy for existence, mean BLEU for the descriptive categories.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub existence_accuracy: f64,
    pub bleu: f64,
    pub per_category: Vec<CategoryScore>,
}

/// Full per-category evaluation of `items`.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    items: &[&QaItem],
    opts: &ForwardOptions,
) -> Result<EvalSummary> {
    if items.is_empty() {
        return Err(Error::Config("evaluation needs a nonempty item slice".into()));
    }
    // Decode each item once; score per category.
    let mut per: HashMap<QaCategory, (usize, f64)> = HashMap::new();
    let mut existence = Vec::new();
    let mut bleu_sum = 0.0;
    let mut bleu_n = 0usize;
    for q in items {
        let clip = clip_for(ds, q)?;
        let decoded = decode_answer(model, &clip.frames, q, opts)?;
        let score = if q.category == QaCategory::Existence {
            let hit =
                classify_polarity(&decoded, &q.subjects).polarity == q.polarity;
            existence.push(hit);
            hit as usize as f64
        } else {
            let b = bleu(&decoded, &tokenize(&q.answer), BLEU_MAX_N)?;
            bleu_sum += b;
            bleu_n += 1;
            b
        };
        let e = per.entry(q.category).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += score;
    }
    if existence.is_empty() {
        return Err(Error::Config("no existence items in the eval slice".into()));
    }
    let mut per_category: Vec<CategoryScore> = per
        .into_iter()
        .map(|(category, (items, sum))| CategoryScore {
            category,
            items,
            score: sum / items as f64,
        })
        .collect();
    per_category.sort_by_key(|c| c.category);
    Ok(EvalSummary {
        existence_accuracy: existence.iter().filter(|h| **h).count() as f64
            / existence.len() as f64,
        bleu: if bleu_n == 0 { 0.0 } else { bleu_sum / bleu_n as f64 },
        per_category,
    })
}

/// The run-level report: evaluation plus training telemetry digests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub eval: EvalSummary,
    /// Total loss per step.
    pub loss_curve: Vec<f64>,
    /// Mean counted activation rate over the final stretch of training.
    pub final_activation_rate: f64,
}
