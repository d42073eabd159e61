//! Multi-head attention with three gating schemes.
//!
//! All three share the same per-head machinery — scaled dot-product scores,
//! row softmax, value aggregation, per-head output projection — and differ
//! only in how the per-head outputs are combined into the layer output:
//!
//! * [`mha_forward`]: plain sum `Σᵢ Hⁱ·W_Oⁱ` (equivalently the usual
//!   concat-then-project form, see [`mha_forward_concat`]);
//! * [`remoh_forward`]: shared heads weighted by a per-token α₁ and routed
//!   heads by `α₂ · relu(W_r·x + b_r)ᵢ`, where `[α₁, α₂]` is a softmax over a
//!   two-way head-type router. The relu leaves exact zeros, so a routed head
//!   can switch fully off for a token;
//! * [`moh_topk_forward`]: routed heads gated by a per-token top-k softmax
//!   over the router logits (straight-through through the selection), scaled
//!   by the same α₂.
//!
//! Head order is shared heads first, then routed. With zero routed heads the
//! router is bypassed entirely and α₁ is taken as 1, which makes the routed
//! variants reduce to `mha_forward` op for op.

use crate::error::{Error, Result};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Additive score bias for masked keys: finite (softmax rejects non-finite
/// input) but large enough that the masked weight underflows to exactly 0.
pub const MASK_BIAS: f64 = -1e30;

// ── dimensions ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnDims {
    /// Model width of both token streams.
    pub d_in: usize,
    /// Shared heads (always on).
    pub shared: usize,
    /// Routed heads (token-dependent gates).
    pub routed: usize,
    /// Per-head key/query width.
    pub d_k: usize,
    /// Per-head value width.
    pub d_v: usize,
}

impl AttnDims {
    /// Standard layout: `heads` heads of width `d_in / heads`, of which
    /// `routed` are routed.
    pub fn new(d_in: usize, heads: usize, routed: usize) -> Result<Self> {
        if heads == 0 || d_in == 0 {
            return Err(Error::Config(format!(
                "attention needs d_in > 0 and heads > 0, got d_in={d_in}, heads={heads}"
            )));
        }
        if routed >= heads {
            return Err(Error::Config(format!(
                "routed heads ({routed}) must leave at least one shared head (total {heads})"
            )));
        }
        if d_in % heads != 0 {
            return Err(Error::Config(format!(
                "d_in={d_in} not divisible by heads={heads}"
            )));
        }
        let dh = d_in / heads;
        Ok(AttnDims {
            d_in,
            shared: heads - routed,
            routed,
            d_k: dh,
            d_v: dh,
        })
    }

    pub fn heads(&self) -> usize {
        self.shared + self.routed
    }
}

// ── weights ──

/// Owned parameter tensors for one attention layer. Projection weights are
/// stored out-by-in, applied as `x·Wᵀ`.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub dims: AttnDims,
    /// Per head, `d_k × d_in`.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    /// Per head, `d_v × d_in`.
    pub w_v: Vec<Tensor>,
    /// Per head, `d_v × d_in`; head output is `Hⁱ·W_Oⁱᵀ`… stored `d_in × d_v`
    /// transposed-free: we keep `d_v`-in, `d_in`-out as `d_in × d_v` and apply
    /// `Hⁱ·W_Oⁱᵀ` with W stored out-by-in like every other projection.
    pub w_o: Vec<Tensor>,
    /// Routed-head router, `m × d_in` (absent when `routed == 0`).
    pub w_r: Option<Tensor>,
    /// Router bias, `1 × m`.
    pub b_r: Option<Tensor>,
    /// Head-type router, `2 × d_in`.
    pub w_h: Option<Tensor>,
    /// Head-type bias, `1 × 2`.
    pub b_h: Option<Tensor>,
}

fn uniform_init(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.values_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}

impl AttnWeights {
    /// Fresh weights: uniform `±1/√d_in` projections, router bias `+0.1` so
    /// routed gates start mostly (but not uniformly) live, head-type bias 0.
    pub fn init(dims: AttnDims, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dims.d_in as f64).sqrt();
        let h = dims.heads();
        let mk = |rows, rng: &mut ChaCha8Rng| uniform_init(rows, dims.d_in, scale, rng);
        let w_q = (0..h).map(|_| mk(dims.d_k, rng)).collect();
        let w_k = (0..h).map(|_| mk(dims.d_k, rng)).collect();
        let w_v = (0..h).map(|_| mk(dims.d_v, rng)).collect();
        let w_o = (0..h)
            .map(|_| uniform_init(dims.d_in, dims.d_v, scale, rng))
            .collect();
        let (w_r, b_r, w_h, b_h) = if dims.routed > 0 {
            (
                Some(mk(dims.routed, rng)),
                Some(Tensor::filled(1, dims.routed, 0.1)),
                Some(mk(2, rng)),
                Some(Tensor::zeros(1, 2)),
            )
        } else {
            (None, None, None, None)
        };
        AttnWeights {
            dims,
            w_q,
            w_k,
            w_v,
            w_o,
            w_r,
            b_r,
            w_h,
            b_h,
        }
    }

    /// Insert every parameter as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> Result<AttnParams> {
        let lift = |tape: &mut Tape, ts: &[Tensor]| -> Result<Vec<Val>> {
            ts.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
        };
        Ok(AttnParams {
            w_q: lift(tape, &self.w_q)?,
            w_k: lift(tape, &self.w_k)?,
            w_v: lift(tape, &self.w_v)?,
            w_o: lift(tape, &self.w_o)?,
            w_r: self
                .w_r
                .as_ref()
                .map(|t| tape.leaf(t.clone(), trainable))
                .transpose()?,
            b_r: self
                .b_r
                .as_ref()
                .map(|t| tape.leaf(t.clone(), trainable))
                .transpose()?,
            w_h: self
                .w_h
                .as_ref()
                .map(|t| tape.leaf(t.clone(), trainable))
                .transpose()?,
            b_h: self
                .b_h
                .as_ref()
                .map(|t| tape.leaf(t.clone(), trainable))
                .transpose()?,
        })
    }

    /// All parameters with stable layer-relative names, for checkpointing and
    /// optimizer bookkeeping.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.w_q.iter().enumerate() {
            out.push((format!("w_q.{i}"), t));
        }
        for (i, t) in self.w_k.iter().enumerate() {
            out.push((format!("w_k.{i}"), t));
        }
        for (i, t) in self.w_v.iter().enumerate() {
            out.push((format!("w_v.{i}"), t));
        }
        for (i, t) in self.w_o.iter().enumerate() {
            out.push((format!("w_o.{i}"), t));
        }
        if let Some(t) = &self.w_r {
            out.push(("w_r".into(), t));
        }
        if let Some(t) = &self.b_r {
            out.push(("b_r".into(), t));
        }
        if let Some(t) = &self.w_h {
            out.push(("w_h".into(), t));
        }
        if let Some(t) = &self.b_h {
            out.push(("b_h".into(), t));
        }
        out
    }
}

/// Tape handles for one attention layer's parameters.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub w_q: Vec<Val>,
    pub w_k: Vec<Val>,
    pub w_v: Vec<Val>,
    pub w_o: Vec<Val>,
    pub w_r: Option<Val>,
    pub b_r: Option<Val>,
    pub w_h: Option<Val>,
    pub b_h: Option<Val>,
}

// ── traces ──

/// Which routed heads fired for which query tokens in one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationTrace {
    /// One row per counted query token; `rows[t][i]` is true when routed head
    /// `i` produced a strictly positive score for token `t`.
    pub rows: Vec<Vec<bool>>,
}

impl ActivationTrace {
    pub fn from_scores(scores: &Tensor) -> Self {
        ActivationTrace {
            rows: scores
                .iter_rows()
                .map(|row| row.iter().map(|&s| s > 0.0).collect())
                .collect(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.rows.len()
    }

    pub fn heads(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Fraction of counted tokens for which head `i` fired.
    pub fn rate(&self, head: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let live = self.rows.iter().filter(|r| r[head]).count();
        live as f64 / self.rows.len() as f64
    }

    pub fn rates(&self) -> Vec<f64> {
        (0..self.heads()).map(|i| self.rate(i)).collect()
    }

    /// Active routed heads per token.
    pub fn active_counts(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| r.iter().filter(|b| **b).count())
            .collect()
    }

    /// Merge traces from several passes over the same head layout.
    pub fn merged<'a>(traces: impl IntoIterator<Item = &'a ActivationTrace>) -> Self {
        let mut rows = Vec::new();
        for t in traces {
            rows.extend(t.rows.iter().cloned());
        }
        ActivationTrace { rows }
    }
}

// ── forward passes ──

/// Per-head attention context: `softmax(Q·Kᵀ/√d_k (+ mask)) · V`, projected
/// back to `d_in` through the head's output matrix.
fn head_output(
    tape: &mut Tape,
    p: &AttnParams,
    dims: &AttnDims,
    head: usize,
    x1: Val,
    x2: Val,
    mask: Option<Val>,
) -> Result<Val> {
    let q = {
        let wt = tape.transpose(p.w_q[head])?;
        tape.matmul(x1, wt)?
    };
    let k = {
        let wt = tape.transpose(p.w_k[head])?;
        tape.matmul(x2, wt)?
    };
    let v = {
        let wt = tape.transpose(p.w_v[head])?;
        tape.matmul(x2, wt)?
    };
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scaled = tape.scale(raw, 1.0 / (dims.d_k as f64).sqrt())?;
    let biased = match mask {
        Some(m) => tape.add(scaled, m)?,
        None => scaled,
    };
    let attn = tape.softmax_rows(biased)?;
    let ctx = tape.matmul(attn, v)?;
    let wot = tape.transpose(p.w_o[head])?;
    tape.matmul(ctx, wot)
}

fn check_streams(tape: &Tape, dims: &AttnDims, x1: Val, x2: Val) -> Result<()> {
    let (c1, c2) = (tape.value(x1).cols(), tape.value(x2).cols());
    if c1 != dims.d_in || c2 != dims.d_in {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: tape.value(x1).shape(),
            rhs: tape.value(x2).shape(),
        });
    }
    Ok(())
}

/// Standard multi-head attention in summation form: `Σᵢ Hⁱ·W_Oⁱ`.
pub fn mha_forward(
    tape: &mut Tape,
    p: &AttnParams,
    dims: &AttnDims,
    x1: Val,
    x2: Val,
    mask: Option<Val>,
) -> Result<Val> {
    check_streams(tape, dims, x1, x2)?;
    let mut acc: Option<Val> = None;
    for head in 0..dims.heads() {
        let h = head_output(tape, p, dims, head, x1, x2, mask)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, h)?,
            None => h,
        });
    }
    Ok(acc.expect("at least one head by AttnDims validation"))
}

/// The concatenate-then-project form of the same layer: heads' contexts are
/// concatenated and hit with the stacked output matrix. Equal to
/// [`mha_forward`] up to float association (tested to 1e-12).
pub fn mha_forward_concat(
    tape: &mut Tape,
    p: &AttnParams,
    dims: &AttnDims,
    x1: Val,
    x2: Val,
    mask: Option<Val>,
) -> Result<Val> {
    check_streams(tape, dims, x1, x2)?;
    let mut ctxs = Vec::with_capacity(dims.heads());
    for head in 0..dims.heads() {
        let q = {
            let wt = tape.transpose(p.w_q[head])?;
            tape.matmul(x1, wt)?
        };
        let k = {
            let wt = tape.transpose(p.w_k[head])?;
            tape.matmul(x2, wt)?
        };
        let v = {
            let wt = tape.transpose(p.w_v[head])?;
            tape.matmul(x2, wt)?
        };
        let kt = tape.transpose(k)?;
        let raw = tape.matmul(q, kt)?;
        let scaled = tape.scale(raw, 1.0 / (dims.d_k as f64).sqrt())?;
        let biased = match mask {
            Some(m) => tape.add(scaled, m)?,
            None => scaled,
        };
        let attn = tape.softmax_rows(biased)?;
        ctxs.push(tape.matmul(attn, v)?);
    }
    let cat = tape.concat_cols(&ctxs)?;
    // Stacked projection: rows of each head's w_o side by side.
    let wos: Vec<Val> = (0..dims.heads()).map(|h| p.w_o[h]).collect();
    let wo_t: Vec<Val> = wos
        .iter()
        .map(|&w| tape.transpose(w))
        .collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&wo_t)?;
    tape.matmul(cat, stacked)
}

/// Routed-attention outputs shared by the relu and top-k variants.
#[derive(Debug, Clone)]
pub struct RoutedOut {
    pub out: Val,
    /// Gated routed scores for the counted query rows, `A × m`; exact zeros
    /// mark inactive (token, head) pairs.
    pub scores: Val,
    /// `[α₁, α₂]` rows for the counted query rows, `A × 2`.
    pub alpha: Val,
    pub trace: ActivationTrace,
}

fn alpha_cols(tape: &mut Tape, p: &AttnParams, x1: Val) -> Result<(Val, Val, Val)> {
    let w_h = p.w_h.expect("routed layer carries a head-type router");
    let b_h = p.b_h.expect("routed layer carries a head-type bias");
    let logits = tape.affine_map(x1, w_h, b_h)?;
    let alpha = tape.softmax_rows(logits)?;
    let a1 = tape.slice_cols(alpha, 0, 1)?;
    let a2 = tape.slice_cols(alpha, 1, 1)?;
    Ok((alpha, a1, a2))
}

#[allow(clippy::too_many_arguments)]
fn gated_sum(
    tape: &mut Tape,
    p: &AttnParams,
    dims: &AttnDims,
    x1: Val,
    x2: Val,
    mask: Option<Val>,
    a1: Val,
    gates: Val,
) -> Result<Val> {
    let mut acc: Option<Val> = None;
    for head in 0..dims.heads() {
        let h = head_output(tape, p, dims, head, x1, x2, mask)?;
        let gated = if head < dims.shared {
            tape.scale_rows(h, a1)?
        } else {
            let g = tape.slice_cols(gates, head - dims.shared, 1)?;
            tape.scale_rows(h, g)?
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, gated)?,
            None => gated,
        });
    }
    Ok(acc.expect("at least one head by AttnDims validation"))
}

fn counted_rows(tape: &mut Tape, m: Val, counted: Option<&[usize]>) -> Result<Val> {
    match counted {
        Some(rows) => tape.gather_rows(m, rows),
        None => Ok(m),
    }
}

/// ReLU-routed mixture-of-heads attention.
///
/// `counted` restricts the returned scores/alpha/trace to the listed query
/// rows (the live positions of a masked sequence); the layer output always
/// covers every row. With `dims.routed == 0` the routers are bypassed, α₁ is
/// 1, and the result matches [`mha_forward`] exactly.
pub fn remoh_forward(
    tape: &mut Tape,
    p: &AttnParams,
    dims: &AttnDims,
    x1: Val,
    x2: Val,
    mask: Option<Val>,
    counted: Option<&[usize]>,
) -> Result<RoutedOut> {
    check_streams(tape, dims, x1, x2)?;
    if dims.routed == 0 {
        let out = mha_forward(tape, p, dims, x1, x2, mask)?;
        let t1 = tape.value(x1).rows();
        let rows = counted.map_or(t1, <[usize]>::len);
        let alpha = tape.constant(Tensor::from_vec(
            rows,
            2,
            [1.0, 0.0].iter().cycle().take(rows * 2).cloned().collect(),
        )?)?;
        let scores = tape.constant(Tensor::zeros(rows, 1))?;
        return Ok(RoutedOut {
            out,
            scores,
            alpha,
            trace: ActivationTrace { rows: vec![] },
        });
    }

    let (alpha, a1, a2) = alpha_cols(tape, p, x1)?;
    let w_r = p.w_r.expect("routed layer carries a routed router");
    let b_r = p.b_r.expect("routed layer carries a router bias");
    let raw = tape.affine_map(x1, w_r, b_r)?;
    let relu = tape.relu(raw)?;
    let scores = tape.scale_rows(relu, a2)?;

    let out = gated_sum(tape, p, dims, x1, x2, mask, a1, scores)?;
    let scores_counted = counted_rows(tape, scores, counted)?;
    let alpha_counted = counted_rows(tape, alpha, counted)?;
    let trace = ActivationTrace::from_scores(tape.value(scores_counted));
    Ok(RoutedOut {
        out,
        scores: scores_counted,
        alpha: alpha_counted,
        trace,
    })
}

/// Top-k gated baseline: same routers, but each token activates exactly `k`
/// routed heads with softmax-renormalized gates (selection treated as a
/// constant during backward).
#[allow(clippy::too_many_arguments)]
pub fn moh_topk_forward(
    tape: &mut Tape,
    p: &AttnParams,
    dims: &AttnDims,
    x1: Val,
    x2: Val,
    mask: Option<Val>,
    counted: Option<&[usize]>,
    k: usize,
) -> Result<RoutedOut> {
    check_streams(tape, dims, x1, x2)?;
    if dims.routed == 0 {
        return remoh_forward(tape, p, dims, x1, x2, mask, counted);
    }
    if k == 0 || k > dims.routed {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k <= routed heads, got k={k} with {} routed",
            dims.routed
        )));
    }
    let (alpha, a1, a2) = alpha_cols(tape, p, x1)?;
    let w_r = p.w_r.expect("routed layer carries a routed router");
    let b_r = p.b_r.expect("routed layer carries a router bias");
    let raw = tape.affine_map(x1, w_r, b_r)?;
    let gates = tape.topk_gates(raw, k)?;
    let scores = tape.scale_rows(gates, a2)?;

    let out = gated_sum(tape, p, dims, x1, x2, mask, a1, scores)?;
    let scores_counted = counted_rows(tape, scores, counted)?;
    let alpha_counted = counted_rows(tape, alpha, counted)?;
    let trace = ActivationTrace::from_scores(tape.value(scores_counted));
    Ok(RoutedOut {
        out,
        scores: scores_counted,
        alpha: alpha_counted,
        trace,
    })
}

// ── plain-tensor wrappers ──

/// Result of a standalone routed pass on plain tensors.
#[derive(Debug, Clone)]
pub struct RoutedEval {
    pub out: Tensor,
    pub scores: Tensor,
    pub alpha: Tensor,
    pub trace: ActivationTrace,
}

impl AttnWeights {
    pub fn run_mha(&self, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, false)?;
        let x1v = tape.constant(x1.clone())?;
        let x2v = tape.constant(x2.clone())?;
        let out = mha_forward(&mut tape, &p, &self.dims, x1v, x2v, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn run_remoh(&self, x1: &Tensor, x2: &Tensor) -> Result<RoutedEval> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, false)?;
        let x1v = tape.constant(x1.clone())?;
        let x2v = tape.constant(x2.clone())?;
        let r = remoh_forward(&mut tape, &p, &self.dims, x1v, x2v, None, None)?;
        Ok(RoutedEval {
            out: tape.value(r.out).clone(),
            scores: tape.value(r.scores).clone(),
            alpha: tape.value(r.alpha).clone(),
            trace: r.trace,
        })
    }

    pub fn run_moh_topk(&self, x1: &Tensor, x2: &Tensor, k: usize) -> Result<RoutedEval> {
        let mut tape = Tape::new();
        let p = self.leaves(&mut tape, false)?;
        let x1v = tape.constant(x1.clone())?;
        let x2v = tape.constant(x2.clone())?;
        let r = moh_topk_forward(&mut tape, &p, &self.dims, x1v, x2v, None, None, k)?;
        Ok(RoutedEval {
            out: tape.value(r.out).clone(),
            scores: tape.value(r.scores).clone(),
            alpha: tape.value(r.alpha).clone(),
            trace: r.trace,
        })
    }
}
