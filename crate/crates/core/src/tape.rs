//! Eager reverse-mode autodiff on a Wengert tape.
//!
//! Every op validates shapes, computes its forward value immediately, and
//! appends one node to the tape; [`Tape::backward`] runs the reverse sweep
//! from a scalar output and deposits gradients into each node's tensor. The
//! recorded node list doubles as a replayable computation record:
//! [`Tape::replay_matches`] re-executes the ops and confirms bit-identical
//! forward values.
//!
//! Conventions fixed here and relied on by the gradient checker:
//! * `relu` has derivative 0 at exactly 0;
//! * `min_const` has derivative 0 where the input equals the cap;
//! * `topk_gates` treats the selection as a constant during backward
//!   (straight-through), differentiating only the softmax over the selected
//!   entries.
//!
//! While executing, the tape aggregates a [`KinkStats`]: the smallest distance
//! of any input to a non-differentiable kink (relu at 0, `min_const` at the
//! cap, the top-k selection gap) and a hash of the discrete activation
//! pattern. Finite-difference checks use both to skip coordinates whose
//! secant would straddle a kink.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Val(pub(crate) usize);

impl Val {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Variants carry only static metadata; anything a
/// backward pass needs beyond input/output values is recomputed
/// deterministically from them.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Val, Val),
    Mul(Val, Val),
    Scale(Val, f64),
    /// `k * x + b` elementwise.
    Affine(Val, f64, f64),
    /// Row-broadcast add of a `1×d` bias onto a `T×d` matrix.
    AddRowBias(Val, Val),
    /// Row `i` of a `T×d` matrix scaled by entry `i` of a `T×1` column.
    ScaleRows(Val, Val),
    Matmul(Val, Val),
    Transpose(Val),
    Relu(Val),
    Exp(Val),
    SoftmaxRows(Val),
    /// Fused log-softmax + mean negative log-likelihood over rows.
    CrossEntropy(Val, Vec<usize>),
    ConcatRows(Vec<Val>),
    ConcatCols(Vec<Val>),
    SliceRows(Val, usize, usize),
    SliceCols(Val, usize, usize),
    /// Output row `k` is input row `ids[k]`; backward scatter-adds.
    GatherRows(Val, Vec<usize>),
    SumAll(Val),
    MeanAll(Val),
    /// `min(x, c)` elementwise.
    MinConst(Val, f64),
    /// Per-row `x / sqrt(mean(x^2) + eps)`.
    RmsNormRows(Val, f64),
    /// Per-row: keep the k largest logits (ties to the lower index), softmax
    /// over them, zero elsewhere.
    TopkGates(Val, usize),
}

impl Op {
    pub fn inputs(&self) -> Vec<Val> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Mul(a, b) | AddRowBias(a, b) | ScaleRows(a, b) | Matmul(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Affine(a, _, _)
            | Transpose(a)
            | Relu(a)
            | Exp(a)
            | SoftmaxRows(a)
            | CrossEntropy(a, _)
            | SliceRows(a, _, _)
            | SliceCols(a, _, _)
            | GatherRows(a, _)
            | SumAll(a)
            | MeanAll(a)
            | MinConst(a, _)
            | RmsNormRows(a, _)
            | TopkGates(a, _) => vec![*a],
            ConcatRows(vs) | ConcatCols(vs) => vs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Mul(..) => "mul",
            Scale(..) => "scale",
            Affine(..) => "affine",
            AddRowBias(..) => "add_row_bias",
            ScaleRows(..) => "scale_rows",
            Matmul(..) => "matmul",
            Transpose(..) => "transpose",
            Relu(..) => "relu",
            Exp(..) => "exp",
            SoftmaxRows(..) => "softmax_rows",
            CrossEntropy(..) => "cross_entropy",
            ConcatRows(..) => "concat_rows",
            ConcatCols(..) => "concat_cols",
            SliceRows(..) => "slice_rows",
            SliceCols(..) => "slice_cols",
            GatherRows(..) => "gather_rows",
            SumAll(..) => "sum_all",
            MeanAll(..) => "mean_all",
            MinConst(..) => "min_const",
            RmsNormRows(..) => "rms_norm_rows",
            TopkGates(..) => "topk_gates",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Kink proximity summary for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct KinkStats {
    /// Smallest distance of any kink-op input to its kink; `f64::INFINITY`
    /// when the pass contained no kink ops.
    pub min_margin: f64,
    /// Order-stable hash of every discrete activation decision (relu signs,
    /// min caps, top-k memberships).
    pub pattern_hash: u64,
}

impl KinkStats {
    fn new() -> Self {
        KinkStats {
            min_margin: f64::INFINITY,
            pattern_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    fn absorb_bit(&mut self, bit: bool) {
        self.pattern_hash ^= bit as u64 ^ 0x9e;
        self.pattern_hash = self.pattern_hash.wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn absorb_margin(&mut self, m: f64) {
        if m < self.min_margin {
            self.min_margin = m;
        }
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: KinkStats,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kinks: KinkStats::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Val) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` pass w.r.t. node `v`, if one was kept.
    pub fn grad(&self, v: Val) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn kink_stats(&self) -> KinkStats {
        self.kinks
    }

    // ── node construction ──

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Val> {
        if t.is_empty() {
            return Err(Error::InvalidShape {
                op: "leaf",
                shape: t.shape(),
                detail: "empty tensors are not accepted on the tape".into(),
            });
        }
        Ok(self.push(Op::Leaf, t, requires_grad))
    }

    /// Leaf that never receives a gradient (masks, frozen inputs).
    pub fn constant(&mut self, t: Tensor) -> Result<Val> {
        self.leaf(t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Val {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Val(self.nodes.len() - 1)
    }

    fn check(&self, v: Val, op: &'static str) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::MalformedRecord(format!(
                "{op}: input id {} beyond tape of length {}",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn apply(&mut self, op: Op) -> Result<Val> {
        for v in op.inputs() {
            self.check(v, op.name())?;
        }
        let inputs: Vec<&Tensor> = op.inputs().iter().map(|v| &self.nodes[v.0].value).collect();
        let value = execute(&op, &inputs)?;
        absorb_kinks(&op, &inputs, &mut self.kinks);
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.apply(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.apply(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Val, k: f64) -> Result<Val> {
        self.apply(Op::Scale(a, k))
    }

    pub fn affine(&mut self, a: Val, k: f64, b: f64) -> Result<Val> {
        self.apply(Op::Affine(a, k, b))
    }

    pub fn add_row_bias(&mut self, x: Val, bias: Val) -> Result<Val> {
        self.apply(Op::AddRowBias(x, bias))
    }

    pub fn scale_rows(&mut self, x: Val, s: Val) -> Result<Val> {
        self.apply(Op::ScaleRows(x, s))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.apply(Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Val) -> Result<Val> {
        self.apply(Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Val) -> Result<Val> {
        self.apply(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Val) -> Result<Val> {
        self.apply(Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Val) -> Result<Val> {
        self.apply(Op::SoftmaxRows(a))
    }

    pub fn cross_entropy(&mut self, logits: Val, targets: &[usize]) -> Result<Val> {
        self.apply(Op::CrossEntropy(logits, targets.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Val]) -> Result<Val> {
        self.apply(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        self.apply(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        self.apply(Op::SliceRows(x, start, len))
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Result<Val> {
        self.apply(Op::SliceCols(x, start, len))
    }

    pub fn gather_rows(&mut self, x: Val, ids: &[usize]) -> Result<Val> {
        self.apply(Op::GatherRows(x, ids.to_vec()))
    }

    pub fn sum_all(&mut self, x: Val) -> Result<Val> {
        self.apply(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Val) -> Result<Val> {
        self.apply(Op::MeanAll(x))
    }

    pub fn min_const(&mut self, x: Val, c: f64) -> Result<Val> {
        self.apply(Op::MinConst(x, c))
    }

    pub fn rms_norm_rows(&mut self, x: Val, eps: f64) -> Result<Val> {
        self.apply(Op::RmsNormRows(x, eps))
    }

    pub fn topk_gates(&mut self, logits: Val, k: usize) -> Result<Val> {
        self.apply(Op::TopkGates(logits, k))
    }

    /// `x · Wᵀ + b` for a weight stored out-by-in; the workhorse of every
    /// projection in the lab.
    pub fn affine_map(&mut self, x: Val, w: Val, b: Val) -> Result<Val> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add_row_bias(xw, b)
    }

    // ── backward ──

    /// Reverse sweep from a scalar output. Deposits gradients into the tensor
    /// of every node on a gradient path; leaves without a path keep `None`.
    pub fn backward(&mut self, out: Val) -> Result<()> {
        self.check(out, "backward")?;
        self.validate_topology()?;
        let out_t = &self.nodes[out.0].value;
        if !out_t.is_scalar() {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: out_t.shape(),
                detail: "backward starts from a 1x1 scalar".into(),
            });
        }
        if !out_t.item()?.is_finite() {
            return Err(Error::NonFinite {
                op: "backward",
                detail: format!("output value {}", out_t.item()?),
            });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for id in (0..=out.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            {
                let op = self.nodes[id].op.clone();
                let out_value = &self.nodes[id].value;
                // Inputs all have smaller ids (validated above), so reading
                // them while accumulating into `grads` never aliases.
                let input_vals: Vec<&Tensor> =
                    op.inputs().iter().map(|v| &self.nodes[v.0].value).collect();
                let contribs = vjp(&op, &input_vals, out_value, &g)?;
                for (v, c) in op.inputs().into_iter().zip(contribs) {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => {
                            for (a, x) in acc.iter_mut().zip(&c) {
                                *a += x;
                            }
                        }
                        slot => *slot = Some(c),
                    }
                }
            }
            let gm = self.nodes[id].value.grad_mut();
            gm.copy_from_slice(&g);
        }
        Ok(())
    }

    /// Structural invariant: every node's inputs precede it on the tape.
    fn validate_topology(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            for v in node.op.inputs() {
                if v.0 >= id {
                    return Err(Error::MalformedRecord(format!(
                        "node {id} ({}) depends on node {} which does not precede it",
                        node.op.name(),
                        v.0
                    )));
                }
            }
        }
        Ok(())
    }

    /// Re-execute every recorded op from the leaf values and compare against
    /// the stored forward values bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut replayed: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let inputs: Vec<&Tensor> = op.inputs().iter().map(|v| &replayed[v.0]).collect();
                    execute(op, &inputs)?
                }
            };
            replayed.push(value);
        }
        Ok(self
            .nodes
            .iter()
            .zip(&replayed)
            .all(|(n, r)| bits_equal(&n.value, r)))
    }

    /// Rebuild a tape from raw (op, value) pairs, e.g. a deserialized record.
    /// Validates topology and shape agreement by re-executing non-leaf ops.
    pub fn from_raw_nodes(nodes: Vec<(Op, Tensor)>) -> Result<Tape> {
        let mut tape = Tape::new();
        for (id, (op, value)) in nodes.into_iter().enumerate() {
            for v in op.inputs() {
                if v.0 >= id {
                    return Err(Error::MalformedRecord(format!(
                        "node {id} ({}) depends on node {} which does not precede it",
                        op.name(),
                        v.0
                    )));
                }
            }
            match op {
                Op::Leaf => {
                    tape.leaf(value, true)?;
                }
                op => {
                    let inputs: Vec<&Tensor> =
                        op.inputs().iter().map(|v| &tape.nodes[v.0].value).collect();
                    let recomputed = execute(&op, &inputs)?;
                    if recomputed.shape() != value.shape() {
                        return Err(Error::MalformedRecord(format!(
                            "node {id} ({}) stored shape {:?} but executes to {:?}",
                            op.name(),
                            value.shape(),
                            recomputed.shape()
                        )));
                    }
                    let rg = op.inputs().iter().any(|v| tape.nodes[v.0].requires_grad);
                    tape.push(op, value, rg);
                }
            }
        }
        Ok(tape)
    }
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Deterministic top-k selection: indices of the k largest entries, ties
/// resolved toward the lower index. Returns indices in ascending index order.
fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = idx.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

fn softmax_slice(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

// ── forward execution ──

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

/// Compute one op's forward value. Pure: identical inputs give bit-identical
/// outputs, which is what makes records replayable.
fn execute(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    use Op::*;
    match op {
        Leaf => Err(Error::MalformedRecord(
            "leaf nodes are not executed".into(),
        )),
        Add(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("add", a, b));
            }
            let mut out = a.clone();
            for (o, &x) in out.values_mut().iter_mut().zip(b.values()) {
                *o += x;
            }
            Ok(out)
        }
        Mul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("mul", a, b));
            }
            let mut out = a.clone();
            for (o, &x) in out.values_mut().iter_mut().zip(b.values()) {
                *o *= x;
            }
            Ok(out)
        }
        Scale(_, k) => {
            let mut out = inputs[0].clone();
            for o in out.values_mut() {
                *o *= k;
            }
            Ok(out)
        }
        Affine(_, k, b) => {
            let mut out = inputs[0].clone();
            for o in out.values_mut() {
                *o = k * *o + b;
            }
            Ok(out)
        }
        AddRowBias(..) => {
            let (x, bias) = (inputs[0], inputs[1]);
            if bias.rows() != 1 || bias.cols() != x.cols() {
                return Err(shape_err("add_row_bias", x, bias));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                for (v, b) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
                    *v += b;
                }
            }
            Ok(out)
        }
        ScaleRows(..) => {
            let (x, s) = (inputs[0], inputs[1]);
            if s.cols() != 1 || s.rows() != x.rows() {
                return Err(shape_err("scale_rows", x, s));
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                let f = s.get(r, 0);
                for o in out.row_mut(r) {
                    *o *= f;
                }
            }
            Ok(out)
        }
        Matmul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.cols() != b.rows() {
                return Err(shape_err("matmul", a, b));
            }
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            let mut out = Tensor::zeros(n, m);
            for i in 0..n {
                let arow = a.row(i);
                let orow = out.row_mut(i);
                for (p, &av) in arow.iter().enumerate().take(k) {
                    let brow = b.row(p);
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Ok(out)
        }
        Transpose(..) => {
            let a = inputs[0];
            let mut out = Tensor::zeros(a.cols(), a.rows());
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    out.set(c, r, a.get(r, c));
                }
            }
            Ok(out)
        }
        Relu(..) => {
            let mut out = inputs[0].clone();
            for o in out.values_mut() {
                if *o < 0.0 {
                    *o = 0.0;
                }
            }
            Ok(out)
        }
        Exp(..) => {
            let mut out = inputs[0].clone();
            for o in out.values_mut() {
                *o = o.exp();
            }
            Ok(out)
        }
        SoftmaxRows(..) => {
            let x = inputs[0];
            if !x.all_finite() {
                return Err(Error::NonFinite {
                    op: "softmax_rows",
                    detail: "input contains NaN or infinity".into(),
                });
            }
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = x.row(r);
                softmax_slice(row, out.row_mut(r));
            }
            Ok(out)
        }
        CrossEntropy(_, targets) => {
            let x = inputs[0];
            if targets.len() != x.rows() {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    shape: x.shape(),
                    detail: format!("{} targets for {} rows", targets.len(), x.rows()),
                });
            }
            if !x.all_finite() {
                return Err(Error::NonFinite {
                    op: "cross_entropy",
                    detail: "logits contain NaN or infinity".into(),
                });
            }
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= x.cols() {
                    return Err(Error::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        bound: x.cols(),
                    });
                }
                let row = x.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Ok(Tensor::scalar(total / x.rows() as f64))
        }
        ConcatRows(_) => {
            if inputs.is_empty() {
                return Err(Error::InvalidShape {
                    op: "concat_rows",
                    shape: (0, 0),
                    detail: "no parts".into(),
                });
            }
            let cols = inputs[0].cols();
            if let Some(bad) = inputs.iter().find(|t| t.cols() != cols) {
                return Err(shape_err("concat_rows", inputs[0], bad));
            }
            let rows = inputs.iter().map(|t| t.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in inputs {
                data.extend_from_slice(t.values());
            }
            Tensor::from_vec(rows, cols, data)
        }
        ConcatCols(_) => {
            if inputs.is_empty() {
                return Err(Error::InvalidShape {
                    op: "concat_cols",
                    shape: (0, 0),
                    detail: "no parts".into(),
                });
            }
            let rows = inputs[0].rows();
            if let Some(bad) = inputs.iter().find(|t| t.rows() != rows) {
                return Err(shape_err("concat_cols", inputs[0], bad));
            }
            let cols = inputs.iter().map(|t| t.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let orow = out.row_mut(r);
                let mut at = 0;
                for t in inputs {
                    orow[at..at + t.cols()].copy_from_slice(t.row(r));
                    at += t.cols();
                }
            }
            Ok(out)
        }
        SliceRows(_, start, len) => {
            let x = inputs[0];
            if *len == 0 || start + len > x.rows() {
                return Err(Error::IndexOutOfRange {
                    op: "slice_rows",
                    index: start + len,
                    bound: x.rows(),
                });
            }
            let mut data = Vec::with_capacity(len * x.cols());
            for r in *start..start + len {
                data.extend_from_slice(x.row(r));
            }
            Tensor::from_vec(*len, x.cols(), data)
        }
        SliceCols(_, start, len) => {
            let x = inputs[0];
            if *len == 0 || start + len > x.cols() {
                return Err(Error::IndexOutOfRange {
                    op: "slice_cols",
                    index: start + len,
                    bound: x.cols(),
                });
            }
            let mut out = Tensor::zeros(x.rows(), *len);
            for r in 0..x.rows() {
                out.row_mut(r).copy_from_slice(&x.row(r)[*start..start + len]);
            }
            Ok(out)
        }
        GatherRows(_, ids) => {
            let x = inputs[0];
            if ids.is_empty() {
                return Err(Error::InvalidShape {
                    op: "gather_rows",
                    shape: x.shape(),
                    detail: "empty id list".into(),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * x.cols());
            for &id in ids {
                if id >= x.rows() {
                    return Err(Error::IndexOutOfRange {
                        op: "gather_rows",
                        index: id,
                        bound: x.rows(),
                    });
                }
                data.extend_from_slice(x.row(id));
            }
            Tensor::from_vec(ids.len(), x.cols(), data)
        }
        SumAll(..) => Ok(Tensor::scalar(inputs[0].values().iter().sum())),
        MeanAll(..) => {
            let x = inputs[0];
            Ok(Tensor::scalar(
                x.values().iter().sum::<f64>() / x.len() as f64,
            ))
        }
        MinConst(_, c) => {
            let mut out = inputs[0].clone();
            for o in out.values_mut() {
                if *o > *c {
                    *o = *c;
                }
            }
            Ok(out)
        }
        RmsNormRows(_, eps) => {
            let x = inputs[0];
            let d = x.cols() as f64;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / d;
                let inv = 1.0 / (ms + eps).sqrt();
                for o in out.row_mut(r) {
                    *o *= inv;
                }
            }
            Ok(out)
        }
        TopkGates(_, k) => {
            let x = inputs[0];
            if *k == 0 || *k > x.cols() {
                return Err(Error::InvalidShape {
                    op: "topk_gates",
                    shape: x.shape(),
                    detail: format!("k = {k} outside 1..={}", x.cols()),
                });
            }
            if !x.all_finite() {
                return Err(Error::NonFinite {
                    op: "topk_gates",
                    detail: "logits contain NaN or infinity".into(),
                });
            }
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row(r);
                let chosen = topk_indices(row, *k);
                let z: Vec<f64> = chosen.iter().map(|&i| row[i]).collect();
                let mut p = vec![0.0; z.len()];
                softmax_slice(&z, &mut p);
                for (&i, &pi) in chosen.iter().zip(&p) {
                    out.set(r, i, pi);
                }
            }
            Ok(out)
        }
    }
}

/// Record kink proximity for ops with discrete decisions.
fn absorb_kinks(op: &Op, inputs: &[&Tensor], stats: &mut KinkStats) {
    use Op::*;
    match op {
        Relu(..) => {
            for &v in inputs[0].values() {
                stats.absorb_margin(v.abs());
                stats.absorb_bit(v > 0.0);
            }
        }
        MinConst(_, c) => {
            for &v in inputs[0].values() {
                stats.absorb_margin((v - c).abs());
                stats.absorb_bit(v < *c);
            }
        }
        TopkGates(_, k) => {
            let x = inputs[0];
            for r in 0..x.rows() {
                let row = x.row(r);
                let mut sorted: Vec<f64> = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
                if *k < sorted.len() {
                    stats.absorb_margin(sorted[k - 1] - sorted[*k]);
                }
                let chosen = topk_indices(row, *k);
                let mut member = vec![false; row.len()];
                for &i in &chosen {
                    member[i] = true;
                }
                for b in member {
                    stats.absorb_bit(b);
                }
            }
        }
        _ => {}
    }
}

// ── backward (vector-Jacobian products) ──

/// Gradient contributions of one node to each of its inputs. `g` is the
/// incoming gradient with the node's output shape, flattened row-major.
fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &[f64]) -> Result<Vec<Vec<f64>>> {
    use Op::*;
    Ok(match op {
        Leaf => vec![],
        Add(..) => vec![g.to_vec(), g.to_vec()],
        Mul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = g.iter().zip(b.values()).map(|(gi, bi)| gi * bi).collect();
            let db = g.iter().zip(a.values()).map(|(gi, ai)| gi * ai).collect();
            vec![da, db]
        }
        Scale(_, k) => vec![g.iter().map(|gi| gi * k).collect()],
        Affine(_, k, _) => vec![g.iter().map(|gi| gi * k).collect()],
        AddRowBias(..) => {
            let (x, bias) = (inputs[0], inputs[1]);
            let mut db = vec![0.0; bias.cols()];
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    db[c] += g[r * x.cols() + c];
                }
            }
            vec![g.to_vec(), db]
        }
        ScaleRows(..) => {
            let (x, s) = (inputs[0], inputs[1]);
            let cols = x.cols();
            let mut dx = vec![0.0; x.len()];
            let mut ds = vec![0.0; x.rows()];
            for r in 0..x.rows() {
                let f = s.get(r, 0);
                for c in 0..cols {
                    let gi = g[r * cols + c];
                    dx[r * cols + c] = gi * f;
                    ds[r] += gi * x.get(r, c);
                }
            }
            vec![dx, ds]
        }
        Matmul(..) => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.rows(), a.cols(), b.cols());
            // da = g · bᵀ
            let mut da = vec![0.0; a.len()];
            for i in 0..n {
                for p in 0..k {
                    let brow = b.row(p);
                    let mut acc = 0.0;
                    for (j, &bv) in brow.iter().enumerate().take(m) {
                        acc += g[i * m + j] * bv;
                    }
                    da[i * k + p] = acc;
                }
            }
            // db = aᵀ · g
            let mut db = vec![0.0; b.len()];
            for i in 0..n {
                let arow = a.row(i);
                for (p, &av) in arow.iter().enumerate().take(k) {
                    for j in 0..m {
                        db[p * m + j] += av * g[i * m + j];
                    }
                }
            }
            vec![da, db]
        }
        Transpose(..) => {
            let a = inputs[0];
            let (n, m) = a.shape();
            let mut da = vec![0.0; a.len()];
            for r in 0..m {
                for c in 0..n {
                    da[c * m + r] = g[r * n + c];
                }
            }
            vec![da]
        }
        Relu(..) => vec![inputs[0]
            .values()
            .iter()
            .zip(g)
            .map(|(&x, gi)| if x > 0.0 { *gi } else { 0.0 })
            .collect()],
        Exp(..) => vec![out.values().iter().zip(g).map(|(y, gi)| y * gi).collect()],
        SoftmaxRows(..) => {
            let y = out;
            let cols = y.cols();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yrow = y.row(r);
                let grow = &g[r * cols..(r + 1) * cols];
                let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yrow[c] * (grow[c] - dot);
                }
            }
            vec![dx]
        }
        CrossEntropy(_, targets) => {
            let x = inputs[0];
            let seed = g[0] / x.rows() as f64;
            let mut dx = vec![0.0; x.len()];
            for (r, &t) in targets.iter().enumerate() {
                let row = x.row(r);
                let drow = &mut dx[r * x.cols()..(r + 1) * x.cols()];
                softmax_slice(row, drow);
                drow[t] -= 1.0;
                for d in drow {
                    *d *= seed;
                }
            }
            vec![dx]
        }
        ConcatRows(_) => {
            let mut outp = Vec::with_capacity(inputs.len());
            let mut at = 0;
            for t in inputs {
                outp.push(g[at..at + t.len()].to_vec());
                at += t.len();
            }
            outp
        }
        ConcatCols(_) => {
            let rows = inputs[0].rows();
            let total_cols: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut outp: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.len()]).collect();
            for r in 0..rows {
                let mut at = 0;
                for (t, d) in inputs.iter().zip(outp.iter_mut()) {
                    let src = &g[r * total_cols + at..r * total_cols + at + t.cols()];
                    d[r * t.cols()..(r + 1) * t.cols()].copy_from_slice(src);
                    at += t.cols();
                }
            }
            outp
        }
        SliceRows(_, start, len) => {
            let x = inputs[0];
            let mut dx = vec![0.0; x.len()];
            dx[start * x.cols()..(start + len) * x.cols()].copy_from_slice(g);
            vec![dx]
        }
        SliceCols(_, start, len) => {
            let x = inputs[0];
            let mut dx = vec![0.0; x.len()];
            for r in 0..x.rows() {
                for c in 0..*len {
                    dx[r * x.cols() + start + c] = g[r * len + c];
                }
            }
            vec![dx]
        }
        GatherRows(_, ids) => {
            let x = inputs[0];
            let cols = x.cols();
            let mut dx = vec![0.0; x.len()];
            for (k, &id) in ids.iter().enumerate() {
                let src = &g[k * cols..(k + 1) * cols];
                let dst = &mut dx[id * cols..(id + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![dx]
        }
        SumAll(..) => vec![vec![g[0]; inputs[0].len()]],
        MeanAll(..) => {
            let n = inputs[0].len() as f64;
            vec![vec![g[0] / n; inputs[0].len()]]
        }
        MinConst(_, c) => vec![inputs[0]
            .values()
            .iter()
            .zip(g)
            .map(|(&x, gi)| if x < *c { *gi } else { 0.0 })
            .collect()],
        RmsNormRows(_, eps) => {
            let x = inputs[0];
            let d = x.cols() as f64;
            let cols = x.cols();
            let mut dx = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let row = x.row(r);
                let grow = &g[r * cols..(r + 1) * cols];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
                let rv = (ms + eps).sqrt();
                let dot: f64 = grow.iter().zip(row).map(|(gi, xi)| gi * xi).sum();
                let k = dot / (d * rv * rv * rv);
                for c in 0..cols {
                    dx[r * cols + c] = grow[c] / rv - row[c] * k;
                }
            }
            vec![dx]
        }
        TopkGates(_, k) => {
            let x = inputs[0];
            let cols = x.cols();
            let mut dx = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let row = x.row(r);
                let chosen = topk_indices(row, *k);
                let yrow = out.row(r);
                let grow = &g[r * cols..(r + 1) * cols];
                let dot: f64 = chosen.iter().map(|&i| yrow[i] * grow[i]).sum();
                for &i in &chosen {
                    dx[r * cols + i] = yrow[i] * (grow[i] - dot);
                }
            }
            vec![dx]
        }
    })
}
