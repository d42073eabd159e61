//! The personalized QA model.
//!
//! A query sequence is assembled from per-concept token blocks (delimited by
//! shared `⟨open⟩`/`⟨close⟩` embedding rows), the tokenized question, and a
//! tail of answer slots that are read out in parallel. Clip frames pass
//! through a small residual encoder; the query stream cross-attends to the
//! encoded frames at even-indexed blocks (the routed-attention layers) and
//! runs masked self-attention plus a feed-forward at odd-indexed blocks.
//!
//! Every concept ever registered keeps its block physically in the sequence;
//! a per-sample mask opens only the blocks of the concepts the sample is
//! about. Masked blocks are invisible as attention keys everywhere, which
//! disconnects them from the loss entirely — their tokens receive exactly
//! zero gradient.
//!
//! Parameters live in a [`ParamStore`] under five groups with different
//! training schedules: token-side tables, the routed cross-attention stack,
//! low-rank adapters on the frozen self-attention/feed-forward bases, the
//! frame encoder, and the frozen bases themselves.

use crate::attention::{
    mha_forward, moh_topk_forward, remoh_forward, ActivationTrace, AttnDims, AttnParams,
    AttnWeights, MASK_BIAS,
};
use crate::data::validate_concept_name;
use crate::error::{Error, Result};
use crate::seed::substream;
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;
use crate::vocab::Vocab;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

const RMS_EPS: f64 = 1e-8;
const CHECKPOINT_MAGIC: &[u8; 8] = b"RMOHCKPT";
const CHECKPOINT_VERSION: u32 = 1;

// ── configuration ──

fn default_d_model() -> usize {
    64
}
fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    8
}
fn default_routed_heads() -> usize {
    6
}
fn default_concept_tokens() -> usize {
    16
}
fn default_adapter_rank() -> usize {
    4
}
fn default_frames() -> usize {
    8
}
fn default_ff_mult() -> usize {
    2
}
fn default_encoder_layers() -> usize {
    3
}
fn default_max_concepts() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Block count; even indices cross-attend to frames, odd indices are
    /// self-attention + feed-forward.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_routed_heads")]
    pub routed_heads: usize,
    /// Learnable vectors per registered concept.
    #[serde(default = "default_concept_tokens")]
    pub concept_tokens: usize,
    #[serde(default = "default_adapter_rank")]
    pub adapter_rank: usize,
    /// Toy clip length; temporal embedding rows.
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "default_encoder_layers")]
    pub encoder_layers: usize,
    /// Name-slot capacity reserved in the vocabulary.
    #[serde(default = "default_max_concepts")]
    pub max_concepts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: default_d_model(),
            layers: default_layers(),
            heads: default_heads(),
            routed_heads: default_routed_heads(),
            concept_tokens: default_concept_tokens(),
            adapter_rank: default_adapter_rank(),
            frames: default_frames(),
            ff_mult: default_ff_mult(),
            encoder_layers: default_encoder_layers(),
            max_concepts: default_max_concepts(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<AttnDims> {
        let dims = AttnDims::new(self.d_model, self.heads, self.routed_heads)?;
        if self.layers == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.adapter_rank == 0 || self.adapter_rank > dims.d_k {
            return Err(Error::Config(format!(
                "adapter_rank must lie in 1..={} (the per-head width), got {}",
                dims.d_k, self.adapter_rank
            )));
        }
        if self.frames == 0 || self.ff_mult == 0 || self.encoder_layers == 0 {
            return Err(Error::Config(
                "frames, ff_mult, and encoder_layers must be positive".into(),
            ));
        }
        if self.max_concepts == 0 {
            return Err(Error::Config("max_concepts must be positive".into()));
        }
        Ok(dims)
    }

    /// Even-indexed blocks cross-attend to frames.
    pub fn is_cross_layer(&self, layer: usize) -> bool {
        layer % 2 == 0
    }

    /// Encoder blocks unfrozen in stage 2: the trailing ⌈E/4⌉.
    pub fn stage2_encoder_blocks(&self) -> usize {
        self.encoder_layers.div_ceil(4)
    }
}

// ── parameter store ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Embedding table, positional rows, concept tokens.
    Tokens,
    /// Routed cross-attention weights plus the clip-conditioning projection.
    Remoh,
    /// Low-rank adapters over the frozen bases.
    Adapters,
    /// Frame encoder blocks and the temporal embedding.
    Encoder,
    /// Frozen self-attention and feed-forward bases.
    Base,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Tokens,
        ParamGroup::Remoh,
        ParamGroup::Adapters,
        ParamGroup::Encoder,
        ParamGroup::Base,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Tokens => "tokens",
            ParamGroup::Remoh => "remoh",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Base => "base",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
    pub value: Tensor,
}

/// Ordered, name-indexed parameter collection. Iteration order is insertion
/// order and is the canonical order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        group: ParamGroup,
        trainable: bool,
        value: Tensor,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.to_string(), id.0);
        self.params.push(Param {
            name: name.to_string(),
            group,
            trainable,
            value,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} not found")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Per-group parameter census.
    pub fn census(&self) -> Vec<CensusRow> {
        ParamGroup::ALL
            .iter()
            .map(|&g| {
                let in_group = self.params.iter().filter(|p| p.group == g);
                let mut row = CensusRow {
                    group: g,
                    tensors: 0,
                    elements: 0,
                    trainable_elements: 0,
                };
                for p in in_group {
                    row.tensors += 1;
                    row.elements += p.value.len();
                    if p.trainable {
                        row.trainable_elements += p.value.len();
                    }
                }
                row
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CensusRow {
    pub group: ParamGroup,
    pub tensors: usize,
    pub elements: usize,
    pub trainable_elements: usize,
}

// ── wiring handles ──

#[derive(Debug, Clone)]
struct AttnIds {
    w_q: Vec<ParamId>,
    w_k: Vec<ParamId>,
    w_v: Vec<ParamId>,
    w_o: Vec<ParamId>,
    w_r: Option<ParamId>,
    b_r: Option<ParamId>,
    w_h: Option<ParamId>,
    b_h: Option<ParamId>,
}

impl AttnIds {
    fn resolve(store: &ParamStore, prefix: &str, dims: &AttnDims) -> Result<Self> {
        let h = dims.heads();
        let fam = |f: &str| -> Result<Vec<ParamId>> {
            (0..h)
                .map(|i| store.id(&format!("{prefix}.{f}.{i}")))
                .collect()
        };
        let opt = |n: &str| -> Result<Option<ParamId>> {
            if dims.routed > 0 {
                Ok(Some(store.id(&format!("{prefix}.{n}"))?))
            } else {
                Ok(None)
            }
        };
        Ok(AttnIds {
            w_q: fam("w_q")?,
            w_k: fam("w_k")?,
            w_v: fam("w_v")?,
            w_o: fam("w_o")?,
            w_r: opt("w_r")?,
            b_r: opt("b_r")?,
            w_h: opt("w_h")?,
            b_h: opt("b_h")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct LoraIds {
    down: ParamId,
    up: ParamId,
}

impl LoraIds {
    fn resolve(store: &ParamStore, base: &str) -> Result<Self> {
        Ok(LoraIds {
            down: store.id(&format!("{base}.lora.down"))?,
            up: store.id(&format!("{base}.lora.up"))?,
        })
    }
}

#[derive(Debug, Clone)]
struct SelfLora {
    w_q: Vec<LoraIds>,
    w_k: Vec<LoraIds>,
    w_v: Vec<LoraIds>,
    w_o: Vec<LoraIds>,
}

#[derive(Debug, Clone)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    lora1: LoraIds,
    lora2: LoraIds,
}

#[derive(Debug, Clone)]
enum Block {
    Cross(AttnIds),
    SelfFf {
        attn: AttnIds,
        lora: SelfLora,
        ff: FfIds,
    },
}

#[derive(Debug, Clone)]
struct EncoderIds {
    blocks: Vec<(ParamId, ParamId)>,
    temporal: ParamId,
}

// ── concepts, queries, masks ──

#[derive(Debug, Clone)]
pub struct ConceptProfile {
    pub name: String,
    /// The `N × d_model` token block parameter; `None` for a zero-token
    /// registration, whose block is just the two delimiters.
    pub tokens: Option<ParamId>,
    pub n_tokens: usize,
    /// Embedding-table row of the shared opening delimiter.
    pub delimiter_open: usize,
    pub delimiter_close: usize,
    pub active: bool,
}

/// One position of an assembled query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryToken {
    /// A row of the embedding table (question token, delimiter, padding).
    Embed(usize),
    /// Row `row` of registered concept `concept`'s token block.
    Concept { concept: usize, row: usize },
}

/// Per-position attend/ignore flags plus the block geometry they came from.
#[derive(Debug, Clone)]
pub struct ConceptMask {
    attend: Vec<bool>,
    blocks: Vec<(String, Range<usize>)>,
    question: Range<usize>,
    targets: Vec<String>,
}

impl ConceptMask {
    pub fn len(&self) -> usize {
        self.attend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attend.is_empty()
    }

    pub fn is_open(&self, pos: usize) -> bool {
        self.attend[pos]
    }

    pub fn attend_flags(&self) -> &[bool] {
        &self.attend
    }

    /// Positions of `name`'s block, delimiters included.
    pub fn block(&self, name: &str) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
    }

    pub fn question(&self) -> Range<usize> {
        self.question.clone()
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }
}

/// Assembled query: concept blocks for every registered concept, then the
/// question tokens. Forward pads the question span and appends answer slots.
#[derive(Debug, Clone)]
pub struct AssembledQuery {
    pub tokens: Vec<QueryToken>,
    pub mask: ConceptMask,
}

impl AssembledQuery {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

// ── forward options and outputs ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Ungated multi-head attention on every block.
    Baseline,
    /// Top-k routed gating on cross layers.
    MohTopk,
    /// ReLU-routed gating on cross layers.
    Remoh,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Baseline => "baseline",
            AttentionKind::MohTopk => "moh-topk",
            AttentionKind::Remoh => "remoh",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub kind: AttentionKind,
    /// Active routed heads per token under [`AttentionKind::MohTopk`].
    pub topk: usize,
    /// Add the learned per-frame embedding (requires `frames` rows).
    pub temporal: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            kind: AttentionKind::Remoh,
            topk: 3,
            temporal: false,
        }
    }
}

/// Routing telemetry for one cross layer.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub layer: usize,
    /// Gated scores over the active query rows, `A × m`.
    pub scores: Val,
    /// `[α₁, α₂]` over the active query rows.
    pub alpha: Val,
    pub trace: ActivationTrace,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `answer_slots × vocab` logits.
    pub logits: Val,
    /// One entry per cross layer for the gated kinds; empty under baseline.
    pub routed: Vec<LayerRouting>,
}

/// Tape leaves for every stored parameter, in store order.
#[derive(Debug, Clone)]
pub struct ModelLeaves {
    vals: Vec<Val>,
}

impl ModelLeaves {
    pub fn val(&self, id: ParamId) -> Val {
        self.vals[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Val)> + '_ {
        self.vals.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }
}

// ── the model ──

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dims: AttnDims,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub concepts: Vec<ConceptProfile>,
    pub stage: u8,
    seed: u64,
    dims_self: AttnDims,
    blocks: Vec<Block>,
    encoder: EncoderIds,
    embed: ParamId,
    pos: ParamId,
    cond: ParamId,
    question_span: usize,
    answer_span: usize,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.values_mut() {
        *v = rng.random_range(-scale..scale);
    }
    t
}

/// Build a fresh model with deterministic, per-parameter seeded init.
pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<Model> {
    let dims = cfg.validate()?;
    let dims_self = AttnDims::new(cfg.d_model, cfg.heads, 0)?;
    let vocab = Vocab::build(cfg.max_concepts);
    let d = cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let mut store = ParamStore::new();

    // Token-side tables. Two extra embedding rows hold the delimiters.
    let embed_rows = vocab.size() + 2;
    let question_span = vocab.question_slots();
    let answer_span = vocab.answer_slots();
    {
        let mut rng = substream(seed, "embed.table");
        store.insert(
            "embed.table",
            ParamGroup::Tokens,
            true,
            uniform(embed_rows, d, scale, &mut rng),
        )?;
    }
    {
        let mut rng = substream(seed, "embed.pos");
        store.insert(
            "embed.pos",
            ParamGroup::Tokens,
            true,
            uniform(question_span + answer_span, d, scale, &mut rng),
        )?;
    }
    {
        let mut rng = substream(seed, "cond.w");
        store.insert(
            "cond.w",
            ParamGroup::Remoh,
            true,
            uniform(d, d, scale, &mut rng),
        )?;
    }

    for i in 0..cfg.layers {
        if cfg.is_cross_layer(i) {
            let prefix = format!("blk.{i}.cross");
            let mut rng = substream(seed, &prefix);
            let w = AttnWeights::init(dims, &mut rng);
            for (rel, t) in w.named() {
                store.insert(
                    &format!("{prefix}.{rel}"),
                    ParamGroup::Remoh,
                    true,
                    t.clone(),
                )?;
            }
        } else {
            let prefix = format!("blk.{i}.self");
            let mut rng = substream(seed, &prefix);
            let w = AttnWeights::init(dims_self, &mut rng);
            for (rel, t) in w.named() {
                store.insert(
                    &format!("{prefix}.{rel}"),
                    ParamGroup::Base,
                    false,
                    t.clone(),
                )?;
            }
            for fam in ["w_q", "w_k", "w_v", "w_o"] {
                for h in 0..cfg.heads {
                    let base = format!("{prefix}.{fam}.{h}");
                    let (rows, cols) = store.get(store.id(&base)?).value.shape();
                    let mut rng = substream(seed, &format!("{base}.lora"));
                    store.insert(
                        &format!("{base}.lora.down"),
                        ParamGroup::Adapters,
                        true,
                        uniform(rows, cfg.adapter_rank, scale, &mut rng),
                    )?;
                    store.insert(
                        &format!("{base}.lora.up"),
                        ParamGroup::Adapters,
                        true,
                        Tensor::zeros(cfg.adapter_rank, cols),
                    )?;
                }
            }
            let hidden = cfg.ff_mult * d;
            let mut rng = substream(seed, &format!("blk.{i}.ff"));
            store.insert(
                &format!("blk.{i}.ff.w1"),
                ParamGroup::Base,
                false,
                uniform(hidden, d, scale, &mut rng),
            )?;
            store.insert(
                &format!("blk.{i}.ff.b1"),
                ParamGroup::Base,
                false,
                Tensor::zeros(1, hidden),
            )?;
            store.insert(
                &format!("blk.{i}.ff.w2"),
                ParamGroup::Base,
                false,
                uniform(d, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng),
            )?;
            store.insert(
                &format!("blk.{i}.ff.b2"),
                ParamGroup::Base,
                false,
                Tensor::zeros(1, d),
            )?;
            for (w_name, rows, cols) in [
                (format!("blk.{i}.ff.w1"), hidden, d),
                (format!("blk.{i}.ff.w2"), d, hidden),
            ] {
                let mut rng = substream(seed, &format!("{w_name}.lora"));
                store.insert(
                    &format!("{w_name}.lora.down"),
                    ParamGroup::Adapters,
                    true,
                    uniform(rows, cfg.adapter_rank, scale, &mut rng),
                )?;
                store.insert(
                    &format!("{w_name}.lora.up"),
                    ParamGroup::Adapters,
                    true,
                    Tensor::zeros(cfg.adapter_rank, cols),
                )?;
            }
        }
    }

    for j in 0..cfg.encoder_layers {
        let mut rng = substream(seed, &format!("enc.{j}"));
        store.insert(
            &format!("enc.{j}.w"),
            ParamGroup::Encoder,
            false,
            uniform(d, d, scale, &mut rng),
        )?;
        store.insert(
            &format!("enc.{j}.b"),
            ParamGroup::Encoder,
            false,
            Tensor::zeros(1, d),
        )?;
    }
    {
        let mut rng = substream(seed, "enc.temporal");
        store.insert(
            "enc.temporal",
            ParamGroup::Encoder,
            false,
            uniform(cfg.frames, d, 0.1, &mut rng),
        )?;
    }

    let mut model = Model {
        dims,
        dims_self,
        vocab,
        concepts: Vec::new(),
        stage: 1,
        seed,
        blocks: Vec::new(),
        encoder: EncoderIds {
            blocks: Vec::new(),
            temporal: ParamId(0),
        },
        embed: ParamId(0),
        pos: ParamId(0),
        cond: ParamId(0),
        question_span,
        answer_span,
        cfg,
        store,
    };
    model.wire()?;
    Ok(model)
}

/// `base + scale·down·up`, the effective weight of an adapted matrix.
pub fn apply_lora(tape: &mut Tape, base: Val, down: Val, up: Val, scale: f64) -> Result<Val> {
    let delta = tape.matmul(down, up)?;
    let scaled = tape.scale(delta, scale)?;
    tape.add(base, scaled)
}

impl Model {
    /// Resolve wiring handles from parameter names; fails if the store is
    /// structurally incomplete (a truncated or foreign checkpoint).
    fn wire(&mut self) -> Result<()> {
        self.embed = self.store.id("embed.table")?;
        self.pos = self.store.id("embed.pos")?;
        self.cond = self.store.id("cond.w")?;
        self.blocks = (0..self.cfg.layers)
            .map(|i| {
                if self.cfg.is_cross_layer(i) {
                    let attn =
                        AttnIds::resolve(&self.store, &format!("blk.{i}.cross"), &self.dims)?;
                    Ok(Block::Cross(attn))
                } else {
                    let prefix = format!("blk.{i}.self");
                    let attn = AttnIds::resolve(&self.store, &prefix, &self.dims_self)?;
                    let fam = |f: &str| -> Result<Vec<LoraIds>> {
                        (0..self.cfg.heads)
                            .map(|h| LoraIds::resolve(&self.store, &format!("{prefix}.{f}.{h}")))
                            .collect()
                    };
                    let lora = SelfLora {
                        w_q: fam("w_q")?,
                        w_k: fam("w_k")?,
                        w_v: fam("w_v")?,
                        w_o: fam("w_o")?,
                    };
                    let ff = FfIds {
                        w1: self.store.id(&format!("blk.{i}.ff.w1"))?,
                        b1: self.store.id(&format!("blk.{i}.ff.b1"))?,
                        w2: self.store.id(&format!("blk.{i}.ff.w2"))?,
                        b2: self.store.id(&format!("blk.{i}.ff.b2"))?,
                        lora1: LoraIds::resolve(&self.store, &format!("blk.{i}.ff.w1"))?,
                        lora2: LoraIds::resolve(&self.store, &format!("blk.{i}.ff.w2"))?,
                    };
                    Ok(Block::SelfFf { attn, lora, ff })
                }
            })
            .collect::<Result<_>>()?;
        self.encoder = EncoderIds {
            blocks: (0..self.cfg.encoder_layers)
                .map(|j| {
                    Ok((
                        self.store.id(&format!("enc.{j}.w"))?,
                        self.store.id(&format!("enc.{j}.b"))?,
                    ))
                })
                .collect::<Result<_>>()?,
            temporal: self.store.id("enc.temporal")?,
        };
        for c in &mut self.concepts {
            c.tokens = if c.n_tokens > 0 {
                Some(self.store.id(&format!("concept.{}.tokens", c.name))?)
            } else {
                None
            };
        }
        Ok(())
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn concept(&self, name: &str) -> Result<&ConceptProfile> {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn question_span(&self) -> usize {
        self.question_span
    }

    pub fn answer_span(&self) -> usize {
        self.answer_span
    }

    /// Combined length of all registered concept blocks.
    pub fn block_span(&self) -> usize {
        self.concepts.iter().map(|c| c.n_tokens + 2).sum()
    }

    /// Full padded sequence length seen by the attention stack.
    pub fn full_len(&self) -> usize {
        self.block_span() + self.question_span + self.answer_span
    }

    /// Positions of the answer slots in the padded sequence.
    pub fn answer_positions(&self) -> Range<usize> {
        let start = self.block_span() + self.question_span;
        start..start + self.answer_span
    }

    /// Register `name` with `n_tokens` fresh trainable vectors. Zero tokens
    /// is a valid degenerate registration: the name stays resolvable and the
    /// block shrinks to its delimiters, which is what a token-count sweep
    /// bottoms out at.
    pub fn register_concept(&mut self, name: &str, n_tokens: usize) -> Result<&ConceptProfile> {
        validate_concept_name(name)?;
        if self.concepts.iter().any(|c| c.name == name) {
            return Err(Error::DuplicateConcept(name.to_string()));
        }
        if self.concepts.len() == self.cfg.max_concepts {
            return Err(Error::Config(format!(
                "concept capacity {} exhausted (raise max_concepts)",
                self.cfg.max_concepts
            )));
        }
        let d = self.cfg.d_model;
        let tokens = if n_tokens > 0 {
            let pname = format!("concept.{name}.tokens");
            let mut rng = substream(self.seed, &pname);
            Some(self.store.insert(
                &pname,
                ParamGroup::Tokens,
                true,
                uniform(n_tokens, d, 1.0 / (d as f64).sqrt(), &mut rng),
            )?)
        } else {
            None
        };
        let v = self.vocab.size();
        self.concepts.push(ConceptProfile {
            name: name.to_string(),
            tokens,
            n_tokens,
            delimiter_open: v,
            delimiter_close: v + 1,
            active: true,
        });
        Ok(self.concepts.last().expect("just pushed"))
    }

    /// Build the query plan: every registered concept's delimited block, then
    /// the question; the mask opens only the blocks of `targets`.
    pub fn assemble_query(
        &self,
        question_ids: &[usize],
        targets: &[&str],
    ) -> Result<AssembledQuery> {
        for t in targets {
            self.concept(t)?;
        }
        if question_ids.len() > self.question_span {
            return Err(Error::Config(format!(
                "question length {} exceeds the fixed span {}",
                question_ids.len(),
                self.question_span
            )));
        }
        let embed_rows = self.vocab.size() + 2;
        for &id in question_ids {
            if id >= embed_rows {
                return Err(Error::IndexOutOfRange {
                    op: "assemble_query",
                    index: id,
                    bound: embed_rows,
                });
            }
        }
        let mut tokens = Vec::new();
        let mut attend = Vec::new();
        let mut blocks = Vec::new();
        for (ci, c) in self.concepts.iter().enumerate() {
            let open = targets.contains(&c.name.as_str());
            let start = tokens.len();
            tokens.push(QueryToken::Embed(c.delimiter_open));
            for row in 0..c.n_tokens {
                tokens.push(QueryToken::Concept { concept: ci, row });
            }
            tokens.push(QueryToken::Embed(c.delimiter_close));
            let end = tokens.len();
            blocks.push((c.name.clone(), start..end));
            attend.extend(std::iter::repeat_n(open, end - start));
        }
        let q_start = tokens.len();
        tokens.extend(question_ids.iter().map(|&id| QueryToken::Embed(id)));
        attend.extend(std::iter::repeat_n(true, question_ids.len()));
        Ok(AssembledQuery {
            tokens,
            mask: ConceptMask {
                attend,
                blocks,
                question: q_start..q_start + question_ids.len(),
                targets: targets.iter().map(|s| s.to_string()).collect(),
            },
        })
    }

    /// One tape leaf per stored parameter, honoring trainable flags.
    pub fn leaves(&self, tape: &mut Tape) -> Result<ModelLeaves> {
        let vals = self
            .store
            .iter()
            .map(|(_, p)| tape.leaf(p.value.clone(), p.trainable))
            .collect::<Result<_>>()?;
        Ok(ModelLeaves { vals })
    }

    fn attn_params(&self, leaves: &ModelLeaves, ids: &AttnIds) -> AttnParams {
        AttnParams {
            w_q: ids.w_q.iter().map(|&i| leaves.val(i)).collect(),
            w_k: ids.w_k.iter().map(|&i| leaves.val(i)).collect(),
            w_v: ids.w_v.iter().map(|&i| leaves.val(i)).collect(),
            w_o: ids.w_o.iter().map(|&i| leaves.val(i)).collect(),
            w_r: ids.w_r.map(|i| leaves.val(i)),
            b_r: ids.b_r.map(|i| leaves.val(i)),
            w_h: ids.w_h.map(|i| leaves.val(i)),
            b_h: ids.b_h.map(|i| leaves.val(i)),
        }
    }

    /// Self-attention params with adapters folded into effective weights.
    fn adapted_attn_params(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        ids: &AttnIds,
        lora: &SelfLora,
    ) -> Result<AttnParams> {
        let adapt = |tape: &mut Tape, base: &[ParamId], l: &[LoraIds]| -> Result<Vec<Val>> {
            base.iter()
                .zip(l)
                .map(|(&b, lr)| {
                    apply_lora(tape, leaves.val(b), leaves.val(lr.down), leaves.val(lr.up), 1.0)
                })
                .collect()
        };
        Ok(AttnParams {
            w_q: adapt(tape, &ids.w_q, &lora.w_q)?,
            w_k: adapt(tape, &ids.w_k, &lora.w_k)?,
            w_v: adapt(tape, &ids.w_v, &lora.w_v)?,
            w_o: adapt(tape, &ids.w_o, &lora.w_o)?,
            w_r: None,
            b_r: None,
            w_h: None,
            b_h: None,
        })
    }

    fn encode_frames(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        clip: Val,
        temporal: bool,
    ) -> Result<Val> {
        let mut h = clip;
        for &(w, b) in &self.encoder.blocks {
            let n = tape.rms_norm_rows(h, RMS_EPS)?;
            let a = tape.affine_map(n, leaves.val(w), leaves.val(b))?;
            let r = tape.relu(a)?;
            h = tape.add(h, r)?;
        }
        if temporal {
            h = tape.add(h, leaves.val(self.encoder.temporal))?;
        }
        Ok(h)
    }

    /// Embed the padded sequence: concept blocks, question + padding with
    /// positional rows, answer slots, plus the broadcast clip conditioning.
    fn embed_sequence(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        query: &AssembledQuery,
        enc: Val,
    ) -> Result<Val> {
        let embed = leaves.val(self.embed);
        let end_id = self.vocab.end_id();

        let mut pieces = Vec::new();
        for (ci, c) in self.concepts.iter().enumerate() {
            let open = tape.gather_rows(embed, &[c.delimiter_open])?;
            pieces.push(open);
            if let Some(id) = c.tokens {
                pieces.push(leaves.val(id));
            }
            let close = tape.gather_rows(embed, &[c.delimiter_close])?;
            pieces.push(close);
            debug_assert_eq!(
                query.mask.blocks[ci].1.len(),
                c.n_tokens + 2,
                "query was assembled against a different concept set"
            );
        }
        // Question, padding, and answer-slot fillers in one gather.
        let mut tail_ids = Vec::with_capacity(self.question_span + self.answer_span);
        for t in &query.tokens[query.mask.question().start..] {
            match t {
                QueryToken::Embed(id) => tail_ids.push(*id),
                QueryToken::Concept { .. } => {
                    return Err(Error::Config(
                        "concept tokens cannot appear inside the question span".into(),
                    ))
                }
            }
        }
        tail_ids.resize(self.question_span + self.answer_span, end_id);
        let tail = tape.gather_rows(embed, &tail_ids)?;
        pieces.push(tail);
        let seq = tape.concat_rows(&pieces)?;

        // Positional rows cover the question + answer tail only; concept
        // blocks are already position-specific learned content.
        let block_span = self.block_span();
        let pos = leaves.val(self.pos);
        let pos_full = if block_span > 0 {
            let zeros = tape.constant(Tensor::zeros(block_span, self.cfg.d_model))?;
            tape.concat_rows(&[zeros, pos])?
        } else {
            pos
        };
        let x = tape.add(seq, pos_full)?;

        // Broadcast pooled clip features into every position so the routers
        // and the readout see clip-dependent input from the first block on.
        let f = tape.value(enc).rows();
        let ones = tape.constant(Tensor::filled(1, f, 1.0 / f as f64))?;
        let pooled = tape.matmul(ones, enc)?;
        let cond_w = leaves.val(self.cond);
        let cond_t = tape.transpose(cond_w)?;
        let cond = tape.matmul(pooled, cond_t)?;
        tape.add_row_bias(x, cond)
    }

    /// Full-sequence attend flags: assembled mask, then closed padding, then
    /// open answer slots.
    fn full_attend(&self, query: &AssembledQuery) -> Vec<bool> {
        let mut attend = query.mask.attend_flags().to_vec();
        let q_len = query.mask.question().len();
        attend.extend(std::iter::repeat_n(false, self.question_span - q_len));
        attend.extend(std::iter::repeat_n(true, self.answer_span));
        attend
    }

    fn self_mask_bias(&self, attend: &[bool]) -> Tensor {
        let n = attend.len();
        let mut m = Tensor::zeros(n, n);
        for (j, &open) in attend.iter().enumerate() {
            if !open {
                for i in 0..n {
                    m.set(i, j, MASK_BIAS);
                }
            }
        }
        m
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        clip: &Tensor,
        query: &AssembledQuery,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        if clip.cols() != self.cfg.d_model || clip.rows() == 0 {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: clip.shape(),
                detail: format!("clip must be F × {}", self.cfg.d_model),
            });
        }
        if opts.temporal && clip.rows() != self.cfg.frames {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: clip.shape(),
                detail: format!(
                    "temporal encoding expects exactly {} frames",
                    self.cfg.frames
                ),
            });
        }
        if query.len() != self.block_span() + query.mask.question().len() {
            return Err(Error::Config(
                "assembled query does not match the registered concept blocks".into(),
            ));
        }

        let clip_v = tape.constant(clip.clone())?;
        let enc = self.encode_frames(tape, leaves, clip_v, opts.temporal)?;
        let mut x = self.embed_sequence(tape, leaves, query, enc)?;

        let attend = self.full_attend(query);
        let active: Vec<usize> = attend
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect();
        let self_bias = tape.constant(self.self_mask_bias(&attend))?;

        let mut routed = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Cross(ids) => {
                    let p = self.attn_params(leaves, ids);
                    let n = tape.rms_norm_rows(x, RMS_EPS)?;
                    match opts.kind {
                        AttentionKind::Baseline => {
                            let out = mha_forward(tape, &p, &self.dims, n, enc, None)?;
                            x = tape.add(x, out)?;
                        }
                        AttentionKind::MohTopk => {
                            let r = moh_topk_forward(
                                tape,
                                &p,
                                &self.dims,
                                n,
                                enc,
                                None,
                                Some(&active),
                                opts.topk,
                            )?;
                            x = tape.add(x, r.out)?;
                            routed.push(LayerRouting {
                                layer: i,
                                scores: r.scores,
                                alpha: r.alpha,
                                trace: r.trace,
                            });
                        }
                        AttentionKind::Remoh => {
                            let r = remoh_forward(
                                tape,
                                &p,
                                &self.dims,
                                n,
                                enc,
                                None,
                                Some(&active),
                            )?;
                            x = tape.add(x, r.out)?;
                            routed.push(LayerRouting {
                                layer: i,
                                scores: r.scores,
                                alpha: r.alpha,
                                trace: r.trace,
                            });
                        }
                    }
                }
                Block::SelfFf { attn, lora, ff } => {
                    let p = self.adapted_attn_params(tape, leaves, attn, lora)?;
                    let n = tape.rms_norm_rows(x, RMS_EPS)?;
                    let out =
                        mha_forward(tape, &p, &self.dims_self, n, n, Some(self_bias))?;
                    x = tape.add(x, out)?;

                    let n2 = tape.rms_norm_rows(x, RMS_EPS)?;
                    let w1 = apply_lora(
                        tape,
                        leaves.val(ff.w1),
                        leaves.val(ff.lora1.down),
                        leaves.val(ff.lora1.up),
                        1.0,
                    )?;
                    let w2 = apply_lora(
                        tape,
                        leaves.val(ff.w2),
                        leaves.val(ff.lora2.down),
                        leaves.val(ff.lora2.up),
                        1.0,
                    )?;
                    let h1 = tape.affine_map(n2, w1, leaves.val(ff.b1))?;
                    let h1 = tape.relu(h1)?;
                    let h2 = tape.affine_map(h1, w2, leaves.val(ff.b2))?;
                    x = tape.add(x, h2)?;
                }
            }
        }

        let ans = self.answer_positions();
        let rows = tape.slice_rows(x, ans.start, ans.len())?;
        let normed = tape.rms_norm_rows(rows, RMS_EPS)?;
        let embed = leaves.val(self.embed);
        let text_rows = tape.slice_rows(embed, 0, self.vocab.size())?;
        let readout = tape.transpose(text_rows)?;
        let logits = tape.matmul(normed, readout)?;
        Ok(ForwardOutput { logits, routed })
    }

    /// Switch training stage, updating trainable flags.
    pub fn stage_freeze(&mut self, stage: u8) -> Result<()> {
        if stage != 1 && stage != 2 {
            return Err(Error::Config(format!(
                "stage must be 1 or 2, got {stage}"
            )));
        }
        let unfrozen_from = self.cfg.encoder_layers - self.cfg.stage2_encoder_blocks();
        for (_, p) in self.store.iter_mut() {
            p.trainable = match p.group {
                ParamGroup::Tokens | ParamGroup::Remoh | ParamGroup::Adapters => true,
                ParamGroup::Base => false,
                ParamGroup::Encoder => {
                    if stage == 1 {
                        false
                    } else if p.name == "enc.temporal" {
                        true
                    } else {
                        // "enc.{j}.w" / "enc.{j}.b"
                        p.name
                            .split('.')
                            .nth(1)
                            .and_then(|j| j.parse::<usize>().ok())
                            .is_some_and(|j| j >= unfrozen_from)
                    }
                }
            };
        }
        self.stage = stage;
        Ok(())
    }

    // ── checkpoints ──

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            stage: self.stage,
            seed: self.seed,
            concepts: self
                .concepts
                .iter()
                .map(|c| ConceptMeta {
                    name: c.name.clone(),
                    n_tokens: c.n_tokens,
                    active: c.active,
                })
                .collect(),
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamMeta {
                    name: p.name.clone(),
                    group: p.group,
                    trainable: p.trainable,
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for (_, p) in self.store.iter() {
            for v in p.value.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {path:?}: {e}")))?;
        if bytes.len() < 20 || &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic: not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)
            .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;

        let dims = header.config.validate()?;
        let dims_self = AttnDims::new(header.config.d_model, header.config.heads, 0)?;
        let vocab = Vocab::build(header.config.max_concepts);
        let question_span = vocab.question_slots();
        let answer_span = vocab.answer_slots();

        let mut store = ParamStore::new();
        let mut off = 20 + hlen;
        for m in &header.params {
            let n = m.rows * m.cols;
            let end = off + 8 * n;
            let chunk = bytes.get(off..end).ok_or_else(|| {
                Error::Checkpoint(format!("truncated payload at parameter {:?}", m.name))
            })?;
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunks_exact(8)")))
                .collect();
            store.insert(
                &m.name,
                m.group,
                m.trainable,
                Tensor::from_vec(m.rows, m.cols, values)?,
            )?;
            off = end;
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the declared payload",
                bytes.len() - off
            )));
        }

        let v = vocab.size();
        let concepts = header
            .concepts
            .iter()
            .map(|c| {
                Ok(ConceptProfile {
                    name: c.name.clone(),
                    tokens: if c.n_tokens > 0 {
                        Some(store.id(&format!("concept.{}.tokens", c.name))?)
                    } else {
                        None
                    },
                    n_tokens: c.n_tokens,
                    delimiter_open: v,
                    delimiter_close: v + 1,
                    active: c.active,
                })
            })
            .collect::<Result<_>>()?;

        let mut model = Model {
            cfg: header.config,
            dims,
            dims_self,
            vocab,
            store,
            concepts,
            stage: header.stage,
            seed: header.seed,
            blocks: Vec::new(),
            encoder: EncoderIds {
                blocks: Vec::new(),
                temporal: ParamId(0),
            },
            embed: ParamId(0),
            pos: ParamId(0),
            cond: ParamId(0),
            question_span,
            answer_span,
        };
        model.wire()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ConceptMeta {
    name: String,
    n_tokens: usize,
    active: bool,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
    trainable: bool,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stage: u8,
    seed: u64,
    concepts: Vec<ConceptMeta>,
    params: Vec<ParamMeta>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            layers: 2,
            heads: 4,
            routed_heads: 2,
            concept_tokens: 4,
            adapter_rank: 2,
            frames: 2,
            ff_mult: 2,
            encoder_layers: 2,
            max_concepts: 2,
        }
    }

    fn rand_clip(model: &Model, rows: usize, seed: u64) -> Tensor {
        let mut rng = substream(seed, "clip-fixture");
        let mut t = Tensor::zeros(rows, model.cfg.d_model);
        for v in t.values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    fn question(model: &Model, text: &str) -> Vec<usize> {
        model
            .vocab
            .encode(text, &model.concept_names())
            .expect("fixture question uses bank words")
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        assert!(small_cfg().validate().is_ok());
        let mut c = small_cfg();
        c.routed_heads = 4;
        assert!(c.validate().is_err(), "no shared head left");
        let mut c = small_cfg();
        c.adapter_rank = 5;
        assert!(c.validate().is_err(), "rank above per-head width");
        let mut c = small_cfg();
        c.concept_tokens = 0;
        assert!(c.validate().is_ok(), "a zero-token sweep point is legal");
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let a = build_model(small_cfg(), 3).unwrap();
        let b = build_model(small_cfg(), 3).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.values().iter().zip(pb.value.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", pa.name);
            }
        }
        let c = build_model(small_cfg(), 4).unwrap();
        let same = a
            .store
            .iter()
            .zip(c.store.iter())
            .all(|((_, pa), (_, pc))| pa.value.values() == pc.value.values());
        assert!(!same, "a different seed must move the parameters");
    }

    #[test]
    fn cross_attention_sits_on_even_blocks() {
        let mut cfg = small_cfg();
        cfg.layers = 4;
        let m = build_model(cfg, 1).unwrap();
        let kinds: Vec<bool> = m
            .blocks
            .iter()
            .map(|b| matches!(b, Block::Cross(_)))
            .collect();
        assert_eq!(kinds, vec![true, false, true, false]);
    }

    #[test]
    fn census_matches_closed_form_count() {
        let cfg = small_cfg();
        let m = build_model(cfg.clone(), 9).unwrap();
        let v = m.vocab.size();
        let (d, h, r) = (cfg.d_model, cfg.heads, cfg.adapter_rank);
        let dh = d / h;
        let hidden = cfg.ff_mult * d;
        let qa_span = m.question_span() + m.answer_span();

        let tokens = (v + 2) * d + qa_span * d;
        let cross = 4 * h * dh * d                       // projections
            + cfg.routed_heads * d + cfg.routed_heads    // routed router
            + 2 * d + 2; // head-type router
        let self_base = 4 * h * dh * d + hidden * d + hidden + d * hidden + d;
        let self_lora = 4 * h * (dh * r + r * d) + (hidden * r + r * d) + (d * r + r * hidden);
        let encoder = cfg.encoder_layers * (d * d + d) + cfg.frames * d;
        let remoh = cross + d * d; // one cross block + conditioning
        let expected = tokens + remoh + self_base + self_lora + encoder;
        assert_eq!(m.store.total_elements(), expected);

        let census = m.census_total_by_group();
        assert_eq!(census[&ParamGroup::Tokens], tokens);
        assert_eq!(census[&ParamGroup::Remoh], remoh);
        assert_eq!(census[&ParamGroup::Base], self_base);
        assert_eq!(census[&ParamGroup::Adapters], self_lora);
        assert_eq!(census[&ParamGroup::Encoder], encoder);
    }

    #[test]
    fn register_concept_enforces_rules() {
        let mut m = build_model(small_cfg(), 2).unwrap();
        m.register_concept("sks1", 4).unwrap();
        assert!(matches!(
            m.register_concept("sks1", 4),
            Err(Error::DuplicateConcept(_))
        ));
        assert!(matches!(
            m.register_concept("Bad", 4),
            Err(Error::InvalidConceptName(_))
        ));
        m.register_concept("sks2", 4).unwrap();
        assert!(
            m.register_concept("sks3", 4).is_err(),
            "capacity is max_concepts"
        );
        assert_eq!(m.block_span(), 2 * (4 + 2));
    }

    #[test]
    fn zero_token_concepts_keep_names_resolvable() {
        let mut m = build_model(small_cfg(), 2).unwrap();
        m.register_concept("sks1", 0).unwrap();
        m.register_concept("sks2", 0).unwrap();
        assert_eq!(m.block_span(), 2 * 2, "each block is just its delimiters");
        assert!(m.concept("sks1").unwrap().tokens.is_none());
        assert!(
            m.store.id("concept.sks1.tokens").is_err(),
            "no parameter behind an empty block"
        );

        // The degenerate registration must still run end to end.
        let q = question(&m, "is sks1 in this video?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        assert_eq!(aq.len(), 4 + q.len());
        let mut tape = Tape::new();
        let leaves = m.leaves(&mut tape).unwrap();
        let clip = Tensor::filled(m.cfg.frames, m.cfg.d_model, 0.25);
        let out = m
            .forward(&mut tape, &leaves, &clip, &aq, &ForwardOptions::default())
            .unwrap();
        let logits = tape.value(out.logits);
        assert_eq!(logits.rows(), m.answer_span());
        assert!(logits.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn assembled_lengths_and_mask_geometry() {
        let mut m = build_model(small_cfg(), 5).unwrap();
        let q = question(&m, "is this a video?");
        let empty = m.assemble_query(&q, &[]).unwrap();
        assert_eq!(empty.len(), q.len(), "no concepts → plain question");

        m.register_concept("sks1", 4).unwrap();
        m.register_concept("sks2", 4).unwrap();
        let q = question(&m, "is sks1 in the video?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        assert_eq!(aq.len(), 2 * (4 + 2) + q.len());

        // Only the second block is closed, and it is closed in full.
        let b2 = aq.mask.block("sks2").unwrap();
        assert_eq!(b2.len(), 4 + 2);
        for pos in 0..aq.len() {
            let expect_closed = b2.contains(&pos);
            assert_eq!(aq.mask.is_open(pos), !expect_closed, "position {pos}");
        }
        assert!(matches!(
            m.assemble_query(&q, &["ghost"]),
            Err(Error::UnknownConcept(_))
        ));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut m = build_model(small_cfg(), 6).unwrap();
        m.register_concept("sks1", 4).unwrap();
        let q = question(&m, "is sks1 here?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        let clip = rand_clip(&m, 2, 40);
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let leaves = m.leaves(&mut tape).unwrap();
            let out = m
                .forward(&mut tape, &leaves, &clip, &aq, &ForwardOptions::default())
                .unwrap();
            (tape.value(out.logits).clone(), out.routed.len())
        };
        let (l1, routed) = run(&m);
        let (l2, _) = run(&m);
        assert_eq!(l1.shape(), (m.answer_span(), m.vocab.size()));
        assert_eq!(routed, 1, "one cross layer in the 2-block config");
        for (a, b) in l1.values().iter().zip(l2.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn masked_concept_tokens_get_exactly_zero_gradient() {
        let mut m = build_model(small_cfg(), 7).unwrap();
        m.register_concept("sks1", 4).unwrap();
        m.register_concept("sks2", 4).unwrap();
        let q = question(&m, "is sks1 in this video?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        let clip = rand_clip(&m, 2, 41);

        let mut tape = Tape::new();
        let leaves = m.leaves(&mut tape).unwrap();
        let out = m
            .forward(&mut tape, &leaves, &clip, &aq, &ForwardOptions::default())
            .unwrap();
        let targets = vec![m.vocab.end_id(); m.answer_span()];
        let loss = tape.cross_entropy(out.logits, &targets).unwrap();
        tape.backward(loss).unwrap();

        let a_id = m.concept("sks1").unwrap().tokens.unwrap();
        let b_id = m.concept("sks2").unwrap().tokens.unwrap();
        let ga = tape.grad(leaves.val(a_id)).expect("targeted tokens get grads");
        let gb = tape.grad(leaves.val(b_id)).expect("grad buffer exists");
        assert!(
            ga.iter().any(|&g| g != 0.0),
            "open block must receive gradient"
        );
        assert!(
            gb.iter().all(|&g| g == 0.0),
            "masked block must be gradient-isolated"
        );
    }

    #[test]
    fn lora_zero_up_keeps_base_weight_exact() {
        let mut tape = Tape::new();
        let base = tape
            .leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false)
            .unwrap();
        let down = tape
            .leaf(Tensor::from_rows(&[vec![0.5], vec![0.25]]).unwrap(), true)
            .unwrap();
        let up = tape.leaf(Tensor::zeros(1, 2), true).unwrap();
        let eff = apply_lora(&mut tape, base, down, up, 1.0).unwrap();
        for (a, b) in tape
            .value(eff)
            .values()
            .iter()
            .zip(tape.value(base).values())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frame_permutation_sensitivity_follows_temporal_flag() {
        let mut m = build_model(small_cfg(), 8).unwrap();
        m.register_concept("sks1", 4).unwrap();
        let q = question(&m, "is sks1 here?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        let clip = rand_clip(&m, 2, 42);
        let mut swapped = Tensor::zeros(2, m.cfg.d_model);
        swapped.row_mut(0).copy_from_slice(clip.row(1));
        swapped.row_mut(1).copy_from_slice(clip.row(0));

        let run = |clip: &Tensor, temporal: bool| {
            let mut tape = Tape::new();
            let leaves = m.leaves(&mut tape).unwrap();
            let opts = ForwardOptions {
                temporal,
                ..ForwardOptions::default()
            };
            let out = m.forward(&mut tape, &leaves, clip, &aq, &opts).unwrap();
            tape.value(out.logits).clone()
        };

        let (plain_a, plain_b) = (run(&clip, false), run(&swapped, false));
        let max_diff = plain_a
            .values()
            .iter()
            .zip(plain_b.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff < 1e-9,
            "without temporal encoding frame order is immaterial, diff {max_diff}"
        );

        let (t_a, t_b) = (run(&clip, true), run(&swapped, true));
        let max_diff = t_a
            .values()
            .iter()
            .zip(t_b.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff > 1e-6,
            "temporal encoding must expose frame order, diff {max_diff}"
        );
    }

    #[test]
    fn single_frame_clip_runs_in_static_mode() {
        let mut m = build_model(small_cfg(), 10).unwrap();
        m.register_concept("sks1", 4).unwrap();
        let q = question(&m, "is sks1 here?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        let clip = rand_clip(&m, 1, 43);
        let mut tape = Tape::new();
        let leaves = m.leaves(&mut tape).unwrap();
        assert!(m
            .forward(&mut tape, &leaves, &clip, &aq, &ForwardOptions::default())
            .is_ok());
        // Temporal mode insists on the configured frame count.
        let opts = ForwardOptions {
            temporal: true,
            ..ForwardOptions::default()
        };
        assert!(m.forward(&mut tape, &leaves, &clip, &aq, &opts).is_err());
    }

    #[test]
    fn stage_freeze_flips_the_documented_groups() {
        let mut cfg = small_cfg();
        cfg.encoder_layers = 8;
        let mut m = build_model(cfg, 11).unwrap();
        m.stage_freeze(1).unwrap();
        for (_, p) in m.store.iter() {
            let expect = matches!(
                p.group,
                ParamGroup::Tokens | ParamGroup::Remoh | ParamGroup::Adapters
            );
            assert_eq!(p.trainable, expect, "{} in stage 1", p.name);
        }
        m.stage_freeze(2).unwrap();
        // ⌈8/4⌉ = 2 trailing encoder blocks (6 and 7) plus the temporal rows.
        for (_, p) in m.store.iter() {
            if p.group != ParamGroup::Encoder {
                continue;
            }
            let expect = p.name == "enc.temporal"
                || p.name.starts_with("enc.6.")
                || p.name.starts_with("enc.7.");
            assert_eq!(p.trainable, expect, "{} in stage 2", p.name);
        }
        assert!(m.stage_freeze(3).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = build_model(small_cfg(), 12).unwrap();
        m.register_concept("sks1", 4).unwrap();
        m.register_concept("sks2", 3).unwrap();
        m.stage_freeze(2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();

        assert_eq!(loaded.cfg, m.cfg);
        assert_eq!(loaded.stage, 2);
        assert_eq!(loaded.concept_names(), m.concept_names());
        assert_eq!(loaded.concept("sks2").unwrap().n_tokens, 3);
        for ((_, pa), (_, pb)) in m.store.iter().zip(loaded.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.trainable, pb.trainable);
            for (x, y) in pa.value.values().iter().zip(pb.value.values()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", pa.name);
            }
        }

        // Same forward from the loaded model, bit for bit.
        let q = question(&m, "is sks1 here?");
        let aq = m.assemble_query(&q, &["sks1"]).unwrap();
        let clip = rand_clip(&m, 2, 44);
        let logits = |m: &Model| {
            let mut tape = Tape::new();
            let leaves = m.leaves(&mut tape).unwrap();
            let out = m
                .forward(&mut tape, &leaves, &clip, &aq, &ForwardOptions::default())
                .unwrap();
            tape.value(out.logits).clone()
        };
        for (a, b) in logits(&m).values().iter().zip(logits(&loaded).values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = build_model(small_cfg(), 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));

        let truncated = &bytes[..bytes.len() - 9];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
    }

    impl Model {
        fn census_total_by_group(&self) -> HashMap<ParamGroup, usize> {
            self.store
                .census()
                .into_iter()
                .map(|r| (r.group, r.elements))
                .collect()
        }
    }
}
