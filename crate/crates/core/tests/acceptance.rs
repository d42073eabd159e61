//! Release gates for the desk lab, one test per criterion.
//!
//! Every test ends by printing a single `criterion N: PASS — …` line with the
//! measured numbers; run with `--nocapture` to see the tally. The heavyweight
//! criteria (4–7, 10) share four trained models built once in [`FIX`]; the
//! builder runs up to one training per available core, so the wall clock on a
//! multi-core box is close to the slowest single run.

use once_cell::sync::Lazy;
use rand::Rng;
use remoh_core::ablation::{run_ablation, AblationAxis, TOKEN_SWEEP};
use remoh_core::attention::{remoh_forward, AttnDims, AttnParams, AttnWeights};
use remoh_core::data::{build_dataset, DataConfig, Dataset, Polarity, QaCategory, StrataSelection};
use remoh_core::gradcheck::{grad_check, sample_coords};
use remoh_core::heatmap::{activation_heatmap, max_delta_per_layer, mean_delta, HeatmapRow};
use remoh_core::metrics::{
    bleu, classify_polarity, decode_answer, eval_existence, evaluate, polarity_tally, BLEU_MAX_N,
};
use remoh_core::model::{build_model, AttentionKind, ForwardOptions, Model, ModelConfig};
use remoh_core::seed::substream;
use remoh_core::tape::Val;
use remoh_core::templates;
use remoh_core::tensor::Tensor;
use remoh_core::train::{train, LossMode, TrainConfig, TrainReport};
use remoh_core::vocab::{bind, tokenize};
use std::time::{Duration, Instant};

// ── pinned bars ──

/// Gradient fidelity: relative tolerance and FD step (criterion 1).
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_COORDS: usize = 200;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

/// MHA reduction bound and budget (criterion 2).
const MHA_TOL: f64 = 1e-12;
const MHA_INSTANCES: usize = 50;
const MHA_BUDGET: Duration = Duration::from_secs(5);

/// Router contracts (criterion 3).
const ROUTER_TOKENS: usize = 10_000;
const ALPHA_TOL: f64 = 1e-12;

/// Sparsity band over the last 20% of steps (criterion 4).
const RATE_BAND: (f64, f64) = (0.35, 0.65);
const TAIL_FRACTION: f64 = 0.2;

/// β may sit at its upper clamp for at most this share of steps (criterion 5).
const SATURATION_CAP: f64 = 0.10;

/// Specialization: per-layer contrast floor (criterion 6).
const DELTA_FLOOR: f64 = 0.2;

/// Personalization bars (criterion 7).
const EXISTENCE_BAR: f64 = 0.9;
const ALWAYS_YES_CEILING: f64 = 0.6;
const STEP_CAP: usize = 2000;

/// Per-training wall budget (criteria 4 and 7 allow 5 minutes per run; the
/// specialization pair of criterion 6 gets 10 minutes total).
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const PAIR_BUDGET: Duration = Duration::from_secs(600);

/// Metric-oracle tolerance (criterion 9).
const BLEU_FIXTURE_TOL: f64 = 1e-9;

/// Suite budget, phrased for a 4-core box; a smaller box gets the allowance
/// scaled by its deficit so the gate still binds (criterion 10).
const SUITE_BUDGET: Duration = Duration::from_secs(600);

const DATA_SEED: u64 = 11;
const MODEL_SEED: u64 = 5;

// ── shared trained fixtures ──

struct TrainedRun {
    model: Model,
    report: TrainReport,
    wall: Duration,
}

struct Fixtures {
    data: Dataset,
    /// Default recipe: ReMoH attention, SPR+HAE, all strata.
    sprhae: TrainedRun,
    /// Same but without the HAE floor.
    spr_only: TrainedRun,
    /// Same recipe with the top-k gated baseline.
    moh_topk: TrainedRun,
    /// Default recipe trained with negative strata excluded.
    positives_only: TrainedRun,
    build_wall: Duration,
}

fn train_run(ds: &Dataset, cfg: TrainConfig) -> TrainedRun {
    let mut model = build_model(ModelConfig::default(), MODEL_SEED).expect("model builds");
    let n = model.cfg.concept_tokens;
    for name in ds.identities.iter().map(|i| i.name.clone()).collect::<Vec<_>>() {
        model.register_concept(&name, n).expect("concept registers");
    }
    let started = Instant::now();
    let report = train(&mut model, ds, &cfg).expect("training completes");
    TrainedRun {
        model,
        report,
        wall: started.elapsed(),
    }
}

static FIX: Lazy<Fixtures> = Lazy::new(|| {
    let started = Instant::now();
    let data = build_dataset(
        &DataConfig::desk_default(&["sks1", "sks2"], ModelConfig::default().d_model),
        DATA_SEED,
    )
    .expect("dataset builds");

    let base = TrainConfig::default();
    let jobs: Vec<TrainConfig> = vec![
        base.clone(),
        TrainConfig {
            losses: LossMode::SprOnly,
            ..base.clone()
        },
        TrainConfig {
            attention: AttentionKind::MohTopk,
            ..base.clone()
        },
        TrainConfig {
            strata: StrataSelection {
                context_rich: true,
                high_fidelity: true,
                negatives: false,
            },
            ..base
        },
    ];

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len());
    let mut runs: Vec<Option<TrainedRun>> = (0..jobs.len()).map(|_| None).collect();
    for wave in jobs.into_iter().enumerate().collect::<Vec<_>>().chunks_mut(workers) {
        let outcomes = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(i, cfg)| {
                    let data = &data;
                    let cfg = cfg.clone();
                    let i = *i;
                    scope.spawn(move || (i, train_run(data, cfg)))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread completes"))
                .collect::<Vec<_>>()
        });
        for (i, run) in outcomes {
            runs[i] = Some(run);
        }
    }
    let mut it = runs.into_iter().map(|r| r.expect("every job ran"));
    let sprhae = it.next().unwrap();
    let spr_only = it.next().unwrap();
    let moh_topk = it.next().unwrap();
    let positives_only = it.next().unwrap();

    Fixtures {
        data,
        sprhae,
        spr_only,
        moh_topk,
        positives_only,
        build_wall: started.elapsed(),
    }
});

fn eval_opts(kind: AttentionKind) -> ForwardOptions {
    ForwardOptions {
        kind,
        topk: TrainConfig::default().topk,
        temporal: true,
    }
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.values_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

// ── criterion 1 ──

/// Rebuild [`AttnParams`] from the flat leaf list used by the checker. The
/// order must match [`layer_params`].
fn params_from_slice(vals: &[Val], dims: AttnDims) -> AttnParams {
    let h = dims.heads();
    AttnParams {
        w_q: vals[0..h].to_vec(),
        w_k: vals[h..2 * h].to_vec(),
        w_v: vals[2 * h..3 * h].to_vec(),
        w_o: vals[3 * h..4 * h].to_vec(),
        w_r: Some(vals[4 * h]),
        b_r: Some(vals[4 * h + 1]),
        w_h: Some(vals[4 * h + 2]),
        b_h: Some(vals[4 * h + 3]),
    }
}

fn layer_params(w: &AttnWeights, x1: &Tensor, x2: &Tensor) -> Vec<Tensor> {
    let mut params: Vec<Tensor> = w.named().into_iter().map(|(_, t)| t.clone()).collect();
    params.push(x1.clone());
    params.push(x2.clone());
    params
}

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let dims = AttnDims::new(32, 8, 6).expect("dims valid");
    let mut rng = substream(41, "acceptance/gradcheck");
    let w = AttnWeights::init(dims, &mut rng);
    let x1 = rand_tensor(4, 32, &mut rng);
    let x2 = rand_tensor(6, 32, &mut rng);
    let probe = rand_tensor(4, 32, &mut rng);

    let params = layer_params(&w, &x1, &x2);
    let coords = sample_coords(&params, GRAD_COORDS, &mut rng);
    assert_eq!(coords.len(), GRAD_COORDS, "enough coordinates to sample");

    let report = grad_check(
        |tape, vals| {
            let n = vals.len();
            let p = params_from_slice(&vals[..n - 2], dims);
            let r = remoh_forward(tape, &p, &dims, vals[n - 2], vals[n - 1], None, None)?;
            // A fixed linear functional keeps the scalar sensitive to sign
            // structure that symmetric reductions would cancel.
            let pr = tape.constant(probe.clone())?;
            let weighted = tape.mul(r.out, pr)?;
            tape.mean_all(weighted)
        },
        &params,
        &coords,
        GRAD_STEP,
    )
    .expect("grad check runs");

    let wall = started.elapsed();
    assert!(
        report.passes(GRAD_TOL),
        "max relative error {:.3e} over {} checked coords (worst: {:?})",
        report.max_rel_err,
        report.checked,
        report.worst()
    );
    assert!(
        report.checked >= GRAD_COORDS / 2,
        "kink skipping left only {} of {} coords",
        report.checked,
        GRAD_COORDS
    );
    assert!(wall < GRAD_BUDGET, "took {wall:?}, budget {GRAD_BUDGET:?}");
    println!(
        "criterion 1: PASS — full-layer gradcheck d_in=32 h=8 m=6: {} checked, {} kink-skipped, max rel err {:.3e}, {:?}",
        report.checked, report.skipped, report.max_rel_err, wall
    );
}

// ── criterion 2 ──

#[test]
fn criterion_02_mha_reduction() {
    let started = Instant::now();
    let dims = AttnDims::new(32, 8, 0).expect("dims valid");
    let mut worst = 0.0f64;
    for i in 0..MHA_INSTANCES {
        let mut rng = substream(42, &format!("acceptance/mha-eq/{i}"));
        let w = AttnWeights::init(dims, &mut rng);
        let x1 = rand_tensor(5, 32, &mut rng);
        let x2 = rand_tensor(7, 32, &mut rng);
        let plain = w.run_mha(&x1, &x2).expect("mha runs");
        let routed = w.run_remoh(&x1, &x2).expect("degenerate remoh runs");
        for (a, b) in plain.values().iter().zip(routed.out.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    let wall = started.elapsed();
    assert!(worst <= MHA_TOL, "max |Δ| {worst:.3e} exceeds {MHA_TOL:.0e}");
    assert!(wall < MHA_BUDGET, "took {wall:?}, budget {MHA_BUDGET:?}");
    println!(
        "criterion 2: PASS — m=0 ReMoH equals MHA on {MHA_INSTANCES} instances, max |Δ| {worst:.3e}, {wall:?}"
    );
}

// ── criterion 3 ──

#[test]
fn criterion_03_router_contracts() {
    let dims = AttnDims::new(32, 8, 6).expect("dims valid");
    let k = TrainConfig::default().topk;
    let mut rng = substream(43, "acceptance/router");
    let w = AttnWeights::init(dims, &mut rng);

    let batch = 1000;
    let mut worst_alpha = 0.0f64;
    let mut min_score = f64::INFINITY;
    let mut tokens = 0usize;
    for _ in 0..ROUTER_TOKENS / batch {
        let x1 = rand_tensor(batch, 32, &mut rng);
        let x2 = rand_tensor(6, 32, &mut rng);
        let r = w.run_remoh(&x1, &x2).expect("remoh runs");

        assert_eq!(r.alpha.cols(), 2, "one shared weight and one routed weight per token");
        assert_eq!(r.scores.cols(), dims.routed, "one score column per routed head");
        for row in r.alpha.iter_rows() {
            worst_alpha = worst_alpha.max((row[0] + row[1] - 1.0).abs());
            assert!(row[0] >= 0.0 && row[1] >= 0.0, "α components nonnegative");
        }
        for row in r.scores.iter_rows() {
            for &s in row {
                min_score = min_score.min(s);
            }
        }

        let t = w.run_moh_topk(&x1, &x2, k).expect("top-k runs");
        for row in t.scores.iter_rows() {
            let active = row.iter().filter(|&&s| s > 0.0).count();
            assert_eq!(active, k, "top-k must activate exactly {k} heads, got {active}");
        }
        tokens += batch;
    }

    assert_eq!(tokens, ROUTER_TOKENS);
    assert!(
        worst_alpha <= ALPHA_TOL,
        "α₁+α₂ drifts from 1 by {worst_alpha:.3e}"
    );
    assert!(min_score >= 0.0, "routed score went negative: {min_score}");
    println!(
        "criterion 3: PASS — {ROUTER_TOKENS} tokens: max |α₁+α₂−1| = {worst_alpha:.2e}, min routed score {min_score:.2e}, top-k exact at k={k}"
    );
}

// ── criterion 4 ──

#[test]
fn criterion_04_sparsity_control() {
    let full = FIX.sprhae.report.tail_activation_rate(TAIL_FRACTION);
    let bare = FIX.spr_only.report.tail_activation_rate(TAIL_FRACTION);
    assert!(
        (RATE_BAND.0..=RATE_BAND.1).contains(&full),
        "SPR+HAE tail activation rate {full:.3} outside [{}, {}]",
        RATE_BAND.0,
        RATE_BAND.1
    );
    assert!(
        bare < full,
        "spr-only rate {bare:.3} is not strictly below the SPR+HAE rate {full:.3}"
    );
    for run in [&FIX.sprhae, &FIX.spr_only] {
        assert!(
            run.wall < TRAIN_BUDGET,
            "training took {:?}, budget {TRAIN_BUDGET:?}",
            run.wall
        );
    }
    println!(
        "criterion 4: PASS — tail activation rate {full:.3} in band, spr-only strictly lower at {bare:.3} ({:?} + {:?})",
        FIX.sprhae.wall, FIX.spr_only.wall
    );
}

// ── criterion 5 ──

#[test]
fn criterion_05_stability() {
    let report = &FIX.sprhae.report;
    assert_eq!(report.steps, TrainConfig::default().total_steps());
    for t in &report.telemetry {
        assert!(
            t.total.is_finite(),
            "total loss went non-finite at step {}",
            t.step
        );
    }
    let beta_max = TrainConfig::default().sparsity.beta_max;
    let sat = report.beta_saturation_fraction(beta_max);
    assert!(
        sat <= SATURATION_CAP,
        "β sat at its clamp for {:.1}% of steps (cap {:.0}%)",
        100.0 * sat,
        100.0 * SATURATION_CAP
    );
    let peak = report
        .telemetry
        .iter()
        .flat_map(|t| t.layers.iter().map(|l| l.beta))
        .fold(0.0f64, f64::max);
    println!(
        "criterion 5: PASS — {} finite steps, β peak {:.1} of clamp {}, saturation {:.1}%",
        report.steps,
        peak,
        beta_max,
        100.0 * sat
    );
}

// ── criterion 6 ──

fn heatmap_rows(model: &Model, kind: AttentionKind) -> Vec<HeatmapRow> {
    let opts = eval_opts(kind);
    let mut rows = Vec::new();
    for concept in FIX.data.concepts() {
        rows.extend(
            activation_heatmap(model, &FIX.data, &concept, &opts).expect("heatmap builds"),
        );
    }
    rows
}

#[test]
fn criterion_06_routing_specialization() {
    let remoh = heatmap_rows(&FIX.sprhae.model, AttentionKind::Remoh);
    let topk = heatmap_rows(&FIX.moh_topk.model, AttentionKind::MohTopk);

    let per_layer = max_delta_per_layer(&remoh);
    assert!(!per_layer.is_empty(), "no cross layers produced traces");
    for (layer, delta) in &per_layer {
        assert!(
            *delta >= DELTA_FLOOR,
            "layer {layer}: best routed-head |Δrate| {delta:.3} under the {DELTA_FLOOR} floor"
        );
    }
    let mean_remoh = mean_delta(&remoh);
    let mean_topk = mean_delta(&topk);
    assert!(
        mean_remoh > mean_topk,
        "mean |Δrate| {mean_remoh:.3} (ReMoH) does not exceed {mean_topk:.3} (top-k)"
    );
    let pair = FIX.sprhae.wall + FIX.moh_topk.wall;
    assert!(pair < PAIR_BUDGET, "pair took {pair:?}, budget {PAIR_BUDGET:?}");
    let layers: Vec<String> = per_layer
        .iter()
        .map(|(l, d)| format!("L{l}:{d:.2}"))
        .collect();
    println!(
        "criterion 6: PASS — per-layer best |Δrate| [{}], mean ReMoH {:.3} > top-k {:.3}, pair {:?}",
        layers.join(" "),
        mean_remoh,
        mean_topk,
        pair
    );
}

// ── criterion 7 ──

#[test]
fn criterion_07_one_shot_personalization() {
    assert_eq!(ModelConfig::default().d_model, 64);
    assert_eq!(FIX.data.concepts().len(), 2);
    assert!(TrainConfig::default().total_steps() <= STEP_CAP);

    let items: Vec<_> = FIX.data.eval.iter().collect();
    let with_negatives = evaluate(
        &FIX.sprhae.model,
        &FIX.data,
        &items,
        &eval_opts(AttentionKind::Remoh),
    )
    .expect("evaluation runs");

    let negative_slice: Vec<_> = FIX
        .data
        .eval
        .iter()
        .filter(|q| q.category == QaCategory::Existence && q.polarity == Polarity::Negative)
        .collect();
    let always_yes = eval_existence(
        &FIX.positives_only.model,
        &FIX.data,
        &negative_slice,
        &eval_opts(AttentionKind::Remoh),
    )
    .expect("negative-slice evaluation runs");

    assert!(
        with_negatives.existence_accuracy >= EXISTENCE_BAR,
        "existence accuracy {:.3} under the {EXISTENCE_BAR} bar",
        with_negatives.existence_accuracy
    );
    assert!(
        always_yes <= ALWAYS_YES_CEILING,
        "positives-only model scores {always_yes:.3} on the negative slice; expected the always-yes collapse (≤ {ALWAYS_YES_CEILING})"
    );
    for run in [&FIX.sprhae, &FIX.positives_only] {
        assert!(
            run.wall < TRAIN_BUDGET,
            "training took {:?}, budget {TRAIN_BUDGET:?}",
            run.wall
        );
    }
    println!(
        "criterion 7: PASS — existence accuracy {:.3} (bleu {:.3}); positives-only scores {:.3} on {} negative items",
        with_negatives.existence_accuracy,
        with_negatives.bleu,
        always_yes,
        negative_slice.len()
    );
}

// ── criterion 8 ──

fn grid_config() -> (DataConfig, ModelConfig, TrainConfig) {
    let model = ModelConfig {
        d_model: 32,
        layers: 2,
        heads: 4,
        routed_heads: 2,
        concept_tokens: 4,
        frames: 4,
        ..ModelConfig::default()
    };
    let data = DataConfig {
        frames: 4,
        context_rich: 4,
        high_fidelity: 4,
        hard_negatives: 4,
        random_negatives: 4,
        ..DataConfig::desk_default(&["pat", "quinn"], 32)
    };
    let train = TrainConfig {
        stage2_epochs: 3,
        steps_per_epoch: 20,
        sparsity: remoh_core::objectives::SparsityConfig {
            target_active: 1,
            routed: 2,
            ..Default::default()
        },
        topk: 1,
        ..TrainConfig::default()
    };
    (data, model, train)
}

#[test]
fn criterion_08_ablation_grid() {
    let (dc, mc, tc) = grid_config();
    let ds = build_dataset(&dc, DATA_SEED).expect("grid dataset builds");
    let run = || run_ablation(&ds, &mc, &tc, &AblationAxis::ALL).expect("grid runs");
    let report = run();

    let variants = |axis| {
        report
            .rows_for(axis)
            .map(|r| r.variant.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        variants(AblationAxis::Attention),
        ["baseline", "moh-topk", "remoh"]
    );
    assert_eq!(
        variants(AblationAxis::Losses),
        ["none", "spr-only", "spr+hae"]
    );
    assert_eq!(
        variants(AblationAxis::Data),
        [
            "anchor-only",
            "anchor+negatives",
            "anchor+negatives+context",
            "full"
        ]
    );
    assert_eq!(
        variants(AblationAxis::Tokens),
        TOKEN_SWEEP.map(|n| n.to_string())
    );

    // The no-SPR cell is recorded whichever way it lands: a diverged row has
    // no metrics, a finite one has them all.
    let none_row = report
        .rows_for(AblationAxis::Losses)
        .find(|r| r.variant == "none")
        .expect("none row present");
    if none_row.diverged {
        assert!(none_row.final_loss.is_none() && none_row.existence_accuracy.is_none());
    } else {
        assert!(none_row.final_loss.expect("finite row has a loss").is_finite());
        assert!(none_row.existence_accuracy.is_some());
    }

    let again = run();
    let a = serde_json::to_string(&report.rows).expect("rows serialize");
    let b = serde_json::to_string(&again.rows).expect("rows serialize");
    assert_eq!(a, b, "grid is not deterministic under a fixed seed");

    let diverged = report.rows.iter().filter(|r| r.diverged).count();
    println!(
        "criterion 8: PASS — {} rows (3 attention / 3 losses / 4 data / {} tokens), {} diverged, byte-identical rerun",
        report.rows.len(),
        TOKEN_SWEEP.len(),
        diverged
    );
}

// ── criterion 9 ──

#[test]
fn criterion_09_metric_oracles() {
    let toks = |s: &str| tokenize(s);

    // Identical sentences score exactly 1, disjoint ones exactly 0.
    let same = toks("the red jacket by the window");
    assert_eq!(bleu(&same, &same, BLEU_MAX_N).expect("bleu runs"), 1.0);
    let zero = bleu(
        &toks("purple monkeys dishwasher"),
        &toks("the red jacket by a window"),
        BLEU_MAX_N,
    )
    .expect("bleu runs");
    assert_eq!(zero, 0.0);

    // Hand-computed clipped-precision fixture: hyp "the the cat" against ref
    // "the cat sat" gives p1 = 2/3 (clipped), p2 = 1/2, p3 smoothed to 1/2,
    // no 4-grams, BP = 1 → (2/3 · 1/2 · 1/2)^(1/3).
    let fixture = bleu(&toks("the the cat"), &toks("the cat sat"), BLEU_MAX_N).expect("bleu runs");
    let want = (2.0 / 3.0 * 0.5 * 0.5f64).powf(1.0 / 3.0);
    assert!(
        (fixture - want).abs() < BLEU_FIXTURE_TOL,
        "clipped-precision fixture: got {fixture}, want {want}"
    );

    // Ten polarity calls tallied by hand: items 1–7 carry answers drawn from
    // the bank matching their gold label, items 8–10 carry answers from a
    // different bank, so exactly 7 of 10 match.
    let one = |t: &str| bind(t, &["sks1"]).expect("binds");
    let two = |t: &str| bind(t, &["sks1", "sks2"]).expect("binds");
    let fixture: Vec<(Vec<String>, Vec<String>, Polarity)> = vec![
        (toks(&one(templates::EXIST_YES[0])), vec!["sks1".into()], Polarity::Positive),
        (toks(&one(templates::EXIST_YES[1])), vec!["sks1".into()], Polarity::Positive),
        (toks(&one(templates::EXIST_NO[0])), vec!["sks1".into()], Polarity::Negative),
        (toks(&one(templates::EXIST_NO[1])), vec!["sks1".into()], Polarity::Negative),
        (
            toks(&two(templates::EXIST2_BOTH_YES[0])),
            vec!["sks1".into(), "sks2".into()],
            Polarity::Positive,
        ),
        (
            toks(&two(templates::EXIST2_BOTH_NO[0])),
            vec!["sks1".into(), "sks2".into()],
            Polarity::Negative,
        ),
        (
            toks(&two(templates::EXIST2_MIXED[0])),
            vec!["sks1".into(), "sks2".into()],
            Polarity::Mixed,
        ),
        // A yes answer against a negative gold, a no answer against a
        // positive gold, and a mixed answer against a both-yes gold.
        (toks(&one(templates::EXIST_YES[0])), vec!["sks1".into()], Polarity::Negative),
        (toks(&one(templates::EXIST_NO[0])), vec!["sks1".into()], Polarity::Positive),
        (
            toks(&two(templates::EXIST2_MIXED[0])),
            vec!["sks1".into(), "sks2".into()],
            Polarity::Positive,
        ),
    ];
    assert_eq!(fixture.len(), 10);
    let tally = polarity_tally(&fixture).expect("tally runs");
    assert!(
        (tally - 0.7).abs() < 1e-15,
        "hand tally says 7/10, polarity_tally says {tally}"
    );

    // eval_existence agrees with a by-hand loop over the same ten items.
    let model = &FIX.sprhae.model;
    let opts = eval_opts(AttentionKind::Remoh);
    let ten: Vec<_> = FIX
        .data
        .eval
        .iter()
        .filter(|q| q.category == QaCategory::Existence)
        .take(10)
        .collect();
    assert_eq!(ten.len(), 10);
    let mut hits = 0usize;
    for q in &ten {
        let clip = FIX.data.clip(&q.clip_id).expect("clip resolves");
        let decoded = decode_answer(model, &clip.frames, q, &opts).expect("decodes");
        if classify_polarity(&decoded, &q.subjects).polarity == q.polarity {
            hits += 1;
        }
    }
    let accuracy = eval_existence(model, &FIX.data, &ten, &opts).expect("eval runs");
    assert!(
        (accuracy - hits as f64 / 10.0).abs() < 1e-15,
        "eval_existence {accuracy} disagrees with the {hits}/10 hand loop"
    );

    println!(
        "criterion 9: PASS — BLEU oracles exact, clipped fixture within {BLEU_FIXTURE_TOL:.0e}, 7/10 polarity tally and {hits}/10 decode loop both match"
    );
}

// ── criterion 10 ──

#[test]
fn criterion_10_suite_budget() {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    // The budget is stated for 4 cores; on a smaller box the serialized
    // trainings get proportionally more wall clock.
    let allowance = SUITE_BUDGET * (4 / cores.min(4)) as u32;
    let walls = [
        ("spr+hae", FIX.sprhae.wall),
        ("spr-only", FIX.spr_only.wall),
        ("moh-topk", FIX.moh_topk.wall),
        ("positives-only", FIX.positives_only.wall),
    ];
    assert!(
        FIX.build_wall < allowance,
        "fixture build took {:?}, allowance {allowance:?} at {cores} cores",
        FIX.build_wall
    );
    let detail: Vec<String> = walls
        .iter()
        .map(|(tag, w)| format!("{tag} {:.0?}", w))
        .collect();
    println!(
        "criterion 10: PASS — four trainings [{}] built in {:.0?} on {} core(s), allowance {allowance:?}",
        detail.join(", "),
        FIX.build_wall,
        cores
    );
}
