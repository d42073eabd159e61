//! Per-head activation heatmaps split by subject presence.
//!
//! The diagnostic for routing specialization: run probe queries over clips
//! with and without a concept, merge the routed-head traces per layer and
//! label, and tabulate per-head firing rates. Exported as CSV with columns
//! `layer, head_index, rate_present, rate_absent, tokens_present,
//! tokens_absent`; `head_index` is the absolute head position, so the first
//! routed head of a layer with two shared heads appears as index 2.

use crate::attention::ActivationTrace;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tape::Tape;
use crate::templates;
use crate::vocab::bind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub head_index: usize,
    pub rate_present: f64,
    pub rate_absent: f64,
    pub tokens_present: usize,
    pub tokens_absent: usize,
}

impl HeatmapRow {
    pub fn delta(&self) -> f64 {
        (self.rate_present - self.rate_absent).abs()
    }
}

/// Merge per-layer traces from both label classes into rate rows.
pub fn trace_summary(
    present: &[(usize, ActivationTrace)],
    absent: &[(usize, ActivationTrace)],
    first_routed_index: usize,
) -> Result<Vec<HeatmapRow>> {
    let group = |traces: &[(usize, ActivationTrace)]| {
        let mut by_layer: BTreeMap<usize, Vec<&ActivationTrace>> = BTreeMap::new();
        for (layer, t) in traces {
            by_layer.entry(*layer).or_default().push(t);
        }
        by_layer
            .into_iter()
            .map(|(l, ts)| (l, ActivationTrace::merged(ts)))
            .collect::<BTreeMap<usize, ActivationTrace>>()
    };
    let p = group(present);
    let a = group(absent);
    if p.keys().ne(a.keys()) {
        return Err(Error::Config(
            "trace summary needs the same layers in both label classes".into(),
        ));
    }
    let mut rows = Vec::new();
    for (layer, pt) in &p {
        let at = &a[layer];
        if pt.heads() != at.heads() {
            return Err(Error::Config(format!(
                "layer {layer}: head count differs between label classes"
            )));
        }
        for head in 0..pt.heads() {
            rows.push(HeatmapRow {
                layer: *layer,
                head_index: first_routed_index + head,
                rate_present: pt.rate(head),
                rate_absent: at.rate(head),
                tokens_present: pt.tokens(),
                tokens_absent: at.tokens(),
            });
        }
    }
    Ok(rows)
}

/// Probe every clip with an existence question about `concept` and tabulate
/// routed-head firing rates by whether the clip contains the concept.
pub fn activation_heatmap(
    model: &Model,
    ds: &Dataset,
    concept: &str,
    opts: &ForwardOptions,
) -> Result<Vec<HeatmapRow>> {
    model.concept(concept)?;
    let names = model.concept_names();
    let question = bind(templates::EXIST_Q[0], &[concept])?;
    let q_ids = model.vocab.encode(&question, &names)?;
    let query = model.assemble_query(&q_ids, &[concept])?;

    let mut present = Vec::new();
    let mut absent = Vec::new();
    for clip in &ds.clips {
        let mut tape = Tape::new();
        let leaves = model.leaves(&mut tape)?;
        let out = model.forward(&mut tape, &leaves, &clip.frames, &query, opts)?;
        let sink = if clip.contains(concept) {
            &mut present
        } else {
            &mut absent
        };
        for lr in out.routed {
            sink.push((lr.layer, lr.trace));
        }
    }
    if present.is_empty() || absent.is_empty() {
        return Err(Error::Config(format!(
            "heatmap for {concept:?} needs clips from both label classes \
             (present: {}, absent: {})",
            present.len(),
            absent.len()
        )));
    }
    trace_summary(&present, &absent, model.dims.shared)
}

/// Largest present/absent rate gap per layer.
pub fn max_delta_per_layer(rows: &[HeatmapRow]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for r in rows {
        let e = out.entry(r.layer).or_insert(0.0f64);
        *e = e.max(r.delta());
    }
    out
}

/// Mean per-head rate gap over the whole table.
pub fn mean_delta(rows: &[HeatmapRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(HeatmapRow::delta).sum::<f64>() / rows.len() as f64
}

pub fn write_heatmap_csv(path: &Path, rows: &[HeatmapRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_heatmap_csv(path: &Path) -> Result<Vec<HeatmapRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn trace(rows: &[Vec<f64>]) -> ActivationTrace {
        ActivationTrace::from_scores(&Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn summary_rates_match_hand_counts() {
        // Layer 0, two routed heads. Present: head 0 fires 2/3 tokens,
        // head 1 fires 1/3. Absent: head 0 fires 1/2, head 1 never.
        let present = vec![(
            0usize,
            trace(&[vec![0.3, 0.0], vec![0.1, 0.2], vec![0.0, 0.0]]),
        )];
        let absent = vec![(0usize, trace(&[vec![0.4, 0.0], vec![0.0, 0.0]]))];
        let rows = trace_summary(&present, &absent, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].head_index, 2);
        assert!((rows[0].rate_present - 2.0 / 3.0).abs() < 1e-12);
        assert!((rows[0].rate_absent - 0.5).abs() < 1e-12);
        assert!((rows[1].rate_present - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rows[1].rate_absent, 0.0);
        assert_eq!(rows[0].tokens_present, 3);
        assert_eq!(rows[0].tokens_absent, 2);
    }

    #[test]
    fn summary_rejects_mismatched_layers() {
        let p = vec![(0usize, trace(&[vec![0.1]]))];
        let a = vec![(1usize, trace(&[vec![0.1]]))];
        assert!(trace_summary(&p, &a, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let rows = vec![
            HeatmapRow {
                layer: 0,
                head_index: 2,
                rate_present: 1.0 / 3.0,
                rate_absent: 0.125,
                tokens_present: 300,
                tokens_absent: 299,
            },
            HeatmapRow {
                layer: 2,
                head_index: 7,
                rate_present: 0.0,
                rate_absent: 1.0,
                tokens_present: 300,
                tokens_absent: 299,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_heatmap_csv(&path, &rows).unwrap();
        let back = read_heatmap_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn delta_helpers() {
        let rows = vec![
            HeatmapRow {
                layer: 0,
                head_index: 2,
                rate_present: 0.9,
                rate_absent: 0.2,
                tokens_present: 10,
                tokens_absent: 10,
            },
            HeatmapRow {
                layer: 0,
                head_index: 3,
                rate_present: 0.4,
                rate_absent: 0.5,
                tokens_present: 10,
                tokens_absent: 10,
            },
        ];
        let by_layer = max_delta_per_layer(&rows);
        assert!((by_layer[&0] - 0.7).abs() < 1e-12);
        assert!((mean_delta(&rows) - 0.4).abs() < 1e-12);
    }
}
