//! Normalized-degree long-tail curves.
//!
//! For each graph, user degrees are sorted descending and divided by the
//! graph's total interaction count. The merged curve sums degrees of users
//! matched by external id across all graphs, normalized by the combined
//! interaction count — merging domains sharpens the long tail.

use super::InteractionGraph;
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct LongTailCurve {
    pub label: String,
    /// Sorted descending; sums to 1.
    pub normalized: Vec<f64>,
}

impl LongTailCurve {
    fn from_degrees(label: &str, mut degrees: Vec<f64>, total: f64) -> Self {
        degrees.sort_by(|a, b| b.partial_cmp(a).unwrap());
        Self {
            label: label.to_string(),
            normalized: degrees.into_iter().map(|d| d / total).collect(),
        }
    }
}

/// Per-graph curves followed by the merged curve (labelled "merged").
pub fn long_tail_report(graphs: &[(&str, &InteractionGraph)]) -> Result<Vec<LongTailCurve>> {
    if graphs.is_empty() {
        return Err(Error::usage("long-tail report needs at least one graph"));
    }
    let mut curves = Vec::with_capacity(graphs.len() + 1);
    let mut merged: HashMap<&str, f64> = HashMap::new();
    let mut merged_total = 0.0;
    for (label, g) in graphs {
        let degrees: Vec<f64> = (0..g.num_users())
            .map(|u| g.user_degree(u as u32) as f64)
            .collect();
        let total = g.num_edges() as f64;
        for (u, d) in degrees.iter().enumerate() {
            *merged.entry(g.external_user_ids()[u].as_str()).or_default() += d;
        }
        merged_total += total;
        curves.push(LongTailCurve::from_degrees(label, degrees, total));
    }
    let merged_degrees: Vec<f64> = merged.into_values().collect();
    curves.push(LongTailCurve::from_degrees(
        "merged",
        merged_degrees,
        merged_total,
    ));
    Ok(curves)
}

/// Share of normalized mass held by the top 10% of ranks.
pub fn top_decile_mass(curve: &LongTailCurve) -> f64 {
    let take = ((curve.normalized.len() as f64) * 0.1).ceil() as usize;
    curve.normalized.iter().take(take.max(1)).sum()
}
