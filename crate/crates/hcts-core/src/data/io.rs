//! Interaction-file ingestion and writing.
//!
//! One interaction per line, comma or tab delimited: user-id, item-id, then
//! optional rating and timestamp fields, which are ignored (implicit
//! feedback). A header line is detected by a non-numeric second field.

use super::InteractionGraph;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

fn split_line(line: &str) -> Vec<&str> {
    if line.contains('\t') {
        line.split('\t').collect()
    } else {
        line.split(',').collect()
    }
}

/// Load a graph, collapse duplicate pairs, then iteratively drop users and
/// items below the degree thresholds until stable. Surviving nodes are
/// reindexed densely in first-appearance order.
pub fn load_interactions(
    path: impl AsRef<Path>,
    min_user_degree: usize,
    min_item_degree: usize,
) -> Result<InteractionGraph> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let reader = BufReader::new(file);

    let mut edges: Vec<(String, String)> = Vec::new();
    let mut seen: std::collections::HashSet<(String, String)> = std::collections::HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::data(format!("read failure in {}: {e}", path.display())))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields = split_line(trimmed);
        if fields.len() < 2 {
            return Err(Error::data(format!(
                "{}:{}: expected at least user and item fields",
                path.display(),
                lineno + 1
            )));
        }
        if lineno == 0 && fields[1].trim().parse::<f64>().is_err() {
            continue; // header
        }
        let key = (fields[0].trim().to_string(), fields[1].trim().to_string());
        if seen.insert(key.clone()) {
            edges.push(key);
        }
    }
    if edges.is_empty() {
        return Err(Error::data(format!(
            "{} holds no interactions",
            path.display()
        )));
    }

    // Iterative core filtering on external ids.
    loop {
        let mut udeg: HashMap<String, usize> = HashMap::new();
        let mut ideg: HashMap<String, usize> = HashMap::new();
        for (u, i) in &edges {
            *udeg.entry(u.clone()).or_default() += 1;
            *ideg.entry(i.clone()).or_default() += 1;
        }
        let before = edges.len();
        edges.retain(|(u, i)| {
            udeg[u.as_str()] >= min_user_degree && ideg[i.as_str()] >= min_item_degree
        });
        if edges.len() == before {
            break;
        }
        if edges.is_empty() {
            return Err(Error::data(format!(
                "degree filtering ({min_user_degree}/{min_item_degree}) removed every edge of {}",
                path.display()
            )));
        }
    }

    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut idx_edges = Vec::with_capacity(edges.len());
    for (u, i) in edges {
        let un = *user_index.entry(u.clone()).or_insert_with(|| {
            user_ids.push(u.clone());
            (user_ids.len() - 1) as u32
        });
        let inn = *item_index.entry(i.clone()).or_insert_with(|| {
            item_ids.push(i.clone());
            (item_ids.len() - 1) as u32
        });
        idx_edges.push((un, inn));
    }
    InteractionGraph::from_index_edges(user_ids.len(), item_ids.len(), idx_edges, user_ids, item_ids)
}

/// Write a graph back out as tab-delimited text with a header line, the same
/// shape `load_interactions` reads.
pub fn write_interactions(graph: &InteractionGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?,
    );
    let fail = |e: std::io::Error| Error::data(format!("write failure in {}: {e}", path.display()));
    writeln!(out, "user_id\titem_id").map_err(fail)?;
    for &(u, i) in graph.edges() {
        writeln!(
            out,
            "{}\t{}",
            graph.external_user_ids()[u as usize],
            graph.external_item_ids()[i as usize]
        )
        .map_err(fail)?;
    }
    out.flush().map_err(fail)
}
