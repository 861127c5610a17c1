//! Interaction graphs, cross-domain datasets, splits, and samplers.

mod io;
mod longtail;
mod sampler;
mod synthetic;

pub use io::{load_interactions, write_interactions};
pub use longtail::{long_tail_report, top_decile_mass, LongTailCurve};
pub use sampler::{sample_cl_batch, sample_rank_batch, CLBatch, CLRow, RankBatch, TransferDirection};
pub use synthetic::{gen_synthetic, gen_synthetic_graphs, SyntheticConfig, SyntheticPair};

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Independent deterministic random stream: one master seed, one salt per
/// purpose (splits, init, each sampler).
pub fn seeded_rng(master: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(salt);
    rng
}

/// A bipartite user-item interaction graph with dual adjacency. Immutable
/// after construction and freely shareable across threads.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    user_adj: Arc<Vec<Vec<u32>>>,
    item_adj: Arc<Vec<Vec<u32>>>,
    edges: Vec<(u32, u32)>,
    external_user_ids: Vec<String>,
    external_item_ids: Vec<String>,
}

impl InteractionGraph {
    /// Build from dense-indexed edges. Duplicate pairs collapse to one edge;
    /// the dual adjacency lists are sorted and mutually consistent by
    /// construction.
    pub fn from_index_edges(
        num_users: usize,
        num_items: usize,
        edges: Vec<(u32, u32)>,
        external_user_ids: Vec<String>,
        external_item_ids: Vec<String>,
    ) -> Result<Self> {
        if external_user_ids.len() != num_users || external_item_ids.len() != num_items {
            return Err(Error::usage("external id lists must match node counts"));
        }
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for &(u, i) in &edges {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::usage(format!("edge ({u}, {i}) out of range")));
            }
            user_adj[u as usize].push(i);
        }
        let mut dedup_edges = Vec::with_capacity(edges.len());
        for (u, list) in user_adj.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            for &i in list.iter() {
                item_adj[i as usize].push(u as u32);
                dedup_edges.push((u as u32, i));
            }
        }
        // item_adj is filled in ascending user order, hence already sorted.
        Ok(Self {
            num_users,
            num_items,
            user_adj: Arc::new(user_adj),
            item_adj: Arc::new(item_adj),
            edges: dedup_edges,
            external_user_ids,
            external_item_ids,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// All (user, item) edges, sorted by user then item.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn user_adj(&self) -> &[Vec<u32>] {
        &self.user_adj
    }

    pub fn item_adj(&self) -> &[Vec<u32>] {
        &self.item_adj
    }

    pub fn user_adj_arc(&self) -> Arc<Vec<Vec<u32>>> {
        Arc::clone(&self.user_adj)
    }

    pub fn item_adj_arc(&self) -> Arc<Vec<Vec<u32>>> {
        Arc::clone(&self.item_adj)
    }

    pub fn user_degree(&self, u: u32) -> usize {
        self.user_adj[u as usize].len()
    }

    pub fn item_degree(&self, i: u32) -> usize {
        self.item_adj[i as usize].len()
    }

    pub fn has_edge(&self, u: u32, i: u32) -> bool {
        self.user_adj[u as usize].binary_search(&i).is_ok()
    }

    pub fn external_user_ids(&self) -> &[String] {
        &self.external_user_ids
    }

    pub fn external_item_ids(&self) -> &[String] {
        &self.external_item_ids
    }
}

/// Pairs of (source user index, target user index) for users present in both
/// domains; injective in both coordinates.
#[derive(Debug, Clone, Default)]
pub struct OverlapMap {
    pub pairs: Vec<(u32, u32)>,
}

impl OverlapMap {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Users whose external ids appear in both graphs, in source index order.
pub fn build_cross_domain(src: &InteractionGraph, tgt: &InteractionGraph) -> OverlapMap {
    let tgt_by_id: HashMap<&str, u32> = tgt
        .external_user_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u32))
        .collect();
    let mut pairs = Vec::new();
    for (su, id) in src.external_user_ids.iter().enumerate() {
        if let Some(&tu) = tgt_by_id.get(id.as_str()) {
            pairs.push((su as u32, tu));
        }
    }
    OverlapMap { pairs }
}

/// Remove one uniformly chosen interaction per user of degree >= 2 into the
/// test set; degree-1 users stay train-only. Node indices are preserved.
pub fn split_leave_one_out(
    graph: &InteractionGraph,
    seed: u64,
    salt: u64,
) -> Result<(InteractionGraph, Vec<(u32, u32)>)> {
    let mut rng = seeded_rng(seed, salt);
    let mut train_edges = Vec::with_capacity(graph.num_edges());
    let mut test_pairs = Vec::new();
    for (u, list) in graph.user_adj().iter().enumerate() {
        if list.len() >= 2 {
            let held = list[rng.random_range(0..list.len())];
            test_pairs.push((u as u32, held));
            for &i in list {
                if i != held {
                    train_edges.push((u as u32, i));
                }
            }
        } else {
            for &i in list {
                train_edges.push((u as u32, i));
            }
        }
    }
    let train = InteractionGraph::from_index_edges(
        graph.num_users,
        graph.num_items,
        train_edges,
        graph.external_user_ids.clone(),
        graph.external_item_ids.clone(),
    )?;
    Ok((train, test_pairs))
}

/// Two train graphs, the overlap between their users, and the held-out test
/// pairs of both domains.
#[derive(Debug, Clone)]
pub struct CrossDomainDataset {
    pub source: InteractionGraph,
    pub target: InteractionGraph,
    pub overlap: OverlapMap,
    pub test_pairs_source: Vec<(u32, u32)>,
    pub test_pairs_target: Vec<(u32, u32)>,
    /// Overlap rows usable for contrastive batches: at least one train edge
    /// in each domain.
    cl_eligible: Vec<u32>,
}

pub(crate) const SALT_SPLIT_SRC: u64 = 0x51;
pub(crate) const SALT_SPLIT_TGT: u64 = 0x52;

impl CrossDomainDataset {
    /// Split both full graphs leave-one-out and match overlapping users.
    pub fn build(
        source_full: &InteractionGraph,
        target_full: &InteractionGraph,
        seed: u64,
    ) -> Result<Self> {
        let overlap = build_cross_domain(source_full, target_full);
        let (source, test_pairs_source) = split_leave_one_out(source_full, seed, SALT_SPLIT_SRC)?;
        let (target, test_pairs_target) = split_leave_one_out(target_full, seed, SALT_SPLIT_TGT)?;
        let cl_eligible = overlap
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, &(su, tu))| source.user_degree(su) > 0 && target.user_degree(tu) > 0)
            .map(|(idx, _)| idx as u32)
            .collect();
        Ok(Self {
            source,
            target,
            overlap,
            test_pairs_source,
            test_pairs_target,
            cl_eligible,
        })
    }

    /// Assemble a dataset from already-split parts, recomputing contrastive
    /// eligibility.
    pub fn from_parts(
        source: InteractionGraph,
        target: InteractionGraph,
        overlap: OverlapMap,
        test_pairs_source: Vec<(u32, u32)>,
        test_pairs_target: Vec<(u32, u32)>,
    ) -> Self {
        let cl_eligible = overlap
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, &(su, tu))| source.user_degree(su) > 0 && target.user_degree(tu) > 0)
            .map(|(idx, _)| idx as u32)
            .collect();
        Self {
            source,
            target,
            overlap,
            test_pairs_source,
            test_pairs_target,
            cl_eligible,
        }
    }

    pub fn cl_eligible(&self) -> &[u32] {
        &self.cl_eligible
    }

    pub fn graph(&self, direction_source: bool) -> &InteractionGraph {
        if direction_source {
            &self.source
        } else {
            &self.target
        }
    }
}
