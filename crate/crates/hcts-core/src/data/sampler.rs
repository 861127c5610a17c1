//! Training batch samplers.
//!
//! Each sampler owns its caller-provided random stream; streams for
//! different purposes are derived from the master seed with distinct salts.

use super::{CrossDomainDataset, InteractionGraph};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rows of (user, positive item, negative item) for the margin ranking loss.
#[derive(Debug, Clone)]
pub struct RankBatch {
    pub rows: Vec<(u32, u32, u32)>,
}

/// Which way knowledge flows in one contrastive batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDirection {
    /// Source embeddings are aligned onto the target manifold (losses on K_T).
    SourceToTarget,
    /// Target embeddings are aligned onto the source manifold (losses on K_S).
    TargetToSource,
}

impl TransferDirection {
    pub fn tag(&self) -> &'static str {
        match self {
            TransferDirection::SourceToTarget => "s2t",
            TransferDirection::TargetToSource => "t2s",
        }
    }
}

/// One contrastive row: an overlapped user, one positive item per domain,
/// and the negative pool drawn from the sending domain.
#[derive(Debug, Clone)]
pub struct CLRow {
    pub user_src: u32,
    pub user_tgt: u32,
    pub pos_item_src: u32,
    pub pos_item_tgt: u32,
    /// Items the user did not interact with, in the sending domain.
    pub neg_items: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CLBatch {
    pub direction: TransferDirection,
    pub rows: Vec<CLRow>,
}

/// Cap on rejection sampling before falling back to any random item.
const NEG_TRIES: usize = 100;

fn draw_negative(graph: &InteractionGraph, user: u32, rng: &mut ChaCha8Rng) -> u32 {
    let n = graph.num_items() as u32;
    for _ in 0..NEG_TRIES {
        let cand = rng.random_range(0..n);
        if !graph.has_edge(user, cand) {
            return cand;
        }
    }
    rng.random_range(0..n)
}

/// Uniform positive edges with one rejected-sampled negative each.
pub fn sample_rank_batch(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RankBatch> {
    if graph.num_edges() == 0 {
        return Err(Error::data("cannot sample ranking batch from an empty graph"));
    }
    let edges = graph.edges();
    let mut rows = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (u, pos) = edges[rng.random_range(0..edges.len())];
        let neg = draw_negative(graph, u, rng);
        rows.push((u, pos, neg));
    }
    Ok(RankBatch { rows })
}

/// Contrastive batch over overlapped users. Users are drawn uniformly
/// without replacement from the eligible rows (train edges in both
/// domains) — a duplicated user would place its own positive pair in the
/// in-batch denominator — so the batch size caps at the eligible count.
/// Each row carries one positive per domain and `n_neg` negatives from the
/// sending domain.
pub fn sample_cl_batch(
    ds: &CrossDomainDataset,
    direction: TransferDirection,
    batch_size: usize,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CLBatch> {
    if ds.overlap.is_empty() {
        return Err(Error::data("contrastive sampling needs a nonempty overlap"));
    }
    let eligible = ds.cl_eligible();
    if eligible.is_empty() {
        return Err(Error::data(
            "no overlapped user has train edges in both domains",
        ));
    }
    let sending_is_source = direction == TransferDirection::SourceToTarget;
    let neg_graph = ds.graph(sending_is_source);
    let take = batch_size.min(eligible.len());
    let mut pool: Vec<u32> = eligible.to_vec();
    let mut rows = Vec::with_capacity(take);
    for slot in 0..take {
        let j = rng.random_range(slot..pool.len());
        pool.swap(slot, j);
        let idx = pool[slot];
        let (user_src, user_tgt) = ds.overlap.pairs[idx as usize];
        let src_list = &ds.source.user_adj()[user_src as usize];
        let tgt_list = &ds.target.user_adj()[user_tgt as usize];
        let pos_item_src = src_list[rng.random_range(0..src_list.len())];
        let pos_item_tgt = tgt_list[rng.random_range(0..tgt_list.len())];
        let neg_user = if sending_is_source { user_src } else { user_tgt };
        let neg_items = (0..n_neg)
            .map(|_| draw_negative(neg_graph, neg_user, rng))
            .collect();
        rows.push(CLRow {
            user_src,
            user_tgt,
            pos_item_src,
            pos_item_tgt,
            neg_items,
        });
    }
    Ok(CLBatch { direction, rows })
}
