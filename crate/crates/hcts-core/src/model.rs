//! Trainable parameters, the per-domain forward pass, scoring, and the
//! bit-exact checkpoint format.
//!
//! All parameters are flat Euclidean storage: embedding tables, two raw
//! curvature scalars, and four alignment matrices. Manifold points are
//! produced by exp-map lifting inside the forward pass, never stored.

use crate::autodiff::{curvature_value, raw_for_curvature, NodeId, Tape};
use crate::data::{CrossDomainDataset, InteractionGraph};
use crate::error::{Error, Result};
use crate::geometry::{self, LorentzPoint};
use crate::propagation::{propagate, EmbeddingTable};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub n_users_src: usize,
    pub n_items_src: usize,
    pub n_users_tgt: usize,
    pub n_items_tgt: usize,
    pub user_emb_src: Vec<f64>,
    pub item_emb_src: Vec<f64>,
    pub user_emb_tgt: Vec<f64>,
    pub item_emb_tgt: Vec<f64>,
    pub raw_curv_src: f64,
    pub raw_curv_tgt: f64,
    /// Alignment matrices, row-major (d+1)^2, first row frozen zero.
    pub w_s2t: Vec<f64>,
    pub w_t2t: Vec<f64>,
    pub w_t2s: Vec<f64>,
    pub w_s2s: Vec<f64>,
}

impl ModelParams {
    pub fn curvature(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Source => curvature_value(self.raw_curv_src),
            Domain::Target => curvature_value(self.raw_curv_tgt),
        }
    }

    pub fn side(&self) -> usize {
        self.dim + 1
    }
}

/// Embedding initialization Normal(0, 0.1/sqrt(d)); curvatures start at
/// K = 1; alignment matrices start as the block identity.
pub fn init_params(
    dim: usize,
    graphs: (&InteractionGraph, &InteractionGraph),
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    if dim < 2 {
        return Err(Error::usage("embedding dimension must be at least 2"));
    }
    let (src, tgt) = graphs;
    let normal = Normal::new(0.0, 0.1 / (dim as f64).sqrt()).unwrap();
    let mut draw = |n: usize| -> Vec<f64> { (0..n * dim).map(|_| normal.sample(rng)).collect() };
    let user_emb_src = draw(src.num_users());
    let item_emb_src = draw(src.num_items());
    let user_emb_tgt = draw(tgt.num_users());
    let item_emb_tgt = draw(tgt.num_items());
    let side = dim + 1;
    let w = geometry::AlignmentTransform::block_identity(side);
    let raw = raw_for_curvature(1.0);
    Ok(ModelParams {
        dim,
        n_users_src: src.num_users(),
        n_items_src: src.num_items(),
        n_users_tgt: tgt.num_users(),
        n_items_tgt: tgt.num_items(),
        user_emb_src,
        item_emb_src,
        user_emb_tgt,
        item_emb_tgt,
        raw_curv_src: raw,
        raw_curv_tgt: raw,
        w_s2t: w.matrix().to_vec(),
        w_t2t: w.matrix().to_vec(),
        w_t2s: w.matrix().to_vec(),
        w_s2s: w.matrix().to_vec(),
    })
}

/// Geometry/propagation settings the forward pass needs beyond the
/// parameters themselves.
#[derive(Debug, Clone, Copy)]
pub struct ForwardSettings {
    pub layers: usize,
    pub euclidean: bool,
    pub share_curvature: bool,
}

/// One domain's forward output: propagated Euclidean tables and their
/// lifted point tables (width d+1). In the Euclidean ablation the "lift" is
/// the identity embedding (0, e).
#[derive(Debug, Clone)]
pub struct DomainForward {
    pub k: f64,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
    pub lifted_users: EmbeddingTable,
    pub lifted_items: EmbeddingTable,
}

fn lift_table(table: &EmbeddingTable, k: f64, euclidean: bool) -> Result<EmbeddingTable> {
    let width = table.cols + 1;
    let mut out = EmbeddingTable::zeros(table.rows, width);
    for r in 0..table.rows {
        let row = table.row(r);
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite embedding row {r} entering the lift"
            )));
        }
        let dst = out.row_mut(r);
        if euclidean {
            dst[1..].copy_from_slice(row);
        } else {
            dst.copy_from_slice(&geometry::lift_euclidean(row, k)?.coords()[..]);
        }
    }
    Ok(out)
}

/// Embedding -> propagation -> manifold lift for one domain.
pub fn forward_domain(
    params: &ModelParams,
    graph: &InteractionGraph,
    domain: Domain,
    settings: &ForwardSettings,
) -> Result<DomainForward> {
    let d = params.dim;
    let (users0, items0) = match domain {
        Domain::Source => (
            EmbeddingTable::from_vec(params.n_users_src, d, params.user_emb_src.clone()),
            EmbeddingTable::from_vec(params.n_items_src, d, params.item_emb_src.clone()),
        ),
        Domain::Target => (
            EmbeddingTable::from_vec(params.n_users_tgt, d, params.user_emb_tgt.clone()),
            EmbeddingTable::from_vec(params.n_items_tgt, d, params.item_emb_tgt.clone()),
        ),
    };
    let (users, items) = propagate(&users0, &items0, graph, settings.layers)?;
    let k = if settings.share_curvature {
        params.curvature(Domain::Source)
    } else {
        params.curvature(domain)
    };
    let lifted_users = lift_table(&users, k, settings.euclidean)?;
    let lifted_items = lift_table(&items, k, settings.euclidean)?;
    Ok(DomainForward {
        k,
        users,
        items,
        lifted_users,
        lifted_items,
    })
}

/// Both domains' forward outputs.
#[derive(Debug, Clone)]
pub struct HyperbolicState {
    pub source: DomainForward,
    pub target: DomainForward,
}

pub fn forward_all(
    params: &ModelParams,
    ds: &CrossDomainDataset,
    settings: &ForwardSettings,
) -> Result<HyperbolicState> {
    Ok(HyperbolicState {
        source: forward_domain(params, &ds.source, Domain::Source, settings)?,
        target: forward_domain(params, &ds.target, Domain::Target, settings)?,
    })
}

/// Ranking score: the negated squared distance, so larger is better and
/// score(x, x) = 0 is maximal.
pub fn score_rows(u: &[f64], i: &[f64], k: f64, euclidean: bool) -> f64 {
    if euclidean {
        -u.iter().zip(i).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    } else {
        -geometry::dist_sq_slices(u, i, k)
    }
}

/// Typed scoring surface over manifold points.
pub fn score(u: &LorentzPoint, i: &LorentzPoint) -> Result<f64> {
    let d = geometry::hyp_distance(u, i)?;
    Ok(-(d * d))
}

/// Aligned point tables produced by transferring one domain onto the other's
/// manifold. Values only — the stop-gradient rule lives in the taped
/// training path.
pub fn transfer_embeddings(
    state: &HyperbolicState,
    params: &ModelParams,
    direction: crate::data::TransferDirection,
) -> Result<(EmbeddingTable, EmbeddingTable, EmbeddingTable, EmbeddingTable)> {
    use crate::data::TransferDirection::*;
    let side = params.side();
    let (sending, receiving, w_send, w_recv, k_to) = match direction {
        SourceToTarget => (
            &state.source,
            &state.target,
            &params.w_s2t,
            &params.w_t2t,
            state.target.k,
        ),
        TargetToSource => (
            &state.target,
            &state.source,
            &params.w_t2s,
            &params.w_s2s,
            state.source.k,
        ),
    };
    let w_send = geometry::AlignmentTransform::new(w_send.clone(), side)?;
    let w_recv = geometry::AlignmentTransform::new(w_recv.clone(), side)?;
    let align_table = |table: &EmbeddingTable, k_from: f64, w: &geometry::AlignmentTransform| -> Result<EmbeddingTable> {
        let mut out = EmbeddingTable::zeros(table.rows, side);
        for r in 0..table.rows {
            let p = LorentzPoint::new(table.row(r).to_vec(), k_from)?;
            let aligned = geometry::align(&p, k_to, w)?;
            out.row_mut(r).copy_from_slice(aligned.coords());
        }
        Ok(out)
    };
    Ok((
        align_table(&sending.lifted_users, sending.k, &w_send)?,
        align_table(&sending.lifted_items, sending.k, &w_send)?,
        align_table(&receiving.lifted_users, receiving.k, &w_recv)?,
        align_table(&receiving.lifted_items, receiving.k, &w_recv)?,
    ))
}

/// Keys naming each parameter block, in checkpoint/optimizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKey {
    UserSrc,
    ItemSrc,
    UserTgt,
    ItemTgt,
    RawCurvSrc,
    RawCurvTgt,
    Ws2t,
    Wt2t,
    Wt2s,
    Ws2s,
}

pub const PARAM_ORDER: [ParamKey; 10] = [
    ParamKey::UserSrc,
    ParamKey::ItemSrc,
    ParamKey::UserTgt,
    ParamKey::ItemTgt,
    ParamKey::RawCurvSrc,
    ParamKey::RawCurvTgt,
    ParamKey::Ws2t,
    ParamKey::Wt2t,
    ParamKey::Wt2s,
    ParamKey::Ws2s,
];

/// Tape leaves for every parameter block, in `PARAM_ORDER`.
#[derive(Debug, Clone, Copy)]
pub struct ParamLeaves {
    pub user_src: NodeId,
    pub item_src: NodeId,
    pub user_tgt: NodeId,
    pub item_tgt: NodeId,
    pub raw_curv_src: NodeId,
    pub raw_curv_tgt: NodeId,
    pub w_s2t: NodeId,
    pub w_t2t: NodeId,
    pub w_t2s: NodeId,
    pub w_s2s: NodeId,
}

impl ParamLeaves {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        Self {
            user_src: tape.leaf(&params.user_emb_src),
            item_src: tape.leaf(&params.item_emb_src),
            user_tgt: tape.leaf(&params.user_emb_tgt),
            item_tgt: tape.leaf(&params.item_emb_tgt),
            raw_curv_src: tape.leaf(&[params.raw_curv_src]),
            raw_curv_tgt: tape.leaf(&[params.raw_curv_tgt]),
            w_s2t: tape.leaf(&params.w_s2t),
            w_t2t: tape.leaf(&params.w_t2t),
            w_t2s: tape.leaf(&params.w_t2s),
            w_s2s: tape.leaf(&params.w_s2s),
        }
    }

    pub fn by_key(&self, key: ParamKey) -> NodeId {
        match key {
            ParamKey::UserSrc => self.user_src,
            ParamKey::ItemSrc => self.item_src,
            ParamKey::UserTgt => self.user_tgt,
            ParamKey::ItemTgt => self.item_tgt,
            ParamKey::RawCurvSrc => self.raw_curv_src,
            ParamKey::RawCurvTgt => self.raw_curv_tgt,
            ParamKey::Ws2t => self.w_s2t,
            ParamKey::Wt2t => self.w_t2t,
            ParamKey::Wt2s => self.w_t2s,
            ParamKey::Ws2s => self.w_s2s,
        }
    }
}

/// Propagate on the tape: returns the layer-sum user and item table nodes.
/// Mirrors `propagation::propagate` node for node.
pub fn taped_propagate(
    tape: &mut Tape,
    users0: NodeId,
    items0: NodeId,
    graph: &InteractionGraph,
    layers: usize,
    d: usize,
) -> (NodeId, NodeId) {
    let (mut cur_u, mut cur_i) = (users0, items0);
    let (mut acc_u, mut acc_i) = (None, None);
    for _ in 0..layers {
        let agg_u = tape.aggregate(cur_i, graph.user_adj_arc(), d);
        let agg_i = tape.aggregate(cur_u, graph.item_adj_arc(), d);
        let next_u = tape.add(cur_u, agg_u);
        let next_i = tape.add(cur_i, agg_i);
        acc_u = Some(match acc_u {
            None => next_u,
            Some(a) => tape.add(a, next_u),
        });
        acc_i = Some(match acc_i {
            None => next_i,
            Some(a) => tape.add(a, next_i),
        });
        cur_u = next_u;
        cur_i = next_i;
    }
    (acc_u.unwrap(), acc_i.unwrap())
}

/// Seed and step counter stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
}

const MAGIC: &[u8; 5] = b"HCTS1";

/// Bit-exact binary checkpoint: magic, little-endian u64 counts
/// (d, users/items per domain), raw curvatures, every table and transform as
/// row-major little-endian doubles, then seed and step counter.
pub fn save_checkpoint(params: &ModelParams, meta: CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?,
    );
    let fail = |e: std::io::Error| Error::data(format!("checkpoint write failed: {e}"));
    out.write_all(MAGIC).map_err(fail)?;
    for count in [
        params.dim,
        params.n_users_src,
        params.n_items_src,
        params.n_users_tgt,
        params.n_items_tgt,
    ] {
        out.write_all(&(count as u64).to_le_bytes()).map_err(fail)?;
    }
    for scalar in [params.raw_curv_src, params.raw_curv_tgt] {
        out.write_all(&scalar.to_le_bytes()).map_err(fail)?;
    }
    for table in [
        &params.user_emb_src,
        &params.item_emb_src,
        &params.user_emb_tgt,
        &params.item_emb_tgt,
        &params.w_s2t,
        &params.w_t2t,
        &params.w_t2s,
        &params.w_s2s,
    ] {
        for v in table.iter() {
            out.write_all(&v.to_le_bytes()).map_err(fail)?;
        }
    }
    out.write_all(&meta.seed.to_le_bytes()).map_err(fail)?;
    out.write_all(&meta.step.to_le_bytes()).map_err(fail)?;
    out.flush().map_err(fail)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)
        .map_err(|_| Error::data("checkpoint is truncated before the magic bytes"))?;
    if &magic != MAGIC {
        return Err(Error::data("bad checkpoint magic bytes"));
    }
    let read_u64 = |f: &mut dyn Read| -> Result<u64> {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)
            .map_err(|_| Error::data("checkpoint is truncated"))?;
        Ok(u64::from_le_bytes(b))
    };
    let dim = read_u64(&mut file)? as usize;
    let n_users_src = read_u64(&mut file)? as usize;
    let n_items_src = read_u64(&mut file)? as usize;
    let n_users_tgt = read_u64(&mut file)? as usize;
    let n_items_tgt = read_u64(&mut file)? as usize;
    let read_f64s = |f: &mut dyn Read, n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            f.read_exact(&mut b)
                .map_err(|_| Error::data("checkpoint is truncated"))?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    };
    let scalars = read_f64s(&mut file, 2)?;
    let side = dim + 1;
    let user_emb_src = read_f64s(&mut file, n_users_src * dim)?;
    let item_emb_src = read_f64s(&mut file, n_items_src * dim)?;
    let user_emb_tgt = read_f64s(&mut file, n_users_tgt * dim)?;
    let item_emb_tgt = read_f64s(&mut file, n_items_tgt * dim)?;
    let w_s2t = read_f64s(&mut file, side * side)?;
    let w_t2t = read_f64s(&mut file, side * side)?;
    let w_t2s = read_f64s(&mut file, side * side)?;
    let w_s2s = read_f64s(&mut file, side * side)?;
    let read_meta = |f: &mut dyn Read| -> Result<u64> {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)
            .map_err(|_| Error::data("checkpoint is truncated"))?;
        Ok(u64::from_le_bytes(b))
    };
    let seed = read_meta(&mut file)?;
    let step = read_meta(&mut file)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)
        .map_err(|e| Error::data(format!("checkpoint read failed: {e}")))?;
    if !rest.is_empty() {
        return Err(Error::data("checkpoint has trailing bytes"));
    }
    Ok((
        ModelParams {
            dim,
            n_users_src,
            n_items_src,
            n_users_tgt,
            n_items_tgt,
            user_emb_src,
            item_emb_src,
            user_emb_tgt,
            item_emb_tgt,
            raw_curv_src: scalars[0],
            raw_curv_tgt: scalars[1],
            w_s2t,
            w_t2t,
            w_t2s,
            w_s2s,
        },
        CheckpointMeta { seed, step },
    ))
}
