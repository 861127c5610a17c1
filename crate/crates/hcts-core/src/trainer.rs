//! The multi-task training loop.
//!
//! Every step draws one ranking batch per domain and one contrastive batch
//! per transfer direction, assembles the joint objective
//! L = L_S + L_T + lambda_cts L_cts + lambda_clib L_clib on a fresh tape,
//! and takes a single optimizer step. Sending-domain embeddings enter the
//! contrastive terms behind a stop-gradient, so transfer never updates the
//! domain the knowledge comes from.

use crate::autodiff::{
    align_row, curv_nodes, DistOp, FrozenSpan, NodeId, OptimizerState, Tape,
};
use crate::data::{
    sample_cl_batch, sample_rank_batch, seeded_rng, split_leave_one_out, CLBatch,
    CrossDomainDataset, RankBatch, TransferDirection,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_domain, EvalOptions, HeadTailMode};
use crate::model::{
    taped_propagate, CheckpointMeta, Domain, ForwardSettings, ModelParams, ParamKey, ParamLeaves,
    PARAM_ORDER,
};
use crate::objectives::{
    center_calibration_on_tape, infonce_loss_on_tape, margin_loss_on_tape, total_loss,
    uu_loss_on_tape, CtsTerms, LossBreakdown,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const SALT_INIT: u64 = 0x11;
const SALT_RANK_SRC: u64 = 0x21;
const SALT_RANK_TGT: u64 = 0x22;
const SALT_CL_S2T: u64 = 0x23;
const SALT_CL_T2S: u64 = 0x24;
const SALT_VALIDATION: u64 = 0x31;

/// Global gradient-norm clip guarding the arcosh boundary region.
const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptChoice {
    #[default]
    Adam,
    Sgd,
}

/// Full training configuration, including the ablation switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub margin: f64,
    pub temperature: f64,
    pub lambda_cts: f64,
    pub lambda_clib: f64,
    pub n_neg_cl: usize,
    pub seed: u64,
    pub optimizer: OptChoice,
    /// Apply center calibration to the source domain as well.
    pub calibrate_both_domains: bool,
    /// Hold out a validation item per target user and keep the best
    /// checkpoint by validation NDCG@10.
    pub validation: bool,
    pub no_uu: bool,
    pub no_ui: bool,
    pub no_ii: bool,
    pub no_s2t: bool,
    pub no_t2s: bool,
    pub no_center: bool,
    pub share_curvature: bool,
    pub euclidean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 3,
            lr: 1e-3,
            batch_size: 1024,
            epochs: 50,
            margin: 0.1,
            temperature: 0.1,
            lambda_cts: 0.01,
            lambda_clib: 0.1,
            n_neg_cl: 20,
            seed: 42,
            optimizer: OptChoice::Adam,
            calibrate_both_domains: false,
            validation: false,
            no_uu: false,
            no_ui: false,
            no_ii: false,
            no_s2t: false,
            no_t2s: false,
            no_center: false,
            share_curvature: false,
            euclidean: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::usage("dim must be at least 2"));
        }
        if !(1..=6).contains(&self.layers) {
            return Err(Error::usage("layers must lie in 1..=6"));
        }
        if self.lr <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::usage("lr, batch_size and epochs must be positive"));
        }
        if self.margin < 0.0 {
            return Err(Error::usage("margin must be nonnegative"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::usage("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_cts) || !(0.0..=1.0).contains(&self.lambda_clib) {
            return Err(Error::usage("loss weights must lie in [0, 1]"));
        }
        if self.n_neg_cl == 0 {
            return Err(Error::usage("n_neg_cl must be positive"));
        }
        Ok(())
    }

    pub fn forward_settings(&self) -> ForwardSettings {
        ForwardSettings {
            layers: self.layers,
            euclidean: self.euclidean,
            share_curvature: self.share_curvature,
        }
    }
}

/// The effective objective after applying the ablation flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveComposition {
    pub rank_src: bool,
    pub rank_tgt: bool,
    pub uu_t: bool,
    pub ui_t: bool,
    pub ii_t: bool,
    pub uu_s: bool,
    pub ui_s: bool,
    pub ii_s: bool,
    pub calibration: bool,
    pub lambda_cts: f64,
    pub lambda_clib: f64,
}

impl ObjectiveComposition {
    pub fn s2t_active(&self) -> bool {
        self.uu_t || self.ui_t || self.ii_t
    }

    pub fn t2s_active(&self) -> bool {
        self.uu_s || self.ui_s || self.ii_s
    }
}

/// Resolve the Table-2 style flags into the set of active loss terms.
pub fn apply_ablation(cfg: &TrainConfig) -> ObjectiveComposition {
    let cts_on = cfg.lambda_cts > 0.0;
    let lambda_clib = if cfg.no_center { 0.0 } else { cfg.lambda_clib };
    ObjectiveComposition {
        rank_src: true,
        rank_tgt: true,
        uu_t: cts_on && !cfg.no_s2t && !cfg.no_uu,
        ui_t: cts_on && !cfg.no_s2t && !cfg.no_ui,
        ii_t: cts_on && !cfg.no_s2t && !cfg.no_ii,
        uu_s: cts_on && !cfg.no_t2s && !cfg.no_uu,
        ui_s: cts_on && !cfg.no_t2s && !cfg.no_ui,
        ii_s: cts_on && !cfg.no_t2s && !cfg.no_ii,
        calibration: lambda_clib > 0.0,
        lambda_cts: cfg.lambda_cts,
        lambda_clib,
    }
}

/// One epoch row of the history log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub k_src: f64,
    pub k_tgt: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ndcg: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters after the last epoch.
    pub params: ModelParams,
    /// Best checkpoint by validation NDCG@10 when validation is enabled,
    /// otherwise the final parameters.
    pub best_params: ModelParams,
    pub history: TrainHistory,
    pub steps: u64,
}

/// Batches consumed by one optimizer step.
pub struct StepBatches {
    pub rank_src: RankBatch,
    pub rank_tgt: RankBatch,
    pub cl_s2t: Option<CLBatch>,
    pub cl_t2s: Option<CLBatch>,
}

struct StepBuilder<'a> {
    tape: &'a mut Tape,
    cfg: &'a TrainConfig,
    leaves: ParamLeaves,
    mode_src: DistOp,
    mode_tgt: DistOp,
    prop: HashMap<(Domain, bool), NodeId>,
    lift_cache: HashMap<(Domain, bool, u32), NodeId>,
    align_cache: HashMap<(u8, bool, bool, u32), NodeId>,
    dim: usize,
}

impl<'a> StepBuilder<'a> {
    fn new(
        tape: &'a mut Tape,
        params: &ModelParams,
        ds: &CrossDomainDataset,
        cfg: &'a TrainConfig,
    ) -> Self {
        let leaves = ParamLeaves::register(tape, params);
        let d = params.dim;
        let (mode_src, mode_tgt) = if cfg.euclidean {
            (DistOp::Euclid, DistOp::Euclid)
        } else {
            let c_src = curv_nodes(tape, leaves.raw_curv_src);
            let c_tgt = if cfg.share_curvature {
                c_src
            } else {
                curv_nodes(tape, leaves.raw_curv_tgt)
            };
            (DistOp::Hyp(c_src), DistOp::Hyp(c_tgt))
        };
        let (pu_s, pi_s) = taped_propagate(tape, leaves.user_src, leaves.item_src, &ds.source, cfg.layers, d);
        let (pu_t, pi_t) = taped_propagate(tape, leaves.user_tgt, leaves.item_tgt, &ds.target, cfg.layers, d);
        let mut prop = HashMap::new();
        prop.insert((Domain::Source, true), pu_s);
        prop.insert((Domain::Source, false), pi_s);
        prop.insert((Domain::Target, true), pu_t);
        prop.insert((Domain::Target, false), pi_t);
        Self {
            tape,
            cfg,
            leaves,
            mode_src,
            mode_tgt,
            prop,
            lift_cache: HashMap::new(),
            align_cache: HashMap::new(),
            dim: d,
        }
    }

    fn mode(&self, domain: Domain) -> DistOp {
        match domain {
            Domain::Source => self.mode_src,
            Domain::Target => self.mode_tgt,
        }
    }

    /// Lifted point node for one row of one propagated table, shared across
    /// every loss that touches the same row in this step.
    fn lifted(&mut self, domain: Domain, is_user: bool, row: u32) -> NodeId {
        if let Some(&hit) = self.lift_cache.get(&(domain, is_user, row)) {
            return hit;
        }
        let table = self.prop[&(domain, is_user)];
        let e = self.tape.gather(table, row as usize, self.dim);
        let point = self.mode(domain).lift(self.tape, e);
        self.lift_cache.insert((domain, is_user, row), point);
        point
    }

    /// Aligned point node for the contrastive terms. Sending-side points are
    /// wrapped in stop-gradient before alignment, so their embedding tables
    /// receive no transfer gradient while the alignment matrix still trains.
    fn aligned(&mut self, dir: TransferDirection, sending: bool, is_user: bool, row: u32) -> NodeId {
        let key = (matches!(dir, TransferDirection::TargetToSource) as u8, sending, is_user, row);
        if let Some(&hit) = self.align_cache.get(&key) {
            return hit;
        }
        let (domain, w, to_mode) = match (dir, sending) {
            (TransferDirection::SourceToTarget, true) => {
                (Domain::Source, self.leaves.w_s2t, self.mode_tgt)
            }
            (TransferDirection::SourceToTarget, false) => {
                (Domain::Target, self.leaves.w_t2t, self.mode_tgt)
            }
            (TransferDirection::TargetToSource, true) => {
                (Domain::Target, self.leaves.w_t2s, self.mode_src)
            }
            (TransferDirection::TargetToSource, false) => {
                (Domain::Source, self.leaves.w_s2s, self.mode_src)
            }
        };
        let mut point = self.lifted(domain, is_user, row);
        if sending {
            point = self.tape.stop_gradient(point);
        }
        let from_mode = self.mode(domain);
        let out = align_row(self.tape, point, from_mode, to_mode, w);
        self.align_cache.insert(key, out);
        out
    }

    fn rank_loss(&mut self, domain: Domain, batch: &RankBatch) -> NodeId {
        let mut triples = Vec::with_capacity(batch.rows.len());
        for &(u, pos, neg) in &batch.rows {
            let un = self.lifted(domain, true, u);
            let pn = self.lifted(domain, false, pos);
            let nn = self.lifted(domain, false, neg);
            triples.push((un, pn, nn));
        }
        let mode = self.mode(domain);
        margin_loss_on_tape(self.tape, &triples, mode, self.cfg.margin)
    }

    /// The (uu, ui, ii) nodes of one direction; uu needs at least two rows.
    fn cl_terms(
        &mut self,
        batch: &CLBatch,
        want_uu: bool,
        want_ui: bool,
        want_ii: bool,
    ) -> (Option<NodeId>, Option<NodeId>, Option<NodeId>) {
        let dir = batch.direction;
        let on_mode = match dir {
            TransferDirection::SourceToTarget => self.mode_tgt,
            TransferDirection::TargetToSource => self.mode_src,
        };
        let tau = self.cfg.temperature;
        let row_user = |r: &crate::data::CLRow, sending: bool| -> u32 {
            match (dir, sending) {
                (TransferDirection::SourceToTarget, true) => r.user_src,
                (TransferDirection::SourceToTarget, false) => r.user_tgt,
                (TransferDirection::TargetToSource, true) => r.user_tgt,
                (TransferDirection::TargetToSource, false) => r.user_src,
            }
        };
        let row_pos_item = |r: &crate::data::CLRow, sending: bool| -> u32 {
            match (dir, sending) {
                (TransferDirection::SourceToTarget, true) => r.pos_item_src,
                (TransferDirection::SourceToTarget, false) => r.pos_item_tgt,
                (TransferDirection::TargetToSource, true) => r.pos_item_tgt,
                (TransferDirection::TargetToSource, false) => r.pos_item_src,
            }
        };

        let uu = if want_uu && batch.rows.len() >= 2 {
            let anchors: Vec<NodeId> = batch
                .rows
                .iter()
                .map(|r| self.aligned(dir, true, true, row_user(r, true)))
                .collect();
            let others: Vec<NodeId> = batch
                .rows
                .iter()
                .map(|r| self.aligned(dir, false, true, row_user(r, false)))
                .collect();
            Some(uu_loss_on_tape(self.tape, &anchors, &others, tau, on_mode))
        } else {
            None
        };

        let sending_negs = |b: &mut Self, r: &crate::data::CLRow| -> Vec<NodeId> {
            r.neg_items
                .iter()
                .map(|&i| b.aligned(dir, true, false, i))
                .collect()
        };

        let ui = if want_ui {
            let anchors: Vec<NodeId> = batch
                .rows
                .iter()
                .map(|r| self.aligned(dir, false, true, row_user(r, false)))
                .collect();
            let positives: Vec<NodeId> = batch
                .rows
                .iter()
                .map(|r| self.aligned(dir, true, false, row_pos_item(r, true)))
                .collect();
            let negatives: Vec<Vec<NodeId>> = batch
                .rows
                .iter()
                .map(|r| sending_negs(self, r))
                .collect();
            Some(infonce_loss_on_tape(
                self.tape, &anchors, &positives, &negatives, tau, on_mode,
            ))
        } else {
            None
        };

        let ii = if want_ii {
            let anchors: Vec<NodeId> = batch
                .rows
                .iter()
                .map(|r| self.aligned(dir, false, false, row_pos_item(r, false)))
                .collect();
            let positives: Vec<NodeId> = batch
                .rows
                .iter()
                .map(|r| self.aligned(dir, true, false, row_pos_item(r, true)))
                .collect();
            let negatives: Vec<Vec<NodeId>> = batch
                .rows
                .iter()
                .map(|r| sending_negs(self, r))
                .collect();
            Some(infonce_loss_on_tape(
                self.tape, &anchors, &positives, &negatives, tau, on_mode,
            ))
        } else {
            None
        };

        (uu, ui, ii)
    }

    fn calibration(&mut self, ds: &CrossDomainDataset) -> NodeId {
        let mut domains = vec![Domain::Target];
        if self.cfg.calibrate_both_domains {
            domains.push(Domain::Source);
        }
        let mut parts = Vec::new();
        for domain in domains {
            let graph = match domain {
                Domain::Source => &ds.source,
                Domain::Target => &ds.target,
            };
            let mut points = Vec::with_capacity(graph.num_users() + graph.num_items());
            for u in 0..graph.num_users() as u32 {
                points.push(self.lifted(domain, true, u));
            }
            for i in 0..graph.num_items() as u32 {
                points.push(self.lifted(domain, false, i));
            }
            let mode = self.mode(domain);
            parts.push(center_calibration_on_tape(self.tape, &points, mode));
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            self.tape.sum_list(&parts)
        }
    }
}

/// The assembled per-step objective: component values for the history and
/// the total node for the backward sweep.
pub struct StepObjective {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    pub leaves: ParamLeaves,
}

/// Record one full training step's objective on the tape.
pub fn build_step_objective(
    tape: &mut Tape,
    params: &ModelParams,
    ds: &CrossDomainDataset,
    cfg: &TrainConfig,
    comp: &ObjectiveComposition,
    batches: &StepBatches,
) -> Result<StepObjective> {
    let mut b = StepBuilder::new(tape, params, ds, cfg);

    let l_src = comp
        .rank_src
        .then(|| b.rank_loss(Domain::Source, &batches.rank_src));
    let l_tgt = comp
        .rank_tgt
        .then(|| b.rank_loss(Domain::Target, &batches.rank_tgt));

    let (mut uu_t, mut ui_t, mut ii_t) = (None, None, None);
    if let Some(batch) = &batches.cl_s2t {
        (uu_t, ui_t, ii_t) = b.cl_terms(batch, comp.uu_t, comp.ui_t, comp.ii_t);
    }
    let (mut uu_s, mut ui_s, mut ii_s) = (None, None, None);
    if let Some(batch) = &batches.cl_t2s {
        (uu_s, ui_s, ii_s) = b.cl_terms(batch, comp.uu_s, comp.ui_s, comp.ii_s);
    }
    let clib = comp.calibration.then(|| b.calibration(ds));
    let leaves = b.leaves;

    let zero = tape.scalar_const(0.0);
    let l_src = l_src.unwrap_or(zero);
    let l_tgt = l_tgt.unwrap_or(zero);
    let mut total = tape.add(l_src, l_tgt);
    let cts_nodes: Vec<NodeId> = [uu_t, ui_t, ii_t, uu_s, ui_s, ii_s]
        .into_iter()
        .flatten()
        .collect();
    if !cts_nodes.is_empty() && comp.lambda_cts > 0.0 {
        let cts_sum = tape.sum_list(&cts_nodes);
        let weighted = tape.scale_const(cts_sum, comp.lambda_cts);
        total = tape.add(total, weighted);
    }
    if let Some(c) = clib {
        let weighted = tape.scale_const(c, comp.lambda_clib);
        total = tape.add(total, weighted);
    }

    let terms = CtsTerms {
        uu_t: uu_t.map(|n| tape.scalar(n)),
        ui_t: ui_t.map(|n| tape.scalar(n)),
        ii_t: ii_t.map(|n| tape.scalar(n)),
        uu_s: uu_s.map(|n| tape.scalar(n)),
        ui_s: ui_s.map(|n| tape.scalar(n)),
        ii_s: ii_s.map(|n| tape.scalar(n)),
    };
    let breakdown = total_loss(
        tape.scalar(l_src),
        tape.scalar(l_tgt),
        &terms,
        clib.map(|c| tape.scalar(c)).unwrap_or(0.0),
        comp.lambda_cts,
        comp.lambda_clib,
    )?;
    Ok(StepObjective {
        total,
        breakdown,
        leaves,
    })
}

/// Gradients per parameter block, in `PARAM_ORDER`.
pub fn collect_gradients(
    tape: &Tape,
    objective: &StepObjective,
) -> Result<Vec<Vec<f64>>> {
    let grads = tape.backward(objective.total)?;
    Ok(PARAM_ORDER
        .iter()
        .map(|&key| tape.grad(&grads, objective.leaves.by_key(key)).to_vec())
        .collect())
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

fn apply_update(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    opt: &mut OptimizerState,
    share_curvature: bool,
) -> Result<()> {
    let side = params.side();
    let mut raw_src = [params.raw_curv_src];
    let mut raw_tgt = [params.raw_curv_tgt];
    {
        let mut blocks: Vec<&mut [f64]> = Vec::with_capacity(10);
        blocks.push(&mut params.user_emb_src);
        blocks.push(&mut params.item_emb_src);
        blocks.push(&mut params.user_emb_tgt);
        blocks.push(&mut params.item_emb_tgt);
        blocks.push(&mut raw_src);
        blocks.push(&mut raw_tgt);
        blocks.push(&mut params.w_s2t);
        blocks.push(&mut params.w_t2t);
        blocks.push(&mut params.w_t2s);
        blocks.push(&mut params.w_s2s);
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut frozen: Vec<FrozenSpan> = (6..10)
            .map(|param| FrozenSpan {
                param,
                start: 0,
                len: side,
            })
            .collect();
        if share_curvature {
            frozen.push(FrozenSpan {
                param: 5,
                start: 0,
                len: 1,
            });
        }
        opt.step(&mut blocks, &grad_refs, &frozen)?;
    }
    params.raw_curv_src = raw_src[0];
    params.raw_curv_tgt = if share_curvature {
        raw_src[0]
    } else {
        raw_tgt[0]
    };
    Ok(())
}

/// Train from a fresh initialization. Deterministic under the config seed.
pub fn train(cfg: &TrainConfig, ds: &CrossDomainDataset) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.test_pairs_target.is_empty() && ds.test_pairs_source.is_empty() {
        return Err(Error::usage("dataset has no train/test split"));
    }
    let comp = apply_ablation(cfg);

    // With validation enabled, a second leave-one-out on the target train
    // graph carves the validation pairs; training then runs on the reduced
    // adjacency so the held-out validation items are never seen.
    let (train_ds, val_ds) = if cfg.validation {
        let (reduced, val_pairs) = split_leave_one_out(&ds.target, cfg.seed, SALT_VALIDATION)?;
        let inner = CrossDomainDataset::from_parts(
            ds.source.clone(),
            reduced,
            ds.overlap.clone(),
            ds.test_pairs_source.clone(),
            ds.test_pairs_target.clone(),
        );
        let mut val = inner.clone();
        val.test_pairs_target = val_pairs;
        (inner, Some(val))
    } else {
        (ds.clone(), None)
    };

    let mut init_rng = seeded_rng(cfg.seed, SALT_INIT);
    let mut params = crate::model::init_params(cfg.dim, (&train_ds.source, &train_ds.target), &mut init_rng)?;
    let mut opt = match cfg.optimizer {
        OptChoice::Adam => OptimizerState::adam(cfg.lr),
        OptChoice::Sgd => OptimizerState::sgd(cfg.lr),
    };

    let mut rng_rank_src = seeded_rng(cfg.seed, SALT_RANK_SRC);
    let mut rng_rank_tgt = seeded_rng(cfg.seed, SALT_RANK_TGT);
    let mut rng_cl_s2t = seeded_rng(cfg.seed, SALT_CL_S2T);
    let mut rng_cl_t2s = seeded_rng(cfg.seed, SALT_CL_T2S);

    let steps_per_epoch = train_ds.target.num_edges().div_ceil(cfg.batch_size).max(1);
    let cl_batch_size = cfg.batch_size.min(train_ds.overlap.len());
    let need_cl = (comp.s2t_active() || comp.t2s_active()) && cl_batch_size > 0;

    let mut tape = Tape::new();
    let mut history = TrainHistory::default();
    let mut best_params = params.clone();
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut steps = 0u64;

    for epoch in 1..=cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut sums = LossBreakdown {
            l_src_rank: 0.0,
            l_tgt_rank: 0.0,
            l_uu_t: 0.0,
            l_ui_t: 0.0,
            l_ii_t: 0.0,
            l_uu_s: 0.0,
            l_ui_s: 0.0,
            l_ii_s: 0.0,
            l_cts: 0.0,
            l_clib: 0.0,
            total: 0.0,
        };
        for _ in 0..steps_per_epoch {
            let batches = StepBatches {
                rank_src: sample_rank_batch(&train_ds.source, cfg.batch_size, &mut rng_rank_src)?,
                rank_tgt: sample_rank_batch(&train_ds.target, cfg.batch_size, &mut rng_rank_tgt)?,
                cl_s2t: if need_cl && comp.s2t_active() {
                    Some(sample_cl_batch(
                        &train_ds,
                        TransferDirection::SourceToTarget,
                        cl_batch_size,
                        cfg.n_neg_cl,
                        &mut rng_cl_s2t,
                    )?)
                } else {
                    None
                },
                cl_t2s: if need_cl && comp.t2s_active() {
                    Some(sample_cl_batch(
                        &train_ds,
                        TransferDirection::TargetToSource,
                        cl_batch_size,
                        cfg.n_neg_cl,
                        &mut rng_cl_t2s,
                    )?)
                } else {
                    None
                },
            };
            tape.reset();
            let objective = build_step_objective(&mut tape, &params, &train_ds, cfg, &comp, &batches)?;
            let mut grads = collect_gradients(&tape, &objective)?;
            clip_global_norm(&mut grads, CLIP_NORM);
            apply_update(&mut params, &grads, &mut opt, cfg.share_curvature)?;
            steps += 1;

            let b = &objective.breakdown;
            sums.l_src_rank += b.l_src_rank;
            sums.l_tgt_rank += b.l_tgt_rank;
            sums.l_uu_t += b.l_uu_t;
            sums.l_ui_t += b.l_ui_t;
            sums.l_ii_t += b.l_ii_t;
            sums.l_uu_s += b.l_uu_s;
            sums.l_ui_s += b.l_ui_s;
            sums.l_ii_s += b.l_ii_s;
            sums.l_cts += b.l_cts;
            sums.l_clib += b.l_clib;
            sums.total += b.total;
        }
        let n = steps_per_epoch as f64;
        let mean = LossBreakdown {
            l_src_rank: sums.l_src_rank / n,
            l_tgt_rank: sums.l_tgt_rank / n,
            l_uu_t: sums.l_uu_t / n,
            l_ui_t: sums.l_ui_t / n,
            l_ii_t: sums.l_ii_t / n,
            l_uu_s: sums.l_uu_s / n,
            l_ui_s: sums.l_ui_s / n,
            l_ii_s: sums.l_ii_s / n,
            l_cts: sums.l_cts / n,
            l_clib: sums.l_clib / n,
            total: sums.total / n,
        };
        if !mean.total.is_finite() {
            return Err(Error::numeric(format!(
                "epoch {epoch} produced a non-finite mean loss"
            )));
        }
        let val_ndcg = if let Some(vds) = &val_ds {
            let opts = EvalOptions {
                k: 10,
                head_tail_mode: HeadTailMode::ItemCount,
                forward: cfg.forward_settings(),
            };
            let report = evaluate_domain(&params, vds, Domain::Target, &opts)?;
            if report.overall.ndcg_at_k > best_ndcg {
                best_ndcg = report.overall.ndcg_at_k;
                best_params = params.clone();
            }
            Some(report.overall.ndcg_at_k)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: mean,
            k_src: params.curvature(Domain::Source),
            k_tgt: if cfg.share_curvature {
                params.curvature(Domain::Source)
            } else {
                params.curvature(Domain::Target)
            },
            seconds: epoch_start.elapsed().as_secs_f64(),
            val_ndcg,
        });
    }
    if val_ds.is_none() {
        best_params = params.clone();
    }
    Ok(TrainResult {
        params,
        best_params,
        history,
        steps,
    })
}

/// Checkpoint metadata for a finished run.
pub fn checkpoint_meta(cfg: &TrainConfig, result: &TrainResult) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        step: result.steps,
    }
}

/// Convenience: index of a parameter block in `PARAM_ORDER`.
pub fn param_index(key: ParamKey) -> usize {
    PARAM_ORDER.iter().position(|&k| k == key).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            dim: 8,
            layers: 2,
            lr: 5e-3,
            batch_size: 64,
            epochs: 3,
            n_neg_cl: 5,
            seed,
            ..Default::default()
        }
    }

    fn tiny_ds(seed: u64) -> CrossDomainDataset {
        gen_synthetic(
            &SyntheticConfig {
                users: 30,
                items_src: 25,
                items_tgt: 20,
                overlap_fraction: 0.5,
                zipf_exponent: 1.0,
                cross_correlation: 0.8,
                edges_src: 250,
                edges_tgt: 160,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn ablation_flags_drop_named_terms() {
        let mut cfg = tiny_cfg(1);
        cfg.no_s2t = true;
        let comp = apply_ablation(&cfg);
        assert!(!comp.uu_t && !comp.ui_t && !comp.ii_t);
        assert!(comp.uu_s && comp.ui_s && comp.ii_s);

        let mut cfg = tiny_cfg(1);
        cfg.no_uu = true;
        let comp = apply_ablation(&cfg);
        assert!(!comp.uu_t && !comp.uu_s);
        assert!(comp.ui_t && comp.ii_s);

        let mut cfg = tiny_cfg(1);
        cfg.no_center = true;
        let comp = apply_ablation(&cfg);
        assert!(!comp.calibration);
        assert_eq!(comp.lambda_clib, 0.0);
    }

    #[test]
    fn degenerate_weights_reduce_to_rank_losses() {
        let ds = tiny_ds(2);
        let mut cfg = tiny_cfg(3);
        cfg.lambda_cts = 0.0;
        cfg.lambda_clib = 0.0;
        cfg.epochs = 1;
        let result = train(&cfg, &ds).unwrap();
        let row = &result.history.epochs[0].loss;
        assert_eq!(row.l_cts, 0.0);
        assert_eq!(row.l_clib, 0.0);
        assert!((row.total - (row.l_src_rank + row.l_tgt_rank)).abs() <= 1e-10);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = tiny_ds(4);
        let cfg = tiny_cfg(5);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.epochs.len(), b.history.epochs.len());
        for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(x.loss, y.loss);
        }
    }

    #[test]
    fn share_curvature_keeps_both_domains_bitwise_equal() {
        let ds = tiny_ds(6);
        let mut cfg = tiny_cfg(7);
        cfg.share_curvature = true;
        let result = train(&cfg, &ds).unwrap();
        for row in &result.history.epochs {
            assert_eq!(row.k_src.to_bits(), row.k_tgt.to_bits());
        }
        assert_eq!(result.params.raw_curv_src, result.params.raw_curv_tgt);

        // Without sharing, the curvatures drift apart.
        let mut cfg2 = tiny_cfg(7);
        cfg2.share_curvature = false;
        let free = train(&cfg2, &ds).unwrap();
        assert_ne!(free.params.raw_curv_src, free.params.raw_curv_tgt);
    }

    #[test]
    fn no_transfer_flags_zero_the_contrastive_loss() {
        let ds = tiny_ds(8);
        let mut cfg = tiny_cfg(9);
        cfg.no_s2t = true;
        cfg.no_t2s = true;
        cfg.epochs = 2;
        let result = train(&cfg, &ds).unwrap();
        for row in &result.history.epochs {
            assert_eq!(row.loss.l_cts, 0.0);
        }
    }

    #[test]
    fn frozen_rows_survive_training() {
        let ds = tiny_ds(10);
        let cfg = tiny_cfg(11);
        let result = train(&cfg, &ds).unwrap();
        let side = result.params.side();
        for w in [
            &result.params.w_s2t,
            &result.params.w_t2t,
            &result.params.w_t2s,
            &result.params.w_s2s,
        ] {
            assert!(w[..side].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn curvatures_stay_positive_and_history_is_finite() {
        let ds = tiny_ds(12);
        let mut cfg = tiny_cfg(13);
        cfg.epochs = 5;
        cfg.lr = 1e-2;
        let result = train(&cfg, &ds).unwrap();
        for row in &result.history.epochs {
            assert!(row.k_src > 0.0 && row.k_tgt > 0.0);
            assert!(row.loss.total.is_finite());
            assert!(row.loss.l_cts.is_finite());
        }
    }

    #[test]
    fn stop_gradient_blocks_source_tables_through_s2t_terms() {
        // Only the source-to-target contrastive terms active: gradients on
        // the source embedding tables must be exactly zero.
        let ds = tiny_ds(14);
        let cfg = tiny_cfg(15);
        let comp = ObjectiveComposition {
            rank_src: false,
            rank_tgt: false,
            uu_t: true,
            ui_t: true,
            ii_t: true,
            uu_s: false,
            ui_s: false,
            ii_s: false,
            calibration: false,
            lambda_cts: 1.0,
            lambda_clib: 0.0,
        };
        let mut init_rng = seeded_rng(cfg.seed, SALT_INIT);
        let params =
            crate::model::init_params(cfg.dim, (&ds.source, &ds.target), &mut init_rng).unwrap();
        let mut rng = seeded_rng(cfg.seed, 99);
        let batches = StepBatches {
            rank_src: sample_rank_batch(&ds.source, 4, &mut rng).unwrap(),
            rank_tgt: sample_rank_batch(&ds.target, 4, &mut rng).unwrap(),
            cl_s2t: Some(
                sample_cl_batch(&ds, TransferDirection::SourceToTarget, 8, 4, &mut rng).unwrap(),
            ),
            cl_t2s: None,
        };
        let mut tape = Tape::new();
        let obj = build_step_objective(&mut tape, &params, &ds, &cfg, &comp, &batches).unwrap();
        let grads = collect_gradients(&tape, &obj).unwrap();
        let user_src = &grads[param_index(ParamKey::UserSrc)];
        let item_src = &grads[param_index(ParamKey::ItemSrc)];
        assert!(user_src.iter().all(|&g| g == 0.0), "source user tables leak gradient");
        assert!(item_src.iter().all(|&g| g == 0.0), "source item tables leak gradient");
        // Receiving tables and both alignment matrices do train.
        assert!(grads[param_index(ParamKey::UserTgt)].iter().any(|&g| g != 0.0));
        assert!(grads[param_index(ParamKey::Ws2t)].iter().any(|&g| g != 0.0));
        assert!(grads[param_index(ParamKey::Wt2t)].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn euclidean_mode_trains() {
        let ds = tiny_ds(16);
        let mut cfg = tiny_cfg(17);
        cfg.euclidean = true;
        cfg.epochs = 2;
        let result = train(&cfg, &ds).unwrap();
        assert!(result.history.epochs.iter().all(|r| r.loss.total.is_finite()));
    }

    #[test]
    fn loss_descends_on_a_small_run() {
        let ds = tiny_ds(18);
        let mut cfg = tiny_cfg(19);
        cfg.epochs = 10;
        cfg.lr = 1e-2;
        let result = train(&cfg, &ds).unwrap();
        let first = result.history.epochs.first().unwrap().loss.total;
        let last = result.history.epochs.last().unwrap().loss.total;
        assert!(last < first, "loss failed to descend: {first} -> {last}");
    }

    #[test]
    fn validation_tracks_a_best_checkpoint() {
        let ds = tiny_ds(20);
        let mut cfg = tiny_cfg(21);
        cfg.validation = true;
        cfg.epochs = 3;
        let result = train(&cfg, &ds).unwrap();
        assert!(result.history.epochs.iter().all(|r| r.val_ndcg.is_some()));
    }
}
