//! Loss terms: hyperbolic margin ranking, the six contrastive transfer
//! terms, embedding-center calibration, and their weighted composition.
//!
//! Each loss exists once, as a tape builder; the typed functions wrap a
//! scratch tape so unit values and training gradients come from the same
//! formula. Contrastive denominators exclude the positive term, exactly as
//! the transfer objective is written; batch reduction is the mean so the
//! loss weights stay comparable across batch sizes.

use crate::autodiff::{curv_nodes_const, similarity, DistOp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::LorentzPoint;
use serde::{Deserialize, Serialize};

/// Mean over rows of max(d(u, pos)^2 - d(u, neg)^2 + margin, 0).
pub fn margin_loss_on_tape(
    t: &mut Tape,
    triples: &[(NodeId, NodeId, NodeId)],
    mode: DistOp,
    margin: f64,
) -> NodeId {
    assert!(!triples.is_empty());
    let mut rows = Vec::with_capacity(triples.len());
    for &(u, pos, neg) in triples {
        let dp = mode.dist_sq(t, u, pos);
        let dn = mode.dist_sq(t, u, neg);
        let diff = t.sub(dp, dn);
        let shifted = t.add_const(diff, margin);
        rows.push(t.relu(shifted));
    }
    t.mean_of(&rows)
}

/// User-user contrastive loss over one batch: anchors are the sending-side
/// aligned users, the denominator runs over the other batch rows j != i.
pub fn uu_loss_on_tape(
    t: &mut Tape,
    anchors_a: &[NodeId],
    users_b: &[NodeId],
    tau: f64,
    mode: DistOp,
) -> NodeId {
    let n = anchors_a.len();
    assert!(n >= 2, "user-user contrastive batch needs >= 2 rows");
    assert_eq!(n, users_b.len());
    let inv_tau = 1.0 / tau;
    let mut rows = Vec::with_capacity(n);
    let mut scaled_row = Vec::with_capacity(n);
    for i in 0..n {
        scaled_row.clear();
        let mut numerator = None;
        for (j, &b) in users_b.iter().enumerate() {
            let s = similarity(t, anchors_a[i], b, mode);
            let scaled = t.scale_const(s, inv_tau);
            if j == i {
                numerator = Some(scaled);
            } else {
                scaled_row.push(scaled);
            }
        }
        let lse = t.log_sum_exp(&scaled_row);
        rows.push(t.sub(lse, numerator.unwrap()));
    }
    t.mean_of(&rows)
}

/// Shared InfoNCE-style form for the user-item and item-item losses: one
/// positive per row, the denominator over that row's negatives only.
pub fn infonce_loss_on_tape(
    t: &mut Tape,
    anchors: &[NodeId],
    positives: &[NodeId],
    negatives: &[Vec<NodeId>],
    tau: f64,
    mode: DistOp,
) -> NodeId {
    let n = anchors.len();
    assert!(n > 0);
    assert_eq!(n, positives.len());
    assert_eq!(n, negatives.len());
    let inv_tau = 1.0 / tau;
    let mut rows = Vec::with_capacity(n);
    let mut scaled = Vec::new();
    for i in 0..n {
        assert!(!negatives[i].is_empty(), "need at least one negative");
        let sp = similarity(t, anchors[i], positives[i], mode);
        let num = t.scale_const(sp, inv_tau);
        scaled.clear();
        for &neg in &negatives[i] {
            let s = similarity(t, anchors[i], neg, mode);
            scaled.push(t.scale_const(s, inv_tau));
        }
        let lse = t.log_sum_exp(&scaled);
        rows.push(t.sub(lse, num));
    }
    t.mean_of(&rows)
}

/// Squared norm of the mean origin-tangent embedding: log-map every point,
/// average, take the squared Euclidean norm (the tangent-space origin
/// represents the pole).
pub fn center_calibration_on_tape(t: &mut Tape, points: &[NodeId], mode: DistOp) -> NodeId {
    assert!(!points.is_empty());
    let logs: Vec<NodeId> = points.iter().map(|&p| mode.log(t, p)).collect();
    let total = t.sum_list(&logs);
    let mean = t.scale_const(total, 1.0 / points.len() as f64);
    t.dot(mean, mean)
}

fn shared_curvature(points: &[&[LorentzPoint]]) -> Result<f64> {
    let mut k = None;
    for group in points {
        for p in group.iter() {
            match k {
                None => k = Some(p.curvature_k()),
                Some(kv) => {
                    if (kv - p.curvature_k()).abs() > 1e-12 * kv.max(1.0) {
                        return Err(Error::usage(format!(
                            "loss inputs mix manifolds: K = {kv} vs {}",
                            p.curvature_k()
                        )));
                    }
                }
            }
        }
    }
    k.ok_or_else(|| Error::usage("loss needs at least one point"))
}

fn leaves(t: &mut Tape, points: &[LorentzPoint]) -> Vec<NodeId> {
    points.iter().map(|p| t.leaf(p.coords())).collect()
}

/// Hyperbolic margin ranking loss over typed points.
pub fn margin_loss(
    users: &[LorentzPoint],
    positives: &[LorentzPoint],
    negatives: &[LorentzPoint],
    margin: f64,
) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::usage("margin must be nonnegative"));
    }
    if users.len() != positives.len() || users.len() != negatives.len() || users.is_empty() {
        return Err(Error::usage("margin loss needs equal, nonempty batches"));
    }
    let k = shared_curvature(&[users, positives, negatives])?;
    let mut t = Tape::new();
    let c = curv_nodes_const(&mut t, k);
    let mode = DistOp::Hyp(c);
    let (us, ps, ns) = (leaves(&mut t, users), leaves(&mut t, positives), leaves(&mut t, negatives));
    let triples: Vec<_> = us
        .iter()
        .zip(&ps)
        .zip(&ns)
        .map(|((&u, &p), &n)| (u, p, n))
        .collect();
    let out = margin_loss_on_tape(&mut t, &triples, mode, margin);
    Ok(t.scalar(out))
}

/// Contrastive similarity sim(x, y) = -d(x, y).
pub fn cl_similarity(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    Ok(-crate::geometry::hyp_distance(x, y)?)
}

/// User-user contrastive loss, in-batch denominator excluding the positive.
pub fn uu_loss(
    aligned_users_a: &[LorentzPoint],
    aligned_users_b: &[LorentzPoint],
    tau: f64,
) -> Result<f64> {
    if aligned_users_a.len() < 2 || aligned_users_a.len() != aligned_users_b.len() {
        return Err(Error::usage(
            "user-user loss needs matching batches with at least 2 rows",
        ));
    }
    if tau <= 0.0 {
        return Err(Error::usage("temperature must be positive"));
    }
    let k = shared_curvature(&[aligned_users_a, aligned_users_b])?;
    let mut t = Tape::new();
    let c = curv_nodes_const(&mut t, k);
    let (a, b) = (leaves(&mut t, aligned_users_a), leaves(&mut t, aligned_users_b));
    let out = uu_loss_on_tape(&mut t, &a, &b, tau, DistOp::Hyp(c));
    Ok(t.scalar(out))
}

/// User-item contrastive loss: anchor is the receiving-domain user, the
/// positive and negatives are sending-domain items.
pub fn ui_loss(
    aligned_users_b: &[LorentzPoint],
    aligned_pos_items_a: &[LorentzPoint],
    aligned_neg_items_a: &[Vec<LorentzPoint>],
    tau: f64,
) -> Result<f64> {
    if aligned_users_b.is_empty()
        || aligned_users_b.len() != aligned_pos_items_a.len()
        || aligned_users_b.len() != aligned_neg_items_a.len()
    {
        return Err(Error::usage("user-item loss needs matching nonempty batches"));
    }
    if tau <= 0.0 {
        return Err(Error::usage("temperature must be positive"));
    }
    if aligned_neg_items_a.iter().any(|n| n.is_empty()) {
        return Err(Error::usage("user-item loss needs at least one negative per row"));
    }
    let negs_flat: Vec<LorentzPoint> = aligned_neg_items_a.iter().flatten().cloned().collect();
    let k = shared_curvature(&[aligned_users_b, aligned_pos_items_a, &negs_flat])?;
    let mut t = Tape::new();
    let c = curv_nodes_const(&mut t, k);
    let anchors = leaves(&mut t, aligned_users_b);
    let pos = leaves(&mut t, aligned_pos_items_a);
    let negs: Vec<Vec<NodeId>> = aligned_neg_items_a
        .iter()
        .map(|row| leaves(&mut t, row))
        .collect();
    let out = infonce_loss_on_tape(&mut t, &anchors, &pos, &negs, tau, DistOp::Hyp(c));
    Ok(t.scalar(out))
}

/// Item-item contrastive loss: the user-item form with the receiving-domain
/// positive item as the anchor.
pub fn ii_loss(
    aligned_pos_items_b: &[LorentzPoint],
    aligned_pos_items_a: &[LorentzPoint],
    aligned_neg_items_a: &[Vec<LorentzPoint>],
    tau: f64,
) -> Result<f64> {
    ui_loss(aligned_pos_items_b, aligned_pos_items_a, aligned_neg_items_a, tau)
}

/// The six contrastive term values; `None` marks a term dropped by an
/// ablation flag.
#[derive(Debug, Clone, Copy, Default)]
pub struct CtsTerms {
    pub uu_t: Option<f64>,
    pub ui_t: Option<f64>,
    pub ii_t: Option<f64>,
    pub uu_s: Option<f64>,
    pub ui_s: Option<f64>,
    pub ii_s: Option<f64>,
}

impl CtsTerms {
    pub fn values(&self) -> [Option<f64>; 6] {
        [self.uu_t, self.ui_t, self.ii_t, self.uu_s, self.ui_s, self.ii_s]
    }
}

/// Unweighted sum of the active contrastive terms.
pub fn cts_total(terms: &CtsTerms) -> f64 {
    terms.values().iter().flatten().sum()
}

/// Calibration over typed points.
pub fn center_calibration(points: &[LorentzPoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::usage("calibration needs a nonempty point table"));
    }
    let k = shared_curvature(&[points])?;
    let mut t = Tape::new();
    let c = curv_nodes_const(&mut t, k);
    let ids = leaves(&mut t, points);
    let out = center_calibration_on_tape(&mut t, &ids, DistOp::Hyp(c));
    Ok(t.scalar(out))
}

/// All loss components of one step, plus their weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_src_rank: f64,
    pub l_tgt_rank: f64,
    pub l_uu_t: f64,
    pub l_ui_t: f64,
    pub l_ii_t: f64,
    pub l_uu_s: f64,
    pub l_ui_s: f64,
    pub l_ii_s: f64,
    pub l_cts: f64,
    pub l_clib: f64,
    pub total: f64,
}

/// Assemble the multi-task objective
/// L = L_S + L_T + lambda_cts * L_cts + lambda_clib * L_clib.
pub fn total_loss(
    l_src_rank: f64,
    l_tgt_rank: f64,
    terms: &CtsTerms,
    l_clib: f64,
    lambda_cts: f64,
    lambda_clib: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda_cts) || !(0.0..=1.0).contains(&lambda_clib) {
        return Err(Error::usage("loss weights must lie in [0, 1]"));
    }
    let l_cts = cts_total(terms);
    let named = [
        ("source ranking loss", l_src_rank),
        ("target ranking loss", l_tgt_rank),
        ("contrastive loss", l_cts),
        ("calibration loss", l_clib),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::numeric(format!("{name} is not finite: {v}")));
        }
    }
    let total = l_src_rank + l_tgt_rank + lambda_cts * l_cts + lambda_clib * l_clib;
    Ok(LossBreakdown {
        l_src_rank,
        l_tgt_rank,
        l_uu_t: terms.uu_t.unwrap_or(0.0),
        l_ui_t: terms.ui_t.unwrap_or(0.0),
        l_ii_t: terms.ii_t.unwrap_or(0.0),
        l_uu_s: terms.uu_s.unwrap_or(0.0),
        l_ui_s: terms.ui_s.unwrap_or(0.0),
        l_ii_s: terms.ii_s.unwrap_or(0.0),
        l_cts,
        l_clib,
        total,
    })
}
