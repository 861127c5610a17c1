//! Manifold operations composed from tape primitives.
//!
//! These mirror the closed forms in [`crate::geometry`] node for node so the
//! differentiable training path and the plain evaluation path compute the
//! same values.

use super::{NodeId, Tape};
use crate::geometry::NORM_EPS;

/// A curvature K together with sqrt(K), shared across every lift/log of one
/// domain within a step.
#[derive(Debug, Clone, Copy)]
pub struct CurvNodes {
    pub k: NodeId,
    pub sk: NodeId,
}

/// K = softplus(raw) + floor, plus its square root.
pub fn curv_nodes(t: &mut Tape, raw: NodeId) -> CurvNodes {
    let k = t.curvature(raw);
    let sk = t.sqrt(k);
    CurvNodes { k, sk }
}

/// Fixed, non-trainable curvature (used by the plain loss wrappers).
pub fn curv_nodes_const(t: &mut Tape, k_value: f64) -> CurvNodes {
    let k = t.scalar_const(k_value);
    let sk = t.sqrt(k);
    CurvNodes { k, sk }
}

/// The north pole (sqrt(K), 0, ..., 0) as a tape node.
pub fn north_pole(t: &mut Tape, c: CurvNodes, dim: usize) -> NodeId {
    let zeros = t.constant(&vec![0.0; dim]);
    t.prepend_scalar(c.sk, zeros)
}

/// Exp-map lift of a d-dimensional Euclidean row onto H^{d,K}.
/// Rows with norm below the guard map to the pole exactly.
pub fn lift_row(t: &mut Tape, e: NodeId, c: CurvNodes) -> NodeId {
    let r2 = t.dot(e, e);
    let r = t.sqrt(r2);
    if t.scalar(r) < NORM_EPS {
        let tail = t.scale_const(e, 0.0);
        return t.prepend_scalar(c.sk, tail);
    }
    let a = t.div_scalar(r, c.sk);
    let ch = t.cosh(a);
    let x0 = t.mul(c.sk, ch);
    let sh = t.sinh(a);
    let sksh = t.mul(c.sk, sh);
    let coef = t.div_scalar(sksh, r);
    let tail = t.mul_scalar(e, coef);
    t.prepend_scalar(x0, tail)
}

/// Exp map of a full (d+1) tangent vector whose head is structurally zero.
pub fn exp_tangent(t: &mut Tape, v: NodeId, c: CurvNodes) -> NodeId {
    let tail = t.drop_head(v);
    lift_row(t, tail, c)
}

/// Log map at the pole: point on H^{d,K} -> (d+1) tangent vector with zero
/// head. The radial coefficient divides by max(||tail||, eps).
pub fn log_row(t: &mut Tape, x: NodeId, c: CurvNodes) -> NodeId {
    let tail = t.drop_head(x);
    let r2 = t.dot(tail, tail);
    let r = t.sqrt(r2);
    let rg = t.max_const(r, NORM_EPS);
    let x0 = t.elem(x, 0);
    let z = t.div_scalar(x0, c.sk);
    let a = t.arcosh_clamped(z);
    let dist = t.mul(c.sk, a);
    let coef = t.div_scalar(dist, rg);
    let vtail = t.mul_scalar(tail, coef);
    t.prepend_zero(vtail)
}

/// Which geometry the losses run in: the hyperboloid model or its Euclidean
/// ablation (identity lift, Euclidean distance).
#[derive(Debug, Clone, Copy)]
pub enum DistOp {
    Hyp(CurvNodes),
    Euclid,
}

impl DistOp {
    /// Lift a d-dimensional embedding row into point form.
    pub fn lift(&self, t: &mut Tape, e: NodeId) -> NodeId {
        match self {
            DistOp::Hyp(c) => lift_row(t, e, *c),
            DistOp::Euclid => t.prepend_zero(e),
        }
    }

    /// Squared distance between two points of this geometry.
    pub fn dist_sq(&self, t: &mut Tape, x: NodeId, y: NodeId) -> NodeId {
        match self {
            DistOp::Hyp(c) => t.hyp_dist_sq(x, y, c.k),
            DistOp::Euclid => t.euclid_dist_sq(x, y),
        }
    }

    /// Tangent representation of a point: log map on the hyperboloid,
    /// identity in the Euclidean ablation.
    pub fn log(&self, t: &mut Tape, x: NodeId) -> NodeId {
        match self {
            DistOp::Hyp(c) => log_row(t, x, *c),
            DistOp::Euclid => x,
        }
    }
}

/// Curvature-bridging alignment Exp^to(ReLU(W Log^from(x))); in the
/// Euclidean ablation both maps are the identity so only ReLU(W x) remains.
pub fn align_row(t: &mut Tape, x: NodeId, from: DistOp, to: DistOp, w: NodeId) -> NodeId {
    let v = from.log(t, x);
    let h = t.matvec(w, v);
    let hr = t.relu(h);
    match to {
        DistOp::Hyp(c) => exp_tangent(t, hr, c),
        DistOp::Euclid => hr,
    }
}

/// Contrastive similarity sim(x, y) = -d(x, y).
pub fn similarity(t: &mut Tape, x: NodeId, y: NodeId, mode: DistOp) -> NodeId {
    let dsq = mode.dist_sq(t, x, y);
    let d = t.sqrt(dsq);
    t.neg(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;

    #[test]
    fn taped_lift_matches_plain_geometry() {
        let e = [0.7, -1.2, 0.4];
        for k in [0.25, 1.0, 4.0] {
            let plain = geometry::lift_euclidean(&e, k).unwrap();
            let mut t = Tape::new();
            let en = t.leaf(&e);
            let c = curv_nodes_const(&mut t, k);
            let p = lift_row(&mut t, en, c);
            for (a, b) in plain.coords().iter().zip(t.value(p)) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn taped_lift_of_zero_is_pole() {
        let mut t = Tape::new();
        let e = t.leaf(&[0.0, 0.0]);
        let c = curv_nodes_const(&mut t, 2.0);
        let p = lift_row(&mut t, e, c);
        let v = t.value(p);
        assert_eq!(v[0], 2.0f64.sqrt());
        assert_eq!(&v[1..], &[0.0, 0.0]);
    }

    #[test]
    fn taped_log_matches_plain_geometry() {
        let e = [0.7, -1.2, 0.4];
        let k = 1.7;
        let point = geometry::lift_euclidean(&e, k).unwrap();
        let plain = geometry::log_map_o(&point);
        let mut t = Tape::new();
        let xn = t.leaf(point.coords());
        let c = curv_nodes_const(&mut t, k);
        let v = log_row(&mut t, xn, c);
        assert_eq!(t.value(v)[0], 0.0);
        for (a, b) in plain.coords().iter().zip(t.value(v)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn taped_align_matches_plain_geometry() {
        let e = [0.9, -0.3, 1.4];
        let (ka, kb) = (0.6, 2.3);
        let x = geometry::lift_euclidean(&e, ka).unwrap();
        let mut m = vec![0.0; 16];
        let vals = [
            0.4, -0.7, 0.2, 0.9, 0.1, 0.5, -0.3, 0.8, -0.2, 0.6, 0.3, -0.5,
        ];
        m[4..].copy_from_slice(&vals);
        let w = geometry::AlignmentTransform::new(m.clone(), 4).unwrap();
        let plain = geometry::align(&x, kb, &w).unwrap();

        let mut t = Tape::new();
        let xn = t.leaf(x.coords());
        let wn = t.leaf(&m);
        let ca = curv_nodes_const(&mut t, ka);
        let cb = curv_nodes_const(&mut t, kb);
        let y = align_row(&mut t, xn, DistOp::Hyp(ca), DistOp::Hyp(cb), wn);
        for (a, b) in plain.coords().iter().zip(t.value(y)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn taped_dist_sq_matches_plain() {
        let k = 0.8;
        let x = geometry::lift_euclidean(&[0.5, 0.1], k).unwrap();
        let y = geometry::lift_euclidean(&[-0.9, 1.3], k).unwrap();
        let plain = geometry::dist_sq_slices(x.coords(), y.coords(), k);
        let mut t = Tape::new();
        let xn = t.leaf(x.coords());
        let yn = t.leaf(y.coords());
        let c = curv_nodes_const(&mut t, k);
        let d = t.hyp_dist_sq(xn, yn, c.k);
        assert!((t.scalar(d) - plain).abs() < 1e-14);
    }

    #[test]
    fn euclidean_mode_distance_and_alignment() {
        let mut t = Tape::new();
        let a = t.leaf(&[1.0, 2.0]);
        let b = t.leaf(&[4.0, 6.0]);
        let pa = DistOp::Euclid.lift(&mut t, a);
        let pb = DistOp::Euclid.lift(&mut t, b);
        let d = DistOp::Euclid.dist_sq(&mut t, pa, pb);
        assert_eq!(t.scalar(d), 25.0);

        // Alignment reduces to ReLU(W x); the zero first row keeps the head zero.
        let w = geometry::AlignmentTransform::block_identity(3);
        let wn = t.leaf(w.matrix());
        let y = align_row(&mut t, pa, DistOp::Euclid, DistOp::Euclid, wn);
        assert_eq!(t.value(y), &[0.0, 1.0, 2.0]);
    }
}
