//! Hyperboloid-model primitives.
//!
//! All manifold arithmetic runs on the upper sheet of the Lorentz hyperboloid
//! H^{d,K} = { x in R^{d+1} : <x,x>_M = -K, x_0 > 0 } with curvature -1/K.
//! The north pole o = (sqrt(K), 0, ..., 0) is the base point of every exp/log
//! map in this crate; the Poincare ball appears only as an export chart.
//!
//! Everything here is a pure function of its inputs and safe to call from any
//! number of threads.

use crate::error::{Error, Result};

/// Lower clamp guard for norm divisions.
pub const NORM_EPS: f64 = 1e-12;
/// Upper clamp for the arcosh argument in distance evaluation.
pub const ARCOSH_MAX: f64 = 1e15;
/// Relative tolerance of the on-manifold invariant.
pub const MANIFOLD_TOL: f64 = 1e-8;

/// A point on the hyperboloid H^{d,K}. `coords` has length d+1 and satisfies
/// `<x,x>_M = -K` with `x_0 >= sqrt(K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
    curvature_k: f64,
}

impl LorentzPoint {
    /// Validating constructor; rejects off-manifold or non-finite input.
    pub fn new(coords: Vec<f64>, curvature_k: f64) -> Result<Self> {
        if curvature_k <= 0.0 || !curvature_k.is_finite() {
            return Err(Error::usage(format!(
                "curvature must be positive and finite, got {curvature_k}"
            )));
        }
        if coords.len() < 2 {
            return Err(Error::usage("a Lorentz point needs at least 2 coordinates"));
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::numeric("non-finite coordinate in Lorentz point"));
        }
        let ip = minkowski_inner_unchecked(&coords, &coords);
        if (ip + curvature_k).abs() > MANIFOLD_TOL * curvature_k.max(1.0) {
            return Err(Error::usage(format!(
                "point is off the manifold: <x,x>_M = {ip}, expected {}",
                -curvature_k
            )));
        }
        if coords[0] < curvature_k.sqrt() - MANIFOLD_TOL * curvature_k.max(1.0) {
            return Err(Error::usage("point lies on the lower hyperboloid sheet"));
        }
        Ok(Self { coords, curvature_k })
    }

    /// Constructor for values already known to satisfy the invariants
    /// (outputs of `exp_map_o`, `lift_euclidean`, `project_to_manifold`).
    pub(crate) fn new_unchecked(coords: Vec<f64>, curvature_k: f64) -> Self {
        Self { coords, curvature_k }
    }

    /// The north pole (sqrt(K), 0, ..., 0) of H^{d,K}.
    pub fn north_pole(dim: usize, curvature_k: f64) -> Self {
        let mut coords = vec![0.0; dim + 1];
        coords[0] = curvature_k.sqrt();
        Self { coords, curvature_k }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature_k(&self) -> f64 {
        self.curvature_k
    }

    /// Spatial dimension d (coords has length d+1).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }
}

/// A tangent vector at the north pole: first coordinate exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentAtOrigin {
    coords: Vec<f64>,
    curvature_k: f64,
}

impl TangentAtOrigin {
    pub fn new(coords: Vec<f64>, curvature_k: f64) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::usage("a tangent vector needs at least 2 coordinates"));
        }
        if coords[0] != 0.0 {
            return Err(Error::usage(
                "tangent vectors at the north pole must have first coordinate 0",
            ));
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(Error::numeric("non-finite coordinate in tangent vector"));
        }
        Ok(Self { coords, curvature_k })
    }

    /// Embed a Euclidean vector e as (0, e).
    pub fn from_euclidean(e: &[f64], curvature_k: f64) -> Self {
        let mut coords = Vec::with_capacity(e.len() + 1);
        coords.push(0.0);
        coords.extend_from_slice(e);
        Self { coords, curvature_k }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// The spatial components (everything past the leading zero).
    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    pub fn curvature_k(&self) -> f64 {
        self.curvature_k
    }

    /// Euclidean norm, which on the origin tangent space equals the
    /// Minkowski norm.
    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// The curvature-bridging linear map W. Row 0 is identically zero so that
/// W v stays in the shared origin tangent space; the optimizer never updates
/// that row.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTransform {
    /// Row-major (d+1) x (d+1).
    matrix: Vec<f64>,
    side: usize,
}

impl AlignmentTransform {
    pub fn new(matrix: Vec<f64>, side: usize) -> Result<Self> {
        if matrix.len() != side * side {
            return Err(Error::usage(format!(
                "alignment matrix must be {side}x{side}, got {} entries",
                matrix.len()
            )));
        }
        if !matrix.iter().all(|c| c.is_finite()) {
            return Err(Error::numeric("non-finite entry in alignment matrix"));
        }
        if matrix[..side].iter().any(|&c| c != 0.0) {
            return Err(Error::usage(
                "alignment matrix first row must be identically zero",
            ));
        }
        Ok(Self { matrix, side })
    }

    /// Identity on rows/columns 1..d with the mandatory zero first row.
    pub fn block_identity(side: usize) -> Self {
        let mut matrix = vec![0.0; side * side];
        for i in 1..side {
            matrix[i * side + i] = 1.0;
        }
        Self { matrix, side }
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// Number of rows (= columns) = d+1.
    pub fn side(&self) -> usize {
        self.side
    }
}

/// Minkowski inner product -x0*y0 + sum_{i>=1} xi*yi.
pub fn minkowski_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::usage(format!(
            "minkowski inner product needs equal lengths >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !x.iter().all(|c| c.is_finite()) || !y.iter().all(|c| c.is_finite()) {
        return Err(Error::numeric("non-finite input to minkowski inner product"));
    }
    Ok(minkowski_inner_unchecked(x, y))
}

#[inline]
pub(crate) fn minkowski_inner_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = -x[0] * y[0];
    for i in 1..x.len() {
        acc += x[i] * y[i];
    }
    acc
}

#[inline]
fn euclid_norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// arcosh(z) for z >= 1, evaluated as ln(z + sqrt(z^2 - 1)).
#[inline]
pub fn arcosh(z: f64) -> f64 {
    (z + (z * z - 1.0).max(0.0).sqrt()).ln()
}

fn check_same_manifold(ka: f64, kb: f64) -> Result<()> {
    if (ka - kb).abs() > 1e-12 * ka.abs().max(kb.abs()).max(1.0) {
        return Err(Error::usage(format!(
            "points live on different manifolds: K = {ka} vs {kb}"
        )));
    }
    Ok(())
}

/// Geodesic distance sqrt(K) * arcosh(clamp(-<x,y>_M / K, 1, 1e15)).
pub fn hyp_distance(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    check_same_manifold(x.curvature_k, y.curvature_k)?;
    Ok(dist_slices(x.coords(), y.coords(), x.curvature_k))
}

/// Distance on raw coordinate slices; callers guarantee both rows share `k`.
#[inline]
pub fn dist_slices(x: &[f64], y: &[f64], k: f64) -> f64 {
    let z = (-minkowski_inner_unchecked(x, y) / k).clamp(1.0, ARCOSH_MAX);
    k.sqrt() * arcosh(z)
}

/// Squared distance K * arcosh^2(clamp(-<x,y>_M / K, 1, 1e15)).
#[inline]
pub fn dist_sq_slices(x: &[f64], y: &[f64], k: f64) -> f64 {
    let z = (-minkowski_inner_unchecked(x, y) / k).clamp(1.0, ARCOSH_MAX);
    let a = arcosh(z);
    k * a * a
}

/// Exponential map at the north pole. The zero vector maps to the pole
/// itself (guarded at `NORM_EPS`).
pub fn exp_map_o(v: &TangentAtOrigin) -> LorentzPoint {
    let k = v.curvature_k;
    let out = exp_spatial(v.spatial(), k);
    LorentzPoint::new_unchecked(out, k)
}

/// Shared closed form: spatial tangent part -> full (d+1) point coords.
pub(crate) fn exp_spatial(e: &[f64], k: f64) -> Vec<f64> {
    let sk = k.sqrt();
    let r = euclid_norm(e);
    let mut out = vec![0.0; e.len() + 1];
    if r < NORM_EPS {
        out[0] = sk;
        return out;
    }
    let a = r / sk;
    out[0] = sk * a.cosh();
    let coef = sk * a.sinh() / r;
    for (dst, &src) in out[1..].iter_mut().zip(e) {
        *dst = coef * src;
    }
    out
}

/// Logarithmic map at the north pole: the inverse of `exp_map_o`.
/// Returns the zero tangent vector for x = o.
pub fn log_map_o(x: &LorentzPoint) -> TangentAtOrigin {
    let k = x.curvature_k;
    let coords = log_spatial(x.coords(), k);
    TangentAtOrigin {
        coords,
        curvature_k: k,
    }
}

/// Shared closed form: point coords -> full (d+1) tangent coords with the
/// leading zero in place. At the north pole the projection denominator
/// vanishes; it is guarded at `NORM_EPS`, which yields the zero vector.
pub(crate) fn log_spatial(x: &[f64], k: f64) -> Vec<f64> {
    let sk = k.sqrt();
    let tail = &x[1..];
    let r = euclid_norm(tail);
    let mut out = vec![0.0; x.len()];
    let z = (x[0] / sk).clamp(1.0, ARCOSH_MAX);
    let dist = sk * arcosh(z);
    let coef = dist / r.max(NORM_EPS);
    for (dst, &src) in out[1..].iter_mut().zip(tail) {
        *dst = coef * src;
    }
    out
}

/// Lift a Euclidean vector onto H^{d,K} by exponentiating (0, e). The lift is
/// a radial isometry: d(o, lift(e)) = ||e||.
pub fn lift_euclidean(e: &[f64], k: f64) -> Result<LorentzPoint> {
    if !e.iter().all(|c| c.is_finite()) {
        return Err(Error::numeric("non-finite input to lift"));
    }
    if k <= 0.0 || !k.is_finite() {
        return Err(Error::usage(format!("curvature must be positive, got {k}")));
    }
    Ok(LorentzPoint::new_unchecked(exp_spatial(e, k), k))
}

/// Map a point from H^{K_A} to H^{K_B} through the shared origin tangent
/// space: Exp_o^{K_B}(ReLU(W Log_o^{K_A}(x))). W's zero first row keeps the
/// intermediate in the tangent space of both poles.
pub fn align(x: &LorentzPoint, k_b: f64, w: &AlignmentTransform) -> Result<LorentzPoint> {
    if k_b <= 0.0 || !k_b.is_finite() {
        return Err(Error::usage(format!("target curvature must be positive, got {k_b}")));
    }
    let side = x.coords.len();
    if w.side != side {
        return Err(Error::usage(format!(
            "alignment matrix side {} does not match point dimension {}",
            w.side, side
        )));
    }
    let v = log_spatial(x.coords(), x.curvature_k);
    let mut h = vec![0.0; side];
    for (row, dst) in h.iter_mut().enumerate() {
        let wrow = &w.matrix[row * side..(row + 1) * side];
        let mut acc = 0.0;
        for (wij, vj) in wrow.iter().zip(&v) {
            acc += wij * vj;
        }
        *dst = acc.max(0.0);
    }
    Ok(LorentzPoint::new_unchecked(exp_spatial(&h[1..], k_b), k_b))
}

/// Hyperboloid -> Poincare ball chart, p_i = x_i / (x_0 + sqrt(K)).
/// Used only for coordinate export.
pub fn to_poincare(x: &LorentzPoint) -> Vec<f64> {
    let denom = x.coords[0] + x.curvature_k.sqrt();
    x.coords[1..].iter().map(|&c| c / denom).collect()
}

/// Snap an arbitrary finite vector onto H^{d,K} by recomputing the time
/// coordinate from the spatial part. Idempotent; on-manifold points pass
/// through unchanged up to 1e-12.
pub fn project_to_manifold(x: &[f64], k: f64) -> Result<LorentzPoint> {
    if !x.iter().all(|c| c.is_finite()) {
        return Err(Error::numeric("non-finite input to manifold projection"));
    }
    if k <= 0.0 || !k.is_finite() {
        return Err(Error::usage(format!("curvature must be positive, got {k}")));
    }
    let mut out = x.to_vec();
    let sq: f64 = x[1..].iter().map(|c| c * c).sum();
    out[0] = (k + sq).sqrt();
    Ok(LorentzPoint::new_unchecked(out, k))
}

/// Project an ambient vector onto the tangent space at x:
/// u = w + (<x,w>_M / K) x, which satisfies <x,u>_M = 0.
pub fn project_to_tangent(x: &LorentzPoint, w: &[f64]) -> Vec<f64> {
    let k = x.curvature_k;
    let scale = minkowski_inner_unchecked(x.coords(), w) / k;
    w.iter()
        .zip(x.coords())
        .map(|(&wi, &xi)| wi + scale * xi)
        .collect()
}
