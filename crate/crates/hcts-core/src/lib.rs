//! Cross-domain recommendation on hyperboloid manifolds.
//!
//! Two interaction domains are embedded on Lorentz-model manifolds with
//! independently trainable curvatures. Knowledge moves between them through
//! curvature-bridging contrastive learning with center calibration, and the
//! resulting ranking model is trained with a hyperbolic margin loss and
//! evaluated full-sort with HR@K / NDCG@K plus a head/tail breakdown.
//!
//! Module map:
//! - [`geometry`]: pure hyperboloid primitives (inner products, distances,
//!   exp/log maps, lifts, alignment, Poincare export).
//! - [`autodiff`]: reverse-mode tape over vector primitives, the optimizer,
//!   and the curvature parametrization.
//! - [`data`]: interaction ingestion, cross-domain datasets, splits,
//!   samplers, synthetic generation, long-tail curves.
//! - [`propagation`]: weightless skip-GCN aggregation.
//! - [`model`]: trainable parameters, forward passes, scoring, checkpoints.
//! - [`objectives`]: ranking, contrastive, and calibration losses.
//! - [`trainer`]: the joint multi-task loop with ablation switches.
//! - [`evaluation`]: full-sort HR@K / NDCG@K with head/tail reports.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod propagation;
pub mod trainer;

pub use error::{Error, Result};
