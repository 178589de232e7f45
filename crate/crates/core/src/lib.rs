//! Kernel-based runtime scene flow estimation.
//!
//! Flow from a source cloud to a target cloud is modelled as
//! `f(p) = sum_m alpha_m K(phi(p), phi(p*_m))` over a fixed set of supporting
//! points `p*`. Only the coefficients `alpha` are optimized, per scene pair,
//! against a Chamfer or distance-transform data term with an L1 penalty.
//!
//! ```no_run
//! use kernflow::{estimate_flow, synth, RunConfig};
//!
//! let scene = synth::generate(&synth::SceneSpec::default()).unwrap();
//! let est = estimate_flow(&scene.source, &scene.target, &RunConfig::default()).unwrap();
//! let epe = kernflow::eval::epe(&est.flow, &scene.gt_flow).unwrap();
//! println!("EPE {epe:.4} m");
//! ```

pub mod embed;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod kernel;
pub mod loss;
pub mod optimize;
pub mod pipeline;
pub mod rng;
pub mod spatial;
pub mod synth;

pub use embed::{EmbeddedCloud, EmbeddingKind, PeatWeights, RffEncoder};
pub use error::{Error, Result};
pub use eval::MetricReport;
pub use geometry::{apply_flow, bounding_box, Aabb, FlowField, Point, PointCloud};
pub use kernel::{CoefficientVector, KernelKind, KernelMatrix, SupportSet};
pub use loss::{DataTerm, DistanceTransformGrid, LossReport};
pub use optimize::{OptimConfig, OptimTrace};
pub use pipeline::{estimate_flow, Estimate, RunConfig};
