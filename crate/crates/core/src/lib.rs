//! Reference heatmap transfer for facial landmark detection.
//!
//! The library turns an annotated reference face into supervision for a
//! target face: reference heatmap features are carried over both by
//! per-position correlation matching (soft transfer) and by a global 2-D
//! affine warp (hard transfer), fused across three scales into predicted
//! landmark and boundary heatmaps. Everything runs on plain `f64` grids
//! with hand-written forward/backward kernels, so every piece can be
//! checked against small independent oracles and finite differences.
//!
//! Modules follow the data flow:
//!
//! * [`grid`] — dense H×W×C storage shared by images, features and heatmaps
//! * [`heatmaps`] — ground-truth rendering and sub-pixel decoding
//! * [`nn`] — convolution, transposed convolution, pooling, linear layers
//! * [`stm`] — patch correlation and soft feature transfer
//! * [`htm`] — affine estimation, sampling grids, bilinear warping
//! * [`fusion`] — multi-scale feature fusion into output heatmaps
//! * [`losses`] — masked heatmap loss, transfer consistency loss
//! * [`metrics`] — NME, cumulative error curves, AUC, failure rate
//! * [`dataio`] — `.pts` annotations, manifests, PNM images, augmentation
//! * [`pipeline`] — end-to-end forward/backward and a tiny training loop
//! * [`rhm1`] — the binary container format for grids and checkpoints
//! * [`oracle`] — independent reference implementations used for checking
//! * [`selfcheck`] — the runtime invariant battery behind `rht selfcheck`

pub mod dataio;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod heatmaps;
pub mod htm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod parallel;
pub mod pipeline;
pub mod rhm1;
pub mod selfcheck;
pub mod stm;

pub use error::{Error, Result};
pub use grid::{FeatureVolume, Grid, ScaleTag};
