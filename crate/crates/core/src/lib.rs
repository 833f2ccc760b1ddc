//! Music-driven dance synthesis at desk scale.
//!
//! The pipeline has two stages. Stage 1 builds a motion graph over short
//! clip windows, prunes it to its largest strongly connected component and
//! walks it under the guidance of a contrastively trained music/motion
//! embedding, producing `motion_mg`. Stage 2 refines that motion with a
//! small multi-condition denoising diffusion model, producing
//! `motion_diff`. The [`metrics`] module scores either output.
//!
//! | module | contents |
//! |---|---|
//! | [`kinematics`] | skeletons, clips, rotations, forward kinematics |
//! | [`ingest`] | corpus files, windowing, the synthetic corpus |
//! | [`graph`] | edge building, SCC pruning, graph files |
//! | [`contrastive`] | projection heads, InfoNCE, retrieval |
//! | [`synthesis`] | graph traversal and transition blending |
//! | [`diffusion`] | schedule, condition fusion, denoiser, sampler |
//! | [`metrics`] | BAS, diversity, Fréchet distance, features |

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub(crate) mod binio;
pub mod contrastive;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod kinematics;
pub mod metrics;
pub mod synthesis;

pub use error::{Error, Result};
pub use kinematics::{MotionClip, PoseSequence, Skeleton};
