//! Stage 2: a small denoising diffusion model that regenerates stage-1
//! motion window by window.
//!
//! The denoiser predicts the clean window directly. It is conditioned on
//! four signals (music features, beats, retrieved reference motions and
//! the contrastive music embedding) which are fused pairwise: each
//! condition queries every other one and the per-condition results are
//! stacked into a fixed token sequence that the network cross-attends to.
//! Training adds forward-kinematics position, velocity and foot-contact
//! terms to the reconstruction loss.

mod io;
mod model;
mod refine;
mod repr;
mod sample;
mod schedule;
mod tape;
mod train;

pub use io::{read_diffusion, write_diffusion};
pub use model::{
    adaptive_pool, fuse_conditions, fuse_conditions_masked, fusion_gradient, loss_components, training_loss,
    ConditionSet, Denoiser, LossComponents, LossContext, LossTarget, LossWeights, ModelDims, NoisedExample,
    TrainingExample, CONDITION_NAMES,
};
pub use refine::{refine, RefineConfig, RefineInputs};
pub use repr::{detect_contacts, from_repr, repr_dim, to_repr, ContactMask, Normalizer};
pub use sample::{sample, sample_traced, X0Predictor};
pub use schedule::{make_schedule, q_sample, q_sample_at, q_step, DiffusionSchedule, ScheduleKind};
pub use train::{
    beat_vector, clip_contacts, history_csv, prepare_corpus, train_diffusion, DiffusionConfig, DiffusionModel,
    DiffusionTrainOutcome, EpochLosses, PreparedCorpus,
};
