use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    training_loss, ConditionSet, Denoiser, LossComponents, LossContext, LossWeights, ModelDims, NoisedExample,
    TrainingExample,
};
use super::repr::{detect_contacts, repr_dim, to_repr, ContactMask, Normalizer};
use super::schedule::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::contrastive::{embed, rank_scores, ContrastiveModel, Side};
use crate::error::{Error, Result};
use crate::ingest::{window_records, Corpus};
use crate::kinematics::{forward_kinematics, MotionClip, Skeleton};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub hidden: usize,
    /// Tokens each condition is pooled to before fusion.
    pub tokens: usize,
    pub layers: usize,
    /// Reference motions per condition set.
    pub top_k: usize,
    pub weights: LossWeights,
    pub contact_height: f64,
    pub contact_speed: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub ema: bool,
    pub ema_decay: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 50,
            schedule: ScheduleKind::default(),
            hidden: 64,
            tokens: 4,
            layers: 2,
            top_k: 3,
            weights: LossWeights::default(),
            contact_height: 0.05,
            contact_speed: 0.6,
            epochs: 150,
            batch_size: 16,
            learning_rate: 2e-3,
            grad_clip: 1.0,
            seed: 0,
            ema: true,
            ema_decay: 0.999,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.epochs == 0 || self.batch_size == 0 || self.top_k == 0 {
            return Err(Error::Config("steps, epochs, batch_size and top_k must be positive".into()));
        }
        if self.hidden > 128 {
            return Err(Error::Config(format!("hidden width {} exceeds 128", self.hidden)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        self.weights.validate()
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.schedule, self.steps)
    }
}

/// Everything needed to sample: weights, schedule and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub losses: LossComponents,
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainOutcome {
    pub model: DiffusionModel,
    pub history: Vec<EpochLosses>,
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
    lr: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &[Array2<f64>], lr: f64) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

fn clip_gradients(grads: &mut [Array2<f64>], limit: f64) {
    if limit <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > limit {
        for g in grads {
            *g *= limit / norm;
        }
    }
}

/// Trains a denoiser on prepared examples. `on_epoch` sees the mean batch
/// losses of every epoch as it completes.
pub fn train_diffusion(
    examples: &[TrainingExample],
    dims: ModelDims,
    normalizer: Normalizer,
    skeleton: &Skeleton,
    cfg: &DiffusionConfig,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<DiffusionTrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let sched = cfg.schedule()?;
    let ctx = LossContext {
        skeleton,
        normalizer: &normalizer,
        weights: cfg.weights,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Denoiser::new(dims, &mut rng)?;
    let mut ema = model.clone();
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut updates = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<NoisedExample> = chunk
                .iter()
                .map(|&i| NoisedExample::draw(&examples[i], sched.steps(), &mut rng))
                .collect();
            let (loss, mut grads) = training_loss(&batch, &model, &sched, &ctx)?;
            clip_gradients(&mut grads, cfg.grad_clip);
            adam.update(model.params_mut(), &grads);
            updates += 1;
            let decay = cfg.ema_decay.min((1.0 + updates as f64) / (10.0 + updates as f64));
            for (e, p) in ema.params_mut().iter_mut().zip(model.params()) {
                e.zip_mut_with(p, |e, &p| *e = decay * *e + (1.0 - decay) * p);
            }
            sum.simple += loss.simple;
            sum.pos += loss.pos;
            sum.vel += loss.vel;
            sum.contact += loss.contact;
            sum.total += loss.total;
            batches += 1;
        }
        let k = batches as f64;
        let record = EpochLosses {
            epoch,
            losses: LossComponents {
                simple: sum.simple / k,
                pos: sum.pos / k,
                vel: sum.vel / k,
                contact: sum.contact / k,
                total: sum.total / k,
            },
        };
        on_epoch(&record);
        history.push(record);
    }
    let denoiser = if cfg.ema { ema } else { model };
    Ok(DiffusionTrainOutcome {
        model: DiffusionModel {
            denoiser,
            schedule: sched,
            normalizer,
        },
        history,
    })
}

/// Per-frame beat indicator for `frames` frames starting at `start`.
pub fn beat_vector(beats: &[f64], fps: f64, start: usize, frames: usize) -> Vec<f64> {
    let mut v = vec![0.0; frames];
    for &b in beats {
        let f = (b * fps).round();
        if f >= start as f64 && f < (start + frames) as f64 {
            v[f as usize - start] = 1.0;
        }
    }
    v
}

/// Foot contacts of a clip under the configured thresholds.
pub fn clip_contacts(clip: &MotionClip, skeleton: &Skeleton, cfg: &DiffusionConfig) -> Result<ContactMask> {
    let seq = forward_kinematics(skeleton, clip)?;
    detect_contacts(&seq, skeleton, clip.fps(), cfg.contact_height, cfg.contact_speed)
}

/// Training set built from the corpus windows: every window is conditioned
/// on its own music row (repeated per frame), its beats, the `top_k`
/// windows retrieved for its music and its music embedding.
pub struct PreparedCorpus {
    pub dims: ModelDims,
    pub normalizer: Normalizer,
    pub examples: Vec<TrainingExample>,
}

pub fn prepare_corpus(corpus: &Corpus, contrastive: &ContrastiveModel, cfg: &DiffusionConfig) -> Result<PreparedCorpus> {
    cfg.validate()?;
    let records = window_records(corpus, &corpus.windowing)?;
    if records.is_empty() {
        return Err(Error::Config("corpus yields no windows".into()));
    }
    let frames = records[0].clip.frames();
    let raw: Vec<Array2<f64>> = records.iter().map(|r| to_repr(&r.clip)).collect();
    let normalizer = Normalizer::fit(&raw)?;
    let windows: Vec<Array2<f64>> = raw.iter().map(|x| normalizer.normalize(x)).collect();
    let stack = |rows: Vec<&Vec<f64>>| -> Result<Array2<f64>> {
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("windows lack paired feature rows".into()));
        }
        Ok(Array2::from_shape_fn((rows.len(), width), |(i, c)| rows[i][c]))
    };
    let music = stack(records.iter().map(|r| &r.music_feat).collect())?;
    let motion = stack(records.iter().map(|r| &r.motion_feat).collect())?;
    let music_emb = embed(contrastive, &music.view(), Side::Music)?;
    let motion_emb = embed(contrastive, &motion.view(), Side::Motion)?;
    let k = cfg.top_k.min(records.len());
    let dims = ModelDims {
        frames,
        repr: repr_dim(corpus.skeleton.joint_count()),
        music: music.ncols(),
        latent: contrastive.latent_dim(),
        hidden: cfg.hidden,
        tokens: cfg.tokens,
        layers: cfg.layers,
    };
    dims.validate()?;
    let ctx = LossContext {
        skeleton: &corpus.skeleton,
        normalizer: &normalizer,
        weights: cfg.weights,
    };
    let mut examples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let scores = motion_emb.dot(&music_emb.row(i)).to_vec();
        let conditions = ConditionSet {
            music: Array2::from_shape_fn((frames, music.ncols()), |(_, c)| music[[i, c]]),
            beat: beat_vector(&corpus.beats[&r.source], corpus.fps, r.start, frames),
            topk_motions: rank_scores(&scores, k).into_iter().map(|(j, _)| windows[j].clone()).collect(),
            contrastive_emb: music_emb.row(i).to_vec(),
        };
        let contacts = clip_contacts(&r.clip, &corpus.skeleton, cfg)?;
        examples.push(TrainingExample::new(windows[i].clone(), conditions, &contacts, &ctx)?);
    }
    Ok(PreparedCorpus {
        dims,
        normalizer,
        examples,
    })
}

/// Component losses as CSV, one row per epoch.
pub fn history_csv(history: &[EpochLosses]) -> String {
    let mut s = String::from("epoch,l_simple,l_pos,l_vel,l_contact,l_total\n");
    for e in history {
        let l = &e.losses;
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            e.epoch, l.simple, l.pos, l.vel, l.contact, l.total
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beats_land_on_rounded_frames() {
        let v = beat_vector(&[0.0, 0.49, 1.0, 3.0], 10.0, 5, 6);
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = vec![Array2::from_elem((1, 2), 1.0)];
        let g = vec![ndarray::array![[2.0, -3.0]]];
        let mut a = Adam::new(&p, 0.1);
        a.update(&mut p, &g);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[0][[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![ndarray::array![[3.0, 4.0]]];
        clip_gradients(&mut g, 1.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_wide_models() {
        let cfg = DiffusionConfig {
            hidden: 256,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
