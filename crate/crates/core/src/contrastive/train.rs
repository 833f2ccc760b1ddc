use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{embed, ContrastiveModel, Side};
use crate::error::{Error, Result};
use crate::ingest::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub symmetric_loss: bool,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Decoupled weight decay applied to head parameters each step; 0
    /// gives plain SGD.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            symmetric_loss: true,
            hidden_dim: 64,
            latent_dim: 32,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay < 1.0) {
            return Err(Error::Config("weight_decay must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ContrastiveModel,
    /// Full-data loss before training followed by the loss after each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains on the corpus's paired per-window features.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (music, motion) = corpus.paired_features();
    train_on_pairs(&music, &motion, cfg)
}

pub fn train_on_pairs(music: &Array2<f64>, motion: &Array2<f64>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = music.nrows();
    if n != motion.nrows() {
        return Err(Error::Shape("music and motion pair counts differ".into()));
    }
    if n < 2 {
        return Err(Error::Shape(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    let mut model = ContrastiveModel::new(music.ncols(), motion.ncols(), cfg.hidden_dim, cfg.latent_dim, cfg.seed);
    let full_loss = |m: &ContrastiveModel| {
        m.loss_and_grad(&music.view(), &motion.view(), cfg.symmetric_loss)
            .map(|(l, _)| l)
    };
    let mut history = vec![full_loss(&model)?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    let lr = cfg.learning_rate;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let bm = music.select(Axis(0), batch);
            let bd = motion.select(Axis(0), batch);
            let (_, g) = model.loss_and_grad(&bm.view(), &bd.view(), cfg.symmetric_loss)?;
            let keep = 1.0 - lr * cfg.weight_decay;
            for (p, d) in model.music_head.params_mut().iter_mut().zip(&g.music) {
                *p = *p * keep - lr * d;
            }
            for (p, d) in model.motion_head.params_mut().iter_mut().zip(&g.motion) {
                *p = *p * keep - lr * d;
            }
            let lt = model.log_tau() - lr * g.log_tau;
            model.set_log_tau(lt);
        }
        let l = full_loss(&model)?;
        if !l.is_finite() {
            return Err(Error::Numeric("contrastive loss diverged".into()));
        }
        history.push(l);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// Fraction of music rows whose most similar motion row is their own pair.
pub fn retrieval_accuracy(model: &ContrastiveModel, music: &Array2<f64>, motion: &Array2<f64>) -> Result<f64> {
    let em = embed(model, &music.view(), Side::Music)?;
    let ed = embed(model, &motion.view(), Side::Motion)?;
    let s = super::similarity_matrix(&em.view(), &ed.view())?;
    let hits = s
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, r)| super::rank_scores(r.as_slice().expect("contiguous"), 1)[0].0 == *i)
        .count();
    Ok(hits as f64 / s.nrows() as f64)
}
