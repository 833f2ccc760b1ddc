//! Music/motion contrastive embedding.
//!
//! Upstream encoders are not part of this crate: features arrive as vectors
//! and two small projection heads map them into a shared, L2-normalized
//! latent space trained with InfoNCE and a learnable temperature.

mod io;
mod loss;
mod train;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_model, write_model};
pub use loss::{info_nce_loss, info_nce_with_grad};
pub use train::{retrieval_accuracy, train, train_on_pairs, TrainConfig, TrainOutcome};

pub const INITIAL_TAU: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
/// Rows with a pre-normalization norm below this cannot be embedded.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Two affine maps with a tanh between them: `d_in -> hidden -> d_out`.
///
/// Parameters live in one flat vector laid out as `W1 (hidden x d_in)`,
/// `b1`, `W2 (d_out x hidden)`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    d_in: usize,
    hidden: usize,
    d_out: usize,
    params: Vec<f64>,
}

struct HeadCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl ProjectionHead {
    pub fn param_count(d_in: usize, hidden: usize, d_out: usize) -> usize {
        hidden * d_in + hidden + d_out * hidden + d_out
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn new(d_in: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; Self::param_count(d_in, hidden, d_out)];
        let w1 = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("valid std");
        let w2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid std");
        for p in &mut params[..hidden * d_in] {
            *p = w1.sample(rng);
        }
        let o = hidden * d_in + hidden;
        for p in &mut params[o..o + d_out * hidden] {
            *p = w2.sample(rng);
        }
        ProjectionHead {
            d_in,
            hidden,
            d_out,
            params,
        }
    }

    /// Identity weight matrices and zero biases, so the head computes
    /// `tanh(x)`.
    pub fn identity(dim: usize) -> Self {
        let mut params = vec![0.0; Self::param_count(dim, dim, dim)];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
            params[dim * dim + dim + i * dim + i] = 1.0;
        }
        ProjectionHead {
            d_in: dim,
            hidden: dim,
            d_out: dim,
            params,
        }
    }

    pub fn from_params(d_in: usize, hidden: usize, d_out: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(d_in, hidden, d_out) {
            return Err(Error::Shape(format!(
                "head {d_in}->{hidden}->{d_out} needs {} parameters, got {}",
                Self::param_count(d_in, hidden, d_out),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite head parameter".into()));
        }
        Ok(ProjectionHead {
            d_in,
            hidden,
            d_out,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d_in
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn views(&self) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>, ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (h, i, o) = (self.hidden, self.d_in, self.d_out);
        let p = &self.params;
        let w1 = ArrayView2::from_shape((h, i), &p[..h * i]).expect("sized");
        let b1 = ArrayView1::from(&p[h * i..h * i + h]);
        let w2_at = h * i + h;
        let w2 = ArrayView2::from_shape((o, h), &p[w2_at..w2_at + o * h]).expect("sized");
        let b2 = ArrayView1::from(&p[w2_at + o * h..]);
        (w1, b1, w2, b2)
    }

    fn forward_cached(&self, x: &ArrayView2<f64>) -> (Array2<f64>, HeadCache) {
        let (w1, b1, w2, b2) = self.views();
        let pre = x.dot(&w1.t()) + b1;
        let act = pre.mapv(f64::tanh);
        let out = act.dot(&w2.t()) + b2;
        (out, HeadCache { pre, act })
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    fn backward(&self, x: &ArrayView2<f64>, cache: &HeadCache, d_out: &Array2<f64>) -> Vec<f64> {
        let (_, _, w2, _) = self.views();
        let g_w2 = d_out.t().dot(&cache.act);
        let g_b2 = d_out.sum_axis(Axis(0));
        let d_act = d_out.dot(&w2);
        let d_pre = d_act * cache.pre.mapv(|v| 1.0 - v.tanh().powi(2));
        let g_w1 = d_pre.t().dot(x);
        let g_b1 = d_pre.sum_axis(Axis(0));
        g_w1.iter()
            .chain(g_b1.iter())
            .chain(g_w2.iter())
            .chain(g_b2.iter())
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Music,
    Motion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    pub music_head: ProjectionHead,
    pub motion_head: ProjectionHead,
    log_tau: f64,
}

/// Gradients of the InfoNCE loss with respect to every model parameter.
#[derive(Debug, Clone)]
pub struct ModelGrad {
    pub music: Vec<f64>,
    pub motion: Vec<f64>,
    pub log_tau: f64,
}

impl ContrastiveModel {
    pub fn new(music_dim: usize, motion_dim: usize, hidden: usize, latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContrastiveModel {
            music_head: ProjectionHead::new(music_dim, hidden, latent, &mut rng),
            motion_head: ProjectionHead::new(motion_dim, hidden, latent, &mut rng),
            log_tau: INITIAL_TAU.ln(),
        }
    }

    pub fn from_heads(music_head: ProjectionHead, motion_head: ProjectionHead, log_tau: f64) -> Result<Self> {
        if music_head.output_dim() != motion_head.output_dim() {
            return Err(Error::Shape("heads disagree on the latent dimension".into()));
        }
        if !log_tau.is_finite() {
            return Err(Error::Numeric("non-finite log temperature".into()));
        }
        Ok(ContrastiveModel {
            music_head,
            motion_head,
            log_tau: log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln()),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    /// Sets the log temperature, clamped so that `tau` stays in
    /// `[TAU_MIN, TAU_MAX]`.
    pub fn set_log_tau(&mut self, v: f64) {
        self.log_tau = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn latent_dim(&self) -> usize {
        self.music_head.output_dim()
    }

    pub fn head(&self, side: Side) -> &ProjectionHead {
        match side {
            Side::Music => &self.music_head,
            Side::Motion => &self.motion_head,
        }
    }

    /// InfoNCE loss over paired rows and its gradient.
    pub fn loss_and_grad(
        &self,
        music: &ArrayView2<f64>,
        motion: &ArrayView2<f64>,
        symmetric: bool,
    ) -> Result<(f64, ModelGrad)> {
        check_dim(&self.music_head, music)?;
        check_dim(&self.motion_head, motion)?;
        if music.nrows() != motion.nrows() {
            return Err(Error::Shape("unpaired batch".into()));
        }
        let (zm, cm) = self.music_head.forward_cached(music);
        let (zd, cd) = self.motion_head.forward_cached(motion);
        let (em, nm) = normalize_rows(&zm)?;
        let (ed, nd) = normalize_rows(&zd)?;
        let sim = em.dot(&ed.t());
        let tau = self.tau();
        let (loss, g_logit) = loss::info_nce_logit_grad(&sim, tau, symmetric)?;
        let d_sim = &g_logit / tau;
        let log_tau = -(&g_logit * &sim).sum() / tau;
        let d_em = d_sim.dot(&ed);
        let d_ed = d_sim.t().dot(&em);
        let d_zm = normalize_backward(&em, &nm, &d_em);
        let d_zd = normalize_backward(&ed, &nd, &d_ed);
        Ok((
            loss,
            ModelGrad {
                music: self.music_head.backward(music, &cm, &d_zm),
                motion: self.motion_head.backward(motion, &cd, &d_zd),
                log_tau,
            },
        ))
    }
}

fn check_dim(head: &ProjectionHead, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != head.input_dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, head expects {}",
            x.ncols(),
            head.input_dim()
        )));
    }
    Ok(())
}

fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n >= DEGENERATE_NORM)) {
        return Err(Error::Numeric(format!(
            "degenerate norm: row {i} has pre-normalization magnitude {}",
            norms[i]
        )));
    }
    let e = z / &norms.view().insert_axis(Axis(1));
    Ok((e, norms))
}

/// Gradient through `e = z / |z|`.
fn normalize_backward(e: &Array2<f64>, norms: &Array1<f64>, d_e: &Array2<f64>) -> Array2<f64> {
    let dots = (e * d_e).sum_axis(Axis(1));
    let proj = e * &dots.view().insert_axis(Axis(1));
    (d_e - proj) / norms.view().insert_axis(Axis(1))
}

/// Unit-norm latent embeddings of `feats` through the head for `side`.
pub fn embed(model: &ContrastiveModel, feats: &ArrayView2<f64>, side: Side) -> Result<Array2<f64>> {
    let head = model.head(side);
    check_dim(head, feats)?;
    normalize_rows(&head.forward(feats)).map(|(e, _)| e)
}

/// Embeds a single feature vector.
pub fn embed_one(model: &ContrastiveModel, feats: &[f64], side: Side) -> Result<Array1<f64>> {
    let x = ArrayView2::from_shape((1, feats.len()), feats)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(embed(model, &x, side)?.row(0).to_owned())
}

/// Pairwise dot products of unit rows (cosine similarities).
pub fn similarity_matrix(music_emb: &ArrayView2<f64>, motion_emb: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if music_emb.dim() != motion_emb.dim() {
        return Err(Error::Shape(format!(
            "embedding shapes differ: {:?} vs {:?}",
            music_emb.dim(),
            motion_emb.dim()
        )));
    }
    Ok(music_emb.dot(&motion_emb.t()))
}

/// The `k` candidates most similar to the query, by descending score with
/// ties going to the smaller index.
pub fn top_k(
    model: &ContrastiveModel,
    music_segment_feats: &[f64],
    candidate_motion_feats: &ArrayView2<f64>,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let n = candidate_motion_feats.nrows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} outside 1..={n}")));
    }
    let q = embed_one(model, music_segment_feats, Side::Music)?;
    let c = embed(model, candidate_motion_feats, Side::Motion)?;
    let scores: Vec<f64> = c.dot(&q).to_vec();
    Ok(rank_scores(&scores, k))
}

/// Indices of the `k` largest scores, descending, ties to the smaller index.
pub fn rank_scores(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}
