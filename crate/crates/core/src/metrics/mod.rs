//! Evaluation: beat alignment, diversity, Fréchet distance over simple
//! kinematic and geometric features, and seam diagnostics.
//!
//! The feature extractors are small stand-ins, so absolute FID and diversity
//! values are only comparable between runs of this crate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{distance, velocities, PoseSequence, Skeleton, Vec3};
use crate::synthesis::Transition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Width of the beat-alignment kernel, seconds.
    pub sigma: f64,
    /// Average over dance beats (nearest music beat) instead of over music
    /// beats.
    pub transposed_bas: bool,
    pub histogram_bins: usize,
    /// Upper edge of the distance histograms, meters.
    pub histogram_max: f64,
    /// Motions are cut into windows of this many frames for feature
    /// statistics.
    pub feature_window: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            sigma: 0.1,
            transposed_bas: false,
            histogram_bins: 8,
            histogram_max: 2.0,
            feature_window: 60,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.histogram_bins == 0 || !(self.histogram_max > 0.0) {
            return Err(Error::Config("histograms need bins and a positive range".into()));
        }
        if self.feature_window < 3 {
            return Err(Error::Config("feature_window must be at least 3 frames".into()));
        }
        Ok(())
    }
}

/// Mean joint speed per frame transition.
fn mean_speed(seq: &PoseSequence, fps: f64) -> Result<Vec<f64>> {
    let v = velocities(seq, fps)?;
    let (frames, joints, _) = v.dim();
    Ok((0..frames)
        .map(|f| {
            (0..joints)
                .map(|j| (0..3).map(|k| v[[f, j, k]].powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / joints as f64
        })
        .collect())
}

/// Dance beats: times of strict local minima of the mean joint speed.
pub fn motion_beats(seq: &PoseSequence, fps: f64) -> Result<Vec<f64>> {
    if seq.frames() < 3 {
        return Err(Error::Shape("motion beats need at least 3 frames".into()));
    }
    let s = mean_speed(seq, fps)?;
    Ok((1..s.len() - 1)
        .filter(|&i| s[i] < s[i - 1] && s[i] < s[i + 1])
        .map(|i| i as f64 / fps)
        .collect())
}

/// Mean over music beats of `exp(-d² / 2σ²)`, `d` being the distance to the
/// nearest dance beat. No dance beats scores 0.
pub fn beat_alignment_score(music_beats: &[f64], dance_beats: &[f64], sigma: f64) -> Result<f64> {
    if music_beats.is_empty() {
        return Err(Error::Shape("no music beats".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    if dance_beats.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = music_beats
        .iter()
        .map(|&m| {
            let d = dance_beats
                .iter()
                .map(|&d| (d - m).abs())
                .fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / music_beats.len() as f64)
}

/// [`beat_alignment_score`] in either direction, as configured.
pub fn bas_with(music_beats: &[f64], dance_beats: &[f64], cfg: &MetricsConfig) -> Result<f64> {
    if cfg.transposed_bas {
        if music_beats.is_empty() {
            return Err(Error::Shape("no music beats".into()));
        }
        if dance_beats.is_empty() {
            return Ok(0.0);
        }
        beat_alignment_score(dance_beats, music_beats, cfg.sigma)
    } else {
        beat_alignment_score(music_beats, dance_beats, cfg.sigma)
    }
}

/// Mean Euclidean distance over all unordered row pairs.
pub fn diversity(features: &ArrayView2<f64>) -> Result<f64> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Shape(format!("diversity needs at least 2 rows, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = &features.row(i) - &features.row(j);
            total += d.dot(&d).sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Sample mean and unbiased covariance of feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureSummary {
    pub fn from_samples(x: &ArrayView2<f64>) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(Error::Shape(format!("feature summary needs at least 2 samples, got {n}")));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let centered = x - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        debug_assert_eq!(cov.dim(), (d, d));
        Ok(FeatureSummary {
            mean: mean.to_vec(),
            cov: cov.iter().copied().collect(),
            count: n,
        })
    }

    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Shape("covariance size does not match mean".into()));
        }
        Ok(FeatureSummary { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

const EIGEN_TOLERANCE: f64 = 1e-8;

/// Eigenvalues clamped at zero, rejecting clearly negative ones.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m);
    let scale = e.eigenvalues.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if *v < -EIGEN_TOLERANCE * scale {
            return Err(Error::Numeric(format!("{what} is indefinite (eigenvalue {v})")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Fréchet distance between Gaussians:
/// `|μa − μb|² + tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &FeatureSummary, b: &FeatureSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims differ: {} vs {}", a.dim(), b.dim())));
    }
    let delta = DVector::from_vec(a.mean.clone()) - DVector::from_vec(b.mean.clone());
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ea = psd_eigen(sa.clone(), "first covariance")?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let ei = psd_eigen(inner, "covariance product")?;
    psd_eigen(sb.clone(), "second covariance")?;
    let cross: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = delta.dot(&delta) + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Per joint: mean speed, speed variance, mean acceleration magnitude and
/// its variance, grouped by statistic.
pub fn kinematic_features(seq: &PoseSequence, fps: f64) -> Result<Vec<f64>> {
    if seq.frames() < 3 {
        return Err(Error::Shape("kinematic features need at least 3 frames".into()));
    }
    let v = velocities(seq, fps)?;
    let joints = seq.joints();
    let vf = v.dim().0;
    let mut out = vec![0.0; 4 * joints];
    for j in 0..joints {
        let at = |f: usize| -> Vec3 { [v[[f, j, 0]], v[[f, j, 1]], v[[f, j, 2]]] };
        let speed: Vec<f64> = (0..vf).map(|f| distance(at(f), [0.0; 3])).collect();
        let accel: Vec<f64> = (0..vf - 1).map(|f| distance(at(f + 1), at(f)) * fps).collect();
        let (sm, sv) = mean_var(&speed);
        let (am, av) = mean_var(&accel);
        out[j] = sm;
        out[joints + j] = sv;
        out[2 * joints + j] = am;
        out[3 * joints + j] = av;
    }
    Ok(out)
}

fn angle(a: Vec3, b: Vec3) -> f64 {
    let dot: f64 = (0..3).map(|k| a[k] * b[k]).sum();
    let n = distance(a, [0.0; 3]) * distance(b, [0.0; 3]);
    if n < 1e-12 {
        0.0
    } else {
        (dot / n).clamp(-1.0, 1.0).acos()
    }
}

/// Normalized histograms of the distances between every pair of the root and
/// the leaf joints, followed by the mean and standard deviation of the angle
/// at every joint that has a parent and a grandparent.
pub fn geometric_features(seq: &PoseSequence, skeleton: &Skeleton, cfg: &MetricsConfig) -> Result<Vec<f64>> {
    if seq.frames() < 3 {
        return Err(Error::Shape("geometric features need at least 3 frames".into()));
    }
    if seq.joints() != skeleton.joint_count() {
        return Err(Error::Shape("pose and skeleton joint counts differ".into()));
    }
    let mut keys = vec![0];
    keys.extend(skeleton.leaves().into_iter().filter(|&j| j != 0));
    let frames = seq.frames();
    let bins = cfg.histogram_bins;
    let mut out = Vec::new();
    for (i, &a) in keys.iter().enumerate() {
        for &b in &keys[i + 1..] {
            let mut h = vec![0.0; bins];
            for f in 0..frames {
                let d = distance(seq.position(f, a), seq.position(f, b));
                let k = ((d / cfg.histogram_max) * bins as f64).floor() as usize;
                h[k.min(bins - 1)] += 1.0 / frames as f64;
            }
            out.extend(h);
        }
    }
    for j in 0..skeleton.joint_count() {
        let Some(p) = skeleton.parent(j) else { continue };
        let Some(g) = skeleton.parent(p) else { continue };
        let angles: Vec<f64> = (0..frames)
            .map(|f| {
                let pp = seq.position(f, p);
                let to = |q: Vec3| [q[0] - pp[0], q[1] - pp[1], q[2] - pp[2]];
                angle(to(seq.position(f, g)), to(seq.position(f, j)))
            })
            .collect();
        let (m, v) = mean_var(&angles);
        out.push(m);
        out.push(v.sqrt());
    }
    Ok(out)
}

/// Splits a pose sequence into consecutive non-overlapping windows.
pub fn feature_windows(seq: &PoseSequence, window: usize) -> Vec<PoseSequence> {
    let frames = seq.frames();
    (0..frames / window.max(1))
        .map(|i| PoseSequence {
            joint_pos: seq
                .joint_pos
                .slice(ndarray::s![i * window..(i + 1) * window, .., ..])
                .to_owned(),
        })
        .collect()
}

/// Stacks equally sized feature vectors into rows.
pub fn stack(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        m.row_mut(i).assign(&Array1::from(r.clone()));
    }
    Ok(m)
}

/// Summary of seam measurements over one or more traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeamStats {
    pub transitions: usize,
    pub mean_pre: f64,
    pub mean_post: f64,
    pub max_post: f64,
    pub max_post_step: f64,
    /// `1 − mean_post / mean_pre`, 0 without transitions.
    pub reduction: f64,
}

pub fn seam_stats(transitions: &[Transition]) -> SeamStats {
    let n = transitions.len();
    if n == 0 {
        return SeamStats::default();
    }
    let mean_pre = transitions.iter().map(|t| t.pre).sum::<f64>() / n as f64;
    let mean_post = transitions.iter().map(|t| t.post).sum::<f64>() / n as f64;
    SeamStats {
        transitions: n,
        mean_pre,
        mean_post,
        max_post: transitions.iter().map(|t| t.post).fold(0.0, f64::max),
        max_post_step: transitions.iter().map(|t| t.post_step).fold(0.0, f64::max),
        reduction: if mean_pre > 0.0 { 1.0 - mean_post / mean_pre } else { 0.0 },
    }
}

/// Largest per-joint inter-frame step of every frame transition.
pub fn frame_steps(seq: &PoseSequence) -> Vec<f64> {
    (1..seq.frames())
        .map(|f| {
            (0..seq.joints())
                .map(|j| distance(seq.position(f, j), seq.position(f - 1, j)))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Kinematic and geometric feature rows of every window of every motion.
pub fn feature_rows(
    motions: &[PoseSequence],
    fps: f64,
    skeleton: &Skeleton,
    cfg: &MetricsConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut kin = Vec::new();
    let mut geo = Vec::new();
    for m in motions {
        for w in feature_windows(m, cfg.feature_window) {
            kin.push(kinematic_features(&w, fps)?);
            geo.push(geometric_features(&w, skeleton, cfg)?);
        }
    }
    Ok((stack(&kin)?, stack(&geo)?))
}
