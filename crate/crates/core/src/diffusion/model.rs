//! Condition fusion, the denoiser network and the training objective, all
//! expressed on the [`Tape`] so one code path serves evaluation and
//! gradients.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::repr::{ContactMask, Normalizer};
use super::schedule::{q_sample, DiffusionSchedule};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::kinematics::Skeleton;

pub const CONDITION_NAMES: [&str; 4] = ["music", "beat", "topk_motions", "contrastive_emb"];
const N_COND: usize = 4;
const PER_CONDITION: usize = 5;
const FUSION_TENSORS: usize = N_COND * PER_CONDITION;
const PER_LAYER: usize = 8;
const QUAT_EPS: f64 = 1e-8;

/// Network sizes. Fused conditions are `4 · tokens` rows of width `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub frames: usize,
    pub repr: usize,
    pub music: usize,
    pub latent: usize,
    pub hidden: usize,
    pub tokens: usize,
    pub layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("repr", self.repr),
            ("music", self.music),
            ("latent", self.latent),
            ("tokens", self.tokens),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model dimension {name} must be positive")));
        }
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden width {} must be even and >= 2", self.hidden)));
        }
        if self.frames < 2 {
            return Err(Error::Config("windows need at least 2 frames".into()));
        }
        Ok(())
    }

    /// Feature width of each condition before embedding.
    pub fn condition_dims(&self) -> [usize; 4] {
        [self.music, 1, self.repr, self.latent]
    }

    pub fn fused_shape(&self) -> (usize, usize) {
        (N_COND * self.tokens, self.hidden)
    }

    fn tensor_count(&self) -> usize {
        FUSION_TENSORS + 6 + PER_LAYER * self.layers + 2
    }
}

/// The four conditions for one target window.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    /// Music features, one row per frame.
    pub music: Array2<f64>,
    /// 1 at beat frames, 0 elsewhere.
    pub beat: Vec<f64>,
    /// Retrieved reference windows in the normalized representation.
    pub topk_motions: Vec<Array2<f64>>,
    pub contrastive_emb: Vec<f64>,
}

impl ConditionSet {
    /// Each condition pooled to `dims.tokens` rows.
    pub fn pooled(&self, dims: &ModelDims) -> Result<[Array2<f64>; 4]> {
        let missing = |i: usize| Error::Config(format!("missing condition: {}", CONDITION_NAMES[i]));
        if self.music.is_empty() {
            return Err(missing(0));
        }
        if self.beat.is_empty() {
            return Err(missing(1));
        }
        if self.topk_motions.is_empty() {
            return Err(missing(2));
        }
        if self.contrastive_emb.is_empty() {
            return Err(missing(3));
        }
        if self.music.ncols() != dims.music {
            return Err(Error::Shape(format!("music width {} != {}", self.music.ncols(), dims.music)));
        }
        if self.music.nrows() != self.beat.len() {
            return Err(Error::Shape(format!(
                "music has {} frames, beat vector {}",
                self.music.nrows(),
                self.beat.len()
            )));
        }
        if let Some(m) = self.topk_motions.iter().find(|m| m.ncols() != dims.repr || m.nrows() == 0) {
            return Err(Error::Shape(format!("reference motion {:?} has wrong width", m.dim())));
        }
        if self.contrastive_emb.len() != dims.latent {
            return Err(Error::Shape(format!(
                "embedding length {} != {}",
                self.contrastive_emb.len(),
                dims.latent
            )));
        }
        let beat = Array2::from_shape_vec((self.beat.len(), 1), self.beat.clone()).expect("column");
        let refs = Array2::from_shape_fn((self.topk_motions.len(), dims.repr), |(i, c)| {
            self.topk_motions[i].column(c).mean().expect("non-empty")
        });
        let emb = Array2::from_shape_vec((1, dims.latent), self.contrastive_emb.clone()).expect("row");
        let p = dims.tokens;
        Ok([
            adaptive_pool(&self.music, p),
            adaptive_pool(&beat, p),
            adaptive_pool(&refs, p),
            adaptive_pool(&emb, p),
        ])
    }
}

/// Averages rows into `out` bins; bin `i` spans rows
/// `floor(i·n/out) .. ceil((i+1)·n/out)`.
pub fn adaptive_pool(m: &Array2<f64>, out: usize) -> Array2<f64> {
    let n = m.nrows();
    let mut r = Array2::zeros((out, m.ncols()));
    for i in 0..out {
        let a = i * n / out;
        let b = ((i + 1) * n).div_ceil(out);
        let rows = m.slice(ndarray::s![a..b, ..]);
        r.row_mut(i).assign(&rows.mean_axis(ndarray::Axis(0)).expect("non-empty bin"));
    }
    r
}

/// Condition fusion followed by the residual cross-attention denoiser,
/// mapping `(x_t, t, C)` to a clean-window prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    dims: ModelDims,
    params: Vec<Array2<f64>>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let d = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite scale");
    Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
}

enum Init {
    Zero,
    Normal(usize, f64),
}

/// Tensor shapes in storage order: per condition embedding weight, bias,
/// query, key, value; input projection and bias; time MLP; per layer
/// attention query, key, value, output and the two feed-forward layers;
/// output projection and bias.
fn tensor_shapes(dims: &ModelDims) -> Vec<((usize, usize), Init)> {
    let h = dims.hidden;
    let mut v = Vec::with_capacity(dims.tensor_count());
    for d in dims.condition_dims() {
        v.push(((d, h), Init::Normal(d, 1.0)));
        v.push(((1, h), Init::Zero));
        for _ in 0..3 {
            v.push(((h, h), Init::Normal(h, 1.0)));
        }
    }
    v.push(((dims.repr, h), Init::Normal(dims.repr, 1.0)));
    v.push(((1, h), Init::Zero));
    v.push(((h, h), Init::Normal(h, 1.0)));
    v.push(((1, h), Init::Zero));
    v.push(((h, h), Init::Normal(h, 1.0)));
    v.push(((1, h), Init::Zero));
    for _ in 0..dims.layers {
        for _ in 0..4 {
            v.push(((h, h), Init::Normal(h, 1.0)));
        }
        v.push(((h, 2 * h), Init::Normal(h, 1.0)));
        v.push(((1, 2 * h), Init::Zero));
        v.push(((2 * h, h), Init::Normal(2 * h, 0.5)));
        v.push(((1, h), Init::Zero));
    }
    v.push(((h, dims.repr), Init::Normal(h, 1.0)));
    v.push(((1, dims.repr), Init::Zero));
    v
}

impl Denoiser {
    pub fn new(dims: ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        dims.validate()?;
        let params = tensor_shapes(&dims)
            .into_iter()
            .map(|(shape, init)| match init {
                Init::Zero => Array2::zeros(shape),
                Init::Normal(fan_in, gain) => gaussian(rng, shape.0, shape.1, fan_in) * gain,
            })
            .collect();
        Ok(Denoiser { dims, params })
    }

    pub fn from_params(dims: ModelDims, params: Vec<Array2<f64>>) -> Result<Self> {
        dims.validate()?;
        let shapes = tensor_shapes(&dims);
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(a, (s, _))| a.dim() != *s) {
            return Err(Error::Shape("parameter tensors do not match the model dimensions".into()));
        }
        if params.iter().flat_map(|p| p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite denoiser parameter".into()));
        }
        Ok(Denoiser { dims, params })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    /// The condition-fusion tensors: per condition an embedding weight and
    /// bias followed by query, key and value projections.
    pub fn fusion_params(&self) -> &[Array2<f64>] {
        &self.params[..FUSION_TENSORS]
    }

    pub fn network_params(&self) -> &[Array2<f64>] {
        &self.params[FUSION_TENSORS..]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| if trainable { tape.param(i, p) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Embedded conditions and their `(q, k, v)` projections.
    fn project(&self, tape: &mut Tape, p: &[Var], pooled: &[Array2<f64>; 4]) -> Vec<[Var; 3]> {
        (0..N_COND)
            .map(|i| {
                let b = PER_CONDITION * i;
                let c = tape.constant(pooled[i].clone());
                let e = tape.matmul(c, p[b]);
                let e = tape.add_row(e, p[b + 1]);
                [tape.matmul(e, p[b + 2]), tape.matmul(e, p[b + 3]), tape.matmul(e, p[b + 4])]
            })
            .collect()
    }

    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt);
        let s = tape.scale(s, 1.0 / (self.dims.hidden as f64).sqrt());
        let a = tape.softmax_rows(s);
        tape.matmul(a, v)
    }

    /// Fused tokens: block `i` is the mean over allowed `j != i` of the
    /// attention of `q_i` over `(k_j, v_j)`. Blocks with no allowed
    /// partner are zero.
    fn fuse_tape(&self, tape: &mut Tape, p: &[Var], pooled: &[Array2<f64>; 4], allow: &[[bool; 4]; 4]) -> Var {
        let qkv = self.project(tape, p, pooled);
        let mut blocks = Vec::with_capacity(N_COND);
        for i in 0..N_COND {
            let partners: Vec<usize> = (0..N_COND).filter(|&j| j != i && allow[i][j]).collect();
            if partners.is_empty() {
                blocks.push(tape.constant(Array2::zeros((self.dims.tokens, self.dims.hidden))));
                continue;
            }
            let mut acc = self.attend(tape, qkv[i][0], qkv[partners[0]][1], qkv[partners[0]][2]);
            for &j in &partners[1..] {
                let a = self.attend(tape, qkv[i][0], qkv[j][1], qkv[j][2]);
                acc = tape.add(acc, a);
            }
            blocks.push(tape.scale(acc, 1.0 / partners.len() as f64));
        }
        tape.concat_rows(&blocks)
    }

    fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &Array2<f64>,
        t: usize,
        pooled: &[Array2<f64>; 4],
    ) -> Var {
        let fused = self.fuse_tape(tape, p, pooled, &[[true; 4]; 4]);
        let h_dim = self.dims.hidden;
        let d = FUSION_TENSORS;
        let x = tape.constant(x_t.clone());
        let h = tape.matmul(x, p[d]);
        let h = tape.add_row(h, p[d + 1]);
        let pos = tape.constant(sinusoid(x_t.nrows(), h_dim, |f| f as f64));
        let h = tape.add(h, pos);
        let te = tape.constant(sinusoid(1, h_dim, |_| t as f64));
        let te = tape.matmul(te, p[d + 2]);
        let te = tape.add_row(te, p[d + 3]);
        let te = tape.tanh(te);
        let te = tape.matmul(te, p[d + 4]);
        let te = tape.add_row(te, p[d + 5]);
        let mut h = tape.add_row(h, te);
        for l in 0..self.dims.layers {
            let b = d + 6 + PER_LAYER * l;
            let q = tape.matmul(h, p[b]);
            let k = tape.matmul(fused, p[b + 1]);
            let v = tape.matmul(fused, p[b + 2]);
            let a = self.attend(tape, q, k, v);
            let a = tape.matmul(a, p[b + 3]);
            h = tape.add(h, a);
            let f = tape.matmul(h, p[b + 4]);
            let f = tape.add_row(f, p[b + 5]);
            let f = tape.tanh(f);
            let f = tape.matmul(f, p[b + 6]);
            let f = tape.add_row(f, p[b + 7]);
            h = tape.add(h, f);
        }
        let o = d + 6 + PER_LAYER * self.dims.layers;
        let out = tape.matmul(h, p[o]);
        tape.add_row(out, p[o + 1])
    }

    fn check_window(&self, x_t: &Array2<f64>) -> Result<()> {
        if x_t.ncols() != self.dims.repr || x_t.nrows() < 2 {
            return Err(Error::Shape(format!(
                "window {:?} does not fit representation width {}",
                x_t.dim(),
                self.dims.repr
            )));
        }
        Ok(())
    }

    /// `G(x_t, t, C)`: the predicted clean window.
    pub fn predict(&self, x_t: &Array2<f64>, t: usize, c: &ConditionSet) -> Result<Array2<f64>> {
        self.check_window(x_t)?;
        let pooled = c.pooled(&self.dims)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let out = self.forward_tape(&mut tape, &p, x_t, t, &pooled);
        Ok(tape.value(out).clone())
    }
}

/// `rows × width` sinusoidal table of `pos(row)`.
fn sinusoid(rows: usize, width: usize, pos: impl Fn(usize) -> f64) -> Array2<f64> {
    let half = width / 2;
    Array2::from_shape_fn((rows, width), |(r, c)| {
        let k = c % half;
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        let a = pos(r) * freq;
        if c < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Fused condition tokens, `4 · tokens × hidden`.
pub fn fuse_conditions(c: &ConditionSet, model: &Denoiser) -> Result<Array2<f64>> {
    fuse_conditions_masked(c, model, &[[true; 4]; 4])
}

/// Fusion with only the pairs `(i, j)` with `allow[i][j]` contributing.
pub fn fuse_conditions_masked(c: &ConditionSet, model: &Denoiser, allow: &[[bool; 4]; 4]) -> Result<Array2<f64>> {
    let pooled = c.pooled(&model.dims)?;
    let mut tape = Tape::new();
    let p = model.register(&mut tape, false);
    let out = model.fuse_tape(&mut tape, &p, &pooled, allow);
    Ok(tape.value(out).clone())
}

/// Gradients of `sum(fused ∘ weights)` for every parameter tensor; only
/// the fusion tensors are nonzero.
pub fn fusion_gradient(c: &ConditionSet, model: &Denoiser, weights: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
    let pooled = c.pooled(&model.dims)?;
    let mut tape = Tape::new();
    let p = model.register(&mut tape, true);
    let out = model.fuse_tape(&mut tape, &p, &pooled, &[[true; 4]; 4]);
    if tape.value(out).dim() != weights.dim() {
        return Err(Error::Shape("weights must match the fused shape".into()));
    }
    let w = tape.constant(weights.clone());
    let m = tape.mul(out, w);
    let s = tape.sum(m);
    Ok(collect_grads(&tape, s, model))
}

fn collect_grads(tape: &Tape, loss: Var, model: &Denoiser) -> Vec<Array2<f64>> {
    tape.backward(loss, model.params.len())
        .into_iter()
        .zip(&model.params)
        .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_vel: f64,
    pub lambda_contact: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pos: 1.0,
            lambda_vel: 1.0,
            lambda_contact: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pos", self.lambda_pos),
            ("lambda_vel", self.lambda_vel),
            ("lambda_contact", self.lambda_contact),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub simple: f64,
    pub pos: f64,
    pub vel: f64,
    pub contact: f64,
    pub total: f64,
}

impl LossComponents {
    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("L_simple", self.simple),
            ("L_pos", self.pos),
            ("L_vel", self.vel),
            ("L_contact", self.contact),
            ("L_total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    fn scaled_add(&mut self, o: &LossComponents, k: f64) {
        self.simple += k * o.simple;
        self.pos += k * o.pos;
        self.vel += k * o.vel;
        self.contact += k * o.contact;
        self.total += k * o.total;
    }
}

/// Context for evaluating losses on normalized windows.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub skeleton: &'a Skeleton,
    pub normalizer: &'a Normalizer,
    pub weights: LossWeights,
}

type Quat = [Var; 4];

fn qmul(t: &mut Tape, a: Quat, b: Quat) -> Quat {
    let terms: [[(usize, usize, f64); 4]; 4] = [
        [(0, 0, 1.0), (1, 1, -1.0), (2, 2, -1.0), (3, 3, -1.0)],
        [(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, -1.0)],
        [(0, 2, 1.0), (1, 3, -1.0), (2, 0, 1.0), (3, 1, 1.0)],
        [(0, 3, 1.0), (1, 2, 1.0), (2, 1, -1.0), (3, 0, 1.0)],
    ];
    terms.map(|row| {
        let mut acc: Option<Var> = None;
        for (i, j, s) in row {
            let m = t.mul(a[i], b[j]);
            acc = Some(match acc {
                None => m,
                Some(x) if s > 0.0 => t.add(x, m),
                Some(x) => t.sub(x, m),
            });
        }
        acc.expect("four terms")
    })
}

/// `q · v · q*` for a constant vector `v`, one column per component.
fn rotate(t: &mut Tape, q: Quat, v: [f64; 3]) -> [Option<Var>; 3] {
    let [w, x, y, z] = q;
    let (xx, yy, zz) = (t.mul(x, x), t.mul(y, y), t.mul(z, z));
    let (xy, xz, yz) = (t.mul(x, y), t.mul(x, z), t.mul(y, z));
    let (wx, wy, wz) = (t.mul(w, x), t.mul(w, y), t.mul(w, z));
    // Rotation matrix entries as (sign, var) pairs scaled by 2, plus the identity.
    let r = |t: &mut Tape, diag: Option<(Var, Var)>, a: Option<(Var, Var, f64)>| -> Var {
        match (diag, a) {
            (Some((p, q)), _) => {
                let s = t.add(p, q);
                let s = t.scale(s, -2.0);
                t.add_scalar(s, 1.0)
            }
            (None, Some((p, q, sign))) => {
                let s = if sign > 0.0 { t.add(p, q) } else { t.sub(p, q) };
                t.scale(s, 2.0)
            }
            _ => unreachable!(),
        }
    };
    // Per entry: a diagonal pair summed, or an off-diagonal pair with a sign.
    type Entry = (Option<(Var, Var)>, Option<(Var, Var, f64)>);
    let entries: [[Entry; 3]; 3] = [
        [(Some((yy, zz)), None), (None, Some((xy, wz, -1.0))), (None, Some((xz, wy, 1.0)))],
        [(None, Some((xy, wz, 1.0))), (Some((xx, zz)), None), (None, Some((yz, wx, -1.0)))],
        [(None, Some((xz, wy, -1.0))), (None, Some((yz, wx, 1.0))), (Some((xx, yy)), None)],
    ];
    let mut out = [None; 3];
    for (row, slot) in entries.iter().zip(out.iter_mut()) {
        for (c, (diag, a)) in row.iter().enumerate() {
            if v[c] == 0.0 {
                continue;
            }
            let e = r(t, *diag, *a);
            let e = t.scale(e, v[c]);
            *slot = Some(match *slot {
                None => e,
                Some(s) => t.add(s, e),
            });
        }
    }
    out
}

/// Joint positions (`frames × 3J`) of a normalized window.
fn fk_tape(t: &mut Tape, x: Var, ctx: &LossContext) -> Var {
    let n = ctx.normalizer;
    let cols = n.dim();
    let std = t.constant(Array2::from_shape_vec((1, cols), n.std.clone()).expect("row"));
    let mean = t.constant(Array2::from_shape_vec((1, cols), n.mean.clone()).expect("row"));
    let raw = t.mul_row(x, std);
    let raw = t.add_row(raw, mean);
    let sk = ctx.skeleton;
    let joints = sk.joint_count();
    let mut pos: Vec<[Var; 3]> = Vec::with_capacity(joints);
    let mut global: Vec<Quat> = Vec::with_capacity(joints);
    for j in 0..joints {
        let c = [0, 1, 2, 3].map(|k| t.cols(raw, 3 + 4 * j + k, 1));
        let sq = c.map(|v| t.square(v));
        let s = t.add(sq[0], sq[1]);
        let s = t.add(s, sq[2]);
        let s = t.add(s, sq[3]);
        let s = t.add_scalar(s, QUAT_EPS);
        let len = t.sqrt(s);
        let q = c.map(|v| t.div(v, len));
        match sk.parent(j) {
            None => {
                pos.push([0, 1, 2].map(|k| t.cols(raw, k, 1)));
                global.push(q);
            }
            Some(p) => {
                let r = rotate(t, global[p], sk.offset(j));
                let base = pos[p];
                let mut here = base;
                for k in 0..3 {
                    if let Some(d) = r[k] {
                        here[k] = t.add(base[k], d);
                    }
                }
                pos.push(here);
                let g = qmul(t, global[p], q);
                global.push(g);
            }
        }
    }
    let flat: Vec<Var> = pos.into_iter().flatten().collect();
    t.concat_cols(&flat)
}

/// Reference quantities of a clean window for the loss.
#[derive(Debug, Clone)]
pub struct LossTarget {
    x0: Array2<f64>,
    fk: Array2<f64>,
    contact: Array2<f64>,
}

impl LossTarget {
    pub fn new(x0: &Array2<f64>, contacts: &ContactMask, ctx: &LossContext) -> Result<Self> {
        let frames = x0.nrows();
        if frames < 2 || x0.ncols() != ctx.normalizer.dim() {
            return Err(Error::Shape(format!("window {:?} does not fit the normalizer", x0.dim())));
        }
        if contacts.values.nrows() != frames - 1 || contacts.foot_joints != ctx.skeleton.foot_joints() {
            return Err(Error::Shape("contact mask does not match the window".into()));
        }
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let fk = fk_tape(&mut t, x, ctx);
        Ok(LossTarget {
            x0: x0.clone(),
            fk: t.value(fk).clone(),
            contact: contacts.weights(),
        })
    }
}

/// Loss graph of prediction `xh` against `target`.
fn loss_tape(t: &mut Tape, xh: Var, target: &LossTarget, ctx: &LossContext) -> (Var, [Var; 4]) {
    let (frames, dim) = target.x0.dim();
    let x0 = t.constant(target.x0.clone());
    let d = t.sub(xh, x0);
    let d2 = t.square(d);
    let s = t.sum(d2);
    let simple = t.scale(s, 1.0 / (frames * dim) as f64);

    let fk = fk_tape(t, xh, ctx);
    let fk0 = t.constant(target.fk.clone());
    let dp = t.sub(fk, fk0);
    let dp2 = t.square(dp);
    let s = t.sum(dp2);
    let pos = t.scale(s, 1.0 / frames as f64);

    let late = t.rows(d, 1, frames - 1);
    let early = t.rows(d, 0, frames - 1);
    let dv = t.sub(late, early);
    let dv2 = t.square(dv);
    let s = t.sum(dv2);
    let vel = t.scale(s, 1.0 / (frames - 1) as f64);

    let head = t.rows(dp, 0, frames - 1);
    let mut acc: Option<Var> = None;
    for (k, &j) in ctx.skeleton.foot_joints().iter().enumerate() {
        let foot = t.cols(head, 3 * j, 3);
        let m = t.constant(target.contact.column(k).to_owned().insert_axis(ndarray::Axis(1)));
        let masked = t.mul_col(foot, m);
        let sq = t.square(masked);
        let s = t.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s),
        });
    }
    let contact = match acc {
        Some(a) => t.scale(a, 1.0 / (frames - 1) as f64),
        None => t.constant(Array2::zeros((1, 1))),
    };

    let w = ctx.weights;
    let p = t.scale(pos, w.lambda_pos);
    let v = t.scale(vel, w.lambda_vel);
    let c = t.scale(contact, w.lambda_contact);
    let total = t.add(simple, p);
    let total = t.add(total, v);
    let total = t.add(total, c);
    (total, [simple, pos, vel, contact])
}

fn components(t: &Tape, total: Var, parts: [Var; 4]) -> LossComponents {
    LossComponents {
        simple: t.scalar(parts[0]),
        pos: t.scalar(parts[1]),
        vel: t.scalar(parts[2]),
        contact: t.scalar(parts[3]),
        total: t.scalar(total),
    }
}

/// Loss components of a fixed prediction `x_hat` against `x0`.
pub fn loss_components(
    x0: &Array2<f64>,
    x_hat: &Array2<f64>,
    contacts: &ContactMask,
    ctx: &LossContext,
) -> Result<LossComponents> {
    if x0.dim() != x_hat.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", x_hat.dim(), x0.dim())));
    }
    let target = LossTarget::new(x0, contacts, ctx)?;
    let mut t = Tape::new();
    let xh = t.constant(x_hat.clone());
    let (total, parts) = loss_tape(&mut t, xh, &target, ctx);
    let c = components(&t, total, parts);
    c.check()?;
    Ok(c)
}

/// One training window with its conditions.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    /// Normalized clean window.
    pub x0: Array2<f64>,
    pub conditions: ConditionSet,
    pub target: LossTarget,
}

impl TrainingExample {
    pub fn new(x0: Array2<f64>, conditions: ConditionSet, contacts: &ContactMask, ctx: &LossContext) -> Result<Self> {
        let target = LossTarget::new(&x0, contacts, ctx)?;
        Ok(TrainingExample { x0, conditions, target })
    }
}

/// A training example with its diffusion step and noise drawn.
#[derive(Debug, Clone)]
pub struct NoisedExample<'a> {
    pub example: &'a TrainingExample,
    pub t: usize,
    pub eps: Array2<f64>,
}

impl<'a> NoisedExample<'a> {
    pub fn draw(example: &'a TrainingExample, steps: usize, rng: &mut ChaCha8Rng) -> Self {
        let t = rng.random_range(0..steps);
        let (r, c) = example.x0.dim();
        let eps = Array2::from_shape_fn((r, c), |_| rand_distr::StandardNormal.sample(rng));
        NoisedExample { example, t, eps }
    }
}

/// Mean loss over the batch and its gradient for every parameter tensor.
pub fn training_loss(
    batch: &[NoisedExample],
    model: &Denoiser,
    sched: &DiffusionSchedule,
    ctx: &LossContext,
) -> Result<(LossComponents, Vec<Array2<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Config("training batch is empty".into()));
    }
    ctx.weights.validate()?;
    let per_item: Vec<Result<(LossComponents, Vec<Array2<f64>>)>> = batch
        .iter()
        .map(|item| {
            let ex = item.example;
            model.check_window(&ex.x0)?;
            let pooled = ex.conditions.pooled(&model.dims)?;
            let x_t = q_sample(&ex.x0, item.t, &item.eps, sched)?;
            let mut t = Tape::new();
            let p = model.register(&mut t, true);
            let xh = model.forward_tape(&mut t, &p, &x_t, item.t, &pooled);
            let (total, parts) = loss_tape(&mut t, xh, &ex.target, ctx);
            let c = components(&t, total, parts);
            c.check()?;
            Ok((c, collect_grads(&t, total, model)))
        })
        .collect();
    let k = 1.0 / batch.len() as f64;
    let mut sum = LossComponents::default();
    let mut grads: Vec<Array2<f64>> = model.params.iter().map(|p| Array2::zeros(p.dim())).collect();
    for r in per_item {
        let (c, g) = r?;
        sum.scaled_add(&c, k);
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.scaled_add(k, &gi);
        }
    }
    sum.check()?;
    Ok((sum, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::repr::{detect_contacts, repr_dim, to_repr};
    use crate::kinematics::forward_kinematics;
    use rand::SeedableRng;

    pub(crate) fn toy_dims(frames: usize) -> ModelDims {
        ModelDims {
            frames,
            repr: repr_dim(8),
            music: 3,
            latent: 4,
            hidden: 8,
            tokens: 2,
            layers: 1,
        }
    }

    fn conditions(dims: &ModelDims, k: usize, seed: u64) -> ConditionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditionSet {
            music: gaussian(&mut rng, dims.frames, dims.music, 1),
            beat: (0..dims.frames).map(|f| if f % 3 == 0 { 1.0 } else { 0.0 }).collect(),
            topk_motions: (0..k).map(|_| gaussian(&mut rng, dims.frames, dims.repr, 1)).collect(),
            contrastive_emb: gaussian(&mut rng, 1, dims.latent, 1).row(0).to_vec(),
        }
    }

    #[test]
    fn pooling_bins_cover_all_rows() {
        let m = Array2::from_shape_fn((3, 1), |(r, _)| r as f64);
        let p = adaptive_pool(&m, 4);
        assert_eq!(p.column(0).to_vec(), vec![0.0, 0.5, 1.5, 2.0]);
        let one = adaptive_pool(&Array2::from_elem((1, 2), 7.0), 3);
        assert!(one.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn fused_shape_is_fixed() {
        let dims = toy_dims(6);
        let m = Denoiser::new(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for k in [1, 2, 5] {
            let f = fuse_conditions(&conditions(&dims, k, 3), &m).unwrap();
            assert_eq!(f.dim(), dims.fused_shape());
        }
    }

    #[test]
    fn zero_conditions_fuse_to_zero() {
        let dims = toy_dims(6);
        let m = Denoiser::new(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = ConditionSet {
            music: Array2::zeros((6, 3)),
            beat: vec![0.0; 6],
            topk_motions: vec![Array2::zeros((6, dims.repr))],
            contrastive_emb: vec![0.0; 4],
        };
        assert!(fuse_conditions(&c, &m).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_condition_is_named() {
        let dims = toy_dims(6);
        let m = Denoiser::new(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut c = conditions(&dims, 2, 3);
        c.topk_motions.clear();
        let e = fuse_conditions(&c, &m).unwrap_err().to_string();
        assert!(e.contains("topk_motions"), "{e}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let corpus = crate::ingest::synthesize_test_corpus(2, 1);
        let sk = corpus.skeleton.clone();
        let clip = corpus.clips[0].slice(0, 20, "w").unwrap();
        let raw = to_repr(&clip);
        let norm = Normalizer::fit(std::slice::from_ref(&raw)).unwrap();
        let x0 = norm.normalize(&raw);
        let seq = forward_kinematics(&sk, &clip).unwrap();
        let mask = detect_contacts(&seq, &sk, clip.fps(), 0.3, 5.0).unwrap();
        let ctx = LossContext {
            skeleton: &sk,
            normalizer: &norm,
            weights: LossWeights::default(),
        };
        let c = loss_components(&x0, &x0, &mask, &ctx).unwrap();
        assert_eq!(c, LossComponents::default());
        let shifted = &x0 + 0.3;
        let c = loss_components(&x0, &shifted, &mask, &ctx).unwrap();
        assert!(c.vel.abs() < 1e-20);
        assert!(c.pos > 0.0 && c.simple > 0.0);
    }
}
