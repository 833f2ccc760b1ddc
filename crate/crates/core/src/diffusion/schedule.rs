use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_BETA: f64 = 0.999;

/// Noise schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas evenly spaced from `beta_start` to `beta_end`.
    Linear { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with offset `s`.
    Cosine { s: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine { s: 0.008 }
    }
}

/// Per-step `beta`, `alpha = 1 - beta` and cumulative `alpha_bar`.
/// Step `t` indexes the state after `t + 1` noising steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        } => (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine { s } => {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("cosine offset {s} must be >= 0")));
            }
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(MAX_BETA))
                .collect()
        }
    };
    DiffusionSchedule::from_betas_with(kind, beta)
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        let kind = ScheduleKind::Linear {
            beta_start: beta.first().copied().unwrap_or(0.0),
            beta_end: beta.last().copied().unwrap_or(0.0),
        };
        Self::from_betas_with(kind, beta)
    }

    pub(crate) fn from_betas_with(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` one step earlier; 1 before any noise.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Config(format!("step {t} outside 0..{}", self.steps())));
        }
        Ok(())
    }

    /// Coefficients `(c0, ct, variance)` of the posterior
    /// `q(x_{t-1} | x_t, x0) = N(c0·x0 + ct·x_t, variance)`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar_prev(t);
        let b = self.beta[t];
        let c0 = b * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * self.alpha[t].sqrt() / (1.0 - ab);
        let var = b * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct, var))
    }
}

/// `sqrt(alpha_bar)·x0 + sqrt(1 - alpha_bar)·eps`.
pub fn q_sample_at(x0: &Array2<f64>, alpha_bar: f64, eps: &Array2<f64>) -> Result<Array2<f64>> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.dim(), eps.dim())));
    }
    Ok(x0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt())
}

/// Closed-form draw of `x_t` given `x0`.
pub fn q_sample(x0: &Array2<f64>, t: usize, eps: &Array2<f64>, sched: &DiffusionSchedule) -> Result<Array2<f64>> {
    sched.check(t)?;
    q_sample_at(x0, sched.alpha_bar[t], eps)
}

/// One forward transition `x_{t-1} -> x_t`.
pub fn q_step(prev: &Array2<f64>, t: usize, eps: &Array2<f64>, sched: &DiffusionSchedule) -> Result<Array2<f64>> {
    sched.check(t)?;
    if prev.dim() != eps.dim() {
        return Err(Error::Shape(format!("x {:?} vs noise {:?}", prev.dim(), eps.dim())));
    }
    let b = sched.beta[t];
    Ok(prev * (1.0 - b).sqrt() + eps * b.sqrt())
}
