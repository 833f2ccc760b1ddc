use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{ConditionSet, Denoiser};
use super::schedule::DiffusionSchedule;
use crate::error::Result;

/// Anything that predicts a clean window from a noised one.
pub trait X0Predictor {
    /// `(frames, channels)` of the windows it handles.
    fn window_shape(&self) -> (usize, usize);
    fn predict_x0(&self, x_t: &Array2<f64>, t: usize, c: &ConditionSet) -> Result<Array2<f64>>;
}

impl X0Predictor for Denoiser {
    fn window_shape(&self) -> (usize, usize) {
        (self.dims().frames, self.dims().repr)
    }

    fn predict_x0(&self, x_t: &Array2<f64>, t: usize, c: &ConditionSet) -> Result<Array2<f64>> {
        self.predict(x_t, t, c)
    }
}

fn noise(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Ancestral sampling from `x_T ~ N(0, I)`: each step predicts the clean
/// window, moves to the posterior mean and adds the posterior noise, which
/// vanishes at the last step.
pub fn sample(pred: &impl X0Predictor, c: &ConditionSet, sched: &DiffusionSchedule, seed: u64) -> Result<Array2<f64>> {
    sample_traced(pred, c, sched, seed, |_, _, _| {})
}

/// [`sample`] reporting `(t, x_t, predicted x0)` before every step.
pub fn sample_traced(
    pred: &impl X0Predictor,
    c: &ConditionSet,
    sched: &DiffusionSchedule,
    seed: u64,
    mut observe: impl FnMut(usize, &Array2<f64>, &Array2<f64>),
) -> Result<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = pred.window_shape();
    let mut x = noise(&mut rng, shape);
    for t in (0..sched.steps()).rev() {
        let x0 = pred.predict_x0(&x, t, c)?;
        observe(t, &x, &x0);
        if t == 0 {
            // The posterior is a point mass on the prediction.
            return Ok(x0);
        }
        let (c0, ct, var) = sched.posterior(t)?;
        let mut next = &x0 * c0 + &x * ct;
        next.scaled_add(var.sqrt(), &noise(&mut rng, shape));
        x = next;
    }
    Ok(x)
}
