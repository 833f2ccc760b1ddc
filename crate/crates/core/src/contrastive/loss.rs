use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

fn check(s: &Array2<f64>, tau: f64) -> Result<()> {
    if s.nrows() != s.ncols() {
        return Err(Error::Shape(format!(
            "InfoNCE needs a square similarity matrix, got {:?}",
            s.dim()
        )));
    }
    if s.nrows() == 0 {
        return Err(Error::Shape("empty similarity matrix".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Mean of `-log softmax(logits[i])[i]` over rows, and its gradient with
/// respect to the logits.
fn row_term(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = (v - lse).exp() / n as f64;
        }
        grad[[i, i]] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

/// Loss and gradient with respect to the logits `S / tau`.
pub(crate) fn info_nce_logit_grad(s: &Array2<f64>, tau: f64, symmetric: bool) -> Result<(f64, Array2<f64>)> {
    check(s, tau)?;
    let logits = s / tau;
    let (l_row, g_row) = row_term(&logits);
    if !symmetric {
        return Ok((l_row, g_row));
    }
    let (l_col, g_col) = row_term(&logits.t().to_owned());
    Ok((0.5 * (l_row + l_col), 0.5 * (g_row + g_col.t())))
}

/// InfoNCE over a music-to-motion similarity matrix: matched pairs sit on
/// the diagonal and every other entry of the row is a negative. With
/// `symmetric` the motion-to-music direction (columns) is averaged in.
pub fn info_nce_loss(s: &Array2<f64>, tau: f64, symmetric: bool) -> Result<f64> {
    info_nce_logit_grad(s, tau, symmetric).map(|(l, _)| l)
}

/// [`info_nce_loss`] together with its gradient with respect to `s`.
pub fn info_nce_with_grad(s: &Array2<f64>, tau: f64, symmetric: bool) -> Result<(f64, Array2<f64>)> {
    let (l, g) = info_nce_logit_grad(s, tau, symmetric)?;
    Ok((l, g / tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_similarities_give_ln_n() {
        for n in [1, 2, 5, 17] {
            let s = Array2::from_elem((n, n), 0.3);
            for sym in [false, true] {
                let l = info_nce_loss(&s, 0.07, sym).unwrap();
                assert!((l - (n as f64).ln()).abs() < 1e-10, "n={n} l={l}");
            }
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let l = info_nce_loss(&s, 1.0, false).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-10);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_square_and_bad_tau() {
        assert!(info_nce_loss(&Array2::zeros((2, 3)), 1.0, true).is_err());
        assert!(info_nce_loss(&Array2::zeros((2, 2)), 0.0, true).is_err());
    }
}
