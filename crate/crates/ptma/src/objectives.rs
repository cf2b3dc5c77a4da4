//! Losses: frame-wise cross-entropy, reconstruction MSE, and the Gaussian
//! KL penalty, plus their weighted combination.
//!
//! The KL term is the standard nonnegative divergence of `N(mu, sigma^2)`
//! from `N(0, 1)`, `0.5 * (mu^2 + sigma^2 - 1 - log sigma^2)` averaged over
//! valid frames, so minimizing it pulls the latent toward the prior.
//! Cross-entropy sums over frames while the other two average, and a
//! `normalize_cls` flag switches the classification term to a mean as well.
//!
//! Padded frames carry a `valid = false` flag and contribute to nothing.

use crate::error::{PtmaError, Result};
use crate::model::{ForwardTrace, Mode};
use crate::numerics::tensor::{real, Scalar, Tensor};
use crate::numerics::{Tape, VarId};
use serde::{Deserialize, Serialize};

/// Trade-off weights for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_rec: f64,
    pub lambda_kld: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_rec: 1.0,
            lambda_kld: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cls <= 0.0 {
            return Err(PtmaError::config(
                "lambda1 must be > 0: classification is always supervised",
            ));
        }
        if self.lambda_rec < 0.0 || self.lambda_kld < 0.0 {
            return Err(PtmaError::config("lambda2/lambda3 must be >= 0"));
        }
        Ok(())
    }

    /// Weights after mode gating: `query-only` zeroes both auxiliary terms,
    /// `ae` zeroes the KL weight, `kld-only` zeroes the reconstruction
    /// weight, `baseline-gru` keeps only classification.
    pub fn effective(&self, mode: Mode) -> (f64, f64, f64) {
        match mode {
            Mode::BaselineGru | Mode::QueryOnly => (self.lambda_cls, 0.0, 0.0),
            Mode::Autoencoder => (self.lambda_cls, self.lambda_rec, 0.0),
            Mode::KldOnly => (self.lambda_cls, 0.0, self.lambda_kld),
            Mode::Full => (self.lambda_cls, self.lambda_rec, self.lambda_kld),
        }
    }

    /// Combines raw component values into the mode-gated total.
    pub fn combine(&self, mode: Mode, l_cls: f64, l_rec: f64, l_kld: f64) -> f64 {
        let (w1, w2, w3) = self.effective(mode);
        w1 * l_cls + w2 * l_rec + w3 * l_kld
    }
}

/// Scalar values of one window's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_rec: f64,
    pub l_kld: f64,
    pub total: f64,
    pub frames_counted: usize,
}

fn count_valid(valid: &[bool]) -> Result<usize> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(PtmaError::data("no valid frames in window"));
    }
    Ok(n)
}

/// `[rows, cols]` constant with row t all ones when `valid[t]`, else zeros.
fn row_mask<T: Scalar>(valid: &[bool], cols: usize) -> Tensor<T> {
    let data: Vec<T> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat(if v { T::one() } else { T::zero() }).take(cols))
        .collect();
    Tensor::new(vec![valid.len(), cols], data).expect("rows * cols data")
}

/// Cross-entropy over valid frames: `sum_t -log softmax(logits_t)[label_t]`,
/// divided by the valid-frame count when `normalize` is set.
pub fn cls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: VarId,
    labels: &[u16],
    valid: &[bool],
    normalize: bool,
) -> Result<VarId> {
    let shape = tape.value(logits).shape().to_vec();
    let (t, classes) = (shape[0], shape[1]);
    if labels.len() != t || valid.len() != t {
        return Err(PtmaError::Shape {
            op: "cls_loss",
            shapes: format!(
                "logits {:?} vs {} labels, {} flags",
                shape,
                labels.len(),
                valid.len()
            ),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(PtmaError::data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let t_valid = count_valid(valid)?;

    let mut onehot = vec![T::zero(); t * classes];
    for (i, (&label, &ok)) in labels.iter().zip(valid).enumerate() {
        if ok {
            onehot[i * classes + label as usize] = T::one();
        }
    }
    let onehot = tape.constant(Tensor::new(shape, onehot)?);
    let log_probs = tape.log_softmax(logits)?;
    let picked = tape.mul(log_probs, onehot)?;
    let total = tape.sum(picked)?;
    let scale = if normalize { -1.0 / t_valid as f64 } else { -1.0 };
    tape.scale(total, real::<T>(scale))
}

/// Mean over valid frames of the squared reconstruction residual, summed
/// over feature dimensions.
pub fn rec_loss<T: Scalar>(
    tape: &mut Tape<T>,
    recon: VarId,
    target: &Tensor<T>,
    valid: &[bool],
) -> Result<VarId> {
    if tape.value(recon).shape() != target.shape() {
        return Err(PtmaError::Shape {
            op: "rec_loss",
            shapes: format!(
                "reconstruction {:?} vs target {:?}",
                tape.value(recon).shape(),
                target.shape()
            ),
        });
    }
    let t_valid = count_valid(valid)?;
    let cols = target.cols();
    let target = tape.constant(target.clone());
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    let mask = tape.constant(row_mask(valid, cols));
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, real::<T>(1.0 / t_valid as f64))
}

/// KL of `N(mu, sigma^2)` from `N(0, 1)`:
/// `(1 / 2 T_valid) * sum_t sum_i (mu^2 + sigma^2 - 1 - log sigma^2)`.
pub fn kld_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mu: VarId,
    sigma: VarId,
    valid: &[bool],
) -> Result<VarId> {
    if tape.value(mu).shape() != tape.value(sigma).shape() {
        return Err(PtmaError::Shape {
            op: "kld_loss",
            shapes: format!(
                "mu {:?} vs sigma {:?}",
                tape.value(mu).shape(),
                tape.value(sigma).shape()
            ),
        });
    }
    if tape.value(sigma).data().iter().any(|&s| s <= T::zero()) {
        return Err(PtmaError::numeric("kld_loss needs sigma > 0"));
    }
    let t_valid = count_valid(valid)?;
    let cols = tape.value(mu).cols();

    let mu_sq = tape.mul(mu, mu)?;
    let var = tape.mul(sigma, sigma)?;
    let log_var = tape.log(var)?;
    let sum_sq = tape.add(mu_sq, var)?;
    let minus_one = tape.add_scalar(sum_sq, -T::one())?;
    let term = tape.sub(minus_one, log_var)?;
    let mask = tape.constant(row_mask(valid, cols));
    let masked = tape.mul(term, mask)?;
    let total = tape.sum(masked)?;
    tape.scale(total, real::<T>(0.5 / t_valid as f64))
}

/// Builds every applicable loss for one window trace and combines them with
/// the mode-gated weights. Returns the total-loss tape handle and the scalar
/// breakdown.
#[allow(clippy::too_many_arguments)]
pub fn window_objective<T: Scalar>(
    tape: &mut Tape<T>,
    trace: &ForwardTrace<T>,
    mode: Mode,
    labels: &[u16],
    valid: &[bool],
    recon_target: &Tensor<T>,
    weights: &LossWeights,
    normalize_cls: bool,
) -> Result<(VarId, LossBreakdown)> {
    weights.validate()?;
    let (w1, w2, w3) = weights.effective(mode);
    let frames_counted = count_valid(valid)?;

    let cls = cls_loss(tape, trace.logits, labels, valid, normalize_cls)?;
    let mut total = tape.scale(cls, real::<T>(w1))?;
    let l_cls = tape.value(cls).item().to_f64();

    let mut l_rec = 0.0;
    if let Some(recon) = trace.recon {
        let rec = rec_loss(tape, recon, recon_target, valid)?;
        l_rec = tape.value(rec).item().to_f64();
        if w2 > 0.0 {
            let weighted = tape.scale(rec, real::<T>(w2))?;
            total = tape.add(total, weighted)?;
        }
    } else if w2 > 0.0 && matches!(mode, Mode::Autoencoder | Mode::Full) {
        return Err(PtmaError::config(
            "reconstruction weight set but the trace has no decoder output",
        ));
    }

    let mut l_kld = 0.0;
    if let (Some(mu), Some(sigma)) = (trace.mu, trace.sigma) {
        let kld = kld_loss(tape, mu, sigma, valid)?;
        l_kld = tape.value(kld).item().to_f64();
        if w3 > 0.0 {
            let weighted = tape.scale(kld, real::<T>(w3))?;
            total = tape.add(total, weighted)?;
        }
    } else if w3 > 0.0 && matches!(mode, Mode::KldOnly | Mode::Full) {
        return Err(PtmaError::config(
            "KL weight set but the trace has no latent distribution",
        ));
    }

    let breakdown = LossBreakdown {
        l_cls,
        l_rec,
        l_kld,
        total: w1 * l_cls + w2 * l_rec + w3 * l_kld,
        frames_counted,
    };
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Value-level entry points (no gradients): used by tests and reporting.
// ---------------------------------------------------------------------------

pub fn cls_loss_value<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u16],
    valid: &[bool],
    normalize: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = cls_loss(&mut tape, l, labels, valid, normalize)?;
    Ok(tape.value(loss).item().to_f64())
}

pub fn rec_loss_value<T: Scalar>(
    target: &Tensor<T>,
    recon: &Tensor<T>,
    valid: &[bool],
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone());
    let loss = rec_loss(&mut tape, r, target, valid)?;
    Ok(tape.value(loss).item().to_f64())
}

pub fn kld_loss_value<T: Scalar>(
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    valid: &[bool],
) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let s = tape.constant(sigma.clone());
    let loss = kld_loss(&mut tape, m, s, valid)?;
    Ok(tape.value(loss).item().to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng::Rng;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        // a +/-200 logit margin puts probability exactly 1.0 on the true
        // class in double precision
        let logits = Tensor::new(vec![1, 3], vec![200.0_f64, -200.0, -200.0]).unwrap();
        let loss = cls_loss_value(&logits, &[0], &[true], false).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        let loss = cls_loss_value(&logits, &[1], &[true], false).unwrap();
        assert!((loss - 3.0_f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn cls_loss_sums_over_frames() {
        let one = Tensor::new(vec![1, 3], vec![0.4_f64, -0.2, 0.9]).unwrap();
        let two = Tensor::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec()]).unwrap();
        let l1 = cls_loss_value(&one, &[2], &[true], false).unwrap();
        let l2 = cls_loss_value(&two, &[2, 2], &[true, true], false).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        // normalized variant averages instead
        let l2n = cls_loss_value(&two, &[2, 2], &[true, true], true).unwrap();
        assert!((l2n - l1).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_requires_valid_frames_and_known_labels() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(cls_loss_value(&logits, &[0, 1], &[false, false], false).is_err());
        assert!(cls_loss_value(&logits, &[0, 3], &[true, true], false).is_err());
    }

    #[test]
    fn invalid_frames_do_not_contribute() {
        let logits = Tensor::new(
            vec![2, 3],
            vec![0.4_f64, -0.2, 0.9, /* junk row: */ 40.0, -3.0, 0.0],
        )
        .unwrap();
        let with_pad = cls_loss_value(&logits, &[2, 0], &[true, false], false).unwrap();
        let alone = cls_loss_value(
            &Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]).unwrap(),
            &[2],
            &[true],
            false,
        )
        .unwrap();
        assert!((with_pad - alone).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_cases() {
        let target = Tensor::new(vec![1, 2], vec![1.0_f64, 0.0]).unwrap();
        assert_eq!(rec_loss_value(&target, &target, &[true]).unwrap(), 0.0);

        let rec = Tensor::<f64>::zeros(&[1, 2]);
        let l = rec_loss_value(&target, &rec, &[true]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);

        // doubling the residual quadruples the loss
        let target2 = Tensor::new(vec![1, 2], vec![2.0_f64, 0.0]).unwrap();
        let l2 = rec_loss_value(&target2, &rec, &[true]).unwrap();
        assert!((l2 - 4.0 * l).abs() < 1e-12);

        // shape mismatch
        let bad = Tensor::<f64>::zeros(&[1, 3]);
        assert!(rec_loss_value(&target, &bad, &[true]).is_err());
    }

    #[test]
    fn kld_loss_cases() {
        let zeros = Tensor::<f64>::zeros(&[1, 1]);
        let ones = Tensor::<f64>::filled(&[1, 1], 1.0);
        assert_eq!(kld_loss_value(&zeros, &ones, &[true]).unwrap(), 0.0);

        // mu = 1, sigma = 1: KL = mu^2 / 2 = 0.5
        let mu1 = Tensor::<f64>::filled(&[1, 1], 1.0);
        let l = kld_loss_value(&mu1, &ones, &[true]).unwrap();
        assert!((l - 0.5).abs() < 1e-12);

        // sigma <= 0 rejected
        let zero_sigma = Tensor::<f64>::zeros(&[1, 1]);
        assert!(kld_loss_value(&mu1, &zero_sigma, &[true]).is_err());
    }

    #[test]
    fn kld_nonnegative_and_zero_only_at_prior() {
        let mut rng = Rng::from_seed(21);
        for _ in 0..200 {
            let mu: Tensor<f64> = rng.normal_tensor(&[3, 2]);
            let sigma = rng.normal_tensor(&[3, 2]).map(|v: f64| v.abs() + 0.05);
            let l = kld_loss_value(&mu, &sigma, &[true, true, true]).unwrap();
            assert!(l >= 0.0, "{l}");
            let at_prior = mu.data().iter().all(|&m| m == 0.0)
                && sigma.data().iter().all(|&s| (s - 1.0).abs() < 1e-9);
            if !at_prior {
                assert!(l > 0.0);
            }
        }
        // and exactly zero at the prior
        let mu = Tensor::<f64>::zeros(&[3, 2]);
        let sigma = Tensor::<f64>::filled(&[3, 2], 1.0);
        let l = kld_loss_value(&mu, &sigma, &[true, true, true]).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn combine_matches_examples() {
        let w = LossWeights {
            lambda_cls: 1.0,
            lambda_rec: 0.0,
            lambda_kld: 0.0,
        };
        assert_eq!(w.combine(Mode::Full, 2.0, 3.0, 5.0), 2.0);

        let w = LossWeights {
            lambda_cls: 1.0,
            lambda_rec: 1.0,
            lambda_kld: 0.1,
        };
        assert!((w.combine(Mode::Full, 2.0, 3.0, 5.0) - 5.5).abs() < 1e-12);

        // query-only ignores lambda2/lambda3 no matter their values
        let w = LossWeights {
            lambda_cls: 1.0,
            lambda_rec: 100.0,
            lambda_kld: 100.0,
        };
        assert_eq!(w.combine(Mode::QueryOnly, 2.0, 3.0, 5.0), 2.0);
        assert_eq!(w.effective(Mode::QueryOnly), (1.0, 0.0, 0.0));
    }

    #[test]
    fn combine_is_monotone_in_components() {
        let w = LossWeights::default();
        let base = w.combine(Mode::Full, 1.0, 1.0, 1.0);
        assert!(w.combine(Mode::Full, 2.0, 1.0, 1.0) >= base);
        assert!(w.combine(Mode::Full, 1.0, 2.0, 1.0) >= base);
        assert!(w.combine(Mode::Full, 1.0, 1.0, 2.0) >= base);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights {
            lambda_cls: 0.0,
            lambda_rec: 1.0,
            lambda_kld: 0.1
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            lambda_cls: 1.0,
            lambda_rec: -1.0,
            lambda_kld: 0.1
        }
        .validate()
        .is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn each_loss_passes_gradient_check() {
        let mut rng = Rng::from_seed(31);
        let valid = [true, true, false, true];

        // classification
        let logits: Tensor<f64> = rng.normal_tensor(&[4, 3]);
        let labels = [0u16, 2, 1, 1];
        let report = grad_check(
            &[("logits", logits)],
            |tape, vars| cls_loss(tape, vars[0], &labels, &valid, false),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");

        // reconstruction
        let recon: Tensor<f64> = rng.normal_tensor(&[4, 5]);
        let target: Tensor<f64> = rng.normal_tensor(&[4, 5]);
        let report = grad_check(
            &[("recon", recon)],
            |tape, vars| rec_loss(tape, vars[0], &target, &valid),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");

        // KL, with sigma comfortably positive
        let mu: Tensor<f64> = rng.normal_tensor(&[4, 2]);
        let sigma = rng.normal_tensor(&[4, 2]).map(|v: f64| v.abs() + 0.5);
        let report = grad_check(
            &[("mu", mu), ("sigma", sigma)],
            |tape, vars| kld_loss(tape, vars[0], vars[1], &valid),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
