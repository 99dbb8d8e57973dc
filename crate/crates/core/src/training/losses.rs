//! Loss primitives and the weighted generator bundle.

use candle_core::Tensor;

use crate::{Error, Result};

/// -log sigmoid(x), averaged: the "score real as real" term.
pub fn bce_logits_real(logits: &Tensor) -> Result<Tensor> {
    // softplus(-x) = log(1 + exp(-x)), stable form.
    Ok(softplus(&logits.neg()?)?.mean_all()?)
}

/// -log (1 - sigmoid(x)), averaged: the "score fake as fake" term.
pub fn bce_logits_fake(logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(logits)?.mean_all()?)
}

/// Non-saturating generator term: -log sigmoid(D(fake)).
pub fn gen_nonsaturating(logits: &Tensor) -> Result<Tensor> {
    bce_logits_real(logits)
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    let zeros = x.zeros_like()?;
    let pos = x.maximum(&zeros)?;
    let neg_abs = x.abs()?.neg()?;
    Ok((pos + (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// Mean cross-entropy of (N, C) logits against u32 class ids.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let log_p = candle_nn::ops::log_softmax(logits, 1)?;
    let picked = log_p.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Mean absolute difference.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Box regression loss: per image, the summed absolute coordinate error over
/// its objects; batch-reduced by mean over images.
pub fn box_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.sum_all()?)
}

/// Names of the eight weighted generator terms, in weight order.
pub const TERM_NAMES: [&str; 8] = [
    "gan_img", "l1_img", "perc_img", "gan_obj", "ac_obj", "gan_phr", "damsm_phr", "box",
];

/// The eight generator loss terms.
pub struct LossBundle {
    pub terms: Vec<Tensor>,
}

impl LossBundle {
    pub fn new(terms: Vec<Tensor>) -> Result<Self> {
        if terms.len() != 8 {
            return Err(Error::Data(format!("loss bundle needs 8 terms, got {}", terms.len())));
        }
        Ok(LossBundle { terms })
    }

    pub fn values(&self) -> Result<[f64; 8]> {
        let mut out = [0f64; 8];
        for (i, t) in self.terms.iter().enumerate() {
            out[i] = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        Ok(out)
    }

    /// Weighted sum, accumulated in f64 so the total reproduces the weighted
    /// sum of the logged term values exactly. Errors on any non-finite term,
    /// naming it.
    pub fn total(&self, lambda: &[f64; 8]) -> Result<Tensor> {
        let values = self.values()?;
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite generator loss term `{}`: {v}",
                    TERM_NAMES[i]
                )));
            }
        }
        let as64 = |t: &Tensor| -> Result<Tensor> { Ok(t.to_dtype(candle_core::DType::F64)?) };
        let mut total = (as64(&self.terms[0])? * lambda[0])?;
        for i in 1..8 {
            total = (total + (as64(&self.terms[i])? * lambda[i])?)?;
        }
        Ok(total)
    }
}

/// Discriminator loss for an unconditional critic.
pub fn d_loss_unconditional(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    Ok((bce_logits_real(real_logits)? + bce_logits_fake(fake_logits)?)?)
}

/// Discriminator loss for a conditional critic: matched real scored real,
/// matched fake and mismatched (shuffled-condition) real scored fake with
/// weight 0.5 each.
pub fn d_loss_conditional(
    real_matched: &Tensor,
    fake_matched: &Tensor,
    real_mismatched: Option<&Tensor>,
) -> Result<Tensor> {
    let mut loss = bce_logits_real(real_matched)?;
    match real_mismatched {
        Some(mis) => {
            loss = (loss + (bce_logits_fake(fake_matched)? * 0.5)?)?;
            loss = (loss + (bce_logits_fake(mis)? * 0.5)?)?;
        }
        None => {
            // Batch of one: no mismatched pairing exists.
            loss = (loss + bce_logits_fake(fake_matched)?)?;
        }
    }
    Ok(loss)
}
