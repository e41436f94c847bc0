//! The GAN loss suite in numerically safe form.
//!
//! Adversarial terms use softplus identities instead of raw logs:
//! -log(sigmoid(r)) = softplus(-r) and -log(1 - sigmoid(f)) = softplus(f).
//! Both reconstruction terms are means, so their magnitude is independent of
//! resolution and batch size.

use crate::error::{Error, Result};
use crate::gradcheck::{check_fn, randn_t, GradCheckReport, TOL_PRIMITIVE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss balance knobs.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_ch_g: f64,
    pub lambda_ch_d: f64,
    pub gamma_r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ch_g: 0.1,
            lambda_ch_d: 0.01,
            gamma_r1: 10.0,
        }
    }
}

/// Discriminator adversarial loss for one head:
/// mean softplus(-real) + mean softplus(fake).
pub fn adv_loss_d<T: Scalar>(
    logits_real: &Tensor<T>,
    logits_fake: &Tensor<T>,
) -> Result<Tensor<T>> {
    logits_real
        .neg()
        .softplus()
        .mean_all()
        .add(&logits_fake.softplus().mean_all())
}

/// Non-saturating generator adversarial loss for one head:
/// mean softplus(-fake).
pub fn adv_loss_g<T: Scalar>(logits_fake: &Tensor<T>) -> Tensor<T> {
    logits_fake.neg().softplus().mean_all()
}

/// Patch + lambda_ch * channel.
pub fn combine_adv<T: Scalar>(
    l_patch: &Tensor<T>,
    l_channel: &Tensor<T>,
    lambda_ch: T,
) -> Result<Tensor<T>> {
    l_patch.add(&l_channel.scale(lambda_ch))
}

/// Masked L1 between generated and target canvases: the mean absolute
/// difference over masked elements only (mask broadcasts over the channel
/// axis). Errors on an empty mask.
pub fn rec_loss_g<T: Scalar>(
    gen: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    if gen.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "rec_loss_g",
            lhs: gen.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let mask_count: f64 = mask.data().iter().map(|v| Scalar::to_f64(*v)).sum();
    if mask_count == 0.0 {
        return Err(Error::Contract(
            "reconstruction mask is empty (no embedded pixels)".into(),
        ));
    }
    let masked = gen.sub(target)?.abs_val().mul(mask)?;
    Ok(masked
        .sum_all()
        .scale(T::from_f64(1.0 / (3.0 * mask_count))))
}

/// Mean absolute difference between the discriminator input and its
/// reconstruction, over all 6*H*W elements.
pub fn rec_loss_d<T: Scalar>(d_in: &Tensor<T>, recon: &Tensor<T>) -> Result<Tensor<T>> {
    if d_in.shape() != recon.shape() {
        return Err(Error::Dimension {
            op: "rec_loss_d",
            lhs: d_in.shape().to_vec(),
            rhs: recon.shape().to_vec(),
        });
    }
    Ok(d_in.sub(recon)?.abs_val().mean_all())
}

/// (gamma / 2) * squared gradient norm; evaluated on real inputs only.
pub fn r1_penalty<T: Scalar>(grad_norm_sq: &Tensor<T>, gamma: T) -> Tensor<T> {
    grad_norm_sq.scale(gamma * T::from_f64(0.5))
}

pub fn gradcheck_losses() -> Vec<GradCheckReport> {
    let r = randn_t(220, &[11]);
    let f = randn_t(221, &[11]);
    let gen = randn_t(222, &[3, 4, 8]);
    let tgt = randn_t(223, &[3, 4, 8]);
    let mask = Tensor::from_vec(
        (0..32).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        &[1, 4, 8],
    )
    .unwrap();
    let din = randn_t(224, &[2, 6, 2, 4]);
    let rec = randn_t(225, &[2, 6, 2, 4]);
    vec![
        check_fn("adv_loss_d", &[r.clone(), f.clone()], TOL_PRIMITIVE, &|t| {
            adv_loss_d(&t[0], &t[1])
        }),
        check_fn("adv_loss_g", &[f], TOL_PRIMITIVE, &|t| Ok(adv_loss_g(&t[0]))),
        check_fn("combine_adv", &[r], TOL_PRIMITIVE, &|t| {
            let p = t[0].narrow(0, 0, 5)?.mean_all();
            let c = t[0].narrow(0, 5, 6)?.mean_all();
            combine_adv(&p, &c, 0.1)
        }),
        check_fn("rec_loss_g", &[gen, tgt], TOL_PRIMITIVE, &|t| {
            rec_loss_g(&t[0], &t[1], &mask)
        }),
        check_fn("rec_loss_d", &[din, rec], TOL_PRIMITIVE, &|t| {
            rec_loss_d(&t[0], &t[1])
        }),
    ]
}
