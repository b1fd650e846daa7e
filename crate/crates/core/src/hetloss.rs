//! Region-weighted losses. Every loss treats its targets, region map and
//! normalization as constants: gradients only flow into the supervised
//! prediction.

use crate::error::{Error, Result};
use crate::grid::{check_same_dims, softmax_backward, LabelMap, ProbMap, RegionMap};
use crate::weights::WeightSchedule;

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Smoothing added to both numerator and denominator of every Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Denominator floor used by [`check_gradient`] when both gradients vanish.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Space the gradient of a [`LossOutput`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    /// pre-softmax scores of the supervised prediction
    Logits,
    /// probabilities of the supervised prediction
    Probs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Same layout as the supervised input (`H x W x C`).
    pub grad: Vec<f64>,
    pub wrt: GradWrt,
}

impl LossOutput {
    /// Gradient with respect to logits, pulling probability gradients
    /// through the softmax of `p`.
    pub fn logit_grad(&self, p: &ProbMap) -> Result<Vec<f64>> {
        match self.wrt {
            GradWrt::Logits => Ok(self.grad.clone()),
            GradWrt::Probs => softmax_backward(p, &self.grad),
        }
    }

    /// Sum of two losses whose gradients are both taken with respect to the
    /// logits behind `p`.
    pub fn combine(&self, other: &LossOutput, p: &ProbMap) -> Result<LossOutput> {
        let a = self.logit_grad(p)?;
        let b = other.logit_grad(p)?;
        Ok(LossOutput {
            value: self.value + other.value,
            grad: a.iter().zip(&b).map(|(x, y)| x + y).collect(),
            wrt: GradWrt::Logits,
        })
    }

    pub fn scaled(mut self, k: f64) -> LossOutput {
        self.value *= k;
        self.grad.iter_mut().for_each(|g| *g *= k);
        self
    }
}

/// Per-pixel weights and their sum `Z`.
fn pixel_weights(regions: &RegionMap, w: &WeightSchedule) -> Result<(Vec<f64>, f64)> {
    let per_pixel: Vec<f64> = regions.data().iter().map(|&r| w[r]).collect();
    let z: f64 = per_pixel.iter().sum();
    if !(z > 0.0) {
        return Err(Error::ZeroNormalization);
    }
    Ok((per_pixel, z))
}

/// Weighted cross-entropy against hard targets, normalized by the total
/// weight. The gradient is taken with respect to logits.
pub fn het_ce(p: &ProbMap, target: &LabelMap, regions: &RegionMap, w: &WeightSchedule) -> Result<LossOutput> {
    check_same_dims("het_ce target", p.dims(), target.dims())?;
    check_same_dims("het_ce regions", p.dims(), regions.dims())?;
    let c = p.num_classes();
    target.check_classes(c)?;
    let (wx, z) = pixel_weights(regions, w)?;

    let mut sum = 0.0;
    let mut grad = p.data().to_vec();
    for (i, (px, g)) in p.pixels().zip(grad.chunks_exact_mut(c)).enumerate() {
        let t = target.get(i);
        sum += wx[i] * px[t].max(LOG_CLAMP).ln();
        g[t] -= 1.0;
        let scale = wx[i] / z;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(LossOutput { value: -sum / z, grad, wrt: GradWrt::Logits })
}

/// Weighted soft Dice loss averaged over classes.
///
/// Weights are divided by their pixel mean `Z / |pixels|` before entering the
/// per-class ratios. Without smoothing the ratios are invariant to this
/// rescaling; with it, the loss becomes independent of the overall weight
/// scale and reduces to the ordinary smooth Dice loss when all weights agree.
/// The gradient is taken with respect to probabilities.
pub fn het_dice(
    p: &ProbMap,
    target_onehot: &ProbMap,
    regions: &RegionMap,
    w: &WeightSchedule,
) -> Result<LossOutput> {
    check_same_dims("het_dice target", p.dims(), target_onehot.dims())?;
    check_same_dims("het_dice regions", p.dims(), regions.dims())?;
    let c = p.num_classes();
    if target_onehot.num_classes() != c {
        return Err(Error::ShapeMismatch(format!(
            "het_dice: {c} predicted classes, {} target classes",
            target_onehot.num_classes()
        )));
    }
    if target_onehot.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParameter("het_dice target must be one-hot".into()));
    }
    let (wx, z) = pixel_weights(regions, w)?;
    let mean_w = z / p.num_pixels() as f64;

    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    for (i, (px, ty)) in p.pixels().zip(target_onehot.pixels()).enumerate() {
        let v = wx[i] / mean_w;
        for k in 0..c {
            num[k] += v * 2.0 * ty[k] * px[k];
            den[k] += v * (ty[k] + px[k]);
        }
    }
    let ratio_sum: f64 = (0..c).map(|k| (num[k] + DICE_EPS) / (den[k] + DICE_EPS)).sum();
    let value = 1.0 - ratio_sum / c as f64;

    let mut grad = vec![0.0; p.data().len()];
    for (i, (ty, g)) in target_onehot.pixels().zip(grad.chunks_exact_mut(c)).enumerate() {
        let v = wx[i] / mean_w;
        for k in 0..c {
            let d = den[k] + DICE_EPS;
            g[k] = -(v * (2.0 * ty[k] * d - (num[k] + DICE_EPS))) / (d * d * c as f64);
        }
    }
    Ok(LossOutput { value, grad, wrt: GradWrt::Probs })
}

/// Weighted squared error between two probability maps; gradient with
/// respect to `p`.
pub fn het_mse(p: &ProbMap, reference: &ProbMap, regions: &RegionMap, w: &WeightSchedule) -> Result<LossOutput> {
    check_same_dims("het_mse reference", p.dims(), reference.dims())?;
    check_same_dims("het_mse regions", p.dims(), regions.dims())?;
    let c = p.num_classes();
    if reference.num_classes() != c {
        return Err(Error::ShapeMismatch("het_mse class counts differ".into()));
    }
    let (wx, z) = pixel_weights(regions, w)?;

    let mut sum = 0.0;
    let mut grad = vec![0.0; p.data().len()];
    for (i, ((px, rx), g)) in p.pixels().zip(reference.pixels()).zip(grad.chunks_exact_mut(c)).enumerate() {
        let mut sq = 0.0;
        for k in 0..c {
            let d = px[k] - rx[k];
            sq += d * d;
            g[k] = 2.0 * wx[i] / z * d;
        }
        sum += wx[i] * sq;
    }
    Ok(LossOutput { value: sum / z, grad, wrt: GradWrt::Probs })
}

/// Largest relative disagreement between the analytical gradient of `loss`
/// at `x` and central finite differences with the given step.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn check_gradient<F>(loss: F, x: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 1e-6 && step < 1e-2) {
        return Err(Error::InvalidParameter(format!("finite-difference step {step} outside (1e-6, 1e-2)")));
    }
    let (_, analytic) = loss(x)?;
    if analytic.len() != x.len() {
        return Err(Error::ShapeMismatch("gradient length differs from input".into()));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let (plus, _) = loss(&probe)?;
        probe[i] = x[i] - step;
        let (minus, _) = loss(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
