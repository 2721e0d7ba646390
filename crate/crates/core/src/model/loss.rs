//! Boundary-weighted BCE + IoU structure loss and the four-term total loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Side of the local-mean window used for boundary weighting.
pub const WEIGHT_WINDOW: usize = 31;

/// `1 + 5 * |mean_31x31(mask) - mask|` with zero padding; the mean always
/// divides by the full window area. Accepts `[H, W]` or `[1, H, W]`.
pub fn boundary_weight<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let (h, w) = plane(mask.shape());
    let m = mask.data();
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += m[y * w + x].to_f64_lossy();
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = WEIGHT_WINDOW / 2;
    let area = (WEIGHT_WINDOW * WEIGHT_WINDOW) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            let v = m[y * w + x].to_f64_lossy();
            out.push(T::lit(1.0 + 5.0 * (s / area - v).abs()));
        }
    }
    Tensor::from_vec(mask.shape(), out).expect("same element count")
}

fn plane(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [h, w] | [1, h, w] => (h, w),
        _ => panic!("expected a single [H, W] plane, got {shape:?}"),
    }
}

fn iou_terms<T: Scalar>(z: &[T], y: &[T], w: &[T]) -> (T, T) {
    let (mut inter, mut union) = (T::zero(), T::zero());
    for ((&z, &y), &w) in z.iter().zip(y).zip(w) {
        let p = z.sigmoid();
        inter += p * y * w;
        union += (p + y) * w;
    }
    (inter + T::one(), union - inter + T::one())
}

/// Loss value from logits `z`, binary targets `y` and pixel weights `w`.
pub fn structure_loss_value<T: Scalar>(z: &[T], y: &[T], w: &[T]) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for ((&z, &y), &w) in z.iter().zip(y).zip(w) {
        num += w * (z.softplus() - y * z);
        den += w;
    }
    let (i, u) = iou_terms(z, y, w);
    num / den + T::one() - i / u
}

/// Gradient of [`structure_loss_value`] with respect to the logits.
pub fn structure_loss_grad<T: Scalar>(z: &[T], y: &[T], w: &[T]) -> Vec<T> {
    let den: T = w.iter().copied().sum();
    let (i, u) = iou_terms(z, y, w);
    let u2 = u * u;
    z.iter()
        .zip(y)
        .zip(w)
        .map(|((&z, &y), &w)| {
            let p = z.sigmoid();
            let bce = w * (p - y) / den;
            let diou_dp = -(y * w * u - i * w * (T::one() - y)) / u2;
            bce + diou_dp * p * (T::one() - p)
        })
        .collect()
}

/// Structure loss of a logit map against a binary target.
pub fn structure_loss_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if logits.len() != target.len() {
        return Err(Error::shape(target.shape(), logits.shape()));
    }
    let weight = boundary_weight(target);
    Ok(structure_loss_value(logits.data(), target.data(), weight.data()))
}

/// Probability clamp used when scoring probability maps.
pub const PROB_EPS: f64 = 1e-7;

/// Structure loss of a probability map (clamped to `[eps, 1 - eps]`).
pub fn structure_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let eps = T::lit(PROB_EPS);
    let logits = pred.map(|p| {
        let p = p.max(eps).min(T::one() - eps);
        (p / (T::one() - p)).ln()
    });
    structure_loss_logits(&logits, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub refine: f64,
    pub coarse: f64,
    pub count: f64,
    pub line: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            refine: 1.0,
            coarse: 1.0,
            count: 0.05,
            line: 0.5,
        }
    }
}

/// Unweighted values of the four loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub refine: f64,
    pub coarse: f64,
    pub count: f64,
    pub line: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.refine * self.refine + w.coarse * self.coarse + w.count * self.count + w.line * self.line
    }
}
