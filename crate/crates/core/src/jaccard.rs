//! Soft Jaccard coefficient, its loss, and the relative-gain metric.
//!
//! For a ground truth `y*` and a prediction `ŷ` with values in `[0, 1]`:
//!
//! ```text
//! J = Σ(y*·ŷ) / (Σ(y* + ŷ) − Σ(y*·ŷ))        loss = 1 − J
//! ```
//!
//! Two all-zero maps score `J = 1`. Sums are accumulated in `f64`.

use ndarray::{Array2, ArrayView2, Zip};
use thiserror::Error;

use crate::segnet::Real;

#[derive(Debug, Error, PartialEq)]
pub enum JaccardError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("non-finite value in segmentation map")]
    NonFinite,
    #[error("segmentation value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("gain needs a positive baseline, got {0}")]
    NonPositiveBaseline(f64),
}

/// Per-pixel probability raster with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap(Array2<f32>);

impl SegMap {
    pub fn new(values: Array2<f32>) -> Result<Self, JaccardError> {
        for &v in values.iter() {
            if !v.is_finite() {
                return Err(JaccardError::NonFinite);
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(JaccardError::OutOfRange(v as f64));
            }
        }
        Ok(SegMap(values))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SegMap(Array2::zeros((height, width)))
    }

    /// Ground truth from a `{0, 1}` mask.
    pub fn from_mask(mask: &Array2<u8>) -> Self {
        SegMap(mask.mapv(|v| if v != 0 { 1.0 } else { 0.0 }))
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

fn check_shapes<A, B>(a: &ArrayView2<'_, A>, b: &ArrayView2<'_, B>) -> Result<(), JaccardError> {
    if a.dim() != b.dim() {
        return Err(JaccardError::ShapeMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(())
}

/// `(Σ y*·ŷ, Σ(y* + ŷ))` in f64.
fn sums<T: Real>(y_star: &ArrayView2<'_, T>, y_hat: &ArrayView2<'_, T>) -> Result<(f64, f64), JaccardError> {
    let mut inter = 0.0f64;
    let mut total = 0.0f64;
    let mut finite = true;
    Zip::from(y_star).and(y_hat).for_each(|&a, &b| {
        let (a, b) = (a.to_f64().unwrap_or(f64::NAN), b.to_f64().unwrap_or(f64::NAN));
        finite &= a.is_finite() && b.is_finite();
        inter += a * b;
        total += a + b;
    });
    if !finite {
        return Err(JaccardError::NonFinite);
    }
    Ok((inter, total))
}

/// Soft Jaccard coefficient on raw arrays.
pub fn soft_jaccard<T: Real>(y_star: ArrayView2<'_, T>, y_hat: ArrayView2<'_, T>) -> Result<f64, JaccardError> {
    check_shapes(&y_star, &y_hat)?;
    let (inter, total) = sums(&y_star, &y_hat)?;
    let union = total - inter;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(inter / union)
}

/// Jaccard loss and its gradient with respect to `y_hat`.
///
/// With `I = Σ y*·ŷ` and `U = Σ(y* + ŷ) − I`, `∂J/∂ŷᵢ = (y*ᵢ·U − I·(1 − y*ᵢ)) / U²`.
/// The gradient is zero where `U = 0`.
pub fn jaccard_loss_grad<T: Real>(
    y_star: ArrayView2<'_, T>,
    y_hat: ArrayView2<'_, T>,
) -> Result<(f64, Array2<T>), JaccardError> {
    check_shapes(&y_star, &y_hat)?;
    let (inter, total) = sums(&y_star, &y_hat)?;
    let union = total - inter;
    if union == 0.0 {
        return Ok((0.0, Array2::zeros(y_hat.dim())));
    }
    let j = inter / union;
    let u2 = union * union;
    let grad = y_star.mapv(|t| {
        let t = t.to_f64().expect("finite");
        T::from_f64(-(t * union - inter * (1.0 - t)) / u2).expect("representable")
    });
    Ok((1.0 - j, grad))
}

pub fn jaccard_image(y_star: &SegMap, y_hat: &SegMap) -> Result<f64, JaccardError> {
    soft_jaccard(y_star.view(), y_hat.view())
}

pub fn jaccard_loss(y_star: &SegMap, y_hat: &SegMap) -> Result<f64, JaccardError> {
    Ok(1.0 - jaccard_image(y_star, y_hat)?)
}

/// Relative improvement `(new − baseline) / baseline`.
pub fn gain(new_score: f64, baseline: f64) -> Result<f64, JaccardError> {
    if !(baseline > 0.0) {
        return Err(JaccardError::NonPositiveBaseline(baseline));
    }
    Ok((new_score - baseline) / baseline)
}
