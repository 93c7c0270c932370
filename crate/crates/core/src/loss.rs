//! Mean-squared alignment loss.
//!
//! The normalizer is `batch * height * width`: squared differences are summed
//! over channels and averaged over batch and space. Dividing additionally by the
//! channel count (the plain elementwise mean) only rescales the loss and its
//! gradient by `1 / C`; use [`elementwise_mean`] to convert.

use crate::error::Result;
use crate::tensor::FeatureMap;

/// Loss value and its gradient with respect to the first argument.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: FeatureMap,
}

pub fn mse_loss(a: &FeatureMap, b: &FeatureMap) -> Result<LossGrad> {
    a.same_dims(b, "mse loss")?;
    let d = a.dims();
    let n = (d.batch * d.height * d.width) as f64;
    let mut loss = 0f64;
    let grad: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let diff = x as f64 - y as f64;
            loss += diff * diff;
            (2.0 * diff / n) as f32
        })
        .collect();
    Ok(LossGrad {
        loss: loss / n,
        grad: FeatureMap::from_vec(d, grad)?,
    })
}

/// Converts an [`mse_loss`] value to the per-element mean over all channels.
pub fn elementwise_mean(loss: f64, channels: usize) -> f64 {
    loss / channels as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn identical_maps_have_zero_loss() {
        let a = FeatureMap::from_fn(Dims::new(2, 3, 4, 5), |b, c, y, x| (b + c * y + x) as f32).unwrap();
        let r = mse_loss(&a, &a).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_gap_sums_over_channels() {
        let c = 0.5f32;
        let channels = 3;
        let b = FeatureMap::from_fn(Dims::new(2, channels, 4, 4), |b, c, y, x| (b + c + y + x) as f32).unwrap();
        let a = b.map(|v| v + c);
        let r = mse_loss(&a, &b).unwrap();
        assert!((r.loss - channels as f64 * (c * c) as f64).abs() < 1e-9);
        assert!((elementwise_mean(r.loss, channels) - (c * c) as f64).abs() < 1e-9);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let a = FeatureMap::zeros(Dims::new(1, 1, 2, 2)).unwrap();
        let b = FeatureMap::zeros(Dims::new(1, 2, 2, 2)).unwrap();
        assert!(mse_loss(&a, &b).is_err());
    }
}
