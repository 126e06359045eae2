//! Reconstruction loss, hybrid loss composition, and the PSNR / SSIM / RMSE
//! fidelity metrics. Metrics are computed on the 0-255 scale so their
//! magnitudes line up with the published denoising literature.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.7;
pub const METRIC_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricTriple {
    /// dB, +inf when the images are identical.
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

impl MetricTriple {
    pub fn psnr_csv(&self) -> String {
        if self.psnr.is_infinite() {
            "inf".into()
        } else {
            format!("{:.4}", self.psnr)
        }
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "image shapes {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn l1_loss(pred: &Array2<f64>, clean: &Array2<f64>) -> Result<f64> {
    check_shapes(pred, clean)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(clean.iter())
        .map(|(&p, &c)| (c - p).abs())
        .sum::<f64>()
        / n)
}

/// Hybrid objective: L1 + alpha * pixel contrast + beta * instance contrast.
pub fn total_loss(l1: f64, l_pixel: f64, l_instance: f64, w: &LossWeights) -> f64 {
    l1 + w.alpha * l_pixel + w.beta * l_instance
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB; identical images give +inf.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, max_val: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if max_val <= 0.0 {
        return Err(Error::Config(format!("max_val {max_val} must be positive")));
    }
    let m = mse(a, b);
    if m == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (max_val * max_val / m).log10())
    }
}

/// Root mean squared error on whatever scale the inputs carry.
pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(mse(a, b).sqrt())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Mean SSIM with the canonical 11x11 Gaussian window (std 1.5),
/// C1 = (0.01 range)^2, C2 = (0.03 range)^2, evaluated on the valid
/// interior (no padding).
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, dynamic_range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = a.dim();
    let win = 11usize.min(h).min(w);
    let win = if win % 2 == 0 { win - 1 } else { win };
    let kernel = gaussian_kernel(win, 1.5);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let half = win / 2;

    // separable Gaussian filtering of the five local statistics
    let filt = |img: &Array2<f64>| -> Array2<f64> {
        let mut tmp = Array2::<f64>::zeros((h, w));
        for i in 0..h {
            for j in half..w - half {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * img[[i, j + t - half]];
                }
                tmp[[i, j]] = acc;
            }
        }
        let mut out = Array2::<f64>::zeros((h, w));
        for i in half..h - half {
            for j in half..w - half {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[[i + t - half, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    };

    let mu_a = filt(a);
    let mu_b = filt(b);
    let aa = filt(&(a * a));
    let bb = filt(&(b * b));
    let ab = filt(&(a * b));

    let mut sum = 0.0;
    let mut count = 0usize;
    for i in half..h - half {
        for j in half..w - half {
            let ma = mu_a[[i, j]];
            let mb = mu_b[[i, j]];
            let va = aa[[i, j]] - ma * ma;
            let vb = bb[[i, j]] - mb * mb;
            let cov = ab[[i, j]] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            sum += s;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Metrics for a [0, 1] prediction/reference pair, evaluated on the 0-255
/// scale after clipping the prediction.
pub fn metric_triple(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<MetricTriple> {
    check_shapes(pred, reference)?;
    let p = pred.mapv(|v| v.clamp(0.0, 1.0) * METRIC_SCALE);
    let r = reference.mapv(|v| v * METRIC_SCALE);
    Ok(MetricTriple {
        psnr: psnr(&p, &r, METRIC_SCALE)?,
        ssim: ssim(&p, &r, METRIC_SCALE)?,
        rmse: rmse(&p, &r)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn l1_basics() {
        let a = Array2::from_elem((8, 8), 0.4);
        let b = a.mapv(|v| v + 0.1);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!((l1_loss(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        let c = Array2::from_elem((4, 4), 0.0);
        assert!(l1_loss(&a, &c).is_err());
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 0.0, 0.0, &w), 1.0);
        assert!((total_loss(1.0, 0.2, 0.4, &w) - 1.38).abs() < 1e-12);
        let off = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &off), 0.7);
    }

    #[test]
    fn psnr_known_values() {
        let a = Array2::from_elem((16, 16), 100.0);
        let b = a.mapv(|v| v + 5.0);
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 10.0 * (255.0f64 * 255.0 / 25.0).log10()).abs() < 1e-9);
        assert!(psnr(&a, &a, 255.0).unwrap().is_infinite());
        // halving max_val lowers PSNR by 20 log10 2
        let p2 = psnr(&a, &b, 127.5).unwrap();
        assert!((p - p2 - 20.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn rmse_known_values() {
        let a = Array2::from_elem((16, 16), 10.0);
        let b = a.mapv(|v| v + 5.0);
        assert!((rmse(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn psnr_rmse_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..10 {
            let a = rand_img(32, 32, &mut rng);
            let b = rand_img(32, 32, &mut rng);
            let r = rmse(&a, &b).unwrap();
            let p = psnr(&a, &b, 255.0).unwrap();
            assert!((p - 20.0 * (255.0 / r).log10()).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identity_symmetry_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_img(32, 32, &mut rng);
        let b = rand_img(32, 32, &mut rng);
        assert!((ssim(&a, &a, 255.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b, 255.0).unwrap() - ssim(&b, &a, 255.0).unwrap()).abs() < 1e-12);

        // constant-vs-constant reduces to the luminance term
        let x = Array2::from_elem((32, 32), 0.5);
        let y = Array2::from_elem((32, 32), 0.25);
        let s = ssim(&x, &y, 1.0).unwrap();
        let c1 = 1e-4;
        let expect = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
        assert!((s - expect).abs() < 1e-9, "ssim {s} expect {expect}");
    }

    #[test]
    fn ssim_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..8 {
            let a = rand_img(24, 24, &mut rng);
            let b = rand_img(24, 24, &mut rng);
            let s = ssim(&a, &b, 255.0).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
