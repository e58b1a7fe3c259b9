//! Full-reference (PSNR, SSIM, FSIM) and no-reference (UIQM, UCIQE) quality metrics.
//!
//! PSNR is computed over RGB samples; SSIM and FSIM over the BT.601 luma
//! plane. All inputs are `[0,1]` images.

mod fsim;
mod ssim;
mod uciqe;
mod uiqm;

pub use fsim::{fsim, phase_congruency, FSIM_MIN_SIDE};
pub use ssim::{gaussian_window, ssim, SSIM_MIN_SIDE};
pub use uciqe::{srgb_to_lab, uciqe, uciqe_terms, UciqeTerms};
pub use uiqm::{uicm, uiconm, uiqm, uiqm_terms, uism, UiqmTerms, NR_MIN_SIDE};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ImageBuf;

/// Tag recorded in reports so numbers stay comparable across versions.
pub const METRIC_DEFINITION_VERSION: &str =
    "psnr-rgb-cap100/ssim-luma-g11s1.5/fsim-luma-lg4x4/uiqm-0.0282-0.2953-3.5753/uciqe-0.4680-0.2745-0.2576@v1";

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image {width}x{height} smaller than the {min}px minimum")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ssim: f64,
    pub psnr_db: f64,
    pub uiqm: f64,
    pub uciqe: f64,
    pub fsim: f64,
}

impl MetricSet {
    pub fn is_finite(&self) -> bool {
        [self.ssim, self.psnr_db, self.uiqm, self.uciqe, self.fsim]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub(crate) fn same_dims(a: &ImageBuf, b: &ImageBuf) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    Ok(())
}

pub(crate) fn min_side(img: &ImageBuf, min: usize) -> Result<(), MetricError> {
    if img.width() < min || img.height() < min {
        return Err(MetricError::TooSmall {
            width: img.width(),
            height: img.height(),
            min,
        });
    }
    Ok(())
}

/// Mean squared error over every sample of both images.
pub fn mse(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

/// `10·log10(1/MSE)` with peak 1, capped at 100 dB.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// All five metrics for an output/reference pair. UIQM and UCIQE score `out`.
pub fn evaluate_pair(out: &ImageBuf, gt: &ImageBuf) -> Result<MetricSet, MetricError> {
    same_dims(out, gt)?;
    Ok(MetricSet {
        ssim: ssim(out, gt)?,
        psnr_db: psnr(out, gt)?,
        uiqm: uiqm(out)?,
        uciqe: uciqe(out)?,
        fsim: fsim(out, gt)?,
    })
}

/// Field-wise arithmetic mean.
pub fn dataset_means(sets: &[MetricSet]) -> Result<MetricSet, MetricError> {
    if sets.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let n = sets.len() as f64;
    let mean = |f: fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / n;
    Ok(MetricSet {
        ssim: mean(|m| m.ssim),
        psnr_db: mean(|m| m.psnr_db),
        uiqm: mean(|m| m.uiqm),
        uciqe: mean(|m| m.uciqe),
        fsim: mean(|m| m.fsim),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> ImageBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuf::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_examples() {
        let a = random(16, 16, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let base = ImageBuf::filled(16, 16, [0.25; 3]);
        let off = ImageBuf::filled(16, 16, [0.35; 3]);
        assert!((psnr(&base, &off).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(
            psnr(&base, &random(16, 15, 2)),
            Err(MetricError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = ImageBuf::filled(32, 32, [0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let noisy = |amp: f64| {
            let d = base.data().iter().zip(&u).map(|(v, n)| (v + amp * n).clamp(0.0, 1.0)).collect();
            ImageBuf::new(32, 32, d).unwrap()
        };
        let p: Vec<f64> = [0.01, 0.05, 0.2].iter().map(|&a| psnr(&base, &noisy(a)).unwrap()).collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn means() {
        let m = MetricSet { ssim: 0.9, psnr_db: 25.0, uiqm: 0.7, uciqe: 0.5, fsim: 0.9 };
        assert_eq!(dataset_means(&[m]).unwrap(), m);
        assert_eq!(dataset_means(&[]), Err(MetricError::EmptyInput));
        let m2 = MetricSet { psnr_db: 27.0, ..m };
        assert!((dataset_means(&[m, m2]).unwrap().psnr_db - 26.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_identity() {
        let a = random(40, 36, 5);
        let m = evaluate_pair(&a, &a).unwrap();
        assert_eq!(m.ssim, 1.0);
        assert_eq!(m.psnr_db, 100.0);
        assert!(m.fsim <= 1.0 && m.fsim >= 1.0 - 1e-9);
        assert!(m.is_finite());
    }
}
