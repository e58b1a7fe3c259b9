//! Monte-Carlo variance over stochastic enhancement passes.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::DepthPlan;
use crate::enhance::{EnhanceError, Enhancer, PassNoise};
use crate::imaging::{clamp01, ImageBuf};
use crate::par;

pub const DEFAULT_REVIEW_THRESHOLD: f64 = 1e-3;

const EBAV_MAGIC: [u8; 4] = *b"EBAV";

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("invalid stochastic config: {0}")]
    InvalidConfig(String),
    #[error("no passes to reduce")]
    NoPasses,
    #[error("pass {0} has different dimensions")]
    PassShape(usize),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error("bad variance file: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticConfig {
    pub passes: usize,
    pub gain_jitter_sigma: f64,
    pub pass_drop_prob: f64,
    pub seed: u64,
}

impl Default for StochasticConfig {
    fn default() -> Self {
        Self {
            passes: 20,
            gain_jitter_sigma: 0.02,
            pass_drop_prob: 0.1,
            seed: 42,
        }
    }
}

impl StochasticConfig {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        if self.passes == 0 {
            return Err(UncertaintyError::InvalidConfig("passes must be >= 1".into()));
        }
        if !(self.gain_jitter_sigma >= 0.0 && self.gain_jitter_sigma.is_finite()) {
            return Err(UncertaintyError::InvalidConfig("gain_jitter_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.pass_drop_prob) {
            return Err(UncertaintyError::InvalidConfig("pass_drop_prob must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn noise_for(&self, pass: usize) -> PassNoise {
        PassNoise {
            seed: self.seed,
            pass: pass as u64,
            gain_jitter_sigma: self.gain_jitter_sigma,
            pass_drop_prob: self.pass_drop_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceResult {
    pub mean_image: ImageBuf,
    pub width: usize,
    pub height: usize,
    /// Channel-averaged population variance, row-major.
    pub variance_map: Vec<f64>,
    pub scalar: f64,
    pub flagged: bool,
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Pixel-wise mean and channel-averaged population variance of `passes`.
pub fn variance_from_passes(passes: &[ImageBuf], review_threshold: f64) -> Result<VarianceResult, UncertaintyError> {
    let first = passes.first().ok_or(UncertaintyError::NoPasses)?;
    let (w, h) = first.dims();
    if let Some(i) = passes.iter().position(|p| p.dims() != (w, h)) {
        return Err(UncertaintyError::PassShape(i));
    }
    let t = passes.len() as f64;
    let n = w * h;
    let stats: Vec<([f64; 3], f64)> = par::map_range(n, |i| {
        let mut mean = [0.0; 3];
        let mut var = 0.0;
        let mut buf = vec![0.0; passes.len()];
        for c in 0..3 {
            let origin = first.data()[i * 3 + c];
            for (b, p) in buf.iter_mut().zip(passes) {
                *b = p.data()[i * 3 + c] - origin;
            }
            let m = pairwise_sum(&buf) / t;
            for b in buf.iter_mut() {
                *b = (*b - m) * (*b - m);
            }
            var += pairwise_sum(&buf) / t;
            mean[c] = origin + m;
        }
        (mean, var / 3.0)
    });
    let mean_data: Vec<f64> = stats.iter().flat_map(|(m, _)| m.map(clamp01)).collect();
    let variance_map: Vec<f64> = stats.iter().map(|(_, v)| v.max(0.0)).collect();
    let scalar = pairwise_sum(&variance_map) / n as f64;
    Ok(VarianceResult {
        mean_image: ImageBuf::from_clamped(w, h, mean_data),
        width: w,
        height: h,
        variance_map,
        scalar,
        flagged: flag(scalar, review_threshold),
    })
}

/// Runs `cfg.passes` stochastic passes of `enhancer` and reduces them.
pub fn mc_variance(
    id: &str,
    img: &ImageBuf,
    plan: &DepthPlan,
    enhancer: &dyn Enhancer,
    cfg: &StochasticConfig,
    review_threshold: f64,
) -> Result<VarianceResult, UncertaintyError> {
    cfg.validate()?;
    let outs = par::map_range(cfg.passes, |t| enhancer.enhance(id, img, plan, Some(&cfg.noise_for(t))));
    let passes = outs.into_iter().collect::<Result<Vec<_>, _>>()?;
    variance_from_passes(&passes, review_threshold)
}

/// True when the variance scalar strictly exceeds the review threshold.
pub fn flag(scalar: f64, review_threshold: f64) -> bool {
    scalar > review_threshold
}

/// Writes the variance map as 16-bit grayscale; returns the scale factor used.
pub fn save_variance_png(res: &VarianceResult, path: &Path) -> Result<f64, UncertaintyError> {
    let max = res.variance_map.iter().copied().fold(0.0, f64::max);
    let factor = if max > 0.0 { 65535.0 / max } else { 1.0 };
    let raw: Vec<u16> = res
        .variance_map
        .iter()
        .map(|v| (v * factor).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(res.width as u32, res.height as u32, raw)
        .expect("dimensions match");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| UncertaintyError::Io(std::io::Error::other(e)))?;
    Ok(factor)
}

pub fn encode_variance_raw(res: &VarianceResult) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + res.variance_map.len() * 4);
    out.extend_from_slice(&EBAV_MAGIC);
    out.extend_from_slice(&(res.height as u32).to_le_bytes());
    out.extend_from_slice(&(res.width as u32).to_le_bytes());
    for v in &res.variance_map {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decodes an EBAV file into `(height, width, values)`.
pub fn decode_variance_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>), UncertaintyError> {
    let mut cur = bytes;
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| UncertaintyError::BadFile("short header".into()))?;
    if magic != EBAV_MAGIC {
        return Err(UncertaintyError::BadFile("bad magic".into()));
    }
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| UncertaintyError::BadFile("short header".into()))?;
    let h = u32::from_le_bytes(b) as usize;
    cur.read_exact(&mut b).map_err(|_| UncertaintyError::BadFile("short header".into()))?;
    let w = u32::from_le_bytes(b) as usize;
    if cur.len() != w * h * 4 {
        return Err(UncertaintyError::BadFile("payload size mismatch".into()));
    }
    let vals = cur
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((h, w, vals))
}
