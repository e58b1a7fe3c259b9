//! Enhancement operators and clarity gating.
//!
//! The baseline enhancer is a classical two-stage operator: a global
//! gray-world white balance followed by per-tile refinement passes whose
//! count comes from the [`DepthPlan`]. Each pass is a luma-percentile
//! contrast stretch blended at a halving strength plus a small saturation
//! boost. Tiles are processed on overlapping windows and feathered back
//! together.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{DepthPlan, Rect};
use crate::imaging::{clamp01, load_image, luma_of, ImageBuf, ImageError};
use crate::par;

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("plan is {plan_w}x{plan_h} but image is {img_w}x{img_h}")]
    PlanMismatch {
        plan_w: usize,
        plan_h: usize,
        img_w: usize,
        img_h: usize,
    },
    #[error("no result for {id:?} in {dir}")]
    MissingResult { dir: PathBuf, id: String },
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error("empty score list")]
    EmptyScores,
    #[error("target skip rate {0} outside [0,1]")]
    InvalidTarget(f64),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Randomness for one stochastic pass of an enhancer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassNoise {
    /// Image-level seed; the pass index selects the stream.
    pub seed: u64,
    pub pass: u64,
    pub gain_jitter_sigma: f64,
    pub pass_drop_prob: f64,
}

impl PassNoise {
    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.pass);
        rng
    }
}

/// Anything that maps an input image and its depth plan to an enhanced image.
pub trait Enhancer: Send + Sync {
    /// Output has the input's dimensions (external results excepted) and
    /// samples in `[0,1]`; deterministic when `noise` is `None`.
    fn enhance(
        &self,
        id: &str,
        img: &ImageBuf,
        plan: &DepthPlan,
        noise: Option<&PassNoise>,
    ) -> Result<ImageBuf, EnhanceError>;

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub base_strength: f64,
    pub saturation_boost: f64,
    /// Lower stretch percentile; the upper one is `100 - percentile_clip`.
    pub percentile_clip: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            base_strength: 0.5,
            saturation_boost: 0.1,
            percentile_clip: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), EnhanceError> {
        if !(self.base_strength > 0.0 && self.base_strength <= 1.0) {
            return Err(EnhanceError::InvalidConfig("base_strength must be in (0,1]".into()));
        }
        if !(self.saturation_boost >= 0.0 && self.saturation_boost.is_finite()) {
            return Err(EnhanceError::InvalidConfig("saturation_boost must be >= 0".into()));
        }
        if !(self.percentile_clip >= 0.0 && self.percentile_clip < 50.0) {
            return Err(EnhanceError::InvalidConfig("percentile_clip must be in [0,50)".into()));
        }
        Ok(())
    }
}

/// Gray-world gains, clamped to `[0.5, 2.0]`; 1 for an empty channel.
pub fn gray_world_gains(img: &ImageBuf) -> [f64; 3] {
    let means = img.channel_means();
    let target = luma_of(means);
    means.map(|m| if m > 1e-12 { (target / m).clamp(0.5, 2.0) } else { 1.0 })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Default)]
pub struct BaselineEnhancer {
    pub cfg: BaselineConfig,
}

impl BaselineEnhancer {
    pub fn new(cfg: BaselineConfig) -> Result<Self, EnhanceError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl Enhancer for BaselineEnhancer {
    fn enhance(
        &self,
        _id: &str,
        img: &ImageBuf,
        plan: &DepthPlan,
        noise: Option<&PassNoise>,
    ) -> Result<ImageBuf, EnhanceError> {
        baseline_enhance(img, plan, &self.cfg, noise)
    }

    fn describe(&self) -> String {
        format!(
            "baseline(base_strength={}, saturation_boost={}, percentile_clip={})",
            self.cfg.base_strength, self.cfg.saturation_boost, self.cfg.percentile_clip
        )
    }
}

/// One refinement pass applied in place to an RGB patch.
fn refine_pass(patch: &mut [f64], strength: f64, cfg: &BaselineConfig) {
    let mut lum: Vec<f64> = patch
        .chunks_exact(3)
        .map(|p| luma_of([p[0], p[1], p[2]]))
        .collect();
    lum.sort_by(f64::total_cmp);
    let lo = percentile(&lum, cfg.percentile_clip);
    let hi = percentile(&lum, 100.0 - cfg.percentile_clip);
    let range = hi - lo;
    let sat = 1.0 + cfg.saturation_boost * strength;
    for px in patch.chunks_exact_mut(3) {
        if range >= 1e-6 {
            for v in px.iter_mut() {
                let stretched = clamp01((*v - lo) / range);
                *v = (1.0 - strength) * *v + strength * stretched;
            }
        }
        let l = luma_of([px[0], px[1], px[2]]);
        for v in px.iter_mut() {
            *v = clamp01(l + (*v - l) * sat);
        }
    }
}

/// Linear feathering weight along one axis of an expanded tile.
#[inline]
fn ramp(pos: usize, start: usize, end: usize, grow_lo: usize, grow_hi: usize) -> f64 {
    let mut w: f64 = 1.0;
    if grow_lo > 0 {
        w = w.min(((pos - start) as f64 + 0.5) / (2 * grow_lo) as f64);
    }
    if grow_hi > 0 {
        w = w.min(((end - pos) as f64 - 0.5) / (2 * grow_hi) as f64);
    }
    w
}

pub fn baseline_enhance(
    img: &ImageBuf,
    plan: &DepthPlan,
    cfg: &BaselineConfig,
    noise: Option<&PassNoise>,
) -> Result<ImageBuf, EnhanceError> {
    cfg.validate()?;
    let (w, h) = img.dims();
    if plan.width != w || plan.height != h {
        return Err(EnhanceError::PlanMismatch {
            plan_w: plan.width,
            plan_h: plan.height,
            img_w: w,
            img_h: h,
        });
    }

    let mut gains = gray_world_gains(img);
    // Draw order: three gain jitters, then one drop decision per (tile, pass).
    let mut dropped: Vec<Vec<bool>> = plan.tiles.iter().map(|t| vec![false; t.depth as usize]).collect();
    if let Some(n) = noise {
        let mut rng = n.rng();
        for g in gains.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *g *= (n.gain_jitter_sigma * z).exp();
        }
        for d in dropped.iter_mut() {
            for slot in d.iter_mut() {
                *slot = rng.random::<f64>() < n.pass_drop_prob;
            }
        }
    }

    let balanced: Vec<f64> = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| [0, 1, 2].map(|c| clamp01(p[c] * gains[c])))
        .collect();

    if plan.tiles.iter().all(|t| t.depth == 0) {
        return Ok(ImageBuf::from_clamped(w, h, balanced));
    }

    let indices: Vec<usize> = (0..plan.tiles.len()).collect();
    let patches: Vec<(Rect, Vec<f64>)> = par::map(&indices, |&ti| {
        let tile = &plan.tiles[ti];
        let e = tile.rect.expand(plan.overlap, w, h);
        let mut patch = Vec::with_capacity(e.area() * 3);
        for y in e.y..e.y + e.height {
            let row = &balanced[(y * w + e.x) * 3..(y * w + e.x + e.width) * 3];
            patch.extend_from_slice(row);
        }
        for k in 0..tile.depth as usize {
            if dropped[ti][k] {
                continue;
            }
            let strength = cfg.base_strength / f64::from(1u32 << k.min(31));
            refine_pass(&mut patch, strength, cfg);
        }
        (e, patch)
    });

    let mut num = vec![0.0; w * h * 3];
    let mut den = vec![0.0; w * h];
    for (tile, (e, patch)) in plan.tiles.iter().zip(&patches) {
        let core = tile.rect;
        let (gl, gr) = (core.x - e.x, e.x + e.width - (core.x + core.width));
        let (gt, gb) = (core.y - e.y, e.y + e.height - (core.y + core.height));
        for (py, y) in (e.y..e.y + e.height).enumerate() {
            let wy = ramp(y, e.y, e.y + e.height, gt, gb);
            for (px, x) in (e.x..e.x + e.width).enumerate() {
                let wgt = wy * ramp(x, e.x, e.x + e.width, gl, gr);
                let src = (py * e.width + px) * 3;
                let dst = y * w + x;
                den[dst] += wgt;
                for c in 0..3 {
                    num[dst * 3 + c] += wgt * patch[src + c];
                }
            }
        }
    }
    let out = num
        .chunks_exact(3)
        .zip(&den)
        .flat_map(|(n, d)| [0, 1, 2].map(|c| clamp01(n[c] / d)))
        .collect();
    Ok(ImageBuf::from_clamped(w, h, out))
}

/// Serves pre-computed results from `dir/<id>.{png,jpg,jpeg}`.
#[derive(Debug, Clone)]
pub struct ExternalEnhancer {
    pub dir: PathBuf,
}

impl ExternalEnhancer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn result_path(&self, id: &str) -> Option<PathBuf> {
        find_result(&self.dir, id)
    }
}

pub fn find_result(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

pub fn external_enhance(dir: &Path, id: &str) -> Result<ImageBuf, EnhanceError> {
    let path = find_result(dir, id).ok_or_else(|| EnhanceError::MissingResult {
        dir: dir.to_path_buf(),
        id: id.to_string(),
    })?;
    Ok(load_image(&path)?)
}

impl Enhancer for ExternalEnhancer {
    fn enhance(
        &self,
        id: &str,
        _img: &ImageBuf,
        _plan: &DepthPlan,
        _noise: Option<&PassNoise>,
    ) -> Result<ImageBuf, EnhanceError> {
        external_enhance(&self.dir, id)
    }

    fn describe(&self) -> String {
        format!("external({})", self.dir.display())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateAction {
    Skip,
    Enhance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub action: GateAction,
    pub score: f64,
    pub threshold: f64,
}

/// Skips when `score > threshold` (strict).
pub fn gate(score: f64, threshold: f64) -> GateDecision {
    let action = if score > threshold {
        GateAction::Skip
    } else {
        GateAction::Enhance
    };
    GateDecision {
        action,
        score,
        threshold,
    }
}

/// Threshold at the `(1 - target)` quantile of `scores`.
///
/// A target of 1 returns a value strictly below the minimum so that every
/// score clears the strict gate.
pub fn calibrate_threshold(scores: &[f64], target_skip_rate: f64) -> Result<f64, EnhanceError> {
    if scores.is_empty() {
        return Err(EnhanceError::EmptyScores);
    }
    if !(0.0..=1.0).contains(&target_skip_rate) {
        return Err(EnhanceError::InvalidTarget(target_skip_rate));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    if target_skip_rate >= 1.0 {
        return Ok(sorted[0].next_down());
    }
    Ok(percentile(&sorted, (1.0 - target_skip_rate) * 100.0))
}
