//! Degradation-guided compute allocation.
//!
//! A local-contrast degradation map is computed on the luma plane, averaged
//! per tile, and mapped to an integer refinement depth. The depth plan is
//! the unit of compute accounting: one cost unit is one pixel processed by
//! one refinement pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{luma, ImageBuf, LumaBuf};
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptiveError {
    #[error("window {window} too large for a {width}x{height} image (max {max})")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
        max: usize,
    },
    #[error("invalid adaptive parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    /// Box-filter side in pixels; odd.
    pub window: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d_max: u32,
    pub tile: usize,
    pub overlap: usize,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        Self {
            window: 15,
            epsilon: 1e-6,
            alpha: 8.0,
            beta: 1.0,
            d_max: 4,
            tile: 64,
            overlap: 16,
        }
    }
}

impl AdaptiveParams {
    pub fn validate(&self) -> Result<(), AdaptiveError> {
        let bad = |m: &str| Err(AdaptiveError::InvalidParams(m.to_string()));
        if self.window < 3 || self.window.is_multiple_of(2) {
            return bad("window must be odd and at least 3");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return bad("alpha and beta must be finite");
        }
        if self.d_max < 1 {
            return bad("d_max must be at least 1");
        }
        if self.tile == 0 || self.overlap >= self.tile {
            return bad("need 0 <= overlap < tile");
        }
        Ok(())
    }
}

/// Per-pixel `|L - mean_w(L)| / (mean_w(L) + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DegradationMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[inline]
fn reflect101(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Box mean with side `window` and reflect-101 borders.
pub fn box_mean(plane: &[f64], width: usize, height: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let base = plane.first().copied().unwrap_or(0.0);
    let mut horiz = vec![0.0; width * height];
    par::for_each_chunk_mut(&mut horiz, width, |y, row| {
        let src = &plane[y * width..(y + 1) * width];
        for (x, out) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for dx in -r..=r {
                s += src[reflect101(x as isize + dx, width)] - base;
            }
            *out = s;
        }
    });
    let area = (window * window) as f64;
    let mut out = vec![0.0; width * height];
    par::for_each_chunk_mut(&mut out, width, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for dy in -r..=r {
                s += horiz[reflect101(y as isize + dy, height) * width + x];
            }
            *o = base + s / area;
        }
    });
    out
}

pub fn degradation_map(l: &LumaBuf, params: &AdaptiveParams) -> Result<DegradationMap, AdaptiveError> {
    params.validate()?;
    let (w, h) = (l.width(), l.height());
    let max = 2 * w.min(h) - 1;
    if params.window > max {
        return Err(AdaptiveError::WindowTooLarge {
            window: params.window,
            width: w,
            height: h,
            max,
        });
    }
    let local = box_mean(l.data(), w, h, params.window);
    let values = l
        .data()
        .iter()
        .zip(&local)
        .map(|(v, m)| (v - m).abs() / (m + params.epsilon))
        .collect();
    Ok(DegradationMap {
        width: w,
        height: h,
        values,
    })
}

/// `min(d_max, round_half_up(α·m + β))`, floored at 0.
pub fn dynamic_depth(mean_m: f64, params: &AdaptiveParams) -> u32 {
    let raw = (params.alpha * mean_m + params.beta + 0.5).floor();
    if raw.is_nan() || raw <= 0.0 {
        0
    } else {
        raw.min(f64::from(params.d_max)) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Grows the rectangle by `by` pixels on every side, clipped to the image.
    pub fn expand(&self, by: usize, img_w: usize, img_h: usize) -> Rect {
        let x0 = self.x.saturating_sub(by);
        let y0 = self.y.saturating_sub(by);
        let x1 = (self.x + self.width + by).min(img_w);
        let y1 = (self.y + self.height + by).min(img_h);
        Rect {
            x: x0,
            y: y0,
            width: x1 - x0,
            height: y1 - y0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub rect: Rect,
    pub mean_degradation: f64,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPlan {
    pub width: usize,
    pub height: usize,
    pub tile: usize,
    pub overlap: usize,
    pub d_max: u32,
    pub cols: usize,
    pub rows: usize,
    /// Row-major tiles.
    pub tiles: Vec<TilePlan>,
}

impl DepthPlan {
    /// A plan with every tile at `depth`.
    pub fn uniform(width: usize, height: usize, params: &AdaptiveParams, depth: u32) -> Self {
        let rects = tile_rects(width, height, params.tile);
        let cols = width.div_ceil(params.tile);
        let rows = height.div_ceil(params.tile);
        Self {
            width,
            height,
            tile: params.tile,
            overlap: params.overlap,
            d_max: params.d_max,
            cols,
            rows,
            tiles: rects
                .into_iter()
                .map(|rect| TilePlan {
                    rect,
                    mean_degradation: 0.0,
                    depth: depth.min(params.d_max),
                })
                .collect(),
        }
    }

    pub fn cost(&self) -> CostUnits {
        CostUnits {
            units: self
                .tiles
                .iter()
                .map(|t| u64::from(t.depth) * t.rect.area() as u64)
                .sum(),
            full_units: u64::from(self.d_max) * (self.width * self.height) as u64,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }
}

/// Pixel-pass counts for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostUnits {
    pub units: u64,
    pub full_units: u64,
}

impl CostUnits {
    /// Cost of a skipped image: nothing spent out of a full budget.
    pub fn skipped(width: usize, height: usize, d_max: u32) -> Self {
        Self {
            units: 0,
            full_units: u64::from(d_max) * (width * height) as u64,
        }
    }
}

pub fn savings_fraction(c: &CostUnits) -> f64 {
    if c.full_units == 0 {
        return 0.0;
    }
    (1.0 - c.units as f64 / c.full_units as f64).clamp(0.0, 1.0)
}

/// Renders a fraction as a percentage with two decimals, e.g. `18.75%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

fn tile_rects(width: usize, height: usize, tile: usize) -> Vec<Rect> {
    let mut out = Vec::new();
    let mut y = 0;
    while y < height {
        let th = tile.min(height - y);
        let mut x = 0;
        while x < width {
            let tw = tile.min(width - x);
            out.push(Rect {
                x,
                y,
                width: tw,
                height: th,
            });
            x += tile;
        }
        y += tile;
    }
    out
}

/// Tiles the image, averages the degradation map per tile and assigns depths.
pub fn plan(img: &ImageBuf, params: &AdaptiveParams) -> Result<(DepthPlan, CostUnits), AdaptiveError> {
    let map = degradation_map(&luma(img), params)?;
    Ok(plan_from_map(&map, params))
}

pub fn plan_from_map(map: &DegradationMap, params: &AdaptiveParams) -> (DepthPlan, CostUnits) {
    let rects = tile_rects(map.width, map.height, params.tile);
    let tiles = par::map(&rects, |r| {
        let mut s = 0.0;
        for y in r.y..r.y + r.height {
            for x in r.x..r.x + r.width {
                s += map.get(x, y);
            }
        }
        let mean = s / r.area() as f64;
        TilePlan {
            rect: *r,
            mean_degradation: mean,
            depth: dynamic_depth(mean, params),
        }
    });
    let plan = DepthPlan {
        width: map.width,
        height: map.height,
        tile: params.tile,
        overlap: params.overlap,
        d_max: params.d_max,
        cols: map.width.div_ceil(params.tile),
        rows: map.height.div_ceil(params.tile),
        tiles,
    };
    let cost = plan.cost();
    (plan, cost)
}
