use crate::imaging::{luma, ImageBuf};

use super::{min_side, MetricError};

pub const NR_MIN_SIDE: usize = 8;

const C1: f64 = 0.0282;
const C2: f64 = 0.2953;
const C3: f64 = 3.5753;
const TRIM: f64 = 0.1;
const BLOCK: usize = 8;
const PLIP_GAMMA: f64 = 1026.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UiqmTerms {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl UiqmTerms {
    pub fn combined(&self) -> f64 {
        C1 * self.uicm + C2 * self.uism + C3 * self.uiconm
    }
}

// Returns (trimmed mean, variance about the trimmed mean over all samples).
fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    let k = v.len();
    v.sort_by(|a, b| a.total_cmp(b));
    let lo = (TRIM * k as f64).ceil() as usize;
    let hi = (TRIM * k as f64).floor() as usize;
    let kept = &v[lo..k - hi];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k as f64;
    (mu, var)
}

/// Colourfulness term on the RG and YB opponent planes.
pub fn uicm(img: &ImageBuf) -> f64 {
    let rg: Vec<f64> = img.data().chunks_exact(3).map(|p| p[0] - p[1]).collect();
    let yb: Vec<f64> = img.data().chunks_exact(3).map(|p| 0.5 * (p[0] + p[1]) - p[2]).collect();
    let (mu_rg, var_rg) = trimmed_stats(rg);
    let (mu_yb, var_yb) = trimmed_stats(yb);
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt()
}

fn block_ranges(w: usize, h: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for by in 0..h.div_ceil(BLOCK) {
        for bx in 0..w.div_ceil(BLOCK) {
            let x0 = bx * BLOCK;
            let y0 = by * BLOCK;
            out.push((x0, y0, (x0 + BLOCK).min(w), (y0 + BLOCK).min(h)));
        }
    }
    out
}

fn block_extrema(plane: &[f64], w: usize, r: (usize, usize, usize, usize)) -> (f64, f64) {
    let (x0, y0, x1, y1) = r;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in y0..y1 {
        for &v in &plane[y * w + x0..y * w + x1] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

// 3x3 Sobel magnitude with half-sample symmetric borders.
fn sobel_magnitude(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| plane[reflect(y, h) * w + reflect(x, w)];
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn eme(plane: &[f64], w: usize, h: usize) -> f64 {
    let blocks = block_ranges(w, h);
    let mut s = 0.0;
    for &r in &blocks {
        let (lo, hi) = block_extrema(plane, w, r);
        if lo > 0.0 && hi > 0.0 {
            s += (hi / lo).ln();
        }
    }
    2.0 / blocks.len() as f64 * s
}

/// Sharpness term: weighted EME of per-channel Sobel magnitudes over 8x8 blocks.
pub fn uism(img: &ImageBuf) -> f64 {
    let (w, h) = img.dims();
    let weights = [0.299, 0.587, 0.114];
    (0..3)
        .map(|c| weights[c] * eme(&sobel_magnitude(&img.channel(c), w, h), w, h))
        .sum()
}

/// Contrast term: PLIP log-AMEE over 8x8 luma blocks.
pub fn uiconm(img: &ImageBuf) -> f64 {
    let (w, h) = img.dims();
    let l = luma(img);
    let plane = l.data();
    let blocks = block_ranges(w, h);
    let mut s = 0.0;
    for &r in &blocks {
        let (m, big_m) = block_extrema(plane, w, r);
        if big_m <= m {
            continue;
        }
        let diff = PLIP_GAMMA * (big_m - m) / (PLIP_GAMMA - m);
        let sum = big_m + m - big_m * m / PLIP_GAMMA;
        if sum <= 0.0 {
            continue;
        }
        let ratio = diff / sum;
        if ratio > 0.0 {
            s += ratio * ratio.ln();
        }
    }
    -s / blocks.len() as f64
}

pub fn uiqm_terms(img: &ImageBuf) -> UiqmTerms {
    UiqmTerms {
        uicm: uicm(img),
        uism: uism(img),
        uiconm: uiconm(img),
    }
}

/// `0.0282·UICM + 0.2953·UISM + 3.5753·UIConM`.
pub fn uiqm(img: &ImageBuf) -> Result<f64, MetricError> {
    min_side(img, NR_MIN_SIDE)?;
    Ok(uiqm_terms(img).combined())
}
