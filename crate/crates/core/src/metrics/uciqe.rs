use crate::imaging::ImageBuf;

use super::{min_side, MetricError};
use super::uiqm::NR_MIN_SIDE;

const C1: f64 = 0.4680;
const C2: f64 = 0.2745;
const C3: f64 = 0.2576;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UciqeTerms {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub saturation_mean: f64,
}

impl UciqeTerms {
    pub fn combined(&self) -> f64 {
        C1 * self.chroma_std + C2 * self.luminance_contrast + C3 * self.saturation_mean
    }
}

fn linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// sRGB `[0,1]` to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(linearize);
    let mut xyz = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    // reference white is the matrix image of RGB (1,1,1), so greys have a = b = 0
    let white = RGB_TO_XYZ.map(|r| r[0] + r[1] + r[2]);
    let fx = lab_f(xyz[0] / white[0]);
    let fy = lab_f(xyz[1] / white[1]);
    let fz = lab_f(xyz[2] / white[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn uciqe_terms(img: &ImageBuf) -> UciqeTerms {
    let n = img.width() * img.height();
    let mut ls = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for p in img.data().chunks_exact(3) {
        let [l, a, b] = srgb_to_lab([p[0], p[1], p[2]]);
        let c = (a * a + b * b).sqrt();
        let d = (c * c + l * l).sqrt();
        if d > 0.0 {
            sat_sum += c / d;
        }
        ls.push(l);
        chroma.push(c / 100.0);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let var_c = chroma.iter().map(|c| (c - mean_c) * (c - mean_c)).sum::<f64>() / n as f64;
    ls.sort_by(|a, b| a.total_cmp(b));
    UciqeTerms {
        chroma_std: var_c.sqrt(),
        luminance_contrast: (percentile(&ls, 99.0) - percentile(&ls, 1.0)) / 100.0,
        saturation_mean: sat_sum / n as f64,
    }
}

/// `0.4680·σ_c + 0.2745·con_l + 0.2576·μ_s` in CIELAB.
pub fn uciqe(img: &ImageBuf) -> Result<f64, MetricError> {
    min_side(img, NR_MIN_SIDE)?;
    Ok(uciqe_terms(img).combined())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_reference_points() {
        let white = srgb_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 1e-9);
        assert!(white[1].abs() < 1e-9 && white[2].abs() < 1e-9);
        assert_eq!(srgb_to_lab([0.0; 3])[0], 0.0);
        // sRGB red, reference L*a*b* (53.2408, 80.0925, 67.2032)
        let red = srgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.2408).abs() < 1e-3);
        assert!((red[1] - 80.0925).abs() < 1e-3);
        assert!((red[2] - 67.2032).abs() < 1e-3);
    }

    #[test]
    fn constant_gray_near_zero() {
        let img = ImageBuf::filled(20, 20, [0.5; 3]);
        assert!(uciqe(&img).unwrap().abs() < 1e-9);
    }

    #[test]
    fn more_colour_scores_higher() {
        let dull = ImageBuf::from_fn(16, 16, |x, _| if x < 8 { [0.45, 0.5, 0.5] } else { [0.5, 0.5, 0.55] });
        let vivid = ImageBuf::from_fn(16, 16, |x, _| if x < 8 { [0.9, 0.2, 0.1] } else { [0.1, 0.3, 0.9] });
        assert!(uciqe(&vivid).unwrap() > uciqe(&dull).unwrap());
    }
}
