use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::imaging::{luma, ImageBuf};

use super::{min_side, same_dims, MetricError};

pub const FSIM_MIN_SIDE: usize = 32;

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ONF: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const EPSILON: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;

struct Fft2 {
    w: usize,
    h: usize,
    row: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col: std::sync::Arc<dyn rustfft::Fft<f64>>,
    irow: std::sync::Arc<dyn rustfft::Fft<f64>>,
    icol: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    fn new(w: usize, h: usize) -> Self {
        let mut p = FftPlanner::new();
        Self {
            w,
            h,
            row: p.plan_fft_forward(w),
            col: p.plan_fft_forward(h),
            irow: p.plan_fft_inverse(w),
            icol: p.plan_fft_inverse(h),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (row, col) = if inverse { (&self.irow, &self.icol) } else { (&self.row, &self.col) };
        for r in data.chunks_mut(self.w) {
            row.process(r);
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y] = data[y * self.w + x];
            }
            col.process(&mut buf);
            for y in 0..self.h {
                data[y * self.w + x] = buf[y];
            }
        }
        if inverse {
            let s = 1.0 / (self.w * self.h) as f64;
            for v in data.iter_mut() {
                *v *= s;
            }
        }
    }
}

// Frequency coordinate of FFT bin `i`, normalised to [-0.5, 0.5].
fn freq(i: usize, n: usize) -> f64 {
    let (signed, denom) = if n % 2 == 1 {
        (if i <= (n - 1) / 2 { i as f64 } else { i as f64 - n as f64 }, (n - 1) as f64)
    } else {
        (if i < n / 2 { i as f64 } else { i as f64 - n as f64 }, n as f64)
    };
    signed / denom
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Phase congruency map of a plane (log-Gabor bank, 4 scales x 4 orientations).
pub fn phase_congruency(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = w * h;
    let fft = Fft2::new(w, h);
    let mut spectrum: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.run(&mut spectrum, false);

    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    let mut lowpass = vec![0.0; n];
    for y in 0..h {
        let fy = freq(y, h);
        for x in 0..w {
            let fx = freq(x, w);
            let i = y * w + x;
            let r = (fx * fx + fy * fy).sqrt();
            lowpass[i] = 1.0 / (1.0 + (r / 0.45).powi(30));
            radius[i] = if i == 0 { 1.0 } else { r };
            let theta = (-fy).atan2(fx);
            sin_t[i] = theta.sin();
            cos_t[i] = theta.cos();
        }
    }

    let log_gabor: Vec<Vec<f64>> = (0..NSCALE)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ONF.ln().powi(2);
            let mut g: Vec<f64> = radius
                .iter()
                .zip(&lowpass)
                .map(|(&r, &lp)| (-(r / fo).ln().powi(2) / denom).exp() * lp)
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();

    let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;
    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];

    for o in 0..NORIENT {
        let angl = o as f64 * PI / NORIENT as f64;
        let (sa, ca) = angl.sin_cos();
        let spread: Vec<f64> = (0..n)
            .map(|i| {
                let ds = sin_t[i] * ca - cos_t[i] * sa;
                let dc = cos_t[i] * ca + sin_t[i] * sa;
                let dtheta = ds.atan2(dc).abs();
                (-(dtheta * dtheta) / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();

        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut responses: Vec<Vec<Complex64>> = Vec::with_capacity(NSCALE);
        let mut ifft_filt: Vec<Vec<f64>> = Vec::with_capacity(NSCALE);
        let mut em_n = 0.0;

        for (s, lg) in log_gabor.iter().enumerate() {
            let filt: Vec<f64> = lg.iter().zip(&spread).map(|(a, b)| a * b).collect();
            let mut f_spatial: Vec<Complex64> = filt.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.run(&mut f_spatial, true);
            let scale = (n as f64).sqrt();
            ifft_filt.push(f_spatial.iter().map(|c| c.re * scale).collect());
            if s == 0 {
                em_n = filt.iter().map(|v| v * v).sum();
            }
            let mut eo: Vec<Complex64> = spectrum.iter().zip(&filt).map(|(c, f)| c * f).collect();
            fft.run(&mut eo, true);
            for i in 0..n {
                sum_an[i] += eo[i].norm();
                sum_e[i] += eo[i].re;
                sum_o[i] += eo[i].im;
            }
            responses.push(eo);
        }

        let mut energy = vec![0.0; n];
        for i in 0..n {
            let x_energy = (sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]).sqrt() + EPSILON;
            let mean_e = sum_e[i] / x_energy;
            let mean_o = sum_o[i] / x_energy;
            for eo in &responses {
                let (e, od) = (eo[i].re, eo[i].im);
                energy[i] += e * mean_e + od * mean_o - (e * mean_o - od * mean_e).abs();
            }
        }

        let mut e2: Vec<f64> = responses[0].iter().map(|c| c.norm_sqr()).collect();
        let median_e2n = median(&mut e2);
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = if em_n > 0.0 { mean_e2n / em_n } else { 0.0 };

        let mut est_sum_an2 = 0.0;
        let mut est_sum_aiaj = 0.0;
        for i in 0..n {
            for si in 0..NSCALE {
                let a = ifft_filt[si][i];
                est_sum_an2 += a * a;
                for sj in si + 1..NSCALE {
                    est_sum_aiaj += a * ifft_filt[sj][i];
                }
            }
        }
        let est_noise_energy2 = 2.0 * noise_power * est_sum_an2 + 4.0 * noise_power * est_sum_aiaj;
        let tau = (est_noise_energy2 / 2.0).max(0.0).sqrt();
        let est_noise_energy = tau * (PI / 2.0).sqrt();
        let est_noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let t = (est_noise_energy + NOISE_K * est_noise_sigma) / 1.7;

        for i in 0..n {
            energy_all[i] += (energy[i] - t).max(0.0);
            an_all[i] += sum_an[i];
        }
    }

    energy_all
        .iter()
        .zip(&an_all)
        .map(|(&e, &a)| if a > 0.0 { e / a } else { 0.0 })
        .collect()
}

// Box average with an F-tap kernel ('same' alignment) followed by stride-F sampling.
fn downsample(plane: &[f64], w: usize, h: usize, f: usize) -> (Vec<f64>, usize, usize) {
    if f <= 1 {
        return (plane.to_vec(), w, h);
    }
    let off = f / 2;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let ow = w.div_ceil(f);
    let oh = h.div_ceil(f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let (cx, cy) = ((ox * f) as isize, (oy * f) as isize);
            let mut s = 0.0;
            for dy in 0..f as isize {
                for dx in 0..f as isize {
                    s += at(cx + off as isize - dx, cy + off as isize - dy);
                }
            }
            out.push(s * norm);
        }
    }
    (out, ow, oh)
}

fn gradient_magnitude(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    const K: [[f64; 3]; 3] = [[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]];
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for (j, row) in K.iter().enumerate() {
                for (i, &k) in row.iter().enumerate() {
                    let (dx, dy) = (i as isize - 1, j as isize - 1);
                    gx += k * at(x + dx, y + dy);
                    gy += k * at(x + dy, y + dx);
                }
            }
            gx /= 16.0;
            gy /= 16.0;
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Feature similarity index on luma scaled to [0,255].
pub fn fsim(a: &ImageBuf, b: &ImageBuf) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    min_side(a, FSIM_MIN_SIDE)?;
    let (w, h) = a.dims();
    let scale = |img: &ImageBuf| -> Vec<f64> { luma(img).data().iter().map(|v| v * 255.0).collect() };
    let f = (((w.min(h)) as f64 / 256.0).round() as usize).max(1);
    let (y1, dw, dh) = downsample(&scale(a), w, h, f);
    let (y2, _, _) = downsample(&scale(b), w, h, f);

    let pc1 = phase_congruency(&y1, dw, dh);
    let pc2 = phase_congruency(&y2, dw, dh);
    let g1 = gradient_magnitude(&y1, dw, dh);
    let g2 = gradient_magnitude(&y2, dw, dh);

    let mut num = 0.0;
    let mut den = 0.0;
    let mut plain = 0.0;
    for i in 0..dw * dh {
        let s_pc = (2.0 * pc1[i] * pc2[i] + T1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + T1);
        let s_g = (2.0 * g1[i] * g2[i] + T2) / (g1[i] * g1[i] + g2[i] * g2[i] + T2);
        let pcm = pc1[i].max(pc2[i]);
        let sl = s_pc * s_g;
        num += sl * pcm;
        den += pcm;
        plain += sl;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Ok(plain / (dw * dh) as f64)
    }
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
    fn frequency_layout() {
        assert_eq!(freq(0, 4), 0.0);
        assert_eq!(freq(1, 4), 0.25);
        assert_eq!(freq(2, 4), -0.5);
        assert_eq!(freq(3, 4), -0.25);
        assert_eq!(freq(2, 5), 0.5);
        assert_eq!(freq(3, 5), -0.5);
    }

    #[test]
    fn identity_is_one() {
        let a = random(40, 33, 9);
        let v = fsim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn distortion_lowers_score() {
        let a = ImageBuf::from_fn(48, 48, |x, y| {
            let v = if (x / 8 + y / 8) % 2 == 0 { 0.8 } else { 0.2 };
            [v, v, v]
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = a.data().iter().map(|v| (v + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)).collect();
        let b = ImageBuf::new(48, 48, d).unwrap();
        let v = fsim(&a, &b).unwrap();
        assert!(v < 0.99 && v > 0.0, "{v}");
    }

    #[test]
    fn constant_images() {
        let a = ImageBuf::filled(32, 32, [0.4; 3]);
        let pc = phase_congruency(&vec![102.0; 32 * 32], 32, 32);
        assert!(pc.iter().all(|v| v.abs() < 1e-9));
        assert!((fsim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_small() {
        let a = random(31, 40, 0);
        assert!(matches!(fsim(&a, &a), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn phase_congruency_in_unit_range() {
        let a = random(36, 32, 2);
        let y: Vec<f64> = luma(&a).data().iter().map(|v| v * 255.0).collect();
        for v in phase_congruency(&y, 36, 32) {
            assert!((0.0..=1.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn downsample_average() {
        let p: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (d, w, h) = downsample(&p, 4, 4, 2);
        assert_eq!((w, h), (2, 2));
        assert_eq!(d[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(d[3], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }
}
