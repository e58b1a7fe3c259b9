//! Straight-line reference implementations of the full-reference and
//! no-reference metrics. They share no code with the library: images are
//! interleaved RGB `f64` slices, transforms are naive DFTs, filters are
//! direct 2-D sums.

use std::f64::consts::PI;

fn luma_plane(rgb: &[f64]) -> Vec<f64> {
    rgb.chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let x = luma_plane(a);
    let y = luma_plane(b);
    let size = 11;
    let sigma = 1.5;
    let mut win = vec![0.0; size * size];
    let mut total = 0.0;
    for j in 0..size {
        for i in 0..size {
            let dx = i as f64 - 5.0;
            let dy = j as f64 - 5.0;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            win[j * size + i] = v;
            total += v;
        }
    }
    for v in &mut win {
        *v /= total;
    }
    let c1 = 0.0001;
    let c2 = 0.0009;
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - size {
        for ox in 0..=w - size {
            let (mut mx, mut my) = (0.0, 0.0);
            for j in 0..size {
                for i in 0..size {
                    let p = (oy + j) * w + ox + i;
                    mx += win[j * size + i] * x[p];
                    my += win[j * size + i] * y[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for j in 0..size {
                for i in 0..size {
                    let p = (oy + j) * w + ox + i;
                    let q = win[j * size + i];
                    vx += q * (x[p] - mx) * (x[p] - mx);
                    vy += q * (y[p] - my) * (y[p] - my);
                    cxy += q * (x[p] - mx) * (y[p] - my);
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn trimmed_mean_and_var(mut v: Vec<f64>) -> (f64, f64) {
    let k = v.len();
    v.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let tl = (0.1 * k as f64).ceil() as usize;
    let tr = (0.1 * k as f64).floor() as usize;
    let mut s = 0.0;
    for x in &v[tl..k - tr] {
        s += x;
    }
    let mu = s / (k - tl - tr) as f64;
    let mut var = 0.0;
    for x in &v {
        var += (x - mu) * (x - mu);
    }
    (mu, var / k as f64)
}

fn blocks(w: usize, h: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut y = 0;
    while y < h {
        let mut x = 0;
        while x < w {
            out.push((x, y, (x + 8).min(w), (y + 8).min(h)));
            x += 8;
        }
        y += 8;
    }
    out
}

fn min_max(p: &[f64], w: usize, b: (usize, usize, usize, usize)) -> (f64, f64) {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for y in b.1..b.3 {
        for x in b.0..b.2 {
            lo = lo.min(p[y * w + x]);
            hi = hi.max(p[y * w + x]);
        }
    }
    (lo, hi)
}

pub fn uiqm(rgb: &[f64], w: usize, h: usize) -> f64 {
    let rg: Vec<f64> = rgb.chunks(3).map(|p| p[0] - p[1]).collect();
    let yb: Vec<f64> = rgb.chunks(3).map(|p| (p[0] + p[1]) / 2.0 - p[2]).collect();
    let (m1, v1) = trimmed_mean_and_var(rg);
    let (m2, v2) = trimmed_mean_and_var(yb);
    let uicm = -0.0268 * (m1 * m1 + m2 * m2).sqrt() + 0.1586 * (v1 + v2).sqrt();

    // padded copy with mirrored borders: -1 -> 0, n -> n-1
    let bs = blocks(w, h);
    let mut uism = 0.0;
    for (c, lambda) in [(0, 0.299), (1, 0.587), (2, 0.114)] {
        let pw = w + 2;
        let mut pad = vec![0.0; pw * (h + 2)];
        for py in 0..h + 2 {
            for px in 0..pw {
                let sx = if px == 0 { 0 } else if px == w + 1 { w - 1 } else { px - 1 };
                let sy = if py == 0 { 0 } else if py == h + 1 { h - 1 } else { py - 1 };
                pad[py * pw + px] = rgb[(sy * w + sx) * 3 + c];
            }
        }
        let mut mag = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = |dx: usize, dy: usize| pad[(y + dy) * pw + x + dx];
                let gx = p(2, 0) + 2.0 * p(2, 1) + p(2, 2) - p(0, 0) - 2.0 * p(0, 1) - p(0, 2);
                let gy = p(0, 2) + 2.0 * p(1, 2) + p(2, 2) - p(0, 0) - 2.0 * p(1, 0) - p(2, 0);
                mag[y * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
        let mut s = 0.0;
        for &b in &bs {
            let (lo, hi) = min_max(&mag, w, b);
            if lo > 0.0 {
                s += (hi / lo).ln();
            }
        }
        uism += lambda * 2.0 * s / bs.len() as f64;
    }

    let l = luma_plane(rgb);
    let gamma = 1026.0 / 255.0;
    let mut s = 0.0;
    for &b in &bs {
        let (m, mx) = min_max(&l, w, b);
        if mx > m {
            let theta = gamma * (mx - m) / (gamma - m);
            let plus = mx + m - mx * m / gamma;
            let r = theta / plus;
            s += r * r.ln();
        }
    }
    let uiconm = -s / bs.len() as f64;
    0.0282 * uicm + 0.2953 * uism + 3.5753 * uiconm
}

#[derive(Clone, Copy)]
struct C(f64, f64);

impl C {
    fn mul(self, o: C) -> C {
        C(self.0 * o.0 - self.1 * o.1, self.0 * o.1 + self.1 * o.0)
    }
    fn abs(self) -> f64 {
        (self.0 * self.0 + self.1 * self.1).sqrt()
    }
}

fn dft_1d(v: &[C], sign: f64) -> Vec<C> {
    let n = v.len();
    (0..n)
        .map(|k| {
            let mut acc = C(0.0, 0.0);
            for (t, x) in v.iter().enumerate() {
                let ang = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                let e = x.mul(C(ang.cos(), ang.sin()));
                acc.0 += e.0;
                acc.1 += e.1;
            }
            acc
        })
        .collect()
}

fn dft_2d(data: &[C], w: usize, h: usize, inverse: bool) -> Vec<C> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut rows = Vec::with_capacity(w * h);
    for y in 0..h {
        rows.extend(dft_1d(&data[y * w..(y + 1) * w], sign));
    }
    let mut out = vec![C(0.0, 0.0); w * h];
    for x in 0..w {
        let col: Vec<C> = (0..h).map(|y| rows[y * w + x]).collect();
        for (y, v) in dft_1d(&col, sign).into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    if inverse {
        let s = (w * h) as f64;
        for v in &mut out {
            v.0 /= s;
            v.1 /= s;
        }
    }
    out
}

fn centred_freq(k: usize, n: usize) -> f64 {
    assert!(n.is_multiple_of(2), "oracle covers even sizes only");
    (((k + n / 2) % n) as f64 - (n / 2) as f64) / n as f64
}

fn pc_map(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = w * h;
    let spec = dft_2d(&img.iter().map(|&v| C(v, 0.0)).collect::<Vec<_>>(), w, h, false);
    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    let theta_sigma = PI / 4.0 / 1.2;
    for o in 0..4 {
        let angle = o as f64 * PI / 4.0;
        let mut filters = Vec::new();
        for s in 0..4 {
            let fo = 1.0 / (6.0 * 2f64.powi(s));
            let mut f = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    if x == 0 && y == 0 {
                        continue;
                    }
                    let u = centred_freq(x, w);
                    let v = centred_freq(y, h);
                    let r = (u * u + v * v).sqrt();
                    let th = (-v).atan2(u);
                    let lp = 1.0 / (1.0 + (r / 0.45).powi(30));
                    let lg = (-(r / fo).ln().powi(2) / (2.0 * 0.55f64.ln().powi(2))).exp() * lp;
                    let d = (th - angle).sin().atan2((th - angle).cos()).abs();
                    f[y * w + x] = lg * (-(d * d) / (2.0 * theta_sigma * theta_sigma)).exp();
                }
            }
            filters.push(f);
        }
        let eo: Vec<Vec<C>> = filters
            .iter()
            .map(|f| {
                let prod: Vec<C> = spec.iter().zip(f).map(|(c, &g)| C(c.0 * g, c.1 * g)).collect();
                dft_2d(&prod, w, h, true)
            })
            .collect();
        let spatial: Vec<Vec<f64>> = filters
            .iter()
            .map(|f| {
                dft_2d(&f.iter().map(|&g| C(g, 0.0)).collect::<Vec<_>>(), w, h, true)
                    .iter()
                    .map(|c| c.0 * (n as f64).sqrt())
                    .collect()
            })
            .collect();

        let mut e2: Vec<f64> = eo[0].iter().map(|c| c.0 * c.0 + c.1 * c.1).collect();
        e2.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let med = 0.5 * (e2[n / 2 - 1] + e2[n / 2]);
        let em_n: f64 = filters[0].iter().map(|v| v * v).sum();
        let noise_power = (med / 2f64.ln()) / em_n;
        let (mut an2, mut aiaj) = (0.0, 0.0);
        for p in 0..n {
            for i in 0..4 {
                an2 += spatial[i][p] * spatial[i][p];
                for j in i + 1..4 {
                    aiaj += spatial[i][p] * spatial[j][p];
                }
            }
        }
        let tau = ((2.0 * noise_power * an2 + 4.0 * noise_power * aiaj) / 2.0).sqrt();
        let t = (tau * (PI / 2.0).sqrt() + 2.0 * ((2.0 - PI / 2.0) * tau * tau).sqrt()) / 1.7;

        for p in 0..n {
            let se: f64 = eo.iter().map(|r| r[p].0).sum();
            let so: f64 = eo.iter().map(|r| r[p].1).sum();
            let xe = (se * se + so * so).sqrt() + 1e-4;
            let (me, mo) = (se / xe, so / xe);
            let mut energy = 0.0;
            for r in &eo {
                let (e, od) = (r[p].0, r[p].1);
                energy += e * me + od * mo - (e * mo - od * me).abs();
            }
            energy_all[p] += (energy - t).max(0.0);
            an_all[p] += eo.iter().map(|r| r[p].abs()).sum::<f64>();
        }
    }
    (0..n)
        .map(|p| if an_all[p] > 0.0 { energy_all[p] / an_all[p] } else { 0.0 })
        .collect()
}

fn scharr(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = [[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]];
    let get = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            // true convolution; sign flips relative to correlation do not matter for the magnitude
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..3i64 {
                for i in 0..3i64 {
                    gx += k[j as usize][i as usize] * get(x - (i - 1), y - (j - 1));
                    gy += k[i as usize][j as usize] * get(x - (i - 1), y - (j - 1));
                }
            }
            out[(y as usize) * w + x as usize] = ((gx / 16.0).powi(2) + (gy / 16.0).powi(2)).sqrt();
        }
    }
    out
}

/// FSIM for images whose shorter side is below 384 (no downsampling step).
pub fn fsim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    assert!(w.min(h) < 384);
    let y1: Vec<f64> = luma_plane(a).iter().map(|v| v * 255.0).collect();
    let y2: Vec<f64> = luma_plane(b).iter().map(|v| v * 255.0).collect();
    let (p1, p2) = (pc_map(&y1, w, h), pc_map(&y2, w, h));
    let (g1, g2) = (scharr(&y1, w, h), scharr(&y2, w, h));
    let (mut num, mut den, mut plain) = (0.0, 0.0, 0.0);
    for i in 0..w * h {
        let spc = (2.0 * p1[i] * p2[i] + 0.85) / (p1[i].powi(2) + p2[i].powi(2) + 0.85);
        let sg = (2.0 * g1[i] * g2[i] + 160.0) / (g1[i].powi(2) + g2[i].powi(2) + 160.0);
        let m = p1[i].max(p2[i]);
        num += spc * sg * m;
        den += m;
        plain += spc * sg;
    }
    if den > 0.0 {
        num / den
    } else {
        plain / (w * h) as f64
    }
}
