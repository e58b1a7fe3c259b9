#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn eba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eba"))
        .args(args)
        .env_remove("EBAAI_PROVIDER_URL")
        .output()
        .expect("spawn eba")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn save_rgb8(path: &Path, w: u32, h: u32, px: impl Fn(u32, u32) -> [u8; 3]) {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(px(x, y)));
    img.save(path).unwrap();
}

/// Smooth textured image with a colour cast; `k` varies the content.
pub fn hazy(k: u64, x: u32, y: u32) -> [u8; 3] {
    let fx = x as f64 / 7.0 + k as f64 * 0.37;
    let fy = y as f64 / 5.0 - k as f64 * 0.21;
    let v = 0.5 + 0.35 * (fx.sin() * fy.cos());
    [
        (40.0 + 90.0 * v) as u8,
        (70.0 + 120.0 * v) as u8,
        (90.0 + 140.0 * v) as u8,
    ]
}

pub fn clean(k: u64, x: u32, y: u32) -> [u8; 3] {
    let fx = x as f64 / 7.0 + k as f64 * 0.37;
    let fy = y as f64 / 5.0 - k as f64 * 0.21;
    let v = 0.5 + 0.45 * (fx.sin() * fy.cos());
    let g = (255.0 * v) as u8;
    [g, g.saturating_sub(10), g.saturating_add(5)]
}

pub struct Dataset {
    pub manifest: PathBuf,
    pub ids: Vec<String>,
}

/// Writes `n` PNGs (plus GT when `with_gt`) and a manifest under `dir`.
pub fn dataset(dir: &Path, n: usize, side: u32, with_gt: bool, labels: &[&str]) -> Dataset {
    fs::create_dir_all(dir.join("input")).unwrap();
    if with_gt {
        fs::create_dir_all(dir.join("gt")).unwrap();
    }
    let mut entries = Vec::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let id = format!("img{i:04}");
        let k = i as u64;
        save_rgb8(&dir.join(format!("input/{id}.png")), side, side, |x, y| hazy(k, x, y));
        let mut e = json!({
            "id": id,
            "input": format!("input/{id}.png"),
            "dataset": labels[i % labels.len()],
        });
        if with_gt {
            save_rgb8(&dir.join(format!("gt/{id}.png")), side, side, |x, y| clean(k, x, y));
            e["gt"] = json!(format!("gt/{id}.png"));
        }
        entries.push(e);
        ids.push(id);
    }
    let manifest = dir.join("manifest.json");
    fs::write(&manifest, serde_json::to_string_pretty(&json!({ "entries": entries })).unwrap()).unwrap();
    Dataset { manifest, ids }
}

/// Every regular file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn random_rgb(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
    (0..w * h * 3).map(|_| rng.random::<f64>()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
