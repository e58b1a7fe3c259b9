//! Image buffers, colour transforms and dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest side accepted at pipeline entry.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("image {width}x{height} is smaller than {min}x{min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("invalid image data: {0}")]
    InvalidData(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ParseError(String),
    #[error("duplicate manifest id {0:?}")]
    DuplicateId(String),
}

/// Row-major `H×W×3` RGB image with every sample in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidData("zero-sized image".into()));
        }
        if data.len() != width * height * 3 {
            return Err(ImageError::InvalidData(format!(
                "expected {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(ImageError::InvalidData(format!("sample {v} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from a per-pixel closure; values are clamped to `[0,1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend(px.iter().map(|v| clamp01(*v)));
            }
        }
        Self { width, height, data }
    }

    /// Constant-colour image.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Wraps data that the caller has already clamped to `[0,1]`.
    pub(crate) fn from_clamped(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One colour plane as a flat row-major vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Per-channel means in R, G, B order.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|s| s / n)
    }

    pub fn check_min_side(&self, min: usize) -> Result<(), ImageError> {
        if self.width < min || self.height < min {
            return Err(ImageError::TooSmall {
                width: self.width,
                height: self.height,
                min,
            });
        }
        Ok(())
    }
}

/// Single-plane luminance image in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaBuf {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LumaBuf {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(ImageError::InvalidData("luma plane size mismatch".into()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(ImageError::InvalidData("luma sample outside [0,1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// BT.601 luma of one RGB triple.
#[inline]
pub fn luma_of(rgb: [f64; 3]) -> f64 {
    // same weights, arranged so grey pixels map to their exact value
    rgb[1] + 0.299 * (rgb[0] - rgb[1]) + 0.114 * (rgb[2] - rgb[1])
}

/// BT.601 luma plane.
pub fn luma(img: &ImageBuf) -> LumaBuf {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| clamp01(luma_of([p[0], p[1], p[2]])))
        .collect();
    LumaBuf {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Decodes a PNG or JPEG file; 8-bit sample `v` becomes `v / 255`.
pub fn load_image(path: &Path) -> Result<ImageBuf, ImageError> {
    if !path.exists() {
        return Err(ImageError::FileNotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let img = decode_image(&bytes).map_err(|reason| ImageError::DecodeError {
        path: path.to_path_buf(),
        reason,
    })?;
    img.check_min_side(MIN_SIDE)?;
    Ok(img)
}

/// Decodes PNG/JPEG bytes without a size check.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuf, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(format!("unsupported format {format:?}"));
    }
    let dynimg = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(ImageBuf {
        width: w as usize,
        height: h as usize,
        data,
    })
}

/// Quantises a `[0,1]` sample to a byte with round-half-up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn to_rgb8(img: &ImageBuf) -> image::RgbImage {
    let raw: Vec<u8> = img.data.iter().map(|v| quantize(*v)).collect();
    image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length matches dimensions")
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &ImageBuf, path: &Path) -> Result<(), ImageError> {
    let io_err = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut buf = Vec::new();
    to_rgb8(img)
        .write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
        .map_err(|e| ImageError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })?;
    fs::write(path, buf).map_err(io_err)
}

/// One input image with optional reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(rename = "input")]
    pub input_path: PathBuf,
    #[serde(rename = "gt", default, skip_serializing_if = "Option::is_none")]
    pub gt_path: Option<PathBuf>,
    #[serde(rename = "dataset")]
    pub dataset_label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses manifest JSON. Relative paths are kept as written.
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let manifest: DatasetManifest =
            serde_json::from_str(text).map_err(|e| ManifestError::ParseError(e.to_string()))?;
        let mut seen = HashSet::new();
        for e in &manifest.entries {
            if e.id.is_empty() || e.input_path.as_os_str().is_empty() {
                return Err(ManifestError::ParseError(format!(
                    "entry {:?} has an empty id or input path",
                    e.id
                )));
            }
            if e.gt_path.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
                return Err(ManifestError::ParseError(format!("entry {:?} has an empty gt path", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(ManifestError::DuplicateId(e.id.clone()));
            }
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    /// Resolves relative entry paths against `base`.
    pub fn resolved(mut self, base: &Path) -> Self {
        for e in &mut self.entries {
            if e.input_path.is_relative() {
                e.input_path = base.join(&e.input_path);
            }
            if let Some(gt) = e.gt_path.as_mut().filter(|p| p.is_relative()) {
                *gt = base.join(&*gt);
            }
        }
        self
    }
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(DatasetManifest::from_json(&text)?.resolved(base))
}
