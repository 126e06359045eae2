//! Dataset loading, canonical resizing, train/test splitting, and
//! multiplicative speckle synthesis, plus the procedural phantom set used
//! for desk-scale runs.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const CANONICAL_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One grayscale image with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array2<f64>,
    pub split: Split,
    pub source: String,
    pub path: Option<PathBuf>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array2<f64>, source: impl Into<String>) -> Self {
        ImageSample {
            id: id.into(),
            pixels,
            split: Split::Train,
            source: source.into(),
            path: None,
        }
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.pixels.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex_string(&hasher.finalize()[..8])
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    pub seed: u64,
    pub clip: bool,
}

impl NoiseConfig {
    pub fn new(sigma: f64, seed: u64, clip: bool) -> Self {
        assert!(sigma >= 0.0, "sigma must be nonnegative");
        NoiseConfig { sigma, seed, clip }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ImageSample>,
    pub counts: SplitCounts,
    pub split_ratio: f64,
    pub source: String,
}

impl DatasetManifest {
    pub fn recount(&mut self) {
        let train = self.entries.iter().filter(|e| e.split == Split::Train).count();
        self.counts = SplitCounts {
            train,
            test: self.entries.len() - train,
            total: self.entries.len(),
        };
    }

    pub fn samples(&self, split: Split) -> Vec<&ImageSample> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// One line per image: id, relative path, split, checksum.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# dataset={} total={} train={} test={} ratio={}\n",
            self.source, self.counts.total, self.counts.train, self.counts.test, self.split_ratio
        );
        for e in &self.entries {
            let path = e
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into());
            let split = match e.split {
                Split::Train => "train",
                Split::Test => "test",
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, path, split, e.checksum()));
        }
        out
    }
}

const RASTER_EXTS: &[&str] = &["png", "bmp", "tif", "tiff", "jpg", "jpeg"];

/// Decode every raster under `root` to a single-channel [0, 1] sample.
pub fn load_dataset(root: &Path, source_name: &str) -> Result<DatasetManifest> {
    let mut paths: Vec<PathBuf> = Vec::new();
    collect_rasters(root, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut entries = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p).map_err(|e| Error::BadImage {
            path: p.clone(),
            message: e.to_string(),
        })?;
        let luma = img.to_luma32f();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        let mut pixels = Array2::<f64>::zeros((h, w));
        for (x, y, p) in luma.enumerate_pixels() {
            pixels[[y as usize, x as usize]] = (p.0[0] as f64).clamp(0.0, 1.0);
        }
        let id = p
            .strip_prefix(root)
            .unwrap_or(p)
            .with_extension("")
            .display()
            .to_string()
            .replace(std::path::MAIN_SEPARATOR, "/");
        let mut sample = ImageSample::new(id, pixels, source_name);
        sample.path = Some(p.strip_prefix(root).unwrap_or(p).to_path_buf());
        entries.push(sample);
    }
    let counts = SplitCounts {
        train: entries.len(),
        test: 0,
        total: entries.len(),
    };
    Ok(DatasetManifest {
        entries,
        counts,
        split_ratio: 1.0,
        source: source_name.to_string(),
    })
}

fn collect_rasters(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_rasters(&path, out)?;
        } else if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            if RASTER_EXTS.contains(&ext.to_ascii_lowercase().as_str()) {
                out.push(path);
            }
        }
    }
    Ok(())
}

/// Bilinear resize to an arbitrary square size, clamped to [0, 1].
pub fn resize_bilinear(pixels: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = pixels.dim();
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = pixels[[y0, x0]] * (1.0 - wx) + pixels[[y0, x1]] * wx;
            let bot = pixels[[y1, x0]] * (1.0 - wx) + pixels[[y1, x1]] * wx;
            out[[i, j]] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
        }
    }
    out
}

/// Resize a sample to the canonical 224x224 grid.
pub fn resize_to_canonical(sample: &ImageSample) -> ImageSample {
    let (h, w) = sample.pixels.dim();
    let pixels = if h == CANONICAL_SIZE && w == CANONICAL_SIZE {
        sample.pixels.clone()
    } else {
        resize_bilinear(&sample.pixels, CANONICAL_SIZE, CANONICAL_SIZE)
    };
    ImageSample {
        pixels,
        ..sample.clone()
    }
}

/// Deterministic shuffle and 7:3-style partition: the first
/// floor(ratio * N) shuffled entries become the train split.
pub fn split_dataset(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = manifest.entries.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (ratio * n as f64).floor() as usize;
    let mut entries = manifest.entries.clone();
    for (rank, &idx) in order.iter().enumerate() {
        entries[idx].split = if rank < n_train {
            Split::Train
        } else {
            Split::Test
        };
    }
    let mut out = DatasetManifest {
        entries,
        counts: SplitCounts::default(),
        split_ratio: ratio,
        source: manifest.source.clone(),
    };
    out.recount();
    Ok(out)
}

/// Expected (train, test) counts for a given total under the floor rule.
pub fn split_counts(total: usize, ratio: f64) -> (usize, usize) {
    let train = (ratio * total as f64).floor() as usize;
    (train, total - train)
}

/// Multiplicative speckle: out = clean * (1 + eps), eps ~ N(0, sigma^2),
/// drawn independently per pixel. sigma = 0 is the bitwise identity.
pub fn add_speckle(sample: &ImageSample, cfg: &NoiseConfig) -> ImageSample {
    let mut out = sample.clone();
    if cfg.sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, cfg.sigma).expect("sigma must be finite");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for v in out.pixels.iter_mut() {
        let eps: f64 = normal.sample(&mut rng);
        *v *= 1.0 + eps;
        if cfg.clip {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Stable 64-bit mix of the global seed with an image id (and an arbitrary
/// salt such as the step index), so noise draws are order-independent.
pub fn derive_seed(global_seed: u64, id: &str, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ global_seed.wrapping_mul(0x100000001b3);
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= salt.wrapping_add(0x9e3779b97f4a7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Procedural piecewise-smooth phantom: a background gradient plus a few
/// soft-edged ellipses. Stands in for real ultrasound data in desk-scale
/// runs.
pub fn phantom_image(size: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gx: f64 = rng.gen_range(-0.3..0.3);
    let gy: f64 = rng.gen_range(-0.3..0.3);
    let base: f64 = rng.gen_range(0.25..0.55);
    let mut img = Array2::<f64>::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 / size as f64 - 0.5;
            let x = j as f64 / size as f64 - 0.5;
            img[[i, j]] = base + gx * x + gy * y;
        }
    }
    let n_ellipses = rng.gen_range(2..5);
    for _ in 0..n_ellipses {
        let cy: f64 = rng.gen_range(0.2..0.8);
        let cx: f64 = rng.gen_range(0.2..0.8);
        let ry: f64 = rng.gen_range(0.08..0.3);
        let rx: f64 = rng.gen_range(0.08..0.3);
        let amp: f64 = rng.gen_range(-0.35..0.45);
        let soft: f64 = rng.gen_range(8.0..20.0);
        for i in 0..size {
            for j in 0..size {
                let y = i as f64 / size as f64;
                let x = j as f64 / size as f64;
                let d = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
                // smooth step across the ellipse boundary
                let m = 1.0 / (1.0 + (soft * (d - 1.0)).exp());
                img[[i, j]] += amp * m;
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// A deterministic synthetic manifest of `n` phantoms at the given size.
pub fn phantom_dataset(n: usize, size: usize, seed: u64) -> DatasetManifest {
    let entries: Vec<ImageSample> = (0..n)
        .map(|k| {
            ImageSample::new(
                format!("phantom_{k:04}"),
                phantom_image(size, derive_seed(seed, &format!("phantom_{k:04}"), 0)),
                "synthetic",
            )
        })
        .collect();
    let counts = SplitCounts {
        train: entries.len(),
        test: 0,
        total: entries.len(),
    };
    DatasetManifest {
        entries,
        counts,
        split_ratio: 1.0,
        source: "synthetic".into(),
    }
}
