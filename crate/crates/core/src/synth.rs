//! Synthetic grayscale corpora with a tunable amount of structure, and a
//! compression-based image complexity score.

use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::GrayImage;

/// Corpus recipe. Image `i` gets `r_values[i % r_values.len()]` random
/// constant rectangles over a constant background, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub count: usize,
    pub r_values: Vec<usize>,
    pub sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0
            || self.w == 0
            || self.patch == 0
            || !self.h.is_multiple_of(self.patch)
            || !self.w.is_multiple_of(self.patch)
        {
            return Err(Error::InvalidArgument(format!(
                "{}x{} images are not divisible into {}-pixel patches",
                self.h, self.w, self.patch
            )));
        }
        if self.r_values.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one rectangle count is required".into(),
            ));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Raw 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteImage {
    pub h: usize,
    pub w: usize,
    pub bytes: Vec<u8>,
}

impl ByteImage {
    pub fn to_gray(&self) -> Result<GrayImage> {
        GrayImage::from_bytes(self.h, self.w, &self.bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

/// Draws one image with `rects` rectangles from `seed`.
pub fn synth_image(h: usize, w: usize, rects: usize, sigma: f64, seed: u64) -> Result<ByteImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background: f64 = rng.random_range(0..=255u8) as f64;
    let mut px = vec![background; h * w];
    for _ in 0..rects {
        let rh = rng.random_range(1..=h.div_ceil(2));
        let rw = rng.random_range(1..=w.div_ceil(2));
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        let level = rng.random_range(0..=255u8) as f64;
        for y in y0..y0 + rh {
            px[y * w + x0..y * w + x0 + rw]
                .iter_mut()
                .for_each(|p| *p = level);
        }
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        px.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
    }
    Ok(ByteImage {
        h,
        w,
        bytes: px
            .iter()
            .map(|p| p.round().clamp(0.0, 255.0) as u8)
            .collect(),
    })
}

/// Generates the corpus in memory; entry paths are the file names that
/// [`write_corpus`] would use.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(ManifestEntry, ByteImage)>> {
    spec.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| {
            let seed = seeds.next_u64();
            let r = spec.r_values[i % spec.r_values.len()];
            let img = synth_image(spec.h, spec.w, r, spec.sigma, seed)?;
            let entry = ManifestEntry {
                path: format!("img_{i:05}.raw"),
                h: spec.h,
                w: spec.w,
                r,
                seed,
            };
            Ok((entry, img))
        })
        .collect()
}

/// Writes raw images plus `manifest.json` into `out_dir`.
pub fn write_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let corpus = generate(spec)?;
    std::fs::create_dir_all(out_dir)?;
    let mut images = Vec::with_capacity(corpus.len());
    for (entry, img) in corpus {
        std::fs::write(out_dir.join(&entry.path), &img.bytes)?;
        images.push(entry);
    }
    let manifest = Manifest { images };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// A loaded corpus: manifest entries with their pixels.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<ByteImage>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::SchemaViolation(format!("{}: {e}", path.display())))
}

/// Loads every image listed in a manifest; relative paths resolve against
/// the manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let manifest = read_manifest(manifest_path)?;
    let base: PathBuf = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut images = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let bytes = std::fs::read(base.join(&e.path))?;
        if bytes.len() != e.h * e.w {
            return Err(Error::SchemaViolation(format!(
                "{} has {} bytes, expected {}x{}",
                e.path,
                bytes.len(),
                e.h,
                e.w
            )));
        }
        images.push(ByteImage {
            h: e.h,
            w: e.w,
            bytes,
        });
    }
    Ok(Corpus {
        entries: manifest.images,
        images,
    })
}

/// Deflate-compressed size per pixel.
pub fn complexity_score(bytes: &[u8], h: usize, w: usize) -> Result<f64> {
    if bytes.is_empty() || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    if bytes.len() != h * w {
        return Err(Error::InvalidArgument(format!(
            "{} bytes for a {h}x{w} image",
            bytes.len()
        )));
    }
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(bytes)?;
    let compressed = enc.finish()?;
    Ok(compressed.len() as f64 / (h * w) as f64)
}
