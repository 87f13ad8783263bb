//! Shadow-dataset ingestion, preprocessing, and the trigger-injection operator.
//!
//! Images live in pixel space as dense `f64` arrays in `[0, 1]`, laid out
//! `N x C x H x W` with RGB channel order. Perturbations are added in this
//! space, before any encoder-internal normalization.

pub mod synth;

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trigger::Perturbation;

/// A batch of images in pixel space.
///
/// Invariants: every element is in `[0, 1]`, `N >= 1`, and `ids.len() == N`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pixels: Array4<f64>,
    ids: Vec<String>,
}

impl ImageBatch {
    /// Build a batch, validating the range and shape invariants.
    pub fn new(pixels: Array4<f64>, ids: Vec<String>) -> Result<Self> {
        let n = pixels.shape()[0];
        if n == 0 {
            return Err(Error::contract("ImageBatch requires N >= 1"));
        }
        if ids.len() != n {
            return Err(Error::contract(format!(
                "ImageBatch has {n} images but {} ids",
                ids.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::contract("ImageBatch pixels must lie in [0, 1]"));
        }
        Ok(Self { pixels, ids })
    }

    pub fn pixels(&self) -> &Array4<f64> {
        &self.pixels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    /// `(C, H, W)` of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    /// Single image view as `C x H x W`.
    pub fn image(&self, i: usize) -> ndarray::ArrayView3<'_, f64> {
        self.pixels.index_axis(Axis(0), i)
    }

    /// New batch holding the selected rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("select requires at least one index"));
        }
        let (c, h, w) = self.image_shape();
        let mut pixels = Array4::zeros((indices.len(), c, h, w));
        let mut ids = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::contract(format!("index {i} out of range")));
            }
            pixels.index_axis_mut(Axis(0), row).assign(&self.image(i));
            ids.push(self.ids[i].clone());
        }
        Ok(Self { pixels, ids })
    }

    /// Concatenate batches with identical image shapes.
    pub fn concat(parts: &[ImageBatch]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|b| b.pixels.view()).collect();
        let pixels = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::contract(format!("concat shape mismatch: {e}")))?;
        let ids = parts.iter().flat_map(|b| b.ids.iter().cloned()).collect();
        Self::new(pixels, ids)
    }
}

/// Inject a perturbation into every image of a batch: `clamp(x + p, 0, 1)`.
///
/// The input batch is left unmodified. The perturbation must match the batch's
/// `C x H x W` shape.
pub fn apply_trigger(images: &ImageBatch, p: &Perturbation) -> Result<ImageBatch> {
    let (out, _mask) = apply_trigger_masked(images, p)?;
    Ok(out)
}

/// Like [`apply_trigger`], also returning the clamp pass-through mask.
///
/// The mask is 1 where `0 <= x + p <= 1` (boundary inclusive) and 0 where the
/// clamp saturates; it is the derivative of the injection w.r.t. both the
/// image and the perturbation.
pub fn apply_trigger_masked(
    images: &ImageBatch,
    p: &Perturbation,
) -> Result<(ImageBatch, Array4<f64>)> {
    let (c, h, w) = images.image_shape();
    if p.shape() != (c, h, w) {
        return Err(Error::contract(format!(
            "perturbation shape {:?} does not match image shape {:?}",
            p.shape(),
            (c, h, w)
        )));
    }
    let n = images.len();
    let mut out = images.pixels.clone();
    let mut mask = Array4::zeros((n, c, h, w));
    let pv = p.values();
    for i in 0..n {
        let mut img = out.index_axis_mut(Axis(0), i);
        let mut m = mask.index_axis_mut(Axis(0), i);
        ndarray::Zip::from(&mut img).and(&mut m).and(pv).for_each(|x, mk, &d| {
            let raw = *x + d;
            *mk = if (0.0..=1.0).contains(&raw) { 1.0 } else { 0.0 };
            *x = raw.clamp(0.0, 1.0);
        });
    }
    let out = ImageBatch { pixels: out, ids: images.ids.clone() };
    Ok((out, mask))
}

/// One manifest line: stable id, path relative to the dataset root, content hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub sha256: String,
}

/// A capped, deterministically ordered view over an image folder.
///
/// The iteration order is a pure function of `(source, seed)`: candidate files
/// are collected, sorted by relative path, shuffled with a seeded RNG, and
/// truncated to the cap.
#[derive(Debug, Clone)]
pub struct ShadowDataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    seed: u64,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif"];

/// Scan `source` for decodable raster images and return a capped dataset.
///
/// `cap` is an upper bound: the dataset holds `min(cap, available)` images.
pub fn load_shadow_dataset(source: &Path, cap: usize, seed: u64) -> Result<ShadowDataset> {
    if !source.is_dir() {
        return Err(Error::input(format!(
            "shadow dataset source {} is not a readable directory",
            source.display()
        )));
    }
    if cap == 0 {
        return Err(Error::contract("shadow dataset cap must be >= 1"));
    }
    let mut rel_paths: Vec<String> = Vec::new();
    for entry in walkdir::WalkDir::new(source).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::input(format!("walking {}: {e}", source.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext_ok = entry
            .path()
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        // Header probe: files that do not parse as images are silently excluded.
        if image::image_dimensions(entry.path()).is_err() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(source)
            .expect("walkdir yields paths under root")
            .to_string_lossy()
            .replace('\\', "/");
        rel_paths.push(rel);
    }
    if rel_paths.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images under {}",
            source.display()
        )));
    }
    rel_paths.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rel_paths.shuffle(&mut rng);
    rel_paths.truncate(cap);

    let root = source.to_path_buf();
    let entries = rel_paths
        .into_par_iter()
        .map(|rel| {
            let bytes = std::fs::read(root.join(&rel))?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            Ok(ManifestEntry { id: rel.clone(), path: rel, sha256: hex::encode(hasher.finalize()) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShadowDataset { root, entries, seed })
}

impl ShadowDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Decode and preprocess every image into one batch at the given square
    /// resolution. Decoding runs in parallel; row order equals manifest order.
    pub fn to_batch(&self, resolution: usize) -> Result<ImageBatch> {
        let images: Vec<(String, Array3<f64>)> = self
            .entries
            .par_iter()
            .map(|e| {
                let bytes = std::fs::read(self.root.join(&e.path))?;
                let img = decode_and_preprocess(&bytes, resolution, resolution)
                    .map_err(|err| Error::input(format!("{}: {err}", e.path)))?;
                Ok((e.id.clone(), img))
            })
            .collect::<Result<Vec<_>>>()?;
        let (c, h, w) = (3, resolution, resolution);
        let mut pixels = Array4::zeros((images.len(), c, h, w));
        let mut ids = Vec::with_capacity(images.len());
        for (i, (id, img)) in images.into_iter().enumerate() {
            pixels.index_axis_mut(Axis(0), i).assign(&img);
            ids.push(id);
        }
        ImageBatch::new(pixels, ids)
    }

    /// Write the line-delimited manifest `{id, path, sha256}`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Decode raw image bytes and preprocess into a single-image batch.
///
/// Pipeline (bit-exact): decode to 8-bit RGB, scale to `[0, 1]` by `v / 255`,
/// bilinear-resize so the shorter side meets the target (half-pixel centers),
/// then center-crop to `height x width`. Channel order is RGB, layout CHW.
pub fn preprocess(raw: &[u8], height: usize, width: usize) -> Result<ImageBatch> {
    let img = decode_and_preprocess(raw, height, width)?;
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let pixels = img.into_shape_with_order((1, c, h, w)).expect("static reshape");
    ImageBatch::new(pixels, vec!["image-0".to_string()])
}

/// Read a file and preprocess it into a single-image batch.
pub fn preprocess_file(path: &Path, height: usize, width: usize) -> Result<ImageBatch> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let mut batch = preprocess(&bytes, height, width)?;
    batch.ids[0] = path.to_string_lossy().into_owned();
    Ok(batch)
}

fn decode_and_preprocess(raw: &[u8], height: usize, width: usize) -> Result<Array3<f64>> {
    if height == 0 || width == 0 {
        return Err(Error::contract("target resolution must be positive"));
    }
    let decoded = image::load_from_memory(raw)
        .map_err(|e| Error::input(format!("image decode failed: {e}")))?
        .to_rgb8();
    let (src_w, src_h) = (decoded.width() as usize, decoded.height() as usize);
    let mut arr = Array3::zeros((3, src_h, src_w));
    for (x, y, px) in decoded.enumerate_pixels() {
        for ch in 0..3 {
            arr[[ch, y as usize, x as usize]] = px.0[ch] as f64 / 255.0;
        }
    }
    // Uniform scale so both dimensions reach at least the target, then crop.
    let scale = f64::max(height as f64 / src_h as f64, width as f64 / src_w as f64);
    let new_h = usize::max(height, (src_h as f64 * scale).round() as usize);
    let new_w = usize::max(width, (src_w as f64 * scale).round() as usize);
    let resized = bilinear_resize(&arr, new_h, new_w);
    Ok(center_crop(&resized, height, width))
}

/// Bilinear resize of a CHW array using half-pixel sample centers.
pub fn bilinear_resize(src: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    if h == new_h && w == new_w {
        return src.clone();
    }
    let mut out = Array3::zeros((c, new_h, new_w));
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for oy in 0..new_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = usize::min(y0 + 1, h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..new_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = usize::min(x0 + 1, w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let top = src[[ch, y0, x0]] * (1.0 - wx) + src[[ch, y0, x1]] * wx;
                let bot = src[[ch, y1, x0]] * (1.0 - wx) + src[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn center_crop(src: &Array3<f64>, height: usize, width: usize) -> Array3<f64> {
    let (h, w) = (src.shape()[1], src.shape()[2]);
    debug_assert!(h >= height && w >= width);
    let oy = (h - height) / 2;
    let ox = (w - width) / 2;
    src.slice(ndarray::s![.., oy..oy + height, ox..ox + width]).to_owned()
}
