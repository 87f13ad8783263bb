//! Deterministic procedural image generator for fixtures and tests.
//!
//! Six texture families (gradients, stripes, checkerboards, blobs, rings,
//! low-frequency color noise) rendered at mixed sizes, so the preprocessing
//! path (scale + center crop) is exercised on every dataset. Generation is
//! fully reproducible from the seed.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Number of distinct texture families produced by [`synth_image`].
pub const FAMILY_COUNT: u64 = 6;

/// Render one image. The family cycles with `index` so any contiguous run of
/// six indices covers all families; all other parameters derive from
/// `seed ^ index`.
pub fn synth_image(seed: u64, index: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index);
    let w = rng.random_range(40..=72u32);
    let h = rng.random_range(40..=72u32);
    let family = index % FAMILY_COUNT;
    let mut img = RgbImage::new(w, h);
    let ca = random_color(&mut rng);
    let cb = random_color(&mut rng);
    match family {
        0 => gradient(&mut img, &mut rng, ca, cb),
        1 => stripes(&mut img, &mut rng, ca, cb),
        2 => checker(&mut img, &mut rng, ca, cb),
        3 => blobs(&mut img, &mut rng, ca),
        4 => rings(&mut img, &mut rng, ca, cb),
        _ => low_freq_noise(&mut img, &mut rng),
    }
    // Light per-pixel jitter so flat regions are not bit-identical.
    for p in img.pixels_mut() {
        for c in p.0.iter_mut() {
            let jitter: f64 = rng.random_range(-2.0..=2.0);
            *c = (*c as f64 + jitter).clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Render `count` images under `dir` as `synth_0000.png`, `synth_0001.png`, ...
/// and return the written paths in index order.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_image(seed, i as u64);
        let path = dir.join(format!("synth_{i:04}.png"));
        img.save(&path).map_err(|e| crate::error::Error::input(format!(
            "cannot write {}: {e}",
            path.display()
        )))?;
        paths.push(path);
    }
    Ok(paths)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((a[c] + (b[c] - a[c]) * t) * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn gradient(img: &mut RgbImage, rng: &mut ChaCha8Rng, ca: [f64; 3], cb: [f64; 3]) {
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (w, h) = (img.width() as f64, img.height() as f64);
    let span = (w * dx.abs() + h * dy.abs()).max(1.0);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let t = (x as f64 * dx + y as f64 * dy) / span + 0.5;
        p.0 = mix(ca, cb, t);
    }
}

fn stripes(img: &mut RgbImage, rng: &mut ChaCha8Rng, ca: [f64; 3], cb: [f64; 3]) {
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(0.08..0.45);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    for (x, y, p) in img.enumerate_pixels_mut() {
        let s = ((x as f64 * dx + y as f64 * dy) * freq + phase).sin();
        p.0 = mix(ca, cb, 0.5 + 0.5 * s);
    }
}

fn checker(img: &mut RgbImage, rng: &mut ChaCha8Rng, ca: [f64; 3], cb: [f64; 3]) {
    let cell: u32 = rng.random_range(4..=12);
    let ox: u32 = rng.random_range(0..cell);
    let oy: u32 = rng.random_range(0..cell);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
        p.0 = mix(ca, cb, parity as f64);
    }
}

fn blobs(img: &mut RgbImage, rng: &mut ChaCha8Rng, background: [f64; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let k = rng.random_range(2..=5usize);
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        centers.push((
            rng.random_range(0.0..w),
            rng.random_range(0.0..h),
            rng.random_range(4.0..(w.min(h) / 2.5)),
            random_color(rng),
        ));
    }
    for (x, y, p) in img.enumerate_pixels_mut() {
        let mut acc = background;
        for &(cx, cy, sigma, color) in &centers {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
            for c in 0..3 {
                acc[c] = acc[c] + (color[c] - acc[c]) * wgt;
            }
        }
        p.0 = mix(acc, acc, 0.0);
    }
}

fn rings(img: &mut RgbImage, rng: &mut ChaCha8Rng, ca: [f64; 3], cb: [f64; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let cx = rng.random_range(0.2 * w..0.8 * w);
    let cy = rng.random_range(0.2 * h..0.8 * h);
    let freq: f64 = rng.random_range(0.15..0.6);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let s = (r * freq).sin();
        p.0 = mix(ca, cb, 0.5 + 0.5 * s);
    }
}

fn low_freq_noise(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    // A coarse random color grid, bilinearly upsampled to image size.
    const G: usize = 5;
    let mut grid = [[[0.0f64; 3]; G]; G];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            *cell = random_color(rng);
        }
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let gx = (x as f64 / w) * (G - 1) as f64;
        let gy = (y as f64 / h) * (G - 1) as f64;
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(G - 1), (y0 + 1).min(G - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let mut acc = [0.0f64; 3];
        for c in 0..3 {
            let top = grid[y0][x0][c] * (1.0 - fx) + grid[y0][x1][c] * fx;
            let bot = grid[y1][x0][c] * (1.0 - fx) + grid[y1][x1][c] * fx;
            acc[c] = top * (1.0 - fy) + bot * fy;
        }
        p.0 = mix(acc, acc, 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = synth_image(7, 3);
        let b = synth_image(7, 3);
        assert_eq!(a.as_raw(), b.as_raw());
        let c = synth_image(8, 3);
        assert_ne!(a.as_raw(), c.as_raw());
    }

    #[test]
    fn sizes_stay_in_range() {
        for i in 0..24 {
            let img = synth_image(1, i);
            assert!((40..=72).contains(&img.width()));
            assert!((40..=72).contains(&img.height()));
        }
    }

    #[test]
    fn dataset_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_dataset(dir.path(), 7, 42).unwrap();
        assert_eq!(paths.len(), 7);
        for p in &paths {
            assert!(p.exists());
        }
    }
}
