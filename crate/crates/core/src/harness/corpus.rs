//! Procedural natural-ish images for training and evaluation when no photo
//! corpus is available: smooth colour fields overlaid with shapes, stripes
//! and fine texture.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::Tensor;

use crate::error::{Error, Result};
use crate::imaging::{rgb_image_to_tensor, Dataset};

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn random_colour(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

/// One image drawn from `rng`.
pub fn synth_image(width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = (width as f64, height as f64);
    let c0 = random_colour(rng);
    let c1 = random_colour(rng);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut buf: Vec<[f64; 3]> = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x as f64, y as f64)))
        .map(|(x, y)| {
            let t = (((x / w - 0.5) * ca + (y / h - 0.5) * sa) + 0.7) / 1.4;
            let t = t.clamp(0.0, 1.0);
            [lerp(c0[0], c1[0], t), lerp(c0[1], c1[1], t), lerp(c0[2], c1[2], t)]
        })
        .collect();

    let shapes = rng.gen_range(2..7);
    for _ in 0..shapes {
        let colour = random_colour(rng);
        let alpha = rng.gen_range(0.5..1.0);
        let cx = rng.gen_range(0.0..w);
        let cy = rng.gen_range(0.0..h);
        let r = rng.gen_range(0.08..0.4) * w.min(h);
        let kind = rng.gen_range(0..3);
        let freq = rng.gen_range(0.2..1.2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = match kind {
                    0 => dx * dx + dy * dy < r * r,
                    1 => dx.abs() < r && dy.abs() < r * 0.6,
                    _ => dx.abs() < r && dy.abs() < r && ((dx * ca + dy * sa) * freq).sin() > 0.0,
                };
                if inside {
                    let p = &mut buf[(y * width + x) as usize];
                    for c in 0..3 {
                        p[c] = lerp(p[c], colour[c], alpha);
                    }
                }
            }
        }
    }

    let texture = rng.gen_range(0.0..30.0);
    let mut img = RgbImage::new(width, height);
    for (i, p) in buf.iter().enumerate() {
        let grain = texture * (rng.gen::<f64>() - 0.5);
        let px = [0, 1, 2].map(|c| (p[c] + grain).round().clamp(0.0, 255.0) as u8);
        img.put_pixel(i as u32 % width, i as u32 / width, Rgb(px));
    }
    img
}

/// `count` images as an in-memory dataset.
pub fn synth_dataset(count: usize, height: i64, width: i64, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Dataset("empty synthetic corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..count)
        .map(|_| rgb_image_to_tensor(&synth_image(width as u32, height as u32, &mut rng)))
        .collect();
    Dataset::from_tensor(Tensor::stack(&images, 0))
}

/// Writes `count` PNG files into `dir` and returns their paths.
pub fn write_corpus(dir: &Path, count: usize, height: u32, width: u32, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:05}.png"));
            synth_image(width, height, &mut rng).save(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = synth_dataset(4, 16, 24, 3).unwrap();
        let b = synth_dataset(4, 16, 24, 3).unwrap();
        assert!(a.images().equal(b.images()));
        assert_eq!(a.images().size(), vec![4, 3, 16, 24]);
        let first = a.images().get(0);
        let second = a.images().get(1);
        assert!(!first.equal(&second));
        assert!(synth_dataset(0, 16, 16, 0).is_err());
    }

    #[test]
    fn corpus_files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path(), 3, 16, 16, 1).unwrap();
        assert_eq!(paths.len(), 3);
        let ds = Dataset::load(dir.path(), 16, 16, 3, 0).unwrap();
        assert_eq!(ds.len(), 3);
    }
}
