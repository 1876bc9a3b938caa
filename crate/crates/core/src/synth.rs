//! Small synthetic datasets laid out like the real one (`COVID/`, `Normal/`
//! folders of PNGs), for smoke runs and tests.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{save_grayscale, Label};
use crate::error::{Error, Result};
use crate::models::IMAGE_SIZE;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

fn write_class(
    root: &Path,
    label: Label,
    count: usize,
    seed: u64,
    paint: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
) -> Result<()> {
    let dir = root.join(label.as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for i in 0..count {
        let mut r = rng::stream(seed, Purpose::Probe, &[label.index() as u64, i as u64]);
        let img = Tensor::from_vec(&[IMAGE_SIZE, IMAGE_SIZE, 1], paint(&mut r))?;
        save_grayscale(
            &img,
            &dir.join(format!("{}_{i:04}.png", label.as_str().to_lowercase())),
        )?;
    }
    Ok(())
}

/// COVID images are a bright square on a dark background, Normal images a
/// dark square on a bright background, with light pixel noise.
pub fn squares(root: &Path, per_class: usize, seed: u64) -> Result<()> {
    for label in Label::ALL {
        let (bg, fg) = if label == Label::Covid {
            (0.15, 0.9)
        } else {
            (0.85, 0.1)
        };
        write_class(root, label, per_class, seed, |r| {
            let side = r.random_range(6..=10);
            let (top, left) = (
                r.random_range(2..IMAGE_SIZE - side - 2),
                r.random_range(2..IMAGE_SIZE - side - 2),
            );
            (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|i| {
                    let (y, x) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
                    let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                    let v: f64 = if inside { fg } else { bg };
                    (v + r.random_range(-0.05..0.05)).clamp(0.0, 1.0)
                })
                .collect()
        })?;
    }
    Ok(())
}

/// Noisy images where only a faint blob tells the classes apart: COVID has
/// a bright blob, Normal a dark one, each at a random spot.
pub fn blobs(
    root: &Path,
    covid: usize,
    normal: usize,
    contrast: f64,
    noise: f64,
    seed: u64,
) -> Result<()> {
    for (label, count) in [(Label::Covid, covid), (Label::Normal, normal)] {
        let sign = if label == Label::Covid { 1.0 } else { -1.0 };
        write_class(root, label, count, seed, |r| {
            let (cy, cx) = (r.random_range(8.0..22.0), r.random_range(8.0..22.0));
            let radius: f64 = r.random_range(2.5..4.5);
            (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|i| {
                    let (y, x) = ((i / IMAGE_SIZE) as f64, (i % IMAGE_SIZE) as f64);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    let blob = sign * contrast * (-d2 / (2.0 * radius * radius)).exp();
                    (0.5 + blob + r.random_range(-noise..noise)).clamp(0.0, 1.0)
                })
                .collect()
        })?;
    }
    Ok(())
}
