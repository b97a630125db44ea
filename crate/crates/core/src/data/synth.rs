use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{quantize, write_pgm, Image};
use super::manifest::{write_manifest, ManifestEntry};
use super::{BBox, GtBox, Sample};
use crate::error::{Error, Result};

pub const GLYPH_NAMES: [&str; 4] = ["disc", "hollow_square", "stripes", "cross"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub n_classes: usize,
    /// Probability that each class is present in an image.
    pub class_prior: f64,
    /// Background noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_train: usize, n_test: usize, image_size: usize, seed: u64) -> Self {
        Self {
            n_train,
            n_test,
            image_size,
            n_classes: 4,
            class_prior: 0.35,
            noise: 0.1,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Quadrant `q` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)
/// of a `size x size` image.
pub fn quadrant_box(q: usize, size: usize) -> BBox {
    let half = size / 2;
    let (x, w) = if q.is_multiple_of(2) {
        (0, half)
    } else {
        (half, size - half)
    };
    let (y, h) = if q < 2 { (0, half) } else { (half, size - half) };
    BBox::new(x, y, w, h)
}

fn glyph_covers(class: usize, dx: usize, dy: usize, side: usize) -> bool {
    let s = side as f64;
    let (fx, fy) = (dx as f64 + 0.5, dy as f64 + 0.5);
    match class {
        0 => {
            let r = s / 2.0;
            (fx - r).powi(2) + (fy - r).powi(2) <= r * r
        }
        1 => {
            let t = (side / 6).max(2);
            dx < t || dy < t || dx >= side - t || dy >= side - t
        }
        2 => {
            let period = (side / 4).max(4);
            (dx + dy) % period < period / 2
        }
        _ => {
            let t = (side / 4).max(2);
            let lo = (side - t) / 2;
            (lo..lo + t).contains(&dx) || (lo..lo + t).contains(&dy)
        }
    }
}

fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Sample {
    let size = cfg.image_size;
    let mut pixels: Vec<f64> = (0..size * size).map(|_| rng.random::<f64>() * cfg.noise).collect();
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let mut labels = Vec::new();
    let mut boxes = Vec::new();
    for class in 0..cfg.n_classes {
        if rng.random::<f64>() >= cfg.class_prior {
            continue;
        }
        let quad = quadrant_box(quadrants[class], size);
        let span = quad.w.min(quad.h);
        let lo = (span / 2).max(1);
        let hi = (span * 4 / 5).max(lo);
        let side = rng.random_range(lo..=hi);
        let x0 = quad.x + rng.random_range(0..=quad.w - side);
        let y0 = quad.y + rng.random_range(0..=quad.h - side);
        let intensity = rng.random_range(0.75..0.95);
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..side {
            for dx in 0..side {
                if glyph_covers(class, dx, dy, side) {
                    let (x, y) = (x0 + dx, y0 + dy);
                    pixels[y * size + x] = intensity;
                    min_x = min_x.min(x);
                    min_y = min_y.min(y);
                    max_x = max_x.max(x);
                    max_y = max_y.max(y);
                }
            }
        }
        if min_x == usize::MAX {
            continue;
        }
        labels.push(class);
        boxes.push(GtBox {
            class,
            bbox: BBox::new(min_x, min_y, max_x - min_x + 1, max_y - min_y + 1),
        });
    }
    // Quantize so the in-memory dataset equals its PGM encoding exactly.
    for v in &mut pixels {
        *v = quantize(*v) as f64 / 255.0;
    }
    Sample {
        image: Image {
            width: size,
            height: size,
            pixels,
        },
        labels,
        boxes,
    }
}

/// Generates images with up to one glyph per class, each class in its own
/// randomly chosen quadrant. The result depends only on `cfg`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::InvalidArgument("n_train and n_test must be >= 1".into()));
    }
    if cfg.image_size < 16 {
        return Err(Error::InvalidArgument("image_size must be >= 16".into()));
    }
    if !(1..=GLYPH_NAMES.len()).contains(&cfg.n_classes) {
        return Err(Error::InvalidArgument(format!(
            "synthetic data supports 1 to {} classes",
            GLYPH_NAMES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = (0..cfg.n_train).map(|_| render(cfg, &mut rng)).collect();
    let test = (0..cfg.n_test).map(|_| render(cfg, &mut rng)).collect();
    Ok(SynthDataset { train, test })
}

/// Writes `images/{split}_{index}.pgm` plus `train.csv` and `test.csv`.
pub fn write_synth(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{split}_{i:05}.pgm");
            write_pgm(&s.image, &dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                labels: s.labels.clone(),
                boxes: s.boxes.clone(),
            });
        }
        write_manifest(&entries, &dir.join(format!("{split}.csv")))?;
    }
    Ok(())
}
