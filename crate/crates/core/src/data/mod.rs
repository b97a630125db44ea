//! Dataset manifests, PGM images, bilinear resampling, the synthetic glyph
//! dataset and checkpoints.

mod checkpoint;
mod image;
mod manifest;
mod synth;

pub use checkpoint::{
    load_checkpoint, network_checkpoint, read_checkpoint, restore_network, restore_trainer, save_checkpoint,
    write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use image::{decode_pgm, encode_pgm, load_pgm, quantize, resample_bilinear, resize_bilinear, write_pgm, Image};
pub use manifest::{
    duplicate_paths, load_manifest, load_samples, parse_manifest, render_manifest, write_manifest, ManifestEntry,
};
pub use synth::{quadrant_box, synth_dataset, write_synth, SynthConfig, SynthDataset, GLYPH_NAMES};

/// Axis-aligned integer box in pixel coordinates; covers columns
/// `x..x+w` and rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.right().min(other.right()).saturating_sub(self.x.max(other.x));
        let h = self.bottom().min(other.bottom()).saturating_sub(self.y.max(other.y));
        w * h
    }

    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }
}

/// Ground-truth box for one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtBox {
    pub class: usize,
    pub bbox: BBox,
}

/// An image with its label set and ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: Vec<usize>,
    pub boxes: Vec<GtBox>,
}
