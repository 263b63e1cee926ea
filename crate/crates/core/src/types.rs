//! Batches of images and per-step loss reports.

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// `b` RGB images, `[b, 3, h, w]` row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub pixels: Vec<f32>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u64>,
}

impl ImageBatch {
    pub fn new(pixels: Vec<f32>, batch: usize, height: usize, width: usize, ids: Vec<u64>) -> Result<Self> {
        if pixels.len() != batch * 3 * height * width || ids.len() != batch {
            return Err(Error::validation(
                "batch",
                format!(
                    "{} values and {} ids for {batch} images of {height}x{width}",
                    pixels.len(),
                    ids.len()
                ),
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("batch", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(ImageBatch {
            pixels,
            batch,
            height,
            width,
            ids,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, 3, self.height, self.width)
    }

    /// Same ids and geometry with new pixel values.
    pub fn with_pixels(&self, pixels: Vec<f32>) -> ImageBatch {
        assert_eq!(pixels.len(), self.pixels.len());
        ImageBatch { pixels, ..self.clone() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.pixels.clone(), &[self.batch, 3, self.height, self.width])
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }
}

/// Per-level contrastive terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelReport {
    pub info_nce: f64,
    pub kl: f64,
    pub info_nce_enriched: f64,
    pub kl_enriched: f64,
    /// `0.5 * L_re(q) + 0.5 * L_re(q_e)`.
    pub ere: f64,
}

/// All loss terms of one training step. Disabled or skipped terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    /// Indexed by [`crate::config::Level::index`].
    pub levels: [LevelReport; 3],
    pub hierarchical: f64,
    pub f2s: f64,
    pub s2w: f64,
    pub rcl_total: f64,
    pub mim: f64,
    pub total: f64,
    /// False during queue warm-up, when only the reconstruction term trains.
    pub contrastive_active: bool,
}

impl LossReport {
    /// Tab-separated metrics line `step mim rcl f2s s2w total`.
    pub fn metrics_line(&self) -> String {
        format!(
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            self.step, self.mim, self.rcl_total, self.f2s, self.s2w, self.total
        )
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let names = ["frame", "subword", "word"];
        for (l, r) in self.levels.iter().enumerate() {
            for (what, v) in [
                ("info_nce", r.info_nce),
                ("kl", r.kl),
                ("info_nce_enriched", r.info_nce_enriched),
                ("kl_enriched", r.kl_enriched),
            ] {
                if !v.is_finite() {
                    return Some(format!("{}.{what}", names[l]));
                }
            }
        }
        [
            ("mim", self.mim),
            ("f2s", self.f2s),
            ("s2w", self.s2w),
            ("rcl_total", self.rcl_total),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n.to_string())
    }
}
