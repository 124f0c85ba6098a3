//! Synthetic tiny-object dataset and its on-disk format.

mod io;
mod synth;

pub use io::{read_pgm, read_ppm, write_pgm, write_ppm, ANNOTATIONS_FILE};
pub use synth::{Image, SizeBucket, SynthConfig};

use std::path::Path;

use crate::error::Result;
use crate::head::Target;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cfg: SynthConfig,
    pub images: Vec<Image>,
    pub targets: Vec<Vec<Target>>,
}

impl Dataset {
    pub fn generate(cfg: &SynthConfig, n_images: usize) -> Result<Self> {
        synth::generate(cfg, n_images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        io::load(dir)
    }

    /// Stacks the selected images into an `(n, 3, h, w)` batch scaled to
    /// `[-1, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let e = self.cfg.extent;
        let mut data = Vec::with_capacity(indices.len() * 3 * e * e);
        for &i in indices {
            data.extend(self.images[i].to_planar());
        }
        Tensor::from_vec(Shape::new(indices.len(), 3, e, e), data).expect("images share the dataset extent")
    }

    pub fn batch_targets(&self, indices: &[usize]) -> Vec<Vec<Target>> {
        indices.iter().map(|&i| self.targets[i].clone()).collect()
    }

    /// Keeps the first `n` images.
    pub fn truncated(mut self, n: usize) -> Self {
        self.images.truncate(n);
        self.targets.truncate(n);
        self
    }
}
