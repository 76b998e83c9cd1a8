use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Read-only block of samples shared by every worker of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    data: Arc<[f32]>,
    width: usize,
    len: usize,
}

impl SampleStore {
    /// `data` is row-major with `width` features per sample.
    pub fn new(data: Vec<f32>, width: usize) -> Self {
        assert!(width > 0, "sample width must be positive");
        assert_eq!(data.len() % width, 0, "data length must be a multiple of the width");
        Self {
            len: data.len() / width,
            data: data.into(),
            width,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>], width: usize) -> Self {
        Self::new(rows.concat(), width)
    }

    /// Uniform random samples in `[-1, 1)`, reproducible from `seed`.
    pub fn random(len: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..len * width).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self::new(data, width)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self, range: Range<usize>) -> &[f32] {
        &self.data[range.start * self.width..range.end * self.width]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.rows(i..i + 1)
    }
}

/// Combined ensemble output, one row of `width` values per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Predictions {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            data: vec![0.0; rows * width],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}
