use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Batch of per-pixel class maps, `B x K x H x W`, row-major, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMaps {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl BatchMaps {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != batch * channels * height * width {
            return Err(Error::ShapeMismatch {
                what: "batch maps",
                expected: format!("{batch}x{channels}x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.batch, self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, b: usize, k: usize, p: usize) -> usize {
        (b * self.channels + k) * self.pixels() + p
    }

    #[inline]
    pub fn get(&self, b: usize, k: usize, p: usize) -> f64 {
        self.data[self.index(b, k, p)]
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.channels * self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn same_shape(&self, other: &BatchMaps) -> bool {
        (self.batch, self.channels, self.height, self.width)
            == (other.batch, other.channels, other.height, other.width)
    }

    pub fn ensure_same_shape(&self, other: &BatchMaps, what: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                what,
                expected: format!(
                    "{}x{}x{}x{}",
                    self.batch, self.channels, self.height, self.width
                ),
                actual: format!(
                    "{}x{}x{}x{}",
                    other.batch, other.channels, other.height, other.width
                ),
            })
        }
    }

    /// Stacks per-sample `K x H x W` maps.
    pub fn stack(
        samples: &[&[f32]],
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(samples.len() * channels * height * width);
        for s in samples {
            data.extend(s.iter().map(|&v| v as f64));
        }
        Self::new(samples.len(), channels, height, width, data)
    }

    /// Per-pixel argmax over channels, `B x H x W`.
    pub fn argmax(&self) -> Vec<u8> {
        let hw = self.pixels();
        let mut out = vec![0u8; self.batch * hw];
        for b in 0..self.batch {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for k in 0..self.channels {
                    let v = self.get(b, k, p);
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[b * hw + p] = best as u8;
            }
        }
        out
    }
}
