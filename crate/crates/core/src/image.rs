//! Dense real-valued grids: multi-channel input images and per-pixel feature
//! maps. Values are stored pixel-interleaved (`[n][m][c]`) so that the
//! per-pixel backbone reads one contiguous channel vector per pixel.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A `C x N x M` input image.
pub type Image = Grid;

/// The backbone output: a `D x N x M` grid of pixel embeddings.
pub type FeatureGrid = Grid;

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "grid {channels}x{height}x{width} has an empty dimension"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Builds a grid from channel-planar (`[c][n][m]`) values.
    pub fn from_planar(channels: usize, height: usize, width: usize, planar: &[f64]) -> Result<Self> {
        let mut g = Self::new(channels, height, width, vec![0.0; planar.len()])?;
        for c in 0..channels {
            for p in 0..height * width {
                g.data[p * channels + c] = planar[c * height * width + p];
            }
        }
        Ok(g)
    }

    /// Channel-planar (`[c][n][m]`) copy of the values.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, n: usize, m: usize) -> &[f64] {
        let start = (n * self.width + m) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, n: usize, m: usize) -> &mut [f64] {
        let start = (n * self.width + m) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_round_trip() {
        let planar: Vec<f64> = (0..24).map(f64::from).collect();
        let g = Grid::from_planar(2, 3, 4, &planar).unwrap();
        assert_eq!(g.pixel(0, 1), &[1.0, 13.0]);
        assert_eq!(g.to_planar(), planar);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Grid::new(0, 1, 1, vec![]).is_err());
        assert!(Grid::new(1, 2, 2, vec![0.0; 3]).is_err());
    }
}
