//! A minimal CHW image tensor with f32 pixels.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("expected a 3-channel image, got {0} channels")]
    NotThreeChannel(usize),
    #[error("data length {len} does not match shape ({c}, {h}, {w})")]
    ShapeMismatch { len: usize, c: usize, h: usize, w: usize },
    #[error("image dimensions must be nonzero")]
    EmptyImage,
}

/// Channel-major (C, H, W) pixel buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ImageError::EmptyImage);
        }
        if data.len() != channels * height * width {
            return Err(ImageError::ShapeMismatch {
                len: data.len(),
                c: channels,
                h: height,
                w: width,
            });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Mean pixel value of each channel.
    pub fn per_channel_mean(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..self.channels)
            .map(|c| {
                let slice = &self.data[c * plane..(c + 1) * plane];
                (slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32
            })
            .collect()
    }
}
