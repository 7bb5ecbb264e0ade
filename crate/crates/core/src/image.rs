//! Raster containers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// 8-bit RGB image stored channel-planar (all R, then all G, then all B),
/// row-major within each plane. This is the CIFAR-10 record layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Validation(format!(
                "image data has {} bytes, expected {}",
                data.len(),
                height * width * Self::CHANNELS
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0u8; plane * 3];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Self { height, width, data }
    }

    /// Quantizes `[0,1]` planar floats (same layout as `data`) with rounding
    /// and clamping.
    pub fn from_unit_planes(height: usize, width: usize, planes: &[f64]) -> Result<Self> {
        let data = planes
            .iter()
            .map(|&v| {
                let v = if v.is_nan() { 0.0 } else { v };
                libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
            })
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    /// Intensities scaled to `[0,1]`, same planar layout.
    pub fn to_unit_planes(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v) / 255.0).collect()
    }
}

/// Single-channel real-valued plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayPlane {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl GrayPlane {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Validation(format!(
                "plane has {} values, expected {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("plane contains non-finite values".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// 2x2 block-mean downsample; an odd trailing row or column is dropped.
    pub fn downsample2(&self) -> GrayPlane {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut values = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x)
                    + self.at(2 * y, 2 * x + 1)
                    + self.at(2 * y + 1, 2 * x)
                    + self.at(2 * y + 1, 2 * x + 1);
                values.push(s * 0.25);
            }
        }
        GrayPlane { height: h, width: w, values }
    }
}

/// One dataset record. `id` is the dense index of the sample in its dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: RgbImage,
    pub clean_label: Option<u8>,
    pub quality_score: Option<f64>,
}

impl Sample {
    pub fn new(id: usize, image: RgbImage, clean_label: Option<u8>) -> Self {
        Self { id, image, clean_label, quality_score: None }
    }
}

/// Checks that ids are `0..n` in order and that labels are below `classes`.
pub fn validate_dataset(samples: &[Sample], classes: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.id != i {
            return Err(Error::Validation(format!("sample at position {i} has id {}", s.id)));
        }
        if let Some(l) = s.clean_label {
            if usize::from(l) >= classes {
                return Err(Error::Validation(format!(
                    "sample {i} has label {l} outside [0, {classes})"
                )));
            }
        }
    }
    Ok(())
}

/// Clean labels of every sample, failing on the first sample without one.
pub fn clean_labels(samples: &[Sample]) -> Result<Vec<u8>> {
    samples
        .iter()
        .map(|s| {
            s.clean_label
                .ok_or_else(|| Error::Validation(format!("sample {} has no clean label", s.id)))
        })
        .collect()
}
