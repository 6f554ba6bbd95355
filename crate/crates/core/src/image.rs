use diffyolo_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Declared value range of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`, used for dataset images.
    Unit,
    /// `[-1, 1]`, used inside the diffusion model.
    Symmetric,
}

/// `C x H x W` image with finite values and a declared range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, range: ValueRange) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(CoreError::Shape(format!("empty image {channels}x{height}x{width}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Invalid(format!("non-finite pixel at index {i}")));
        }
        let data = Tensor::new(vec![channels, height, width], data)?;
        Ok(Self { data, range })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, range: ValueRange) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width], range)
            .expect("finite fill value")
    }

    pub fn from_tensor(t: Tensor<f32>, range: ValueRange) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.into_data(), range),
            _ => Err(CoreError::Shape(format!("expected CxHxW, got {:?}", t.shape()))),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        self.data.data()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    /// Exact affine map between ranges: `[0,1] -> [-1,1]` is `2x - 1`.
    pub fn to_range(&self, range: ValueRange) -> ImageTensor {
        let data = match (self.range, range) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Unit, ValueRange::Symmetric) => self.data.map(|v| 2.0 * v - 1.0),
            (ValueRange::Symmetric, ValueRange::Unit) => self.data.map(|v| (v + 1.0) * 0.5),
            _ => unreachable!(),
        };
        ImageTensor { data, range }
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(CoreError::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ImageTensor) -> bool {
        self.range == other.range && self.data.bit_eq(&other.data)
    }
}
