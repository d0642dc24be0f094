//! Images and the strided convolutional pyramid encoder.

use fan_autograd::{BoundParams, Graph, ParamGroup, Tensor, TensorError, Var};

use crate::error::{FanError, Result};
use crate::nn::{ConvBlock, ParamBuilder};

/// Spatial dims must be multiples of the coarsest stride.
pub const STRIDE_DIVISOR: usize = 32;

/// RGB image `[H × W × 3]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(FanError::Data(format!("image tensor must be [H, W, 3], got {s:?}")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FanError::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != height * width * 3 {
            return Err(FanError::Data(format!("expected {} RGB bytes, got {}", height * width * 3, rgb.len())));
        }
        let data = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(Tensor::new(vec![height, width, 3], data)?)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.data().iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn check_divisible(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if h % STRIDE_DIVISOR != 0 || w % STRIDE_DIVISOR != 0 {
            return Err(TensorError::invalid(
                "encode_image",
                format!("image {h}×{w} must have both dims divisible by {STRIDE_DIVISOR}"),
            )
            .into());
        }
        Ok(())
    }
}

/// Feature maps `f_v^2..f_v^5` at strides 4, 8, 16, 32.
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub levels: [Var; 4],
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub stem: [ConvBlock; 3],
    pub stages: [ConvBlock; 3],
}

impl VisionEncoder {
    pub fn new(pb: &mut ParamBuilder, stem_channels: usize, channels: [usize; 4], eps: f64) -> Result<Self> {
        let mut s = pb.scope("vision").with_group(ParamGroup::Backbone);
        let stem = [
            ConvBlock::new(&mut s, "stem0", 3, stem_channels, 2, eps)?,
            ConvBlock::new(&mut s, "stem1", stem_channels, channels[0], 2, eps)?,
            ConvBlock::new(&mut s, "stem2", channels[0], channels[0], 1, eps)?,
        ];
        let stages = [
            ConvBlock::new(&mut s, "stage3", channels[0], channels[1], 2, eps)?,
            ConvBlock::new(&mut s, "stage4", channels[1], channels[2], 2, eps)?,
            ConvBlock::new(&mut s, "stage5", channels[2], channels[3], 2, eps)?,
        ];
        Ok(Self { stem, stages })
    }

    pub fn encode(&self, g: &mut Graph, p: &BoundParams, image: &Image) -> Result<PyramidFeatures> {
        image.check_divisible()?;
        let mut x = g.constant(image.pixels().clone());
        for block in &self.stem {
            x = block.forward(g, p, x)?;
        }
        let mut levels = [x; 4];
        for (i, block) in self.stages.iter().enumerate() {
            x = block.forward(g, p, x)?;
            levels[i + 1] = x;
        }
        Ok(PyramidFeatures { levels })
    }
}
