//! Pixel-level color transformation.
//!
//! Every pixel goes through `c_x(relu(bn(c_in(x))))`, where `c_in` and `bn`
//! belong to the input's stream (RGB or IR) and `c_x` is one 1x1 convolution
//! shared by both streams. The hidden width `M` is the number of
//! intermediate channels; the output always has three channels so it can be
//! viewed as an image and fed to any backbone.

use rand::Rng;

use crate::color_aug::Modality;
use crate::error::{Error, Result};
use crate::nn::{Bn, Conv, Forward};
use crate::numerics::{ParamStore, Scalar, Tensor, Var};

pub const DEFAULT_HIDDEN: usize = 8;

/// Handles to the transform's parameters inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PctParams {
    pub hidden: usize,
    pub c_in_rgb: Conv,
    pub bn_rgb: Bn,
    /// Absent when only the RGB stream exists (cloth-change regime).
    pub c_in_ir: Option<Conv>,
    pub bn_ir: Option<Bn>,
    pub c_x: Conv,
}

impl PctParams {
    /// Register parameters under `pct.*`. Conv weights are uniform in
    /// `(-sqrt(1/fan_in), sqrt(1/fan_in))`, biases zero, BN `gamma = 1`,
    /// `beta = 0`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, hidden: usize, with_ir: bool, rng: &mut R) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("pct_init", "hidden width must be at least 1"));
        }
        let c_in_rgb = Conv::init(store, "pct.c_in_rgb", 3, hidden, 1, 1, 1.0, rng)?;
        let bn_rgb = Bn::init(store, "pct.bn_rgb", hidden)?;
        let (c_in_ir, bn_ir) = if with_ir {
            (Some(Conv::init(store, "pct.c_in_ir", 3, hidden, 1, 1, 1.0, rng)?), Some(Bn::init(store, "pct.bn_ir", hidden)?))
        } else {
            (None, None)
        };
        let c_x = Conv::init(store, "pct.c_x", hidden, 3, 1, 1, 1.0, rng)?;
        Ok(Self { hidden, c_in_rgb, bn_rgb, c_in_ir, bn_ir, c_x })
    }

    fn stream(&self, stream: Modality) -> Result<(Conv, Bn)> {
        match stream {
            Modality::Rgb => Ok((self.c_in_rgb, self.bn_rgb)),
            Modality::Ir => match (self.c_in_ir, self.bn_ir) {
                (Some(c), Some(b)) => Ok((c, b)),
                _ => Err(Error::invalid("pct_forward", "IR stream requested but this transform has no IR stream (cloth-change mode)")),
            },
        }
    }

    /// Transform `N x 3 x H x W` images of one stream.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, stream: Modality) -> Result<Var> {
        let (c_in, bn) = self.stream(stream)?;
        let h = c_in.forward(f, x)?;
        let h = bn.forward(f, h)?;
        let h = f.tape.relu(h)?;
        self.c_x.forward(f, h)
    }
}

/// Rescale one `3 x H x W` image to `[0, 1]` by its own min and max, for
/// viewing transformed images. Constant images map to 0.5.
pub fn visualize(img: &Tensor<f32>) -> Tensor<f32> {
    let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= f32::EPSILON {
        return Tensor::full(img.shape().to_vec(), 0.5);
    }
    img.map(|v| (v - lo) / (hi - lo))
}
