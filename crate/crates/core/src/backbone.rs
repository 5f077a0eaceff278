//! Two-stream embedding network.
//!
//! The first conv block is stream-specific (one copy for RGB, one for IR);
//! every later block, the optional non-local block, the embedding
//! projection and the heads are shared. Features for the metric loss come
//! straight from the projection; the classifier sees them after a
//! batch-norm neck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::color_aug::Modality;
use crate::error::{Error, Result};
use crate::nn::{Bn, Conv, ConvBlock, Forward, Linear};
use crate::numerics::{ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of the four conv blocks.
    pub widths: [usize; 4],
    /// Strides of the four conv blocks.
    pub strides: [usize; 4],
    pub emb_dim: usize,
    /// Insert a non-local block after the second conv block.
    pub nonlocal: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 64], strides: [2, 2, 1, 2], emb_dim: 64, nonlocal: false }
    }
}

/// Embedded-Gaussian non-local block: `y = x + W_z * attention(theta, phi, g)`
/// with 1x1 projections to half the channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonLocal {
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub w_z: Conv,
}

impl NonLocal {
    /// `W_z` starts at zero so the block is initially the identity.
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::invalid("nonlocal_block", format!("channel count {channels} must be even")));
        }
        let half = channels / 2;
        let nl = Self {
            theta: Conv::init(store, &format!("{name}.theta"), channels, half, 1, 1, 1.0, rng)?,
            phi: Conv::init(store, &format!("{name}.phi"), channels, half, 1, 1, 1.0, rng)?,
            g: Conv::init(store, &format!("{name}.g"), channels, half, 1, 1, 1.0, rng)?,
            w_z: Conv::init(store, &format!("{name}.w_z"), half, channels, 1, 1, 1.0, rng)?,
        };
        store.value_mut(nl.w_z.weight).fill(T::zero());
        Ok(nl)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let t = self.theta.forward(f, x)?;
        let p = self.phi.forward(f, x)?;
        let g = self.g.forward(f, x)?;
        let a = f.tape.attention(t, p, g)?;
        let z = self.w_z.forward(f, a)?;
        f.tape.add(x, z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub num_classes: usize,
    pub shallow_rgb: ConvBlock,
    pub shallow_ir: Option<ConvBlock>,
    pub shared_blocks: Vec<ConvBlock>,
    pub nonlocal: Option<NonLocal>,
    pub embed_proj: Linear,
    pub bnneck: Bn,
    pub classifier: Linear,
}

impl BackboneParams {
    /// Register parameters under `backbone.*` and `classifier.*`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        num_classes: usize,
        with_ir: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("backbone", "need at least two identities"));
        }
        let w = config.widths;
        let s = config.strides;
        let shallow_rgb = ConvBlock::init(store, "backbone.shallow_rgb", 3, w[0], s[0], rng)?;
        let shallow_ir =
            if with_ir { Some(ConvBlock::init(store, "backbone.shallow_ir", 3, w[0], s[0], rng)?) } else { None };
        let mut shared_blocks = Vec::with_capacity(3);
        for i in 1..4 {
            shared_blocks.push(ConvBlock::init(store, &format!("backbone.block{}", i + 1), w[i - 1], w[i], s[i], rng)?);
        }
        let nonlocal = if config.nonlocal { Some(NonLocal::init(store, "backbone.nonlocal", w[1], rng)?) } else { None };
        let embed_proj = Linear::init(store, "backbone.embed", w[3], config.emb_dim, 1.0, rng)?;
        let bnneck = Bn::init(store, "backbone.bnneck", config.emb_dim)?;
        let classifier = Linear::init(store, "classifier", config.emb_dim, num_classes, 1.0, rng)?;
        Ok(Self { config: config.clone(), num_classes, shallow_rgb, shallow_ir, shared_blocks, nonlocal, embed_proj, bnneck, classifier })
    }

    fn shallow(&self, stream: Modality) -> Result<ConvBlock> {
        match stream {
            Modality::Rgb => Ok(self.shallow_rgb),
            Modality::Ir => {
                self.shallow_ir.ok_or_else(|| Error::invalid("embed", "IR stream requested but the backbone is single-stream"))
            }
        }
    }

    /// `N x 3 x H x W` images of one stream to `(features N x D, logits N x K)`.
    pub fn embed<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, stream: Modality) -> Result<(Var, Var)> {
        self.embed_streams(f, &[(x, stream)])
    }

    /// Several stream batches at once: each goes through its own shallow
    /// block, then the rows are stacked in order and share the rest of the
    /// network (and its batch statistics).
    pub fn embed_streams<T: Scalar>(&self, f: &mut Forward<'_, T>, inputs: &[(Var, Modality)]) -> Result<(Var, Var)> {
        let h = self.feature_map_streams(f, inputs)?;
        let pooled = f.tape.global_avg_pool(h)?;
        let feats = self.embed_proj.forward(f, pooled)?;
        let neck = self.bnneck.forward(f, feats)?;
        let logits = self.classifier.forward(f, neck)?;
        Ok((feats, logits))
    }

    /// Conv trunk only, up to (not including) pooling.
    pub fn feature_map<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, stream: Modality) -> Result<Var> {
        self.feature_map_streams(f, &[(x, stream)])
    }

    fn feature_map_streams<T: Scalar>(&self, f: &mut Forward<'_, T>, inputs: &[(Var, Modality)]) -> Result<Var> {
        let mut heads = Vec::with_capacity(inputs.len());
        for &(x, stream) in inputs {
            if f.tape.value(x).dims4()?.0 == 0 {
                return Err(Error::invalid("embed", "empty batch"));
            }
            heads.push(self.shallow(stream)?.forward(f, x)?);
        }
        let mut h = match heads.len() {
            0 => return Err(Error::invalid("embed", "empty batch")),
            1 => heads[0],
            _ => f.tape.concat(&heads)?,
        };
        for (i, block) in self.shared_blocks.iter().enumerate() {
            h = block.forward(f, h)?;
            if i == 0 {
                if let Some(nl) = &self.nonlocal {
                    h = nl.forward(f, h)?;
                }
            }
        }
        Ok(h)
    }
}
