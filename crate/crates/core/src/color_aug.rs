//! Image-level color augmentation.
//!
//! Channel replacement copies one color channel into all three, channel
//! swap permutes the channels, and the mix-up fuses an augmented image with
//! its original at equal weight. A luminance grayscale is provided for the
//! ablation rows, together with the pad-and-crop used during training and
//! 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Ir,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Ir => "ir",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" | "visible" => Ok(Modality::Rgb),
            "ir" | "nir" => Ok(Modality::Ir),
            other => Err(Error::invalid("Modality", format!("unknown modality `{other}`"))),
        }
    }
}

/// A 3-channel image in `[0, 1]` with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    /// `3 x H x W`.
    pub pixels: Tensor<f32>,
    pub modality: Modality,
    pub identity: usize,
    pub view: usize,
    pub clothing: usize,
}

impl Image {
    pub fn new(pixels: Tensor<f32>, modality: Modality, identity: usize, view: usize, clothing: usize) -> Result<Self> {
        let (n, c, _, _) = pixels.dims4()?;
        if n != 1 || c != 3 || pixels.ndim() != 3 {
            return Err(Error::shape("Image::new", format!("expected 3 x H x W, got {:?}", pixels.shape())));
        }
        Ok(Self { pixels, modality, identity, view, clothing })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    fn plane_len(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane_len();
        &self.pixels.data()[c * p..(c + 1) * p]
    }

    /// `(r, g, b)` at row `y`, column `x`.
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = y * self.width() + x;
        [self.channel(0)[i], self.channel(1)[i], self.channel(2)[i]]
    }

    fn with_pixels(&self, data: Vec<f32>) -> Image {
        Image {
            pixels: Tensor::new(self.pixels.shape().to_vec(), data).expect("same shape"),
            modality: self.modality,
            identity: self.identity,
            view: self.view,
            clothing: self.clothing,
        }
    }

    fn same_meta(&self, other: &Image) -> bool {
        self.modality == other.modality
            && self.identity == other.identity
            && self.view == other.view
            && self.clothing == other.clothing
    }
}

fn require_rgb(op: &'static str, img: &Image) -> Result<()> {
    if img.modality != Modality::Rgb {
        return Err(Error::invalid(op, "color augmentation is defined on RGB images only"));
    }
    Ok(())
}

/// Channel index: 0 = R, 1 = G, 2 = B.
pub const R: usize = 0;
pub const G: usize = 1;
pub const B: usize = 2;

/// Replace every channel with channel `c`.
pub fn channel_replace(img: &Image, c: usize) -> Result<Image> {
    require_rgb("channel_replace", img)?;
    if c > 2 {
        return Err(Error::invalid("channel_replace", format!("channel {c} out of range")));
    }
    let src = img.channel(c);
    let mut data = Vec::with_capacity(3 * src.len());
    for _ in 0..3 {
        data.extend_from_slice(src);
    }
    Ok(img.with_pixels(data))
}

/// A permutation of the three color channels; output channel `i` takes
/// input channel `self.0[i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelPerm([usize; 3]);

impl ChannelPerm {
    pub const IDENTITY: ChannelPerm = ChannelPerm([0, 1, 2]);

    pub fn new(order: [usize; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for &c in &order {
            if c > 2 || seen[c] {
                return Err(Error::invalid("ChannelPerm", format!("{order:?} is not a permutation of (R, G, B)")));
            }
            seen[c] = true;
        }
        Ok(Self(order))
    }

    pub fn order(self) -> [usize; 3] {
        self.0
    }

    /// All six permutations, identity first.
    pub fn all() -> [ChannelPerm; 6] {
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]].map(ChannelPerm)
    }

    /// The permutation equal to swapping by `self` and then by `next`.
    pub fn then(self, next: ChannelPerm) -> ChannelPerm {
        ChannelPerm(next.0.map(|i| self.0[i]))
    }
}

/// Reorder channels: output channel `i` = input channel `perm[i]`.
pub fn channel_swap(img: &Image, perm: ChannelPerm) -> Result<Image> {
    require_rgb("channel_swap", img)?;
    let mut data = Vec::with_capacity(img.pixels.numel());
    for &c in &perm.0 {
        data.extend_from_slice(img.channel(c));
    }
    Ok(img.with_pixels(data))
}

/// Equal-weight mix of an image and its augmented version.
pub fn ica_mix(original: &Image, augmented: &Image) -> Result<Image> {
    if original.pixels.shape() != augmented.pixels.shape() {
        return Err(Error::shape(
            "ica_mix",
            format!("{:?} vs {:?}", original.pixels.shape(), augmented.pixels.shape()),
        ));
    }
    if !original.same_meta(augmented) {
        return Err(Error::invalid("ica_mix", "original and augmented images carry different labels"));
    }
    let data = original.pixels.data().iter().zip(augmented.pixels.data()).map(|(&a, &b)| 0.5 * a + 0.5 * b).collect();
    Ok(original.with_pixels(data))
}

/// ITU-R BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Luminance `0.299 R + 0.587 G + 0.114 B` replicated to all channels.
pub fn grayscale(img: &Image) -> Result<Image> {
    require_rgb("grayscale", img)?;
    let y = luminance(img);
    let mut data = Vec::with_capacity(3 * y.len());
    for _ in 0..3 {
        data.extend_from_slice(&y);
    }
    Ok(img.with_pixels(data))
}

/// Per-pixel BT.601 luminance plane.
pub fn luminance(img: &Image) -> Vec<f32> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| (LUMA[0] * r + LUMA[1] * g + LUMA[2] * b).clamp(0.0, 1.0))
        .collect()
}

/// Which color transform a policy draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugVariant {
    CrOnly,
    CsOnly,
    GrayOnly,
    Ica,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub p_apply: f64,
    pub p_cr_given_apply: f64,
    pub rng_seed: u64,
    pub variant: AugVariant,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self { p_apply: 0.5, p_cr_given_apply: 0.5, rng_seed: 0, variant: AugVariant::Ica }
    }
}

impl AugPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_apply", self.p_apply), ("p_cr_given_apply", self.p_cr_given_apply)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid("AugPolicy", format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

/// The non-identity channel orders sampled by channel swap.
pub fn non_identity_perms() -> [ChannelPerm; 5] {
    let all = ChannelPerm::all();
    [all[1], all[2], all[3], all[4], all[5]]
}

/// Produce the augmented twin of `img` under `pol`. IR images pass through.
///
/// The ICA variant fires with probability `p_apply`; it then picks channel
/// replacement (uniform channel) with probability `p_cr_given_apply`, else a
/// uniform non-identity channel swap, and mixes the result with the original.
/// Single-transform variants fire with the same probability and are not mixed.
pub fn apply_policy<Rn: Rng + ?Sized>(img: &Image, pol: &AugPolicy, rng: &mut Rn) -> Result<Image> {
    if img.modality == Modality::Ir {
        return Ok(img.clone());
    }
    if !rng.random_bool(pol.p_apply.clamp(0.0, 1.0)) {
        return Ok(img.clone());
    }
    match pol.variant {
        AugVariant::CrOnly => channel_replace(img, rng.random_range(0..3)),
        AugVariant::CsOnly => channel_swap(img, non_identity_perms()[rng.random_range(0..5)]),
        AugVariant::GrayOnly => grayscale(img),
        AugVariant::Ica => {
            let aug = if rng.random_bool(pol.p_cr_given_apply.clamp(0.0, 1.0)) {
                channel_replace(img, rng.random_range(0..3))?
            } else {
                channel_swap(img, non_identity_perms()[rng.random_range(0..5)])?
            };
            ica_mix(img, &aug)
        }
    }
}

/// Zero-pad by `pad` on every side and crop back to `H x W` with the window's
/// top-left corner at `(top, left)` in padded coordinates.
pub fn crop_at(img: &Image, pad: usize, top: usize, left: usize) -> Result<Image> {
    if top > 2 * pad || left > 2 * pad {
        return Err(Error::invalid("crop_at", format!("offset ({top}, {left}) outside [0, {}]", 2 * pad)));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        let src = img.channel(c);
        for y in 0..h {
            let sy = (y + top) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + left) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    data[(c * h + y) * w + x] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(img.with_pixels(data))
}

/// Pad-then-crop at a uniformly random offset.
pub fn random_crop<Rn: Rng + ?Sized>(img: &Image, pad: usize, rng: &mut Rn) -> Result<Image> {
    if pad == 0 {
        return Ok(img.clone());
    }
    let top = rng.random_range(0..=2 * pad);
    let left = rng.random_range(0..=2 * pad);
    crop_at(img, pad, top, left)
}

/// Read an 8-bit RGB (or gray / RGBA) PNG into a `3 x H x W` tensor in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let img_err = |detail: String| Error::Image { path: path.to_path_buf(), detail };
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(img_err(format!("unsupported color type {other:?}"))),
    };
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..3 {
                let src = if stride < 3 { 0 } else { c };
                data[(c * h + y) * w + x] = row[x * stride + src] as f32 / 255.0;
            }
        }
    }
    Tensor::new([3, h, w], data)
}

/// Write a `3 x H x W` tensor as an 8-bit RGB PNG; values are clamped to
/// `[0, 1]` and rounded to the nearest level.
pub fn save_png(pixels: &Tensor<f32>, path: &Path) -> Result<()> {
    let [3, h, w] = *pixels.shape() else {
        return Err(Error::shape("save_png", format!("expected 3 x H x W, got {:?}", pixels.shape())));
    };
    let mut bytes = vec![0u8; 3 * h * w];
    let d = pixels.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes[(y * w + x) * 3 + c] = (d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let img_err = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), detail: e.to_string() };
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(&bytes).map_err(img_err)?;
    writer.finish().map_err(img_err)?;
    Ok(())
}
