//! Pixel operations and the stochastic pseudo-query augmentation pipeline.
//!
//! Images are channels-first `f64` arrays in `[0, 1]`. The pipeline applies,
//! in this fixed order, gamma correction, random erasing, channel shuffle,
//! flip and rotation, each with its own Bernoulli probability. Exactly one
//! Bernoulli draw is consumed per operation per image, followed by that
//! operation's parameter draws when it fires.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channels-first image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("image extents must be positive, got {channels}x{height}x{width}")));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} pixels, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
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

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[self.idx(c, y, x)]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[c * n..(c + 1) * n]
    }

    fn remap(&self, height: usize, width: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for c in 0..self.channels {
            for y in 0..height {
                for x in 0..width {
                    let (sy, sx) = src(y, x);
                    pixels.push(self.get(c, sy, sx));
                }
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            pixels,
        }
    }
}

/// Seedable random stream: a ChaCha8 generator keyed by `(seed, stream)`.
///
/// Distinct stream indices select independent ChaCha streams under the same
/// key, so per-item streams can be handed to parallel workers.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derives an independent stream keyed by the next draw of this one.
    pub fn fork(&mut self, stream: u64) -> RngStream {
        let seed = self.rng.next_u64();
        RngStream::new(seed, stream)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_gamma: f64,
    pub p_erase: f64,
    pub p_shuffle: f64,
    pub p_flip: f64,
    pub p_rotate: f64,
    pub gamma_range: (f64, f64),
    pub rotation_choices: Vec<u32>,
    /// Fraction of each image dimension covered by the erased block.
    pub erase_fraction_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_gamma: 0.3,
            p_erase: 0.5,
            p_shuffle: 0.3,
            p_flip: 0.5,
            p_rotate: 0.5,
            gamma_range: (1.0, 1.5),
            rotation_choices: vec![90, 180, 270],
            erase_fraction_range: (0.2, 0.5),
        }
    }
}

impl AugmentationConfig {
    /// Every operation disabled.
    pub fn identity() -> Self {
        Self {
            p_gamma: 0.0,
            p_erase: 0.0,
            p_shuffle: 0.0,
            p_flip: 0.0,
            p_rotate: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_gamma", self.p_gamma),
            ("p_erase", self.p_erase),
            ("p_shuffle", self.p_shuffle),
            ("p_flip", self.p_flip),
            ("p_rotate", self.p_rotate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.gamma_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Parameter(format!("bad gamma range [{lo}, {hi}]")));
        }
        let (lo, hi) = self.erase_fraction_range;
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return Err(Error::Parameter(format!("bad erase fraction range [{lo}, {hi}]")));
        }
        if self.rotation_choices.is_empty() || self.rotation_choices.iter().any(|d| ![90, 180, 270].contains(d)) {
            return Err(Error::Parameter(format!("rotation choices {:?} must be drawn from 90/180/270", self.rotation_choices)));
        }
        Ok(())
    }
}

/// `pixel^gamma` for every pixel.
pub fn gamma_correct(img: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) {
        return Err(Error::Parameter(format!("gamma must be > 0, got {gamma}")));
    }
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|p| *p = p.powf(gamma).clamp(0.0, 1.0));
    Ok(out)
}

/// Output channel `c` is input channel `perm[c]`.
pub fn channel_shuffle(img: &Image, perm: &[usize]) -> Result<Image> {
    let mut seen = vec![false; img.channels];
    if perm.len() != img.channels {
        return Err(Error::Parameter(format!("permutation {perm:?} does not cover {} channels", img.channels)));
    }
    for &p in perm {
        if p >= img.channels || seen[p] {
            return Err(Error::Parameter(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    let pixels = perm.iter().flat_map(|&p| img.plane(p).iter().copied()).collect();
    Ok(Image { pixels, ..img.clone() })
}

pub fn flip(img: &Image, axis: FlipAxis) -> Image {
    let (h, w) = (img.height, img.width);
    match axis {
        FlipAxis::Horizontal => img.remap(h, w, |y, x| (y, w - 1 - x)),
        FlipAxis::Vertical => img.remap(h, w, |y, x| (h - 1 - y, x)),
    }
}

/// Lossless counter-clockwise rotation by 90, 180 or 270 degrees.
pub fn rotate(img: &Image, degrees: u32) -> Result<Image> {
    let (h, w) = (img.height, img.width);
    match degrees {
        180 => Ok(img.remap(h, w, |y, x| (h - 1 - y, w - 1 - x))),
        90 | 270 if h != w => Err(Error::Shape(format!("{degrees} degree rotation needs a square image, got {h}x{w}"))),
        90 => Ok(img.remap(h, w, |y, x| (x, w - 1 - y))),
        270 => Ok(img.remap(h, w, |y, x| (h - 1 - x, y))),
        _ => Err(Error::Parameter(format!("rotation must be 90, 180 or 270 degrees, got {degrees}"))),
    }
}

/// Axis-aligned block of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EraseBlock {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Replaces every pixel of `block` with that block's per-channel mean.
pub fn erase_block(img: &Image, block: EraseBlock) -> Result<Image> {
    if block.height == 0 || block.width == 0 || block.top + block.height > img.height || block.left + block.width > img.width {
        return Err(Error::Parameter(format!("block {block:?} does not fit a {}x{} image", img.height, img.width)));
    }
    let mut out = img.clone();
    let area = (block.height * block.width) as f64;
    for c in 0..img.channels {
        // accumulate offsets from the first pixel so constant blocks stay exact
        let base = img.get(c, block.top, block.left);
        let mut offset = 0.0;
        for y in block.top..block.top + block.height {
            for x in block.left..block.left + block.width {
                offset += img.get(c, y, x) - base;
            }
        }
        let mean = (base + offset / area).clamp(0.0, 1.0);
        for y in block.top..block.top + block.height {
            for x in block.left..block.left + block.width {
                let i = out.idx(c, y, x);
                out.pixels[i] = mean;
            }
        }
    }
    Ok(out)
}

/// Draws a block whose sides are uniform fractions of the image sides and
/// whose position is uniform over valid placements.
pub fn sample_erase_block(height: usize, width: usize, rng: &mut impl Rng, cfg: &AugmentationConfig) -> EraseBlock {
    let (lo, hi) = cfg.erase_fraction_range;
    let side = |extent: usize, f: f64| ((f * extent as f64).round() as usize).clamp(1, extent);
    let bh = side(height, rng.gen_range(lo..=hi));
    let bw = side(width, rng.gen_range(lo..=hi));
    let top = rng.gen_range(0..=height - bh);
    let left = rng.gen_range(0..=width - bw);
    EraseBlock {
        top,
        left,
        height: bh,
        width: bw,
    }
}

pub fn random_erase(img: &Image, rng: &mut impl Rng, cfg: &AugmentationConfig) -> Image {
    let block = sample_erase_block(img.height, img.width, rng, cfg);
    erase_block(img, block).expect("sampled block fits")
}

/// Which operations fired, and with which parameters, for one `augment` call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentTrace {
    pub gamma: Option<f64>,
    pub erase: Option<EraseBlock>,
    pub shuffle: Option<Vec<usize>>,
    pub flip: Option<FlipAxis>,
    pub rotate: Option<u32>,
}

impl AugmentTrace {
    pub fn applied(&self) -> [bool; 5] {
        [
            self.gamma.is_some(),
            self.erase.is_some(),
            self.shuffle.is_some(),
            self.flip.is_some(),
            self.rotate.is_some(),
        ]
    }
}

pub fn augment(img: &Image, rng: &mut impl Rng, cfg: &AugmentationConfig) -> Result<Image> {
    augment_traced(img, rng, cfg).map(|(img, _)| img)
}

/// Like [`augment`], also reporting which operations fired.
///
/// Fails only for a non-square image that draws a quarter-turn rotation.
pub fn augment_traced(img: &Image, rng: &mut impl Rng, cfg: &AugmentationConfig) -> Result<(Image, AugmentTrace)> {
    let mut trace = AugmentTrace::default();
    let mut out = img.clone();

    if rng.gen_bool(cfg.p_gamma) {
        let (lo, hi) = cfg.gamma_range;
        let gamma = rng.gen_range(lo..=hi);
        out = gamma_correct(&out, gamma)?;
        trace.gamma = Some(gamma);
    }
    if rng.gen_bool(cfg.p_erase) {
        let block = sample_erase_block(out.height, out.width, rng, cfg);
        out = erase_block(&out, block)?;
        trace.erase = Some(block);
    }
    if rng.gen_bool(cfg.p_shuffle) {
        let mut perm: Vec<usize> = (0..out.channels).collect();
        perm.shuffle(rng);
        out = channel_shuffle(&out, &perm)?;
        trace.shuffle = Some(perm);
    }
    if rng.gen_bool(cfg.p_flip) {
        let axis = if rng.gen_bool(0.5) { FlipAxis::Horizontal } else { FlipAxis::Vertical };
        out = flip(&out, axis);
        trace.flip = Some(axis);
    }
    if rng.gen_bool(cfg.p_rotate) {
        let degrees = *cfg.rotation_choices.choose(rng).expect("validated rotation choices");
        out = rotate(&out, degrees)?;
        trace.rotate = Some(degrees);
    }
    Ok((out, trace))
}
