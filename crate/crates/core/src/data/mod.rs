//! Samples, images, manifests, synthetic paired-modality fingerprints,
//! preprocessing and P-K batching.

mod batch;
mod manifest;
mod preprocess;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use batch::{identity_labels, make_batch, Batch, BatchConfig};
pub use manifest::{load_manifest, manifest_csv, parse_manifest, MANIFEST_HEADER};
pub use preprocess::{preprocess, resize_bilinear, Preprocessed};
pub use synth::{
    michelson_contrast, render_fingerprint, synth_corpus, synth_identity, IdentityParams, SynthConfig, SynthCorpus,
};

/// Grayscale image, row-major, intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Config(format!(
                "{} pixels do not fill a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    /// Reads an 8-bit (or wider) grayscale-convertible image and scales it to `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    /// 8-bit quantized pixels, clamped to `[0, 1]` first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Encodes as an 8-bit grayscale PNG.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: PathBuf::from("<memory>"),
                source,
            })?;
        Ok(out.into_inner())
    }

    /// Round-trip through 8-bit quantization, as if saved and reloaded.
    pub fn quantized(&self) -> Self {
        let pixels = self.to_u8().into_iter().map(|v| f32::from(v) / 255.0).collect();
        Self {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Cl,
    Cb,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Cl => "CL",
            Modality::Cb => "CB",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "CL" => Ok(Modality::Cl),
            "CB" => Ok(Modality::Cb),
            other => Err(format!("modality must be CL or CB, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be train or test, got {other:?}")),
        }
    }
}

/// Clockwise rotation by a multiple of 90°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Rotation(u8);

impl Rotation {
    pub const NONE: Rotation = Rotation(0);

    pub fn quarter_turns(turns: u32) -> Self {
        Rotation((turns % 4) as u8)
    }

    pub fn degrees(self) -> u32 {
        u32::from(self.0) * 90
    }

    pub fn turns(self) -> u32 {
        u32::from(self.0)
    }
}

impl FromStr for Rotation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "" | "0" => Ok(Rotation(0)),
            "90" => Ok(Rotation(1)),
            "180" => Ok(Rotation(2)),
            "270" => Ok(Rotation(3)),
            other => Err(format!("rotation must be 0, 90, 180 or 270, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub subject_id: String,
    pub finger_id: String,
    pub modality: Modality,
    pub split: Split,
    pub rotation: Rotation,
}

impl Sample {
    /// Identity key: subject plus finger.
    pub fn identity(&self) -> (&str, &str) {
        (&self.subject_id, &self.finger_id)
    }
}

/// Samples with their preprocessed images, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub images: Vec<Image>,
}

impl Dataset {
    /// Preprocesses in-memory images to `target` (rows, cols).
    pub fn from_images(samples: Vec<Sample>, images: &[Image], target: (usize, usize)) -> Result<Self> {
        if samples.len() != images.len() {
            return Err(Error::Config(format!(
                "{} samples but {} images",
                samples.len(),
                images.len()
            )));
        }
        let images = samples
            .par_iter()
            .zip(images)
            .map(|(s, img)| preprocess(img, target, s.rotation).map(|p| p.image))
            .collect::<Result<_>>()?;
        Ok(Self { samples, images })
    }

    /// Reads and preprocesses every sample's image file.
    pub fn load(samples: Vec<Sample>, target: (usize, usize)) -> Result<Self> {
        let images = samples
            .par_iter()
            .map(|s| {
                let img = Image::load(&s.image_path)?;
                preprocess(&img, target, s.rotation).map(|p| p.image)
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples, images })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The samples of one split, in their original order.
    pub fn split(&self, split: Split) -> Self {
        let (samples, images) = self
            .samples
            .iter()
            .zip(&self.images)
            .filter(|(s, _)| s.split == split)
            .map(|(s, i)| (s.clone(), i.clone()))
            .unzip();
        Self { samples, images }
    }

    pub fn labels(&self) -> Vec<usize> {
        identity_labels(&self.samples)
    }

    /// Indices of the samples of one modality.
    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.samples[i].modality == modality)
            .collect()
    }
}
