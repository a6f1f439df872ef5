use super::{Image, Rotation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: Image,
    /// The input had zero dynamic range and was replaced by zeros.
    pub constant: bool,
}

fn rotate(image: &Image, rotation: Rotation) -> Image {
    let (h, w) = (image.height(), image.width());
    match rotation.turns() {
        0 => image.clone(),
        1 => Image::from_fn(w, h, |r, c| image.get(h - 1 - c, r)),
        2 => Image::from_fn(h, w, |r, c| image.get(h - 1 - r, w - 1 - c)),
        _ => Image::from_fn(w, h, |r, c| image.get(c, w - 1 - r)),
    }
}

/// Align-corners bilinear resampling; same-size input is returned unchanged.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    if (h, w) == (height, width) {
        return image.clone();
    }
    let coord = |dst: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        if out <= 1 || inp <= 1 {
            return (0, 0, 0.0);
        }
        let x = dst as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let lo = (x.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, (x - lo as f64) as f32)
    };
    Image::from_fn(height, width, |r, c| {
        let (r0, r1, fr) = coord(r, height, h);
        let (c0, c1, fc) = coord(c, width, w);
        let top = image.get(r0, c0) * (1.0 - fc) + image.get(r0, c1) * fc;
        let bottom = image.get(r1, c0) * (1.0 - fc) + image.get(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Rotation, bilinear resize to `target` (rows, cols), then min-max normalization.
pub fn preprocess(image: &Image, target: (usize, usize), rotation: Rotation) -> Result<Preprocessed> {
    if image.is_empty() {
        return Err(Error::EmptyInput("preprocess"));
    }
    let resized = resize_bilinear(&rotate(image, rotation), target.0, target.1);
    let (lo, hi) = resized
        .pixels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi - lo > 0.0) {
        return Ok(Preprocessed {
            image: Image::from_fn(target.0, target.1, |_, _| 0.0),
            constant: true,
        });
    }
    let range = hi - lo;
    let pixels = resized.pixels().iter().map(|&v| (v - lo) / range).collect();
    Ok(Preprocessed {
        image: Image::new(target.0, target.1, pixels)?,
        constant: false,
    })
}
