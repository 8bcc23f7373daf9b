//! Image ingestion: PPM decode, normalization into [-1, 1], and the policy
//! for inputs whose extents are not exact multiples of the encoder size.

use std::path::Path;

use dualview_core::geometry::{GridSpec, ImageTensor};

use crate::{ppm, Result};

/// What to do when the loaded image is not an exact multiple of the encoder
/// resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizePolicy {
    /// Fail, naming the nearest valid sizes.
    Reject,
    /// Nearest-neighbor resample to the nearest valid size.
    Nearest,
    /// Bilinear resample to the nearest valid size.
    Bilinear,
}

/// Nearest exact multiple of `enc` (at least one tile).
fn nearest_multiple(dim: usize, enc: usize) -> usize {
    let k = (dim as f64 / enc as f64).round() as usize;
    k.max(1) * enc
}

/// Center-aligned nearest-neighbor resample.
pub fn resize_nearest(img: &ImageTensor, out_w: usize, out_h: usize) -> ImageTensor {
    let c = img.channels();
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * img.height() as f64 / out_h as f64) as usize)
            .min(img.height() - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * img.width() as f64 / out_w as f64) as usize)
                .min(img.width() - 1);
            for ch in 0..c {
                data.push(img.at(sx, sy, ch));
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data).expect("resized image shape")
}

/// Center-aligned bilinear resample with edge clamping.
pub fn resize_bilinear(img: &ImageTensor, out_w: usize, out_h: usize) -> ImageTensor {
    let c = img.channels();
    let pos = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let p = (i as f64 + 0.5) * src as f64 / out as f64 - 0.5;
        let clamped = p.clamp(0.0, (src - 1) as f64);
        let lo = clamped.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, clamped - lo as f64)
    };
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let (y0, y1, fy) = pos(y, out_h, img.height());
        for x in 0..out_w {
            let (x0, x1, fx) = pos(x, out_w, img.width());
            for ch in 0..c {
                let top = img.at(x0, y0, ch) * (1.0 - fx) + img.at(x1, y0, ch) * fx;
                let bottom = img.at(x0, y1, ch) * (1.0 - fx) + img.at(x1, y1, ch) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data).expect("resized image shape")
}

/// Map 8-bit pixels into [-1, 1] via `(v/255 - 0.5) / 0.5`.
pub fn normalize(width: usize, height: usize, rgb: &[u8]) -> ImageTensor {
    let data = rgb
        .iter()
        .map(|&v| (v as f64 / 255.0 - 0.5) / 0.5)
        .collect();
    ImageTensor::new(height, width, 3, data).expect("normalized image shape")
}

/// Decode a P6 file, normalize, and reconcile the extents with the encoder
/// size under the given policy.
pub fn load_image(
    path: &Path,
    policy: ResizePolicy,
    enc_w: usize,
    enc_h: usize,
) -> Result<ImageTensor> {
    let (width, height, rgb) = ppm::read(path)?;
    let img = normalize(width, height, &rgb);
    let (want_w, want_h) = (nearest_multiple(width, enc_w), nearest_multiple(height, enc_h));
    if (width, height) == (want_w, want_h) {
        return Ok(img);
    }
    match policy {
        ResizePolicy::Reject => {
            // GridSpec::new produces the error that names the nearest valid
            // sizes (or TooSmall when the image cannot hold a single tile).
            let err = GridSpec::new(width, height, enc_w, enc_h)
                .err()
                .expect("non-multiple extents cannot form a grid");
            Err(err.into())
        }
        ResizePolicy::Nearest => Ok(resize_nearest(&img, want_w, want_h)),
        ResizePolicy::Bilinear => Ok(resize_bilinear(&img, want_w, want_h)),
    }
}
