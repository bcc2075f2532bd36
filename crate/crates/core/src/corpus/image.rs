//! Grayscale pixel grids, their inline text encoding, and the geometric
//! transforms used for training-time augmentation.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::Rng;

use crate::autograd::Mat;
use crate::error::{RecapError, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

const GRID_PREFIX: &str = "grid:";

impl PixelGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(RecapError::Shape(format!(
                "pixel buffer of {} bytes for a {height}x{width} grid",
                pixels.len()
            )));
        }
        Ok(PixelGrid {
            height,
            width,
            pixels,
        })
    }

    /// `grid:<H>x<W>:<base64 of H·W bytes>`
    pub fn to_inline(&self) -> String {
        format!(
            "{GRID_PREFIX}{}x{}:{}",
            self.height,
            self.width,
            STANDARD.encode(&self.pixels)
        )
    }

    pub fn is_inline(s: &str) -> bool {
        s.starts_with(GRID_PREFIX)
    }

    pub fn from_inline(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix(GRID_PREFIX)
            .ok_or_else(|| RecapError::Validation("inline grid must start with 'grid:'".into()))?;
        let (dims, data) = body
            .split_once(':')
            .ok_or_else(|| RecapError::Validation("inline grid lacks ':' before data".into()))?;
        let (h, w) = dims
            .split_once('x')
            .ok_or_else(|| RecapError::Validation(format!("bad grid dimensions {dims:?}")))?;
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| RecapError::Validation(format!("bad grid dimension {v:?}")))
        };
        let pixels = STANDARD
            .decode(data)
            .map_err(|e| RecapError::Validation(format!("bad grid base64: {e}")))?;
        PixelGrid::new(parse(h)?, parse(w)?, pixels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| RecapError::Validation(format!("cannot read image {}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        PixelGrid::new(h as usize, w as usize, img.into_raw())
    }

    /// Intensities mapped to `[-1, 1]`.
    pub fn to_mat(&self) -> Mat {
        Mat::from_shape_fn((self.height, self.width), |(r, c)| {
            self.pixels[r * self.width + c] as f64 / 127.5 - 1.0
        })
    }
}

/// Where a study's image lives.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Inline(PixelGrid),
    Path(PathBuf),
}

impl ImageRef {
    pub fn parse(value: &str, base_dir: &Path) -> Result<Self> {
        if PixelGrid::is_inline(value) {
            Ok(ImageRef::Inline(PixelGrid::from_inline(value)?))
        } else {
            let p = Path::new(value);
            Ok(ImageRef::Path(if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }))
        }
    }

    pub fn grid(&self) -> Result<PixelGrid> {
        match self {
            ImageRef::Inline(g) => Ok(g.clone()),
            ImageRef::Path(p) => PixelGrid::load(p),
        }
    }

    pub fn to_field(&self) -> String {
        match self {
            ImageRef::Inline(g) => g.to_inline(),
            ImageRef::Path(p) => p.display().to_string(),
        }
    }
}

/// Bilinear resampling with aligned pixel centers.
pub fn resize_bilinear(img: &Mat, height: usize, width: usize) -> Mat {
    let (h0, w0) = img.dim();
    if (h0, w0) == (height, width) {
        return img.clone();
    }
    let sy = h0 as f64 / height as f64;
    let sx = w0 as f64 / width as f64;
    Mat::from_shape_fn((height, width), |(r, c)| {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f64);
        let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h0 - 1), (x0 + 1).min(w0 - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
        let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn crop(img: &Mat, top: usize, left: usize, height: usize, width: usize) -> Mat {
    img.slice(ndarray::s![top..top + height, left..left + width])
        .to_owned()
}

pub fn flip_horizontal(img: &Mat) -> Mat {
    img.slice(ndarray::s![.., ..;-1]).to_owned()
}

/// Resize to `resize_to`, random-crop to `crop_to`, flip with probability `flip_prob`.
pub fn augment<R: Rng>(img: &Mat, resize_to: usize, crop_to: usize, flip_prob: f64, rng: &mut R) -> Mat {
    let resized = resize_bilinear(img, resize_to, resize_to);
    let span = resize_to.saturating_sub(crop_to);
    let top = if span > 0 { rng.random_range(0..=span) } else { 0 };
    let left = if span > 0 { rng.random_range(0..=span) } else { 0 };
    let cropped = crop(&resized, top, left, crop_to, crop_to);
    if rng.random::<f64>() < flip_prob {
        flip_horizontal(&cropped)
    } else {
        cropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn inline_round_trip() {
        let g = PixelGrid::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let s = g.to_inline();
        assert!(s.starts_with("grid:2x3:"));
        assert_eq!(PixelGrid::from_inline(&s).unwrap(), g);
    }

    #[test]
    fn inline_rejects_wrong_length() {
        let s = format!("grid:4x4:{}", STANDARD.encode([1u8, 2, 3]));
        assert!(PixelGrid::from_inline(&s).is_err());
    }

    #[test]
    fn resize_identity_and_flip() {
        let m = Mat::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        assert_eq!(resize_bilinear(&m, 4, 4), m);
        let f = flip_horizontal(&m);
        assert_eq!(f[[0, 0]], 3.0);
        assert_eq!(flip_horizontal(&f), m);
    }

    #[test]
    fn augment_output_shape() {
        let m = Mat::from_shape_fn((32, 32), |(r, c)| (r + c) as f64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = augment(&m, 36, 32, 0.5, &mut rng);
        assert_eq!(out.dim(), (32, 32));
    }

    #[test]
    fn png_path_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = image::GrayImage::from_raw(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        img.save(&p).unwrap();
        let g = PixelGrid::load(&p).unwrap();
        assert_eq!((g.height, g.width), (2, 3));
        assert_eq!(g.pixels, vec![1, 2, 3, 4, 5, 6]);
    }
}
