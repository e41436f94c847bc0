//! PNG input/output. 8-bit RGB maps linearly to [-1, 1]:
//! png = round((v + 1) / 2 * 255) clamped, v = png / 255 * 2 - 1.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8
}

pub fn dequantize(p: u8) -> f64 {
    p as f64 / 255.0 * 2.0 - 1.0
}

/// Write a [3, H, W] tensor in [-1, 1] as an 8-bit RGB PNG.
pub fn write_rgb_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!(
            "write_rgb_png expects [3, H, W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = img.data();
    let mut buf = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                quantize(data[y * w + x].to_f64()),
                quantize(data[plane + y * w + x].to_f64()),
                quantize(data[2 * plane + y * w + x].to_f64()),
            ]);
            buf.put_pixel(x as u32, y as u32, px);
        }
    }
    buf.save(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Read an 8-bit RGB PNG into a [3, H, W] tensor in [-1, 1].
pub fn read_rgb_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .decode()
        .map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            data[y * w + x] = T::from_f64(dequantize(px[0]));
            data[plane + y * w + x] = T::from_f64(dequantize(px[1]));
            data[2 * plane + y * w + x] = T::from_f64(dequantize(px[2]));
        }
    }
    Tensor::from_vec(data, &[3, h, w])
}

/// Write a [1, H, W] mask (0/1) as an 8-bit grayscale PNG (0/255).
pub fn write_mask_png<T: Scalar>(path: &Path, mask: &Tensor<T>) -> Result<()> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Contract(format!(
            "write_mask_png expects [1, H, W], got {s:?}"
        )));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask.data()[y * w + x] == T::one() { 255 } else { 0 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
