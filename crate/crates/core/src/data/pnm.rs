//! 8-bit portable pixmap (P6) and graymap (P5) I/O.

use std::path::Path;

use std::fs::File;
use std::io::BufWriter;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `3 x h x w` image in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM export needs 3 x h x w, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_byte(d[p]), to_byte(d[h * w + p]), to_byte(d[2 * h * w + p])])
    });
    encode(path, img.as_raw(), w, h, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

fn encode(path: &Path, raw: &[u8], w: usize, h: usize, subtype: PnmSubtype) -> Result<()> {
    let color = match subtype {
        PnmSubtype::Pixmap(_) => ExtendedColorType::Rgb8,
        _ => ExtendedColorType::L8,
    };
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(subtype)
        .write_image(raw, w as u32, h as u32, color)?;
    Ok(())
}

/// Read a PPM into a `3 x h x w` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

/// Write an 8-bit graymap from row-major bytes.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, pixels).ok_or_else(|| {
        Error::InvalidArgument(format!("graymap buffer does not match {width} x {height}"))
    })?;
    encode(path, img.as_raw(), width, height, PnmSubtype::Graymap(SampleEncoding::Binary))
}
