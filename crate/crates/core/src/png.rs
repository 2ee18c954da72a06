//! 8-bit RGB PNG import/export for image tensors.
//!
//! Import maps byte `b` to `b / 255.0`; export rounds `v * 255` after
//! clamping to [0,1]. A dtns -> png -> dtns round trip is therefore exact
//! to within one quantization step (1/255) per channel.

use std::path::Path;

use image::{ImageReader, Rgb, RgbImage};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub fn image_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h {
        for x in 0..w {
            let Rgb(px) = *img.get_pixel(x, y);
            for ch in 0..3 {
                data.push(px[ch] as f32 / 255.0);
            }
        }
    }
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    if t.rank() != 3 || t.c() != 3 {
        return Err(Error::shape("png_export", format!("want HxWx3, got {:?}", t.dims())));
    }
    let (h, w) = (t.h(), t.w());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(t.at3(y, x, 0)),
                quantize(t.at3(y, x, 1)),
                quantize(t.at3(y, x, 2)),
            ];
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(img)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = ImageReader::open(path.as_ref())?
        .decode()
        .map_err(|e| Error::format(0, format!("png decode: {e}")))?
        .to_rgb8();
    image_to_tensor(&img)
}

pub fn save_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let img = tensor_to_image(t)?;
    img.save(path.as_ref()).map_err(|e| Error::format(0, format!("png encode: {e}")))
}
