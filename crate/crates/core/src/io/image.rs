//! 8-bit RGB PNG images as `[3, H, W]` tensors in `[-1, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `p ↦ 2p/255 − 1`.
pub fn pixel_to_unit(p: u8) -> f32 {
    p as f32 * (2.0 / 255.0) - 1.0
}

/// Inverse of [`pixel_to_unit`] with clamping and round-half-even.
pub fn unit_to_pixel(v: f32) -> u8 {
    let p = ((v as f64 + 1.0) * 127.5).clamp(0.0, 255.0);
    p.round_ties_even() as u8
}

pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    read_png(decoder)
}

fn read_png<R: std::io::BufRead + std::io::Seek>(decoder: png::Decoder<R>) -> Result<Tensor<f32>> {
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight || info.color_type != png::ColorType::Rgb {
        return Err(Error::UnsupportedImage(format!(
            "need 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| { Error::UnsupportedImage("image too large".into()) })?
    ];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::UnsupportedImage(e.to_string()))?;
    Ok(rgb_to_tensor(&buf[..3 * w * h], h, w))
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let file = BufReader::new(File::open(path)?);
    read_png(png::Decoder::new(file)).map_err(|e| match e {
        Error::UnsupportedImage(m) => Error::UnsupportedImage(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Interleaved RGB bytes to a `[3, H, W]` tensor.
pub fn rgb_to_tensor(rgb: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = pixel_to_unit(px[c]);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("buffer matches extent")
}

/// `[3, H, W]` (or `[1, 3, H, W]`) tensor to interleaved RGB bytes.
pub fn tensor_to_rgb(image: &Tensor<f32>) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w) = match image.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => {
            return Err(Error::shape(format!(
                "expected a [3, H, W] image, got {s:?}"
            )))
        }
    };
    image.ensure_finite("image")?;
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(unit_to_pixel(d[c * h * w + i]));
        }
    }
    Ok((out, h, w))
}

pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (rgb, h, w) = tensor_to_rgb(image)?;
    let mut out = Vec::new();
    write_png(&mut out, &rgb, h, w)?;
    Ok(out)
}

fn write_png<W: std::io::Write>(sink: W, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let mut enc = png::Encoder::new(sink, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .finish()
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (rgb, h, w) = tensor_to_rgb(image)?;
    write_rgb(path, &rgb, h, w)
}

pub fn write_rgb(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    if rgb.len() != 3 * h * w {
        return Err(Error::shape(format!(
            "{} bytes for a {h}x{w} RGB image",
            rgb.len()
        )));
    }
    write_png(BufWriter::new(File::create(path)?), rgb, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(pixel_to_unit(0), -1.0);
        assert_eq!(pixel_to_unit(255), 1.0);
        assert!((pixel_to_unit(128) - (256.0 / 255.0 - 1.0)).abs() < 1e-7);
        assert!((pixel_to_unit(128) - 0.00392).abs() < 1e-5);
    }

    #[test]
    fn byte_round_trip_for_every_value() {
        for p in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(p)), p);
        }
        assert_eq!(unit_to_pixel(-7.0), 0);
        assert_eq!(unit_to_pixel(3.0), 255);
        // 0.0 lands on 127.5, which rounds to the even neighbor
        assert_eq!(unit_to_pixel(0.0), 128);
        assert_eq!(unit_to_pixel(2.5 / 127.5 - 1.0), 2);
    }

    #[test]
    fn png_round_trip_is_identical() {
        let rgb: Vec<u8> = (0..3 * 5 * 4).map(|i| (i * 37 % 256) as u8).collect();
        let t = rgb_to_tensor(&rgb, 5, 4);
        let bytes = encode_png(&t).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert!(back.bit_eq(&t));
        assert_eq!(encode_png(&back).unwrap(), bytes);
    }

    #[test]
    fn grayscale_and_sixteen_bit_are_unsupported() {
        for (color, depth, bpp) in [
            (png::ColorType::Grayscale, png::BitDepth::Eight, 1),
            (png::ColorType::Rgb, png::BitDepth::Sixteen, 6),
            (png::ColorType::Rgba, png::BitDepth::Eight, 4),
        ] {
            let mut bytes = Vec::new();
            let mut enc = png::Encoder::new(&mut bytes, 2, 2);
            enc.set_color(color);
            enc.set_depth(depth);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&vec![0u8; 4 * bpp]).unwrap();
            w.finish().unwrap();
            assert!(matches!(
                decode_png(&bytes),
                Err(Error::UnsupportedImage(_))
            ));
        }
    }
}
