//! 8-bit PNG and binary PNM (P5/P6) I/O.
//!
//! Pixels are quantized as `round(v * 255)` on write and read back as
//! `byte / 255`, so values that are already multiples of 1/255 survive a
//! round trip bit-exactly. Masks are stored as P5 graymaps with values
//! {0, 255}.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_bytes(image: &Image) -> Result<(Vec<u8>, ExtendedColorType)> {
    let color = match image.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        n => {
            return Err(Error::validation(format!(
                "only 1- and 3-channel images can be serialized, got {n}"
            )))
        }
    };
    Ok((image.data().iter().map(|&v| quantize(v)).collect(), color))
}

fn from_dynamic(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        other => (3, other.to_rgb8().into_raw()),
    };
    Image::new(
        h,
        w,
        channels,
        bytes.into_iter().map(|b| f64::from(b) / 255.0).collect(),
    )
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let (bytes, color) = to_bytes(image)?;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        &bytes,
        image.width() as u32,
        image.height() as u32,
        color,
    )?;
    Ok(out)
}

/// Binary PNM: P5 for single-channel images, P6 for RGB.
pub fn encode_pnm(image: &Image) -> Result<Vec<u8>> {
    let (bytes, color) = to_bytes(image)?;
    let subtype = if image.channels() == 1 {
        PnmSubtype::Graymap(SampleEncoding::Binary)
    } else {
        PnmSubtype::Pixmap(SampleEncoding::Binary)
    };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&bytes, image.width() as u32, image.height() as u32, color)?;
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let format = image::guess_format(bytes)?;
    let img = image::load(Cursor::new(bytes), format)?;
    from_dynamic(img)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_image(&bytes)
}

/// Writes a PNG, or a PNM when the path ends in `.pgm`/`.ppm`.
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm" | "ppm" | "pnm") => encode_pnm(image)?,
        _ => encode_png(image)?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let gray = Image::new(
        mask.height(),
        mask.width(),
        1,
        mask.data().iter().map(|&v| f64::from(v)).collect(),
    )?;
    encode_pnm(&gray)
}

/// Decodes a graymap mask. Any value at or above 128 counts as set.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Mask::new(
        h,
        w,
        img.into_raw()
            .into_iter()
            .map(|b| u8::from(b >= 128))
            .collect(),
    )
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_mask(&bytes)
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mask(mask)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rgb() -> Image {
        let data = (0..4 * 5 * 3)
            .map(|i| ((i * 17) % 256) as f64 / 255.0)
            .collect();
        Image::new(4, 5, 3, data).unwrap()
    }

    #[test]
    fn png_round_trip_is_exact_on_byte_grid() {
        let img = sample_rgb();
        assert_eq!(decode_image(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn pnm_headers_and_round_trip() {
        let img = sample_rgb();
        let bytes = encode_pnm(&img).unwrap();
        assert_eq!(&bytes[..2], b"P6");
        assert_eq!(decode_image(&bytes).unwrap(), img);

        let gray = Image::new(2, 2, 1, vec![0.0, 1.0, 64.0 / 255.0, 1.0]).unwrap();
        let bytes = encode_pnm(&gray).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        assert_eq!(decode_image(&bytes).unwrap(), gray);
    }

    #[test]
    fn masks_use_0_and_255() {
        let mask = Mask::new(2, 3, vec![1, 0, 0, 1, 1, 0]).unwrap();
        let bytes = encode_mask(&mask).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        let pixels = &bytes[bytes.len() - 6..];
        assert_eq!(pixels, &[255, 0, 0, 255, 255, 0]);
        assert_eq!(decode_mask(&bytes).unwrap(), mask);
    }

    #[test]
    fn quantization_rounds_to_nearest() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.2), 255);
        assert_eq!(quantize(-0.3), 0);
    }
}
