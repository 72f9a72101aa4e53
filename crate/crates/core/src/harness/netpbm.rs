//! PPM images and 16-bit PGM label maps.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::boundary::LabelMap;
use crate::error::{Error, Result};
use crate::image::Image;

fn encode(width: u32, height: u32, bytes: &[u8], color: ExtendedColorType, subtype: PnmSubtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out).with_subtype(subtype).write_image(bytes, width, height, color)?;
    Ok(out)
}

/// Binary 8-bit PPM.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode(img.width(), img.height(), &bytes, ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Binary PPM from raw 8-bit RGB samples.
pub fn encode_ppm_rgb8(width: u32, height: u32, rgb: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, rgb, ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Binary 16-bit PGM of class ids, samples big-endian.
pub fn encode_pgm16(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", labels.width(), labels.height()).into_bytes();
    out.extend(labels.labels().iter().flat_map(|l| l.to_be_bytes()));
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<DynamicImage> {
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Pnm)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, data) = match decode(bytes)? {
        DynamicImage::ImageRgb16(buf) => {
            (buf.width(), buf.height(), buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        }
        other => {
            let buf = other.into_rgb8();
            (buf.width(), buf.height(), buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    };
    Image::new(h, w, data)
}

/// Class ids are read verbatim from 8- or 16-bit graymaps.
pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    match decode(bytes)? {
        DynamicImage::ImageLuma16(buf) => LabelMap::new(buf.height(), buf.width(), buf.into_raw()),
        DynamicImage::ImageLuma8(buf) => LabelMap::new(buf.height(), buf.width(), buf.into_raw().into_iter().map(u16::from).collect()),
        _ => Err(Error::Format { what: "label map", detail: "expected a single-channel PGM".into() }),
    }
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    Ok(std::fs::write(path, encode_ppm(img)?)?)
}

pub fn write_pgm16(path: &Path, labels: &LabelMap) -> Result<()> {
    Ok(std::fs::write(path, encode_pgm16(labels)?)?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&std::fs::read(path)?)
}
