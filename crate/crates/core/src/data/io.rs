//! PNG reading and writing for images and indexed masks.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::types::{Image, MaskMap};

fn codec(path: &Path, source: image::ImageError) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads any supported image, converts it to `channels` (1 or 3) and scales
/// to `[0, 1]`. With `resize` set, resamples bilinearly.
pub fn read_image(path: &Path, channels: usize, resize: Option<(usize, usize)>) -> Result<Image> {
    let dynamic = image::open(path).map_err(|e| codec(path, e))?;
    match channels {
        1 => {
            let mut buf = dynamic.to_luma32f();
            if let Some((h, w)) = resize {
                if (buf.height() as usize, buf.width() as usize) != (h, w) {
                    buf = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
                }
            }
            let (w, h) = buf.dimensions();
            Image::from_clamped(h as usize, w as usize, 1, buf.into_raw())
        }
        3 => {
            let mut buf = dynamic.to_rgb32f();
            if let Some((h, w)) = resize {
                if (buf.height() as usize, buf.width() as usize) != (h, w) {
                    buf = imageops::resize(&buf, w as u32, h as u32, FilterType::Triangle);
                }
            }
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let raw = buf.into_raw();
            let n = h * w;
            let mut planar = vec![0.0f32; 3 * n];
            for i in 0..n {
                for c in 0..3 {
                    planar[c * n + i] = raw[i * 3 + c];
                }
            }
            Image::from_clamped(h, w, 3, planar)
        }
        other => Err(Error::Dataset(format!("unsupported channel count {other}"))),
    }
}

/// Writes an image as 8-bit grayscale (1 channel) or RGB (3 channels).
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.hw();
    let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let result = match image.channels() {
        1 => {
            let raw: Vec<u8> = image.data().iter().map(|v| q(*v)).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer size matches")
                .save(path)
        }
        3 => {
            let n = h * w;
            let raw: Vec<u8> = (0..n * 3).map(|i| q(image.data()[(i % 3) * n + i / 3])).collect();
            ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer size matches")
                .save(path)
        }
        c => return Err(Error::Dataset(format!("cannot write {c}-channel image"))),
    };
    result.map_err(|e| codec(path, e))
}

/// Raw per-pixel values of a single-channel PNG. Palette images yield their
/// indices, not the palette colors.
fn read_index_png(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let bad = |msg: String| Error::Dataset(format!("{}: {msg}", path.display()));
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    use png::{BitDepth, ColorType};
    if !matches!(info.color_type, ColorType::Grayscale | ColorType::Indexed) {
        return Err(bad(format!("mask must be single-channel, got {:?}", info.color_type)));
    }
    let mut values = Vec::with_capacity(h * w);
    match info.bit_depth {
        BitDepth::Sixteen => {
            for y in 0..h {
                let row = &buf[y * info.line_size..];
                values.extend((0..w).map(|x| u16::from_be_bytes([row[2 * x], row[2 * x + 1]]) as u32));
            }
        }
        depth => {
            let bits = depth as usize;
            let per_byte = 8 / bits;
            let mask = ((1u16 << bits) - 1) as u8;
            for y in 0..h {
                let row = &buf[y * info.line_size..];
                values.extend((0..w).map(|x| {
                    let byte = row[x / per_byte];
                    let shift = 8 - bits * (x % per_byte + 1);
                    ((byte >> shift) & mask) as u32
                }));
            }
        }
    }
    Ok((h, w, values))
}

/// Reads a single-channel indexed mask, rejecting values `>= num_classes`.
pub fn read_mask(path: &Path, num_classes: usize, resize: Option<(usize, usize)>) -> Result<MaskMap> {
    let (h, w, values) = read_index_png(path)?;
    if let Some(&v) = values.iter().find(|v| **v as usize >= num_classes) {
        return Err(Error::MaskValueOutOfRange {
            path: path.to_path_buf(),
            value: v,
            num_classes,
        });
    }
    let mask = MaskMap::new(h, w, num_classes, values.into_iter().map(|v| v as u8).collect())?;
    Ok(match resize {
        Some(hw) if hw != mask.hw() => resize_mask_nearest(&mask, hw),
        _ => mask,
    })
}

/// Writes a mask as an 8-bit grayscale PNG whose pixel values are class indices.
pub fn write_mask(path: &Path, mask: &MaskMap) -> Result<()> {
    let (h, w) = mask.hw();
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Dataset(format!("{}: {e}", path.display()));
    let mut writer = encoder.write_header().map_err(err)?;
    writer.write_image_data(mask.labels()).map_err(err)?;
    writer.finish().map_err(err)?;
    Ok(())
}

/// Nearest-neighbour resampling at pixel centres; never invents a class.
pub fn resize_mask_nearest(mask: &MaskMap, (h, w): (usize, usize)) -> MaskMap {
    let (sh, sw) = mask.hw();
    let src = |dst: usize, n_dst: usize, n_src: usize| (((dst as f64 + 0.5) * n_src as f64 / n_dst as f64) as usize).min(n_src - 1);
    let labels = (0..h * w)
        .map(|i| mask.get(src(i / w, h, sh), src(i % w, w, sw)))
        .collect();
    MaskMap::new(h, w, mask.num_classes(), labels).expect("labels come from a valid mask")
}
