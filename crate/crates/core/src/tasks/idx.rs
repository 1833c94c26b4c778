//! IDX image/label files (the MNIST distribution format), optionally gzipped.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::nn::Matrix;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;
const CLASSES: usize = 10;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(format!("decompressing {}", path.display()), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            message: format!(
                "header truncated: expected 4 bytes, found {}",
                bytes.len().saturating_sub(offset)
            ),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn check_body(bytes: &[u8], header: usize, expected: usize) -> Result<()> {
    let found = bytes.len() - header;
    if found != expected {
        return Err(Error::Parse {
            offset: header + found.min(expected),
            message: format!("expected {expected} payload bytes, found {found}"),
        });
    }
    Ok(())
}

/// Parses an image file into `count × (rows·cols)` pixels scaled to [0, 1].
pub(crate) fn parse_images(bytes: &[u8]) -> Result<(Matrix, usize, usize)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    check_body(bytes, 16, count * d)?;
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Matrix::from_vec(count, d, data)?, rows, cols))
}

pub(crate) fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    check_body(bytes, 8, count)?;
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (b as usize) < CLASSES {
                Ok(b as usize)
            } else {
                Err(Error::Parse {
                    offset: 8 + i,
                    message: format!("label {b} outside 0..{CLASSES}"),
                })
            }
        })
        .collect()
}

/// Loads a matching pair of IDX image and label files. Gzip is detected
/// from the leading bytes.
pub fn load_idx(images: &Path, labels: &Path, name: &str) -> Result<Dataset> {
    let (inputs, _, _) = parse_images(&read_bytes(images)?)?;
    let labels_v = parse_labels(&read_bytes(labels)?)?;
    if labels_v.len() != inputs.rows() {
        return Err(Error::Parse {
            offset: 4,
            message: format!(
                "{} has {} labels but {} has {} images",
                labels.display(),
                labels_v.len(),
                images.display(),
                inputs.rows()
            ),
        });
    }
    Dataset::new(
        name,
        inputs,
        Targets::Classes {
            labels: labels_v,
            classes: CLASSES,
        },
    )
}

fn write_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut enc = GzEncoder::new(file, Compression::default());
    enc.write_all(bytes)
        .and_then(|_| enc.finish().map(|_| ()))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes a labeled dataset of square images as gzipped IDX files. Pixels
/// are quantized to `round(v · 255)`.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let side = (ds.dim() as f64).sqrt().round() as usize;
    if side * side != ds.dim() {
        return Err(Error::Shape(format!(
            "{} features are not a square image",
            ds.dim()
        )));
    }
    let lab = ds
        .labels()
        .ok_or_else(|| Error::Argument("writing IDX needs labels".into()))?;
    let n = ds.len() as u32;

    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    for v in [IMAGE_MAGIC, n, side as u32, side as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.inputs()
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lb = Vec::with_capacity(8 + ds.len());
    lb.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lb.extend_from_slice(&n.to_be_bytes());
    lb.extend(lab.iter().map(|&l| l as u8));

    write_gz(images, &img)?;
    write_gz(labels, &lb)
}
