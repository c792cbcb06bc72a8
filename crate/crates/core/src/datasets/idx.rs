//! Reader for the IDX files used by MNIST-style corpora.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, Default)]
pub struct IdxOptions {
    /// Keep only the first `limit` samples.
    pub limit: Option<usize>,
    /// Bilinearly resize to 32x32 and replicate the channel to RGB.
    pub resize_rgb32: bool,
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(BigEndian::read_u32)
        .ok_or_else(|| parse_err(bytes.len(), format!("file ends before {what}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let m = read_u32(bytes, 0, &format!("magic number {expected:#010x}"))?;
    if m != expected {
        return Err(parse_err(0, format!("expected magic {expected:#010x}, found {m:#010x}")));
    }
    Ok(())
}

/// Parses an IDX image file: `(n, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("{n} images of {rows}x{cols} need {need} bytes, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = read_u32(bytes, 4, "label count")? as usize;
    if bytes.len() < 8 + n {
        return Err(parse_err(
            bytes.len(),
            format!("{n} labels need {} bytes, file has {}", 8 + n, bytes.len()),
        ));
    }
    Ok(&bytes[8..8 + n])
}

fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0f32; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Builds a dataset from IDX image and label bytes.
pub fn from_idx_bytes(images: &[u8], labels: &[u8], opts: IdxOptions, name: &str) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let lab = parse_labels(labels)?;
    if lab.len() != n {
        return Err(parse_err(4, format!("image file holds {n} samples, label file {}", lab.len())));
    }
    let keep = opts.limit.map_or(n, |l| l.min(n));
    let (c, h, w) = if opts.resize_rgb32 { (3, 32, 32) } else { (1, rows, cols) };
    let mut data = Vec::with_capacity(keep * c * h * w);
    for i in 0..keep {
        let img: Vec<f32> = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        let img = if opts.resize_rgb32 {
            resize_bilinear(&img, rows, cols, 32, 32)
        } else {
            img
        };
        for _ in 0..c {
            data.extend_from_slice(&img);
        }
    }
    let labels: Vec<usize> = lab[..keep].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    LabeledDataset::new(
        Tensor::new(vec![keep, c, h, w], data)?,
        labels,
        num_classes,
        name,
        None,
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path, opts: IdxOptions) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let name = images_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("idx");
    from_idx_bytes(&images, &labels, opts, name)
}

/// Encodes images (values rounded to bytes) and labels as IDX files.
pub fn to_idx_bytes(n: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0u8; 16];
    BigEndian::write_u32(&mut img[0..4], IMAGES_MAGIC);
    BigEndian::write_u32(&mut img[4..8], n as u32);
    BigEndian::write_u32(&mut img[8..12], rows as u32);
    BigEndian::write_u32(&mut img[12..16], cols as u32);
    img.extend_from_slice(pixels);
    let mut lab = vec![0u8; 8];
    BigEndian::write_u32(&mut lab[0..4], LABELS_MAGIC);
    BigEndian::write_u32(&mut lab[4..8], labels.len() as u32);
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_header_names_the_magic() {
        let err = parse_images(&[0u8; 2]).unwrap_err();
        assert!(err.to_string().contains("0x00000803"), "{err}");
        let err = parse_images(&[0, 0, 8, 3, 0, 0, 0, 1]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 8, .. }), "{err}");
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (img, _) = to_idx_bytes(100, 2, 2, &[0u8; 400], &[]);
        let (_, lab) = to_idx_bytes(0, 0, 0, &[], &[1u8; 99]);
        assert!(matches!(
            from_idx_bytes(&img, &lab, IdxOptions::default(), "t"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let (img, lab) = to_idx_bytes(1, 1, 1, &[7], &[3]);
        assert!(from_idx_bytes(&lab, &img, IdxOptions::default(), "t").is_err());
    }

    #[test]
    fn scales_truncates_and_resizes() {
        let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| (i % 256) as u8).collect();
        let (img, lab) = to_idx_bytes(3, 28, 28, &pixels, &[4, 1, 9]);
        let ds = from_idx_bytes(&img, &lab, IdxOptions::default(), "t").unwrap();
        assert_eq!(ds.images.shape(), &[3, 1, 28, 28]);
        assert_eq!(ds.images.data()[255], 1.0);
        let ds = from_idx_bytes(
            &img,
            &lab,
            IdxOptions {
                limit: Some(2),
                resize_rgb32: true,
            },
            "t",
        )
        .unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.labels, vec![4, 1]);
        let d = ds.images.data();
        assert_eq!(&d[..1024], &d[1024..2048]);
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
