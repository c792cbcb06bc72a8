//! Binary dataset container.
//!
//! Layout (little-endian): magic `BSDG`, version u16, dtype u8, num_classes
//! u32, N u32, C/H/W u16 each, N labels as u16, N*C*H*W pixels as f32, then a
//! CRC32 of the label and pixel bytes.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSDG";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 6;

pub fn encode(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let (n, c, h, w) = ds.dims();
    if n == 0 {
        return Err(Error::contract("refusing to save an empty dataset"));
    }
    if c > u16::MAX as usize || h > u16::MAX as usize || w > u16::MAX as usize || n > u32::MAX as usize {
        return Err(Error::contract("dataset dimensions exceed the format limits"));
    }
    if ds.num_classes > u16::MAX as usize + 1 {
        return Err(Error::contract("too many classes for u16 labels"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * 2 + ds.images.numel() * 4 + 4);
    out.extend_from_slice(MAGIC);
    let mut hdr = [0u8; HEADER_LEN - 4];
    LittleEndian::write_u16(&mut hdr[0..2], VERSION);
    hdr[2] = DTYPE_F32;
    LittleEndian::write_u32(&mut hdr[3..7], ds.num_classes as u32);
    LittleEndian::write_u32(&mut hdr[7..11], n as u32);
    LittleEndian::write_u16(&mut hdr[11..13], c as u16);
    LittleEndian::write_u16(&mut hdr[13..15], h as u16);
    LittleEndian::write_u16(&mut hdr[15..17], w as u16);
    out.extend_from_slice(&hdr);
    let payload_start = out.len();
    let mut buf = [0u8; 4];
    for &l in &ds.labels {
        LittleEndian::write_u16(&mut buf[..2], l as u16);
        out.extend_from_slice(&buf[..2]);
    }
    for &v in ds.images.data() {
        LittleEndian::write_f32(&mut buf, v);
        out.extend_from_slice(&buf);
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    LittleEndian::write_u32(&mut buf, crc);
    out.extend_from_slice(&buf);
    Ok(out)
}

fn parse_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8], name: &str) -> Result<LabeledDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(bytes.len(), "file shorter than the header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(parse_err(0, "expected magic \"BSDG\""));
    }
    let version = LittleEndian::read_u16(&bytes[4..6]);
    if version != VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: VERSION as u32,
        });
    }
    if bytes[6] != DTYPE_F32 {
        return Err(parse_err(6, format!("unsupported dtype code {}", bytes[6])));
    }
    let num_classes = LittleEndian::read_u32(&bytes[7..11]) as usize;
    let n = LittleEndian::read_u32(&bytes[11..15]) as usize;
    let c = LittleEndian::read_u16(&bytes[15..17]) as usize;
    let h = LittleEndian::read_u16(&bytes[17..19]) as usize;
    let w = LittleEndian::read_u16(&bytes[19..21]) as usize;
    let payload_len = n * 2 + n * c * h * w * 4;
    let need = HEADER_LEN + payload_len + 4;
    if bytes.len() != need {
        return Err(parse_err(
            bytes.len().min(need),
            format!("expected {need} bytes for the declared shape, file has {}", bytes.len()),
        ));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored = LittleEndian::read_u32(&bytes[need - 4..]);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let labels: Vec<usize> = payload[..n * 2]
        .chunks_exact(2)
        .map(|b| LittleEndian::read_u16(b) as usize)
        .collect();
    let pixels: Vec<f32> = payload[n * 2..]
        .chunks_exact(4)
        .map(LittleEndian::read_f32)
        .collect();
    LabeledDataset::new(Tensor::new(vec![n, c, h, w], pixels)?, labels, num_classes, name, None)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a dataset; its name is the file stem.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    decode(&bytes, name)
}
