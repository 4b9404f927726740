//! IDX files: big-endian magic and dimensions followed by unsigned bytes.

use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `[N, H, W]`, pixels mapped to `v / 127.5 - 1`.
    Images(Tensor),
    Labels(Vec<usize>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "file ends inside the header"))
}

pub fn parse_idx(bytes: &[u8], kind: IdxKind) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    let (expected, ndim) = match kind {
        IdxKind::Images => (IMAGES_MAGIC, 3),
        IdxKind::Labels => (LABELS_MAGIC, 1),
    };
    if magic != expected {
        return Err(Error::format(
            0,
            format!("magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut total: usize = 1;
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let n = be_u32(bytes, off)? as usize;
        total = total
            .checked_mul(n)
            .ok_or_else(|| Error::format(off as u64, "dimension product overflows"))?;
        dims.push(n);
    }
    let start = 4 + 4 * ndim;
    let end = start
        .checked_add(total)
        .ok_or_else(|| Error::format(start as u64, "payload size overflows"))?;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: expected {total} bytes from offset {start}"),
        ));
    }
    if bytes.len() > end {
        return Err(Error::format(end as u64, "trailing bytes after payload"));
    }
    let payload = &bytes[start..end];
    Ok(match kind {
        IdxKind::Labels => IdxData::Labels(payload.iter().map(|&b| b as usize).collect()),
        IdxKind::Images => IdxData::Images(Tensor::new(
            dims,
            payload.iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
        )?),
    })
}

pub fn read_idx(path: &Path, kind: IdxKind) -> Result<IdxData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_idx(&bytes, kind)
}

pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    match read_idx(path, IdxKind::Images)? {
        IdxData::Images(t) => Ok(t),
        IdxData::Labels(_) => unreachable!(),
    }
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    match read_idx(path, IdxKind::Labels)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images(_) => unreachable!(),
    }
}

/// Reads an image/label pair. `classes` defaults to one past the largest label.
pub fn load_dataset(images: &Path, labels: &Path, classes: Option<usize>) -> Result<LabeledDataset> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.shape()[0] != y.len() {
        return Err(Error::format(
            4,
            format!("{} holds {} images but {} holds {} labels", images.display(), x.shape()[0], labels.display(), y.len()),
        ));
    }
    let classes = classes.unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1));
    LabeledDataset::new(x, y, classes)
}

fn header(magic: u32, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension does not fit in 32 bits"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `[N, H, W]` (or `[N, 1, H, W]`) images, quantising `[-1, 1]` to bytes.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let shape = images.shape();
    let dims = match shape.len() {
        3 => [shape[0], shape[1], shape[2]],
        4 if shape[1] == 1 => [shape[0], shape[2], shape[3]],
        _ => return Err(Error::invalid(format!("cannot store images of shape {shape:?}"))),
    };
    let mut out = header(IMAGES_MAGIC, &dims)?;
    out.extend(
        images
            .data()
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    write(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = header(LABELS_MAGIC, &[labels.len()])?;
    for &y in labels {
        out.push(u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit in a byte")))?);
    }
    write(path, &out)
}
