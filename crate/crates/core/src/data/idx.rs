use std::fs;
use std::path::Path;

use super::Dataset;
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'static str,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self, field: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::format(
                format!("{}.{field}", self.file),
                format!("truncated: need 4 bytes at offset {}", self.pos),
            )
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn rest(&self, field: &str, expected: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < expected {
            return Err(Error::format(
                format!("{}.{field}", self.file),
                format!("truncated: expected {expected} bytes, found {}", rest.len()),
            ));
        }
        Ok(&rest[..expected])
    }
}

/// Parses an IDX image file into row-major feature vectors scaled to [0, 1].
pub fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        file: "images",
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = r.u32_be("count")? as usize;
    let rows = r.u32_be("rows")? as usize;
    let cols = r.u32_be("cols")? as usize;
    let pixels = rows * cols;
    let data = r.rest("pixels", count * pixels)?;
    let images = if pixels == 0 {
        vec![Vec::new(); count]
    } else {
        data.chunks_exact(pixels)
            .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect()
    };
    Ok((rows, cols, images))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        file: "labels",
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let count = r.u32_be("count")? as usize;
    Ok(r.rest("labels", count)?.to_vec())
}

/// Loads an MNIST-style image/label pair. `num_classes` is one past the
/// largest label seen.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (rows, cols, images) = read_idx_images(&fs::read(images_path)?)?;
    let labels = read_idx_labels(&fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::format(
            "labels.count",
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| usize::from(m) + 1);
    let rows_out = images
        .into_iter()
        .zip(labels)
        .map(|(x, y)| (x, usize::from(y)))
        .collect();
    Dataset::new(rows_out, num_classes, rows * cols)
}
