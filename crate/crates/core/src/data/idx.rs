//! Big-endian IDX files, as distributed for MNIST.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Dataset, Labels};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A parsed image/label pair; keeps the image shape for writing back.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxData {
    pub dataset: Dataset,
    pub image_shape: (usize, usize),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Parse(format!("{} file truncated in header at byte {}", self.what, self.pos)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Parse(format!(
                "{} file truncated: expected {len} data bytes, found {}",
                self.what,
                rest.len()
            )));
        }
        Ok(&rest[..len])
    }
}

fn magic(reader: &mut Reader<'_>, expected: u32) -> Result<()> {
    let found = reader.u32()?;
    if found != expected {
        return Err(Error::Parse(format!("{} file has magic {found:#010x}, expected {expected:#010x}", reader.what)));
    }
    Ok(())
}

/// Parses in-memory IDX images and labels; pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<IdxData> {
    let mut img = Reader { bytes: images, pos: 0, what: "image" };
    magic(&mut img, IDX_IMAGES_MAGIC)?;
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.body(count * rows * cols)?;

    let mut lab = Reader { bytes: labels, pos: 0, what: "label" };
    magic(&mut lab, IDX_LABELS_MAGIC)?;
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Parse(format!("image count {count} does not match label count {label_count}")));
    }
    let ids: Vec<usize> = lab.body(label_count)?.iter().map(|&b| b as usize).collect();

    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let num_classes = ids.iter().max().map_or(1, |&m| m + 1);
    let dataset = Dataset::new(features, (rows * cols).max(1), Labels::Classes { ids, num_classes })?;
    Ok(IdxData { dataset, image_shape: (rows, cols) })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxData> {
    let images = std::fs::read(images_path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", images_path.as_ref().display())))?;
    let labels = std::fs::read(labels_path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", labels_path.as_ref().display())))?;
    parse_idx(&images, &labels)
}

/// Serializes back to `(images, labels)` IDX bytes. Pixels are rounded to the
/// nearest byte, so a parsed file writes back identically.
pub fn write_idx(data: &IdxData) -> Result<(Vec<u8>, Vec<u8>)> {
    let ids = match data.dataset.labels() {
        Labels::Classes { ids, .. } => ids,
        _ => return Err(Error::InvalidArgument("IDX labels must be class ids".into())),
    };
    if let Some(&c) = ids.iter().find(|&&c| c > u8::MAX as usize) {
        return Err(Error::InvalidArgument(format!("class id {c} does not fit in a byte")));
    }
    let (rows, cols) = data.image_shape;
    let n = data.dataset.len();
    let mut images = Vec::with_capacity(16 + data.dataset.features().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n, rows, cols] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    images.extend(data.dataset.features().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));

    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(ids.iter().map(|&c| c as u8));
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(count: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for v in [count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (count * rows * cols) as usize));
        b
    }

    fn labels(ids: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&(ids.len() as u32).to_be_bytes());
        b.extend_from_slice(ids);
        b
    }

    #[test]
    fn two_mnist_sized_images() {
        let d = parse_idx(&images(2, 28, 28, 255), &labels(&[3, 7])).unwrap();
        assert_eq!(d.dataset.len(), 2);
        assert_eq!(d.dataset.dim(), 784);
        assert!(d.dataset.features().iter().all(|&x| x == 1.0));
        assert_eq!(d.dataset.labels(), &Labels::Classes { ids: vec![3, 7], num_classes: 8 });
    }

    #[test]
    fn count_mismatch() {
        let err = parse_idx(&images(3, 2, 2, 0), &labels(&[0, 1])).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn wrong_magic() {
        let mut bad = images(1, 2, 2, 0);
        bad[3] = 0x01;
        let err = parse_idx(&bad, &labels(&[0])).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        let err = parse_idx(&images(1, 2, 2, 0), &images(1, 2, 2, 0)).unwrap_err();
        assert!(err.to_string().contains("label file has magic"), "{err}");
    }

    #[test]
    fn truncated() {
        let mut short = images(2, 2, 2, 9);
        short.pop();
        assert!(parse_idx(&short, &labels(&[0, 1])).unwrap_err().to_string().contains("truncated"));
        assert!(parse_idx(&short[..10], &labels(&[0, 1])).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn round_trip_bytes() {
        let mut img = images(3, 2, 3, 0);
        for (i, b) in img[16..].iter_mut().enumerate() {
            *b = (i * 37 % 256) as u8;
        }
        let lab = labels(&[9, 0, 4]);
        let parsed = parse_idx(&img, &lab).unwrap();
        assert_eq!(write_idx(&parsed).unwrap(), (img, lab));
    }
}
