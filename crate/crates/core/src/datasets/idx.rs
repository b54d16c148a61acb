//! MNIST IDX file parsing (bit-exact big-endian format).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw image dataset: `num x rows x cols` grayscale bytes plus labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    pub num: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, `num * rows * cols` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageDataset {
    pub fn image(&self, i: usize) -> &[u8] {
        let size = self.rows * self.cols;
        &self.pixels[i * size..(i + 1) * size]
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let mut r = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut r, "image header")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let num = read_u32_be(&mut r, "image count")? as usize;
    let rows = read_u32_be(&mut r, "image rows")? as usize;
    let cols = read_u32_be(&mut r, "image cols")? as usize;
    let mut pixels = vec![0u8; num * rows * cols];
    r.read_exact(&mut pixels)
        .map_err(|e| Error::Format(format!("truncated image data: {e}")))?;

    let mut r = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut r, "label header")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let num_labels = read_u32_be(&mut r, "label count")? as usize;
    if num_labels != num {
        return Err(Error::Format(format!(
            "{num} images but {num_labels} labels"
        )));
    }
    let mut labels = vec![0u8; num_labels];
    r.read_exact(&mut labels)
        .map_err(|e| Error::Format(format!("truncated label data: {e}")))?;
    Ok(ImageDataset {
        num,
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Writes an IDX pair; used for test fixtures.
pub fn write_idx(dataset: &ImageDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(images_path)?);
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(dataset.num as u32).to_be_bytes())?;
    w.write_all(&(dataset.rows as u32).to_be_bytes())?;
    w.write_all(&(dataset.cols as u32).to_be_bytes())?;
    w.write_all(&dataset.pixels)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(labels_path)?);
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(dataset.num as u32).to_be_bytes())?;
    w.write_all(&dataset.labels)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lbl = dir.path().join("labels.idx");
        let fixture = ImageDataset {
            num: 1,
            rows: 28,
            cols: 28,
            pixels: vec![0u8; 784],
            labels: vec![7],
        };
        write_idx(&fixture, &img, &lbl).unwrap();
        let loaded = load_idx(&img, &lbl).unwrap();
        assert_eq!(fixture, loaded);
        assert_eq!(loaded.labels[0], 7);
        assert!(loaded.image(0).iter().all(|&p| p == 0));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lbl = dir.path().join("labels.idx");
        let fixture = ImageDataset {
            num: 2,
            rows: 4,
            cols: 4,
            pixels: vec![1u8; 32],
            labels: vec![0, 1],
        };
        write_idx(&fixture, &img, &lbl).unwrap();
        // Chop the image file short.
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images.idx");
        let lbl = dir.path().join("labels.idx");
        std::fs::write(&img, 0x12345678u32.to_be_bytes()).unwrap();
        std::fs::write(&lbl, LABELS_MAGIC.to_be_bytes()).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(Error::Format(_))));
    }
}
