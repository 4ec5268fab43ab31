//! IDX (MNIST/EMNIST) file parsing.
//!
//! Layout: a big-endian `u32` magic (`0x00000803` for 3-D `u8` image
//! arrays, `0x00000801` for 1-D `u8` label arrays), one big-endian `u32`
//! per dimension, then the raw bytes.

use std::fs;
use std::path::Path;

use super::{Dataset, LabeledData};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "DRSCL_DATA_DIR";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedFile(format!(
                "{}: need {} bytes at offset {}, file has {}",
                self.what,
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut r = Reader { bytes, pos: 0, what: "images" };
    let magic = r.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: IMAGES_MAGIC });
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.take(n * rows * cols)?;
    Ok((n, rows, cols, pixels))
}

fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Reader { bytes, pos: 0, what: "labels" };
    let magic = r.u32()?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic { found: magic, expected: LABELS_MAGIC });
    }
    let n = r.u32()? as usize;
    r.take(n)
}

/// Load an image/label IDX pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_images(&img_bytes)?;
    let labels = parse_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    let x = Tensor::new(
        vec![n, rows * cols],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let y: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let classes = y.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(x, y, classes)?.with_image_shape(rows, cols)
}

/// Load the standard four-file MNIST layout from `dir`.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<LabeledData> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok(LabeledData { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IMAGES_MAGIC.to_be_bytes());
        for d in [n, rows, cols] {
            b.extend(d.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * rows * cols) as usize));
        b
    }

    fn labels(ls: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(LABELS_MAGIC.to_be_bytes());
        b.extend((ls.len() as u32).to_be_bytes());
        b.extend_from_slice(ls);
        b
    }

    #[test]
    fn parses_header_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "i", &images(3, 2, 2, 255));
        let l = write(dir.path(), "l", &labels(&[0, 9, 4]));
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.image_shape(), Some((2, 2)));
        assert_eq!(ds.num_classes(), 10);
        assert!(ds.features().data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels(), &[0, 9, 4]);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut truncated = images(3, 2, 2, 1);
        truncated.truncate(truncated.len() - 1);
        let i_trunc = write(dir.path(), "it", &truncated);
        let l = write(dir.path(), "l", &labels(&[0, 1, 2]));
        assert!(matches!(load_idx(&i_trunc, &l), Err(Error::TruncatedFile(_))));

        let i = write(dir.path(), "i", &images(3, 2, 2, 1));
        let l2 = write(dir.path(), "l2", &labels(&[0, 1]));
        assert!(matches!(
            load_idx(&i, &l2),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));

        // label file passed as images
        assert!(matches!(
            load_idx(&l, &l),
            Err(Error::BadMagic { found: 0x0801, expected: 0x0803 })
        ));
        let short = write(dir.path(), "s", &[0, 0, 8]);
        assert!(matches!(load_idx(&short, &l), Err(Error::TruncatedFile(_))));
    }
}
