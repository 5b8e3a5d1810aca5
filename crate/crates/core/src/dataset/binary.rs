//! `CAPS` dataset files, little-endian throughout:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "CAPS"
//! 4       2           format version (u16)
//! 6       1           channels (u8)
//! 7       1           split (u8: 0 train, 1 test)
//! 8       4           image count N (u32)
//! 12      N*32*32*C*4 image block, f32 HWC per image
//! ...     N*2         labels (u16)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Split, IMAGE_SIZE};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CAPS";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

/// Streams images into a `CAPS` file whose final count is known up front.
pub struct BinaryWriter<W: Write> {
    inner: W,
    channels: usize,
    expected: usize,
    labels: Vec<u16>,
}

impl<W: Write> BinaryWriter<W> {
    pub fn new(mut inner: W, channels: usize, split: Split, count: usize) -> Result<Self> {
        let channels_byte = u8::try_from(channels)
            .map_err(|_| Error::Format(format!("{channels} channels do not fit the header")))?;
        let count_u32 = u32::try_from(count)
            .map_err(|_| Error::Format(format!("{count} images do not fit the header")))?;
        inner.write_all(MAGIC)?;
        inner.write_all(&FORMAT_VERSION.to_le_bytes())?;
        inner.write_all(&[channels_byte, split.to_byte()])?;
        inner.write_all(&count_u32.to_le_bytes())?;
        Ok(BinaryWriter {
            inner,
            channels,
            expected: count,
            labels: Vec::with_capacity(count),
        })
    }

    pub fn push(&mut self, image: &[f32], label: u16) -> Result<()> {
        if self.labels.len() == self.expected {
            return Err(Error::Format(format!("more than the declared {} images", self.expected)));
        }
        if image.len() != IMAGE_SIZE * IMAGE_SIZE * self.channels {
            return Err(Error::Format(format!("image of {} values for {} channels", image.len(), self.channels)));
        }
        let mut buf = Vec::with_capacity(image.len() * 4);
        for v in image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        self.labels.push(label);
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.labels.len() != self.expected {
            return Err(Error::Format(format!(
                "declared {} images but wrote {}",
                self.expected,
                self.labels.len()
            )));
        }
        let mut buf = Vec::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_binary<W: Write>(dataset: &Dataset, w: W) -> Result<W> {
    let mut writer = BinaryWriter::new(w, dataset.channels(), dataset.split(), dataset.len())?;
    for i in 0..dataset.len() {
        writer.push(dataset.image(i), dataset.labels()[i])?;
    }
    writer.finish()
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

/// Fixed-size header fields of a `CAPS` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryHeader {
    pub channels: usize,
    pub split: Split,
    pub count: usize,
}

pub fn read_header<R: Read>(r: &mut R) -> Result<BinaryHeader> {
    let mut header = [0u8; HEADER_LEN];
    read_exact(r, &mut header, "header")?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"CAPS\"", &header[..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let channels = usize::from(header[6]);
    let split = Split::from_byte(header[7])?;
    let count = u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize;
    if channels == 0 {
        return Err(Error::Format("zero channels".into()));
    }
    Ok(BinaryHeader { channels, split, count })
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Dataset> {
    let BinaryHeader { channels, split, count } = read_header(&mut r)?;

    let values = count * IMAGE_SIZE * IMAGE_SIZE * channels;
    let mut bytes = vec![0u8; values * 4];
    read_exact(&mut r, &mut bytes, "image block")?;
    let images: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    drop(bytes);
    let mut label_bytes = vec![0u8; count * 2];
    read_exact(&mut r, &mut label_bytes, "labels")?;
    let labels = label_bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after label block".into()));
    }
    Dataset::new(images, labels, channels, split).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_binary(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_binary(dataset, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    read_binary(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthesize_toy_dataset;

    #[test]
    fn round_trip_is_bitwise() {
        let d = synthesize_toy_dataset(3, 2, 11).unwrap();
        let bytes = write_binary(&d, Vec::new()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 6 * (32 * 32 * 3 * 4) + 6 * 2);
        let back = read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back, d);
        assert!(back.images().iter().zip(d.images()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let d = synthesize_toy_dataset(2, 1, 0).unwrap();
        let mut bytes = write_binary(&d, Vec::new()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_binary(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let d = synthesize_toy_dataset(2, 1, 0).unwrap();
        let bytes = write_binary(&d, Vec::new()).unwrap();
        for cut in [3, HEADER_LEN, bytes.len() - 1] {
            let err = read_binary(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(read_binary(longer.as_slice()).is_err());
    }

    #[test]
    fn bad_version_and_split_rejected() {
        let d = synthesize_toy_dataset(2, 1, 0).unwrap();
        let mut bytes = write_binary(&d, Vec::new()).unwrap();
        bytes[4] = 9;
        assert!(read_binary(bytes.as_slice()).is_err());
        let mut bytes = write_binary(&d, Vec::new()).unwrap();
        bytes[7] = 4;
        assert!(read_binary(bytes.as_slice()).is_err());
    }

    #[test]
    fn writer_enforces_declared_count() {
        let w = BinaryWriter::new(Vec::new(), 1, Split::Train, 2).unwrap();
        assert!(w.finish().is_err());
    }
}
