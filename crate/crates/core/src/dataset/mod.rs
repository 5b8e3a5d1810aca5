//! Labelled 32x32 image collections: validation, the `CAPS` binary format,
//! directory ingestion and a procedural sign generator.

mod binary;
mod classes;
mod directory;
mod synth;

pub use binary::{
    load_binary, read_binary, read_header, save_binary, write_binary, BinaryHeader, BinaryWriter, FORMAT_VERSION, HEADER_LEN,
    MAGIC,
};
pub use classes::{class_name, SIGN_CLASS_NAMES};
pub use directory::{list_images, load_image, load_image_directory, save_png, DirectoryOptions};
pub use synth::synthesize_toy_dataset;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::NUM_SIGN_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of every image.
pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("split must be train or test, got {other:?}"))),
        }
    }
}

/// Images `[N, 32, 32, C]` in `[0, 1]`, stored as `f32`, with labels below 43.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u16>,
    channels: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u16>, channels: usize, split: Split) -> Result<Self> {
        if channels == 0 || channels > 255 {
            return Err(Error::Dataset(format!("unsupported channel count {channels}")));
        }
        let per = IMAGE_SIZE * IMAGE_SIZE * channels;
        if images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixel values for {} labels of {per} values each",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| usize::from(l) >= NUM_SIGN_CLASSES) {
            return Err(Error::Dataset(format!("label {l} at index {i} is outside [0, {NUM_SIGN_CLASSES})")));
        }
        if let Some(i) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!(
                "pixel value {} of image {} is outside [0, 1]",
                images[i],
                i / per
            )));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image_len(&self) -> usize {
        IMAGE_SIZE * IMAGE_SIZE * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        &SIGN_CLASS_NAMES
    }

    /// Gathers the given samples into a `[B, 32, 32, C]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| f64::from(v)));
        }
        let x = Tensor::new(&[indices.len(), IMAGE_SIZE, IMAGE_SIZE, self.channels], data)
            .expect("non-empty batch");
        (x, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// Per-class sample counts over the full label space.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; NUM_SIGN_CLASSES];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    pub fn manifest(&self, source: impl AsRef<Path>) -> DatasetManifest {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            split: self.split,
            count: self.len(),
            channels: self.channels,
            histogram: self.histogram(),
            source: source.as_ref().display().to_string(),
        }
    }

    /// Subset with the given sample order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }
}

/// Summary of a dataset file: counts, class histogram and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub split: Split,
    pub count: usize,
    pub channels: usize,
    pub histogram: Vec<usize>,
    pub source: String,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> Dataset {
        let per = IMAGE_SIZE * IMAGE_SIZE;
        Dataset::new(
            (0..n * per).map(|i| (i % 7) as f32 / 7.0).collect(),
            (0..n).map(|i| (i % 3) as u16).collect(),
            1,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn invariants_enforced() {
        let per = IMAGE_SIZE * IMAGE_SIZE;
        assert!(Dataset::new(vec![0.0; per], vec![43], 1, Split::Train).is_err());
        assert!(Dataset::new(vec![1.5; per], vec![0], 1, Split::Train).is_err());
        assert!(Dataset::new(vec![f32::NAN; per], vec![0], 1, Split::Train).is_err());
        assert!(Dataset::new(vec![0.0; per], vec![0, 1], 1, Split::Train).is_err());
    }

    #[test]
    fn histogram_sums_to_count() {
        let d = tiny(10);
        let m = d.manifest("mem");
        assert_eq!(m.histogram.iter().sum::<usize>(), m.count);
        assert_eq!(&m.histogram[..3], &[4, 3, 3]);
    }

    #[test]
    fn batch_gathers_in_order() {
        let d = tiny(4);
        let (x, y) = d.batch(&[3, 1]);
        assert_eq!(x.shape(), &[2, 32, 32, 1]);
        assert_eq!(y, vec![0, 1]);
        assert_eq!(x.outer(0)[5], f64::from(d.image(3)[5]));
    }
}
