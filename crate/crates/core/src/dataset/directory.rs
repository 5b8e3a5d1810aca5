//! Ingestion of `<root>/<label>/<image>` trees (PPM mandatory, PNG optional).

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use rayon::prelude::*;

use super::{Dataset, Split, IMAGE_SIZE};
use crate::capsule::NUM_SIGN_CLASSES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectoryOptions {
    pub split: Split,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    /// Bilinearly resample images that are not 32x32 instead of rejecting them.
    pub resize: bool,
}

impl Default for DirectoryOptions {
    fn default() -> Self {
        DirectoryOptions {
            split: Split::Train,
            channels: 3,
            resize: false,
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        .unwrap_or(false)
}

fn collect_files(root: &Path) -> Result<Vec<(PathBuf, u16)>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let dir = entry?.path();
        if !dir.is_dir() {
            continue;
        }
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label: usize = name.parse().map_err(|_| {
            Error::Dataset(format!("class directory {} is not an integer label", dir.display()))
        })?;
        if label >= NUM_SIGN_CLASSES {
            return Err(Error::Dataset(format!(
                "class directory {} has label {label} outside [0, {NUM_SIGN_CLASSES})",
                dir.display()
            )));
        }
        for f in std::fs::read_dir(&dir)? {
            let path = f?.path();
            if path.is_file() && is_image(&path) {
                files.push((path, label as u16));
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    Ok(files)
}

fn decode(path: &Path, opts: &DirectoryOptions) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let img = if img.width() as usize == IMAGE_SIZE && img.height() as usize == IMAGE_SIZE {
        img
    } else if opts.resize {
        DynamicImage::from(image::imageops::resize(
            &img.to_rgb8(),
            IMAGE_SIZE as u32,
            IMAGE_SIZE as u32,
            FilterType::Triangle,
        ))
    } else {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!(
                "image is {}x{}, expected {IMAGE_SIZE}x{IMAGE_SIZE} (enable resizing to resample)",
                img.width(),
                img.height()
            ),
        });
    };
    let raw = match opts.channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(Error::Dataset(format!("unsupported channel count {c}"))),
    };
    Ok(raw.into_iter().map(|b| f32::from(b) / 255.0).collect())
}

/// Decodes one image file into `[32, 32, channels]` values in [0, 1].
pub fn load_image(path: impl AsRef<Path>, channels: usize, resize: bool) -> Result<Vec<f32>> {
    let opts = DirectoryOptions {
        channels,
        resize,
        ..DirectoryOptions::default()
    };
    decode(path.as_ref(), &opts)
}

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Writes a `[32, 32, channels]` image in [0, 1] as PNG.
pub fn save_png(path: impl AsRef<Path>, image: &[f32], channels: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Dataset(format!("unsupported channel count {c}"))),
    };
    if bytes.len() != IMAGE_SIZE * IMAGE_SIZE * channels {
        return Err(Error::shape("save_png", format!("{} values for {channels} channels", bytes.len())));
    }
    image::save_buffer_with_format(
        path,
        &bytes,
        IMAGE_SIZE as u32,
        IMAGE_SIZE as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads every image under `root`, ordered lexicographically by path.
pub fn load_image_directory(root: impl AsRef<Path>, opts: &DirectoryOptions) -> Result<Dataset> {
    let files = collect_files(root.as_ref())?;
    let decoded: Vec<Vec<f32>> = files
        .par_iter()
        .map(|(p, _)| decode(p, opts))
        .collect::<Result<_>>()?;
    let labels = files.iter().map(|&(_, l)| l).collect();
    Dataset::new(decoded.concat(), labels, opts.channels, opts.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_ppm(path: &Path, size: u32, shade: u8) {
        let img = RgbImage::from_pixel(size, size, Rgb([shade, shade / 2, 255 - shade]));
        img.save_with_format(path, image::ImageFormat::Pnm).unwrap();
    }

    #[test]
    fn two_classes_three_images() {
        let dir = tempfile::tempdir().unwrap();
        for (label, name) in [(0, "00000"), (7, "00007")] {
            let d = dir.path().join(name);
            std::fs::create_dir(&d).unwrap();
            for k in 0..3 {
                write_ppm(&d.join(format!("img_{k}.ppm")), 32, 40 * k + label as u8);
            }
            std::fs::write(d.join("GT.csv"), "ignored").unwrap();
        }
        let ds = load_image_directory(dir.path(), &DirectoryOptions::default()).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.histogram()[0], 3);
        assert_eq!(ds.histogram()[7], 3);
        assert_eq!(ds.labels(), &[0, 0, 0, 7, 7, 7]);
        let again = load_image_directory(dir.path(), &DirectoryOptions::default()).unwrap();
        assert_eq!(ds, again);
        assert!((ds.image(1)[0] - 40.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn wrong_size_rejected_unless_resizing() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("3");
        std::fs::create_dir(&d).unwrap();
        write_ppm(&d.join("big.ppm"), 48, 100);
        let err = load_image_directory(dir.path(), &DirectoryOptions::default()).unwrap_err();
        assert!(err.to_string().contains("big.ppm"), "{err}");
        let opts = DirectoryOptions { resize: true, channels: 1, ..Default::default() };
        let ds = load_image_directory(dir.path(), &opts).unwrap();
        assert_eq!(ds.image_len(), 1024);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<f32> = (0..32 * 32 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let path = dir.path().join("x.png");
        save_png(&path, &img, 3).unwrap();
        assert_eq!(load_image(&path, 3, false).unwrap(), img);
        assert_eq!(list_images(dir.path()).unwrap(), vec![path]);
    }

    #[test]
    fn malformed_trees_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_directory(dir.path(), &DirectoryOptions::default()).is_err());

        std::fs::create_dir(dir.path().join("43")).unwrap();
        write_ppm(&dir.path().join("43/a.ppm"), 32, 1);
        assert!(load_image_directory(dir.path(), &DirectoryOptions::default()).is_err());
        std::fs::remove_dir_all(dir.path().join("43")).unwrap();

        std::fs::create_dir(dir.path().join("stop")).unwrap();
        assert!(load_image_directory(dir.path(), &DirectoryOptions::default()).is_err());
        std::fs::remove_dir_all(dir.path().join("stop")).unwrap();

        std::fs::create_dir(dir.path().join("1")).unwrap();
        std::fs::write(dir.path().join("1/broken.ppm"), b"P6\n32 32\n255\nxx").unwrap();
        let err = load_image_directory(dir.path(), &DirectoryOptions::default()).unwrap_err();
        assert!(err.to_string().contains("broken.ppm"), "{err}");
    }
}
