//! Datasets on disk: a directory holding `manifest.toml` (geometry, class
//! token lists, per-class counts) and `images.f64` (header plus row-major
//! 64-bit floats).
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! offset size  field
//! 0      4     magic "PLDS"
//! 4      4     format version (u32, currently 1)
//! 8      4     image count N (u32)
//! 12     2     height H (u16)
//! 14     2     width W (u16)
//! 16     -     N * H * W * 3 f64 pixel values in [0, 1]
//! ```
//!
//! Images are stored grouped by class in manifest order, so labels are
//! implied by the per-class counts.

use crate::error::{CliError, Result};
use promptlab_core::data::{FewShotDataset, SplitTag};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PLDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const IMAGES_FILE: &str = "images.f64";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    height: usize,
    width: usize,
    /// Token id list naming each class, in class-id order.
    class_names: Vec<Vec<usize>>,
    /// Images per class, in the same order.
    class_counts: Vec<usize>,
}

/// Write a dataset as `manifest.toml` + `images.f64`, creating `dir` if
/// needed. Images are regrouped by class to keep labels implicit.
pub fn save_dataset(dir: &Path, dataset: &FewShotDataset) -> Result<()> {
    dataset.validate()?;
    if dataset.height > u16::MAX as usize || dataset.width > u16::MAX as usize {
        return Err(CliError::config(format!(
            "image geometry {}x{} exceeds the u16 header fields",
            dataset.height, dataset.width
        )));
    }
    if dataset.len() > u32::MAX as usize {
        return Err(CliError::config(format!(
            "{} images exceed the u32 header field",
            dataset.len()
        )));
    }
    std::fs::create_dir_all(dir)?;

    let per_class = dataset.per_class_indices();
    let manifest = Manifest {
        version: VERSION,
        height: dataset.height,
        width: dataset.width,
        class_names: dataset.class_names.clone(),
        class_counts: per_class.iter().map(|ids| ids.len()).collect(),
    };
    let manifest_text =
        toml::to_string_pretty(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_text)?;

    let mut file = std::fs::File::create(dir.join(IMAGES_FILE))?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    header.extend_from_slice(&(dataset.height as u16).to_le_bytes());
    header.extend_from_slice(&(dataset.width as u16).to_le_bytes());
    file.write_all(&header)?;
    for ids in &per_class {
        for &i in ids {
            let mut row = Vec::with_capacity(dataset.images[i].len() * 8);
            for v in &dataset.images[i] {
                row.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&row)?;
        }
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<FewShotDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = toml::from_str(&manifest_text)
        .map_err(|e| CliError::config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != VERSION {
        return Err(CliError::config(format!(
            "unsupported manifest version {} (supported: {VERSION})",
            manifest.version
        )));
    }
    if manifest.class_names.len() != manifest.class_counts.len() {
        return Err(CliError::config(format!(
            "manifest lists {} class names but {} class counts",
            manifest.class_names.len(),
            manifest.class_counts.len()
        )));
    }

    let images_path = dir.join(IMAGES_FILE);
    let mut file = std::fs::File::open(&images_path)
        .map_err(|e| CliError::io(format!("{}: {e}", images_path.display())))?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|e| CliError::io(format!("{}: short header: {e}", images_path.display())))?;
    if &header[0..4] != MAGIC {
        return Err(CliError::config(format!(
            "{}: bad magic {:?}, expected {MAGIC:?}",
            images_path.display(),
            &header[0..4]
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CliError::config(format!(
            "{}: unsupported image file version {version}",
            images_path.display()
        )));
    }
    let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let height = u16::from_le_bytes(header[12..14].try_into().unwrap()) as usize;
    let width = u16::from_le_bytes(header[14..16].try_into().unwrap()) as usize;
    if height != manifest.height || width != manifest.width {
        return Err(CliError::config(format!(
            "{}: header geometry {height}x{width} disagrees with manifest {}x{}",
            images_path.display(),
            manifest.height,
            manifest.width
        )));
    }
    let total: usize = manifest.class_counts.iter().sum();
    if total != n {
        return Err(CliError::config(format!(
            "{}: header counts {n} images but manifest class counts sum to {total}",
            images_path.display()
        )));
    }

    let pixels = height * width * 3;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != n * pixels * 8 {
        return Err(CliError::config(format!(
            "{}: payload is {} bytes, expected {} for {n} images of {height}x{width}",
            images_path.display(),
            payload.len(),
            n * pixels * 8
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * pixels * 8;
        let image: Vec<f64> = payload[start..start + pixels * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        images.push(image);
    }
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in manifest.class_counts.iter().enumerate() {
        labels.extend(std::iter::repeat_n(class, count));
    }

    let dataset = FewShotDataset {
        images,
        labels,
        class_names: manifest.class_names,
        height,
        width,
        split_tag: SplitTag::All,
    };
    dataset.validate()?;
    Ok(dataset)
}
