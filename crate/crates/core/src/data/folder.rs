//! Directory dataset format.
//!
//! A dataset directory holds `manifest.json` plus one image file and one
//! mask file per sample. Both use the same container: an ASCII header line
//! `LMOET <dtype> <height> <width>\n` followed by row-major little-endian
//! values, `f32` for images and `u16` for masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "lomoe-dataset/1";
const MAGIC: &str = "LMOET";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    classes: Vec<u16>,
    samples: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    image: String,
    mask: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FolderDataset {
    /// Declared foreground-and-background classes of the dataset.
    pub classes: Vec<u16>,
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

fn container(dtype: &str, h: usize, w: usize, payload: Vec<u8>) -> Vec<u8> {
    let mut out = format!("{MAGIC} {dtype} {h} {w}\n").into_bytes();
    out.extend(payload);
    out
}

fn parse_err(file: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.display().to_string(), offset: offset as u64, msg: msg.into() }
}

/// Parses a container, returning `(height, width, payload)`.
fn read_container<'a>(file: &Path, bytes: &'a [u8], dtype: &str, width: usize) -> Result<(usize, usize, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err(file, bytes.len(), "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| parse_err(file, e.valid_up_to(), "header is not UTF-8"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != MAGIC {
        return Err(parse_err(file, 0, format!("expected `{MAGIC} <dtype> <h> <w>` header")));
    }
    if fields[1] != dtype {
        return Err(parse_err(file, MAGIC.len() + 1, format!("dtype {}, expected {dtype}", fields[1])));
    }
    let dim = |i: usize| -> Result<usize> {
        let at = fields[..i].iter().map(|f| f.len() + 1).sum();
        fields[i].parse().map_err(|_| parse_err(file, at, format!("bad dimension {:?}", fields[i])))
    };
    let (h, w) = (dim(2)?, dim(3)?);
    let payload = &bytes[nl + 1..];
    let want = h * w * width;
    if payload.len() != want {
        return Err(parse_err(
            file,
            nl + 1 + payload.len().min(want),
            format!("payload is {} bytes, expected {want}", payload.len()),
        ));
    }
    Ok((h, w, payload))
}

/// Writes `samples` with the declared `classes` into `dir`.
pub fn write_folder_dataset(dir: &Path, classes: &[u16], samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = s.size();
        let image = format!("{i:05}.img");
        let mask = format!("{i:05}.mask");
        let img_bytes = container("f32", h, w, s.image.to_le_bytes());
        let mask_bytes = container("u16", h, w, s.mask.iter().flat_map(|v| v.to_le_bytes()).collect());
        std::fs::write(dir.join(&image), img_bytes).map_err(|e| Error::io(dir.join(&image), e))?;
        std::fs::write(dir.join(&mask), mask_bytes).map_err(|e| Error::io(dir.join(&mask), e))?;
        entries.push(Entry { image, mask });
    }
    let manifest = Manifest { format: FORMAT.to_string(), classes: classes.to_vec(), samples: entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(dir.join(MANIFEST), text).map_err(|e| Error::io(dir.join(MANIFEST), e))
}

/// Loads a dataset directory, validating shapes and label ids. A directory
/// without a manifest and without files is an empty dataset.
pub fn load_folder_dataset(dir: &Path) -> Result<FolderDataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        let empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if empty {
            return Ok(FolderDataset {
                classes: Vec::new(),
                samples: Vec::new(),
                warnings: vec![format!("{} is empty; loaded no samples", dir.display())],
            });
        }
        return Err(Error::io(manifest_path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        parse_err(&manifest_path, crate::error::text_offset(&text, e.line(), e.column()) as usize, e.to_string())
    })?;
    if manifest.format != FORMAT {
        return Err(parse_err(&manifest_path, 0, format!("unsupported format {:?}", manifest.format)));
    }
    let mut allowed = manifest.classes.clone();
    if !allowed.contains(&0) {
        allowed.push(0);
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    let mut shape: Option<(usize, usize)> = None;
    for entry in &manifest.samples {
        let ipath = dir.join(&entry.image);
        let mpath = dir.join(&entry.mask);
        let ibytes = std::fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let mbytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let (h, w, ipay) = read_container(&ipath, &ibytes, "f32", 4)?;
        let (mh, mw, mpay) = read_container(&mpath, &mbytes, "u16", 2)?;
        if (mh, mw) != (h, w) {
            return Err(Error::shape(format!("{}: mask is {mh}x{mw}, image is {h}x{w}", mpath.display())));
        }
        if let Some(s) = shape {
            if s != (h, w) {
                return Err(Error::shape(format!("{}: {h}x{w} differs from {}x{}", ipath.display(), s.0, s.1)));
            }
        }
        shape = Some((h, w));
        let image: Vec<f32> = ipay.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if let Some(i) = image.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(&ipath, ibytes.len() - ipay.len() + 4 * i, "non-finite pixel"));
        }
        let mask: Vec<u16> = mpay.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        if let Some(&bad) = mask.iter().find(|c| !allowed.contains(c)) {
            return Err(Error::Validation(format!(
                "{}: label id {bad} is not among the declared classes {:?}",
                mpath.display(),
                manifest.classes
            )));
        }
        samples.push(Sample::new(Tensor::new([h, w], image)?, mask)?);
    }
    let mut warnings = Vec::new();
    if samples.is_empty() {
        warnings.push(format!("{} lists no samples", manifest_path.display()));
    }
    Ok(FolderDataset { classes: manifest.classes, samples, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_parse_errors_carry_offsets() {
        let p = Path::new("x.img");
        let err = read_container(p, b"LMOET f32 2 x\n", "f32", 4).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 12, .. }), "{err}");
        let err = read_container(p, b"LMOET f32 1 1\n\0\0", "f32", 4).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 16, .. }), "{err}");
        let err = read_container(p, b"LMOET u16 1 1\n\0\0", "f32", 4).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 6, .. }), "{err}");
    }
}
