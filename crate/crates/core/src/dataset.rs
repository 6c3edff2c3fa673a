//! On-disk layout of rendered frames and error images.
//!
//! A dataset root holds one directory per frame, `frame_NNNNNN/`. Feature
//! directories contain one PFM per feature kind plus `mask.pgm` and an
//! `rgb.ppm` preview; error directories contain `delta.pfm` and `mask.pgm`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::groundtruth::ErrorImage;
use crate::image::{read_mask, read_pfm, to_u8, write_mask, write_pfm, write_pnm, Image};
use crate::raster::{FeatureImageSet, FeatureKind};
use crate::train::Sample;

pub const FRAME_PREFIX: &str = "frame_";

pub fn frame_dir(root: &Path, frame: usize) -> PathBuf {
    root.join(format!("{FRAME_PREFIX}{frame:06}"))
}

/// Frame directories under `root`, sorted by frame index.
pub fn list_frames(root: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(index) = name.to_str().and_then(|n| n.strip_prefix(FRAME_PREFIX)) else {
            continue;
        };
        let frame = index
            .parse()
            .map_err(|_| Error::parse(root.display().to_string(), 0, format!("bad frame directory `{index}`")))?;
        if entry.path().is_dir() {
            out.push((frame, entry.path()));
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no {FRAME_PREFIX}* directories in {}", root.display())));
    }
    out.sort();
    Ok(out)
}

pub fn write_features(dir: &Path, set: &FeatureImageSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for kind in FeatureKind::ALL {
        write_pfm(set.channel(kind), &dir.join(format!("{}.pfm", kind.name())))?;
    }
    write_mask(&set.mask, &dir.join("mask.pgm"))?;
    write_pnm(&to_u8(&set.rgb), &dir.join("rgb.ppm"))
}

pub fn read_features(dir: &Path) -> Result<FeatureImageSet> {
    let mask = read_mask(&dir.join("mask.pgm"))?;
    let channels = FeatureKind::ALL
        .into_iter()
        .map(|kind| Ok((kind, read_pfm(&dir.join(format!("{}.pfm", kind.name())))?)))
        .collect::<Result<Vec<_>>>()?;
    FeatureImageSet::from_channels(channels, mask)
}

/// Errors are stored in single precision.
pub fn write_error(dir: &Path, err: &ErrorImage) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pfm(&err.delta_f32(), &dir.join("delta.pfm"))?;
    write_mask(&err.mask, &dir.join("mask.pgm"))
}

pub fn read_error(dir: &Path) -> Result<ErrorImage> {
    let delta = read_pfm(&dir.join("delta.pfm"))?;
    let mask = read_mask(&dir.join("mask.pgm"))?;
    if delta.channels() != 1 || !delta.same_size(&mask) {
        return Err(Error::Shape(format!("{}: delta and mask sizes differ", dir.display())));
    }
    let data = delta.data().iter().map(|&v| v as f64).collect();
    Ok(ErrorImage {
        delta: Image::from_vec(delta.width(), delta.height(), 1, data)?,
        mask,
    })
}

/// Reads every frame of a feature root.
pub fn read_feature_root(root: &Path) -> Result<Vec<(usize, FeatureImageSet)>> {
    list_frames(root)?
        .into_iter()
        .map(|(frame, dir)| Ok((frame, read_features(&dir)?)))
        .collect()
}

/// Pairs the frames of a feature root with those of an error root. Both
/// must list the same frames.
pub fn read_samples(features: &Path, errors: &Path) -> Result<Vec<Sample>> {
    let f = list_frames(features)?;
    let e = list_frames(errors)?;
    let fi: Vec<usize> = f.iter().map(|p| p.0).collect();
    let ei: Vec<usize> = e.iter().map(|p| p.0).collect();
    if fi != ei {
        return Err(Error::Shape(format!(
            "{} and {} hold different frames",
            features.display(),
            errors.display()
        )));
    }
    f.into_iter()
        .zip(e)
        .map(|((frame, fd), (_, ed))| Sample::new(read_features(&fd)?, read_error(&ed)?, frame))
        .collect()
}
