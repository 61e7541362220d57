//! Datasets of (HR target, LR measurement, backbone output) triples.
//!
//! Measurements are always regenerated from the HR image through the
//! configured operator when a dataset is built, never loaded stale, so the
//! feasibility invariants of downstream solves hold exactly.

use std::path::Path;

use crate::color::to_luma;
use crate::error::{Error, Result};
use crate::io;
use crate::measurement::{bicubic_upsample, LinearOperator, MeasurementModel, OperatorKind};
use crate::scalar::Scalar;
use crate::tensor::{ImageTensor, PaddingMode};

/// One training/evaluation item: HR target, regenerated measurement, and the
/// backbone output in HR shape.
#[derive(Debug, Clone)]
pub struct DatasetItem<T: Scalar> {
    pub name: String,
    pub hr: ImageTensor<T>,
    pub b: ImageTensor<T>,
    pub w: ImageTensor<T>,
}

impl<T: Scalar> DatasetItem<T> {
    pub fn model(
        &self,
        kind: &OperatorKind<T>,
        boundary: PaddingMode,
        epsilon: T,
    ) -> Result<MeasurementModel<T>> {
        let op = LinearOperator::new(kind.clone(), boundary, self.hr.height(), self.hr.width())?;
        MeasurementModel::new(op, self.b.clone(), epsilon)
    }
}

/// Patch extraction origin, recorded alongside each item.
#[derive(Debug, Clone)]
pub struct SourceRecord {
    pub file: String,
    pub y0: usize,
    pub x0: usize,
}

#[derive(Debug, Clone)]
pub struct PatchDataset<T: Scalar> {
    pub items: Vec<DatasetItem<T>>,
    pub sources: Vec<SourceRecord>,
    pub patch_size: usize,
    pub scale: usize,
}

/// Optional geometric augmentation of training patches (off by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    /// Horizontal/vertical flips and quarter rotations (the dihedral group
    /// of the square patch).
    FlipsRotations,
}

fn dihedral<T: Scalar>(img: &ImageTensor<T>, variant: usize) -> ImageTensor<T> {
    let (h, w, c) = img.shape();
    debug_assert_eq!(h, w, "augmentation assumes square patches");
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match variant {
                0 => (y, x),
                1 => (y, w - 1 - x),         // horizontal flip
                2 => (h - 1 - y, x),         // vertical flip
                3 => (h - 1 - y, w - 1 - x), // 180 degrees
                4 => (x, y),                 // transpose
                5 => (x, h - 1 - y),         // rotate 90
                6 => (w - 1 - x, y),         // rotate 270
                _ => (w - 1 - x, h - 1 - y), // anti-transpose
            };
            for ch in 0..c {
                out.set(y, x, ch, img.get(sy, sx, ch));
            }
        }
    }
    out
}

/// Crop an image so both dimensions are multiples of the scale.
pub fn modcrop<T: Scalar>(img: &ImageTensor<T>, scale: usize) -> ImageTensor<T> {
    let h = img.height() / scale * scale;
    let w = img.width() / scale * scale;
    img.crop(0, 0, h, w)
}

impl<T: Scalar> PatchDataset<T> {
    /// Extract `patch x patch` HR patches on a stride grid and regenerate the
    /// measurement and bicubic backbone output per patch.
    pub fn from_hr_images(
        images: &[(String, ImageTensor<T>)],
        scale: usize,
        patch: usize,
        stride: usize,
        kind: &OperatorKind<T>,
        boundary: PaddingMode,
    ) -> Result<Self> {
        Self::from_hr_images_augmented(images, scale, patch, stride, kind, boundary, Augment::None)
    }

    /// Patch extraction with optional flip/rotation augmentation.
    pub fn from_hr_images_augmented(
        images: &[(String, ImageTensor<T>)],
        scale: usize,
        patch: usize,
        stride: usize,
        kind: &OperatorKind<T>,
        boundary: PaddingMode,
        augment: Augment,
    ) -> Result<Self> {
        if !patch.is_multiple_of(scale) {
            return Err(Error::Config(format!(
                "patch size {patch} must be divisible by scale {scale}"
            )));
        }
        let op = LinearOperator::new(kind.clone(), boundary, patch, patch)?;
        let mut items = Vec::new();
        let mut sources = Vec::new();
        for (name, img) in images {
            let luma = to_luma(img)?;
            if luma.height() < patch || luma.width() < patch {
                continue;
            }
            let mut ys: Vec<usize> = (0..=(luma.height() - patch))
                .step_by(stride.max(1))
                .collect();
            let mut xs: Vec<usize> = (0..=(luma.width() - patch))
                .step_by(stride.max(1))
                .collect();
            // Cover the right/bottom borders like standard SR patchers.
            if *ys.last().unwrap() != luma.height() - patch {
                ys.push(luma.height() - patch);
            }
            if *xs.last().unwrap() != luma.width() - patch {
                xs.push(luma.width() - patch);
            }
            let variants = match augment {
                Augment::None => 1usize,
                Augment::FlipsRotations => 8,
            };
            for &y0 in &ys {
                for &x0 in &xs {
                    let base = luma.crop(y0, x0, patch, patch);
                    for v in 0..variants {
                        let hr = if v == 0 {
                            base.clone()
                        } else {
                            dihedral(&base, v)
                        };
                        let b = op.apply(&hr)?;
                        let w = bicubic_upsample(&b, scale)?;
                        items.push(DatasetItem {
                            name: format!("{name}+{y0}+{x0}+{v}"),
                            hr,
                            b,
                            w,
                        });
                        sources.push(SourceRecord {
                            file: name.clone(),
                            y0,
                            x0,
                        });
                    }
                }
            }
        }
        if items.is_empty() {
            return Err(Error::Config("no patches could be extracted".into()));
        }
        Ok(Self {
            items,
            sources,
            patch_size: patch,
            scale,
        })
    }

    /// One item per image (modcropped), for validation and evaluation sets.
    pub fn whole_images(
        images: &[(String, ImageTensor<T>)],
        scale: usize,
        kind: &OperatorKind<T>,
        boundary: PaddingMode,
    ) -> Result<Self> {
        let mut items = Vec::new();
        let mut sources = Vec::new();
        for (name, img) in images {
            let luma = modcrop(&to_luma(img)?, scale);
            if luma.height() < scale || luma.width() < scale {
                return Err(Error::dimension(format!(
                    "image `{name}` too small for scale {scale}"
                )));
            }
            let op = LinearOperator::new(kind.clone(), boundary, luma.height(), luma.width())?;
            let b = op.apply(&luma)?;
            let w = bicubic_upsample(&b, scale)?;
            items.push(DatasetItem {
                name: name.clone(),
                hr: luma,
                b,
                w,
            });
            sources.push(SourceRecord {
                file: name.clone(),
                y0: 0,
                x0: 0,
            });
        }
        Ok(Self {
            items,
            sources,
            patch_size: 0,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// FNV-1a digest over the patch bits; stable across runs for the same
    /// inputs and extraction settings.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf29ce484222325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for item in &self.items {
            for &v in item.hr.as_slice() {
                feed(&v.to_f64_c().to_le_bytes());
            }
            for &v in item.b.as_slice() {
                feed(&v.to_f64_c().to_le_bytes());
            }
        }
        hash
    }
}

/// Load every readable PNG/PGM in a directory, sorted by file name.
pub fn load_image_dir<T: Scalar>(dir: &Path) -> Result<Vec<(String, ImageTensor<T>)>> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|x| x.to_str()),
                Some("png") | Some("pgm") | Some("ten")
            )
        })
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for path in entries {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        out.push((name, io::read_image_any(&path)?));
    }
    Ok(out)
}
