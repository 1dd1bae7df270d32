//! Turning a split dataset into model samples.

use std::path::Path;

use crate::data::{load_volume, make_slice_samples, read_png, slice_tensor, volume_tensor, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::phantom::MASKS_DIR;
use crate::train::Sample;

/// One `[1, D, H, W]` sample per subject of `split`, labeled at subject level.
pub fn volume_samples(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .subjects_in(split)
        .into_iter()
        .map(|s| Ok(Sample::class(s.id.clone(), volume_tensor(&load_volume(s)?)?, s.label.is_positive())))
        .collect()
}

/// One `[1, H, W]` sample per slice of `split`; slices inherit the subject label.
pub fn slice_samples(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    make_slice_samples(manifest, split)
        .into_iter()
        .map(|s| {
            let id = format!("{}/{:04}", s.subject_id, s.slice_index);
            Ok(Sample::class(id, slice_tensor(&read_png(&s.path)?), s.label.is_positive()))
        })
        .collect()
}

/// Slices of `split` paired with masks from `mask_root/masks/<id>/`, resized
/// to the slice size when they differ. Every `stride`-th slice is kept.
pub fn segmentation_samples(manifest: &DatasetManifest, split: Split, mask_root: &Path, stride: usize) -> Result<Vec<Sample>> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for s in make_slice_samples(manifest, split).into_iter().filter(|s| s.slice_index % stride == 0) {
        let img = read_png(&s.path)?;
        let subject = manifest.subject(&s.subject_id).expect("sample subject is in the manifest");
        let mask_dir = mask_root.join(MASKS_DIR).join(&s.subject_id);
        let mask_count = std::fs::read_dir(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?.count();
        if mask_count != subject.slice_count() {
            return Err(Error::data(&mask_dir, format!(
                "{mask_count} mask slices for {} image slices",
                subject.slice_count()
            )));
        }
        let mask_path = mask_dir.join(s.path.file_name().expect("slice file name"));
        let mut mask = read_png(&mask_path)?;
        if mask.height != img.height || mask.width != img.width {
            mask = crate::data::resize_bilinear(&mask, img.height, img.width)?;
        }
        let classes = mask.data.iter().map(|&v| (v >= 128) as u8).collect();
        out.push(Sample::mask(format!("{}/{:04}", s.subject_id, s.slice_index), slice_tensor(&img), classes));
    }
    Ok(out)
}
