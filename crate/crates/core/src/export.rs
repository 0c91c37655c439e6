//! Writes hard predictions as indexed mask images.

use std::path::{Path, PathBuf};

use crate::data::io::write_mask;
use crate::error::Result;
use crate::model::Model;
use crate::pseudolabel::pseudo_mask;
use crate::types::{MaskMap, UnlabeledSample};

/// One `<id>.png` per input under `out_dir`, pixel value = predicted class.
/// Returns the written paths in input order.
pub fn predict_export(model: &Model, images: &[UnlabeledSample], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    images
        .iter()
        .map(|s| {
            let mask = predict_mask(model, s)?;
            let path = out_dir.join(format!("{}.png", s.id));
            write_mask(&path, &mask)?;
            Ok(path)
        })
        .collect()
}

pub fn predict_mask(model: &Model, sample: &UnlabeledSample) -> Result<MaskMap> {
    Ok(pseudo_mask(&model.predict_one(&sample.image)?))
}
