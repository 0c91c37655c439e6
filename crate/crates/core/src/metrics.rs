//! Dice overlap on hard masks and the per-dataset report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::MaskMap;

/// `2|P ∩ T| / (|P| + |T|)` for one class; 1.0 when the class is absent from both.
pub fn dice_score(pred: &MaskMap, target: &MaskMap, class_id: usize) -> Result<f64> {
    if pred.hw() != target.hw() {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {:?}, target is {:?}",
            pred.hw(),
            target.hw()
        )));
    }
    if class_id >= pred.num_classes() || class_id >= target.num_classes() {
        return Err(Error::InvalidMask(format!("class {class_id} out of range")));
    }
    let c = class_id as u8;
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (a, b) in pred.labels().iter().zip(target.labels()) {
        let (ia, ib) = (*a == c, *b == c);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Per-class Dice averaged over images, their mean, and the mean supervised
/// loss over the same images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_images: usize,
    pub per_class_dice: Vec<f64>,
    /// Unweighted mean of `per_class_dice`, starting at class 1 unless
    /// `mean_includes_background`.
    pub mean_dice: f64,
    pub mean_includes_background: bool,
    pub loss: f64,
}

impl MetricsReport {
    /// Builds the report from per-image, per-class Dice rows.
    pub fn from_rows(rows: &[Vec<f64>], losses: &[f64], mean_includes_background: bool) -> Self {
        let l = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let per_class_dice: Vec<f64> = (0..l).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let first = usize::from(!mean_includes_background).min(l);
        let used = &per_class_dice[first..];
        let mean_dice = if used.is_empty() {
            0.0
        } else {
            used.iter().sum::<f64>() / used.len() as f64
        };
        Self {
            num_images: rows.len(),
            per_class_dice,
            mean_dice,
            mean_includes_background,
            loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
        }
    }
}
