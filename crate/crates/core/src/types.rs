//! Pixel-grid carriers shared across the crate.
//!
//! All grids are stored planar (channel-major): element `(c, y, x)` lives at
//! `c * H * W + y * W + x`.

use crate::error::{Error, Result};

/// Tolerance on per-pixel probability sums.
pub const PROB_SUM_TOL: f64 = 1e-5;

/// Real-valued image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]`. Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(height, width, channels, data)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Integer class-index mask with an explicit class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl MaskMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMask("dimensions must be positive".into()));
        }
        if !(2..=256).contains(&num_classes) {
            return Err(Error::InvalidMask(format!(
                "num_classes must be in [2, 256], got {num_classes}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::InvalidMask(format!(
                "expected {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|v| **v as usize >= num_classes) {
            return Err(Error::InvalidMask(format!(
                "label {v} >= num_classes {num_classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, class: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Sorted list of classes that occur at least once.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.num_classes as u8).filter(|c| seen[*c as usize]).collect()
    }

    /// Planar one-hot encoding, `L x H x W`.
    pub fn one_hot(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; self.num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize * n + i] = 1.0;
        }
        out
    }

    pub fn to_prob_map(&self) -> ProbMap {
        ProbMap {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            probs: self.one_hot(),
        }
    }
}

/// Per-pixel class distribution, `L x H x W` planar.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    /// Validates row-stochasticity within [`PROB_SUM_TOL`].
    pub fn new(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        let map = Self::new_unchecked(height, width, num_classes, probs)?;
        let n = height * width;
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..num_classes {
                let p = map.probs[c * n + i];
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::InvalidProbMap(format!("probability {p} at pixel {i}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidProbMap(format!(
                    "pixel {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(map)
    }

    /// Shape checks only. Losses accept arbitrary nonnegative scores through
    /// this path (finite-difference probes step off the simplex).
    pub fn new_unchecked(height: usize, width: usize, num_classes: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes < 2 {
            return Err(Error::InvalidProbMap(format!(
                "bad shape {height}x{width}x{num_classes}"
            )));
        }
        if probs.len() != height * width * num_classes {
            return Err(Error::InvalidProbMap(format!(
                "expected {} values, got {}",
                height * width * num_classes,
                probs.len()
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            probs,
        })
    }

    /// Per-pixel softmax of planar logits.
    pub fn from_logits(height: usize, width: usize, num_classes: usize, logits: &[f64]) -> Result<Self> {
        let n = height * width;
        if logits.len() != n * num_classes {
            return Err(Error::InvalidProbMap("logit count mismatch".into()));
        }
        let mut probs = vec![0.0; logits.len()];
        for i in 0..n {
            let max = (0..num_classes)
                .map(|c| logits[c * n + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..num_classes {
                let e = (logits[c * n + i] - max).exp();
                probs[c * n + i] = e;
                sum += e;
            }
            for c in 0..num_classes {
                probs[c * n + i] /= sum;
            }
        }
        Self::new_unchecked(height, width, num_classes, probs)
    }

    pub fn uniform(height: usize, width: usize, num_classes: usize) -> Result<Self> {
        Self::new_unchecked(
            height,
            width,
            num_classes,
            vec![1.0 / num_classes as f64; height * width * num_classes],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.probs[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.probs[(c * self.height + y) * self.width + x]
    }

    /// Largest deviation of a per-pixel sum from 1.
    pub fn max_sum_deviation(&self) -> f64 {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let s: f64 = (0..self.num_classes).map(|c| self.probs[c * n + i]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub image: Image,
    pub mask: MaskMap,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, image: Image, mask: MaskMap) -> Result<Self> {
        check_pair(&image, &mask)?;
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Image,
}

/// Rejects an (image, mask) pair whose spatial sizes differ.
pub fn check_pair(image: &Image, mask: &MaskMap) -> Result<()> {
    if image.hw() != mask.hw() {
        return Err(Error::ShapeMismatch(format!(
            "image is {:?}, mask is {:?}",
            image.hw(),
            mask.hw()
        )));
    }
    Ok(())
}

/// Pseudo-label built from a weak-branch prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Per-pixel argmax class.
    pub label_mask: MaskMap,
    /// Mean over pixels of the per-pixel max probability.
    pub confidence: f64,
    /// Whether `confidence >= tau`.
    pub accepted: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5, f32::NAN]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn mask_rejects_label_above_class_count() {
        assert!(MaskMap::new(1, 2, 2, vec![0, 2]).is_err());
        assert!(MaskMap::new(1, 2, 3, vec![0, 2]).is_ok());
        assert!(MaskMap::new(1, 2, 1, vec![0, 0]).is_err());
    }

    #[test]
    fn probmap_checks_row_sums() {
        assert!(ProbMap::new(1, 1, 2, vec![0.5, 0.5]).is_ok());
        assert!(ProbMap::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![1.0 + 5e-6, 0.0]).is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = vec![3.0, -1.0, 0.5, 100.0, 2.0, -50.0];
        let p = ProbMap::from_logits(1, 2, 3, &logits).unwrap();
        assert!(p.max_sum_deviation() < 1e-12);
    }

    #[test]
    fn pair_check_rejects_mismatch() {
        let img = Image::zeros(2, 3, 1).unwrap();
        let mask = MaskMap::filled(3, 2, 2, 0).unwrap();
        assert!(matches!(
            LabeledSample::new("a", img, mask),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn one_hot_layout_is_planar() {
        let m = MaskMap::new(1, 3, 3, vec![0, 2, 1]).unwrap();
        assert_eq!(m.one_hot(), vec![1., 0., 0., 0., 0., 1., 0., 1., 0.]);
        assert_eq!(m.classes_present(), vec![0, 1, 2]);
    }
}
