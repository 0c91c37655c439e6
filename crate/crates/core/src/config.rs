//! Training hyperparameters and their on-disk TOML form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference resolution at which the elastic and boundary defaults are stated.
pub const REFERENCE_SIDE: usize = 320;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Unlabeled samples per labeled sample in a batch.
    pub mu: usize,
    /// Confidence threshold for accepting a pseudo-label.
    pub tau: f64,
    /// Weight of the unsupervised loss.
    pub lambda_u: f64,
    /// Labeled samples per batch (B).
    pub labeled_per_batch: usize,
    pub learning_rate: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    /// (height, width) every sample is resized to.
    pub resize_hw: (usize, usize),
    pub num_classes: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotation_range_deg: (f64, f64),
    /// Elastic displacement magnitude in pixels.
    pub elastic_alpha: f64,
    /// Gaussian smoothing of the elastic displacement field, in pixels.
    pub elastic_sigma: f64,
    pub sharpness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub blur_sigma_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub dice_epsilon: f64,
    pub boundary_width: usize,
    pub boundary_theta: usize,
    /// Average DL/BL over the background class as well.
    pub include_background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Group normalization with `norm_groups` groups.
    Group,
    /// One group per channel.
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub norm_groups: usize,
    /// Checkpoint whose encoder weights initialize the encoder.
    pub pretrained_encoder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Include class 0 in the reported mean Dice.
    pub mean_includes_background: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range_deg: (-20.0, 20.0),
            elastic_alpha: 20.0,
            elastic_sigma: 5.0,
            sharpness_range: (0.5, 2.0),
            contrast_range: (0.5, 1.5),
            blur_sigma_range: (0.5, 2.0),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_epsilon: 1e-6,
            boundary_width: 1,
            boundary_theta: 3,
            include_background: true,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            norm: NormKind::Group,
            norm_groups: 4,
            pretrained_encoder: None,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mu: 9,
            tau: 0.90,
            lambda_u: 1.0,
            labeled_per_batch: 1,
            learning_rate: 0.001,
            patience_epochs: 9,
            max_epochs: 200,
            resize_hw: (REFERENCE_SIDE, REFERENCE_SIDE),
            num_classes: 4,
            seed: 0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 96x96, three classes, a small network, elastic and boundary knobs
    /// rescaled.
    pub fn desk() -> Self {
        Self {
            num_classes: 3,
            model: ModelConfig {
                depth: 3,
                base_channels: 8,
                norm_groups: 2,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
        .scaled_to((96, 96))
    }

    /// Sets `resize_hw` and rescales the elastic and boundary-tolerance
    /// parameters proportionally to the shorter side.
    pub fn scaled_to(mut self, hw: (usize, usize)) -> Self {
        let base = Self::default();
        let scale = hw.0.min(hw.1) as f64 / REFERENCE_SIDE as f64;
        self.resize_hw = hw;
        self.augment.elastic_alpha = base.augment.elastic_alpha * scale;
        self.augment.elastic_sigma = base.augment.elastic_sigma * scale;
        self.loss.boundary_theta = ((base.loss.boundary_theta as f64 * scale).round() as usize).max(1);
        self
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Validates and returns self, or every violation as an error.
    pub fn validated(self) -> Result<Self> {
        let v = validate_config(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(v))
        }
    }
}

fn check_range(out: &mut Vec<String>, name: &str, r: (f64, f64)) {
    if !r.0.is_finite() || !r.1.is_finite() {
        out.push(format!("{name} must be finite"));
    } else if r.0 > r.1 {
        out.push(format!("{name} low > high"));
    }
}

/// Lists every violated invariant; empty means valid.
pub fn validate_config(cfg: &TrainConfig) -> Vec<String> {
    let mut out = Vec::new();
    if !(0.0..=1.0).contains(&cfg.tau) {
        out.push("tau out of [0,1]".to_string());
    }
    if cfg.mu < 1 {
        out.push("mu must be ≥ 1".to_string());
    }
    if !(cfg.lambda_u.is_finite() && cfg.lambda_u >= 0.0) {
        out.push("lambda_u must be finite and ≥ 0".to_string());
    }
    if cfg.labeled_per_batch < 1 {
        out.push("labeled_per_batch must be ≥ 1".to_string());
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        out.push("learning_rate must be > 0".to_string());
    }
    if cfg.patience_epochs < 1 {
        out.push("patience_epochs must be ≥ 1".to_string());
    }
    if cfg.max_epochs < 1 {
        out.push("max_epochs must be ≥ 1".to_string());
    }
    if cfg.resize_hw.0 == 0 || cfg.resize_hw.1 == 0 {
        out.push("resize_hw must be positive".to_string());
    }
    if !(2..=256).contains(&cfg.num_classes) {
        out.push("num_classes must be in [2, 256]".to_string());
    }
    let a = &cfg.adam;
    if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
        out.push("adam betas must be in [0,1)".to_string());
    }
    if !(a.eps.is_finite() && a.eps > 0.0) {
        out.push("adam eps must be > 0".to_string());
    }
    let g = &cfg.augment;
    check_range(&mut out, "rotation_range_deg", g.rotation_range_deg);
    check_range(&mut out, "sharpness_range", g.sharpness_range);
    check_range(&mut out, "contrast_range", g.contrast_range);
    check_range(&mut out, "blur_sigma_range", g.blur_sigma_range);
    if g.blur_sigma_range.0 < 0.0 {
        out.push("blur_sigma_range must be ≥ 0".to_string());
    }
    if g.sharpness_range.0 < 0.0 || g.contrast_range.0 < 0.0 {
        out.push("sharpness/contrast factors must be ≥ 0".to_string());
    }
    if !(g.elastic_alpha.is_finite() && g.elastic_alpha >= 0.0) {
        out.push("elastic_alpha must be ≥ 0".to_string());
    }
    if !(g.elastic_sigma.is_finite() && g.elastic_sigma > 0.0) {
        out.push("elastic_sigma must be > 0".to_string());
    }
    let l = &cfg.loss;
    if !(l.dice_epsilon.is_finite() && l.dice_epsilon > 0.0) {
        out.push("dice_epsilon must be > 0".to_string());
    }
    if l.boundary_width < 1 {
        out.push("boundary_width must be ≥ 1".to_string());
    }
    if l.boundary_theta < 1 {
        out.push("boundary_theta must be ≥ 1".to_string());
    }
    let m = &cfg.model;
    if m.depth < 1 {
        out.push("model.depth must be ≥ 1".to_string());
    }
    if m.base_channels < 1 {
        out.push("model.base_channels must be ≥ 1".to_string());
    }
    if m.norm == NormKind::Group && (m.norm_groups < 1 || m.base_channels % m.norm_groups != 0) {
        out.push("model.norm_groups must divide base_channels".to_string());
    }
    let div = 1usize << m.depth.min(16);
    if cfg.resize_hw.0 % div != 0 || cfg.resize_hw.1 % div != 0 {
        out.push(format!(
            "resize_hw {:?} not divisible by 2^depth = {div}",
            cfg.resize_hw
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = TrainConfig {
            mu: 9,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.tau, 0.90);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.patience_epochs, 9);
        assert_eq!(cfg.resize_hw, (320, 320));
        assert_eq!(cfg.augment.rotation_range_deg, (-20.0, 20.0));
        assert!(validate_config(&cfg).is_empty());
        assert!(validate_config(&TrainConfig::desk()).is_empty());
    }

    #[test]
    fn tau_out_of_range() {
        let cfg = TrainConfig {
            tau: 1.5,
            ..TrainConfig::default()
        };
        assert_eq!(validate_config(&cfg), vec!["tau out of [0,1]".to_string()]);
    }

    #[test]
    fn mu_zero() {
        let cfg = TrainConfig {
            mu: 0,
            ..TrainConfig::default()
        };
        assert_eq!(validate_config(&cfg), vec!["mu must be ≥ 1".to_string()]);
    }

    #[test]
    fn reversed_rotation_range_is_named() {
        let mut cfg = TrainConfig::default();
        cfg.augment.rotation_range_deg = (10.0, -10.0);
        let v = validate_config(&cfg);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("rotation_range_deg"));
    }

    #[test]
    fn desk_preset_rescales() {
        let cfg = TrainConfig::desk();
        assert_eq!(cfg.resize_hw, (96, 96));
        assert!((cfg.augment.elastic_alpha - 6.0).abs() < 1e-12);
        assert!((cfg.augment.elastic_sigma - 1.5).abs() < 1e-12);
        assert_eq!(cfg.loss.boundary_theta, 1);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::desk();
        let s = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = TrainConfig::default().to_toml_string();
        s = s.replacen("tau = ", "taux = 0.5\ntau = ", 1);
        assert!(matches!(
            TrainConfig::from_toml_str(&s),
            Err(Error::ConfigParse(_))
        ));
        let nested = TrainConfig::default()
            .to_toml_string()
            .replace("[loss]\n", "[loss]\nbogus = 1\n");
        assert!(TrainConfig::from_toml_str(&nested).is_err());
    }
}
