//! Experiment configuration, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complementary::TransformerConfig;
use crate::data::DataConfig;
use crate::encoder::{EncoderConfig, MIN_INPUT_SIDE};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::patch::CropMode;

/// Scene generator knobs beyond size, class count and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub object_min: usize,
    pub object_max: usize,
    pub second_class: f64,
    pub distractors_max: usize,
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        SceneConfig {
            object_min: d.object_min,
            object_max: d.object_max,
            second_class: d.second_class,
            distractors_max: d.distractors_max,
            noise: d.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Foreground class count K.
    pub classes: usize,
    pub scenes: usize,
    pub batch_size: usize,
    pub crop: CropMode,
    /// Side every proposal patch is resized to.
    pub patch_side: usize,
    /// Synthetic proposals per image when no box file is given.
    pub proposals_per_image: usize,
    /// `[l1, l2, l3, l4]` for erase, preserve, total variation, classification.
    pub lambda: [f64; 4],
    /// Threshold applied to previous-epoch attention before erasing.
    pub threshold: f64,
    /// Attention below this is background in pseudo-labels.
    pub background_threshold: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub encoder_channels: Vec<usize>,
    /// Conv layer after which features are 2x average-pooled; negative disables pooling.
    pub pool_after: i64,
    pub key_dim: usize,
    pub cam_epochs: usize,
    pub cam_learning_rate: f64,
    pub segmenter_epochs: usize,
    pub segmenter_learning_rate: f64,
    pub segmenter_channels: usize,
    pub include_background: bool,
    pub scene: SceneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            image_size: 32,
            classes: 4,
            scenes: 200,
            batch_size: 3,
            crop: CropMode::Grid { side: 4 },
            patch_side: 8,
            proposals_per_image: 4,
            lambda: [1.0, 1.0, 0.8, 1.0],
            threshold: 0.3,
            background_threshold: 0.3,
            epochs: 20,
            learning_rate: 0.01,
            encoder_channels: vec![3, 8, 16, 16],
            pool_after: 1,
            key_dim: 16,
            cam_epochs: 20,
            cam_learning_rate: 0.01,
            segmenter_epochs: 5,
            segmenter_learning_rate: 0.05,
            segmenter_channels: 12,
            include_background: false,
            scene: SceneConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        let [a, b, c, d] = self.lambda;
        LossWeights {
            erase: a,
            preserve: b,
            tv: c,
            class: d,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.encoder_channels.clone(),
            pool_after: usize::try_from(self.pool_after).ok(),
            classes: self.classes,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        let c = *self.encoder_channels.last().unwrap_or(&0);
        TransformerConfig {
            channels: c,
            d_k: self.key_dim,
            d_v: c,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            seed: self.seed,
            image_size: self.image_size,
            classes: self.classes,
            scenes: self.scenes,
            object_min: self.scene.object_min,
            object_max: self.scene.object_max,
            second_class: self.scene.second_class,
            distractors_max: self.scene.distractors_max,
            noise: self.scene.noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!(
                "batch_size must be at least 2 for cross-image edges, got {}",
                self.batch_size
            ));
        }
        for (name, t) in [
            ("threshold", self.threshold),
            ("background_threshold", self.background_threshold),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {t}"));
            }
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("cam_learning_rate", self.cam_learning_rate),
            ("segmenter_learning_rate", self.segmenter_learning_rate),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        self.weights().validate()?;
        self.encoder().validate()?;
        if self.key_dim == 0 || self.segmenter_channels == 0 {
            return fail("key_dim and segmenter_channels must be positive".into());
        }
        match self.crop {
            CropMode::Grid { side } => {
                if side == 0 || self.image_size < MIN_INPUT_SIDE * side {
                    return fail(format!(
                        "grid side {side} needs images of at least {} px, got {}",
                        MIN_INPUT_SIDE * side.max(1),
                        self.image_size
                    ));
                }
            }
            CropMode::Proposals { k } => {
                if k == 0 || self.patch_side < MIN_INPUT_SIDE {
                    return fail(format!("proposal mode needs k >= 1 and patch_side >= {MIN_INPUT_SIDE}"));
                }
            }
        }
        self.data().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_toml();
        assert!(text.contains("batch_size = 3"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.weights(), LossWeights::default());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\ncrop = { mode = \"proposals\", k = 2 }\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.crop, CropMode::Proposals { k: 2 });
        assert_eq!(c.epochs, ExperimentConfig::default().epochs);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "batch_size = 1",
            "threshold = 1.5",
            "lambda = [1.0, -1.0, 1.0, 1.0]",
            "crop = { mode = \"grid\", side = 8 }",
            "unknown_key = 1",
            "learning_rate = 0.0",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
