//! Training configuration, its defaults and validation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseKind, NoiseSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One decoder used for guidance and extraction.
    Deend,
    /// Encoder-driven reference: image and message go straight into the encoder.
    EndBaseline,
    /// Guidance and extraction decoders with separate parameters.
    DeAEndB,
    /// Encoder sees the message only.
    EWNd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Deend, Variant::EndBaseline, Variant::DeAEndB, Variant::EWNd];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Deend => "deend",
            Variant::EndBaseline => "end_baseline",
            Variant::DeAEndB => "de_a_end_b",
            Variant::EWNd => "e_w_nd",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant '{name}'")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Unpool,
    TransposeConv,
    NearestInterp,
}

impl UpsampleMode {
    pub const ALL: [UpsampleMode; 3] = [UpsampleMode::Unpool, UpsampleMode::TransposeConv, UpsampleMode::NearestInterp];
}

/// Loss weights `(image, message, adversarial)`.
pub type Lambdas = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub l: usize,
    pub alpha: f64,
    pub lambda_phase1: Lambdas,
    pub lambda_phase2: Lambdas,
    pub phase_switch_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub variant: Variant,
    pub decoder_unions: usize,
    pub upsample_mode: UpsampleMode,
    /// Feature width of every convolutional block.
    pub channels: usize,
    /// Use the adversarial losses exactly as printed instead of the standard
    /// non-saturating pair.
    pub paper_literal_gan: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            h: 128,
            w: 128,
            c: 3,
            l: 64,
            alpha: 1.0,
            lambda_phase1: [1.0, 10.0, 0.0001],
            lambda_phase2: [10.0, 1.0, 0.0001],
            phase_switch_epoch: 20,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            noise: NoiseSpec::new(NoiseKind::Identity),
            variant: Variant::Deend,
            decoder_unions: 5,
            upsample_mode: UpsampleMode::NearestInterp,
            channels: 64,
            paper_literal_gan: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text)?;
        validate_config(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Message length and image shape as `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// Returns the config unchanged when every invariant holds.
pub fn validate_config(config: TrainConfig) -> Result<TrainConfig> {
    for (name, v) in [("H", config.h), ("W", config.w)] {
        if v == 0 || v % 8 != 0 {
            return Err(Error::Config(format!("{name} not divisible by 8 ({v})")));
        }
    }
    if config.c == 0 {
        return Err(Error::Config("C must be at least 1".into()));
    }
    if config.l == 0 {
        return Err(Error::Config("L must be at least 1".into()));
    }
    if !(config.alpha.is_finite() && config.alpha >= 0.0) {
        return Err(Error::Config(format!("alpha {} must be finite and non-negative", config.alpha)));
    }
    for (name, triple) in [("lambda_phase1", config.lambda_phase1), ("lambda_phase2", config.lambda_phase2)] {
        if triple.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("{name} {triple:?} has a negative or non-finite weight")));
        }
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::Config(format!("learning_rate {} must be positive", config.learning_rate)));
    }
    if !(3..=7).contains(&config.decoder_unions) {
        return Err(Error::Config(format!("decoder_unions {} out of [3,7]", config.decoder_unions)));
    }
    if config.channels < 8 {
        return Err(Error::Config(format!("channels {} must be at least 8", config.channels)));
    }
    config.noise.validate().map_err(|e| match e {
        Error::Noise(msg) => Error::Config(msg),
        other => other,
    })?;
    Ok(config)
}

/// Loss weights in force at `epoch`.
pub fn lambda_schedule(epoch: usize, config: &TrainConfig) -> Lambdas {
    if epoch < config.phase_switch_epoch {
        config.lambda_phase1
    } else {
        config.lambda_phase2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ParamValue;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_accepted_unchanged() {
        let config = TrainConfig::default();
        assert_eq!(validate_config(config.clone()).unwrap(), config);
        assert_eq!(config.alpha, 1.0);
        assert_eq!((config.h, config.w, config.l), (128, 128, 64));
        assert_eq!(config.upsample_mode, UpsampleMode::NearestInterp);
        assert_eq!(config.decoder_unions, 5);
    }

    #[test]
    fn height_not_multiple_of_eight_is_rejected() {
        let config = TrainConfig {
            h: 130,
            ..TrainConfig::default()
        };
        let err = validate_config(config).unwrap_err().to_string();
        assert!(err.contains("H not divisible by 8"), "{err}");
    }

    #[test]
    fn cropout_ratio_above_one_is_rejected() {
        let config = TrainConfig {
            noise: NoiseSpec::point(NoiseKind::Cropout, 1.3),
            ..TrainConfig::default()
        };
        let err = validate_config(config).unwrap_err().to_string();
        assert!(err.contains("ratio 1.3 out of [0,1]"), "{err}");
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let config = TrainConfig {
            lambda_phase2: [1.0, -1.0, 0.0],
            ..TrainConfig::default()
        };
        assert!(validate_config(config).is_err());
    }

    #[test]
    fn schedule_switches_at_configured_epoch() {
        let config = TrainConfig::default();
        assert_eq!(lambda_schedule(0, &config), [1.0, 10.0, 0.0001]);
        assert_eq!(lambda_schedule(19, &config), [1.0, 10.0, 0.0001]);
        assert_eq!(lambda_schedule(20, &config), [10.0, 1.0, 0.0001]);
    }

    #[test]
    fn json_uses_snake_case_field_names() {
        let text = r#"{"h":32,"w":32,"l":16,"variant":"de_a_end_b","upsample_mode":"transpose_conv",
            "noise":{"kind":"jpeg_mbrs","params":{"quality_factor":50}}}"#;
        let config = TrainConfig::from_json_str(text).unwrap();
        assert_eq!(config.variant, Variant::DeAEndB);
        assert_eq!(config.upsample_mode, UpsampleMode::TransposeConv);
        assert_eq!(config.noise.param(), Some(ParamValue::Point(50.0)));
        let back = TrainConfig::from_json_str(&config.to_json_pretty()).unwrap();
        assert_eq!(back, config);
        assert!(TrainConfig::from_json_str(r#"{"bogus":1}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"variant":"hidden"}"#).is_err());
    }

    proptest! {
        #[test]
        fn validation_is_idempotent(h in 1usize..40, unions in 2usize..9, l in 0usize..5, a in -1.0f64..3.0) {
            let config = TrainConfig { h: h * 4, decoder_unions: unions, l, alpha: a, ..TrainConfig::default() };
            if let Ok(valid) = validate_config(config) {
                prop_assert_eq!(validate_config(valid.clone()).unwrap(), valid);
            }
        }
    }
}
