use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Identity,
    Cropout,
    Dropout,
    GaussianNoise,
    SaltPepper,
    GaussianBlur,
    MedianBlur,
    JpegSimulated,
    JpegReal,
    JpegMbrs,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 10] = [
        NoiseKind::Identity,
        NoiseKind::Cropout,
        NoiseKind::Dropout,
        NoiseKind::GaussianNoise,
        NoiseKind::SaltPepper,
        NoiseKind::GaussianBlur,
        NoiseKind::MedianBlur,
        NoiseKind::JpegSimulated,
        NoiseKind::JpegReal,
        NoiseKind::JpegMbrs,
    ];

    /// Name of the single parameter the kind takes, if any.
    pub fn param_name(self) -> Option<&'static str> {
        match self {
            NoiseKind::Identity => None,
            NoiseKind::Cropout | NoiseKind::Dropout | NoiseKind::SaltPepper => Some("ratio"),
            NoiseKind::GaussianNoise => Some("variance"),
            NoiseKind::GaussianBlur => Some("sigma"),
            NoiseKind::MedianBlur => Some("window"),
            NoiseKind::JpegSimulated | NoiseKind::JpegReal | NoiseKind::JpegMbrs => Some("quality_factor"),
        }
    }

    /// Training-time parameter used when a spec leaves it out.
    fn default_param(self) -> Option<ParamValue> {
        Some(match self {
            NoiseKind::Identity => return None,
            NoiseKind::Cropout | NoiseKind::Dropout => ParamValue::Point(0.4),
            NoiseKind::GaussianNoise | NoiseKind::SaltPepper => ParamValue::Range([0.001, 0.04]),
            NoiseKind::GaussianBlur => ParamValue::Point(2.0),
            NoiseKind::MedianBlur => ParamValue::Point(7.0),
            NoiseKind::JpegSimulated | NoiseKind::JpegReal | NoiseKind::JpegMbrs => ParamValue::Point(50.0),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Identity => "identity",
            NoiseKind::Cropout => "cropout",
            NoiseKind::Dropout => "dropout",
            NoiseKind::GaussianNoise => "gaussian_noise",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::GaussianBlur => "gaussian_blur",
            NoiseKind::MedianBlur => "median_blur",
            NoiseKind::JpegSimulated => "jpeg_simulated",
            NoiseKind::JpegReal => "jpeg_real",
            NoiseKind::JpegMbrs => "jpeg_mbrs",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == name)
            .ok_or_else(|| Error::Noise(format!("unknown noise kind '{name}'")))
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A parameter value: fixed, or a closed range sampled uniformly in training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Point(f64),
    Range([f64; 2]),
}

/// Tagged description of one distortion family and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

/// A fully resolved distortion with point parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    Identity,
    Cropout { ratio: f64 },
    Dropout { ratio: f64 },
    GaussianNoise { variance: f64 },
    SaltPepper { ratio: f64 },
    GaussianBlur { sigma: f64 },
    MedianBlur { window: usize },
    JpegSimulated { quality: u8 },
    JpegReal { quality: u8 },
    JpegMbrs { quality: u8 },
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind) -> Self {
        Self {
            kind,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(kind: NoiseKind, value: ParamValue) -> Self {
        let mut spec = Self::new(kind);
        if let Some(name) = kind.param_name() {
            spec.params.insert(name.to_string(), value);
        }
        spec
    }

    pub fn point(kind: NoiseKind, value: f64) -> Self {
        Self::with_param(kind, ParamValue::Point(value))
    }

    pub fn identity() -> Self {
        Self::new(NoiseKind::Identity)
    }

    /// The kind's parameter, falling back to its training default.
    pub fn param(&self) -> Option<ParamValue> {
        let name = self.kind.param_name()?;
        self.params.get(name).copied().or_else(|| self.kind.default_param())
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.kind.param_name();
        for name in self.params.keys() {
            if Some(name.as_str()) != allowed {
                return Err(Error::Noise(format!("{} takes no parameter '{name}'", self.kind)));
            }
        }
        let Some(value) = self.param() else { return Ok(()) };
        let (lo, hi) = match value {
            ParamValue::Point(v) => (v, v),
            ParamValue::Range([a, b]) => {
                if a > b {
                    return Err(Error::Noise(format!("inverted range [{a}, {b}]")));
                }
                (a, b)
            }
        };
        for v in [lo, hi] {
            check_value(self.kind, v)?;
        }
        Ok(())
    }

    /// Resolves a point-valued spec. Range-valued specs must go through
    /// [`sample_training_spec`] first.
    pub fn concrete(&self) -> Result<Distortion> {
        self.validate()?;
        let v = match self.param() {
            None => 0.0,
            Some(ParamValue::Point(v)) => v,
            Some(ParamValue::Range(r)) => {
                return Err(Error::Noise(format!("{} has range {r:?}; sample it first", self.kind)))
            }
        };
        Ok(match self.kind {
            NoiseKind::Identity => Distortion::Identity,
            NoiseKind::Cropout => Distortion::Cropout { ratio: v },
            NoiseKind::Dropout => Distortion::Dropout { ratio: v },
            NoiseKind::GaussianNoise => Distortion::GaussianNoise { variance: v },
            NoiseKind::SaltPepper => Distortion::SaltPepper { ratio: v },
            NoiseKind::GaussianBlur => Distortion::GaussianBlur { sigma: v },
            NoiseKind::MedianBlur => Distortion::MedianBlur { window: v as usize },
            NoiseKind::JpegSimulated => Distortion::JpegSimulated { quality: v as u8 },
            NoiseKind::JpegReal => Distortion::JpegReal { quality: v as u8 },
            NoiseKind::JpegMbrs => Distortion::JpegMbrs { quality: v as u8 },
        })
    }
}

fn check_value(kind: NoiseKind, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Noise(format!("{kind} parameter {v} is not finite")));
    }
    match kind {
        NoiseKind::Identity => {}
        NoiseKind::Cropout | NoiseKind::Dropout | NoiseKind::SaltPepper => {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Noise(format!("ratio {v} out of [0,1]")));
            }
        }
        NoiseKind::GaussianNoise => {
            if v < 0.0 {
                return Err(Error::Noise(format!("variance {v} is negative")));
            }
        }
        NoiseKind::GaussianBlur => {
            if v < 0.0 {
                return Err(Error::Noise(format!("sigma {v} is negative")));
            }
        }
        NoiseKind::MedianBlur => {
            if v < 1.0 || v.fract() != 0.0 || (v as u64).is_multiple_of(2) {
                return Err(Error::Noise(format!("window {v} must be an odd integer >= 1")));
            }
        }
        NoiseKind::JpegSimulated | NoiseKind::JpegReal | NoiseKind::JpegMbrs => {
            if !(1.0..=100.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Noise(format!("quality_factor {v} must be an integer in [1,100]")));
            }
        }
    }
    Ok(())
}

/// Draws a point-valued spec from a range-valued one (uniform over the closed
/// range). Point-valued specs are returned unchanged. Integer parameters
/// (window, quality) are rounded, windows to the nearest odd value in range.
pub fn sample_training_spec(spec: &NoiseSpec, rng: &mut impl Rng) -> Result<NoiseSpec> {
    spec.validate()?;
    let Some(ParamValue::Range([lo, hi])) = spec.param() else {
        return Ok(spec.clone());
    };
    let mut v = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    match spec.kind {
        NoiseKind::JpegSimulated | NoiseKind::JpegReal | NoiseKind::JpegMbrs => v = v.round(),
        NoiseKind::MedianBlur => {
            let mut w = v.round();
            if (w as u64).is_multiple_of(2) {
                w = if w + 1.0 <= hi { w + 1.0 } else { w - 1.0 };
            }
            v = w;
        }
        _ => {}
    }
    let mut out = spec.clone();
    out.params.insert(spec.kind.param_name().unwrap().to_string(), ParamValue::Point(v));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_layout_uses_kind_and_params() {
        let spec: NoiseSpec =
            serde_json::from_str(r#"{"kind":"gaussian_noise","params":{"variance":[0.001,0.04]}}"#).unwrap();
        assert_eq!(spec.param(), Some(ParamValue::Range([0.001, 0.04])));
        let back = serde_json::to_string(&spec).unwrap();
        assert_eq!(back, r#"{"kind":"gaussian_noise","params":{"variance":[0.001,0.04]}}"#);
    }

    #[test]
    fn validation_catches_bad_parameters() {
        assert!(NoiseSpec::point(NoiseKind::Cropout, 1.3).validate().is_err());
        assert!(NoiseSpec::point(NoiseKind::MedianBlur, 4.0).validate().is_err());
        assert!(NoiseSpec::point(NoiseKind::JpegReal, 0.0).validate().is_err());
        assert!(NoiseSpec::point(NoiseKind::GaussianNoise, -0.1).validate().is_err());
        let mut wrong_name = NoiseSpec::new(NoiseKind::Dropout);
        wrong_name.params.insert("sigma".into(), ParamValue::Point(1.0));
        assert!(wrong_name.validate().is_err());
        assert!(NoiseSpec::with_param(NoiseKind::SaltPepper, ParamValue::Range([0.3, 0.1]))
            .validate()
            .is_err());
    }

    #[test]
    fn missing_parameter_falls_back_to_training_default() {
        assert_eq!(
            NoiseSpec::new(NoiseKind::Cropout).concrete().unwrap(),
            Distortion::Cropout { ratio: 0.4 }
        );
        assert_eq!(
            NoiseSpec::new(NoiseKind::MedianBlur).concrete().unwrap(),
            Distortion::MedianBlur { window: 7 }
        );
    }

    #[test]
    fn sampling_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = NoiseSpec::with_param(NoiseKind::GaussianNoise, ParamValue::Range([0.001, 0.04]));
        for _ in 0..1000 {
            let s = sample_training_spec(&spec, &mut rng).unwrap();
            let Distortion::GaussianNoise { variance } = s.concrete().unwrap() else { panic!() };
            assert!((0.001..=0.04).contains(&variance));
        }
    }

    #[test]
    fn point_spec_is_returned_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = NoiseSpec::point(NoiseKind::JpegReal, 50.0);
        assert_eq!(sample_training_spec(&spec, &mut rng).unwrap(), spec);
    }

    #[test]
    fn unit_range_sample_mean_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NoiseSpec::with_param(NoiseKind::Dropout, ParamValue::Range([0.0, 1.0]));
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let Distortion::Dropout { ratio } = sample_training_spec(&spec, &mut rng).unwrap().concrete().unwrap()
            else {
                panic!()
            };
            total += ratio;
        }
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn window_ranges_sample_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NoiseSpec::with_param(NoiseKind::MedianBlur, ParamValue::Range([3.0, 7.0]));
        for _ in 0..200 {
            let Distortion::MedianBlur { window } = sample_training_spec(&spec, &mut rng).unwrap().concrete().unwrap()
            else {
                panic!()
            };
            assert!(window % 2 == 1 && (3..=7).contains(&window));
        }
    }

    #[test]
    fn inverted_range_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NoiseSpec::with_param(NoiseKind::GaussianNoise, ParamValue::Range([0.04, 0.001]));
        assert!(sample_training_spec(&spec, &mut rng).is_err());
    }
}
