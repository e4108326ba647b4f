use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{coupling_consistency, decoder_needed_map, encoded_residual_map, normalize_map, FeatureMap};
use crate::error::{Error, Result};
use crate::metrics::{bit_accuracy, psnr};
use crate::nn::ModelBundle;
use crate::types::{ImageArray, ImageRole, WatermarkMessage};

use super::dataset::save_png;

/// Per-image outcome of the coupling analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    pub image_id: String,
    pub consistency: f64,
    pub psnr: f64,
    pub bitacc: f64,
}

/// Everything computed for one image.
pub struct CouplingPanels {
    pub record: CouplingRecord,
    pub watermarked: ImageArray,
    /// Normalized `|I_em - I_o|`.
    pub residual: FeatureMap,
    /// Normalized gradient of the decoding loss with respect to the host.
    pub needed: FeatureMap,
}

impl CouplingPanels {
    /// `[host | watermarked | residual | needed]` side by side.
    pub fn grid(&self, host: &ImageArray) -> Result<ImageArray> {
        let (c, h, w) = host.dims();
        let panels: [&[f32]; 2] = [host.data(), self.watermarked.data()];
        let maps: Vec<Vec<f32>> = [&self.residual, &self.needed]
            .iter()
            .map(|m| m.data.iter().map(|&v| v as f32).collect())
            .collect();
        let sources: Vec<&[f32]> = panels.into_iter().chain(maps.iter().map(Vec::as_slice)).collect();
        let gw = w * sources.len();
        let mut data = vec![0.0f32; c * h * gw];
        for (p, src) in sources.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    let dst = ch * h * gw + y * gw + p * w;
                    let s = ch * h * w + y * w;
                    data[dst..dst + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        ImageArray::new(c, h, gw, data, ImageRole::Host)
    }
}

/// Embeds `message`, then compares where the encoder wrote with what the
/// decoder needs for that message.
pub fn analyze_image(
    bundle: &ModelBundle,
    image_id: &str,
    host: &ImageArray,
    message: &WatermarkMessage,
    alpha: f64,
) -> Result<CouplingPanels> {
    let watermarked = bundle.embed(host, message, alpha)?.quantized();
    let residual = normalize_map(&encoded_residual_map(bundle, host, message, alpha)?)?;
    let needed = normalize_map(&decoder_needed_map(bundle, host, message)?)?;
    let record = CouplingRecord {
        image_id: image_id.to_string(),
        consistency: coupling_consistency(&residual, &needed)?,
        psnr: psnr(host, &watermarked)?,
        bitacc: bit_accuracy(message, &bundle.extract(&watermarked)?)?,
    };
    Ok(CouplingPanels {
        record,
        watermarked,
        residual,
        needed,
    })
}

/// Seeded random message for the image at `index`.
pub fn analysis_message(l: usize, seed: u64, index: usize) -> WatermarkMessage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    WatermarkMessage::random(l, &mut rng)
}

/// Analyzes every image; with `out_dir`, writes `<id>_coupling.png` grids
/// and one JSON record per line to `coupling.jsonl`.
pub fn analyze(
    bundle: &ModelBundle,
    images: &[(String, ImageArray)],
    alpha: f64,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<CouplingRecord>> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to analyze".into()));
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("coupling.jsonl"))?)
        }
        None => None,
    };
    let mut records = Vec::with_capacity(images.len());
    for (index, (id, host)) in images.iter().enumerate() {
        let message = analysis_message(bundle.arch.l, seed, index);
        let panels = analyze_image(bundle, id, host, &message, alpha)?;
        if let (Some(dir), Some(f)) = (out_dir, log.as_mut()) {
            save_png(&panels.grid(host)?, &dir.join(format!("{id}_coupling.png")))?;
            writeln!(f, "{}", serde_json::to_string(&panels.record)?)?;
        }
        records.push(panels.record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::nn::make_variant;

    fn setup() -> (ModelBundle, Vec<(String, ImageArray)>) {
        let config = TrainConfig {
            h: 16,
            w: 16,
            l: 8,
            channels: 8,
            ..TrainConfig::default()
        };
        let images = (0..2)
            .map(|i| {
                let data = (0..3 * 256).map(|k| ((k * (7 + i)) % 97) as f32 / 97.0).collect();
                (format!("img{i}"), ImageArray::new(3, 16, 16, data, ImageRole::Host).unwrap())
            })
            .collect();
        (make_variant(&config).unwrap(), images)
    }

    #[test]
    fn writes_one_grid_and_record_per_image() {
        let (bundle, images) = setup();
        let dir = tempfile::tempdir().unwrap();
        let records = analyze(&bundle, &images, 1.0, 3, Some(dir.path())).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            assert!((-1.0..=1.0).contains(&r.consistency));
            assert!(dir.path().join(format!("{}_coupling.png", r.image_id)).exists());
        }
        let log = std::fs::read_to_string(dir.path().join("coupling.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let grid = image::open(dir.path().join("img0_coupling.png")).unwrap();
        assert_eq!((grid.width(), grid.height()), (64, 16));
    }

    #[test]
    fn zero_strength_gives_an_empty_residual_panel() {
        let (bundle, images) = setup();
        let (id, host) = &images[0];
        let panels = analyze_image(&bundle, id, host, &analysis_message(8, 0, 0), 0.0).unwrap();
        assert!(panels.residual.data.iter().all(|&v| v == 0.0));
        assert_eq!(panels.record.consistency, 0.0);
    }
}
