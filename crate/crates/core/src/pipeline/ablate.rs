use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{ModelBundle, DECODER, ENCODER, GUIDE_DECODER};
use crate::noise::NoiseKind;
use crate::training::train;
use crate::types::ImageArray;

use super::benchmark::{evaluate, Protocol, Sweep};

/// Real-JPEG quality factors of the architecture comparison table.
pub const ABLATION_QUALITIES: [f64; 6] = [40.0, 50.0, 60.0, 70.0, 80.0, 90.0];

/// The protocol the comparison table uses unless told otherwise.
pub fn ablation_protocol() -> Protocol {
    Protocol::with_sweeps(vec![Sweep::new(NoiseKind::JpegReal, &ABLATION_QUALITIES)])
}

/// Trainable parameter counts of the generator networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    /// Zero unless the variant has a separate guidance decoder.
    pub guide_decoder: usize,
    pub total: usize,
    /// Whether guidance and extraction use the same decoder parameters.
    pub shared_decoder: bool,
}

impl ParamCounts {
    pub fn of(bundle: &ModelBundle) -> Self {
        let encoder = bundle.param_count(ENCODER);
        let decoder = bundle.param_count(DECODER);
        let guide_decoder = bundle.param_count(GUIDE_DECODER);
        Self {
            encoder,
            decoder,
            guide_decoder,
            total: encoder + decoder + guide_decoder,
            shared_decoder: bundle.arch.variant == Variant::Deend,
        }
    }
}

/// One column of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub kind: NoiseKind,
    pub param: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: ParamCounts,
    pub psnr: f64,
    pub final_loss: f64,
    pub cells: Vec<AblationCell>,
}

impl AblationRow {
    pub fn accuracy(&self, kind: NoiseKind, param: f64) -> Option<f64> {
        self.cells.iter().find(|c| c.kind == kind && c.param == param).map(|c| c.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base: TrainConfig,
    pub protocol: Protocol,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Plain-text table: one row per variant, one accuracy column per sweep
    /// point, plus PSNR and parameter counts.
    pub fn to_table(&self) -> String {
        let mut out = String::from("| variant | params | shared decoder | PSNR |");
        let columns: Vec<(NoiseKind, f64)> = self
            .rows
            .first()
            .map(|r| r.cells.iter().map(|c| (c.kind, c.param)).collect())
            .unwrap_or_default();
        for (kind, param) in &columns {
            write!(out, " {} {} |", kind.as_str(), param).expect("string write");
        }
        out.push('\n');
        out.push_str(&"|---".repeat(4 + columns.len()));
        out.push_str("|\n");
        for r in &self.rows {
            write!(
                out,
                "| {} | {} | {} | {:.2} |",
                r.variant.as_str(),
                r.params.total,
                if r.params.shared_decoder { "yes" } else { "no" },
                r.psnr
            )
            .expect("string write");
            for c in &r.cells {
                write!(out, " {:.2}% |", 100.0 * c.accuracy).expect("string write");
            }
            out.push('\n');
        }
        out
    }

    /// Writes `ablation.json` and `ablation.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("ablation.md"), self.to_table())?;
        Ok(())
    }
}

/// Trains every variant from the same config, seed and data, then evaluates
/// each with the same protocol.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    train_images: &[ImageArray],
    test_images: &[(String, ImageArray)],
    protocol: &Protocol,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Config("no variants to compare".into()));
    }
    protocol.validate()?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = TrainConfig {
            variant,
            ..base.clone()
        };
        log::info!("training variant {}", variant.as_str());
        let run = train(&config, train_images, None)?;
        let bundle = run.checkpoint.bundle;
        let report = evaluate(&config, &bundle, test_images, protocol)?;
        rows.push(AblationRow {
            variant,
            params: ParamCounts::of(&bundle),
            psnr: report.mean_psnr(),
            final_loss: run.metrics.last().map_or(f64::NAN, |m| m.total()),
            cells: report
                .summary
                .iter()
                .map(|c| AblationCell {
                    kind: c.kind,
                    param: c.param,
                    accuracy: c.mean_accuracy,
                })
                .collect(),
        });
    }
    Ok(AblationReport {
        base: base.clone(),
        protocol: protocol.clone(),
        rows,
    })
}
