use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::{bit_accuracy, psnr};
use crate::nn::ModelBundle;
use crate::noise::{apply_noise, DistortionContext, NoiseKind, NoiseSpec};
use crate::types::{ImageArray, WatermarkMessage};

use super::dataset::load_named;

/// Environment variable capping the number of evaluation threads.
pub const THREADS_ENV: &str = "WM_NUM_THREADS";

/// One distortion kind evaluated at several strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub kind: NoiseKind,
    pub params: Vec<f64>,
}

impl Sweep {
    pub fn new(kind: NoiseKind, params: &[f64]) -> Self {
        Self {
            kind,
            params: params.to_vec(),
        }
    }

    fn specs(&self) -> Vec<(f64, NoiseSpec)> {
        match self.kind.param_name() {
            None => vec![(0.0, NoiseSpec::new(self.kind))],
            Some(_) => self.params.iter().map(|&p| (p, NoiseSpec::point(self.kind, p))).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.param_name().is_some() && self.params.is_empty() {
            return Err(Error::Noise(format!("{} sweep has no parameter values", self.kind.as_str())));
        }
        self.specs().iter().try_for_each(|(_, s)| s.validate())
    }
}

/// The sweep grids of the robustness tables: cropout, dropout, Gaussian
/// noise, salt & pepper, Gaussian blur, median blur and real JPEG.
pub fn default_sweeps() -> Vec<Sweep> {
    vec![
        Sweep::new(NoiseKind::Identity, &[]),
        Sweep::new(NoiseKind::Cropout, &[0.1, 0.2, 0.3, 0.4, 0.5]),
        Sweep::new(NoiseKind::Dropout, &[0.2, 0.3, 0.4, 0.5, 0.6]),
        Sweep::new(NoiseKind::GaussianNoise, &[0.01, 0.02, 0.03, 0.04, 0.05]),
        Sweep::new(NoiseKind::SaltPepper, &[0.01, 0.02, 0.03, 0.04, 0.05]),
        Sweep::new(NoiseKind::GaussianBlur, &[0.0001, 0.5, 1.0, 2.0]),
        Sweep::new(NoiseKind::MedianBlur, &[3.0, 5.0, 7.0]),
        Sweep::new(NoiseKind::JpegReal, &[40.0, 50.0, 60.0, 70.0, 80.0, 90.0]),
    ]
}

/// How a model is evaluated: sweep grid, trials per image, message seed
/// and embedding strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub sweeps: Vec<Sweep>,
    pub trials: usize,
    pub seed: u64,
    pub alpha: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            sweeps: default_sweeps(),
            trials: 1,
            seed: 0,
            alpha: 1.0,
        }
    }
}

impl Protocol {
    pub fn with_sweeps(sweeps: Vec<Sweep>) -> Self {
        Self {
            sweeps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("benchmark needs at least one trial".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} is not finite", self.alpha)));
        }
        self.sweeps.iter().try_for_each(Sweep::validate)
    }
}

/// A checkpoint, a directory of test images and the protocol to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    pub checkpoint: PathBuf,
    pub images: PathBuf,
    #[serde(flatten)]
    pub protocol: Protocol,
}

impl BenchmarkPlan {
    pub fn new(checkpoint: impl Into<PathBuf>, images: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            images: images.into(),
            protocol: Protocol::default(),
        }
    }
}

/// One extraction: a message embedded in one image, one distortion applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub image_id: String,
    pub kind: NoiseKind,
    pub param: f64,
    pub trial: usize,
    pub bit_accuracy: f64,
    pub psnr_embed: f64,
}

/// Aggregate over all images and trials of one `(kind, param)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub kind: NoiseKind,
    pub param: f64,
    pub count: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: TrainConfig,
    pub seed: u64,
    pub trials: usize,
    pub alpha: f64,
    pub summary: Vec<CellSummary>,
    pub rows: Vec<BenchmarkRow>,
}

pub const CSV_HEADER: &str = "image_id,kind,param,trial,bit_accuracy,psnr_embed";

impl BenchmarkReport {
    /// Per-extraction rows with the fixed column set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_id,
                r.kind.as_str(),
                r.param,
                r.trial,
                r.bit_accuracy,
                r.psnr_embed
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    pub fn cell(&self, kind: NoiseKind, param: f64) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.kind == kind && c.param == param)
    }

    /// Mean PSNR of the watermarked set.
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_embed))
    }

    /// Writes `benchmark.csv` and `benchmark.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("benchmark.csv"), self.to_csv())?;
        std::fs::write(dir.join("benchmark.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Thread count from `WM_NUM_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Loads the plan's checkpoint and images and evaluates them.
pub fn run_plan(plan: &BenchmarkPlan) -> Result<BenchmarkReport> {
    plan.protocol.validate()?;
    let ckpt = Checkpoint::load(&plan.checkpoint)?;
    let (c, h, w) = ckpt.config.image_dims();
    let images = load_named(&plan.images, c, h, w)?;
    with_thread_pool(|| evaluate(&ckpt.config, &ckpt.bundle, &images, &plan.protocol))
}

/// Runs `f` on a pool sized by [`thread_count`].
pub fn with_thread_pool<R: Send>(f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Embeds a seeded random message per `(image, trial)`, applies every sweep
/// point and extracts. Images are processed in parallel; rows come back in
/// image, sweep, parameter, trial order whatever the size of the current
/// rayon pool.
pub fn evaluate(
    config: &TrainConfig,
    bundle: &ModelBundle,
    images: &[(String, ImageArray)],
    protocol: &Protocol,
) -> Result<BenchmarkReport> {
    protocol.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("no images to benchmark".into()));
    }
    let cells: Vec<(NoiseKind, f64, NoiseSpec)> = protocol
        .sweeps
        .iter()
        .flat_map(|s| s.specs().into_iter().map(move |(p, spec)| (s.kind, p, spec)))
        .collect();
    let per_image: Vec<Result<Vec<BenchmarkRow>>> = images
        .par_iter()
        .enumerate()
        .map(|(idx, (id, host))| evaluate_image(bundle, idx, id, host, &cells, protocol))
        .collect();
    let mut rows = Vec::with_capacity(images.len() * cells.len() * protocol.trials);
    for r in per_image {
        rows.extend(r?);
    }
    let summary = cells
        .iter()
        .map(|(kind, param, _)| {
            let acc: Vec<f64> = rows
                .iter()
                .filter(|r| r.kind == *kind && r.param == *param)
                .map(|r| r.bit_accuracy)
                .collect();
            let m = mean(acc.iter().copied());
            let var = mean(acc.iter().map(|a| (a - m) * (a - m)));
            CellSummary {
                kind: *kind,
                param: *param,
                count: acc.len(),
                mean_accuracy: m,
                std_accuracy: var.sqrt(),
                mean_psnr: mean(rows.iter().filter(|r| r.kind == *kind && r.param == *param).map(|r| r.psnr_embed)),
            }
        })
        .collect();
    Ok(BenchmarkReport {
        config: config.clone(),
        seed: protocol.seed,
        trials: protocol.trials,
        alpha: protocol.alpha,
        summary,
        rows,
    })
}

fn evaluate_image(
    bundle: &ModelBundle,
    index: usize,
    id: &str,
    host: &ImageArray,
    cells: &[(NoiseKind, f64, NoiseSpec)],
    protocol: &Protocol,
) -> Result<Vec<BenchmarkRow>> {
    let mut by_trial = Vec::with_capacity(protocol.trials);
    for trial in 0..protocol.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
        rng.set_stream(((index as u64) << 32) | trial as u64);
        let message = WatermarkMessage::random(bundle.arch.l, &mut rng);
        let watermarked = bundle.embed(host, &message, protocol.alpha)?.quantized();
        let psnr_embed = psnr(host, &watermarked)?;
        let ctx_host = host.clone();
        let mut rows = Vec::with_capacity(cells.len());
        for (kind, param, spec) in cells {
            let ctx = DistortionContext {
                host: ctx_host.clone(),
                rng_seed: rng.random(),
                training: false,
            };
            let distorted = apply_noise(spec, &watermarked, &ctx)?;
            let decoded = bundle.extract(&distorted)?;
            rows.push(BenchmarkRow {
                image_id: id.to_string(),
                kind: *kind,
                param: *param,
                trial,
                bit_accuracy: bit_accuracy(&message, &decoded)?,
                psnr_embed,
            });
        }
        by_trial.push(rows);
    }
    // image, cell, trial order
    let mut out = Vec::with_capacity(cells.len() * protocol.trials);
    for c in 0..cells.len() {
        for rows in &by_trial {
            out.push(rows[c].clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::make_variant;
    use crate::types::ImageRole;

    fn tiny() -> (TrainConfig, ModelBundle, Vec<(String, ImageArray)>) {
        let config = TrainConfig {
            h: 16,
            w: 16,
            l: 8,
            channels: 8,
            ..TrainConfig::default()
        };
        let bundle = make_variant(&config).unwrap();
        let images = (0..3)
            .map(|i| {
                let img = ImageArray::filled(3, 16, 16, 0.2 + 0.2 * i as f32, ImageRole::Host).unwrap();
                (format!("img{i}"), img)
            })
            .collect();
        (config, bundle, images)
    }

    fn plan(sweeps: Vec<Sweep>, trials: usize) -> Protocol {
        Protocol {
            trials,
            ..Protocol::with_sweeps(sweeps)
        }
    }

    #[test]
    fn row_count_is_images_times_params_times_trials() {
        let (config, bundle, images) = tiny();
        let p = plan(vec![Sweep::new(NoiseKind::JpegReal, &[40.0, 50.0, 60.0, 70.0, 80.0, 90.0])], 3);
        let report = evaluate(&config, &bundle, &images, &p).unwrap();
        assert_eq!(report.rows.len(), 3 * 6 * 3);
        assert_eq!(report.summary.len(), 6);
        assert!(report.summary.iter().all(|c| c.count == 9));
        assert_eq!(report.to_csv().lines().count(), 1 + 54);
    }

    #[test]
    fn csv_is_identical_across_thread_counts() {
        let (config, bundle, images) = tiny();
        let p = plan(vec![Sweep::new(NoiseKind::Dropout, &[0.3]), Sweep::new(NoiseKind::SaltPepper, &[0.05])], 2);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| evaluate(&config, &bundle, &images, &p).unwrap().to_csv())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a, b);
        assert!(a.starts_with(CSV_HEADER));
    }

    #[test]
    fn summary_means_are_arithmetic_means_of_rows() {
        let (config, bundle, images) = tiny();
        let p = plan(vec![Sweep::new(NoiseKind::GaussianNoise, &[0.02])], 4);
        let report = evaluate(&config, &bundle, &images, &p).unwrap();
        let cell = report.cell(NoiseKind::GaussianNoise, 0.02).unwrap();
        let m = report.rows.iter().map(|r| r.bit_accuracy).sum::<f64>() / report.rows.len() as f64;
        assert_eq!(cell.mean_accuracy, m);
        assert!((0.0..=1.0).contains(&cell.mean_accuracy));
    }

    #[test]
    fn default_sweeps_are_valid() {
        for s in default_sweeps() {
            s.validate().unwrap();
        }
        assert!(plan(vec![], 0).validate().is_err());
        assert!(Sweep::new(NoiseKind::Cropout, &[]).validate().is_err());
        assert!(Sweep::new(NoiseKind::MedianBlur, &[4.0]).validate().is_err());
    }
}
