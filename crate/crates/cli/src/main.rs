use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dewm::checkpoint::Checkpoint;
use dewm::metrics::psnr;
use dewm::pipeline::{
    ablate, ablation_protocol, analyze, default_sweeps, load_dataset, load_image, load_named, run_plan, save_png,
    with_thread_pool, BenchmarkPlan, Protocol, Sweep,
};
use dewm::training::{train, TrainOutputs};
use dewm::{Error, NoiseKind, TrainConfig, Variant, WatermarkMessage};

#[derive(Parser)]
#[command(name = "dewm", version, about = "Decoder-driven invisible image watermarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// Embed a message into one image.
    Embed(EmbedArgs),
    /// Extract the message from one image.
    Extract(ExtractArgs),
    /// Robustness sweep of a trained model over a directory of test images.
    Benchmark(BenchmarkArgs),
    /// Train several architecture variants identically and compare them.
    Ablate(AblateArgs),
    /// Coupling analysis: residual versus decoder-needed features.
    Analyze(AnalyzeArgs),
    /// Print the architecture and parameter manifest of a config or checkpoint.
    Describe(DescribeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory of training images.
    data: PathBuf,
    /// Output directory for checkpoint.dewm and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
    /// Message as hexadecimal digits, exactly ceil(L/4) of them.
    #[arg(long)]
    message: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of test images.
    images: PathBuf,
    /// Output directory for benchmark.csv and benchmark.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Restrict the sweep to one distortion kind.
    #[arg(long)]
    kind: Option<String>,
    /// Comma-separated parameter values for `--kind`.
    #[arg(long, value_delimiter = ',')]
    params: Vec<f64>,
}

#[derive(Args)]
struct AblateArgs {
    /// Base training configuration (JSON); the variant field is overridden.
    #[arg(long)]
    config: PathBuf,
    /// Directory of training images.
    data: PathBuf,
    /// Directory of test images; defaults to the training images.
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "deend,de_a_end_b,e_w_nd")]
    variants: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MessageLength { .. } => 2,
        Error::Checkpoint { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Describe(a) => cmd_describe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(a: TrainArgs) -> dewm::Result<()> {
    let mut config = TrainConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let (c, h, w) = config.image_dims();
    let data = load_dataset(&a.data, c, h, w)?;
    std::fs::create_dir_all(&a.out)?;
    let outputs = TrainOutputs::in_dir(&a.out);
    let run = train(&config, &data, Some(&outputs))?;
    if let Some(last) = run.metrics.last() {
        println!(
            "trained {} epochs: l_e {:.6} l_d {:.6} psnr {:.2} bitacc {:.4}",
            run.metrics.len(),
            last.l_e,
            last.l_d,
            last.psnr_train,
            last.bitacc_train
        );
    }
    println!("checkpoint: {}", outputs.checkpoint.display());
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> dewm::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let message = WatermarkMessage::from_hex(&a.message, ckpt.config.l)?;
    let host = load_image(&a.image, ckpt.config.c)?;
    let watermarked = ckpt.bundle.embed(&host, &message, a.alpha)?.quantized();
    save_png(&watermarked, &a.out)?;
    println!("psnr {:.4}", psnr(&host, &watermarked)?);
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> dewm::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let image = load_image(&a.image, ckpt.config.c)?;
    let (message, logits) = ckpt.bundle.extract_with_logits(&image)?;
    println!("{}", message.to_hex());
    let confidences: Vec<String> = logits.iter().map(|v| format!("{v:.4}")).collect();
    println!("{}", confidences.join(" "));
    Ok(())
}

fn sweeps_from_args(kind: Option<&str>, params: &[f64]) -> dewm::Result<Vec<Sweep>> {
    match kind {
        None => Ok(default_sweeps()),
        Some(name) => {
            let kind = NoiseKind::parse(name)?;
            let params = if params.is_empty() {
                default_sweeps()
                    .into_iter()
                    .find(|s| s.kind == kind)
                    .map(|s| s.params)
                    .unwrap_or_default()
            } else {
                params.to_vec()
            };
            Ok(vec![Sweep::new(kind, &params)])
        }
    }
}

fn cmd_benchmark(a: BenchmarkArgs) -> dewm::Result<()> {
    let plan = BenchmarkPlan {
        protocol: Protocol {
            sweeps: sweeps_from_args(a.kind.as_deref(), &a.params)?,
            trials: a.trials,
            seed: a.seed,
            alpha: a.alpha,
        },
        ..BenchmarkPlan::new(&a.checkpoint, &a.images)
    };
    let report = run_plan(&plan)?;
    report.write(&a.out)?;
    for cell in &report.summary {
        println!(
            "{:<15} {:>8} acc {:.4} (std {:.4}) psnr {:.2}",
            cell.kind.as_str(),
            cell.param,
            cell.mean_accuracy,
            cell.std_accuracy,
            cell.mean_psnr
        );
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> dewm::Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let variants = a.variants.iter().map(|v| Variant::parse(v)).collect::<dewm::Result<Vec<_>>>()?;
    let (c, h, w) = config.image_dims();
    let train_images = load_dataset(&a.data, c, h, w)?;
    let test_images = load_named(a.test.as_deref().unwrap_or(&a.data), c, h, w)?;
    let protocol = Protocol {
        trials: a.trials,
        seed: a.seed,
        alpha: a.alpha,
        ..ablation_protocol()
    };
    let report = with_thread_pool(|| ablate(&config, &variants, &train_images, &test_images, &protocol))?;
    report.write(&a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> dewm::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (c, h, w) = ckpt.config.image_dims();
    let images = load_named(&a.images, c, h, w)?;
    let records = analyze(&ckpt.bundle, &images, a.alpha, a.seed, Some(&a.out))?;
    for r in &records {
        println!(
            "{} consistency {:.4} psnr {:.2} bitacc {:.4}",
            r.image_id, r.consistency, r.psnr, r.bitacc
        );
    }
    Ok(())
}

fn describe_config(config: &TrainConfig, source: &Path) -> dewm::Result<()> {
    let bundle = dewm::nn::make_variant(config)?;
    println!("source: {}", source.display());
    println!(
        "variant {} | image {}x{}x{} | L {} | channels {} | decoder unions {} | upsample {}",
        config.variant.as_str(),
        config.c,
        config.h,
        config.w,
        config.l,
        config.channels,
        config.decoder_unions,
        serde_json::to_string(&config.upsample_mode)?.trim_matches('"')
    );
    for prefix in ["encoder", "decoder", "guide_decoder", "discriminator"] {
        let n = bundle.param_count(prefix);
        if n > 0 {
            println!("{prefix:<14} {n:>10} trainable parameters");
        }
    }
    for p in bundle.manifest() {
        println!("  {:<40} {:?} {:?}", p.name, p.shape, p.kind);
    }
    Ok(())
}

fn cmd_describe(a: DescribeArgs) -> dewm::Result<()> {
    match (a.config, a.checkpoint) {
        (Some(path), None) => describe_config(&TrainConfig::load(&path)?, &path),
        (None, Some(path)) => {
            let ckpt = Checkpoint::load(&path)?;
            println!("epoch {}", ckpt.epoch);
            describe_config(&ckpt.config, &path)
        }
        _ => Err(Error::Config("describe needs --config or --checkpoint".into())),
    }
}
