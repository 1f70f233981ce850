//! `ssda`: train, evaluate and inspect the semi-supervised domain
//! adaptation engine.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use ssda_core::data::{
    generate_synthetic, save_png, write_dataset, DomainDataset, FileFormat, SplitCase, SyntheticSpec,
};
use ssda_core::gradcheck::{run_gradcheck, GradcheckConfig};
use ssda_core::model::Activation;
use ssda_core::train::{
    evaluate, export_embeddings, load_checkpoint, stream_rng, DataSource, Precision, Stream, TrainConfig, TrainData,
    Trainer, CHECKPOINT_DIR,
};
use ssda_core::{dwt2, pwtda_augment, FilterPair, Scalar};

#[derive(Parser, Debug)]
#[command(name = "ssda", version, about = "Semi-supervised domain adaptation for single-channel imagery")]
struct Cli {
    /// JSON training config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the split seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Checkpoint directory to continue from (train) or to load (eval,
    /// export-embeddings).
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    case: Option<CaseArg>,
    #[arg(long, global = true)]
    k_shot: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Custom,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Png,
    Ssda,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SetArg {
    Source,
    Labeled,
    Unlabeled,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write metrics and checkpoints to the output directory.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Write source, partner and mixed images of the wavelet augmentation.
    AugmentPreview {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Write the synthetic paired-domain dataset in the directory layout.
    GenSynthetic {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "png")]
        format: FormatArg,
    },
    /// Write evaluation-mode features of a checkpoint.
    ExportEmbeddings {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        set: SetArg,
    },
    /// Finite-difference check of every loss gradient on a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check the ReLU network instead of the smooth tanh one.
        #[arg(long)]
        relu: bool,
    },
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut config = match &cli.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.split.seed = seed;
    }
    if let Some(case) = cli.case {
        config.split.case = match case {
            CaseArg::One => SplitCase::CaseI,
            CaseArg::Two => SplitCase::CaseII,
            CaseArg::Custom => SplitCase::Custom,
        };
    }
    if let Some(k) = cli.k_shot {
        config.split.k_shot = k;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if let Command::Gradcheck { tolerance, relu } = &cli.command {
        return gradcheck(*tolerance, *relu);
    }
    let config = load_config(cli)?;
    match config.precision {
        Precision::F32 => dispatch::<f32>(cli, config),
        Precision::F64 => dispatch::<f64>(cli, config),
    }
}

fn dispatch<T: Scalar>(cli: &Cli, config: TrainConfig) -> Result<ExitCode> {
    match &cli.command {
        Command::Train => train::<T>(cli, config),
        Command::Eval => eval::<T>(cli, config),
        Command::AugmentPreview { count } => augment_preview::<T>(cli, config, *count),
        Command::GenSynthetic { output, format } => gen_synthetic(config, output, *format),
        Command::ExportEmbeddings { output, set } => export::<T>(cli, config, output, *set),
        Command::Gradcheck { .. } => unreachable!("handled before config loading"),
    }
}

fn train<T: Scalar>(cli: &Cli, config: TrainConfig) -> Result<ExitCode> {
    let data = TrainData::<T>::from_config(&config).context("loading data")?;
    info!(
        "data: {} source, {} labeled, {} unlabeled, {} test",
        data.source.len(),
        data.labeled.len(),
        data.unlabeled.len(),
        data.test.len()
    );
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    fs::write(cli.out_dir.join("config.json"), config.to_json_pretty())?;
    let trainer = match &cli.resume {
        Some(ckpt) => Trainer::resume(config, data, ckpt)?,
        None => Trainer::new(config, data)?,
    };
    let mut trainer = trainer.with_output(&cli.out_dir)?;
    trainer.run()?;
    let report = match trainer.last_eval() {
        Some(r) => r.clone(),
        None => trainer.evaluate()?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

/// `--resume` if given, else the newest checkpoint under the output directory.
fn checkpoint_dir(cli: &Cli) -> Result<PathBuf> {
    if let Some(p) = &cli.resume {
        return Ok(p.clone());
    }
    let root = cli.out_dir.join(CHECKPOINT_DIR);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("no checkpoints under {}; pass --resume", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.pop().with_context(|| format!("no checkpoints under {}", root.display()))
}

fn eval<T: Scalar>(cli: &Cli, config: TrainConfig) -> Result<ExitCode> {
    let dir = checkpoint_dir(cli)?;
    let ckpt = load_checkpoint::<T>(&dir)?;
    let data = TrainData::<T>::from_config(&config)?;
    let report = evaluate(&ckpt.state.params, &data.test)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn export<T: Scalar>(cli: &Cli, config: TrainConfig, output: &Path, set: SetArg) -> Result<ExitCode> {
    let dir = checkpoint_dir(cli)?;
    let ckpt = load_checkpoint::<T>(&dir)?;
    let data = TrainData::<T>::from_config(&config)?;
    let dataset: DomainDataset<T> = match set {
        SetArg::Source => data.source,
        SetArg::Labeled => data.labeled,
        SetArg::Unlabeled => data.unlabeled,
        SetArg::Test => data.test,
        SetArg::All => data.source.merged(data.labeled)?.merged(data.unlabeled)?.merged(data.test)?,
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let sidecar = export_embeddings(&ckpt.state.params, &dataset, output)?;
    println!("wrote {} x {} features to {}", sidecar.count, sidecar.embed_dim, output.display());
    Ok(ExitCode::SUCCESS)
}

fn augment_preview<T: Scalar>(cli: &Cli, config: TrainConfig, count: usize) -> Result<ExitCode> {
    let data = TrainData::<T>::from_config(&config)?;
    let dir = cli.out_dir.join("augment_preview");
    fs::create_dir_all(&dir)?;
    let filters = FilterPair::<T>::from_kind(config.wavelet);
    let mut rng = stream_rng(config.seed, Stream::Partner, 0);
    let mut summary = Vec::new();
    for (i, s) in data.source.samples().iter().take(count).enumerate() {
        let partners: Vec<_> = data.labeled.samples().iter().filter(|l| l.label == s.label).collect();
        if partners.is_empty() {
            bail!("no labeled target partner for category {}", data.source.categories()[s.label]);
        }
        let partner = &partners[rand::Rng::random_range(&mut rng, 0..partners.len())].image;
        let mixed = pwtda_augment(&s.image, partner, T::of(config.alpha), &filters)?;
        save_png(&s.image, &dir.join(format!("{i:03}_source.png")))?;
        save_png(partner, &dir.join(format!("{i:03}_partner.png")))?;
        save_png(&mixed, &dir.join(format!("{i:03}_mixed.png")))?;
        let energy = |img: &ssda_core::GrayImage<T>| -> Result<(f64, f64)> {
            let b = dwt2(img, &filters)?;
            Ok((b.a.energy().as_f64(), b.high_energy().as_f64()))
        };
        let (sa, sh) = energy(&s.image)?;
        let (ma, mh) = energy(&mixed)?;
        summary.push(serde_json::json!({
            "index": i,
            "category": data.source.categories()[s.label],
            "source_low_energy": sa,
            "source_high_energy": sh,
            "mixed_low_energy": ma,
            "mixed_high_energy": mh,
        }));
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("wrote {} previews to {}", summary.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn gen_synthetic(config: TrainConfig, output: &Path, format: FormatArg) -> Result<ExitCode> {
    let spec = match config.data {
        DataSource::Synthetic(spec) => spec,
        DataSource::Directory { .. } => SyntheticSpec::default(),
    };
    let (source, target) = generate_synthetic::<f32>(&spec)?;
    let format = match format {
        FormatArg::Png => FileFormat::Png,
        FormatArg::Ssda => FileFormat::Ssda,
    };
    write_dataset(&source, &target, output, format)?;
    println!(
        "wrote {} source and {} target images to {}",
        source.len(),
        target.len(),
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(tolerance: f64, relu: bool) -> Result<ExitCode> {
    let mut cfg = GradcheckConfig { tolerance, ..GradcheckConfig::default() };
    if relu {
        cfg.activation = Activation::Relu;
    }
    let report = run_gradcheck(&cfg)?;
    for t in &report.terms {
        println!(
            "{:<6} {} max relative error {:.3e} ({} coordinates, worst {})",
            t.term.name(),
            if t.passed { "PASS" } else { "FAIL" },
            t.max_rel_error,
            t.checked,
            t.worst_param
        );
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
