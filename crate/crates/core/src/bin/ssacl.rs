use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ssacl::audio::{load_wav, pad_or_crop};
use ssacl::features::{write_feature_cache, FeatureExtractor};
use ssacl::harness::{run_kfold, summarize_runs, ExperimentConfig};
use ssacl::manifest::{load_manifest, DATA_ROOT_ENV};
use ssacl::synth::{generate_toy_corpus, toy_experiment, SynthConfig};
use ssacl::training::AblationMode;
use ssacl::{Error, Result};

#[derive(Parser)]
#[command(name = "ssacl", version, about = "Cross-domain semi-supervised audio classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a k-fold experiment from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// full, no-mixing, no-unlabeled or supervised.
        #[arg(long)]
        mode: Option<AblationMode>,
        /// Run only this fold.
        #[arg(long)]
        fold: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Precompute log-mel features for every clip in a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take feature settings and clip length from this experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarize every report.json below a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Write the synthetic toy corpus and a matching config.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn train(config: &Path, mode: Option<AblationMode>, fold: Option<u32>, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(m) = mode {
        cfg.ablation_mode = m;
    }
    if let Some(f) = fold {
        cfg.folds = vec![f];
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_kfold(&cfg)?;
    let a = &report.aggregate;
    println!(
        "{} [{}] seed {}: best {:.2} ± {:.2}, last {:.2} ± {:.2} over {} fold(s)",
        report.name,
        report.mode,
        report.seed,
        100.0 * a.best.mean,
        100.0 * a.best.std,
        100.0 * a.last.mean,
        100.0 * a.last.std,
        report.folds.len()
    );
    println!("wrote {}", cfg.run_dir().join("report.json").display());
    Ok(())
}

fn features(manifest: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let m = load_manifest(manifest)?;
    let root = std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .or(cfg.data_root.clone());
    let extractor = FeatureExtractor::new(cfg.features())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    for e in &m.entries {
        let w = load_wav(m.resolve(e, root.as_deref()))?;
        let w = ssacl::audio::normalize_energy(&ssacl::audio::resample(&w, cfg.sample_rate)?)?;
        let spec = extractor.log_mel(&pad_or_crop(&w, cfg.target_len(), 0)?)?;
        let name = e.path.to_string_lossy().replace(['/', '\\'], "__");
        write_feature_cache(out.join(format!("{name}.feat")), &spec)?;
    }
    println!("wrote {} feature files to {}", m.entries.len(), out.display());
    Ok(())
}

fn report(runs: &Path) -> Result<()> {
    for r in summarize_runs(runs)? {
        println!(
            "{:<40} {:<13} best {:6.2} ± {:5.2}  last {:6.2} ± {:5.2}",
            r.run,
            r.mode.to_string(),
            100.0 * r.best_mean,
            100.0 * r.best_std,
            100.0 * r.last_mean,
            100.0 * r.last_std
        );
    }
    println!("wrote {}", runs.join("summary.json").display());
    Ok(())
}

fn synth(out: &Path, seed: u64) -> Result<()> {
    let corpus = generate_toy_corpus(out, &SynthConfig { seed, ..SynthConfig::default() })?;
    let mut cfg = toy_experiment(&corpus, "runs");
    cfg.labeled_manifest = "labeled.csv".into();
    cfg.unlabeled_manifest = Some("unlabeled.csv".into());
    let path = out.join("toy.toml");
    std::fs::write(&path, cfg.to_toml_string()?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    println!(
        "wrote {} labeled and {} unlabeled clips; config {}",
        corpus.n_labeled,
        corpus.n_unlabeled,
        path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, mode, fold, seed } => train(config, *mode, *fold, *seed),
        Command::Features { manifest, out, config } => features(manifest, out, config.as_deref()),
        Command::Report { runs } => report(runs),
        Command::SynthData { out, seed } => synth(out, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
