//! Experiment configuration, k-fold driver and best/last-20 aggregation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::load_wav;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::manifest::{
    derive_mismatched_pool, fold_split, fraction_subset, load_manifest, strip_labels, DatasetManifest,
    ManifestEntry, DATA_ROOT_ENV,
};
use crate::nn::{ConvStage, EncoderConfig, Model, ModelConfig};
use crate::training::{train, AblationMode, Clip, MetricsRecord, RunOutput, TrainConfig, TrainData};

/// Number of final epochs averaged for the "last" statistic.
pub const LAST_WINDOW: usize = 20;

/// Flat experiment configuration, read from TOML. Relative manifest and output
/// paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub labeled_manifest: PathBuf,
    /// Source of unlabeled clips; labels in it are stripped.
    pub unlabeled_manifest: Option<PathBuf>,
    /// Drop unlabeled clips whose class is one of the target classes.
    pub exclude_target_classes: bool,
    /// Fraction of each class's training clips that keep their label.
    pub label_fraction: f64,
    /// Folds to run; empty runs all.
    pub folds: Vec<u32>,
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub clip_seconds: f64,

    pub sample_rate: u32,
    pub nfft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub db_floor: f64,

    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub representation_dim: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,

    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub semi_lr: f64,
    pub semi_epochs: usize,
    pub supervised_baseline_epochs: usize,
    pub supervised_lr: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    pub lambda_reg: f64,
    pub source_snr_min_db: f64,
    pub source_snr_max_db: f64,
    pub noise_snr_min_db: f64,
    pub noise_snr_max_db: f64,
    pub seed: u64,
    pub ablation_mode: AblationMode,
    pub from_scratch: bool,
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let f = FeatureConfig::default();
        let e = EncoderConfig::default();
        let m = ModelConfig::new(e.clone(), 1);
        let t = TrainConfig::default();
        Self {
            name: "experiment".into(),
            labeled_manifest: PathBuf::new(),
            unlabeled_manifest: None,
            exclude_target_classes: true,
            label_fraction: 1.0,
            folds: Vec::new(),
            data_root: None,
            output_dir: PathBuf::from("runs"),
            clip_seconds: 5.0,
            sample_rate: f.sample_rate,
            nfft: f.nfft,
            hop: f.hop,
            n_mels: f.n_mels,
            fmin: f.fmin,
            fmax: f.fmax,
            db_floor: f.db_floor,
            conv_channels: e.stages.iter().map(|s| s.channels).collect(),
            conv_kernel: e.stages[0].kernel,
            conv_stride: e.stages[0].stride,
            representation_dim: e.representation_dim,
            hidden_dim: m.hidden_dim,
            projection_dim: m.projection_dim,
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
            warmup_epochs: t.warmup_epochs,
            warmup_lr: t.warmup_lr,
            semi_lr: t.semi_lr,
            semi_epochs: t.semi_epochs,
            supervised_baseline_epochs: t.supervised_baseline_epochs,
            supervised_lr: t.supervised_lr,
            labeled_batch: t.labeled_batch,
            unlabeled_batch: t.unlabeled_batch,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            tau: t.tau,
            lambda_reg: t.lambda_reg,
            source_snr_min_db: t.source_snr_min_db,
            source_snr_max_db: t.source_snr_max_db,
            noise_snr_min_db: t.noise_snr_min_db,
            noise_snr_max_db: t.noise_snr_max_db,
            seed: t.seed,
            ablation_mode: t.ablation_mode,
            from_scratch: t.from_scratch,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file and makes relative paths absolute with respect to
    /// its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.labeled_manifest);
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.unlabeled_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.data_root.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig {
            nfft: self.nfft,
            hop: self.hop,
            n_mels: self.n_mels,
            fmin: self.fmin,
            fmax: self.fmax,
            sample_rate: self.sample_rate,
            db_floor: self.db_floor,
        }
    }

    pub fn model(&self, n_classes: usize) -> ModelConfig {
        let stages = self
            .conv_channels
            .iter()
            .map(|&channels| ConvStage {
                channels,
                kernel: self.conv_kernel,
                stride: self.conv_stride,
            })
            .collect();
        ModelConfig {
            encoder: EncoderConfig {
                stages,
                representation_dim: self.representation_dim,
            },
            n_classes,
            hidden_dim: self.hidden_dim,
            projection_dim: self.projection_dim,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            warmup_epochs: self.warmup_epochs,
            warmup_lr: self.warmup_lr,
            semi_lr: self.semi_lr,
            semi_epochs: self.semi_epochs,
            supervised_baseline_epochs: self.supervised_baseline_epochs,
            supervised_lr: self.supervised_lr,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            tau: self.tau,
            lambda_reg: self.lambda_reg,
            source_snr_min_db: self.source_snr_min_db,
            source_snr_max_db: self.source_snr_max_db,
            noise_snr_min_db: self.noise_snr_min_db,
            noise_snr_max_db: self.noise_snr_max_db,
            seed: self.seed,
            ablation_mode: self.ablation_mode,
            from_scratch: self.from_scratch,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn target_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// `SSACL_DATA_ROOT` wins over the `data_root` key.
    pub fn resolved_data_root(&self) -> Option<PathBuf> {
        std::env::var_os(DATA_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.data_root.clone())
    }

    /// Directory holding this run's report, epoch log and per-fold outputs.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .join(format!("{}_{}_seed{}", self.name, self.ablation_mode, self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.labeled_manifest.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("labeled_manifest is required".into()));
        }
        if !(self.clip_seconds > 0.0) || self.target_len() < self.nfft {
            return Err(Error::InvalidConfig("clip_seconds too short for the FFT size".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::InvalidConfig("conv_channels must not be empty".into()));
        }
        self.features().validate()?;
        self.model(1).validate()?;
        self.train().validate()
    }
}

/// Mean and population standard deviation over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("cannot aggregate an empty series".into()));
        }
        let m = mean(values);
        let var = mean(&values.iter().map(|v| (v - m).powi(2)).collect::<Vec<_>>());
        Ok(Self { mean: m, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub best: MeanStd,
    pub last: MeanStd,
    /// Epochs actually averaged per fold for `last` (the shortest fold's).
    pub last_window: usize,
}

/// Running mean; exact for constant input.
fn mean(values: &[f64]) -> f64 {
    values
        .iter()
        .enumerate()
        .fold(0.0, |m, (k, &x)| m + (x - m) / (k + 1) as f64)
}

/// Per-fold maximum of `series`.
pub fn best_of(series: &[f64]) -> Result<f64> {
    series
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidConfig("empty accuracy series".into()))
}

/// Mean of the final [`LAST_WINDOW`] values, or of all values (with a warning)
/// when fewer exist.
pub fn last_of(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidConfig("empty accuracy series".into()));
    }
    if series.len() < LAST_WINDOW {
        log::warn!(
            "only {} epochs available; last uses all of them instead of {LAST_WINDOW}",
            series.len()
        );
    }
    Ok(mean(&series[series.len().saturating_sub(LAST_WINDOW)..]))
}

/// Best and last-20 statistics over per-fold test-accuracy series.
pub fn aggregate(folds: &[Vec<f64>]) -> Result<Aggregate> {
    if folds.is_empty() {
        return Err(Error::InvalidConfig("no folds to aggregate".into()));
    }
    let best = folds.iter().map(|s| best_of(s)).collect::<Result<Vec<_>>>()?;
    let last = folds.iter().map(|s| last_of(s)).collect::<Result<Vec<_>>>()?;
    Ok(Aggregate {
        best: MeanStd::of(&best)?,
        last: MeanStd::of(&last)?,
        last_window: folds.iter().map(|s| s.len().min(LAST_WINDOW)).min().unwrap_or(0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: u32,
    pub n_train_labeled: usize,
    pub n_test: usize,
    pub n_contrast_pool: usize,
    pub best: f64,
    pub last: f64,
    /// Warm-up epochs (if any) followed by the main phase.
    pub epochs: Vec<MetricsRecord>,
}

impl FoldReport {
    /// Test accuracies of the main phase, in epoch order.
    pub fn test_series(&self) -> Vec<f64> {
        main_phase(&self.epochs)
            .filter_map(|r| r.test_accuracy)
            .collect()
    }
}

fn main_phase(records: &[MetricsRecord]) -> impl Iterator<Item = &MetricsRecord> {
    records
        .iter()
        .filter(|r| r.phase != crate::training::Phase::Warmup)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per fold and epoch. Regularization columns are omitted in
    /// supervised mode.
    pub fn write_epochs_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let to_err = |e: csv::Error| Error::InvalidConfig(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(to_err)?;
        let with_reg = self.mode != AblationMode::Supervised;
        let mut header = vec!["fold", "phase", "epoch", "train_loss", "l_clf"];
        if with_reg {
            header.extend(["l_reg_1", "l_reg_2"]);
        }
        header.extend(["train_accuracy", "test_accuracy"]);
        w.write_record(&header).map_err(to_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.folds {
            for r in &f.epochs {
                let mut row = vec![
                    f.fold.to_string(),
                    r.phase.name().to_string(),
                    r.epoch.to_string(),
                    r.train_loss.to_string(),
                    r.l_clf.to_string(),
                ];
                if with_reg {
                    row.extend([opt(r.l_reg_1), opt(r.l_reg_2)]);
                }
                row.extend([r.train_accuracy.to_string(), opt(r.test_accuracy)]);
                w.write_record(&row).map_err(to_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Clips of every manifest entry, loaded and conditioned once.
fn load_clips(
    manifest: &DatasetManifest,
    entries: &[ManifestEntry],
    data_root: Option<&Path>,
    extractor: &FeatureExtractor,
    target_len: usize,
) -> Result<Vec<Clip>> {
    entries
        .iter()
        .map(|e| {
            let raw = load_wav(manifest.resolve(e, data_root))?;
            Clip::new(&raw, manifest.label_index(e), extractor, target_len)
        })
        .collect()
}

/// Loaded corpus shared by all folds of an experiment.
pub struct Corpus {
    pub labeled: DatasetManifest,
    pub labeled_clips: Vec<Clip>,
    pub pool: Vec<ManifestEntry>,
    pub pool_clips: Vec<Clip>,
    pub extractor: FeatureExtractor,
}

impl Corpus {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data_root = cfg.resolved_data_root();
        let extractor = FeatureExtractor::new(cfg.features())?;
        let labeled = load_manifest(&cfg.labeled_manifest)?;
        if labeled.n_classes() == 0 {
            return Err(Error::InvalidManifest(format!(
                "{} has no labeled clips",
                cfg.labeled_manifest.display()
            )));
        }
        let labeled_clips = load_clips(
            &labeled,
            &labeled.entries,
            data_root.as_deref(),
            &extractor,
            cfg.target_len(),
        )?;
        let (pool, pool_clips) = match &cfg.unlabeled_manifest {
            None => (Vec::new(), Vec::new()),
            Some(path) => {
                let source = load_manifest(path)?;
                let pool = if cfg.exclude_target_classes && !source.is_unlabeled() {
                    let present: Vec<String> = labeled
                        .class_map
                        .keys()
                        .filter(|c| source.class_map.contains_key(*c))
                        .cloned()
                        .collect();
                    derive_mismatched_pool(&source, &present)?
                } else {
                    strip_labels(&source)
                };
                let clips =
                    load_clips(&pool, &pool.entries, data_root.as_deref(), &extractor, cfg.target_len())?;
                (pool.entries, clips)
            }
        };
        Ok(Self {
            labeled,
            labeled_clips,
            pool,
            pool_clips,
            extractor,
        })
    }

    pub fn classes(&self) -> Vec<String> {
        self.labeled.class_map.keys().cloned().collect()
    }
}

/// Seed for one fold, so folds differ but stay reproducible.
pub fn fold_seed(seed: u64, fold: u32) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(fold as u64)
}

/// Trains and evaluates one fold.
pub fn run_fold(cfg: &ExperimentConfig, corpus: &Corpus, fold: u32, out: Option<&RunOutput>) -> Result<FoldReport> {
    let (train_entries, test_entries) = fold_split(&corpus.labeled, fold)?;
    let seed = fold_seed(cfg.seed, fold);
    let subset = fraction_subset(&train_entries, cfg.label_fraction, seed)?;
    let index_of = |entries: &[ManifestEntry]| -> Vec<usize> {
        let wanted: BTreeSet<&PathBuf> = entries.iter().map(|e| &e.path).collect();
        corpus
            .labeled
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| wanted.contains(&e.path))
            .map(|(i, _)| i)
            .collect()
    };
    let pick = |idx: Vec<usize>| -> Vec<Clip> { idx.into_iter().map(|i| corpus.labeled_clips[i].clone()).collect() };

    let test_paths: BTreeSet<&PathBuf> = test_entries.iter().map(|e| &e.path).collect();
    let unlabeled: Vec<Clip> = corpus
        .pool
        .iter()
        .zip(&corpus.pool_clips)
        .filter(|(e, _)| !test_paths.contains(&e.path))
        .map(|(_, c)| c.clone())
        .collect();
    let data = TrainData {
        labeled: pick(index_of(&subset)),
        test: pick(index_of(&test_entries)),
        unlabeled,
        extractor: corpus.extractor.clone(),
        target_len: cfg.target_len(),
    };
    let n_contrast_pool = if cfg.ablation_mode.uses_unlabeled() {
        data.unlabeled.len()
    } else if cfg.ablation_mode == AblationMode::NoUnlabeled {
        data.labeled.len()
    } else {
        0
    };
    let mut train_cfg = cfg.train();
    train_cfg.seed = seed;
    let model = Model::new(cfg.model(corpus.labeled.n_classes()), seed)?;
    log::info!(
        "fold {fold}: {} labeled, {} test, {} unlabeled, mode {}",
        data.labeled.len(),
        data.test.len(),
        data.unlabeled.len(),
        cfg.ablation_mode
    );
    let result = train(model, &data, &train_cfg, out)?;
    let main: Vec<f64> = main_phase(&result.records)
        .filter_map(|r| r.test_accuracy)
        .collect();
    Ok(FoldReport {
        fold,
        n_train_labeled: data.labeled.len(),
        n_test: data.test.len(),
        n_contrast_pool,
        best: best_of(&main)?,
        last: last_of(&main)?,
        epochs: result.records,
    })
}

/// Runs every configured fold and writes `report.json` and `epochs.csv` into
/// [`ExperimentConfig::run_dir`].
pub fn run_kfold(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let corpus = Corpus::load(cfg)?;
    run_kfold_with(cfg, &corpus)
}

/// [`run_kfold`] over an already loaded corpus.
pub fn run_kfold_with(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<ExperimentReport> {
    cfg.validate()?;
    let folds: Vec<u32> = if cfg.folds.is_empty() {
        (1..=corpus.labeled.n_folds()).collect()
    } else {
        cfg.folds.clone()
    };
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| Error::io(format!("creating {}", run_dir.display()), e))?;
    let mut reports = Vec::with_capacity(folds.len());
    for fold in folds {
        let out = RunOutput {
            dir: run_dir.join(format!("fold{fold}")),
        };
        let report = run_fold(cfg, corpus, fold, Some(&out)).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?;
        reports.push(report);
    }
    let series: Vec<Vec<f64>> = reports.iter().map(FoldReport::test_series).collect();
    let report = ExperimentReport {
        name: cfg.name.clone(),
        mode: cfg.ablation_mode,
        seed: cfg.seed,
        classes: corpus.classes(),
        aggregate: aggregate(&series)?,
        folds: reports,
    };
    report.write_json(run_dir.join("report.json"))?;
    report.write_epochs_csv(run_dir.join("epochs.csv"))?;
    Ok(report)
}

/// Summary row for one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub name: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub n_folds: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
}

/// Collects every `report.json` below `runs` (at most two levels deep) and
/// writes `summary.json` and `summary.csv` there.
pub fn summarize_runs(runs: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let runs = runs.as_ref();
    let mut found = Vec::new();
    let mut stack = vec![(runs.to_path_buf(), 0)];
    while let Some((dir, depth)) = stack.pop() {
        let report = dir.join("report.json");
        if report.is_file() {
            found.push(report);
            continue;
        }
        if depth < 2 {
            let read = std::fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            for entry in read {
                let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
                if entry.path().is_dir() {
                    stack.push((entry.path(), depth + 1));
                }
            }
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(Error::MissingFile(runs.join("*/report.json")));
    }
    let mut rows = Vec::with_capacity(found.len());
    for path in found {
        let r = ExperimentReport::read_json(&path)?;
        let run = path
            .parent()
            .and_then(|p| p.strip_prefix(runs).ok())
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        rows.push(RunSummary {
            run,
            name: r.name,
            mode: r.mode,
            seed: r.seed,
            n_folds: r.folds.len(),
            best_mean: r.aggregate.best.mean,
            best_std: r.aggregate.best.std,
            last_mean: r.aggregate.last.mean,
            last_std: r.aggregate.last.std,
        });
    }
    let json = runs.join("summary.json");
    std::fs::write(&json, serde_json::to_string_pretty(&rows)? + "\n")
        .map_err(|e| Error::io(format!("writing {}", json.display()), e))?;
    let csv_path = runs.join("summary.csv");
    let to_err = |e: csv::Error| Error::InvalidConfig(format!("{}: {e}", csv_path.display()));
    let mut w = csv::Writer::from_path(&csv_path).map_err(to_err)?;
    for row in &rows {
        w.serialize(row).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    Ok(rows)
}
