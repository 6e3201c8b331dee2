//! Two-stage training: supervised warm-up of the encoder and classifier, then
//! joint classification and contrastive regularization over batch-split
//! mixtures of labeled and unlabeled clips.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{normalize_energy, pad_or_crop, resample, Waveform};
use crate::augment::{build_batch, MixParams, MixStrategy};
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, MelSpectrogram};
use crate::losses::{cross_entropy, ntxent, total_loss, LossConfig};
use crate::nn::{checkpoint, Adam, AdamConfig, Mode, Model, Output, ParamGroup, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Batch-split mixing over labeled and unlabeled clips.
    #[default]
    Full,
    /// Contrastive pairs built from time offsets only.
    NoMixing,
    /// The contrastive batch is drawn from the labeled set alone.
    NoUnlabeled,
    /// Cross-entropy only, no warm-up split and no regularizer.
    Supervised,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoMixing,
        AblationMode::NoUnlabeled,
        AblationMode::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoMixing => "no_mixing",
            AblationMode::NoUnlabeled => "no_unlabeled",
            AblationMode::Supervised => "supervised",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, AblationMode::Full | AblationMode::NoMixing)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown mode {s:?}; expected full, no-mixing, no-unlabeled or supervised"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
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
    /// Skip warm-up and start the joint phase from random weights.
    pub from_scratch: bool,
    /// Save a checkpoint every N epochs of the main phase; 0 keeps only the
    /// final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            warmup_lr: 1e-4,
            semi_lr: 1e-5,
            semi_epochs: 100,
            supervised_baseline_epochs: 200,
            supervised_lr: 1e-4,
            labeled_batch: 8,
            unlabeled_batch: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            tau: 0.01,
            lambda_reg: 0.05,
            source_snr_min_db: -5.0,
            source_snr_max_db: 20.0,
            noise_snr_min_db: 6.0,
            noise_snr_max_db: 30.0,
            seed: 0,
            ablation_mode: AblationMode::Full,
            from_scratch: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("warmup_lr", self.warmup_lr),
            ("semi_lr", self.semi_lr),
            ("supervised_lr", self.supervised_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be at least 1".into()));
        }
        self.adam(self.semi_lr).validate()?;
        self.loss().validate()?;
        self.mix_params(1).validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_reg: self.lambda_reg,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn mix_params(&self, target_len: usize) -> MixParams {
        MixParams {
            source_snr_range_db: (self.source_snr_min_db, self.source_snr_max_db),
            noise_snr_min_db: self.noise_snr_min_db,
            noise_snr_max_db: self.noise_snr_max_db,
            target_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Semi,
    Supervised,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Semi => "semi",
            Phase::Supervised => "supervised",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub train_loss: f64,
    pub l_clf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_reg_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_reg_2: Option<f64>,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

/// A conditioned clip: resampled, unit-RMS waveform of its natural length,
/// plus log-mel features of the clip zero-padded or cropped from sample zero.
#[derive(Debug, Clone)]
pub struct Clip {
    pub waveform: Waveform,
    pub features: MelSpectrogram,
    pub label: Option<usize>,
}

impl Clip {
    pub fn new(
        raw: &Waveform,
        label: Option<usize>,
        extractor: &FeatureExtractor,
        target_len: usize,
    ) -> Result<Self> {
        let waveform = normalize_energy(&resample(raw, extractor.config().sample_rate)?)?;
        let features = extractor.log_mel(&pad_or_crop(&waveform, target_len, 0)?)?;
        Ok(Self {
            waveform,
            features,
            label,
        })
    }
}

/// Everything one training run consumes.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub labeled: Vec<Clip>,
    pub unlabeled: Vec<Clip>,
    pub test: Vec<Clip>,
    pub extractor: FeatureExtractor,
    /// Clip length in samples at the feature sample rate.
    pub target_len: usize,
}

/// Stacks equally shaped features into a `(B, n_mels, n_frames)` tensor.
pub fn stack_features(feats: &[&MelSpectrogram]) -> Result<Tensor<f32>> {
    let first = feats
        .first()
        .ok_or_else(|| Error::ShapeMismatch("cannot stack an empty batch".into()))?;
    let (m, f) = first.shape();
    let mut values = Vec::with_capacity(feats.len() * m * f);
    for s in feats {
        if s.shape() != (m, f) {
            return Err(Error::ShapeMismatch(format!(
                "feature shape {:?} differs from {:?}",
                s.shape(),
                (m, f)
            )));
        }
        values.extend_from_slice(&s.values);
    }
    Tensor::new(vec![feats.len(), m, f], values)
}

fn labels_of(clips: &[&Clip]) -> Result<Vec<usize>> {
    clips
        .iter()
        .map(|c| {
            c.label
                .ok_or_else(|| Error::InvalidManifest("labeled batch holds an unlabeled clip".into()))
        })
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(model: &Model<f32>, clips: &[Clip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::EmptyAudio(PathBuf::from("<evaluation set>")));
    }
    let mut correct = 0usize;
    for chunk in clips.chunks(64) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let feats: Vec<&MelSpectrogram> = refs.iter().map(|c| &c.features).collect();
        let logits = model.classify(&stack_features(&feats)?)?;
        for (i, label) in labels_of(&refs)?.into_iter().enumerate() {
            correct += usize::from(argmax(logits.row(i)) == label);
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub l_clf: f64,
    pub l_reg_1: Option<f64>,
    pub l_reg_2: Option<f64>,
    /// Anchors seen by the two regularization terms.
    pub anchors: (usize, usize),
}

fn guard(model: &Model<f32>, losses: &StepLosses, context: &str) -> Result<()> {
    let values = [Some(losses.total), Some(losses.l_clf), losses.l_reg_1, losses.l_reg_2];
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{context}: loss became non-finite ({losses:?})")));
    }
    if let Some(name) = model.first_non_finite() {
        return Err(Error::NonFinite(format!("{context}: parameter {name} became non-finite")));
    }
    Ok(())
}

/// One cross-entropy step on clean features, updating `groups` only.
pub fn supervised_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    labeled: &[&Clip],
    groups: &[ParamGroup],
) -> Result<StepLosses> {
    model.zero_grad();
    let feats: Vec<&MelSpectrogram> = labeled.iter().map(|c| &c.features).collect();
    let (logits, trace) = model.forward(&stack_features(&feats)?, Output::Logits, Mode::Train)?;
    let ce = cross_entropy(&logits, &labels_of(labeled)?)?;
    model.backward(&trace, &ce.grad)?;
    adam.step(model, groups);
    let l_clf = ce.loss as f64;
    Ok(StepLosses {
        total: l_clf,
        l_clf,
        l_reg_1: None,
        l_reg_2: None,
        anchors: (0, 0),
    })
}

/// Settings shared by every joint step of a run.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub extractor: &'a FeatureExtractor,
    pub mix: MixParams,
    pub strategy: MixStrategy,
    pub loss: LossConfig,
}

/// Embeds `[clean; augmented]` in one train-mode pass, applies NT-Xent and
/// backpropagates `lambda * grad`.
fn regularize(
    model: &mut Model<f32>,
    clean: &[&MelSpectrogram],
    augmented: &[MelSpectrogram],
    loss: &LossConfig,
) -> Result<f64> {
    let b = clean.len();
    let mut all: Vec<&MelSpectrogram> = clean.to_vec();
    all.extend(augmented.iter());
    let (z, trace) = model.forward(&stack_features(&all)?, Output::Embedding, Mode::Train)?;
    let d = z.dim(1);
    let (z_clean, z_aug) = z.values.split_at(b * d);
    let r = ntxent(
        &Tensor::new(vec![b, d], z_clean.to_vec())?,
        &Tensor::new(vec![b, d], z_aug.to_vec())?,
        loss.tau,
    )?;
    let lambda = loss.lambda_reg as f32;
    let grad: Vec<f32> = r
        .grad_z
        .values
        .iter()
        .chain(&r.grad_z_aug.values)
        .map(|&g| g * lambda)
        .collect();
    model.backward(&trace, &Tensor::new(vec![2 * b, d], grad)?)?;
    Ok(r.loss as f64)
}

/// One joint step: cross-entropy on the clean labeled minibatch plus two
/// NT-Xent terms over the batch-split halves of `labeled ++ contrast`, then a
/// single Adam update of every parameter group.
pub fn semi_supervised_step(
    model: &mut Model<f32>,
    adam: &mut Adam<f32>,
    labeled: &[&Clip],
    contrast: &[&Clip],
    ctx: &StepContext<'_>,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    model.zero_grad();
    let feats: Vec<&MelSpectrogram> = labeled.iter().map(|c| &c.features).collect();
    let (logits, trace) = model.forward(&stack_features(&feats)?, Output::Logits, Mode::Train)?;
    let ce = cross_entropy(&logits, &labels_of(labeled)?)?;
    model.backward(&trace, &ce.grad)?;

    let lab_waves: Vec<Waveform> = labeled.iter().map(|c| c.waveform.clone()).collect();
    let con_waves: Vec<Waveform> = contrast.iter().map(|c| c.waveform.clone()).collect();
    let batch = build_batch(&lab_waves, &con_waves, &ctx.mix, ctx.strategy, rng)?;
    let source = |i: usize| -> &MelSpectrogram {
        if i < labeled.len() {
            &labeled[i].features
        } else {
            &contrast[i - labeled.len()].features
        }
    };
    let mut reg = [0.0; 2];
    for (k, (sources, aug)) in [
        (batch.s1_sources(), &batch.s1_aug),
        (batch.s2_sources(), &batch.s2_aug),
    ]
    .into_iter()
    .enumerate()
    {
        let clean: Vec<&MelSpectrogram> = sources.iter().map(|&i| source(i)).collect();
        let augmented = aug
            .iter()
            .map(|w| ctx.extractor.log_mel(w))
            .collect::<Result<Vec<_>>>()?;
        reg[k] = regularize(model, &clean, &augmented, &ctx.loss)?;
    }
    adam.step(
        model,
        &[ParamGroup::Encoder, ParamGroup::Classifier, ParamGroup::Projector],
    );
    let l_clf = ce.loss as f64;
    Ok(StepLosses {
        total: total_loss(l_clf, reg[0], reg[1], &ctx.loss),
        l_clf,
        l_reg_1: Some(reg[0]),
        l_reg_2: Some(reg[1]),
        anchors: (batch.s1.len(), batch.s2.len()),
    })
}

/// Endless sampler that reshuffles its indices each time they run out.
#[derive(Debug, Clone)]
pub struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
}

impl CyclingSampler {
    pub fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    pub fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Minibatches per epoch: one pass over the labeled set.
pub fn iterations_per_epoch(n_labeled: usize, labeled_batch: usize) -> usize {
    (n_labeled / labeled_batch).max(1)
}

/// Shuffled labeled minibatches for one epoch; a set smaller than one batch
/// yields a single short batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let iters = iterations_per_epoch(n, batch);
    (0..iters)
        .map(|i| order[i * batch..((i + 1) * batch).min(n)].to_vec())
        .collect()
}

/// Where a run writes metrics and checkpoints.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(self.checkpoint_dir())
            .map_err(|e| Error::io(format!("creating {}", self.checkpoint_dir().display()), e))?;
        let path = self.metrics_path();
        std::fs::write(&path, b"").map_err(|e| Error::io(format!("creating {}", path.display()), e))
    }

    fn append(&self, record: &MetricsRecord) -> Result<()> {
        let path = self.metrics_path();
        let mut file = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        file.write_all(&line)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn checkpoint(&self, model: &Model<f32>, name: &str, record: &MetricsRecord) -> Result<()> {
        checkpoint::save(
            model,
            self.checkpoint_dir().join(name),
            serde_json::to_value(record)?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model<f32>,
    /// Warm-up epochs (if any) followed by the main phase.
    pub records: Vec<MetricsRecord>,
}

impl TrainResult {
    /// Records of the main phase: joint training, or the supervised baseline.
    pub fn main_phase(&self) -> Vec<&MetricsRecord> {
        self.records
            .iter()
            .filter(|r| r.phase != Phase::Warmup)
            .collect()
    }
}

struct EpochSums {
    total: f64,
    clf: f64,
    reg: Option<(f64, f64)>,
    n: usize,
}

impl EpochSums {
    fn new() -> Self {
        Self {
            total: 0.0,
            clf: 0.0,
            reg: None,
            n: 0,
        }
    }

    fn add(&mut self, s: &StepLosses) {
        self.total += s.total;
        self.clf += s.l_clf;
        if let (Some(a), Some(b)) = (s.l_reg_1, s.l_reg_2) {
            let (ra, rb) = self.reg.unwrap_or((0.0, 0.0));
            self.reg = Some((ra + a, rb + b));
        }
        self.n += 1;
    }
}

struct Runner<'a> {
    data: &'a TrainData,
    cfg: &'a TrainConfig,
    out: Option<&'a RunOutput>,
    records: Vec<MetricsRecord>,
}

impl Runner<'_> {
    fn finish_epoch(&mut self, model: &Model<f32>, phase: Phase, epoch: usize, sums: EpochSums) -> Result<()> {
        let n = sums.n as f64;
        let record = MetricsRecord {
            phase,
            epoch,
            train_loss: sums.total / n,
            l_clf: sums.clf / n,
            l_reg_1: sums.reg.map(|r| r.0 / n),
            l_reg_2: sums.reg.map(|r| r.1 / n),
            train_accuracy: evaluate(model, &self.data.labeled)?,
            test_accuracy: if self.data.test.is_empty() {
                None
            } else {
                Some(evaluate(model, &self.data.test)?)
            },
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} train acc {:.3} test acc {}",
            phase.name(),
            record.train_loss,
            record.train_accuracy,
            record.test_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        if let Some(out) = self.out {
            out.append(&record)?;
            let every = self.cfg.checkpoint_every;
            if phase != Phase::Warmup && every > 0 && epoch % every == 0 {
                out.checkpoint(model, &format!("epoch_{epoch:04}.ckpt"), &record)?;
            }
        }
        self.records.push(record);
        Ok(())
    }

    fn supervised_phase(
        &mut self,
        model: &mut Model<f32>,
        phase: Phase,
        epochs: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let mut adam = Adam::new(self.cfg.adam(lr));
        let groups = [ParamGroup::Encoder, ParamGroup::Classifier];
        for epoch in 1..=epochs {
            let mut sums = EpochSums::new();
            for (it, idx) in epoch_batches(self.data.labeled.len(), self.cfg.labeled_batch, rng)
                .into_iter()
                .enumerate()
            {
                let batch: Vec<&Clip> = idx.iter().map(|&i| &self.data.labeled[i]).collect();
                let s = supervised_step(model, &mut adam, &batch, &groups)?;
                guard(model, &s, &format!("{} epoch {epoch} step {it}", phase.name()))?;
                sums.add(&s);
            }
            self.finish_epoch(model, phase, epoch, sums)?;
        }
        Ok(())
    }

    fn semi_phase(&mut self, model: &mut Model<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
        let cfg = self.cfg;
        let data = self.data;
        let mode = cfg.ablation_mode;
        let pool: &[Clip] = if mode.uses_unlabeled() {
            &data.unlabeled
        } else {
            &data.labeled
        };
        if pool.is_empty() {
            return Err(Error::InvalidManifest(format!(
                "mode {mode} needs a non-empty contrastive pool"
            )));
        }
        let ctx = StepContext {
            extractor: &data.extractor,
            mix: cfg.mix_params(data.target_len),
            strategy: if mode == AblationMode::NoMixing {
                MixStrategy::OffsetOnly
            } else {
                MixStrategy::Full
            },
            loss: cfg.loss(),
        };
        let mut adam = Adam::new(cfg.adam(cfg.semi_lr));
        let mut sampler = CyclingSampler::new(pool.len(), rng);
        for epoch in 1..=cfg.semi_epochs {
            let mut sums = EpochSums::new();
            for (it, idx) in epoch_batches(data.labeled.len(), cfg.labeled_batch, rng)
                .into_iter()
                .enumerate()
            {
                let labeled: Vec<&Clip> = idx.iter().map(|&i| &data.labeled[i]).collect();
                let contrast: Vec<&Clip> = sampler
                    .take(cfg.unlabeled_batch, rng)
                    .into_iter()
                    .map(|i| &pool[i])
                    .collect();
                let s = semi_supervised_step(model, &mut adam, &labeled, &contrast, &ctx, rng)?;
                guard(model, &s, &format!("semi epoch {epoch} step {it}"))?;
                sums.add(&s);
            }
            self.finish_epoch(model, Phase::Semi, epoch, sums)?;
        }
        Ok(())
    }
}

/// Runs warm-up followed by the joint phase, or the plain supervised baseline
/// in [`AblationMode::Supervised`]. Test accuracy is evaluated after every
/// epoch when `data.test` is non-empty.
pub fn train(
    model: Model<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::InvalidManifest("training needs at least one labeled clip".into()));
    }
    if let Some(out) = out {
        out.prepare()?;
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut runner = Runner {
        data,
        cfg,
        out,
        records: Vec::new(),
    };
    if cfg.ablation_mode == AblationMode::Supervised {
        runner.supervised_phase(
            &mut model,
            Phase::Supervised,
            cfg.supervised_baseline_epochs,
            cfg.supervised_lr,
            &mut rng,
        )?;
    } else {
        if !cfg.from_scratch {
            runner.supervised_phase(&mut model, Phase::Warmup, cfg.warmup_epochs, cfg.warmup_lr, &mut rng)?;
        }
        runner.semi_phase(&mut model, &mut rng)?;
    }
    model.zero_grad();
    let records = runner.records;
    if let (Some(out), Some(last)) = (out, records.last()) {
        out.checkpoint(&model, "final.ckpt", last)?;
    }
    Ok(TrainResult { model, records })
}

/// Supervised warm-up alone: trains the encoder and classifier for
/// `cfg.warmup_epochs` at `cfg.warmup_lr` without augmentation.
pub fn warmup(model: Model<f32>, data: &TrainData, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::InvalidManifest("warm-up needs at least one labeled clip".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut runner = Runner {
        data,
        cfg,
        out: None,
        records: Vec::new(),
    };
    runner.supervised_phase(&mut model, Phase::Warmup, cfg.warmup_epochs, cfg.warmup_lr, &mut rng)?;
    model.zero_grad();
    Ok(TrainResult {
        model,
        records: runner.records,
    })
}

/// Loads `metrics.jsonl` written by a run.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
