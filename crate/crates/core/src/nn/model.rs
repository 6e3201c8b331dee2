//! Shared encoder `f`, classification head `g_c` and L2-normalized projection
//! head `g_p`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, l2_normalize, l2_normalize_backward, relu,
    relu_backward, BatchNorm, BatchNormCache, Conv2d, Conv2dCache, Dense, Mode,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stages: Vec<ConvStage>,
    pub representation_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| ConvStage {
                    channels,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            representation_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_classes: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, n_classes: usize) -> Self {
        Self {
            encoder,
            n_classes,
            hidden_dim: 128,
            projection_dim: 64,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.encoder.stages.is_empty() {
            return bad("encoder needs at least one conv stage".into());
        }
        if let Some(s) = self
            .encoder
            .stages
            .iter()
            .find(|s| s.channels == 0 || s.kernel == 0 || s.stride == 0)
        {
            return bad(format!("invalid conv stage {s:?}"));
        }
        if self.encoder.representation_dim < self.projection_dim {
            return bad(format!(
                "representation_dim {} must be >= projection_dim {}",
                self.encoder.representation_dim, self.projection_dim
            ));
        }
        if self.n_classes == 0 || self.hidden_dim == 0 || self.projection_dim == 0 {
            return bad("n_classes, hidden_dim and projection_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("batch norm momentum must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

/// Conv → batch norm → rectifier stages, global average pooling, then a
/// dense projection to the representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub blocks: Vec<ConvBlock<T>>,
    pub fc: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    blocks: Vec<(Conv2dCache<T>, BatchNormCache<T>, Tensor<T>)>,
    pre_pool_shape: Vec<usize>,
    pooled: Tensor<T>,
}

fn as_image<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape.len() {
        3 => x
            .clone()
            .reshaped(vec![x.shape[0], 1, x.shape[1], x.shape[2]]),
        4 => Ok(x.clone()),
        _ => Err(Error::ShapeMismatch(format!(
            "encoder expects (B, mels, frames), got {:?}",
            x.shape
        ))),
    }
}

impl<T: Scalar> Encoder<T> {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut in_ch = 1;
        let blocks = cfg
            .encoder
            .stages
            .iter()
            .map(|s| {
                let block = ConvBlock {
                    conv: Conv2d::new(in_ch, s.channels, s.kernel, s.stride, rng),
                    bn: BatchNorm::new(s.channels, cfg.bn_momentum, cfg.bn_eps),
                };
                in_ch = s.channels;
                block
            })
            .collect();
        Self {
            blocks,
            fc: Dense::new(in_ch, cfg.encoder.representation_dim, rng),
        }
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = as_image(x)?;
        for b in &self.blocks {
            h = relu(&b.bn.forward_eval(&b.conv.forward_eval(&h)?)?);
        }
        self.fc.forward(&global_avg_pool(&h)?)
    }

    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, EncoderTrace<T>)> {
        let mut h = as_image(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (c, conv_cache) = b.conv.forward_train(&h)?;
            let (n, bn_cache) = b.bn.forward_train(&c)?;
            h = relu(&n);
            caches.push((conv_cache, bn_cache, h.clone()));
        }
        let pooled = global_avg_pool(&h)?;
        let out = self.fc.forward(&pooled)?;
        Ok((
            out,
            EncoderTrace {
                blocks: caches,
                pre_pool_shape: h.shape.clone(),
                pooled,
            },
        ))
    }

    pub fn backward(&mut self, trace: &EncoderTrace<T>, grad_out: &Tensor<T>) -> Result<()> {
        let g = self
            .fc
            .backward(&trace.pooled, grad_out, true)?
            .expect("input gradient requested");
        let mut g = global_avg_pool_backward(&trace.pre_pool_shape, &g)?;
        for (i, (block, (conv_cache, bn_cache, out))) in
            self.blocks.iter_mut().zip(&trace.blocks).enumerate().rev()
        {
            let g_relu = relu_backward(out, &g)?;
            let g_bn = block.bn.backward(bn_cache, &g_relu)?;
            match block.conv.backward(conv_cache, &g_bn, i > 0)? {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(())
    }
}

/// Dense → batch norm → rectifier → dense, optionally L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub fc1: Dense<T>,
    pub bn: BatchNorm<T>,
    pub fc2: Dense<T>,
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct HeadTrace<T> {
    input: Tensor<T>,
    bn_cache: BatchNormCache<T>,
    hidden: Tensor<T>,
    pre_norm: Option<Tensor<T>>,
}

impl<T: Scalar> Head<T> {
    fn new(input: usize, cfg: &ModelConfig, output: usize, normalize: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Dense::new(input, cfg.hidden_dim, rng),
            bn: BatchNorm::new(cfg.hidden_dim, cfg.bn_momentum, cfg.bn_eps),
            fc2: Dense::new(cfg.hidden_dim, output, rng),
            normalize,
        }
    }

    pub fn forward_eval(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let hidden = relu(&self.bn.forward_eval(&self.fc1.forward(h)?)?);
        let out = self.fc2.forward(&hidden)?;
        if self.normalize {
            l2_normalize(&out)
        } else {
            Ok(out)
        }
    }

    pub fn forward_train(&mut self, h: &Tensor<T>) -> Result<(Tensor<T>, HeadTrace<T>)> {
        let (n, bn_cache) = self.bn.forward_train(&self.fc1.forward(h)?)?;
        let hidden = relu(&n);
        let out = self.fc2.forward(&hidden)?;
        let (out, pre_norm) = if self.normalize {
            (l2_normalize(&out)?, Some(out))
        } else {
            (out, None)
        };
        Ok((
            out,
            HeadTrace {
                input: h.clone(),
                bn_cache,
                hidden,
                pre_norm,
            },
        ))
    }

    pub fn backward(&mut self, trace: &HeadTrace<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match &trace.pre_norm {
            Some(pre) => l2_normalize_backward(pre, grad_out)?,
            None => grad_out.clone(),
        };
        let g = self
            .fc2
            .backward(&trace.hidden, &g, true)?
            .expect("input gradient requested");
        let g = relu_backward(&trace.hidden, &g)?;
        let g = self.bn.backward(&trace.bn_cache, &g)?;
        Ok(self
            .fc1
            .backward(&trace.input, &g, true)?
            .expect("input gradient requested"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Classifier,
    Projector,
}

/// What a forward pass ended with; selects the backward path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Representation,
    Logits,
    Embedding,
}

/// Record of a train-mode forward pass, consumed by [`Model::backward`].
/// Eval-mode passes return an empty trace.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    output: Output,
    encoder: Option<EncoderTrace<T>>,
    head: Option<HeadTrace<T>>,
}

impl<T> Trace<T> {
    pub fn is_recorded(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn output(&self) -> Output {
        self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub classifier: Head<T>,
    pub projector: Head<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config, &mut rng);
        let d = config.encoder.representation_dim;
        let classifier = Head::new(d, &config, config.n_classes, false, &mut rng);
        let projector = Head::new(d, &config, config.projection_dim, true, &mut rng);
        Ok(Self {
            config,
            encoder,
            classifier,
            projector,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, output: Output, mode: Mode) -> Result<(Tensor<T>, Trace<T>)> {
        if mode == Mode::Eval {
            let y = match output {
                Output::Representation => self.encode(x)?,
                Output::Logits => self.classify(x)?,
                Output::Embedding => self.project(x)?,
            };
            return Ok((
                y,
                Trace {
                    output,
                    encoder: None,
                    head: None,
                },
            ));
        }
        let (h, enc_trace) = self.encoder.forward_train(x)?;
        let (y, head) = match output {
            Output::Representation => (h, None),
            Output::Logits => {
                let (y, t) = self.classifier.forward_train(&h)?;
                (y, Some(t))
            }
            Output::Embedding => {
                let (y, t) = self.projector.forward_train(&h)?;
                (y, Some(t))
            }
        };
        Ok((
            y,
            Trace {
                output,
                encoder: Some(enc_trace),
                head,
            },
        ))
    }

    /// Accumulates parameter gradients for the pass recorded in `trace`,
    /// given the gradient of the loss with respect to that pass's output.
    pub fn backward(&mut self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<()> {
        let enc_trace = trace.encoder.as_ref().ok_or_else(|| {
            Error::State("backward needs a recorded train-mode forward pass".into())
        })?;
        let g = match (trace.output, &trace.head) {
            (Output::Representation, _) => grad_out.clone(),
            (Output::Logits, Some(h)) => self.classifier.backward(h, grad_out)?,
            (Output::Embedding, Some(h)) => self.projector.backward(h, grad_out)?,
            _ => return Err(Error::State("trace is missing its head record".into())),
        };
        self.encoder.backward(enc_trace, &g)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.forward_eval(x)
    }

    /// Eval-mode logits (no softmax).
    pub fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.classifier.forward_eval(&self.encode(x)?)
    }

    /// Eval-mode unit-norm embeddings.
    pub fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.projector.forward_eval(&self.encode(x)?)
    }

    /// Trainable tensors in a fixed order, with unique dotted names.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            let p = format!("encoder.stage{i}");
            out.push((format!("{p}.conv.weight"), ParamGroup::Encoder, &b.conv.weight));
            out.push((format!("{p}.conv.bias"), ParamGroup::Encoder, &b.conv.bias));
            out.push((format!("{p}.bn.gamma"), ParamGroup::Encoder, &b.bn.gamma));
            out.push((format!("{p}.bn.beta"), ParamGroup::Encoder, &b.bn.beta));
        }
        out.push(("encoder.fc.weight".into(), ParamGroup::Encoder, &self.encoder.fc.weight));
        out.push(("encoder.fc.bias".into(), ParamGroup::Encoder, &self.encoder.fc.bias));
        for (name, group, head) in [
            ("classifier", ParamGroup::Classifier, &self.classifier),
            ("projector", ParamGroup::Projector, &self.projector),
        ] {
            out.push((format!("{name}.fc1.weight"), group, &head.fc1.weight));
            out.push((format!("{name}.fc1.bias"), group, &head.fc1.bias));
            out.push((format!("{name}.bn.gamma"), group, &head.bn.gamma));
            out.push((format!("{name}.bn.beta"), group, &head.bn.beta));
            out.push((format!("{name}.fc2.weight"), group, &head.fc2.weight));
            out.push((format!("{name}.fc2.bias"), group, &head.fc2.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            let p = format!("encoder.stage{i}");
            out.push((format!("{p}.conv.weight"), ParamGroup::Encoder, &mut b.conv.weight));
            out.push((format!("{p}.conv.bias"), ParamGroup::Encoder, &mut b.conv.bias));
            out.push((format!("{p}.bn.gamma"), ParamGroup::Encoder, &mut b.bn.gamma));
            out.push((format!("{p}.bn.beta"), ParamGroup::Encoder, &mut b.bn.beta));
        }
        out.push(("encoder.fc.weight".into(), ParamGroup::Encoder, &mut self.encoder.fc.weight));
        out.push(("encoder.fc.bias".into(), ParamGroup::Encoder, &mut self.encoder.fc.bias));
        for (name, group, head) in [
            ("classifier", ParamGroup::Classifier, &mut self.classifier),
            ("projector", ParamGroup::Projector, &mut self.projector),
        ] {
            out.push((format!("{name}.fc1.weight"), group, &mut head.fc1.weight));
            out.push((format!("{name}.fc1.bias"), group, &mut head.fc1.bias));
            out.push((format!("{name}.bn.gamma"), group, &mut head.bn.gamma));
            out.push((format!("{name}.bn.beta"), group, &mut head.bn.beta));
            out.push((format!("{name}.fc2.weight"), group, &mut head.fc2.weight));
            out.push((format!("{name}.fc2.bias"), group, &mut head.fc2.bias));
        }
        out
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            out.push((format!("encoder.stage{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("encoder.stage{i}.bn.running_var"), &b.bn.running_var));
        }
        for (name, head) in [("classifier", &self.classifier), ("projector", &self.projector)] {
            out.push((format!("{name}.bn.running_mean"), &head.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &head.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            out.push((format!("encoder.stage{i}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("encoder.stage{i}.bn.running_var"), &mut b.bn.running_var));
        }
        for (name, head) in [
            ("classifier", &mut self.classifier),
            ("projector", &mut self.projector),
        ] {
            out.push((format!("{name}.bn.running_mean"), &mut head.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &mut head.bn.running_var));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, _, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.params()
            .into_iter()
            .map(|(n, _, t)| (n, t))
            .chain(self.buffers())
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config.clone(), 0).expect("validated config");
        for ((_, _, dst), (_, _, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        for ((_, dst), (_, src)) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.cast();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(
            EncoderConfig {
                stages: vec![
                    ConvStage { channels: 4, kernel: 3, stride: 2 },
                    ConvStage { channels: 6, kernel: 3, stride: 2 },
                ],
                representation_dim: 64,
            },
            10,
        );
        cfg.hidden_dim = 16;
        cfg
    }

    fn input(b: usize) -> Tensor<f64> {
        Tensor::new(
            vec![b, 12, 20],
            (0..b * 240).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shapes() {
        let model = Model::<f64>::new(small_config(), 1).unwrap();
        assert_eq!(model.encode(&input(2)).unwrap().shape, vec![2, 64]);
        assert_eq!(model.classify(&input(4)).unwrap().shape, vec![4, 10]);
        assert_eq!(model.project(&input(3)).unwrap().shape, vec![3, 64]);
        assert!(model.encode(&Tensor::zeros(&[2, 12])).is_err());
    }

    #[test]
    fn unique_names() {
        let model = Model::<f32>::new(ModelConfig::new(EncoderConfig::default(), 10), 0).unwrap();
        let mut names: Vec<String> = model.params().into_iter().map(|(n, _, _)| n).collect();
        names.extend(model.buffers().into_iter().map(|(n, _)| n));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let mut model = Model::<f64>::new(small_config(), 2).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (z, _) = model.forward(&input(5), Output::Embedding, mode).unwrap();
            for r in 0..5 {
                let n: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn eval_is_deterministic_and_pure() {
        let model = Model::<f64>::new(small_config(), 3).unwrap();
        let x = input(1);
        let mut dup = x.clone();
        dup.values.extend_from_slice(&x.values);
        dup.shape[0] = 2;
        let before = dup.clone();
        let h = model.encode(&dup).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert_eq!(dup, before);
    }

    #[test]
    fn zero_final_layer_gives_zero_representation() {
        let mut model = Model::<f64>::new(small_config(), 4).unwrap();
        model.encoder.fc.weight.values.iter_mut().for_each(|v| *v = 0.0);
        model.encoder.fc.bias.values.iter_mut().for_each(|v| *v = 0.0);
        assert!(model.encode(&input(2)).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_classifier_output_layer_gives_zero_logits() {
        let mut model = Model::<f64>::new(small_config(), 4).unwrap();
        model.classifier.fc2.weight.values.iter_mut().for_each(|v| *v = 0.0);
        let logits = model.classify(&input(3)).unwrap();
        assert!(logits.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_recorded_pass() {
        let mut model = Model::<f64>::new(small_config(), 5).unwrap();
        let (y, trace) = model.forward(&input(2), Output::Logits, Mode::Eval).unwrap();
        assert!(!trace.is_recorded());
        let g = Tensor::filled(&y.shape, 1.0);
        assert!(matches!(model.backward(&trace, &g).unwrap_err(), Error::State(_)));
    }

    #[test]
    fn train_mode_updates_running_stats_only_in_train() {
        let mut model = Model::<f64>::new(small_config(), 6).unwrap();
        let snapshot = model.clone();
        model.forward(&input(3), Output::Logits, Mode::Eval).unwrap();
        assert_eq!(model, snapshot);
        model.forward(&input(3), Output::Logits, Mode::Train).unwrap();
        assert_ne!(model.buffers(), snapshot.buffers());
        assert_eq!(model.params(), snapshot.params());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.encoder.representation_dim = 32;
        assert!(Model::<f32>::new(cfg, 0).is_err());
        let mut cfg = small_config();
        cfg.encoder.stages.clear();
        assert!(cfg.validate().is_err());
    }
}
