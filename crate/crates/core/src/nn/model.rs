use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ModelMode, BN_EPS, BN_MOMENTUM};
use crate::autodiff::{BatchStats, ConvSpec, Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn spec(name: String, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn dense_specs(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, width: usize, bias: bool) {
    out.push(spec(
        format!("{prefix}.weight"),
        vec![fan_in, width],
        Init::HeUniform { fan_in },
    ));
    if bias {
        out.push(spec(format!("{prefix}.bias"), vec![width], Init::Zeros));
    }
}

fn bn_specs(out: &mut Vec<ParamSpec>, prefix: &str, channels: usize) {
    out.push(spec(format!("{prefix}.gamma"), vec![channels], Init::Ones));
    out.push(spec(format!("{prefix}.beta"), vec![channels], Init::Zeros));
}

/// Names of batch-norm layers, in forward order.
pub fn batch_norm_layers(cfg: &ModelConfig, mode: ModelMode) -> Vec<(String, usize)> {
    let mut layers: Vec<(String, usize)> = cfg
        .encoder_filters
        .iter()
        .enumerate()
        .map(|(i, &c)| (format!("encoder.bn{i}"), c))
        .collect();
    if mode.has_decoder() {
        for (i, &c) in cfg.decoder_filters.iter().enumerate() {
            layers.push((format!("decoder.block{i}.bn"), c));
        }
    }
    if mode.has_classifier() {
        for (i, &c) in cfg.classifier_hidden.iter().enumerate() {
            layers.push((format!("classifier.bn{i}"), c));
        }
    }
    layers
}

/// Every trainable tensor of a model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig, mode: ModelMode) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();

    let mut c_in = cfg.input_channels;
    for (i, &f) in cfg.encoder_filters.iter().enumerate() {
        let fan_in = c_in * 9;
        out.push(spec(
            format!("encoder.conv{i}.weight"),
            vec![f, c_in, 3, 3],
            Init::HeUniform { fan_in },
        ));
        bn_specs(&mut out, &format!("encoder.bn{i}"), f);
        c_in = f;
    }
    let side = cfg.encoder_spatial()?;
    dense_specs(&mut out, "encoder.fc", c_in * side * side, cfg.embedding_dim, true);

    if mode.has_decoder() {
        let grid = cfg.decoder_grid()?;
        let c0 = cfg.decoder_filters[0];
        dense_specs(&mut out, "decoder.fc", cfg.embedding_dim, c0 * grid * grid, true);
        let mut c_in = c0;
        for (i, &f) in cfg.decoder_filters.iter().enumerate() {
            out.push(spec(
                format!("decoder.block{i}.convt.weight"),
                vec![c_in, f, 2, 2],
                Init::HeUniform { fan_in: c_in },
            ));
            bn_specs(&mut out, &format!("decoder.block{i}.bn"), f);
            if c_in != f {
                out.push(spec(
                    format!("decoder.block{i}.skip.weight"),
                    vec![f, c_in, 1, 1],
                    Init::HeUniform { fan_in: c_in },
                ));
            }
            c_in = f;
        }
        out.push(spec(
            "decoder.out.weight".into(),
            vec![1, c_in, 3, 3],
            Init::HeUniform { fan_in: c_in * 9 },
        ));
        out.push(spec("decoder.out.bias".into(), vec![1], Init::Zeros));
    }

    if mode.has_classifier() {
        let mut width = cfg.embedding_dim;
        for (i, &h) in cfg.classifier_hidden.iter().enumerate() {
            dense_specs(&mut out, &format!("classifier.fc{i}"), width, h, false);
            bn_specs(&mut out, &format!("classifier.bn{i}"), h);
            width = h;
        }
        dense_specs(&mut out, "classifier.out", width, cfg.num_classes, true);
    }
    Ok(out)
}

/// Number of trainable scalars.
pub fn param_count(cfg: &ModelConfig, mode: ModelMode) -> Result<usize> {
    Ok(param_specs(cfg, mode)?
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}

/// Running batch-norm statistics used at inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Parameters and batch-norm state of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub mode: ModelMode,
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub running: BTreeMap<String, RunningStats<T>>,
}

/// Stable 64-bit FNV-1a, used to give each parameter its own RNG stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Whether batch norm uses batch statistics or the running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("model has no parameter {name}")))
    }

    /// Substitutes another node for parameter `name`.
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("model has no parameter {name}")))?;
        *slot = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients keyed by parameter name.
    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get(v)))
            .collect()
    }
}

/// Outputs of one forward pass.
pub struct Forward<T> {
    /// `(N, embedding_dim)`
    pub embedding: Var,
    /// `(N, num_classes)`
    pub class_logits: Option<Var>,
    pub class_probs: Option<Var>,
    /// `(N, S, S)`
    pub mask_logits: Option<Var>,
    pub mask_probs: Option<Var>,
    /// Batch statistics per batch-norm layer, in training mode.
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

struct Pass<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    bound: &'a Bound,
    params: &'a ModelParams<T>,
    bn: BnMode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Pass<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.bound.var(name)
    }

    fn dense(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(x, w)?;
        if bias {
            let b = self.p(&format!("{prefix}.bias"))?;
            self.tape.bias_add(y, b)
        } else {
            Ok(y)
        }
    }

    fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let eps = T::from_f64_lossy(BN_EPS);
        match self.bn {
            BnMode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, eps)?;
                self.stats.push((name.to_string(), stats));
                Ok(y)
            }
            BnMode::Eval => {
                let r = self.params.running.get(name).ok_or_else(|| {
                    Error::Usage(format!("missing running statistics for {name}"))
                })?;
                self.tape.batch_norm_eval(x, gamma, beta, &r.mean, &r.var, eps)
            }
        }
    }

    fn encoder(&mut self, images: Var) -> Result<Var> {
        let cfg = &self.params.config;
        let mut h = images;
        for i in 0..cfg.encoder_filters.len() {
            let w = self.p(&format!("encoder.conv{i}.weight"))?;
            h = self.tape.conv2d(h, w, cfg.encoder_conv(i))?;
            h = self.batch_norm(h, &format!("encoder.bn{i}"))?;
            h = self.tape.relu(h);
        }
        let n = self.tape.value(h).shape()[0];
        let flat: usize = self.tape.value(h).shape()[1..].iter().product();
        h = self.tape.reshape(h, &[n, flat])?;
        self.dense(h, "encoder.fc", true)
    }

    fn decoder(&mut self, embedding: Var) -> Result<Var> {
        let cfg = self.params.config.clone();
        let grid = cfg.decoder_grid()?;
        let n = self.tape.value(embedding).shape()[0];
        let mut h = self.dense(embedding, "decoder.fc", true)?;
        h = self.tape.relu(h);
        h = self.tape.reshape(h, &[n, cfg.decoder_filters[0], grid, grid])?;
        let mut c_in = cfg.decoder_filters[0];
        for (i, &f) in cfg.decoder_filters.iter().enumerate() {
            let w = self.p(&format!("decoder.block{i}.convt.weight"))?;
            let y = self.tape.conv2d_transpose(h, w, 2, 0)?;
            let y = self.batch_norm(y, &format!("decoder.block{i}.bn"))?;
            // A 1×1 projection commutes with nearest upsampling, so it runs
            // on the smaller map.
            let skip = if c_in != f {
                let pw = self.p(&format!("decoder.block{i}.skip.weight"))?;
                self.tape.conv2d(h, pw, ConvSpec::default())?
            } else {
                h
            };
            let skip = self.tape.upsample_nearest(skip, 2)?;
            let sum = self.tape.add(y, skip)?;
            h = self.tape.relu(sum);
            c_in = f;
        }
        let w = self.p("decoder.out.weight")?;
        let b = self.p("decoder.out.bias")?;
        h = self.tape.conv2d(h, w, ConvSpec::new(1, 1, 1))?;
        h = self.tape.bias_add(h, b)?;
        self.tape.reshape(h, &[n, cfg.input_size, cfg.input_size])
    }

    fn classifier(&mut self, embedding: Var) -> Result<Var> {
        let mut h = embedding;
        for i in 0..self.params.config.classifier_hidden.len() {
            h = self.dense(h, &format!("classifier.fc{i}"), false)?;
            h = self.batch_norm(h, &format!("classifier.bn{i}"))?;
            h = self.tape.relu(h);
        }
        self.dense(h, "classifier.out", true)
    }
}

impl<T: Scalar> ModelParams<T> {
    /// He-uniform weights, zero biases, unit batch-norm scales.
    ///
    /// Each tensor draws from its own stream of `config.seed`, so shared
    /// parts start identical across modes.
    pub fn init(config: &ModelConfig, mode: ModelMode) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for s in param_specs(config, mode)? {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::HeUniform { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(fnv1a(&s.name));
                    let limit = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::from_f64_lossy(rng.gen_range(-limit..=limit)))
                }
            };
            tensors.insert(s.name, t);
        }
        let running = batch_norm_layers(config, mode)
            .into_iter()
            .map(|(name, c)| {
                (
                    name,
                    RunningStats {
                        mean: vec![T::zero(); c],
                        var: vec![T::one(); c],
                    },
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            mode,
            tensors,
            running,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    fn check_images(&self, tape: &Tape<T>, images: Var) -> Result<()> {
        let s = tape.value(images).shape();
        let c = &self.config;
        let expected = [s.first().copied().unwrap_or(0), c.input_channels, c.input_size, c.input_size];
        if s.len() != 4 {
            return Err(Error::shape("forward", format!("images must be NCHW, got {s:?}")));
        }
        for axis in 1..4 {
            if s[axis] != expected[axis] {
                return Err(Error::Dimension {
                    op: "forward",
                    axis,
                    expected: expected[axis],
                    got: s[axis],
                });
            }
        }
        Ok(())
    }

    /// Encoder only.
    pub fn embed(&self, tape: &mut Tape<T>, bound: &Bound, images: Var, bn: BnMode) -> Result<Var> {
        self.check_images(tape, images)?;
        let mut pass = Pass {
            tape,
            bound,
            params: self,
            bn,
            stats: Vec::new(),
        };
        pass.encoder(images)
    }

    /// Mask decoder applied to an embedding; returns `(N, S, S)` logits.
    pub fn decode(&self, tape: &mut Tape<T>, bound: &Bound, embedding: Var, bn: BnMode) -> Result<Var> {
        if !self.mode.has_decoder() {
            return Err(Error::Usage(format!("{} has no mask decoder", self.mode)));
        }
        let mut pass = Pass {
            tape,
            bound,
            params: self,
            bn,
            stats: Vec::new(),
        };
        pass.decoder(embedding)
    }

    /// Classifier applied to an embedding; returns `(N, num_classes)` logits.
    pub fn classify(&self, tape: &mut Tape<T>, bound: &Bound, embedding: Var, bn: BnMode) -> Result<Var> {
        if !self.mode.has_classifier() {
            return Err(Error::Usage(format!("{} has no classifier", self.mode)));
        }
        let mut pass = Pass {
            tape,
            bound,
            params: self,
            bn,
            stats: Vec::new(),
        };
        pass.classifier(embedding)
    }

    /// One shared encoder pass feeding the heads of `mode`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mode: ModelMode,
        images: Var,
        bn: BnMode,
    ) -> Result<Forward<T>> {
        if mode != self.mode {
            return Err(Error::Usage(format!(
                "parameters were built for {} but {mode} was requested",
                self.mode
            )));
        }
        self.check_images(tape, images)?;
        let mut pass = Pass {
            tape,
            bound,
            params: self,
            bn,
            stats: Vec::new(),
        };
        let embedding = pass.encoder(images)?;
        let (mask_logits, mask_probs) = if mode.has_decoder() {
            let logits = pass.decoder(embedding)?;
            (Some(logits), Some(pass.tape.sigmoid(logits)))
        } else {
            (None, None)
        };
        let (class_logits, class_probs) = if mode.has_classifier() {
            let logits = pass.classifier(embedding)?;
            (Some(logits), Some(pass.tape.softmax(logits)?))
        } else {
            (None, None)
        };
        Ok(Forward {
            embedding,
            class_logits,
            class_probs,
            mask_logits,
            mask_probs,
            batch_stats: pass.stats,
        })
    }

    /// Exponential moving average of batch statistics (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (name, s) in stats {
            let Some(r) = self.running.get_mut(name) else { continue };
            let correction = if s.count > 1 {
                T::from_usize(s.count).unwrap() / T::from_usize(s.count - 1).unwrap()
            } else {
                T::one()
            };
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = m * *rm + one_m * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = m * *rv + one_m * bv * correction;
            }
        }
    }

    /// Checks that tensors and statistics have exactly the expected names and shapes.
    pub fn check_layout(&self) -> Result<()> {
        let specs = param_specs(&self.config, self.mode)?;
        let mismatch = |msg: String| Err(Error::Config(format!("parameter layout mismatch: {msg}")));
        if specs.len() != self.tensors.len() {
            return mismatch(format!(
                "{} tensors for {} expected by {}",
                self.tensors.len(),
                specs.len(),
                self.mode
            ));
        }
        for s in &specs {
            match self.tensors.get(&s.name) {
                None => return mismatch(format!("missing {}", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    return mismatch(format!("{} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape))
                }
                Some(t) if !t.all_finite() => return mismatch(format!("{} is not finite", s.name)),
                _ => {}
            }
        }
        let layers = batch_norm_layers(&self.config, self.mode);
        if layers.len() != self.running.len() {
            return mismatch("batch-norm statistics do not match the layers".into());
        }
        for (name, c) in layers {
            match self.running.get(&name) {
                Some(r) if r.mean.len() == c && r.var.len() == c => {}
                _ => return mismatch(format!("statistics for {name} missing or mis-sized")),
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        ModelParams {
            config: self.config.clone(),
            mode: self.mode,
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: conv(&r.mean),
                            var: conv(&r.var),
                        },
                    )
                })
                .collect(),
        }
    }
}
