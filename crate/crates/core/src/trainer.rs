//! One-stage training of the style remover and classifier for a single
//! prompt template.
//!
//! Each epoch refreshes the style bank, re-encodes the style probe and the
//! full `M x K` prompt set through the frozen text encoder, then runs
//! mini-batch momentum SGD on `L_U + L_C`. Only the remover matrices and the
//! classifier weights are ever updated.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backend::EncoderBackend;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::embedding::{l2_normalize, JointEmbedding, PromptTemplate, TaskDefinition};
use crate::error::{contract, Error, Result};
use crate::losses::{loss_gradients, ArcFaceConfig, ClassifierHead, DomainProbe};
use crate::matrix::Matrix;
use crate::remover::{StyleRemoverParams, DEFAULT_RATIO};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::style_gen::{refresh_bank, PredefinedLexicon, StyleBank, StyleGenConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Remover compression ratio r.
    pub ratio: usize,
    pub seed: u64,
    /// Encode each epoch's prompt set once up front instead of per batch.
    pub cache_features: bool,
    pub arcface: ArcFaceConfig,
    pub styles: StyleGenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.008,
            momentum: 0.9,
            batch_size: 128,
            ratio: DEFAULT_RATIO,
            seed: 0,
            cache_features: true,
            arcface: ArcFaceConfig::default(),
            styles: StyleGenConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.ratio < 1 {
            return Err(Error::Config("compression ratio must be at least 1".into()));
        }
        self.arcface.validate()?;
        self.styles.validate()
    }

    /// Style-generation settings with the run's master seed.
    pub fn style_config(&self) -> StyleGenConfig {
        StyleGenConfig {
            seed: self.seed,
            ..self.styles.clone()
        }
    }
}

/// All `(class, style)` pairs in an epoch-seeded random order.
pub fn build_prompt_set(num_classes: usize, num_styles: usize, seed: u64, epoch: u64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..num_classes)
        .flat_map(|m| (0..num_styles).map(move |i| (m, i)))
        .collect();
    pairs.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
    pairs
}

/// Classical momentum: `v <- mu v - lr g; theta <- theta + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    gradients: &[T],
    velocity: &mut [T],
    learning_rate: T,
    momentum: T,
) -> Result<()> {
    if params.len() != gradients.len() || params.len() != velocity.len() {
        return contract(format!(
            "sgd shapes differ: {} params, {} gradients, {} velocities",
            params.len(),
            gradients.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(gradients).zip(velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p = *p + *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_uncertainty: f64,
    pub mean_classification: f64,
    pub mean_total: f64,
    /// Fraction of prompt features classified correctly before each update.
    pub train_accuracy: f64,
    pub wall_time_ms: f64,
}

impl EpochMetrics {
    /// One record of the line-delimited metrics log.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub checkpoint: Checkpoint<T>,
    pub history: Vec<EpochMetrics>,
    /// Accuracy of the final parameters on the last epoch's prompt features.
    pub final_train_accuracy: f64,
}

struct Velocity<T> {
    w1: Vec<T>,
    w2: Vec<T>,
    head: Vec<T>,
}

/// Normalised text feature of every `(class, style)` pair, row-major by class.
fn encode_prompt_set<T: Scalar, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    task: &TaskDefinition,
    template: &PromptTemplate,
    bank: &StyleBank<T>,
) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(task.num_classes() * bank.len());
    for class in task.class_names() {
        for style in bank.styles() {
            out.push(encode_pair(backend, template, class, style)?);
        }
    }
    Ok(out)
}

fn encode_pair<T: Scalar, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    template: &PromptTemplate,
    class: &str,
    style: &crate::embedding::StyleVector<T>,
) -> Result<Vec<T>> {
    let e = backend.text_encode(template, Some(class), Some(style))?;
    l2_normalize(e.as_slice())
}

/// Text features of the `"S*-like style"` prompt for every style in the bank.
pub fn build_probe<T: Scalar, B: EncoderBackend<T> + ?Sized>(
    backend: &B,
    bank: &StyleBank<T>,
) -> Result<DomainProbe<T>> {
    let feats = bank
        .styles()
        .iter()
        .map(|s| backend.style_text_encode(s))
        .collect::<Result<Vec<JointEmbedding<T>>>>()?;
    DomainProbe::new(&feats)
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trains one remover + classifier pair for `template`.
pub fn train_one_model<T, B>(
    task: &TaskDefinition,
    backend: &B,
    template: &PromptTemplate,
    lexicon: Option<&PredefinedLexicon<T>>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainedModel<T>>
where
    T: Scalar,
    B: EncoderBackend<T> + ?Sized,
{
    config.validate()?;
    if !template.has_class() || !template.has_style() {
        return contract(format!(
            "training template {:?} needs both a class and a style slot",
            template.id()
        ));
    }
    let descriptor = backend.descriptor();
    let (dim, num_classes) = (descriptor.c, task.num_classes());
    let style_config = config.style_config();

    let mut init_rng = stream_rng(config.seed, Stream::HeadInit, 0);
    let mut remover = StyleRemoverParams::<T>::init(dim, config.ratio, &mut init_rng)?;
    let mut head = ClassifierHead::<T>::init(num_classes, dim, &mut init_rng)?;
    let mut velocity = Velocity {
        w1: vec![T::zero(); remover.w1.as_slice().len()],
        w2: vec![T::zero(); remover.w2.as_slice().len()],
        head: vec![T::zero(); head.weights.as_slice().len()],
    };
    let lr = T::lit(config.learning_rate);
    let mu = T::lit(config.momentum);

    let mut bank = StyleBank::initialize(&style_config, lexicon, descriptor.d)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_features = Vec::new();
    let k = style_config.k;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        if epoch > 0 {
            bank = refresh_bank(&bank, &style_config, lexicon, epoch as u64)?;
        }
        let probe = build_probe(backend, &bank)?;
        let cached = if config.cache_features {
            Some(encode_prompt_set(backend, task, template, &bank)?)
        } else {
            None
        };
        let pairs = build_prompt_set(num_classes, k, config.seed, epoch as u64);

        let (mut sum_u, mut sum_c, mut correct) = (0.0, 0.0, 0usize);
        for (batch_index, batch) in pairs.chunks(config.batch_size).enumerate() {
            let inputs = batch
                .iter()
                .map(|&(m, i)| match &cached {
                    Some(all) => Ok(all[m * k + i].clone()),
                    None => encode_pair(backend, template, &task.class_names()[m], &bank.styles()[i]),
                })
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<usize> = batch.iter().map(|&(m, _)| m).collect();
            let traces = inputs
                .iter()
                .map(|v| remover.trace(v))
                .collect::<Result<Vec<_>>>()?;
            let removed: Vec<Vec<T>> = traces.iter().map(|t| t.output.clone()).collect();

            for (f, &t) in removed.iter().zip(&targets) {
                if argmax(&head.cosines(f)?) == t {
                    correct += 1;
                }
            }

            let grads = loss_gradients(&removed, &probe, &head, &targets, &config.arcface)?;
            let (u, c) = (
                grads.mean_uncertainty.as_f64(),
                grads.mean_classification.as_f64(),
            );
            if !u.is_finite() || !c.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                    uncertainty: u,
                    classification: c,
                });
            }
            sum_u += u * batch.len() as f64;
            sum_c += c * batch.len() as f64;

            let mut d_w1 = Matrix::zeros(remover.w1.rows(), remover.w1.cols());
            let mut d_w2 = Matrix::zeros(remover.w2.rows(), remover.w2.cols());
            for ((v, trace), upstream) in inputs.iter().zip(&traces).zip(&grads.features) {
                let g = remover.backward_from_trace(v, trace, upstream)?;
                for (a, b) in d_w1.as_mut_slice().iter_mut().zip(g.w1.as_slice()) {
                    *a = *a + *b;
                }
                for (a, b) in d_w2.as_mut_slice().iter_mut().zip(g.w2.as_slice()) {
                    *a = *a + *b;
                }
            }
            sgd_step(
                remover.w1.as_mut_slice(),
                d_w1.as_slice(),
                &mut velocity.w1,
                lr,
                mu,
            )?;
            sgd_step(
                remover.w2.as_mut_slice(),
                d_w2.as_slice(),
                &mut velocity.w2,
                lr,
                mu,
            )?;
            sgd_step(
                head.weights.as_mut_slice(),
                grads.head.as_slice(),
                &mut velocity.head,
                lr,
                mu,
            )?;
            if !remover.w1.is_finite() || !remover.w2.is_finite() || !head.weights.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                    uncertainty: u,
                    classification: c,
                });
            }
            head = ClassifierHead::new(head.weights)?;
        }

        let n = pairs.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            mean_uncertainty: sum_u / n,
            mean_classification: sum_c / n,
            mean_total: (sum_u + sum_c) / n,
            train_accuracy: correct as f64 / n,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&metrics);
        history.push(metrics);
        if epoch + 1 == config.epochs {
            last_features = match cached {
                Some(all) => all,
                None => encode_prompt_set(backend, task, template, &bank)?,
            };
        }
    }

    let mut correct = 0usize;
    for (idx, v) in last_features.iter().enumerate() {
        let scores = head.cosines(&remover.forward(v)?)?;
        if argmax(&scores) == idx / k {
            correct += 1;
        }
    }
    let final_train_accuracy = correct as f64 / last_features.len() as f64;

    Ok(TrainedModel {
        checkpoint: Checkpoint {
            remover,
            head,
            template: template.clone(),
            class_names: task.class_names().to_vec(),
            backend: descriptor,
            config: config.clone(),
            format_version: FORMAT_VERSION,
        },
        history,
        final_train_accuracy,
    })
}
