#![allow(dead_code)]

use dpstyler::embedding::JointEmbedding;
use dpstyler::losses::{loss_gradients, sample_losses};
use dpstyler::{ArcFaceConfig, ClassifierHead, DomainProbe, Matrix, StyleRemoverParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A random small training instance: inputs, targets, probe and parameters.
pub struct Instance {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub probe: DomainProbe<f64>,
    pub remover: StyleRemoverParams<f64>,
    pub head: ClassifierHead<f64>,
    pub arcface: ArcFaceConfig,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl Instance {
    /// Draws until every relu pre-activation is at least `1e-3` from its kink,
    /// so central differences never straddle it.
    pub fn random(seed: u64, c: usize, k: usize, m: usize, r: usize, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let h = c / r;
            let w1 = Matrix::from_vec(c, h, gaussian(&mut rng, c * h, 0.7)).unwrap();
            let w2 = Matrix::from_vec(h, c, gaussian(&mut rng, h * c, 0.7)).unwrap();
            let remover = StyleRemoverParams::from_matrices(w1, w2, r).unwrap();
            let head =
                ClassifierHead::new(Matrix::from_vec(m, c, gaussian(&mut rng, m * c, 1.0)).unwrap()).unwrap();
            let probe_feats: Vec<JointEmbedding<f64>> = (0..k)
                .map(|_| JointEmbedding::new(gaussian(&mut rng, c, 1.0)).unwrap())
                .collect();
            let probe = DomainProbe::new(&probe_feats).unwrap();
            let inputs: Vec<Vec<f64>> = (0..batch).map(|_| unit(gaussian(&mut rng, c, 1.0))).collect();
            let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..m)).collect();
            let kinked = inputs.iter().any(|v| {
                remover
                    .trace(v)
                    .unwrap()
                    .pre_activation
                    .iter()
                    .any(|p| p.abs() < 1e-3)
            });
            if !kinked {
                return Self {
                    inputs,
                    targets,
                    probe,
                    remover,
                    head,
                    arcface: ArcFaceConfig::default(),
                };
            }
        }
    }

    /// Batch-mean `L_U + L_C` through the remover.
    pub fn loss(
        &self,
        remover: &StyleRemoverParams<f64>,
        head: &ClassifierHead<f64>,
        inputs: &[Vec<f64>],
    ) -> f64 {
        let removed: Vec<Vec<f64>> = inputs.iter().map(|v| remover.forward(v).unwrap()).collect();
        let losses = sample_losses(&removed, &self.probe, head, &self.targets, &self.arcface).unwrap();
        losses.iter().map(|l| l.total()).sum::<f64>() / losses.len() as f64
    }

    /// Analytic gradients for W1, W2, head and the inputs.
    pub fn analytic(&self) -> Blocks {
        let traces: Vec<_> = self
            .inputs
            .iter()
            .map(|v| self.remover.trace(v).unwrap())
            .collect();
        let removed: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();
        let g = loss_gradients(&removed, &self.probe, &self.head, &self.targets, &self.arcface).unwrap();
        let mut w1 = vec![0.0; self.remover.w1.as_slice().len()];
        let mut w2 = vec![0.0; self.remover.w2.as_slice().len()];
        let mut inputs = Vec::new();
        for ((v, t), up) in self.inputs.iter().zip(&traces).zip(&g.features) {
            let b = self.remover.backward_from_trace(v, t, up).unwrap();
            w1.iter_mut().zip(b.w1.as_slice()).for_each(|(a, x)| *a += x);
            w2.iter_mut().zip(b.w2.as_slice()).for_each(|(a, x)| *a += x);
            inputs.extend(b.input);
        }
        Blocks {
            w1,
            w2,
            head: g.head.into_vec(),
            inputs,
        }
    }

    /// Central differences of [`Instance::loss`] for the same blocks.
    pub fn numeric(&self, step: f64) -> Blocks {
        let diff = |f: &dyn Fn(f64) -> f64| (f(step) - f(-step)) / (2.0 * step);
        let n1 = self.remover.w1.as_slice().len();
        let w1 = (0..n1)
            .map(|i| {
                diff(&|h| {
                    let mut r = self.remover.clone();
                    r.w1.as_mut_slice()[i] += h;
                    self.loss(&r, &self.head, &self.inputs)
                })
            })
            .collect();
        let n2 = self.remover.w2.as_slice().len();
        let w2 = (0..n2)
            .map(|i| {
                diff(&|h| {
                    let mut r = self.remover.clone();
                    r.w2.as_mut_slice()[i] += h;
                    self.loss(&r, &self.head, &self.inputs)
                })
            })
            .collect();
        let nh = self.head.weights.as_slice().len();
        let head = (0..nh)
            .map(|i| {
                diff(&|h| {
                    let mut w = self.head.weights.clone();
                    w.as_mut_slice()[i] += h;
                    self.loss(&self.remover, &ClassifierHead::new(w).unwrap(), &self.inputs)
                })
            })
            .collect();
        let c = self.remover.dim();
        let inputs = (0..self.inputs.len() * c)
            .map(|i| {
                diff(&|h| {
                    let mut x = self.inputs.clone();
                    x[i / c][i % c] += h;
                    self.loss(&self.remover, &self.head, &x)
                })
            })
            .collect();
        Blocks { w1, w2, head, inputs }
    }
}

pub struct Blocks {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub head: Vec<f64>,
    pub inputs: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|)` over a whole parameter block.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(a).max(scale(n));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

impl Blocks {
    /// Worst relative error over the four blocks.
    pub fn worst_error(&self, other: &Blocks) -> f64 {
        [
            relative_error(&self.w1, &other.w1),
            relative_error(&self.w2, &other.w2),
            relative_error(&self.head, &other.head),
            relative_error(&self.inputs, &other.inputs),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Worst relative error over `count` instances of the given size.
pub fn gradient_sweep(count: u64, c: usize, k: usize, m: usize, r: usize) -> f64 {
    (0..count)
        .map(|seed| {
            let inst = Instance::random(seed, c, k, m, r, 3);
            inst.analytic().worst_error(&inst.numeric(1e-6))
        })
        .fold(0.0, f64::max)
}

pub mod toy {
    use dpstyler::backend::toy::{write_toy_dataset, ToyDatasetSpec};
    use dpstyler::config::DEFAULT_TEMPLATES;
    use dpstyler::style_gen::default_lexicon_words;
    use dpstyler::{
        DatasetManifest, PredefinedLexicon, PromptTemplate, TaskDefinition, ToyBackend, ToyBackendSpec,
        TrainConfig,
    };
    use std::path::Path;

    pub const CLASSES: [&str; 5] = ["dog", "elephant", "giraffe", "guitar", "horse"];

    /// Default toy backend (C=64, D=32), five classes, K=8, paper optimizer.
    pub struct Setup {
        pub task: TaskDefinition,
        pub backend: ToyBackend,
        pub lexicon: PredefinedLexicon<f32>,
        pub templates: Vec<PromptTemplate>,
        pub config: TrainConfig,
    }

    impl Setup {
        pub fn new() -> Self {
            let task = TaskDefinition::new(CLASSES).unwrap();
            let backend = ToyBackend::for_task(ToyBackendSpec::default(), &task).unwrap();
            let lexicon = PredefinedLexicon::from_backend(&default_lexicon_words(), &backend).unwrap();
            let templates = DEFAULT_TEMPLATES
                .iter()
                .map(|p| PromptTemplate::from_pattern(*p).unwrap())
                .collect();
            let mut config = TrainConfig::default();
            config.styles.k = 8;
            Self {
                task,
                backend,
                lexicon,
                templates,
                config,
            }
        }

        /// 4 domains x 50 images.
        pub fn manifest(&self, root: &Path) -> DatasetManifest {
            let path = write_toy_dataset(root, &self.task, 32, &ToyDatasetSpec::default()).unwrap();
            DatasetManifest::from_csv(&path, &self.task).unwrap()
        }
    }
}
