//! Source-free domain generalization over a frozen joint vision-language
//! encoder: per-epoch style-vector synthesis, a residual style-removal gate
//! trained with a domain-uncertainty entropy loss plus ArcFace, and
//! multi-template ensembling at inference.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the precision used by training and the CLI.

pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod losses;
pub mod matrix;
pub mod remover;
pub mod rng;
pub mod scalar;
pub mod style_gen;
pub mod trainer;

pub use backend::{BackendDescriptor, EncoderBackend, SyntheticImage, ToyBackend, ToyBackendSpec};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use embedding::{
    cosine_similarity, l2_normalize, softmax, JointEmbedding, PromptTemplate, StyleVector, TaskDefinition,
};
pub use error::{Error, Result};
pub use inference::{
    DatasetManifest, EnsembleBundle, EvalReport, Fusion, Predictor, ZeroShotClassifier, ZeroShotPrompt,
};
pub use losses::{ArcFaceConfig, ClassifierHead, DomainProbe};
pub use matrix::Matrix;
pub use remover::StyleRemoverParams;
pub use scalar::Scalar;
pub use style_gen::{PredefinedLexicon, Strategy, StyleBank, StyleGenConfig};
pub use trainer::{train_one_model, TrainConfig, TrainedModel};

pub type Embedding32 = JointEmbedding<f32>;
pub type Embedding64 = JointEmbedding<f64>;
pub type Style32 = StyleVector<f32>;
pub type Remover32 = StyleRemoverParams<f32>;
pub type Remover64 = StyleRemoverParams<f64>;
pub type Head32 = ClassifierHead<f32>;
pub type Head64 = ClassifierHead<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
