//! Frozen joint vision-language encoders.
//!
//! [`EncoderBackend`] is the contract every encoder satisfies: prompt
//! encoding with a style vector injected at the placeholder token, image
//! encoding, and token-embedding lookup. [`ToyBackend`] is a seeded linear
//! stand-in used for hermetic verification; a pretrained backend plugs in
//! through the same trait.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{JointEmbedding, PromptTemplate, StyleVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub mod preprocess;
pub mod toy;

pub use toy::{SyntheticImage, ToyBackend, ToyBackendSpec};

/// Identity of a backend as recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    /// Joint embedding dimension.
    pub c: usize,
    /// Token embedding dimension.
    pub d: usize,
    pub variant: String,
}

pub trait EncoderBackend<T: Scalar>: Send + Sync {
    /// Decoded, preprocessed image accepted by [`EncoderBackend::image_encode`].
    type Image;

    fn descriptor(&self) -> BackendDescriptor;

    fn joint_dim(&self) -> usize {
        self.descriptor().c
    }

    fn token_dim(&self) -> usize {
        self.descriptor().d
    }

    /// Encodes `template` with `class_name` filled in and, when the template
    /// has a style slot, `style` injected at that token's embedding.
    fn text_encode(
        &self,
        template: &PromptTemplate,
        class_name: Option<&str>,
        style: Option<&StyleVector<T>>,
    ) -> Result<JointEmbedding<T>>;

    /// Encodes the `"S*-like style"` prompt for the domain probe.
    fn style_text_encode(&self, style: &StyleVector<T>) -> Result<JointEmbedding<T>> {
        self.text_encode(&PromptTemplate::style_probe(), None, Some(style))
    }

    /// Embedding-table row of a single-token word.
    fn token_embedding_lookup(&self, word: &str) -> Result<StyleVector<T>>;

    fn load_image(&self, path: &Path) -> Result<Self::Image>;

    fn image_encode(&self, image: &Self::Image) -> Result<JointEmbedding<T>>;
}

/// Pretrained CLIP variants a real backend adapter may serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExternalVariant {
    #[serde(rename = "rn50")]
    Rn50,
    #[serde(rename = "vit-b16")]
    VitB16,
    #[serde(rename = "vit-l14")]
    VitL14,
}

impl ExternalVariant {
    pub fn joint_dim(self) -> usize {
        match self {
            Self::Rn50 => 1024,
            Self::VitB16 => 512,
            Self::VitL14 => 768,
        }
    }

    pub fn token_dim(self) -> usize {
        512
    }

    pub fn descriptor(self) -> BackendDescriptor {
        BackendDescriptor {
            c: self.joint_dim(),
            d: self.token_dim(),
            variant: format!("clip-{self}"),
        }
    }
}

impl fmt::Display for ExternalVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rn50 => "rn50",
            Self::VitB16 => "vit-b16",
            Self::VitL14 => "vit-l14",
        })
    }
}

impl FromStr for ExternalVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rn50" => Ok(Self::Rn50),
            "vit-b16" => Ok(Self::VitB16),
            "vit-l14" => Ok(Self::VitL14),
            other => Err(Error::Config(format!(
                "unknown external backend variant {other:?}"
            ))),
        }
    }
}
