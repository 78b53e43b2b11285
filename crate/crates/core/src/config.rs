//! Run configuration: one TOML document naming the backend, classes, data
//! and any overrides of the built-in training defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{ExternalVariant, ToyBackend, ToyBackendSpec};
use crate::embedding::{PromptTemplate, TaskDefinition};
use crate::error::{Error, Result};
use crate::inference::{DatasetManifest, Fusion};
use crate::losses::ArcFaceConfig;
use crate::scalar::Scalar;
use crate::style_gen::{
    default_lexicon_words, load_lexicon_words, PredefinedLexicon, Strategy, StyleGenConfig,
};
use crate::trainer::TrainConfig;

/// Environment variable that may supply the external backend's weight file.
pub const WEIGHTS_ENV: &str = "DPSTYLER_BACKEND_WEIGHTS";

pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "a [class] in a S* style",
    "a S* style of a [class]",
    "a photo of a [class] with S* like style",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendVariant {
    #[default]
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub variant: BackendVariant,
    /// Pretrained model served by an external backend.
    pub model: Option<ExternalVariant>,
    pub weights: Option<PathBuf>,
    pub c: usize,
    pub d: usize,
    pub m_max: usize,
    pub seed: u64,
    pub image_noise: f64,
    pub content_shift: f64,
    pub style_gain: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let toy = ToyBackendSpec::default();
        Self {
            variant: BackendVariant::Toy,
            model: None,
            weights: None,
            c: toy.c,
            d: toy.d,
            m_max: toy.m_max,
            seed: toy.seed,
            image_noise: toy.image_noise,
            content_shift: toy.content_shift,
            style_gain: toy.style_gain,
        }
    }
}

impl BackendSection {
    pub fn toy_spec(&self) -> ToyBackendSpec {
        ToyBackendSpec {
            c: self.c,
            d: self.d,
            m_max: self.m_max,
            seed: self.seed,
            image_noise: self.image_noise,
            content_shift: self.content_shift,
            style_gain: self.style_gain,
        }
    }
}

/// `TrainConfig` minus the style settings, which live in `[styles]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub ratio: usize,
    pub seed: u64,
    pub cache_features: bool,
    pub arcface: ArcFaceConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            ratio: t.ratio,
            seed: t.seed,
            cache_features: t.cache_features,
            arcface: t.arcface,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StylesSection {
    pub k: usize,
    pub strategy: Strategy,
    pub alpha: f64,
    pub lexicon_size: usize,
    pub gaussian_std: f64,
    /// Word list for StyleMix; the bundled eight adjectives when absent.
    pub lexicon: Option<PathBuf>,
}

impl Default for StylesSection {
    fn default() -> Self {
        let s = StyleGenConfig::default();
        Self {
            k: s.k,
            strategy: s.strategy,
            alpha: s.alpha,
            lexicon_size: s.lexicon_size,
            gaussian_std: s.gaussian_std,
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `path,domain,class` CSV; wins over `root` when both are set.
    pub manifest: Option<PathBuf>,
    /// Directory laid out as `root/<domain>/<class>/<image>`.
    pub root: Option<PathBuf>,
    pub fusion: Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub classes: Vec<String>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub styles: StylesSection,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| {
            Error::Config(format!(
                "{}: {}",
                path.display(),
                e.to_string().trim_start_matches("config error: ")
            ))
        })
    }

    /// Checks values and referenced training inputs. Evaluation data is
    /// checked by [`RunConfig::manifest`].
    pub fn validate(&self) -> Result<()> {
        self.task()?;
        self.templates()?;
        self.train_config().validate()?;
        if let Some(lexicon) = &self.styles.lexicon {
            let path = self.resolve(lexicon);
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "lexicon file {} does not exist",
                    path.display()
                )));
            }
        }
        if self.styles.lexicon.is_none() && self.style_config().needs_lexicon() {
            let n = default_lexicon_words().len();
            if self.styles.lexicon_size != n {
                return Err(Error::Config(format!(
                    "lexicon_size {} needs a lexicon file; the bundled lexicon has {n} words",
                    self.styles.lexicon_size
                )));
            }
        }
        match self.backend.variant {
            BackendVariant::Toy => self.backend.toy_spec().validate(),
            BackendVariant::External => {
                if self.backend.model.is_none() {
                    return Err(Error::Config("external backend needs backend.model".into()));
                }
                Ok(())
            }
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn task(&self) -> Result<TaskDefinition> {
        TaskDefinition::new(self.classes.iter().cloned()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn templates(&self) -> Result<Vec<PromptTemplate>> {
        if self.templates.is_empty() {
            return Err(Error::Config("at least one template is required".into()));
        }
        let mut out: Vec<PromptTemplate> = Vec::new();
        for pattern in &self.templates {
            let t = PromptTemplate::from_pattern(pattern.clone())
                .map_err(|e| Error::Config(format!("template {pattern:?}: {e}")))?;
            if out.iter().any(|o| o.id() == t.id()) {
                return Err(Error::Config(format!("template {pattern:?} is listed twice")));
            }
            out.push(t);
        }
        Ok(out)
    }

    pub fn style_config(&self) -> StyleGenConfig {
        StyleGenConfig {
            k: self.styles.k,
            strategy: self.styles.strategy,
            alpha: self.styles.alpha,
            lexicon_size: self.styles.lexicon_size,
            gaussian_std: self.styles.gaussian_std,
            seed: self.train.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            ratio: t.ratio,
            seed: t.seed,
            cache_features: t.cache_features,
            arcface: t.arcface,
            styles: self.style_config(),
        }
    }

    pub fn lexicon_words(&self) -> Result<Vec<String>> {
        match &self.styles.lexicon {
            Some(p) => load_lexicon_words(&self.resolve(p), self.styles.lexicon_size),
            None => Ok(default_lexicon_words()),
        }
    }

    /// Lexicon embeddings, when the strategy uses StyleMix at all.
    pub fn lexicon<T: Scalar>(&self, backend: &ToyBackend) -> Result<Option<PredefinedLexicon<T>>> {
        if !self.style_config().needs_lexicon() {
            return Ok(None);
        }
        PredefinedLexicon::from_backend(&self.lexicon_words()?, backend).map(Some)
    }

    /// The toy backend; the external one is an interface without a bundled runtime.
    pub fn toy_backend(&self) -> Result<ToyBackend> {
        match self.backend.variant {
            BackendVariant::Toy => ToyBackend::for_task(self.backend.toy_spec(), &self.task()?),
            BackendVariant::External => {
                let weights = self
                    .backend
                    .weights
                    .as_ref()
                    .map(|p| self.resolve(p))
                    .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::Config(format!("external backend needs backend.weights or {WEIGHTS_ENV}"))
                    })?;
                if !weights.is_file() {
                    return Err(Error::Config(format!(
                        "backend weights {} do not exist",
                        weights.display()
                    )));
                }
                let model = self.backend.model.expect("validated");
                Err(Error::Config(format!(
                    "external backend {model} (C={}, D={}) is an adapter contract; this build ships no runtime for {}",
                    model.joint_dim(),
                    model.token_dim(),
                    weights.display()
                )))
            }
        }
    }

    /// The evaluation manifest, from the CSV if given, else the directory tree.
    pub fn manifest(&self) -> Result<DatasetManifest> {
        let task = self.task()?;
        let existing = |key: &str, p: &Path| {
            let path = self.resolve(p);
            if path.exists() {
                Ok(path)
            } else {
                Err(Error::Config(format!("{key} {} does not exist", path.display())))
            }
        };
        if let Some(m) = &self.eval.manifest {
            DatasetManifest::from_csv(&existing("eval.manifest", m)?, &task)
        } else if let Some(r) = &self.eval.root {
            DatasetManifest::from_directory(&existing("eval.root", r)?, &task)
        } else {
            Err(Error::Config("eval.manifest or eval.root is required".into()))
        }
    }

    /// The configuration after default-merging, as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable short hash of everything that shapes a trained model: classes,
    /// backend, training, styles and templates. Output and evaluation
    /// settings are left out so evaluation finds the checkpoints it trained.
    pub fn fingerprint(&self) -> String {
        let trained = Self {
            eval: EvalSection::default(),
            output_dir: PathBuf::new(),
            base_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(trained.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
