//! Inference with trained heads transplanted onto the image encoder,
//! template ensembles, zero-shot baselines, and dataset evaluation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::EncoderBackend;
use crate::checkpoint::Checkpoint;
use crate::embedding::{dot, l2_normalize, PromptTemplate, TaskDefinition};
use crate::error::{contract, io_err, Error, Result};
use crate::scalar::Scalar;

/// Raw cosine class scores of one model for a (normalised) image embedding.
/// No margin is applied at inference.
pub fn predict_scores<T: Scalar>(embedding: &[T], member: &Checkpoint<T>) -> Result<Vec<T>> {
    if embedding.len() != member.dim() {
        return contract(format!(
            "embedding has {} dims, model expects {}",
            embedding.len(),
            member.dim()
        ));
    }
    let removed = member.remover.forward(&l2_normalize(embedding)?)?;
    member.head.cosines(&removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Class of the single largest score across all members.
    #[default]
    Max,
    /// Argmax of the per-class mean score.
    Average,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Max => "max",
            Fusion::Average => "average",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Fusion::Max),
            "average" => Ok(Fusion::Average),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Fuses an `N x M` score table into one class. Ties go to the lowest class
/// index, then the lowest member index.
pub fn fuse_scores<T: Scalar>(scores: &[Vec<T>], fusion: Fusion) -> Result<usize> {
    let m = match scores.first() {
        Some(row) if !row.is_empty() => row.len(),
        _ => return contract("cannot fuse an empty score table"),
    };
    if scores.iter().any(|row| row.len() != m) {
        return contract("score rows have different lengths");
    }
    match fusion {
        Fusion::Max => {
            let mut best = (0, scores[0][0]);
            for class in 0..m {
                for row in scores {
                    if row[class] > best.1 {
                        best = (class, row[class]);
                    }
                }
            }
            Ok(best.0)
        }
        Fusion::Average => {
            let n = T::lit(scores.len() as f64);
            let means: Vec<T> = (0..m)
                .map(|c| scores.iter().map(|row| row[c]).sum::<T>() / n)
                .collect();
            Ok(first_argmax(&means))
        }
    }
}

fn first_argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Anything that maps a normalised image embedding to a class.
pub trait Predictor<T: Scalar> {
    fn predict(&self, embedding: &[T]) -> Result<usize>;

    fn label(&self) -> String;
}

/// N trained models fused at inference.
#[derive(Debug, Clone)]
pub struct EnsembleBundle<T> {
    members: Vec<Checkpoint<T>>,
    fusion: Fusion,
}

impl<T: Scalar> EnsembleBundle<T> {
    pub fn new(members: Vec<Checkpoint<T>>, fusion: Fusion) -> Result<Self> {
        let Some(first) = members.first() else {
            return contract("an ensemble needs at least one model");
        };
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.backend != first.backend {
                return contract(format!(
                    "model {i} was trained on backend {:?}, model 0 on {:?}",
                    m.backend, first.backend
                ));
            }
            if m.class_names != first.class_names {
                return contract(format!("model {i} has a different class list than model 0"));
            }
        }
        Ok(Self { members, fusion })
    }

    pub fn members(&self) -> &[Checkpoint<T>] {
        &self.members
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn class_names(&self) -> &[String] {
        &self.members[0].class_names
    }

    pub fn scores(&self, embedding: &[T]) -> Result<Vec<Vec<T>>> {
        self.members
            .iter()
            .map(|m| predict_scores(embedding, m))
            .collect()
    }
}

pub fn ensemble_predict<T: Scalar>(embedding: &[T], bundle: &EnsembleBundle<T>) -> Result<usize> {
    fuse_scores(&bundle.scores(embedding)?, bundle.fusion)
}

impl<T: Scalar> Predictor<T> for EnsembleBundle<T> {
    fn predict(&self, embedding: &[T]) -> Result<usize> {
        ensemble_predict(embedding, self)
    }

    fn label(&self) -> String {
        format!("ensemble-{}x{}", self.members.len(), self.fusion)
    }
}

/// Text prompt used by the zero-shot baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZeroShotPrompt {
    /// `"[class]"`
    C,
    /// `"a photo of a [class]"`
    PC,
}

impl ZeroShotPrompt {
    pub fn template(self) -> PromptTemplate {
        match self {
            Self::C => PromptTemplate::class_only("zs-c", "[class]"),
            Self::PC => PromptTemplate::class_only("zs-pc", "a photo of a [class]"),
        }
        .expect("built-in zero-shot prompts are valid")
    }
}

impl fmt::Display for ZeroShotPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::C => "C",
            Self::PC => "PC",
        })
    }
}

/// Cosine classifier over the text features of class-name prompts.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier<T> {
    prompt: ZeroShotPrompt,
    text_features: Vec<Vec<T>>,
}

impl<T: Scalar> ZeroShotClassifier<T> {
    pub fn new<B: EncoderBackend<T> + ?Sized>(
        backend: &B,
        task: &TaskDefinition,
        prompt: ZeroShotPrompt,
    ) -> Result<Self> {
        let template = prompt.template();
        let text_features = task
            .class_names()
            .iter()
            .map(|c| l2_normalize(backend.text_encode(&template, Some(c), None)?.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt,
            text_features,
        })
    }

    pub fn from_features(prompt: ZeroShotPrompt, text_features: Vec<Vec<T>>) -> Result<Self> {
        let text_features = text_features
            .iter()
            .map(|f| l2_normalize(f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt,
            text_features,
        })
    }
}

pub fn zeroshot_predict<T: Scalar>(embedding: &[T], classifier: &ZeroShotClassifier<T>) -> Result<usize> {
    let e = l2_normalize(embedding)?;
    let mut scores = Vec::with_capacity(classifier.text_features.len());
    for t in &classifier.text_features {
        if t.len() != e.len() {
            return contract("zero-shot text and image features differ in dimension");
        }
        scores.push(dot(&e, t));
    }
    Ok(first_argmax(&scores))
}

impl<T: Scalar> Predictor<T> for ZeroShotClassifier<T> {
    fn predict(&self, embedding: &[T]) -> Result<usize> {
        zeroshot_predict(embedding, self)
    }

    fn label(&self) -> String {
        format!("zero-shot-{}", self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest, relative to the dataset root.
    pub relative: String,
    pub path: PathBuf,
    pub label: usize,
}

/// Images grouped by domain; every domain is a test domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    class_names: Vec<String>,
    domains: BTreeMap<String, Vec<ManifestEntry>>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    domain: String,
    class: String,
}

impl DatasetManifest {
    fn build(root: PathBuf, task: &TaskDefinition, rows: Vec<(String, String, String)>) -> Result<Self> {
        let mut domains: BTreeMap<String, Vec<ManifestEntry>> = BTreeMap::new();
        for (relative, domain, class) in rows {
            let label = task
                .index_of(&class)
                .ok_or_else(|| Error::Config(format!("manifest class {class:?} is not a task class")))?;
            if domain.is_empty() {
                return Err(Error::Config(format!(
                    "manifest row {relative:?} has an empty domain"
                )));
            }
            let path = root.join(&relative);
            domains.entry(domain).or_default().push(ManifestEntry {
                relative,
                path,
                label,
            });
        }
        if domains.is_empty() {
            return Err(Error::Config("manifest lists no images".into()));
        }
        for entries in domains.values_mut() {
            entries.sort_by(|a, b| a.relative.cmp(&b.relative));
        }
        Ok(Self {
            root,
            class_names: task.class_names().to_vec(),
            domains,
        })
    }

    /// Reads a `path,domain,class` CSV; paths are relative to its directory.
    pub fn from_csv(path: &Path, task: &TaskDefinition) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "domain", "class"] {
            return Err(Error::Config(format!(
                "{}: header must be path,domain,class",
                path.display()
            )));
        }
        let rows = reader
            .deserialize::<ManifestRow>()
            .map(|r| {
                r.map(|r| (r.path, r.domain, r.class))
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::build(root, task, rows)
    }

    /// Discovers `root/<domain>/<class>/<image>`.
    pub fn from_directory(root: &Path, task: &TaskDefinition) -> Result<Self> {
        let mut rows = Vec::new();
        for domain_dir in sorted_dirs(root)? {
            let domain = file_name(&domain_dir);
            let mut count = 0;
            for class_dir in sorted_dirs(&domain_dir)? {
                let class = file_name(&class_dir);
                for file in std::fs::read_dir(&class_dir).map_err(io_err(&class_dir))? {
                    let file = file.map_err(io_err(&class_dir))?.path();
                    if file.is_file() && !file_name(&file).starts_with('.') {
                        let rel = format!("{domain}/{class}/{}", file_name(&file));
                        rows.push((rel, domain.clone(), class.clone()));
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(Error::Config(format!("domain {domain:?} has no images")));
            }
        }
        Self::build(root.to_path_buf(), task, rows)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domains(&self) -> impl Iterator<Item = (&str, &[ManifestEntry])> {
        self.domains.iter().map(|(d, e)| (d.as_str(), e.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() && !file_name(&path).starts_with('.') {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub correct: usize,
    /// Images successfully decoded and classified.
    pub evaluated: usize,
    /// Images that failed to decode; excluded from accuracy.
    pub errors: usize,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub domains: Vec<DomainReport>,
    /// Arithmetic mean of the per-domain accuracies.
    pub average: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn total_errors(&self) -> usize {
        self.domains.iter().map(|d| d.errors).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        let width = self
            .domains
            .iter()
            .map(|d| d.domain.len())
            .max()
            .unwrap_or(0)
            .max("average".len());
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.predictor);
        let _ = writeln!(
            s,
            "{:<width$}  {:>8}  {:>7}  {:>6}",
            "domain", "acc (%)", "images", "errors"
        );
        for d in &self.domains {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8.2}  {:>7}  {:>6}",
                d.domain, d.accuracy, d.evaluated, d.errors
            );
        }
        let _ = writeln!(s, "{:<width$}  {:>8.2}", "average", self.average);
        s
    }
}

/// Evaluates `classify` on every manifest entry. Decode and I/O failures are
/// counted per domain rather than aborting.
pub fn evaluate_with(
    manifest: &DatasetManifest,
    predictor: impl Into<String>,
    mut classify: impl FnMut(&ManifestEntry) -> Result<usize>,
) -> Result<EvalReport> {
    let mut domains = Vec::new();
    for (domain, entries) in manifest.domains() {
        let (mut correct, mut evaluated, mut errors) = (0, 0, 0);
        for entry in entries {
            match classify(entry) {
                Ok(pred) => {
                    evaluated += 1;
                    if pred == entry.label {
                        correct += 1;
                    }
                }
                Err(Error::Decode { .. } | Error::Io { .. }) => errors += 1,
                Err(e) => return Err(e),
            }
        }
        let accuracy = if evaluated == 0 {
            0.0
        } else {
            correct as f64 / evaluated as f64 * 100.0
        };
        domains.push(DomainReport {
            domain: domain.to_string(),
            correct,
            evaluated,
            errors,
            accuracy,
        });
    }
    let average = domains.iter().map(|d| d.accuracy).sum::<f64>() / domains.len() as f64;
    Ok(EvalReport {
        predictor: predictor.into(),
        domains,
        average,
        config_fingerprint: String::new(),
        seed: 0,
    })
}

pub fn image_embedding<T: Scalar, B: EncoderBackend<T> + ?Sized>(backend: &B, path: &Path) -> Result<Vec<T>> {
    let image = backend.load_image(path)?;
    l2_normalize(backend.image_encode(&image)?.as_slice())
}

pub fn evaluate<T, B, P>(manifest: &DatasetManifest, backend: &B, predictor: &P) -> Result<EvalReport>
where
    T: Scalar,
    B: EncoderBackend<T> + ?Sized,
    P: Predictor<T> + ?Sized,
{
    evaluate_with(manifest, predictor.label(), |entry| {
        predictor.predict(&image_embedding(backend, &entry.path)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportSummary {
    pub rows: usize,
    pub failures: usize,
}

/// Writes one CSV row per decodable image: path, domain, class, the
/// normalised image embedding and, with a checkpoint, its removed version.
pub fn export_embeddings<T, B>(
    manifest: &DatasetManifest,
    backend: &B,
    checkpoint: Option<&Checkpoint<T>>,
    out: &Path,
) -> Result<ExportSummary>
where
    T: Scalar,
    B: EncoderBackend<T> + ?Sized,
{
    let dim = backend.joint_dim();
    if let Some(c) = checkpoint {
        if c.dim() != dim {
            return contract(format!("checkpoint is {}-dim, backend is {dim}-dim", c.dim()));
        }
    }
    let csv_err = |e: csv::Error| Error::Io {
        path: out.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(out).map_err(csv_err)?;
    let mut header: Vec<String> = vec!["path".into(), "domain".into(), "class".into()];
    header.extend((0..dim).map(|i| format!("raw_{i}")));
    if checkpoint.is_some() {
        header.extend((0..dim).map(|i| format!("removed_{i}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    let mut summary = ExportSummary { rows: 0, failures: 0 };
    for (domain, entries) in manifest.domains() {
        for entry in entries {
            let raw = match image_embedding(backend, &entry.path) {
                Ok(e) => e,
                Err(Error::Decode { .. } | Error::Io { .. }) => {
                    summary.failures += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut row = vec![
                entry.relative.clone(),
                domain.to_string(),
                manifest.class_names[entry.label].clone(),
            ];
            row.extend(raw.iter().map(|x| format_sig9(x.as_f64())));
            if let Some(c) = checkpoint {
                let removed = c.remover.forward(&raw)?;
                row.extend(removed.iter().map(|x| format_sig9(x.as_f64())));
            }
            w.write_record(&row).map_err(csv_err)?;
            summary.rows += 1;
        }
    }
    w.flush().map_err(io_err(out))?;
    Ok(summary)
}

/// Nine significant digits in scientific notation.
pub fn format_sig9(x: f64) -> String {
    format!("{x:.8e}")
}
