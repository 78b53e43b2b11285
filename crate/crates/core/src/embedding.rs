//! Vector types and hypersphere arithmetic used by every other module.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::{Scalar, ZERO_NORM};

/// A feature in the C-dimensional joint vision-language space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding<T>(Vec<T>);

/// A D-dimensional word vector injected at a prompt's style placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector<T>(Vec<T>);

macro_rules! finite_vector {
    ($name:ident, $what:literal) => {
        impl<T: Scalar> $name<T> {
            pub fn new(values: Vec<T>) -> Result<Self> {
                if values.is_empty() {
                    return contract(concat!($what, " must not be empty"));
                }
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!(
                        concat!($what, " has a non-finite entry at index {}"),
                        i
                    )));
                }
                Ok(Self(values))
            }

            #[inline]
            pub fn as_slice(&self) -> &[T] {
                &self.0
            }

            #[inline]
            pub fn len(&self) -> usize {
                self.0.len()
            }

            #[inline]
            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn into_vec(self) -> Vec<T> {
                self.0
            }

            /// Fails unless the vector has exactly `dim` entries.
            pub fn check_dim(&self, dim: usize) -> Result<()> {
                if self.0.len() != dim {
                    return contract(format!(
                        concat!($what, " has length {}, expected {}"),
                        self.0.len(),
                        dim
                    ));
                }
                Ok(())
            }
        }

        impl<T> AsRef<[T]> for $name<T> {
            fn as_ref(&self) -> &[T] {
                &self.0
            }
        }
    };
}

finite_vector!(JointEmbedding, "joint embedding");
finite_vector!(StyleVector, "style vector");

#[inline]
pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

#[inline]
pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    let n = norm(v);
    if !(n.as_f64() >= ZERO_NORM) {
        return Err(Error::Domain(format!("cannot normalize a vector of norm {n}")));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return contract(format!(
            "cosine similarity of vectors with lengths {} and {}",
            u.len(),
            v.len()
        ));
    }
    let (nu, nv) = (norm(u), norm(v));
    if !(nu.as_f64() >= ZERO_NORM && nv.as_f64() >= ZERO_NORM) {
        return Err(Error::Domain("cosine similarity with a zero vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Result<Vec<T>> {
    if z.is_empty() {
        return contract("softmax of an empty vector");
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("softmax input is not finite".into()));
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// The ordered class names of a classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinition {
    class_names: Vec<String>,
}

impl TaskDefinition {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let class_names: Vec<String> = names.into_iter().map(Into::into).collect();
        if class_names.len() < 2 {
            return contract(format!(
                "a task needs at least 2 classes, got {}",
                class_names.len()
            ));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.trim().is_empty() {
                return contract("class names must be non-empty");
            }
            if !seen.insert(name.as_str()) {
                return contract(format!("duplicate class name {name:?}"));
            }
        }
        Ok(Self { class_names })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

pub const CLASS_PLACEHOLDER: &str = "[class]";
pub const STYLE_PLACEHOLDER: &str = "S*";

/// Pattern of the style-only prompt used for the domain probe.
pub const STYLE_PROMPT_PATTERN: &str = "S*-like style";

/// A prompt pattern with a `[class]` slot and/or an `S*` style slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    id: String,
    pattern: String,
}

/// A token of a prompt after tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Token {
    Word(String),
    /// The pseudo-word whose embedding is replaced by a style vector.
    Style,
}

/// Tokenized prompt with the position of the injected style vector, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub tokens: Vec<Token>,
    pub style_position: Option<usize>,
}

impl PromptTemplate {
    /// A training template: exactly one class slot and exactly one style slot.
    pub fn new(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let t = Self {
            id: id.into(),
            pattern: pattern.into(),
        };
        match (t.class_slots(), t.style_slots()) {
            (1, 1) => Ok(t),
            (c, s) => contract(format!(
                "template {:?} needs exactly one {CLASS_PLACEHOLDER} and one {STYLE_PLACEHOLDER}, found {c} and {s}",
                t.pattern
            )),
        }
    }

    /// Builds a training template whose id is derived from the pattern.
    pub fn from_pattern(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        Self::new(slug(&pattern), pattern)
    }

    /// A class-only prompt such as `"a photo of a [class]"`.
    pub fn class_only(id: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let t = Self {
            id: id.into(),
            pattern: pattern.into(),
        };
        match (t.class_slots(), t.style_slots()) {
            (1, 0) => Ok(t),
            (c, s) => contract(format!(
                "class-only prompt {:?} needs one {CLASS_PLACEHOLDER} and no {STYLE_PLACEHOLDER}, found {c} and {s}",
                t.pattern
            )),
        }
    }

    /// The `"S*-like style"` prompt encoded to build the domain probe.
    pub fn style_probe() -> Self {
        Self {
            id: "style-probe".into(),
            pattern: STYLE_PROMPT_PATTERN.into(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn has_class(&self) -> bool {
        self.class_slots() == 1
    }

    pub fn has_style(&self) -> bool {
        self.style_slots() == 1
    }

    fn class_slots(&self) -> usize {
        self.pattern.matches(CLASS_PLACEHOLDER).count()
    }

    fn style_slots(&self) -> usize {
        self.pattern.matches(STYLE_PLACEHOLDER).count()
    }

    /// Fills the class slot and splits the prompt into word tokens, keeping
    /// the style slot as a single [`Token::Style`].
    pub fn tokenize(&self, class_name: Option<&str>) -> Result<TokenizedPrompt> {
        let text = match (self.has_class(), class_name) {
            (true, Some(name)) => self.pattern.replace(CLASS_PLACEHOLDER, name),
            (true, None) => return contract(format!("template {:?} needs a class name", self.id)),
            (false, _) => self.pattern.clone(),
        };
        let mut tokens = Vec::new();
        let mut style_position = None;
        let mut pieces = text.split(STYLE_PLACEHOLDER).peekable();
        while let Some(piece) = pieces.next() {
            tokens.extend(split_words(piece).map(Token::Word));
            if pieces.peek().is_some() {
                style_position = Some(tokens.len());
                tokens.push(Token::Style);
            }
        }
        Ok(TokenizedPrompt {
            tokens,
            style_position,
        })
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || c == '-')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Readable stable id for a pattern, e.g. `a-class-in-a-S-style`.
pub fn slug(pattern: &str) -> String {
    let replaced = pattern
        .replace(CLASS_PLACEHOLDER, " class ")
        .replace(STYLE_PLACEHOLDER, " S ");
    replaced
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}
