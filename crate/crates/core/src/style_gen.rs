//! Per-epoch generation of the K style word vectors.
//!
//! Two families of generators exist: `Random`, which samples each vector from
//! one of five weight-initialisation distributions, and `StyleMix`, which
//! forms a Beta-weighted convex combination of predefined adjective
//! embeddings. `RandomMix` flips one fair coin per epoch to choose between
//! them; `Gaussian` and `Frozen` are the ablation variants.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::backend::EncoderBackend;
use crate::embedding::StyleVector;
use crate::error::{contract, io_err, Error, Result};
use crate::rng::{stream_rng, Rng, Stream};
use crate::scalar::Scalar;

/// Weight-initialisation schemes used by Random generation. A style vector
/// is treated as a `1 x D` weight, so `fan_in = D` and `fan_out = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomDistribution {
    Normal,
    XavierUniform,
    XavierNormal,
    KaimingNormal,
    KaimingUniform,
}

impl RandomDistribution {
    pub const ALL: [RandomDistribution; 5] = [
        RandomDistribution::Normal,
        RandomDistribution::XavierUniform,
        RandomDistribution::XavierNormal,
        RandomDistribution::KaimingNormal,
        RandomDistribution::KaimingUniform,
    ];

    fn sample(self, dim: usize, rng: &mut Rng) -> Vec<f64> {
        let fan_in = dim as f64;
        let fan_out = 1.0;
        match self {
            Self::Normal => (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            Self::XavierUniform => uniform(dim, (6.0 / (fan_in + fan_out)).sqrt(), rng),
            Self::XavierNormal => scaled_normal(dim, (2.0 / (fan_in + fan_out)).sqrt(), rng),
            // Kaiming with ReLU gain sqrt(2), fan-in mode.
            Self::KaimingNormal => scaled_normal(dim, (2.0 / fan_in).sqrt(), rng),
            Self::KaimingUniform => uniform(dim, (6.0 / fan_in).sqrt(), rng),
        }
    }
}

impl fmt::Display for RandomDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::XavierUniform => "xavier_uniform",
            Self::XavierNormal => "xavier_normal",
            Self::KaimingNormal => "kaiming_normal",
            Self::KaimingUniform => "kaiming_uniform",
        })
    }
}

impl FromStr for RandomDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::Contract(format!("unknown distribution {s:?}")))
    }
}

fn uniform(dim: usize, bound: f64, rng: &mut Rng) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..dim).map(|_| dist.sample(rng)).collect()
}

fn scaled_normal(dim: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn to_style<T: Scalar>(values: Vec<f64>) -> Result<StyleVector<T>> {
    StyleVector::new(values.into_iter().map(T::lit).collect())
}

pub fn random_style<T: Scalar>(
    dist: RandomDistribution,
    dim: usize,
    rng: &mut Rng,
) -> Result<StyleVector<T>> {
    to_style(dist.sample(dim, rng))
}

pub fn gaussian_style<T: Scalar>(dim: usize, std: f64, rng: &mut Rng) -> Result<StyleVector<T>> {
    if !(std > 0.0) {
        return contract(format!("gaussian std must be positive, got {std}"));
    }
    let dist = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
    to_style((0..dim).map(|_| dist.sample(rng)).collect())
}

/// Adjective word vectors mixed by StyleMix.
#[derive(Debug, Clone, PartialEq)]
pub struct PredefinedLexicon<T> {
    entries: Vec<(String, StyleVector<T>)>,
}

impl<T: Scalar> PredefinedLexicon<T> {
    pub fn new(entries: Vec<(String, StyleVector<T>)>) -> Result<Self> {
        if entries.len() < 2 {
            return contract(format!("lexicon needs at least 2 entries, got {}", entries.len()));
        }
        let dim = entries[0].1.len();
        let mut labels = HashSet::new();
        for (label, v) in &entries {
            if !labels.insert(label.as_str()) {
                return contract(format!("duplicate lexicon label {label:?}"));
            }
            v.check_dim(dim)?;
        }
        Ok(Self { entries })
    }

    /// Looks every word up in the backend's token-embedding table.
    pub fn from_backend<B: EncoderBackend<T> + ?Sized>(words: &[String], backend: &B) -> Result<Self> {
        let entries = words
            .iter()
            .map(|w| Ok((w.clone(), backend.token_embedding_lookup(w)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }

    pub fn vectors(&self) -> impl Iterator<Item = &StyleVector<T>> {
        self.entries.iter().map(|(_, v)| v)
    }

    /// `sum_j weights[j] * lexicon[j]`.
    pub fn mix(&self, weights: &[f64]) -> Result<StyleVector<T>> {
        if weights.len() != self.entries.len() {
            return contract(format!(
                "{} mixing weights for a lexicon of {}",
                weights.len(),
                self.entries.len()
            ));
        }
        let mut out = vec![0.0f64; self.dim()];
        for (&w, v) in weights.iter().zip(self.vectors()) {
            for (o, &x) in out.iter_mut().zip(v.as_slice()) {
                *o += w * x.as_f64();
            }
        }
        to_style(out)
    }
}

/// Words of a lexicon file: one per line, `#` starts a comment.
pub fn parse_lexicon(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn load_lexicon_words(path: &Path, expected_len: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let words = parse_lexicon(&text);
    if words.len() != expected_len {
        return Err(Error::Config(format!(
            "lexicon {} has {} words, expected {expected_len}",
            path.display(),
            words.len()
        )));
    }
    Ok(words)
}

pub const DEFAULT_LEXICON: &str = include_str!("../data/default_lexicon.txt");

pub fn default_lexicon_words() -> Vec<String> {
    parse_lexicon(DEFAULT_LEXICON)
}

const MAX_WEIGHT_RETRIES: usize = 64;

/// Draws `n` independent Beta(alpha, alpha) values and normalises them to sum 1.
pub fn sample_mix_weights(n: usize, alpha: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return contract(format!("Beta concentration must be positive, got {alpha}"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Contract(e.to_string()))?;
    for _ in 0..MAX_WEIGHT_RETRIES {
        let raw: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
        if raw.iter().all(|&x| x < 1e-12) {
            continue;
        }
        let total: f64 = raw.iter().sum();
        return Ok(raw.into_iter().map(|x| x / total).collect());
    }
    contract(format!(
        "Beta({alpha}, {alpha}) weights all vanished after {MAX_WEIGHT_RETRIES} retries"
    ))
}

pub fn stylemix_style<T: Scalar>(
    lexicon: &PredefinedLexicon<T>,
    alpha: f64,
    rng: &mut Rng,
) -> Result<StyleVector<T>> {
    let weights = sample_mix_weights(lexicon.len(), alpha, rng)?;
    lexicon.mix(&weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Stylemix,
    RandomMix,
    Gaussian,
    /// Styles keep their initial values for the whole run.
    Frozen,
}

/// Which generator produced the current bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMethod {
    Random,
    Stylemix,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleGenConfig {
    pub k: usize,
    pub strategy: Strategy,
    pub alpha: f64,
    pub lexicon_size: usize,
    pub gaussian_std: f64,
    pub seed: u64,
}

impl Default for StyleGenConfig {
    fn default() -> Self {
        Self {
            k: 80,
            strategy: Strategy::RandomMix,
            alpha: 0.1,
            lexicon_size: 8,
            gaussian_std: 0.02,
            seed: 0,
        }
    }
}

impl StyleGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("style count K must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.gaussian_std > 0.0) {
            return Err(Error::Config(format!(
                "gaussian_std must be positive, got {}",
                self.gaussian_std
            )));
        }
        Ok(())
    }

    pub fn needs_lexicon(&self) -> bool {
        matches!(
            self.strategy,
            Strategy::Stylemix | Strategy::RandomMix | Strategy::Frozen
        )
    }

    /// Generator used at `epoch`. `Frozen` banks are set up like `RandomMix`
    /// and never touched again.
    pub fn method_for_epoch(&self, epoch: u64) -> RefreshMethod {
        match self.strategy {
            Strategy::Random => RefreshMethod::Random,
            Strategy::Stylemix => RefreshMethod::Stylemix,
            Strategy::Gaussian => RefreshMethod::Gaussian,
            Strategy::RandomMix | Strategy::Frozen => {
                if stream_rng(self.seed, Stream::StrategyCoin, epoch).random_bool(0.5) {
                    RefreshMethod::Random
                } else {
                    RefreshMethod::Stylemix
                }
            }
        }
    }
}

/// The K current style vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank<T> {
    styles: Vec<StyleVector<T>>,
    epoch_of_last_refresh: u64,
    method_of_last_refresh: RefreshMethod,
}

impl<T: Scalar> StyleBank<T> {
    /// Generates the bank used in epoch 0.
    pub fn initialize(
        config: &StyleGenConfig,
        lexicon: Option<&PredefinedLexicon<T>>,
        dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        generate(config, lexicon, dim, 0)
    }

    pub fn styles(&self) -> &[StyleVector<T>] {
        &self.styles
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.styles.first().map_or(0, StyleVector::len)
    }

    pub fn epoch_of_last_refresh(&self) -> u64 {
        self.epoch_of_last_refresh
    }

    pub fn method_of_last_refresh(&self) -> RefreshMethod {
        self.method_of_last_refresh
    }
}

/// Regenerates every style for `epoch`. A pure function of
/// `(config, lexicon, epoch)` for all strategies except `Frozen`, which
/// returns the bank unchanged.
pub fn refresh_bank<T: Scalar>(
    bank: &StyleBank<T>,
    config: &StyleGenConfig,
    lexicon: Option<&PredefinedLexicon<T>>,
    epoch: u64,
) -> Result<StyleBank<T>> {
    config.validate()?;
    if config.strategy == Strategy::Frozen {
        return Ok(bank.clone());
    }
    generate(config, lexicon, bank.dim(), epoch)
}

fn generate<T: Scalar>(
    config: &StyleGenConfig,
    lexicon: Option<&PredefinedLexicon<T>>,
    dim: usize,
    epoch: u64,
) -> Result<StyleBank<T>> {
    if dim == 0 {
        return contract("style dimension must be positive");
    }
    let method = config.method_for_epoch(epoch);
    let mut rng = stream_rng(config.seed, Stream::StyleDraws, epoch);
    let styles = match method {
        RefreshMethod::Random => (0..config.k)
            .map(|_| {
                let dist = random_distribution_choice(&mut rng);
                random_style(dist, dim, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?,
        RefreshMethod::Gaussian => (0..config.k)
            .map(|_| gaussian_style(dim, config.gaussian_std, &mut rng))
            .collect::<Result<Vec<_>>>()?,
        RefreshMethod::Stylemix => {
            let lexicon =
                lexicon.ok_or_else(|| Error::Config("StyleMix generation requires a lexicon".into()))?;
            if lexicon.dim() != dim {
                return contract(format!(
                    "lexicon vectors have length {}, styles need {dim}",
                    lexicon.dim()
                ));
            }
            (0..config.k)
                .map(|_| stylemix_style(lexicon, config.alpha, &mut rng))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(StyleBank {
        styles,
        epoch_of_last_refresh: epoch,
        method_of_last_refresh: method,
    })
}

/// Distribution picked for each Random-generation draw; exposed for
/// frequency checks.
pub fn random_distribution_choice(rng: &mut Rng) -> RandomDistribution {
    RandomDistribution::ALL[rng.random_range(0..RandomDistribution::ALL.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn lexicon(vectors: Vec<Vec<f64>>) -> PredefinedLexicon<f64> {
        PredefinedLexicon::new(
            vectors
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("w{i}"), StyleVector::new(v).unwrap()))
                .collect(),
        )
        .unwrap()
    }

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    #[test]
    fn normal_moments() {
        let mut r = rng(11);
        let mut all = Vec::new();
        for _ in 0..25_000 {
            all.extend(
                random_style::<f64>(RandomDistribution::Normal, 4, &mut r)
                    .unwrap()
                    .into_vec(),
            );
        }
        assert_eq!(all.len(), 100_000);
        let (mean, std) = mean_std(&all);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn xavier_uniform_bound() {
        let bound = (6.0f64 / 101.0).sqrt();
        assert!((bound - 0.2437).abs() < 1e-4);
        let mut r = rng(3);
        for _ in 0..100 {
            let v = random_style::<f64>(RandomDistribution::XavierUniform, 100, &mut r).unwrap();
            assert!(v.as_slice().iter().all(|x| x.abs() <= bound));
        }
    }

    #[test]
    fn each_distribution_has_expected_spread() {
        let d = 64usize;
        let expected = [
            (RandomDistribution::Normal, 1.0),
            (
                RandomDistribution::XavierUniform,
                (6.0 / 65.0f64).sqrt() / 3f64.sqrt(),
            ),
            (RandomDistribution::XavierNormal, (2.0 / 65.0f64).sqrt()),
            (RandomDistribution::KaimingNormal, (2.0 / 64.0f64).sqrt()),
            (
                RandomDistribution::KaimingUniform,
                (6.0 / 64.0f64).sqrt() / 3f64.sqrt(),
            ),
        ];
        for (dist, std) in expected {
            let mut r = rng(5);
            let mut all = Vec::new();
            for _ in 0..1000 {
                all.extend(random_style::<f64>(dist, d, &mut r).unwrap().into_vec());
            }
            let (_, got) = mean_std(&all);
            assert!((got / std - 1.0).abs() < 0.02, "{dist}: {got} vs {std}");
        }
    }

    #[test]
    fn random_style_is_deterministic() {
        let a = random_style::<f32>(RandomDistribution::KaimingUniform, 16, &mut rng(9)).unwrap();
        let b = random_style::<f32>(RandomDistribution::KaimingUniform, 16, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert!("bogus".parse::<RandomDistribution>().is_err());
        assert_eq!(
            "xavier_normal".parse::<RandomDistribution>().unwrap(),
            RandomDistribution::XavierNormal
        );
    }

    #[test]
    fn gaussian_examples() {
        let v = gaussian_style::<f64>(100_000, 0.02, &mut rng(1)).unwrap();
        let (_, std) = mean_std(v.as_slice());
        assert!((0.0195..=0.0205).contains(&std), "std {std}");

        let scaled = gaussian_style::<f64>(3, 0.02, &mut rng(2)).unwrap();
        let unit = gaussian_style::<f64>(3, 1.0, &mut rng(2)).unwrap();
        for (s, u) in scaled.as_slice().iter().zip(unit.as_slice()) {
            assert!((s - 0.02 * u).abs() < 1e-15);
        }
        assert_eq!(
            gaussian_style::<f64>(8, 0.02, &mut rng(4)).unwrap(),
            gaussian_style::<f64>(8, 0.02, &mut rng(4)).unwrap()
        );
        assert!(gaussian_style::<f64>(3, 0.0, &mut rng(0)).is_err());
        assert!(gaussian_style::<f64>(3, -1.0, &mut rng(0)).is_err());
    }

    #[test]
    fn forced_mixing_weights() {
        let lex = lexicon(vec![vec![1.0, 2.0], vec![5.0, -1.0], vec![0.0, 0.0]]);
        assert_eq!(lex.mix(&[1.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 2.0]);
        let pair = lexicon(vec![vec![0.0, 0.0], vec![2.0, 2.0]]);
        assert_eq!(pair.mix(&[0.5, 0.5]).unwrap().as_slice(), &[1.0, 1.0]);
        assert!(pair.mix(&[1.0]).is_err());
    }

    #[test]
    fn stylemix_stays_in_hull() {
        let mut r = rng(21);
        let vectors: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                random_style::<f64>(RandomDistribution::Normal, 6, &mut r)
                    .unwrap()
                    .into_vec()
            })
            .collect();
        let lex = lexicon(vectors.clone());
        for _ in 0..1000 {
            let w = sample_mix_weights(8, 0.1, &mut r).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x >= 0.0));
            let s = lex.mix(&w).unwrap();
            for (c, &x) in s.as_slice().iter().enumerate() {
                let lo = vectors.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = vectors.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn lexicon_validation() {
        let one = vec![("a".to_string(), StyleVector::new(vec![1.0f64]).unwrap())];
        assert!(PredefinedLexicon::new(one).is_err());
        let dup = vec![
            ("a".to_string(), StyleVector::new(vec![1.0f64]).unwrap()),
            ("a".to_string(), StyleVector::new(vec![2.0]).unwrap()),
        ];
        assert!(PredefinedLexicon::new(dup).is_err());
        let ragged = vec![
            ("a".to_string(), StyleVector::new(vec![1.0f64]).unwrap()),
            ("b".to_string(), StyleVector::new(vec![2.0, 3.0]).unwrap()),
        ];
        assert!(PredefinedLexicon::new(ragged).is_err());
    }

    #[test]
    fn lexicon_file_parsing() {
        let words = parse_lexicon("# header\nwhite\n  cartoon  # inline\n\ndark\n");
        assert_eq!(words, vec!["white", "cartoon", "dark"]);
        assert_eq!(default_lexicon_words().len(), 8);
        assert_eq!(default_lexicon_words()[..2], ["white", "cartoon"]);
    }

    fn test_lexicon(d: usize) -> PredefinedLexicon<f64> {
        let mut r = rng(77);
        lexicon(
            (0..8)
                .map(|_| {
                    random_style::<f64>(RandomDistribution::Normal, d, &mut r)
                        .unwrap()
                        .into_vec()
                })
                .collect(),
        )
    }

    #[test]
    fn frozen_bank_never_changes() {
        let config = StyleGenConfig {
            k: 5,
            strategy: Strategy::Frozen,
            seed: 4,
            ..Default::default()
        };
        let lex = test_lexicon(6);
        let bank = StyleBank::initialize(&config, Some(&lex), 6).unwrap();
        for epoch in [1, 2, 50] {
            assert_eq!(refresh_bank(&bank, &config, Some(&lex), epoch).unwrap(), bank);
        }
    }

    #[test]
    fn random_mix_regenerates_every_vector() {
        let config = StyleGenConfig {
            k: 6,
            seed: 8,
            ..Default::default()
        };
        let lex = test_lexicon(10);
        let mut bank = StyleBank::initialize(&config, Some(&lex), 10).unwrap();
        for epoch in 1..40 {
            let next = refresh_bank(&bank, &config, Some(&lex), epoch).unwrap();
            assert_eq!(next.len(), 6);
            assert_eq!(next.epoch_of_last_refresh(), epoch);
            for (a, b) in bank.styles().iter().zip(next.styles()) {
                let diff = a
                    .as_slice()
                    .iter()
                    .zip(b.as_slice())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(diff > 1e-9);
            }
            bank = next;
        }
    }

    #[test]
    fn stylemix_without_lexicon_is_a_config_error() {
        let config = StyleGenConfig {
            k: 2,
            strategy: Strategy::Stylemix,
            ..Default::default()
        };
        assert!(matches!(
            StyleBank::<f64>::initialize(&config, None, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            StyleGenConfig {
                k: 0,
                ..Default::default()
            },
            StyleGenConfig {
                alpha: 0.0,
                ..Default::default()
            },
            StyleGenConfig {
                gaussian_std: -0.1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
