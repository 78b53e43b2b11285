//! Domain-uncertainty loss over a cosine domain classifier, the ArcFace
//! classification loss, their unweighted sum, and analytic gradients of the
//! batch-mean objective with respect to removed features and class weights.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_normalize, norm, softmax, JointEmbedding};
use crate::error::{contract, Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::{Scalar, ZERO_NORM};

const COS_CLAMP: f64 = 1e-7;

/// Linear classifier evaluated in cosine space: one weight row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(weights: Matrix<T>) -> Result<Self> {
        for i in 0..weights.rows() {
            if norm(weights.row(i)).as_f64() < ZERO_NORM {
                return contract(format!("classifier row {i} is zero"));
            }
        }
        if !weights.is_finite() {
            return contract("classifier weights must be finite");
        }
        Ok(Self { weights })
    }

    /// `M x C` weights uniform in `±1/sqrt(C)`, the usual linear-layer default.
    pub fn init(classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return contract("classifier needs at least one class and one dimension");
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self::new(Matrix::from_fn(classes, dim, |_, _| T::lit(dist.sample(rng))))
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Unit-norm copies of every class row.
    pub fn normalized_rows(&self) -> Result<Vec<Vec<T>>> {
        (0..self.num_classes())
            .map(|i| l2_normalize(self.weights.row(i)))
            .collect()
    }

    /// Raw cosines between `feature` and every class row.
    pub fn cosines(&self, feature: &[T]) -> Result<Vec<T>> {
        if feature.len() != self.dim() {
            return contract(format!(
                "classifier expects {}-dim features, got {}",
                self.dim(),
                feature.len()
            ));
        }
        let f = l2_normalize(feature)?;
        Ok(self.normalized_rows()?.iter().map(|w| dot(&f, w)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcFaceConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self {
            scale: 5.0,
            margin: 0.5,
        }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "ArcFace scale must be positive, got {}",
                self.scale
            )));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.margin) {
            return Err(Error::Config(format!(
                "ArcFace margin must lie in [0, pi), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Unit-normalised text features of the K `"S-like style"` prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainProbe<T> {
    features: Vec<Vec<T>>,
}

impl<T: Scalar> DomainProbe<T> {
    pub fn new(style_text_features: &[JointEmbedding<T>]) -> Result<Self> {
        if style_text_features.is_empty() {
            return contract("domain probe needs at least one style feature");
        }
        let dim = style_text_features[0].len();
        let features = style_text_features
            .iter()
            .map(|f| {
                f.check_dim(dim)?;
                l2_normalize(f.as_slice())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<T>] {
        &self.features
    }
}

/// Cosines between a removed feature and every probe style.
pub fn domain_logits<T: Scalar>(feature: &[T], probe: &DomainProbe<T>) -> Result<Vec<T>> {
    if feature.len() != probe.dim() {
        return contract(format!(
            "domain probe is {}-dim, feature is {}",
            probe.dim(),
            feature.len()
        ));
    }
    let f = l2_normalize(feature)?;
    Ok(probe.features.iter().map(|q| dot(&f, q)).collect())
}

/// Negative entropy `sum_j p_j ln p_j`, with `0 ln 0 = 0`.
pub fn domain_uncertainty_loss<T: Scalar>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        return contract("empty probability vector");
    }
    if let Some(x) = p.iter().find(|x| !(**x >= T::zero())) {
        return contract(format!("probability entry {x} is negative or NaN"));
    }
    let total: T = p.iter().copied().sum();
    if (total.as_f64() - 1.0).abs() > 1e-5 {
        return contract(format!("probabilities sum to {total}, not 1"));
    }
    Ok(p.iter().filter(|&&x| x > T::zero()).map(|&x| x * x.ln()).sum())
}

/// Cross-entropy over `s cos θ_j` logits, with the target replaced by
/// `s cos(θ_y + m)`. Returns the loss and the modified logits.
pub fn arcface_loss<T: Scalar>(
    feature: &[T],
    head: &ClassifierHead<T>,
    target: usize,
    config: &ArcFaceConfig,
) -> Result<(T, Vec<T>)> {
    if target >= head.num_classes() {
        return contract(format!(
            "target class {target} out of range for {} classes",
            head.num_classes()
        ));
    }
    let cosines = head.cosines(feature)?;
    let logits = arcface_logits(&cosines, target, config).logits;
    let loss = cross_entropy(&logits, target);
    Ok((loss, logits))
}

struct MarginLogits<T> {
    logits: Vec<T>,
    /// `d l_y / d cos θ_y`
    target_slope: T,
}

fn arcface_logits<T: Scalar>(cosines: &[T], target: usize, config: &ArcFaceConfig) -> MarginLogits<T> {
    let s = T::lit(config.scale);
    let (sin_m, cos_m) = T::lit(config.margin).sin_cos();
    let mut logits: Vec<T> = cosines.iter().map(|&c| s * c).collect();
    // The logit uses the exact cosine; the clamp only guards the slope
    // c / sqrt(1 - c^2), which diverges at |c| = 1.
    let c = cosines[target];
    let sin_t = (T::one() - c * c).max(T::zero()).min(T::one()).sqrt();
    logits[target] = s * (c * cos_m - sin_t * sin_m);
    let lo = T::lit(-1.0 + COS_CLAMP);
    let hi = T::lit(1.0 - COS_CLAMP);
    let cc = c.max(lo).min(hi);
    let target_slope = s * (cos_m + cc * sin_m / (T::one() - cc * cc).sqrt());
    MarginLogits { logits, target_slope }
}

fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    lse - logits[target]
}

/// `L_total = L_U + L_C`.
#[inline]
pub fn total_loss<T: Scalar>(uncertainty: T, classification: T) -> T {
    uncertainty + classification
}

/// Loss values of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss<T> {
    pub uncertainty: T,
    pub classification: T,
}

impl<T: Scalar> SampleLoss<T> {
    pub fn total(&self) -> T {
        total_loss(self.uncertainty, self.classification)
    }
}

/// Mean losses and their gradients over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients<T> {
    /// One gradient per removed feature (already divided by the batch size).
    pub features: Vec<Vec<T>>,
    pub head: Matrix<T>,
    pub mean_uncertainty: T,
    pub mean_classification: T,
}

impl<T: Scalar> LossGradients<T> {
    pub fn mean_total(&self) -> T {
        total_loss(self.mean_uncertainty, self.mean_classification)
    }
}

/// Loss of one removed feature, accumulating `weight * gradient` into
/// `d_feature` and `d_head`.
fn sample_loss_and_grad<T: Scalar>(
    feature: &[T],
    probe: &DomainProbe<T>,
    head_rows: &[Vec<T>],
    head_norms: &[T],
    target: usize,
    config: &ArcFaceConfig,
    weight: T,
    d_feature: &mut [T],
    d_head: &mut Matrix<T>,
) -> Result<SampleLoss<T>> {
    let n = norm(feature);
    if n.as_f64() < ZERO_NORM {
        return Err(Error::Domain("removed feature has zero norm".into()));
    }
    let unit: Vec<T> = feature.iter().map(|&x| x / n).collect();
    let mut d_unit = vec![T::zero(); unit.len()];

    // Domain uncertainty: dL/dz_j = p_j (ln p_j - L_U).
    let z: Vec<T> = probe.features.iter().map(|q| dot(&unit, q)).collect();
    let p = softmax(&z)?;
    let uncertainty: T = p.iter().filter(|&&x| x > T::zero()).map(|&x| x * x.ln()).sum();
    for (q, &pj) in probe.features.iter().zip(&p) {
        let dz = if pj > T::zero() {
            pj * (pj.ln() - uncertainty)
        } else {
            T::zero()
        };
        for (d, &qc) in d_unit.iter_mut().zip(q) {
            *d = *d + dz * qc;
        }
    }

    // ArcFace.
    let cosines: Vec<T> = head_rows.iter().map(|w| dot(&unit, w)).collect();
    let margin = arcface_logits(&cosines, target, config);
    let classification = cross_entropy(&margin.logits, target);
    let probs = softmax(&margin.logits)?;
    let s = T::lit(config.scale);
    for (k, (w, &pk)) in head_rows.iter().zip(&probs).enumerate() {
        let dl = if k == target { pk - T::one() } else { pk };
        let dc = dl * if k == target { margin.target_slope } else { s };
        if dc == T::zero() {
            continue;
        }
        for (d, &wc) in d_unit.iter_mut().zip(w) {
            *d = *d + dc * wc;
        }
        // d cos / d w_k = (u - ŵ (ŵ·u)) / |w_k|
        let along = cosines[k];
        let scale = weight * dc / head_norms[k];
        for ((g, &uc), &wc) in d_head.row_mut(k).iter_mut().zip(&unit).zip(w) {
            *g = *g + scale * (uc - wc * along);
        }
    }

    // Back through the normalisation of the removed feature.
    let radial = dot(&unit, &d_unit);
    for ((d, &gu), &uc) in d_feature.iter_mut().zip(&d_unit).zip(&unit) {
        *d = *d + weight * (gu - uc * radial) / n;
    }
    Ok(SampleLoss {
        uncertainty,
        classification,
    })
}

/// Per-sample losses without gradients.
pub fn sample_losses<T: Scalar>(
    features: &[Vec<T>],
    probe: &DomainProbe<T>,
    head: &ClassifierHead<T>,
    targets: &[usize],
    config: &ArcFaceConfig,
) -> Result<Vec<SampleLoss<T>>> {
    check_batch(features, probe, head, targets)?;
    features
        .iter()
        .zip(targets)
        .map(|(f, &t)| {
            let z = domain_logits(f, probe)?;
            let uncertainty = domain_uncertainty_loss(&softmax(&z)?)?;
            let (classification, _) = arcface_loss(f, head, t, config)?;
            Ok(SampleLoss {
                uncertainty,
                classification,
            })
        })
        .collect()
}

fn check_batch<T: Scalar>(
    features: &[Vec<T>],
    probe: &DomainProbe<T>,
    head: &ClassifierHead<T>,
    targets: &[usize],
) -> Result<()> {
    if features.is_empty() {
        return contract("empty batch");
    }
    if features.len() != targets.len() {
        return contract(format!(
            "{} features but {} targets",
            features.len(),
            targets.len()
        ));
    }
    if probe.dim() != head.dim() {
        return contract(format!(
            "probe is {}-dim but classifier is {}-dim",
            probe.dim(),
            head.dim()
        ));
    }
    for f in features {
        if f.len() != head.dim() {
            return contract(format!("feature has length {}, expected {}", f.len(), head.dim()));
        }
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= head.num_classes()) {
        return contract(format!(
            "target class {t} out of range for {} classes",
            head.num_classes()
        ));
    }
    Ok(())
}

/// Analytic gradients of the batch-mean `L_U + L_C` with respect to the
/// removed features and the classifier weights. Probe features are constants.
pub fn loss_gradients<T: Scalar>(
    features: &[Vec<T>],
    probe: &DomainProbe<T>,
    head: &ClassifierHead<T>,
    targets: &[usize],
    config: &ArcFaceConfig,
) -> Result<LossGradients<T>> {
    check_batch(features, probe, head, targets)?;
    let head_rows = head.normalized_rows()?;
    let head_norms: Vec<T> = (0..head.num_classes())
        .map(|k| norm(head.weights.row(k)))
        .collect();
    let weight = T::one() / T::lit(features.len() as f64);
    let mut d_head = Matrix::zeros(head.num_classes(), head.dim());
    let mut d_features = Vec::with_capacity(features.len());
    let (mut sum_u, mut sum_c) = (T::zero(), T::zero());
    for (f, &t) in features.iter().zip(targets) {
        let mut d = vec![T::zero(); f.len()];
        let loss = sample_loss_and_grad(
            f,
            probe,
            &head_rows,
            &head_norms,
            t,
            config,
            weight,
            &mut d,
            &mut d_head,
        )?;
        sum_u = sum_u + loss.uncertainty;
        sum_c = sum_c + loss.classification;
        d_features.push(d);
    }
    Ok(LossGradients {
        features: d_features,
        head: d_head,
        mean_uncertainty: sum_u * weight,
        mean_classification: sum_c * weight,
    })
}
