//! Style-SE Net: a bias-free bottleneck gate applied residually,
//! `R(v) = a(v) * v + v` with `a(v) = sigmoid(relu(vᵀ W1) W2)`.

use rand_distr::{Distribution, Uniform};

use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const DEFAULT_RATIO: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct StyleRemoverParams<T> {
    /// `C x ⌊C/r⌋`
    pub w1: Matrix<T>,
    /// `⌊C/r⌋ x C`
    pub w2: Matrix<T>,
    pub ratio: usize,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoverTrace<T> {
    pub pre_activation: Vec<T>,
    pub hidden: Vec<T>,
    pub gate: Vec<T>,
    pub output: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoverGradients<T> {
    pub input: Vec<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn hidden_width(dim: usize, ratio: usize) -> Result<usize> {
    if ratio < 1 {
        return contract("compression ratio must be at least 1");
    }
    let width = dim / ratio;
    if width < 1 {
        return contract(format!(
            "compression ratio {ratio} collapses a {dim}-dim feature to zero width"
        ));
    }
    Ok(width)
}

impl<T: Scalar> StyleRemoverParams<T> {
    /// Xavier-uniform initialisation of both matrices.
    pub fn init(dim: usize, ratio: usize, rng: &mut Rng) -> Result<Self> {
        let width = hidden_width(dim, ratio)?;
        let bound = (6.0 / (dim + width) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w1 = Matrix::from_fn(dim, width, |_, _| T::lit(dist.sample(rng)));
        let w2 = Matrix::from_fn(width, dim, |_, _| T::lit(dist.sample(rng)));
        Ok(Self { w1, w2, ratio })
    }

    pub fn zeros(dim: usize, ratio: usize) -> Result<Self> {
        let width = hidden_width(dim, ratio)?;
        Ok(Self {
            w1: Matrix::zeros(dim, width),
            w2: Matrix::zeros(width, dim),
            ratio,
        })
    }

    /// Builds parameters from explicit matrices, checking shapes.
    pub fn from_matrices(w1: Matrix<T>, w2: Matrix<T>, ratio: usize) -> Result<Self> {
        let (c, h) = w1.shape();
        if w2.shape() != (h, c) {
            return contract(format!(
                "W1 is {c}x{h} so W2 must be {h}x{c}, got {}x{}",
                w2.rows(),
                w2.cols()
            ));
        }
        if hidden_width(c, ratio)? != h {
            return contract(format!("hidden width {h} does not equal ⌊{c}/{ratio}⌋"));
        }
        if !w1.is_finite() || !w2.is_finite() {
            return contract("remover parameters must be finite");
        }
        Ok(Self { w1, w2, ratio })
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.cols()
    }

    fn check_input(&self, v: &[T]) -> Result<()> {
        if v.len() != self.dim() {
            return contract(format!(
                "remover expects a {}-dim feature, got {}",
                self.dim(),
                v.len()
            ));
        }
        Ok(())
    }

    pub fn trace(&self, v: &[T]) -> Result<RemoverTrace<T>> {
        self.check_input(v)?;
        let pre_activation = self.w1.left_mul(v);
        let hidden: Vec<T> = pre_activation.iter().map(|&x| x.max(T::zero())).collect();
        let gate: Vec<T> = self.w2.left_mul(&hidden).into_iter().map(sigmoid).collect();
        let output = gate.iter().zip(v).map(|(&a, &x)| a * x + x).collect();
        Ok(RemoverTrace {
            pre_activation,
            hidden,
            gate,
            output,
        })
    }

    pub fn forward(&self, v: &[T]) -> Result<Vec<T>> {
        Ok(self.trace(v)?.output)
    }

    /// Per-channel gate `a(v)`.
    pub fn gate(&self, v: &[T]) -> Result<Vec<T>> {
        Ok(self.trace(v)?.gate)
    }

    /// Exact gradients of `<upstream, R(v)>` with respect to `v`, `W1` and `W2`.
    pub fn backward(&self, v: &[T], upstream: &[T]) -> Result<RemoverGradients<T>> {
        let trace = self.trace(v)?;
        self.backward_from_trace(v, &trace, upstream)
    }

    pub fn backward_from_trace(
        &self,
        v: &[T],
        trace: &RemoverTrace<T>,
        upstream: &[T],
    ) -> Result<RemoverGradients<T>> {
        self.check_input(v)?;
        if upstream.len() != v.len() {
            return contract(format!(
                "upstream gradient has length {}, expected {}",
                upstream.len(),
                v.len()
            ));
        }
        // R_c = (1 + a_c) v_c
        let mut input: Vec<T> = upstream
            .iter()
            .zip(&trace.gate)
            .map(|(&g, &a)| g * (T::one() + a))
            .collect();
        let d_logit: Vec<T> = upstream
            .iter()
            .zip(v)
            .zip(&trace.gate)
            .map(|((&g, &x), &a)| g * x * a * (T::one() - a))
            .collect();

        let mut w2 = Matrix::zeros(self.w2.rows(), self.w2.cols());
        w2.add_outer(T::one(), &trace.hidden, &d_logit);

        // relu'(0) = 0
        let d_pre: Vec<T> = self
            .w2
            .right_mul(&d_logit)
            .into_iter()
            .zip(&trace.pre_activation)
            .map(|(g, &p)| if p > T::zero() { g } else { T::zero() })
            .collect();

        let mut w1 = Matrix::zeros(self.w1.rows(), self.w1.cols());
        w1.add_outer(T::one(), v, &d_pre);
        for (d, extra) in input.iter_mut().zip(self.w1.right_mul(&d_pre)) {
            *d = *d + extra;
        }
        Ok(RemoverGradients { input, w1, w2 })
    }

    pub fn cast<U: Scalar>(&self) -> StyleRemoverParams<U> {
        StyleRemoverParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
            ratio: self.ratio,
        }
    }
}
