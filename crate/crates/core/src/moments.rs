//! Moment equations `a_y^q = γ a_x^q + b_q` (q = 1, 2, 3) and the
//! least-squares moment loss with its analytic gradient.
//!
//! # Noise bias
//!
//! Write the measurement as `y = s + ε` with `ε` i.i.d. `N(0, σ²)` and `s`
//! the planted copies. Expanding the empirical sums and taking expectations
//! over `ε` (odd Gaussian moments vanish):
//!
//! ```text
//! E a_y^1           = a_s^1
//! E a_y^2[l]        = a_s^2[l] + σ² [l = 0]
//! E a_y^3[l1, l2]   = a_s^3[l1, l2]
//!                   + σ² a_s^1 ([l1 = 0] + [l2 = 0] + [l1 = l2])
//! ```
//!
//! The cross terms `s_i E[ε_j ε_k]` pick up `σ² Σ s` once per coinciding
//! index pair. Every copy is surrounded by an empty border at least `L`
//! wide, so no shifted index leaves the frame while touching signal, and
//! the form is exact, not only asymptotic. `a_s^1` is estimated by the
//! measurement mean `a_y^1`.

use crate::autocorr::{autocorr_gradient, autocorr_image, AutocorrSet};
use crate::error::{MtdError, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Expected noise contribution to each empirical autocorrelation.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasTerms<T> {
    pub b1: T,
    pub b2: Vec<T>,
    pub b3: Vec<T>,
}

impl<T: Scalar> BiasTerms<T> {
    pub fn zeros(l: usize) -> Self {
        let s = l * l;
        Self {
            b1: T::zero(),
            b2: vec![T::zero(); s],
            b3: vec![T::zero(); s * s],
        }
    }
}

/// Bias terms for noise variance `sigma2`, given the measurement mean `a_y1`.
pub fn derive_bias<T: Scalar>(sigma2: T, a_y1: T, l: usize) -> BiasTerms<T> {
    let mut bias = BiasTerms::zeros(l);
    if sigma2 == T::zero() {
        return bias;
    }
    let s = l * l;
    bias.b2[0] = sigma2;
    let unit = sigma2 * a_y1;
    for k1 in 0..s {
        for k2 in 0..s {
            let hits = (k1 == 0) as u8 + (k2 == 0) as u8 + (k1 == k2) as u8;
            if hits > 0 {
                bias.b3[k1 * s + k2] = unit * T::lit(hits as f64);
            }
        }
    }
    bias
}

/// `r_q = a_y^q - γ a_x^q - b_q` for every equation.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentResiduals<T> {
    pub r1: T,
    pub r2: Vec<T>,
    pub r3: Vec<T>,
}

impl<T: Scalar> MomentResiduals<T> {
    pub fn sum_sq(&self) -> T {
        self.r1 * self.r1
            + self.r2.iter().map(|&v| v * v).sum::<T>()
            + self.r3.iter().map(|&v| v * v).sum::<T>()
    }
}

/// A differentiable data term over square images of a fixed side.
pub trait Objective<T: Scalar> {
    /// Side of the images the objective is defined on.
    fn side(&self) -> usize;
    fn loss(&self, x: &Image<T>) -> Result<T>;
    fn gradient(&self, x: &Image<T>) -> Result<Image<T>>;
}

/// The moment equations for one measurement set.
#[derive(Clone, Debug)]
pub struct MomentSystem<T> {
    l: usize,
    gamma: T,
    sigma2: T,
    a_y: AutocorrSet<T>,
    bias: BiasTerms<T>,
}

impl<T: Scalar> MomentSystem<T> {
    /// Builds the system; bias terms are derived from `sigma2` and `a_y.a1`.
    pub fn new(a_y: AutocorrSet<T>, gamma: T, sigma2: T) -> Result<Self> {
        a_y.check_shape()?;
        if !(gamma > T::zero() && gamma <= T::lit(crate::forward::GAMMA_MAX)) {
            return Err(MtdError::Config(format!(
                "density γ = {gamma} outside (0, {}]",
                crate::forward::GAMMA_MAX
            )));
        }
        if !(sigma2 >= T::zero()) || !sigma2.is_finite() {
            return Err(MtdError::Config(format!("invalid noise variance {sigma2}")));
        }
        let bias = derive_bias(sigma2, a_y.a1, a_y.l);
        Ok(Self {
            l: a_y.l,
            gamma,
            sigma2,
            a_y,
            bias,
        })
    }

    /// Noise-free system built from the population moments of `x`.
    pub fn from_population(x: &Image<T>, gamma: T) -> Result<Self> {
        let l = x.side()?;
        Self::new(autocorr_image(x, l)?.scaled(gamma), gamma, T::zero())
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn sigma2(&self) -> T {
        self.sigma2
    }

    pub fn measured(&self) -> &AutocorrSet<T> {
        &self.a_y
    }

    pub fn bias(&self) -> &BiasTerms<T> {
        &self.bias
    }

    fn check_side(&self, x: &Image<T>) -> Result<()> {
        let n = x.side()?;
        if n != self.l {
            return Err(MtdError::shape(format!(
                "estimate is {n}x{n}, moment system expects {0}x{0}",
                self.l
            )));
        }
        Ok(())
    }

    pub fn residuals(&self, x: &Image<T>) -> Result<MomentResiduals<T>> {
        self.check_side(x)?;
        let a_x = autocorr_image(x, self.l)?;
        let g = self.gamma;
        let r = |y: T, a: T, b: T| y - g * a - b;
        Ok(MomentResiduals {
            r1: r(self.a_y.a1, a_x.a1, self.bias.b1),
            r2: (0..a_x.a2.len())
                .map(|k| r(self.a_y.a2[k], a_x.a2[k], self.bias.b2[k]))
                .collect(),
            r3: (0..a_x.a3.len())
                .map(|k| r(self.a_y.a3[k], a_x.a3[k], self.bias.b3[k]))
                .collect(),
        })
    }

    /// Sum of squared residuals over all orders and shifts, equally weighted.
    pub fn loss(&self, x: &Image<T>) -> Result<T> {
        Ok(self.residuals(x)?.sum_sq())
    }

    /// Exact gradient of [`MomentSystem::loss`]: the autocorrelation adjoint
    /// applied to the weights `-2γ r_q`.
    pub fn loss_gradient(&self, x: &Image<T>) -> Result<Image<T>> {
        Ok(self.loss_and_gradient(x)?.1)
    }

    pub fn loss_and_gradient(&self, x: &Image<T>) -> Result<(T, Image<T>)> {
        let r = self.residuals(x)?;
        let c = T::lit(-2.0) * self.gamma;
        let weights = AutocorrSet {
            l: self.l,
            a1: c * r.r1,
            a2: r.r2.iter().map(|&v| c * v).collect(),
            a3: r.r3.iter().map(|&v| c * v).collect(),
            norm_area: 1.0,
        };
        Ok((r.sum_sq(), autocorr_gradient(x, &weights)?))
    }
}

impl<T: Scalar> Objective<T> for MomentSystem<T> {
    fn side(&self) -> usize {
        self.l
    }

    fn loss(&self, x: &Image<T>) -> Result<T> {
        MomentSystem::loss(self, x)
    }

    fn gradient(&self, x: &Image<T>) -> Result<Image<T>> {
        self.loss_gradient(x)
    }
}
