//! Score fields `s(x) ≈ ∇_x log p(x)` used as priors during recovery.

use std::fs;
use std::path::Path;

use crate::error::{MtdError, Result};
use crate::image::Image;
use crate::scalar::{cast, Scalar};

/// Anything that evaluates a score field on square images of one side.
pub trait Score<T: Scalar> {
    fn side(&self) -> usize;
    fn score(&self, x: &Image<T>) -> Result<Image<T>>;
}

fn check_side<T: Scalar>(x: &Image<T>, side: usize) -> Result<()> {
    let n = x.side()?;
    if n != side {
        return Err(MtdError::shape(format!(
            "prior defined on {side}x{side} images, got {n}x{n}"
        )));
    }
    Ok(())
}

/// Independent Gaussian pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior<T> {
    pub mean: Image<T>,
    /// Per-pixel variance, same layout as `mean`.
    pub variance: Vec<T>,
}

impl<T: Scalar> GaussianPrior<T> {
    pub fn new(mean: Image<T>, variance: Vec<T>) -> Result<Self> {
        mean.side()?;
        if variance.len() != mean.data().len() {
            return Err(MtdError::shape("variance does not match the mean image"));
        }
        if variance.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(MtdError::Config("Gaussian variance must be positive".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn isotropic(mean: Image<T>, variance: T) -> Result<Self> {
        let len = mean.data().len();
        Self::new(mean, vec![variance; len])
    }

    fn score_with_extra_variance(&self, x: &Image<T>, extra: T) -> Result<Image<T>> {
        check_side(x, self.mean.width())?;
        let data = x
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(&self.variance)
            .map(|((&xi, &mi), &vi)| -(xi - mi) / (vi + extra))
            .collect();
        Image::new(x.width(), x.height(), data)
    }
}

impl<T: Scalar> Score<T> for GaussianPrior<T> {
    fn side(&self) -> usize {
        self.mean.width()
    }

    fn score(&self, x: &Image<T>) -> Result<Image<T>> {
        self.score_with_extra_variance(x, T::zero())
    }
}

/// Score of the Gaussian prior after convolving with `N(0, σ_dsm² I)`;
/// variances add. This is what a denoising score matcher trained at level
/// `σ_dsm` converges to on Gaussian data.
pub fn gaussian_dsm_consistency<T: Scalar>(
    prior: &GaussianPrior<T>,
    sigma_dsm: T,
    x: &Image<T>,
) -> Result<Image<T>> {
    if !(sigma_dsm >= T::zero()) {
        return Err(MtdError::Config("smoothing level must be >= 0".into()));
    }
    prior.score_with_extra_variance(x, sigma_dsm * sigma_dsm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmComponent<T> {
    pub weight: T,
    pub mean: Image<T>,
    /// Isotropic variance.
    pub variance: T,
}

/// Three-component test mixture on `side × side` images: a centred disc, a
/// horizontal band and a diagonal band, each drawn at levels 0.2/0.8 with
/// equal weights and isotropic pixel variance `variance`.
pub fn pattern_mixture<T: Scalar>(side: usize, variance: T) -> Result<GmmPrior<T>> {
    if side == 0 {
        return Err(MtdError::shape("pattern side must be positive"));
    }
    let (lo, hi) = (T::lit(0.2), T::lit(0.8));
    let level = |on: bool| if on { hi } else { lo };
    let c = (side as f64 - 1.0) / 2.0;
    let disc = Image::from_fn(side, side, |r, k| {
        let d = ((r as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
        level(d < side as f64 / 3.0)
    });
    let band = Image::from_fn(side, side, |r, _| level(r >= side / 3 && r < side - side / 3));
    let diagonal = Image::from_fn(side, side, |r, k| level(r.abs_diff(k) <= 1));
    let w = T::one() / T::lit(3.0);
    GmmPrior::new(
        [disc, band, diagonal]
            .into_iter()
            .map(|mean| GmmComponent {
                weight: w,
                mean,
                variance,
            })
            .collect(),
    )
}

/// Mixture of isotropic Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior<T> {
    components: Vec<GmmComponent<T>>,
    side: usize,
}

impl<T: Scalar> GmmPrior<T> {
    pub fn new(components: Vec<GmmComponent<T>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| MtdError::Config("mixture needs at least one component".into()))?;
        let side = first.mean.side()?;
        let mut total = T::zero();
        for c in &components {
            if c.mean.side()? != side {
                return Err(MtdError::shape("mixture components differ in size"));
            }
            if !(c.weight > T::zero()) || !(c.variance > T::zero()) {
                return Err(MtdError::Config(
                    "mixture weights and variances must be positive".into(),
                ));
            }
            total += c.weight;
        }
        if (total - T::one()).abs() > T::lit(1e-6) {
            return Err(MtdError::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(Self { components, side })
    }

    pub fn components(&self) -> &[GmmComponent<T>] {
        &self.components
    }

    /// Draws one image: a component by weight, then isotropic Gaussian pixels.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Image<T> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("non-empty mixture");
        for c in &self.components {
            acc += c.weight.to_f64_lossy();
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.to_f64_lossy().sqrt();
        chosen.mean.map(|m| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            m + T::lit(sd * z)
        })
    }

    /// Unnormalized-free log density terms `log w_k + log N(x; μ_k, v_k I)`.
    fn log_terms(&self, x: &Image<T>) -> Vec<T> {
        let d = T::lit(x.data().len() as f64);
        let two_pi = T::lit(2.0) * T::PI();
        self.components
            .iter()
            .map(|c| {
                let dist2: T = x
                    .data()
                    .iter()
                    .zip(c.mean.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                c.weight.ln()
                    - dist2 / (T::lit(2.0) * c.variance)
                    - T::lit(0.5) * d * (two_pi * c.variance).ln()
            })
            .collect()
    }

    pub fn log_density(&self, x: &Image<T>) -> Result<T> {
        check_side(x, self.side)?;
        let terms = self.log_terms(x);
        let m = terms.iter().copied().fold(T::neg_infinity(), T::max);
        Ok(m + terms.iter().map(|&t| (t - m).exp()).sum::<T>().ln())
    }

    /// Posterior component probabilities at `x`, via log-sum-exp.
    pub fn responsibilities(&self, x: &Image<T>) -> Result<Vec<T>> {
        check_side(x, self.side)?;
        let terms = self.log_terms(x);
        let m = terms.iter().copied().fold(T::neg_infinity(), T::max);
        let w: Vec<T> = terms.iter().map(|&t| (t - m).exp()).collect();
        let total: T = w.iter().copied().sum();
        Ok(w.into_iter().map(|v| v / total).collect())
    }
}

impl<T: Scalar> Score<T> for GmmPrior<T> {
    fn side(&self) -> usize {
        self.side
    }

    fn score(&self, x: &Image<T>) -> Result<Image<T>> {
        let resp = self.responsibilities(x)?;
        let mut out = vec![T::zero(); x.data().len()];
        for (c, r) in self.components.iter().zip(resp) {
            let k = r / c.variance;
            for ((o, &xi), &mi) in out.iter_mut().zip(x.data()).zip(c.mean.data()) {
                *o -= k * (xi - mi);
            }
        }
        Image::new(x.width(), x.height(), out)
    }
}

/// One layer of a score network. Weights are stored as f32, as in the file.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Cross-correlation with zero "same" padding; weights `(out, in, k, k)`.
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    /// Fully connected on the channel-major flattened activation; weights `(out, in)`.
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Elu,
    Softplus,
}

const NET_MAGIC: &[u8; 9] = b"SCORENET1";
const NET_VERSION: u32 = 1;

/// A feed-forward score network read from a `SCORENET1` file.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralScoreNet {
    side: usize,
    sigma_dsm: f32,
    layers: Vec<Layer>,
    /// `(input, expected output)` recorded by the exporter.
    test_vector: (Vec<f32>, Vec<f32>),
}

impl NeuralScoreNet {
    /// Builds a network and validates layer shapes. The test vector output is
    /// computed with this forward pass.
    pub fn new(side: usize, sigma_dsm: f32, layers: Vec<Layer>, test_input: Vec<f32>) -> Result<Self> {
        if test_input.len() != side * side {
            return Err(MtdError::shape("test input must be L×L"));
        }
        let mut net = Self {
            side,
            sigma_dsm,
            layers,
            test_vector: (test_input, Vec::new()),
        };
        net.validate()?;
        let input: Vec<f64> = net.test_vector.0.iter().map(|&v| v as f64).collect();
        net.test_vector.1 = net.forward(&input)?.into_iter().map(|v| v as f32).collect();
        Ok(net)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn sigma_dsm(&self) -> f32 {
        self.sigma_dsm
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn test_vector(&self) -> (&[f32], &[f32]) {
        (&self.test_vector.0, &self.test_vector.1)
    }

    /// Channel count flowing out of every layer; the input has one channel.
    fn validate(&self) -> Result<()> {
        let px = self.side * self.side;
        if px == 0 {
            return Err(MtdError::shape("network side must be >= 1"));
        }
        let mut ch = 1usize;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    k,
                    weights,
                    bias,
                } => {
                    if *in_ch != ch {
                        return Err(MtdError::shape(format!(
                            "layer {i}: conv expects {in_ch} channels, receives {ch}"
                        )));
                    }
                    if *k == 0 || k % 2 == 0 {
                        return Err(MtdError::shape(format!(
                            "layer {i}: kernel size {k} must be odd"
                        )));
                    }
                    if weights.len() != out_ch * in_ch * k * k || bias.len() != *out_ch {
                        return Err(MtdError::shape(format!(
                            "layer {i}: conv parameter count mismatch"
                        )));
                    }
                    ch = *out_ch;
                }
                Layer::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => {
                    if *inputs != ch * px {
                        return Err(MtdError::shape(format!(
                            "layer {i}: dense expects {inputs} inputs, receives {}",
                            ch * px
                        )));
                    }
                    if outputs % px != 0 {
                        return Err(MtdError::shape(format!(
                            "layer {i}: dense output {outputs} is not a whole number of L×L channels"
                        )));
                    }
                    if weights.len() != inputs * outputs || bias.len() != *outputs {
                        return Err(MtdError::shape(format!(
                            "layer {i}: dense parameter count mismatch"
                        )));
                    }
                    ch = outputs / px;
                }
                Layer::Elu | Layer::Softplus => {}
            }
        }
        if ch != 1 {
            return Err(MtdError::shape(format!(
                "network emits {ch} channels, expected 1"
            )));
        }
        Ok(())
    }

    /// Forward pass on a row-major `L×L` input, accumulated in f64.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (n, px) = (self.side, self.side * self.side);
        if input.len() != px {
            return Err(MtdError::shape("network input must be L×L"));
        }
        let mut act = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            act = match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    k,
                    weights,
                    bias,
                } => conv_same(&act, n, *in_ch, *out_ch, *k, weights, bias),
                Layer::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => (0..*outputs)
                    .map(|o| {
                        let row = &weights[o * inputs..(o + 1) * inputs];
                        bias[o] as f64
                            + row
                                .iter()
                                .zip(&act)
                                .map(|(&w, &a)| w as f64 * a)
                                .sum::<f64>()
                    })
                    .collect(),
                Layer::Elu => act
                    .into_iter()
                    .map(|v| if v > 0.0 { v } else { v.exp_m1() })
                    .collect(),
                Layer::Softplus => act
                    .into_iter()
                    .map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p())
                    .collect(),
            };
            if act.iter().any(|v| !v.is_finite()) {
                return Err(MtdError::Numeric(format!(
                    "non-finite activation after layer {li}; weights may be corrupt"
                )));
            }
        }
        Ok(act)
    }

    /// Largest deviation between the recorded test output and this forward pass.
    pub fn parity_error(&self) -> Result<f64> {
        let input: Vec<f64> = self.test_vector.0.iter().map(|&v| v as f64).collect();
        let out = self.forward(&input)?;
        Ok(out
            .iter()
            .zip(&self.test_vector.1)
            .map(|(a, &b)| (a - b as f64).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(NET_MAGIC);
        b.extend_from_slice(&NET_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.side as u32).to_le_bytes());
        b.extend_from_slice(&self.sigma_dsm.to_le_bytes());
        b.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        let put_f32s = |b: &mut Vec<u8>, v: &[f32]| {
            for x in v {
                b.extend_from_slice(&x.to_le_bytes());
            }
        };
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    in_ch,
                    out_ch,
                    k,
                    weights,
                    bias,
                } => {
                    b.push(0);
                    for d in [in_ch, out_ch, k] {
                        b.extend_from_slice(&(*d as u32).to_le_bytes());
                    }
                    put_f32s(&mut b, weights);
                    put_f32s(&mut b, bias);
                }
                Layer::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => {
                    b.push(1);
                    for d in [inputs, outputs] {
                        b.extend_from_slice(&(*d as u32).to_le_bytes());
                    }
                    put_f32s(&mut b, weights);
                    put_f32s(&mut b, bias);
                }
                Layer::Elu => b.push(2),
                Layer::Softplus => b.push(3),
            }
        }
        put_f32s(&mut b, &self.test_vector.0);
        put_f32s(&mut b, &self.test_vector.1);
        b
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_scorenet(&fs::read(path)?)
    }
}

fn conv_same(
    input: &[f64],
    n: usize,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    weights: &[f32],
    bias: &[f32],
) -> Vec<f64> {
    let px = n * n;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; out_ch * px];
    for o in 0..out_ch {
        let plane = &mut out[o * px..(o + 1) * px];
        plane.fill(bias[o] as f64);
        for i in 0..in_ch {
            let src = &input[i * px..(i + 1) * px];
            for u in 0..k {
                for v in 0..k {
                    let w = weights[((o * in_ch + i) * k + u) * k + v] as f64;
                    if w == 0.0 {
                        continue;
                    }
                    let (du, dv) = (u as isize - pad, v as isize - pad);
                    for r in 0..n {
                        let sr = r as isize + du;
                        if sr < 0 || sr >= n as isize {
                            continue;
                        }
                        let c_lo = (-dv).max(0) as usize;
                        let c_hi = (n as isize - dv).min(n as isize) as usize;
                        let srow = &src[sr as usize * n..(sr as usize + 1) * n];
                        let drow = &mut plane[r * n..(r + 1) * n];
                        for c in c_lo..c_hi {
                            drow[c] += w * srow[(c as isize + dv) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MtdError::format(format!(
                "SCORENET1 file truncated at byte {} (needed {n} more)",
                self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| {
            MtdError::format("SCORENET1 layer size overflows")
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn product(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| MtdError::format("SCORENET1 layer size overflows"))
}

/// Parses a `SCORENET1` byte stream. Fails without returning a partial network.
pub fn load_scorenet(bytes: &[u8]) -> Result<NeuralScoreNet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(NET_MAGIC.len())? != NET_MAGIC {
        return Err(MtdError::format("missing SCORENET1 magic"));
    }
    let version = cur.u32()?;
    if version != NET_VERSION as usize {
        return Err(MtdError::format(format!(
            "unsupported SCORENET1 version {version}"
        )));
    }
    let side = cur.u32()?;
    let sigma_dsm = cur.f32()?;
    let count = cur.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match cur.u8()? {
            0 => {
                let (in_ch, out_ch, k) = (cur.u32()?, cur.u32()?, cur.u32()?);
                let weights = cur.f32s(product(&[out_ch, in_ch, k, k])?)?;
                let bias = cur.f32s(out_ch)?;
                Layer::Conv {
                    in_ch,
                    out_ch,
                    k,
                    weights,
                    bias,
                }
            }
            1 => {
                let (inputs, outputs) = (cur.u32()?, cur.u32()?);
                let weights = cur.f32s(product(&[inputs, outputs])?)?;
                let bias = cur.f32s(outputs)?;
                Layer::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                }
            }
            2 => Layer::Elu,
            3 => Layer::Softplus,
            other => {
                return Err(MtdError::format(format!("unknown layer kind {other}")))
            }
        };
        layers.push(layer);
    }
    let pixels = product(&[side, side])?;
    let input = cur.f32s(pixels)?;
    let expected = cur.f32s(pixels)?;
    if cur.pos != bytes.len() {
        return Err(MtdError::format(format!(
            "{} trailing bytes after the test vector",
            bytes.len() - cur.pos
        )));
    }
    let net = NeuralScoreNet {
        side,
        sigma_dsm,
        layers,
        test_vector: (input, expected),
    };
    net.validate()?;
    Ok(net)
}

/// The priors the recovery loop can use.
#[derive(Clone, Debug)]
pub enum ScoreProvider<T> {
    /// No prior: the score is identically zero.
    Zero { side: usize },
    Gaussian(GaussianPrior<T>),
    Gmm(GmmPrior<T>),
    Neural(NeuralScoreNet),
}

impl<T: Scalar> ScoreProvider<T> {
    pub fn zero(side: usize) -> Self {
        ScoreProvider::Zero { side }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScoreProvider::Zero { .. } => "zero",
            ScoreProvider::Gaussian(_) => "gaussian",
            ScoreProvider::Gmm(_) => "gmm",
            ScoreProvider::Neural(_) => "neural",
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScoreProvider::Zero { .. })
    }
}

impl<T: Scalar> Score<T> for ScoreProvider<T> {
    fn side(&self) -> usize {
        match self {
            ScoreProvider::Zero { side } => *side,
            ScoreProvider::Gaussian(p) => p.side(),
            ScoreProvider::Gmm(p) => p.side(),
            ScoreProvider::Neural(net) => net.side(),
        }
    }

    fn score(&self, x: &Image<T>) -> Result<Image<T>> {
        match self {
            ScoreProvider::Zero { side } => {
                check_side(x, *side)?;
                Ok(Image::zeros(*side, *side))
            }
            ScoreProvider::Gaussian(p) => p.score(x),
            ScoreProvider::Gmm(p) => p.score(x),
            ScoreProvider::Neural(net) => {
                check_side(x, net.side())?;
                let input: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
                let out = net.forward(&input)?;
                Image::square(net.side(), out.into_iter().map(cast).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image<f64> {
        Image::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn reference_net(rng: &mut ChaCha8Rng, side: usize, width: usize) -> NeuralScoreNet {
        let mut conv = |i: usize, o: usize| Layer::Conv {
            in_ch: i,
            out_ch: o,
            k: 3,
            weights: (0..o * i * 9).map(|_| rng.random_range(-0.3..0.3)).collect(),
            bias: (0..o).map(|_| rng.random_range(-0.1..0.1)).collect(),
        };
        let layers = vec![
            conv(1, width),
            Layer::Elu,
            conv(width, width),
            Layer::Elu,
            conv(width, width),
            Layer::Elu,
            conv(width, 1),
        ];
        let input = (0..side * side).map(|i| (i % 7) as f32 / 7.0).collect();
        NeuralScoreNet::new(side, 0.1, layers, input).unwrap()
    }

    #[test]
    fn gaussian_score_vanishes_at_mean_and_is_minus_x_for_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu = random_image(&mut rng, 4);
        let p = GaussianPrior::isotropic(mu.clone(), 0.3).unwrap();
        assert!(p.score(&mu).unwrap().data().iter().all(|&v| v == 0.0));
        let std = GaussianPrior::isotropic(Image::zeros(4, 4), 1.0).unwrap();
        let x = random_image(&mut rng, 4);
        assert_eq!(std.score(&x).unwrap(), x.scaled(-1.0));
    }

    #[test]
    fn single_component_mixture_is_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu = random_image(&mut rng, 5);
        let g = GaussianPrior::isotropic(mu.clone(), 0.2).unwrap();
        let m = GmmPrior::new(vec![GmmComponent {
            weight: 1.0,
            mean: mu,
            variance: 0.2,
        }])
        .unwrap();
        let x = random_image(&mut rng, 5);
        let (a, b) = (g.score(&x).unwrap(), m.score(&x).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_validation() {
        let mu = Image::<f64>::zeros(2, 2);
        let comp = |w, v| GmmComponent {
            weight: w,
            mean: mu.clone(),
            variance: v,
        };
        assert!(GmmPrior::new(vec![comp(0.5, 1.0)]).is_err());
        assert!(GmmPrior::new(vec![comp(1.0, 0.0)]).is_err());
        assert!(GmmPrior::<f64>::new(Vec::new()).is_err());
        assert!(GmmPrior::new(vec![comp(0.25, 1.0), comp(0.75, 2.0)]).is_ok());
    }

    #[test]
    fn dsm_consistency_adds_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GaussianPrior::isotropic(Image::zeros(3, 3), 1.0).unwrap();
        let x = random_image(&mut rng, 3);
        assert_eq!(
            gaussian_dsm_consistency(&p, 0.0, &x).unwrap(),
            p.score(&x).unwrap()
        );
        let half = gaussian_dsm_consistency(&p, 1.0, &x).unwrap();
        for (h, xi) in half.data().iter().zip(x.data()) {
            assert!((h + xi / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_network() {
        let net = NeuralScoreNet::new(
            3,
            0.1,
            vec![Layer::Conv {
                in_ch: 1,
                out_ch: 1,
                k: 1,
                weights: vec![1.0],
                bias: vec![0.0],
            }],
            vec![0.5; 9],
        )
        .unwrap();
        let p = ScoreProvider::Neural(net);
        let x = Image::from_fn(3, 3, |r, c| (r * 3 + c) as f64 - 4.0);
        assert_eq!(p.score(&x).unwrap(), x);
    }

    /// Conv against a direct definition with explicit bounds checks.
    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, ci, co, k) = (5, 2, 3, 3);
        let input: Vec<f64> = (0..ci * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv_same(&input, n, ci, co, k, &w, &b);
        for o in 0..co {
            for r in 0..n as isize {
                for c in 0..n as isize {
                    let mut acc = b[o] as f64;
                    for i in 0..ci {
                        for u in 0..k as isize {
                            for v in 0..k as isize {
                                let (sr, sc) = (r + u - 1, c + v - 1);
                                if (0..n as isize).contains(&sr) && (0..n as isize).contains(&sc)
                                {
                                    acc += w[((o * ci + i) * k + u as usize) * k + v as usize]
                                        as f64
                                        * input[i * n * n + (sr as usize) * n + sc as usize];
                                }
                            }
                        }
                    }
                    let got = fast[o * n * n + (r as usize) * n + c as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn save_load_is_bitwise_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = reference_net(&mut rng, 6, 4);
        let bytes = net.to_bytes();
        let back = load_scorenet(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.parity_error().unwrap(), net.parity_error().unwrap());
        assert!(back.parity_error().unwrap() < 1e-5);
        let x = random_image(&mut rng, 6);
        let a = ScoreProvider::<f64>::Neural(net).score(&x).unwrap();
        let b = ScoreProvider::<f64>::Neural(back).score(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_size_follows_format() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (side, width) = (4, 3);
        let net = reference_net(&mut rng, side, width);
        let header = 9 + 4 + 4 + 4 + 4;
        let conv = |i: usize, o: usize| 1 + 12 + 4 * (o * i * 9 + o);
        let layers = conv(1, width) + conv(width, width) * 2 + conv(width, 1) + 3;
        let tv = 2 * 4 * side * side;
        assert_eq!(net.to_bytes().len(), header + layers + tv);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bytes = reference_net(&mut rng, 4, 2).to_bytes();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                load_scorenet(&bytes[..cut]),
                Err(MtdError::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_scorenet(&bad), Err(MtdError::Format(_))));
        let mut ver = bytes.clone();
        ver[9] = 2;
        assert!(matches!(load_scorenet(&ver), Err(MtdError::Format(_))));
        // Second conv declares 3 input channels while the first emits 2.
        let mut shape = bytes.clone();
        let second_conv = 25 + (1 + 12 + 4 * (2 * 9 + 2));
        shape[second_conv + 1] = 3;
        assert!(load_scorenet(&shape).is_err());
    }

    #[test]
    fn corrupt_weights_raise_numeric_error() {
        let net = NeuralScoreNet::new(
            2,
            0.1,
            vec![Layer::Conv {
                in_ch: 1,
                out_ch: 1,
                k: 1,
                weights: vec![f32::MAX],
                bias: vec![0.0],
            }],
            vec![0.0; 4],
        )
        .unwrap();
        let p = ScoreProvider::<f64>::Neural(net);
        let x = Image::filled(2, 2, 1e300);
        assert!(matches!(p.score(&x), Err(MtdError::Numeric(_))));
    }

    #[test]
    fn zero_provider() {
        let p = ScoreProvider::<f32>::zero(3);
        let x = Image::filled(3, 3, 2.0f32);
        assert!(p.score(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.score(&Image::zeros(4, 4)).is_err());
    }

    proptest! {
        #[test]
        fn gmm_score_is_gradient_of_log_density(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let comps = (0..3)
                .map(|_| GmmComponent {
                    weight: 1.0 / 3.0,
                    mean: random_image(&mut rng, 3),
                    variance: rng.random_range(0.2..1.0),
                })
                .collect();
            let gmm = GmmPrior::new(comps).unwrap();
            let x = random_image(&mut rng, 3);
            let s = gmm.score(&x).unwrap();
            let h = 1e-5;
            for i in 0..9 {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                let fd = (gmm.log_density(&p).unwrap() - gmm.log_density(&m).unwrap()) / (2.0 * h);
                prop_assert!((fd - s.data()[i]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
