//! Autocorrelations up to third order over the non-negative shift square
//! `{0..L-1}²`, for small images and for (possibly streamed) measurements.
//!
//! For a frame `z` of side `n` and shifts `l1, l2`:
//!
//! ```text
//! a1         = (1/n²) Σ_i z[i]
//! a2[l1]     = (1/n²) Σ_i z[i] z[i+l1]
//! a3[l1, l2] = (1/n²) Σ_i z[i] z[i+l1] z[i+l2]
//! ```
//!
//! with `z` zero outside the frame. Shifts are flattened as `k = dr * L + dc`
//! and `a3` is stored densely as `a3[k1 * L² + k2]`. Only the `k2 >= k1`
//! half is accumulated; the other half is mirrored, so exchange symmetry is
//! exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{MtdError, Result};
use crate::image::Image;
use crate::scalar::{cast, Scalar};

/// The autocorrelation triple `(a1, a2, a3)` of one frame or measurement set.
#[derive(Clone, Debug, PartialEq)]
pub struct AutocorrSet<T> {
    /// Side of the shift square.
    pub l: usize,
    pub a1: T,
    /// `L²` entries, indexed by flattened shift.
    pub a2: Vec<T>,
    /// `L⁴` entries, `a3[k1 * L² + k2]`.
    pub a3: Vec<T>,
    /// Number of pixels the sums were divided by.
    pub norm_area: f64,
}

impl<T: Scalar> AutocorrSet<T> {
    pub fn zeros(l: usize) -> Self {
        let s = l * l;
        Self {
            l,
            a1: T::zero(),
            a2: vec![T::zero(); s],
            a3: vec![T::zero(); s * s],
            norm_area: 1.0,
        }
    }

    /// Number of distinct shifts, `L²`.
    #[inline]
    pub fn shifts(&self) -> usize {
        self.l * self.l
    }

    #[inline]
    pub fn shift_index(&self, dr: usize, dc: usize) -> usize {
        dr * self.l + dc
    }

    #[inline]
    pub fn third(&self, k1: usize, k2: usize) -> T {
        self.a3[k1 * self.shifts() + k2]
    }

    pub fn check_shape(&self) -> Result<()> {
        let s = self.shifts();
        if self.a2.len() != s || self.a3.len() != s * s {
            return Err(MtdError::shape(format!(
                "autocorrelation arrays do not match L = {}",
                self.l
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.a1.is_finite()
            && self.a2.iter().all(|v| v.is_finite())
            && self.a3.iter().all(|v| v.is_finite())
    }

    /// Largest `|a3[k1,k2] - a3[k2,k1]|`.
    pub fn symmetry_defect(&self) -> T {
        let s = self.shifts();
        let mut worst = T::zero();
        for k1 in 0..s {
            for k2 in k1 + 1..s {
                worst = worst.max((self.third(k1, k2) - self.third(k2, k1)).abs());
            }
        }
        worst
    }

    /// Scales the q-th order entries by `factor` (same factor for every order).
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            l: self.l,
            a1: self.a1 * factor,
            a2: self.a2.iter().map(|&v| v * factor).collect(),
            a3: self.a3.iter().map(|&v| v * factor).collect(),
            norm_area: self.norm_area,
        }
    }

    pub fn cast<U: Scalar>(&self) -> AutocorrSet<U> {
        AutocorrSet {
            l: self.l,
            a1: cast(self.a1),
            a2: self.a2.iter().map(|&v| cast(v)).collect(),
            a3: self.a3.iter().map(|&v| cast(v)).collect(),
            norm_area: self.norm_area,
        }
    }

    /// Largest absolute entry-wise difference over all three orders.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.l != other.l {
            return Err(MtdError::shape("autocorrelation sets of different L"));
        }
        let mut worst = (self.a1 - other.a1).abs();
        for (a, b) in self.a2.iter().zip(&other.a2) {
            worst = worst.max((*a - *b).abs());
        }
        for (a, b) in self.a3.iter().zip(&other.a3) {
            worst = worst.max((*a - *b).abs());
        }
        Ok(worst)
    }
}

/// Raw (unnormalized) product sums; the accumulation state of the engine.
#[derive(Clone, Debug)]
pub(crate) struct ProductSums<S> {
    l: usize,
    s1: S,
    s2: Vec<S>,
    /// Upper half (`k2 >= k1`) only.
    s3: Vec<S>,
}

impl<S: Scalar> ProductSums<S> {
    pub(crate) fn new(l: usize) -> Self {
        let s = l * l;
        Self {
            l,
            s1: S::zero(),
            s2: vec![S::zero(); s],
            s3: vec![S::zero(); s * s],
        }
    }

    pub(crate) fn merge(&mut self, other: &Self) {
        self.s1 += other.s1;
        for (a, b) in self.s2.iter_mut().zip(&other.s2) {
            *a += *b;
        }
        for (a, b) in self.s3.iter_mut().zip(&other.s3) {
            *a += *b;
        }
    }

    pub(crate) fn finish<T: Scalar>(&self, norm_area: f64) -> AutocorrSet<T> {
        let s = self.l * self.l;
        let inv = S::lit(1.0 / norm_area);
        let mut a3 = vec![T::zero(); s * s];
        for k1 in 0..s {
            for k2 in k1..s {
                let v: T = cast(self.s3[k1 * s + k2] * inv);
                a3[k1 * s + k2] = v;
                a3[k2 * s + k1] = v;
            }
        }
        AutocorrSet {
            l: self.l,
            a1: cast(self.s1 * inv),
            a2: self.s2.iter().map(|&v| cast(v * inv)).collect(),
            a3,
            norm_area,
        }
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [S::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = S::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Accumulates product sums for anchors in rows `0..anchor_rows` of `buf`.
///
/// `buf` holds `rows_avail` frame rows of width `cols`; rows past
/// `rows_avail` lie outside the frame (zero).
pub(crate) fn accumulate<S: Scalar>(
    buf: &[S],
    cols: usize,
    rows_avail: usize,
    anchor_rows: usize,
    acc: &mut ProductSums<S>,
) {
    let l = acc.l;
    let s = l * l;
    let mut prod = vec![S::zero(); cols];
    let row = |r: usize| &buf[r * cols..(r + 1) * cols];
    for a in 0..anchor_rows.min(rows_avail) {
        let r0 = row(a);
        acc.s1 += r0.iter().copied().sum::<S>();
        for k1 in 0..s {
            let (dr1, dc1) = (k1 / l, k1 % l);
            if a + dr1 >= rows_avail || dc1 >= cols {
                continue;
            }
            let r1 = &row(a + dr1)[dc1..];
            let len1 = cols - dc1;
            for c in 0..len1 {
                prod[c] = r0[c] * r1[c];
            }
            acc.s2[k1] += prod[..len1].iter().copied().sum::<S>();
            let base = k1 * s;
            for k2 in k1..s {
                let (dr2, dc2) = (k2 / l, k2 % l);
                if a + dr2 >= rows_avail || dc2 >= cols {
                    continue;
                }
                let len = cols - dc1.max(dc2);
                acc.s3[base + k2] += dot(&prod[..len], &row(a + dr2)[dc2..dc2 + len]);
            }
        }
    }
}

/// Autocorrelations of an image (normalized by its own pixel count) over
/// shifts `{0..L-1}²`.
pub fn autocorr_image<T: Scalar>(z: &Image<T>, l: usize) -> Result<AutocorrSet<T>> {
    let n = z.side()?;
    if l == 0 || l > n {
        return Err(MtdError::shape(format!(
            "shift range L = {l} must lie in 1..={n}"
        )));
    }
    let mut acc = ProductSums::new(l);
    accumulate(z.data(), n, n, n, &mut acc);
    Ok(acc.finish((n * n) as f64))
}

/// Applies the adjoint of the autocorrelation linearization at `x`:
/// returns `Σ_q Σ_shifts w_q[..] · ∂a_x^q[..]/∂x`.
pub fn autocorr_gradient<T: Scalar>(x: &Image<T>, weights: &AutocorrSet<T>) -> Result<Image<T>> {
    let n = x.side()?;
    let l = weights.l;
    weights.check_shape()?;
    if l == 0 || l > n {
        return Err(MtdError::shape(format!(
            "weights for L = {l} do not fit a {n}x{n} image"
        )));
    }
    let s = l * l;
    let inv = T::lit(1.0 / (n * n) as f64);
    let xd = x.data();
    let mut g = vec![weights.a1 * inv; n * n];

    // w3 folded onto the upper half, since the products are symmetric in (k1, k2).
    let mut w3 = vec![T::zero(); s * s];
    for k1 in 0..s {
        w3[k1 * s + k1] = weights.a3[k1 * s + k1] * inv;
        for k2 in k1 + 1..s {
            w3[k1 * s + k2] = (weights.a3[k1 * s + k2] + weights.a3[k2 * s + k1]) * inv;
        }
    }

    for k1 in 0..s {
        let (dr1, dc1) = (k1 / l, k1 % l);
        // Second order: ∂/∂x_j Σ_i x_i x_{i+l} = x_{j+l} + x_{j-l}.
        let w2 = weights.a2[k1] * inv;
        if w2 != T::zero() {
            for a in 0..n - dr1 {
                for c in 0..n - dc1 {
                    let i0 = a * n + c;
                    let i1 = (a + dr1) * n + c + dc1;
                    let (v0, v1) = (xd[i0], xd[i1]);
                    g[i0] += w2 * v1;
                    g[i1] += w2 * v0;
                }
            }
        }
        for k2 in k1..s {
            let w = w3[k1 * s + k2];
            if w == T::zero() {
                continue;
            }
            let (dr2, dc2) = (k2 / l, k2 % l);
            let rows = n - dr1.max(dr2);
            let cols = n - dc1.max(dc2);
            for a in 0..rows {
                for c in 0..cols {
                    let i0 = a * n + c;
                    let i1 = (a + dr1) * n + c + dc1;
                    let i2 = (a + dr2) * n + c + dc2;
                    let (v0, v1, v2) = (xd[i0], xd[i1], xd[i2]);
                    g[i0] += w * v1 * v2;
                    g[i1] += w * v0 * v2;
                    g[i2] += w * v0 * v1;
                }
            }
        }
    }
    Image::square(n, g)
}

/// A frame that can be read row block by row block, so measurements larger
/// than memory can be streamed through the engine.
pub trait FrameSource {
    /// Side `N` of the square frame.
    fn side(&self) -> usize;
    /// Fills `out` (a multiple of `N` long) with rows starting at `start`.
    fn read_rows(&mut self, start: usize, out: &mut [f64]) -> Result<()>;
}

/// Strip height for streamed accumulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EngineConfig {
    pub tile_rows: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { tile_rows: 1024 }
    }
}

/// Empirical autocorrelations of a measurement set.
///
/// Every frame is streamed in strips of `cfg.tile_rows` anchor rows plus a
/// halo of `L - 1` rows. Sums from all frames are pooled and divided by the
/// total pixel count, which is the pixel-count weighted average of the
/// per-frame autocorrelations. Strip partials are reduced in strip order, so
/// the result does not depend on the thread count.
pub fn autocorr_measurement<T: Scalar>(
    sources: &mut [&mut dyn FrameSource],
    l: usize,
    cfg: EngineConfig,
) -> Result<AutocorrSet<T>> {
    if sources.is_empty() {
        return Err(MtdError::Config("no measurements given".into()));
    }
    if l == 0 {
        return Err(MtdError::shape("shift range L must be >= 1"));
    }
    if cfg.tile_rows < l {
        return Err(MtdError::Config(format!(
            "tile of {} rows is smaller than L = {l}",
            cfg.tile_rows
        )));
    }
    let batch = rayon::current_num_threads().max(1);
    let mut total = ProductSums::<f64>::new(l);
    let mut area = 0.0;
    for src in sources.iter_mut() {
        let n = src.side();
        if n < 2 * l {
            return Err(MtdError::shape(format!(
                "measurement side {n} is below 2L = {}",
                2 * l
            )));
        }
        area += (n * n) as f64;
        let strips: Vec<usize> = (0..n).step_by(cfg.tile_rows).collect();
        for group in strips.chunks(batch) {
            let mut buffers = Vec::with_capacity(group.len());
            for &start in group {
                let anchors = cfg.tile_rows.min(n - start);
                let avail = (anchors + l - 1).min(n - start);
                let mut buf = vec![0.0; avail * n];
                src.read_rows(start, &mut buf)?;
                buffers.push((buf, avail, anchors));
            }
            let partials: Vec<ProductSums<f64>> = buffers
                .par_iter()
                .map(|(buf, avail, anchors)| {
                    let mut acc = ProductSums::new(l);
                    accumulate(buf, n, *avail, *anchors, &mut acc);
                    acc
                })
                .collect();
            for p in &partials {
                total.merge(p);
            }
        }
    }
    Ok(total.finish(area))
}

/// In-memory frame, mostly for tests and small images.
impl<T: Scalar> FrameSource for Image<T> {
    fn side(&self) -> usize {
        self.width()
    }

    fn read_rows(&mut self, start: usize, out: &mut [f64]) -> Result<()> {
        let n = self.width();
        let begin = start * n;
        let src = self
            .data()
            .get(begin..begin + out.len())
            .ok_or_else(|| MtdError::Bounds("row range outside frame".into()))?;
        for (o, v) in out.iter_mut().zip(src) {
            *o = v.to_f64_lossy();
        }
        Ok(())
    }
}

const AC_MAGIC: &[u8; 6] = b"MTDAC1";

/// Serializes as `MTDAC1`, `L` (u64 LE), then `a1`, `a2`, `a3` as f64 LE.
pub fn write_autocorr<T: Scalar>(set: &AutocorrSet<T>, mut w: impl Write) -> Result<()> {
    set.check_shape()?;
    w.write_all(AC_MAGIC)?;
    w.write_all(&(set.l as u64).to_le_bytes())?;
    w.write_all(&set.a1.to_f64_lossy().to_le_bytes())?;
    for v in set.a2.iter().chain(&set.a3) {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_autocorr<T: Scalar>(mut r: impl Read) -> Result<AutocorrSet<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 14 {
        return Err(MtdError::Length {
            expected: 14,
            found: bytes.len(),
        });
    }
    if &bytes[..6] != AC_MAGIC {
        return Err(MtdError::format("missing MTDAC1 magic"));
    }
    let l = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    if l == 0 || l > 1024 {
        return Err(MtdError::format(format!("implausible shift range L = {l}")));
    }
    let s = l * l;
    let count = 1 + s + s * s;
    let expected = 14 + 8 * count;
    if bytes.len() != expected {
        return Err(MtdError::Length {
            expected,
            found: bytes.len(),
        });
    }
    let vals: Vec<T> = bytes[14..]
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    let set = AutocorrSet {
        l,
        a1: vals[0],
        a2: vals[1..1 + s].to_vec(),
        a3: vals[1 + s..].to_vec(),
        norm_area: f64::NAN,
    };
    if !set.is_finite() {
        return Err(MtdError::format("non-finite autocorrelation entry"));
    }
    Ok(set)
}

pub fn save_autocorr<T: Scalar>(set: &AutocorrSet<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_autocorr(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_autocorr<T: Scalar>(path: impl AsRef<Path>) -> Result<AutocorrSet<T>> {
    read_autocorr(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the defining sums with an explicit zero-padded
    /// reader, independent of the strip engine.
    pub(crate) fn brute_force(z: &[f64], n: usize, l: usize) -> (f64, Vec<f64>, Vec<f64>) {
        let at = |r: usize, c: usize| if r < n && c < n { z[r * n + c] } else { 0.0 };
        let norm = (n * n) as f64;
        let mut a1 = 0.0;
        let mut a2 = vec![0.0; l * l];
        let mut a3 = vec![0.0; l.pow(4)];
        for r in 0..n {
            for c in 0..n {
                a1 += at(r, c);
                for d1r in 0..l {
                    for d1c in 0..l {
                        let p = at(r, c) * at(r + d1r, c + d1c);
                        a2[d1r * l + d1c] += p;
                        for d2r in 0..l {
                            for d2c in 0..l {
                                a3[(d1r * l + d1c) * l * l + d2r * l + d2c] +=
                                    p * at(r + d2r, c + d2c);
                            }
                        }
                    }
                }
            }
        }
        (
            a1 / norm,
            a2.into_iter().map(|v| v / norm).collect(),
            a3.into_iter().map(|v| v / norm).collect(),
        )
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image<f64> {
        Image::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_image() {
        let mut z = Image::<f64>::zeros(2, 2);
        z.set(0, 0, 1.0);
        let a = autocorr_image(&z, 2).unwrap();
        assert_eq!(a.a1, 0.25);
        assert_eq!(a.a2, vec![0.25, 0.0, 0.0, 0.0]);
        assert_eq!(a.a3[0], 0.25);
        assert!(a.a3[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_single_shift() {
        let z = Image::filled(5, 5, 1.0f64);
        let a = autocorr_image(&z, 1).unwrap();
        assert_eq!((a.a1, a.a2[0], a.a3[0]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn random_8x8_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_image(&mut rng, 8);
        for l in [1, 3, 8] {
            let fast = autocorr_image(&z, l).unwrap();
            let (a1, a2, a3) = brute_force(z.data(), 8, l);
            assert!((fast.a1 - a1).abs() < 1e-12);
            for (x, y) in fast.a2.iter().zip(&a2) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in fast.a3.iter().zip(&a3) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn f32_engine_tracks_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_image(&mut rng, 6);
        let a64 = autocorr_image(&z, 4).unwrap();
        let a32 = autocorr_image(&z.cast::<f32>(), 4).unwrap().cast::<f64>();
        assert!(a64.max_abs_diff(&a32).unwrap() < 1e-5);
    }

    #[test]
    fn gradient_of_first_order_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_image(&mut rng, 4);
        let mut w = AutocorrSet::<f64>::zeros(3);
        w.a1 = 2.0;
        let g = autocorr_gradient(&x, &w).unwrap();
        assert!(g.data().iter().all(|&v| (v - 2.0 / 16.0).abs() < 1e-15));
        let zero = autocorr_gradient(&x, &AutocorrSet::zeros(3)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    /// Finite-difference check of the adjoint against `<w, a(x)>`.
    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let x = random_image(&mut rng, n);
        let l = 4;
        let mut w = AutocorrSet::<f64>::zeros(l);
        w.a1 = rng.random_range(-1.0..1.0);
        w.a2.iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        w.a3.iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let pairing = |x: &Image<f64>| {
            let a = autocorr_image(x, l).unwrap();
            a.a1 * w.a1
                + a.a2.iter().zip(&w.a2).map(|(p, q)| p * q).sum::<f64>()
                + a.a3.iter().zip(&w.a3).map(|(p, q)| p * q).sum::<f64>()
        };
        let g = autocorr_gradient(&x, &w).unwrap();
        let h = 1e-5;
        for i in 0..n * n {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (pairing(&plus) - pairing(&minus)) / (2.0 * h);
            assert!(
                (fd - g.data()[i]).abs() <= 1e-7 * (1.0 + fd.abs()),
                "pixel {i}: fd {fd} vs {}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn tiled_equals_monolithic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut y = random_image(&mut rng, 64);
        let mono: AutocorrSet<f64> =
            autocorr_measurement(&mut [&mut y.clone()], 4, EngineConfig { tile_rows: 64 })
                .unwrap();
        for tile in [4, 7, 16, 33] {
            let tiled: AutocorrSet<f64> =
                autocorr_measurement(&mut [&mut y], 4, EngineConfig { tile_rows: tile }).unwrap();
            let scale = mono.a3.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(mono.max_abs_diff(&tiled).unwrap() <= 1e-10 * scale);
        }
        let image_path = autocorr_image(&y, 4).unwrap();
        assert!(mono.max_abs_diff(&image_path).unwrap() < 1e-12);
    }

    #[test]
    fn tile_smaller_than_l_rejected() {
        let mut y = Image::<f64>::zeros(32, 32);
        let r: Result<AutocorrSet<f64>> =
            autocorr_measurement(&mut [&mut y], 5, EngineConfig { tile_rows: 4 });
        assert!(matches!(r, Err(MtdError::Config(_))));
    }

    #[test]
    fn sub_measurements_are_pixel_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = random_image(&mut rng, 16);
        let mut b = random_image(&mut rng, 24);
        let cfg = EngineConfig { tile_rows: 8 };
        let pooled: AutocorrSet<f64> =
            autocorr_measurement(&mut [&mut a.clone(), &mut b.clone()], 3, cfg).unwrap();
        let ea: AutocorrSet<f64> = autocorr_measurement(&mut [&mut a], 3, cfg).unwrap();
        let eb: AutocorrSet<f64> = autocorr_measurement(&mut [&mut b], 3, cfg).unwrap();
        let (wa, wb) = (256.0 / 832.0, 576.0 / 832.0);
        assert!((pooled.a1 - (wa * ea.a1 + wb * eb.a1)).abs() < 1e-14);
        for k in 0..81 {
            assert!((pooled.a3[k] - (wa * ea.a3[k] + wb * eb.a3[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn serialization_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = autocorr_image(&random_image(&mut rng, 5), 3).unwrap();
        let mut bytes = Vec::new();
        write_autocorr(&set, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 6 + 8 + 8 * (1 + 9 + 81));
        let back: AutocorrSet<f64> = read_autocorr(&bytes[..]).unwrap();
        assert_eq!((back.a1, &back.a2, &back.a3), (set.a1, &set.a2, &set.a3));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_autocorr::<f64>(&bad[..]),
            Err(MtdError::Format(_))
        ));
        assert!(matches!(
            read_autocorr::<f64>(&bytes[..bytes.len() - 3]),
            Err(MtdError::Length { .. })
        ));
    }

    proptest! {
        #[test]
        fn scaling_law(c in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_image(&mut rng, 5);
            let a = autocorr_image(&z, 3).unwrap();
            let b = autocorr_image(&z.scaled(c), 3).unwrap();
            let tol = 1e-12 * (1.0 + c.abs().powi(3));
            prop_assert!((b.a1 - c * a.a1).abs() < tol);
            for (x, y) in b.a2.iter().zip(&a.a2) {
                prop_assert!((x - c * c * y).abs() < tol);
            }
            for (x, y) in b.a3.iter().zip(&a.a3) {
                prop_assert!((x - c * c * c * y).abs() < tol);
            }
        }

        #[test]
        fn third_order_exchange_symmetry(seed in any::<u64>(), n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random_image(&mut rng, n);
            let a = autocorr_image(&z, n.min(4)).unwrap();
            prop_assert_eq!(a.symmetry_defect(), 0.0);
            prop_assert!(a.a2[0] >= 0.0);
        }
    }
}
