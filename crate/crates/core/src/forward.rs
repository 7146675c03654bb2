//! Synthesis of well-separated MTD measurements, the down-sampling operator
//! of the super-resolution model, and the SNR convention.
//!
//! Copies are planted with their top-left corner in `[L, N - 2L]²`, so an
//! empty border of `L` pixels surrounds every copy, and two origins are at
//! Chebyshev distance `>= 2L` (at least one full image length of empty space
//! between neighbouring copies).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autocorr::FrameSource;
use crate::error::{MtdError, Result};
use crate::image::Image;
use crate::rng::stream;
use crate::scalar::Scalar;

/// Packing limit of the separation constraint: one copy per `(2L)²` cell.
pub const GAMMA_MAX: f64 = 0.25;

/// Dart-throwing budget per requested copy.
const ATTEMPTS_PER_COPY: usize = 50;
/// Independent restarts of the dart thrower before reporting a packing error.
const PLACEMENT_ROUNDS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementPlan {
    pub n: usize,
    pub l_eff: usize,
    /// Top-left `(row, col)` of each planted copy.
    pub origins: Vec<(usize, usize)>,
}

impl PlacementPlan {
    pub fn count(&self) -> usize {
        self.origins.len()
    }

    /// Realized density `M L² / N²`.
    pub fn gamma(&self) -> f64 {
        (self.count() * self.l_eff * self.l_eff) as f64 / (self.n * self.n) as f64
    }

    /// Smallest pairwise Chebyshev distance between origins (brute force).
    pub fn min_separation(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, a) in self.origins.iter().enumerate() {
            for b in &self.origins[i + 1..] {
                let d = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1));
                best = Some(best.map_or(d, |x| x.min(d)));
            }
        }
        best
    }

    /// Checks the admissible range and the separation constraint.
    pub fn validate(&self) -> Result<()> {
        let l = self.l_eff;
        if self.n <= 3 * l {
            return Err(MtdError::shape(format!(
                "N = {} must exceed 3L = {}",
                self.n,
                3 * l
            )));
        }
        let hi = self.n - 2 * l;
        for &(r, c) in &self.origins {
            if r < l || c < l || r > hi || c > hi {
                return Err(MtdError::Bounds(format!(
                    "origin ({r}, {c}) outside [{l}, {hi}]²"
                )));
            }
        }
        if let Some(d) = self.min_separation() {
            if d < 2 * l {
                return Err(MtdError::Bounds(format!(
                    "copies only {d} apart, need {}",
                    2 * l
                )));
            }
        }
        Ok(())
    }
}

/// Number of copies for a requested density, `round(γ N² / L²)`.
pub fn copies_for_density(n: usize, l_eff: usize, gamma: f64) -> usize {
    (gamma * (n * n) as f64 / (l_eff * l_eff) as f64).round() as usize
}

/// Places `round(γN²/L²)` well-separated copies by dart throwing.
pub fn plan_placements(n: usize, l_eff: usize, gamma: f64, seed: u64) -> Result<PlacementPlan> {
    if l_eff == 0 || n <= 3 * l_eff {
        return Err(MtdError::shape(format!(
            "N = {n} must exceed 3L = {}",
            3 * l_eff
        )));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(MtdError::Config(format!("invalid density {gamma}")));
    }
    let requested = copies_for_density(n, l_eff, gamma);
    let mut best = 0;
    for round in 0..PLACEMENT_ROUNDS {
        let origins = throw_darts(n, l_eff, requested, seed, round);
        if origins.len() == requested {
            return Ok(PlacementPlan { n, l_eff, origins });
        }
        best = best.max(origins.len());
    }
    Err(MtdError::Packing {
        requested,
        achieved: best,
    })
}

fn throw_darts(n: usize, l: usize, requested: usize, seed: u64, round: u64) -> Vec<(usize, usize)> {
    let (lo, hi) = (l, n - 2 * l);
    let cell = 2 * l;
    let cells = (hi - lo) / cell + 1;
    // A cell of side 2L can hold at most one origin.
    let mut grid: Vec<Option<(usize, usize)>> = vec![None; cells * cells];
    let mut rng = stream(seed, &[round]);
    let mut origins = Vec::with_capacity(requested);
    let budget = ATTEMPTS_PER_COPY * requested;
    let mut attempts = 0;
    while origins.len() < requested && attempts < budget {
        attempts += 1;
        let r = rng.random_range(lo..=hi);
        let c = rng.random_range(lo..=hi);
        let (gr, gc) = ((r - lo) / cell, (c - lo) / cell);
        let clash = (gr.saturating_sub(1)..=(gr + 1).min(cells - 1)).any(|i| {
            (gc.saturating_sub(1)..=(gc + 1).min(cells - 1)).any(|j| {
                grid[i * cells + j]
                    .is_some_and(|(pr, pc)| pr.abs_diff(r).max(pc.abs_diff(c)) < cell)
            })
        });
        if !clash {
            grid[gr * cells + gc] = Some((r, c));
            origins.push((r, c));
        }
    }
    origins
}

/// I.i.d. zero-mean Gaussian pixel noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub sigma2: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma2: f64, seed: u64) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(MtdError::Config(format!("invalid noise variance {sigma2}")));
        }
        Ok(Self { sigma2, seed })
    }

    pub fn noiseless() -> Self {
        Self {
            sigma2: 0.0,
            seed: 0,
        }
    }

    /// Noise of row `row`; every row has its own stream so any row range can
    /// be regenerated independently.
    fn fill_row(&self, row: usize, out: &mut [f64]) {
        if self.sigma2 == 0.0 {
            out.fill(0.0);
            return;
        }
        let sd = self.sigma2.sqrt();
        let mut rng = stream(self.seed, &[row as u64]);
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = sd * z;
        }
    }
}

/// Selector of `L_low × L_low` equally spaced samples of an `L_high × L_high` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DownsampleOp {
    l_high: usize,
    l_low: usize,
}

impl DownsampleOp {
    pub fn new(l_high: usize, l_low: usize) -> Result<Self> {
        if l_low == 0 || l_high < l_low || !l_high.is_multiple_of(l_low) {
            return Err(MtdError::shape(format!(
                "L_high = {l_high} is not a multiple of L_low = {l_low}"
            )));
        }
        Ok(Self { l_high, l_low })
    }

    /// The identity on `side × side` images.
    pub fn identity(side: usize) -> Self {
        Self {
            l_high: side,
            l_low: side,
        }
    }

    pub fn l_high(&self) -> usize {
        self.l_high
    }

    pub fn l_low(&self) -> usize {
        self.l_low
    }

    pub fn stride(&self) -> usize {
        self.l_high / self.l_low
    }

    pub fn is_identity(&self) -> bool {
        self.l_high == self.l_low
    }

    /// Flat high-resolution indices kept by the operator, in low-res row-major order.
    pub fn sampled_indices(&self) -> Vec<usize> {
        let s = self.stride();
        (0..self.l_low)
            .flat_map(|i| (0..self.l_low).map(move |j| (s * i) * self.l_high + s * j))
            .collect()
    }

    /// Membership mask of the sampled index set over the high-resolution grid.
    pub fn sampled_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.l_high * self.l_high];
        for i in self.sampled_indices() {
            mask[i] = true;
        }
        mask
    }

    pub fn apply<T: Scalar>(&self, x_high: &Image<T>) -> Result<Image<T>> {
        if x_high.side()? != self.l_high {
            return Err(MtdError::shape(format!(
                "expected a {0}x{0} image, got {1}x{2}",
                self.l_high,
                x_high.width(),
                x_high.height()
            )));
        }
        let s = self.stride();
        Ok(Image::from_fn(self.l_low, self.l_low, |r, c| {
            x_high.get(s * r, s * c)
        }))
    }

    /// Embeds a low-resolution image into the high-resolution grid, zero off
    /// the sampled set.
    pub fn adjoint<T: Scalar>(&self, x_low: &Image<T>) -> Result<Image<T>> {
        if x_low.side()? != self.l_low {
            return Err(MtdError::shape("adjoint input does not match L_low"));
        }
        let s = self.stride();
        let mut out = Image::zeros(self.l_high, self.l_high);
        for r in 0..self.l_low {
            for c in 0..self.l_low {
                out.set(s * r, s * c, x_low.get(r, c));
            }
        }
        Ok(out)
    }
}

/// A measurement held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement<T> {
    pub n: usize,
    pub data: Vec<T>,
    pub sigma2: f64,
    /// Ground-truth placement; diagnostics only, recovery never reads it.
    pub plan: Option<PlacementPlan>,
}

impl<T: Scalar> Measurement<T> {
    pub fn copies(&self) -> Option<usize> {
        self.plan.as_ref().map(PlacementPlan::count)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.n + col]
    }
}

impl<T: Scalar> FrameSource for Measurement<T> {
    fn side(&self) -> usize {
        self.n
    }

    fn read_rows(&mut self, start: usize, out: &mut [f64]) -> Result<()> {
        let begin = start * self.n;
        let src = self
            .data
            .get(begin..begin + out.len())
            .ok_or_else(|| MtdError::Bounds("row range outside measurement".into()))?;
        for (o, v) in out.iter_mut().zip(src) {
            *o = v.to_f64_lossy();
        }
        Ok(())
    }
}

/// A measurement generated lazily row by row: planted copies plus noise.
/// Reading any row range always yields the same pixels.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    target: Vec<f64>,
    l: usize,
    plan: PlacementPlan,
    noise: NoiseModel,
    /// Origins sorted by row.
    by_row: Vec<(usize, usize)>,
}

impl SyntheticSource {
    pub fn new<T: Scalar>(x: &Image<T>, plan: PlacementPlan, noise: NoiseModel) -> Result<Self> {
        let l = x.side()?;
        if l != plan.l_eff {
            return Err(MtdError::shape(format!(
                "target side {l} does not match plan copy side {}",
                plan.l_eff
            )));
        }
        plan.validate()?;
        let mut by_row = plan.origins.clone();
        by_row.sort_unstable();
        Ok(Self {
            target: x.data().iter().map(|v| v.to_f64_lossy()).collect(),
            l,
            plan,
            noise,
            by_row,
        })
    }

    pub fn plan(&self) -> &PlacementPlan {
        &self.plan
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn materialize<T: Scalar>(mut self) -> Result<Measurement<T>> {
        let n = self.plan.n;
        let mut buf = vec![0.0; n * n];
        self.read_rows(0, &mut buf)?;
        Ok(Measurement {
            n,
            data: buf.into_iter().map(T::lit).collect(),
            sigma2: self.noise.sigma2,
            plan: Some(self.plan),
        })
    }
}

impl FrameSource for SyntheticSource {
    fn side(&self) -> usize {
        self.plan.n
    }

    fn read_rows(&mut self, start: usize, out: &mut [f64]) -> Result<()> {
        let n = self.plan.n;
        if !out.len().is_multiple_of(n) || start * n + out.len() > n * n {
            return Err(MtdError::Bounds("row range outside measurement".into()));
        }
        let l = self.l;
        for (k, row) in out.chunks_exact_mut(n).enumerate() {
            let r = start + k;
            self.noise.fill_row(r, row);
            // Copies whose rows cover r have origin row in (r - L, r].
            let first = self.by_row.partition_point(|o| o.0 + l <= r);
            for &(or, oc) in self.by_row[first..].iter().take_while(|o| o.0 <= r) {
                let src = &self.target[(r - or) * l..(r - or + 1) * l];
                for (dst, v) in row[oc..oc + l].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        Ok(())
    }
}

/// Plants the copies of `x` given by `plan` and adds noise.
pub fn synthesize<T: Scalar>(
    x: &Image<T>,
    plan: &PlacementPlan,
    noise: NoiseModel,
) -> Result<Measurement<T>> {
    SyntheticSource::new(x, plan.clone(), noise)?.materialize()
}

/// Super-resolution synthesis: plants down-sampled copies `P x_high`.
pub fn synthesize_superres<T: Scalar>(
    x_high: &Image<T>,
    op: &DownsampleOp,
    plan: &PlacementPlan,
    noise: NoiseModel,
) -> Result<Measurement<T>> {
    if plan.l_eff != op.l_low() {
        return Err(MtdError::shape("plan copy side must equal L_low"));
    }
    synthesize(&op.apply(x_high)?, plan, noise)
}

/// `‖x‖_F² / (0.25 π L² σ²)`; infinite when `σ² = 0`.
pub fn snr<T: Scalar>(x: &Image<T>, sigma2: T) -> T {
    if sigma2 == T::zero() {
        return T::infinity();
    }
    let area = T::lit(0.25) * T::PI() * T::lit(x.data().len() as f64);
    x.norm_sq() / (area * sigma2)
}

/// Noise variance giving the requested SNR for `x`.
pub fn sigma2_for_snr<T: Scalar>(x: &Image<T>, snr: T) -> Result<T> {
    if !(snr > T::zero()) || !snr.is_finite() {
        return Err(MtdError::Config(format!("SNR must be positive, got {snr}")));
    }
    let energy = x.norm_sq();
    if energy == T::zero() {
        return Err(MtdError::Undefined(
            "noise level for a zero image is undefined".into(),
        ));
    }
    let area = T::lit(0.25) * T::PI() * T::lit(x.data().len() as f64);
    Ok(energy / (area * snr))
}

const MEAS_MAGIC: &[u8; 8] = b"MTDMEAS1";
const MEAS_HEADER: u64 = 32;

/// Header of an `MTDMEAS1` file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasurementHeader {
    pub n: usize,
    pub sigma2: f64,
    pub copies: usize,
}

/// Streams a frame into an `MTDMEAS1` file: magic, `N` (u64 LE), `σ²` (f64
/// LE), `M` (u64 LE), then `N²` row-major f32 LE pixels.
pub fn write_measurement(
    source: &mut dyn FrameSource,
    header: MeasurementHeader,
    strip_rows: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let n = source.side();
    if n != header.n {
        return Err(MtdError::shape("header N differs from source side"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEAS_MAGIC)?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&header.sigma2.to_le_bytes())?;
    w.write_all(&(header.copies as u64).to_le_bytes())?;
    let strip = strip_rows.max(1);
    let mut buf = vec![0.0; strip * n];
    let mut start = 0;
    while start < n {
        let rows = strip.min(n - start);
        let chunk = &mut buf[..rows * n];
        source.read_rows(start, chunk)?;
        for v in chunk.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        start += rows;
    }
    w.flush()?;
    Ok(())
}

/// File-backed `MTDMEAS1` measurement, read row block by row block.
#[derive(Debug)]
pub struct MeasurementFile {
    file: BufReader<File>,
    header: MeasurementHeader,
    bytes: Vec<u8>,
}

impl MeasurementFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let total = file.get_ref().metadata()?.len();
        let mut head = [0u8; MEAS_HEADER as usize];
        let got = read_up_to(&mut file, &mut head)?;
        if got < head.len() {
            return Err(MtdError::Length {
                expected: head.len(),
                found: got,
            });
        }
        if &head[..8] != MEAS_MAGIC {
            return Err(MtdError::format("missing MTDMEAS1 magic"));
        }
        let word = |o: usize| -> [u8; 8] { head[o..o + 8].try_into().expect("8 bytes") };
        let n = u64::from_le_bytes(word(8)) as usize;
        let sigma2 = f64::from_le_bytes(word(16));
        let copies = u64::from_le_bytes(word(24)) as usize;
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(MtdError::format("invalid noise variance in header"));
        }
        let expected = MEAS_HEADER as u128 + 4 * (n as u128) * (n as u128);
        if total as u128 != expected {
            return Err(MtdError::Length {
                expected: expected as usize,
                found: total as usize,
            });
        }
        Ok(Self {
            file,
            header: MeasurementHeader { n, sigma2, copies },
            bytes: Vec::new(),
        })
    }

    pub fn header(&self) -> MeasurementHeader {
        self.header
    }

    pub fn load<T: Scalar>(mut self) -> Result<Measurement<T>> {
        let n = self.header.n;
        let mut buf = vec![0.0; n * n];
        self.read_rows(0, &mut buf)?;
        Ok(Measurement {
            n,
            data: buf.into_iter().map(T::lit).collect(),
            sigma2: self.header.sigma2,
            plan: None,
        })
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            k => got += k,
        }
    }
    Ok(got)
}

impl FrameSource for MeasurementFile {
    fn side(&self) -> usize {
        self.header.n
    }

    fn read_rows(&mut self, start: usize, out: &mut [f64]) -> Result<()> {
        let n = self.header.n;
        if !out.len().is_multiple_of(n.max(1)) || start * n + out.len() > n * n {
            return Err(MtdError::Bounds("row range outside measurement".into()));
        }
        self.file
            .seek(SeekFrom::Start(MEAS_HEADER + 4 * (start * n) as u64))?;
        self.bytes.resize(4 * out.len(), 0);
        self.file.read_exact(&mut self.bytes)?;
        for (o, c) in out.iter_mut().zip(self.bytes.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
        }
        Ok(())
    }
}

/// Writes the plan sidecar CSV (`m,row,col`).
pub fn write_plan_csv(plan: &PlacementPlan, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "m,row,col")?;
    for (m, (r, c)) in plan.origins.iter().enumerate() {
        writeln!(w, "{m},{r},{c}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plan_csv(path: impl AsRef<Path>, n: usize, l_eff: usize) -> Result<PlacementPlan> {
    let r = BufReader::new(File::open(path)?);
    let mut origins = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "m,row,col" {
                return Err(MtdError::format("plan CSV header must be m,row,col"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| MtdError::format(format!("bad plan row {line:?}")))
        };
        match fields[..] {
            [_, r, c] => origins.push((parse(r)?, parse(c)?)),
            _ => return Err(MtdError::format(format!("bad plan row {line:?}"))),
        }
    }
    Ok(PlacementPlan { n, l_eff, origins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autocorr::{autocorr_image, autocorr_measurement, AutocorrSet, EngineConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_copy_count() {
        assert_eq!(copies_for_density(4000, 14, 0.1), 8163);
    }

    #[test]
    fn vanishing_density_gives_empty_plan() {
        let plan = plan_placements(100, 10, 0.0, 1).unwrap();
        assert_eq!(plan.count(), 0);
        let plan = plan_placements(100, 10, 1e-6, 1).unwrap();
        assert_eq!(plan.count(), 0);
    }

    #[test]
    fn small_plan_is_well_separated() {
        for seed in 0..20 {
            let plan = plan_placements(64, 8, 0.0625, seed).unwrap();
            assert_eq!(plan.count(), 4);
            // Brute-force pairwise check of the empty gap between supports.
            for (i, a) in plan.origins.iter().enumerate() {
                for b in &plan.origins[i + 1..] {
                    let gap = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) - 8;
                    assert!(gap >= 8, "{a:?} {b:?}");
                }
            }
            plan.validate().unwrap();
        }
    }

    #[test]
    fn overdense_request_is_a_packing_error() {
        match plan_placements(200, 10, 0.9, 3) {
            Err(MtdError::Packing {
                requested,
                achieved,
            }) => {
                assert_eq!(requested, 360);
                assert!(achieved < requested && achieved > 0);
            }
            other => panic!("expected packing error, got {other:?}"),
        }
        assert!(plan_placements(30, 10, 0.1, 0).is_err());
    }

    #[test]
    fn noiseless_single_copy() {
        let x = Image::from_fn(3, 3, |r, c| (r * 3 + c + 1) as f64);
        let plan = PlacementPlan {
            n: 16,
            l_eff: 3,
            origins: vec![(5, 7)],
        };
        let y = synthesize(&x, &plan, NoiseModel::noiseless()).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let inside = (5..8).contains(&r) && (7..10).contains(&c);
                let want = if inside { x.get(r - 5, c - 7) } else { 0.0 };
                assert_eq!(y.get(r, c), want);
            }
        }
    }

    #[test]
    fn separated_copies_never_overlap() {
        let x = Image::filled(6, 6, 1.0f64);
        let plan = plan_placements(120, 6, 0.1, 9).unwrap();
        let y = synthesize(&x, &plan, NoiseModel::noiseless()).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0 || v == 1.0));
        let total: f64 = y.data.iter().sum();
        assert_eq!(total as usize, plan.count() * 36);
    }

    #[test]
    fn pure_noise_variance() {
        let x = Image::<f64>::zeros(4, 4);
        let plan = plan_placements(256, 4, 0.05, 2).unwrap();
        let y = synthesize(&x, &plan, NoiseModel::new(1.0, 77).unwrap()).unwrap();
        let n = y.data.len() as f64;
        let mean = y.data.iter().sum::<f64>() / n;
        let var = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Standard errors of the mean and of the variance for unit Gaussians.
        assert!(mean.abs() < 5.0 / n.sqrt());
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn streamed_rows_match_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Image::from_fn(5, 5, |_, _| rng.random::<f64>());
        let plan = plan_placements(80, 5, 0.08, 4).unwrap();
        let noise = NoiseModel::new(0.3, 12).unwrap();
        let full: Measurement<f64> = synthesize(&x, &plan, noise).unwrap();
        let mut src = SyntheticSource::new(&x, plan, noise).unwrap();
        let mut rows = vec![0.0; 7 * 80];
        src.read_rows(31, &mut rows).unwrap();
        assert_eq!(&rows[..], &full.data[31 * 80..38 * 80]);
    }

    #[test]
    fn exact_moment_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 4;
        let x = Image::from_fn(l, l, |_, _| rng.random::<f64>());
        let plan = plan_placements(128 * l, l, 0.1, 5).unwrap();
        let gamma = plan.gamma();
        let mut src = SyntheticSource::new(&x, plan, NoiseModel::noiseless()).unwrap();
        let ay: AutocorrSet<f64> =
            autocorr_measurement(&mut [&mut src], l, EngineConfig::default()).unwrap();
        let ax = autocorr_image(&x, l).unwrap().scaled(gamma);
        let scale = ax.a3.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(ay.max_abs_diff(&ax).unwrap() < 1e-3 * scale);
        // With the empty border the identity is exact up to rounding.
        assert!(ay.max_abs_diff(&ax).unwrap() < 1e-12 * scale.max(1.0));
    }

    #[test]
    fn downsample_picks_equally_spaced_entries() {
        let x = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let op = DownsampleOp::new(4, 2).unwrap();
        let low = op.apply(&x).unwrap();
        assert_eq!(low.data(), &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(
            DownsampleOp::new(28, 14).unwrap().sampled_indices()[..3],
            [0, 2, 4]
        );
        assert_eq!(DownsampleOp::new(28, 14).unwrap().sampled_indices()[14], 56);
        let c = op.apply(&Image::filled(4, 4, 0.7f64)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
        assert!(DownsampleOp::new(9, 2).is_err());
    }

    #[test]
    fn adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let op = DownsampleOp::new(6, 3).unwrap();
        let x = Image::from_fn(6, 6, |_, _| rng.random::<f64>());
        let y = Image::from_fn(3, 3, |_, _| rng.random::<f64>());
        let lhs: f64 = op
            .apply(&x)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(op.adjoint(&y).unwrap().data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn superres_synthesis_plants_downsampled_copies() {
        let x = Image::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let op = DownsampleOp::new(4, 2).unwrap();
        let plan = PlacementPlan {
            n: 10,
            l_eff: 2,
            origins: vec![(2, 3)],
        };
        let y = synthesize_superres(&x, &op, &plan, NoiseModel::noiseless()).unwrap();
        assert_eq!(
            [y.get(2, 3), y.get(2, 4), y.get(3, 3), y.get(3, 4)],
            [0.0, 2.0, 8.0, 10.0]
        );
        let bad = PlacementPlan {
            l_eff: 3,
            ..plan.clone()
        };
        assert!(synthesize_superres(&x, &op, &bad, NoiseModel::noiseless()).is_err());
    }

    #[test]
    fn snr_definition() {
        let x = Image::filled(2, 2, 1.0f64);
        assert!((snr(&x, 2.0) - 4.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
        assert!((snr(&x, 4.0) - snr(&x, 2.0) / 2.0).abs() < 1e-15);
        assert!(snr(&x, 0.0).is_infinite());
        // ‖x‖² equal to the effective area.
        let l = 6;
        let v = (0.25 * std::f64::consts::PI).sqrt();
        assert!((snr(&Image::filled(l, l, v), 1.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sigma2_inverts_snr() {
        let x = Image::filled(2, 2, 1.0f64);
        let s2 = sigma2_for_snr(&x, 4.0 / (2.0 * std::f64::consts::PI)).unwrap();
        assert!((s2 - 2.0).abs() < 1e-14);
        let y = Image::from_fn(14, 14, |r, c| ((r * c) % 7) as f64 / 6.0);
        for target in [0.1, 0.5, 1.0, 10.0] {
            let s2 = sigma2_for_snr(&y, target).unwrap();
            assert!((snr(&y, s2) - target).abs() < 1e-13 * target);
        }
        assert!(matches!(
            sigma2_for_snr(&Image::<f64>::zeros(3, 3), 1.0),
            Err(MtdError::Undefined(_))
        ));
        assert!(sigma2_for_snr(&x, 0.0).is_err());
    }

    #[test]
    fn measurement_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtdmeas");
        let x = Image::from_fn(4, 4, |r, c| (r + c) as f64 / 6.0);
        let plan = plan_placements(48, 4, 0.05, 1).unwrap();
        let noise = NoiseModel::new(0.25, 3).unwrap();
        let mut src = SyntheticSource::new(&x, plan.clone(), noise).unwrap();
        let header = MeasurementHeader {
            n: 48,
            sigma2: 0.25,
            copies: plan.count(),
        };
        write_measurement(&mut src, header, 5, &path).unwrap();
        let file = MeasurementFile::open(&path).unwrap();
        assert_eq!(file.header(), header);
        let loaded: Measurement<f64> = file.load().unwrap();
        let direct: Measurement<f64> = synthesize(&x, &plan, noise).unwrap();
        for (a, b) in loaded.data.iter().zip(&direct.data) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let plan_path = dir.path().join("m.plan.csv");
        write_plan_csv(&plan, &plan_path).unwrap();
        assert_eq!(read_plan_csv(&plan_path, 48, 4).unwrap(), plan);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            MeasurementFile::open(&path),
            Err(MtdError::Length { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            MeasurementFile::open(&path),
            Err(MtdError::Format(_))
        ));
    }
}
