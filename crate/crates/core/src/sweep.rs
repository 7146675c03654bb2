//! Error-versus-SNR sweeps: simulate a measurement set per (SNR, target),
//! recover with and without a prior, record the relative error.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::autocorr::{autocorr_measurement, EngineConfig, FrameSource};
use crate::error::{MtdError, Result};
use crate::forward::{plan_placements, sigma2_for_snr, NoiseModel, SyntheticSource};
use crate::image::Image;
use crate::moments::MomentSystem;
use crate::optimizer::{evaluate_error, recover_best_of, Mode, RecoveryConfig};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::score::ScoreProvider;

#[derive(Clone, Debug)]
pub struct SweepConfig<T> {
    pub recovery: RecoveryConfig<T>,
    /// Side of each sub-measurement.
    pub n: usize,
    pub sub_measurements: usize,
    pub gamma: f64,
    pub seed: u64,
    pub restarts: usize,
    pub engine: EngineConfig,
}

/// One recovered cell: the selected restart for a (SNR, prior, target) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub snr: f64,
    pub prior: bool,
    pub target_id: usize,
    pub restart: usize,
    pub final_loss: f64,
    pub error_e: f64,
    pub wall_ms: f64,
}

/// Measurement moments for one target at one noise level.
pub struct Cell<T> {
    pub system: MomentSystem<T>,
    /// Ground truth on the iterate grid (high resolution in super-resolution mode).
    pub truth: Image<T>,
}

/// Simulates the sub-measurements of one cell and reduces them to a moment
/// system. The density passed to the system is the realized one.
pub fn prepare_cell<T: Scalar>(
    target: &Image<T>,
    snr: f64,
    cfg: &SweepConfig<T>,
    cell_seed: u64,
) -> Result<Cell<T>> {
    let planted = match &cfg.recovery.mode {
        Mode::Standard => target.clone(),
        Mode::SuperRes(op) => op.apply(target)?,
    };
    let l = planted.side()?;
    let sigma2 = if snr.is_infinite() {
        0.0
    } else {
        sigma2_for_snr(&planted, T::lit(snr))?.to_f64_lossy()
    };
    let mut sources = Vec::with_capacity(cfg.sub_measurements);
    let mut copies = 0usize;
    for k in 0..cfg.sub_measurements.max(1) {
        let plan = plan_placements(cfg.n, l, cfg.gamma, derive_seed(cell_seed, &[k as u64, 0]))?;
        copies += plan.count();
        let noise = NoiseModel::new(sigma2, derive_seed(cell_seed, &[k as u64, 1]))?;
        sources.push(SyntheticSource::new(&planted, plan, noise)?);
    }
    let mut refs: Vec<&mut dyn FrameSource> =
        sources.iter_mut().map(|s| s as &mut dyn FrameSource).collect();
    let a_y = autocorr_measurement(&mut refs, l, cfg.engine)?;
    let area = (sources.len() * cfg.n * cfg.n) as f64;
    let gamma = (copies * l * l) as f64 / area;
    Ok(Cell {
        system: MomentSystem::new(a_y, T::lit(gamma), T::lit(sigma2))?,
        truth: target.clone(),
    })
}

/// Runs the sweep over `snr_grid × targets`. Every cell is recovered without
/// a prior, and additionally with `prior` when one is given. Both arms see the
/// same measurement and the same restart seeds.
pub fn sweep_snr<T: Scalar>(
    targets: &[Image<T>],
    snr_grid: &[f64],
    cfg: &SweepConfig<T>,
    prior: Option<&ScoreProvider<T>>,
) -> Result<Vec<SweepRow>> {
    if targets.is_empty() || snr_grid.is_empty() {
        return Err(MtdError::Config("sweep needs targets and SNR values".into()));
    }
    cfg.recovery.validate()?;
    let cells: Vec<(usize, usize)> = (0..snr_grid.len())
        .flat_map(|s| (0..targets.len()).map(move |t| (s, t)))
        .collect();
    let per_cell: Vec<Result<Vec<SweepRow>>> = cells
        .par_iter()
        .map(|&(si, ti)| {
            let snr = snr_grid[si];
            let seed = derive_seed(cfg.seed, &[si as u64, ti as u64]);
            let cell = prepare_cell(&targets[ti], snr, cfg, seed)?;
            let side = cell.truth.side()?;
            let zero = ScoreProvider::zero(side);
            let mut arms: Vec<(bool, &ScoreProvider<T>)> = vec![(false, &zero)];
            if let Some(p) = prior {
                arms.push((true, p));
            }
            let rec_cfg = RecoveryConfig {
                seed: derive_seed(seed, &[7]),
                ..cfg.recovery.clone()
            };
            arms.into_iter()
                .map(|(flag, p)| {
                    let (restart, res) = recover_best_of(&cell.system, p, &rec_cfg, cfg.restarts)?;
                    Ok(SweepRow {
                        snr,
                        prior: flag,
                        target_id: ti,
                        restart,
                        final_loss: res.final_loss.to_f64_lossy(),
                        error_e: evaluate_error(&res.estimate, &cell.truth)?.to_f64_lossy(),
                        wall_ms: res.wall_time.as_secs_f64() * 1e3,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_cell {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Mean error per (SNR, prior) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub snr: f64,
    pub prior: bool,
    pub mean_error: f64,
    pub targets: usize,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for row in rows {
        match out
            .iter_mut()
            .find(|s| s.snr == row.snr && s.prior == row.prior)
        {
            Some(s) => {
                s.mean_error += row.error_e;
                s.targets += 1;
            }
            None => out.push(SummaryRow {
                snr: row.snr,
                prior: row.prior,
                mean_error: row.error_e,
                targets: 1,
            }),
        }
    }
    for s in &mut out {
        s.mean_error /= s.targets as f64;
    }
    out.sort_by(|a, b| a.prior.cmp(&b.prior).then(a.snr.total_cmp(&b.snr)));
    out
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `trials` fair coin flips.
pub fn sign_test_p_value(wins: usize, trials: usize) -> f64 {
    let mut tail = 0.0;
    for k in wins..=trials {
        tail += binomial(trials, k);
    }
    tail / 2f64.powi(trials as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub const SWEEP_HEADER: &str = "snr,prior,target_id,restart,final_loss,error_E,wall_ms";
pub const SUMMARY_HEADER: &str = "snr,prior,mean_error_E,targets";

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:e},{:e},{:.3}",
            r.snr, r.prior as u8, r.target_id, r.restart, r.final_loss, r.error_e, r.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    match lines.next().transpose()? {
        Some(h) if h.trim() == SWEEP_HEADER => {}
        _ => {
            return Err(MtdError::format(format!(
                "sweep CSV must start with header {SWEEP_HEADER}"
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(MtdError::format(format!("bad sweep row {line:?}")));
        }
        let bad = || MtdError::format(format!("bad sweep row {line:?}"));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        rows.push(SweepRow {
            snr: num(f[0])?,
            prior: match f[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
            target_id: int(f[2])?,
            restart: int(f[3])?,
            final_loss: num(f[4])?,
            error_e: num(f[5])?,
            wall_ms: num(f[6])?,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(summary: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in summary {
        writeln!(
            w,
            "{},{},{:e},{}",
            s.snr, s.prior as u8, s.mean_error, s.targets
        )?;
    }
    w.flush()?;
    Ok(())
}
