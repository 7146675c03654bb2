use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtd::autocorr::{autocorr_measurement, load_autocorr, save_autocorr, EngineConfig, FrameSource};
use mtd::forward::{
    plan_placements, read_plan_csv, sigma2_for_snr, write_measurement, write_plan_csv,
    MeasurementFile, MeasurementHeader, NoiseModel, SyntheticSource,
};
use mtd::image::{
    crop_and_resize, parse_idx, read_raster, tile_grid, upscale_nearest, write_raster, Image,
};
use mtd::moments::MomentSystem;
use mtd::optimizer::{evaluate_error, recover_best_of, Mode};
use mtd::rng::{derive_seed, stream};
use mtd::score::pattern_mixture;
use mtd::sweep::{read_sweep_csv, summarize, sweep_snr, write_summary_csv, write_sweep_csv, SweepConfig};
use mtd::{Image64, MtdError};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::plot::error_vs_snr_svg;

/// Exact target values, as written by `prep`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TargetSet {
    pub side: usize,
    pub images: Vec<Vec<f64>>,
}

impl TargetSet {
    pub fn load(path: &Path) -> Result<Vec<Image64>, CliError> {
        let set: TargetSet = serde_json::from_reader(fs::File::open(path)?)?;
        set.images
            .into_iter()
            .map(|data| Ok(Image::square(set.side, data)?))
            .collect()
    }
}

/// Reads one image from a target set (`.json`, entry `index`) or a raster.
pub fn read_image(path: &Path, index: Option<usize>) -> Result<Image64, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let mut all = TargetSet::load(path)?;
        let i = index.unwrap_or(0);
        if i >= all.len() {
            return Err(CliError::Config(format!(
                "{} holds {} images, index {i} requested",
                path.display(),
                all.len()
            )));
        }
        Ok(all.swap_remove(i))
    } else {
        Ok(read_raster(path)?)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    cfg.save_into(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

pub enum TargetSource {
    Idx(PathBuf),
    PatternMixture { variance: f64 },
}

pub fn prep(cfg: &ExperimentConfig, source: TargetSource, count: usize) -> Result<(), CliError> {
    let side = cfg.dataset.side;
    let images: Vec<Image64> = match source {
        TargetSource::Idx(path) => {
            let spec = cfg.dataset_spec()?;
            parse_idx::<f64>(&fs::read(&path)?)?
                .iter()
                .take(count)
                .map(|img| crop_and_resize(img, &spec))
                .collect::<Result<_, MtdError>>()?
        }
        TargetSource::PatternMixture { variance } => {
            let mixture = pattern_mixture(side, variance)?;
            let mut rng = stream(cfg.seed, &[0x7a49]);
            (0..count).map(|_| mixture.sample(&mut rng)).collect()
        }
    };
    if images.is_empty() {
        return Err(CliError::Config("no targets produced".into()));
    }
    let dir = prepare_dir(cfg)?;
    for (i, img) in images.iter().enumerate() {
        write_raster(img, dir.join(format!("target_{i:04}.png")))?;
    }
    let set = TargetSet {
        side,
        images: images.into_iter().map(Image::into_data).collect(),
    };
    write_json(&dir.join("targets.json"), &set)?;
    eprintln!("wrote {} targets to {}", set.images.len(), dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub measurement: PathBuf,
    pub plan: PathBuf,
    pub n: usize,
    pub copies: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub l_eff: usize,
    pub sigma2: f64,
    pub gamma_requested: f64,
    pub gamma_eff: f64,
    pub target: PathBuf,
    pub files: Vec<ManifestEntry>,
}

pub fn simulate(cfg: &ExperimentConfig, target: &Path, index: Option<usize>) -> Result<(), CliError> {
    let x = read_image(target, index)?;
    if x.side()? != cfg.dataset.side {
        return Err(CliError::Config(format!(
            "target is {}x{}, dataset.side is {}",
            x.width(),
            x.height(),
            cfg.dataset.side
        )));
    }
    let planted = match cfg.mode()? {
        Mode::Standard => x,
        Mode::SuperRes(op) => op.apply(&x)?,
    };
    let l = planted.side()?;
    let s = &cfg.synthesis;
    let sigma2 = match s.sigma2 {
        Some(v) => v,
        None => sigma2_for_snr(&planted, s.snr)?,
    };
    let dir = prepare_dir(cfg)?;
    let mut files = Vec::new();
    let mut copies = 0;
    for k in 0..s.sub_measurements {
        let plan = plan_placements(s.n, l, s.gamma, derive_seed(cfg.seed, &[k as u64, 0]))?;
        let noise = NoiseModel::new(sigma2, derive_seed(cfg.seed, &[k as u64, 1]))?;
        let entry = ManifestEntry {
            measurement: PathBuf::from(format!("meas_{k:03}.mtdm")),
            plan: PathBuf::from(format!("plan_{k:03}.csv")),
            n: s.n,
            copies: plan.count(),
        };
        write_plan_csv(&plan, dir.join(&entry.plan))?;
        copies += plan.count();
        let header = MeasurementHeader {
            n: s.n,
            sigma2,
            copies: plan.count(),
        };
        let mut source = SyntheticSource::new(&planted, plan, noise)?;
        write_measurement(&mut source, header, s.tile_rows, dir.join(&entry.measurement))?;
        files.push(entry);
    }
    let manifest = Manifest {
        l_eff: l,
        sigma2,
        gamma_requested: s.gamma,
        gamma_eff: (copies * l * l) as f64 / (s.sub_measurements * s.n * s.n) as f64,
        target: target.to_path_buf(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    eprintln!(
        "wrote {} measurements ({} copies, sigma2 = {sigma2:e}) to {}",
        manifest.files.len(),
        copies,
        dir.display()
    );
    Ok(())
}

/// Expands manifests into their measurement files.
fn measurement_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest = serde_json::from_reader(fs::File::open(p)?)?;
            let base = p.parent().unwrap_or(Path::new("."));
            out.extend(manifest.files.iter().map(|f| base.join(&f.measurement)));
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no measurement files given".into()));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MomentsInfo {
    pub l: usize,
    pub gamma_eff: f64,
    pub sigma2: f64,
    pub pixels: u64,
    pub files: Vec<PathBuf>,
}

pub fn moments(
    cfg: &ExperimentConfig,
    inputs: &[PathBuf],
    l: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let paths = measurement_paths(inputs)?;
    let l = l.unwrap_or_else(|| cfg.measured_side());
    let mut files = paths
        .iter()
        .map(MeasurementFile::open)
        .collect::<Result<Vec<_>, _>>()?;
    let sigma2 = files[0].header().sigma2;
    if files.iter().any(|f| f.header().sigma2 != sigma2) {
        return Err(CliError::Config(
            "measurements were taken at different noise levels".into(),
        ));
    }
    let copies: usize = files.iter().map(|f| f.header().copies).sum();
    let pixels: u64 = files.iter().map(|f| (f.header().n as u64).pow(2)).sum();
    let mut refs: Vec<&mut dyn FrameSource> =
        files.iter_mut().map(|f| f as &mut dyn FrameSource).collect();
    let engine = EngineConfig {
        tile_rows: cfg.synthesis.tile_rows,
    };
    let a_y = autocorr_measurement::<f64>(&mut refs, l, engine)?;
    let dir = prepare_dir(cfg)?;
    let path = out.map_or_else(|| dir.join("moments.mtdac"), Path::to_path_buf);
    save_autocorr(&a_y, &path)?;
    let info = MomentsInfo {
        l,
        gamma_eff: (copies * l * l) as f64 / pixels as f64,
        sigma2,
        pixels,
        files: paths,
    };
    write_json(&path.with_extension("json"), &info)?;
    eprintln!(
        "wrote L = {l} autocorrelations of {} pixels (gamma_eff = {:.5}) to {}",
        pixels,
        info.gamma_eff,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RecoveryReport<'a> {
    final_loss: f64,
    error_e: Option<f64>,
    restart: usize,
    wall_ms: f64,
    side: usize,
    gamma: f64,
    sigma2: f64,
    prior: &'a str,
    /// Resolved configuration without the output location.
    manifest: serde_json::Value,
}

/// Noisy patch of the first planted copy of a manifest's first measurement.
fn noisy_patch(manifest_path: &Path) -> Result<Image64, CliError> {
    let manifest: Manifest = serde_json::from_reader(fs::File::open(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let first = manifest
        .files
        .first()
        .ok_or_else(|| CliError::Config("manifest lists no measurements".into()))?;
    let plan = read_plan_csv(base.join(&first.plan), first.n, manifest.l_eff)?;
    let &(r, c) = plan
        .origins
        .first()
        .ok_or_else(|| CliError::Config("first measurement holds no copies".into()))?;
    let mut file = MeasurementFile::open(base.join(&first.measurement))?;
    let l = manifest.l_eff;
    let mut rows = vec![0.0; l * first.n];
    file.read_rows(r, &mut rows)?;
    Ok(Image::from_fn(l, l, |i, j| rows[i * first.n + c + j]))
}

pub fn recover(
    cfg: &ExperimentConfig,
    moments_path: &Path,
    truth: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<(), CliError> {
    let a_y = load_autocorr::<f64>(moments_path)?;
    let info: MomentsInfo =
        serde_json::from_reader(fs::File::open(moments_path.with_extension("json"))?)?;
    if info.l != a_y.l {
        return Err(MtdError::Format("moments sidecar disagrees with the moments file".into()).into());
    }
    let mode = cfg.mode()?;
    let side = match mode {
        Mode::Standard => a_y.l,
        Mode::SuperRes(op) => {
            if op.l_low() != a_y.l {
                return Err(CliError::Config(format!(
                    "moments are for L = {}, recovery.l_low is {}",
                    a_y.l,
                    op.l_low()
                )));
            }
            op.l_high()
        }
    };
    let system = MomentSystem::new(a_y, info.gamma_eff, info.sigma2)?;
    let prior = cfg.prior(side)?;
    let warm = cfg
        .recovery
        .init
        .as_deref()
        .map(|p| read_image(p, None))
        .transpose()?;
    let rcfg = cfg.recovery_config(warm);
    let dir = prepare_dir(cfg)?;
    let (restart, result) = match recover_best_of(&system, &prior, &rcfg, cfg.recovery.restarts) {
        Ok(r) => r,
        Err(MtdError::Divergence {
            iteration,
            side,
            last_finite,
        }) => {
            let snapshot = Image::square(side, last_finite.clone())?;
            write_raster(&snapshot, dir.join("last_finite.png"))?;
            write_json(
                &dir.join("last_finite.json"),
                &TargetSet {
                    side,
                    images: vec![last_finite.clone()],
                },
            )?;
            return Err(MtdError::Divergence {
                iteration,
                side,
                last_finite,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let truth = truth.map(|p| read_image(p, None)).transpose()?;
    let error_e = truth
        .as_ref()
        .map(|t| evaluate_error(&result.estimate, t))
        .transpose()?;

    write_raster(&result.estimate, dir.join("estimate.png"))?;
    write_json(
        &dir.join("estimate.json"),
        &TargetSet {
            side,
            images: vec![result.estimate.data().to_vec()],
        },
    )?;
    let mut trace = String::from("iteration,loss,grad_norm,score_norm\n");
    for ((t, loss), (g, s)) in result
        .loss_trace
        .iter()
        .zip(result.grad_norm_trace.iter().zip(&result.score_norm_trace))
    {
        trace.push_str(&format!("{t},{loss:e},{g:e},{s:e}\n"));
    }
    fs::write(dir.join("loss_trace.csv"), trace)?;
    let mut provenance = serde_json::to_value(cfg)?;
    if let Some(obj) = provenance.as_object_mut() {
        obj.remove("output_dir");
    }
    write_json(
        &dir.join("result.json"),
        &RecoveryReport {
            final_loss: result.final_loss,
            error_e,
            restart,
            wall_ms: result.wall_time.as_secs_f64() * 1e3,
            side,
            gamma: info.gamma_eff,
            sigma2: info.sigma2,
            prior: prior.kind(),
            manifest: provenance,
        },
    )?;

    if let (Mode::SuperRes(op), Some(t)) = (mode, truth.as_ref()) {
        let stride = op.stride();
        let mut rows = vec![
            vec![t.clone()],
            vec![upscale_nearest(&op.apply(t)?, stride)],
        ];
        if let Some(m) = manifest {
            rows.push(vec![upscale_nearest(&noisy_patch(m)?, stride)]);
        }
        rows.push(vec![result.estimate.clone()]);
        write_raster(&tile_grid(&rows, 1)?, dir.join("panel.png"))?;
    }
    match error_e {
        Some(e) => eprintln!("final loss {:e}, E = {e:.4}", result.final_loss),
        None => eprintln!("final loss {:e}", result.final_loss),
    }
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, targets: &Path) -> Result<(), CliError> {
    let targets = TargetSet::load(targets)?;
    if targets.iter().any(|t| t.width() != cfg.dataset.side) {
        return Err(CliError::Config(format!(
            "targets must be {0}x{0} (dataset.side)",
            cfg.dataset.side
        )));
    }
    let prior = match cfg.prior.kind.as_str() {
        "none" => None,
        _ => Some(cfg.prior(cfg.dataset.side)?),
    };
    let sweep_cfg = SweepConfig {
        recovery: cfg.recovery_config(None),
        n: cfg.synthesis.n,
        sub_measurements: cfg.synthesis.sub_measurements,
        gamma: cfg.synthesis.gamma,
        seed: cfg.seed,
        restarts: cfg.recovery.restarts,
        engine: EngineConfig {
            tile_rows: cfg.synthesis.tile_rows,
        },
    };
    let rows = sweep_snr(&targets, &cfg.sweep.snr, &sweep_cfg, prior.as_ref())?;
    let dir = prepare_dir(cfg)?;
    write_sweep_csv(&rows, dir.join("sweep.csv"))?;
    let summary = summarize(&rows);
    write_summary_csv(&summary, dir.join("summary.csv"))?;
    if let Some(svg) = error_vs_snr_svg(&summary) {
        fs::write(dir.join("error_vs_snr.svg"), svg)?;
    }
    for s in &summary {
        eprintln!(
            "snr {:>6} prior {} mean E {:.4}",
            s.snr, s.prior as u8, s.mean_error
        );
    }
    Ok(())
}

pub fn plot(csv: &Path, out: &Path) -> Result<(), CliError> {
    let rows = read_sweep_csv(csv)?;
    let svg = error_vs_snr_svg(&summarize(&rows)).ok_or_else(|| {
        MtdError::Format(format!("{} holds no sweep rows", csv.display()))
    })?;
    fs::write(out, svg)?;
    Ok(())
}
