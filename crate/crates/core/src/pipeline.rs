//! File-backed pipeline stages and the `run-all` orchestration.
//!
//! Every stage reads its inputs from and writes its outputs under one run
//! directory, so each can be invoked alone once its dependencies exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{antisymmetry_defect, channel_mean, channel_variance, field_metrics, lift_coefficient, match_by_lift, MatchReport, NormalizationStats};
use crate::io::{self, Checkpoint, FieldSeries, Stage};
use crate::nn::ParamStore;
use crate::p2z::{self, P2zNet, Stage2Epoch};
use crate::spectral::{self, Component, SpodResult};
use crate::vae::{self, PcBetaVae, Stage1Epoch};
use crate::wake::{self, FlowSnapshot, PressureSample, SampledSeries, WakeModel};

/// Artifact locations relative to the run directory.
pub mod paths {
    pub const LOW_FIELDS: &str = "data/low_fields.lff";
    pub const LOW_PRESSURE: &str = "data/low_pressure.csv";
    pub const HIGH_PRESSURE: &str = "data/high_pressure.csv";
    pub const VAE_CHECKPOINT: &str = "checkpoints/vae.lfck";
    pub const P2Z_CHECKPOINT: &str = "checkpoints/p2z.lfck";
    pub const VAE_TRACE: &str = "traces/vae_trace.csv";
    pub const P2Z_TRACE: &str = "traces/p2z_trace.csv";
    pub const INFERRED: &str = "inferred/high_fields.lff";
    pub const SPECTRUM: &str = "spod/spectrum.csv";
    pub const PEAKS: &str = "spod/peaks.csv";
    pub const MODES: &str = "spod/modes.lff";
    pub const LIFT_MATCHES: &str = "lift/matches.csv";
    pub const METRICS_CSV: &str = "metrics/metrics.csv";
    pub const METRICS_TXT: &str = "metrics/report.txt";
    pub const MANIFEST: &str = "manifest.json";
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for r in rows {
        wtr.serialize(r).expect("in-memory csv write");
    }
    write_text(path, &String::from_utf8(wtr.into_inner().expect("in-memory csv flush")).expect("csv is utf-8"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Dependency(path))
    }
}

/// Writes the low-rate field/pressure pairs and the high-rate pressure record.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(SampledSeries, SampledSeries)> {
    let d = &cfg.data;
    let (low, high) = wake::build_dataset(&cfg.wake, d.low_rate, d.high_rate, d.n_low, d.n_high, cfg.seed)?;
    io::write_field_file(&out.join(paths::LOW_FIELDS), &FieldSeries::new(low.snapshots.clone(), low.dt())?)?;
    io::write_pressure_file(&out.join(paths::LOW_PRESSURE), &low.pressures)?;
    io::write_pressure_file(&out.join(paths::HIGH_PRESSURE), &high.pressures)?;
    Ok((low, high))
}

pub fn load_low(cfg: &RunConfig, out: &Path) -> Result<SampledSeries> {
    let fields = io::read_field_file(&require(out.join(paths::LOW_FIELDS))?)?;
    let pressures = io::read_pressure_file(&require(out.join(paths::LOW_PRESSURE))?)?;
    let series = SampledSeries {
        rate: cfg.data.low_rate,
        snapshots: fields.snapshots,
        pressures,
    };
    series.validate()?;
    Ok(series)
}

pub fn load_high(cfg: &RunConfig, out: &Path) -> Result<SampledSeries> {
    let series = SampledSeries {
        rate: cfg.data.high_rate,
        snapshots: Vec::new(),
        pressures: io::read_pressure_file(&require(out.join(paths::HIGH_PRESSURE))?)?,
    };
    series.validate()?;
    Ok(series)
}

pub fn train_vae(cfg: &RunConfig, out: &Path) -> Result<Vec<Stage1Epoch>> {
    let low = load_low(cfg, out)?;
    let res = vae::train_stage1(&low, &cfg.vae, &cfg.train.stage1(), cfg.seed)?;
    Checkpoint::new(Stage::Vae, cfg, res.stats, &res.params).save(&out.join(paths::VAE_CHECKPOINT))?;
    write_csv(&out.join(paths::VAE_TRACE), &res.trace)?;
    Ok(res.trace)
}

pub fn load_vae(cfg: &RunConfig, out: &Path) -> Result<(PcBetaVae, ParamStore<f32>, NormalizationStats)> {
    let ck = Checkpoint::load(&out.join(paths::VAE_CHECKPOINT), Stage::Vae)?;
    ck.check_architecture(cfg)?;
    let (model, mut store) = vae::init_vae(&cfg.vae, cfg.seed)?;
    ck.load_into(&mut store)?;
    ck.stats.validate()?;
    Ok((model, store, ck.stats))
}

pub fn train_p2z(cfg: &RunConfig, out: &Path) -> Result<Vec<Stage2Epoch>> {
    let (model, vae_store, stats) = load_vae(cfg, out)?;
    let low = load_low(cfg, out)?;
    let res = p2z::train_stage2(&low, &model, &vae_store, &stats, &cfg.p2z, &cfg.train.stage2(), cfg.seed)?;
    Checkpoint::new(Stage::P2z, cfg, stats, &res.params).save(&out.join(paths::P2Z_CHECKPOINT))?;
    write_csv(&out.join(paths::P2Z_TRACE), &res.trace)?;
    Ok(res.trace)
}

pub fn load_p2z(cfg: &RunConfig, out: &Path) -> Result<(P2zNet, ParamStore<f32>)> {
    let ck = Checkpoint::load(&out.join(paths::P2Z_CHECKPOINT), Stage::P2z)?;
    ck.check_architecture(cfg)?;
    let (net, mut store) = p2z::init_p2z(&cfg.p2z, cfg.seed)?;
    ck.load_into(&mut store)?;
    Ok((net, store))
}

pub fn infer(cfg: &RunConfig, out: &Path) -> Result<SampledSeries> {
    let (model, vae_store, stats) = load_vae(cfg, out)?;
    let (net, p2z_store) = load_p2z(cfg, out)?;
    let high = load_high(cfg, out)?;
    let inferred = p2z::infer_high_frequency(&high, &net, &p2z_store, &model, &vae_store, &stats)?;
    io::write_field_file(&out.join(paths::INFERRED), &FieldSeries::new(inferred.snapshots.clone(), inferred.dt())?)?;
    Ok(inferred)
}

/// `t × M` matrix of the configured velocity component.
pub fn state_matrix(series: &[FlowSnapshot], component: Component) -> DMatrix<f64> {
    let m = series.first().map_or(0, |s| match component {
        Component::Both => 2 * s.u.len(),
        _ => s.u.len(),
    });
    DMatrix::from_fn(series.len(), m, |t, i| {
        let s = &series[t];
        let x = match component {
            Component::U => s.u[i],
            Component::V => s.v[i],
            Component::Both if i < s.u.len() => s.u[i],
            Component::Both => s.v[i - s.u.len()],
        };
        x as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralPeak {
    pub frequency: f64,
    pub lambda: f64,
    pub strouhal: f64,
}

/// SPOD with the configured settings. A record with fewer Welch blocks than
/// `spod.n_modes` yields one mode per block.
pub fn spod_of(cfg: &RunConfig, series: &[FlowSnapshot], dt: f64) -> Result<(SpodResult, Vec<SpectralPeak>)> {
    let s = &cfg.spod;
    let x = state_matrix(series, s.component);
    let n_modes = s.n_modes.min(spectral::block_count(x.nrows(), s.n_dft, s.overlap)?);
    let res = spectral::spod_decompose(&x, dt, s.n_dft, s.overlap, n_modes, s.window)?;
    let peaks = spectral::peak_frequencies(&res, s.n_peaks)
        .into_iter()
        .map(|(f, l)| {
            Ok(SpectralPeak {
                frequency: f,
                lambda: l,
                strouhal: spectral::strouhal(f, cfg.wake.body_width, cfg.wake.u_inf)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((res, peaks))
}

/// SPOD of a field file (the inferred record by default). Writes the spectrum,
/// the peak list and, per peak, the leading mode as two snapshots holding its
/// real and imaginary parts.
pub fn analyze_spod(cfg: &RunConfig, out: &Path, input: Option<&Path>) -> Result<Vec<SpectralPeak>> {
    let path = match input {
        Some(p) => require(p.to_path_buf())?,
        None => require(out.join(paths::INFERRED))?,
    };
    let fields = io::read_field_file(&path)?;
    let (res, peaks) = spod_of(cfg, &fields.snapshots, fields.dt)?;

    let mut text = String::from("frequency");
    for k in 0..cfg.spod.n_modes {
        text += &format!(",lambda_{}", k + 1);
    }
    text += ",st\n";
    for (f, l) in res.frequencies.iter().zip(&res.eigenvalues) {
        text += &f.to_string();
        for v in l {
            text += &format!(",{v}");
        }
        text += &format!(",{}\n", spectral::strouhal(*f, cfg.wake.body_width, cfg.wake.u_inf)?);
    }
    write_text(&out.join(paths::SPECTRUM), &text)?;
    write_csv(&out.join(paths::PEAKS), &peaks)?;

    let (h, w) = (cfg.wake.grid_h, cfg.wake.grid_w);
    let mut snaps = Vec::new();
    for p in &peaks {
        let k = res.frequencies.iter().position(|&f| f == p.frequency).expect("peak frequency is a bin");
        let mode = res.modes[k].column(0);
        for part in [0, 1] {
            let mut s = FlowSnapshot::zeros(snaps.len() as f64, h, w);
            for (i, z) in mode.iter().enumerate() {
                let v = if part == 0 { z.re } else { z.im } as f32;
                match cfg.spod.component {
                    Component::U => s.u[i] = v,
                    Component::V => s.v[i] = v,
                    Component::Both if i < h * w => s.u[i] = v,
                    Component::Both => s.v[i - h * w] = v,
                }
            }
            snaps.push(s);
        }
    }
    io::write_field_file(&out.join(paths::MODES), &FieldSeries::new(snaps, 1.0)?)?;
    Ok(peaks)
}

pub fn lift_series(cfg: &RunConfig, samples: &[PressureSample]) -> Result<Vec<f64>> {
    let taps = cfg.wake.taps();
    samples.iter().map(|p| lift_coefficient(p, &taps.weights, &taps.normal_y)).collect()
}

/// Matches the high-rate lift maximum against the low-rate record.
pub fn match_lift(cfg: &RunConfig, out: &Path) -> Result<Vec<MatchReport>> {
    let low = io::read_pressure_file(&require(out.join(paths::LOW_PRESSURE))?)?;
    let high = load_high(cfg, out)?;
    let matches = match_by_lift(&lift_series(cfg, &high.pressures)?, &lift_series(cfg, &low)?, cfg.eval.lift_tol)?;
    write_csv(&out.join(paths::LIFT_MATCHES), &matches)?;
    Ok(matches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub snapshots: usize,
    pub mean_error_u: f64,
    pub mean_error_v: f64,
    pub variance_error_u: f64,
    pub variance_error_v: f64,
    pub rmse_mean: f64,
    /// Mirror defect of the inferred mean v, relative to the norm of the true v fluctuation std map.
    pub mean_v_antisymmetry: f64,
    pub inferred_peaks: Vec<SpectralPeak>,
    pub truth_peaks: Vec<SpectralPeak>,
}

/// Ground truth from the analytic street at the given times.
pub fn truth_fields(cfg: &RunConfig, times: &[f64]) -> Result<Vec<FlowSnapshot>> {
    Ok(wake::sample_fields(&WakeModel::new(&cfg.wake)?, times))
}

/// Compares inferred fields (the inferred record by default) with the analytic
/// street at the same times.
pub fn evaluate(cfg: &RunConfig, out: &Path, input: Option<&Path>) -> Result<EvalSummary> {
    let path = match input {
        Some(p) => require(p.to_path_buf())?,
        None => require(out.join(paths::INFERRED))?,
    };
    let inferred = io::read_field_file(&path)?;
    let times: Vec<f64> = inferred.snapshots.iter().map(|s| s.t).collect();
    let truth = truth_fields(cfg, &times)?;
    let summary = summarize(cfg, &inferred.snapshots, &truth, inferred.dt)?;
    write_metrics(out, &summary)?;
    Ok(summary)
}

pub fn summarize(cfg: &RunConfig, inferred: &[FlowSnapshot], truth: &[FlowSnapshot], dt: f64) -> Result<EvalSummary> {
    let m = field_metrics(inferred, truth)?;
    let var = m.variance_error.ok_or_else(|| Error::InsufficientData("evaluation needs two snapshots".into()))?;
    let rmse = m.rmse.as_ref().expect("equal-length series");
    let (h, w) = (truth[0].h, truth[0].w);
    let v_scale = channel_variance(truth, 1).iter().map(|v| v.max(0.0)).sum::<f64>().sqrt();
    let (_, inferred_peaks) = spod_of(cfg, inferred, dt)?;
    let (_, truth_peaks) = spod_of(cfg, truth, dt)?;
    Ok(EvalSummary {
        snapshots: inferred.len(),
        mean_error_u: m.mean_error[0].value,
        mean_error_v: m.mean_error[1].value,
        variance_error_u: var[0].value,
        variance_error_v: var[1].value,
        rmse_mean: rmse.iter().sum::<f64>() / rmse.len() as f64,
        mean_v_antisymmetry: antisymmetry_defect(&channel_mean(inferred, 1), h, w, v_scale),
        inferred_peaks,
        truth_peaks,
    })
}

fn peak_list(peaks: &[SpectralPeak]) -> String {
    peaks
        .iter()
        .map(|p| format!("{} Hz (St {:.4}, λ {:.4e})", p.frequency, p.strouhal, p.lambda))
        .collect::<Vec<_>>()
        .join(", ")
}

fn write_metrics(out: &Path, s: &EvalSummary) -> Result<()> {
    let rows = [
        ("mean_error_u", s.mean_error_u),
        ("mean_error_v", s.mean_error_v),
        ("variance_error_u", s.variance_error_u),
        ("variance_error_v", s.variance_error_v),
        ("rmse_mean", s.rmse_mean),
        ("mean_v_antisymmetry", s.mean_v_antisymmetry),
    ];
    let mut csv = String::from("metric,value\n");
    for (k, v) in rows {
        csv += &format!("{k},{v}\n");
    }
    for (i, p) in s.inferred_peaks.iter().enumerate() {
        csv += &format!("peak_{}_hz,{}\n", i + 1, p.frequency);
    }
    write_text(&out.join(paths::METRICS_CSV), &csv)?;
    let text = format!(
        "snapshots evaluated: {}\n\
         relative L2 error of the time-mean field: u {:.4}, v {:.4}\n\
         relative L2 error of the variance map:    u {:.4}, v {:.4}\n\
         mean per-snapshot RMSE:                   {:.4} m/s\n\
         mean-v centreline antisymmetry defect:    {:.4}\n\
         SPOD peaks, inferred: {}\n\
         SPOD peaks, truth:    {}\n",
        s.snapshots,
        s.mean_error_u,
        s.mean_error_v,
        s.variance_error_u,
        s.variance_error_v,
        s.rmse_mean,
        s.mean_v_antisymmetry,
        peak_list(&s.inferred_peaks),
        peak_list(&s.truth_peaks),
    );
    write_text(&out.join(paths::METRICS_TXT), &text)
}

/// Deterministic record of a full run: no wall-clock data, only content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    pub vae_final: Option<Stage1Epoch>,
    pub p2z_final: Option<Stage2Epoch>,
    pub lift_matches: usize,
    pub metrics: EvalSummary,
}

/// generate → train-vae → train-p2z → infer → analyze-spod → match-lift →
/// evaluate, then the manifest. The first failing stage stops the run and
/// leaves earlier artifacts in place.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    generate(cfg, out)?;
    let vae_trace = train_vae(cfg, out)?;
    let p2z_trace = train_p2z(cfg, out)?;
    infer(cfg, out)?;
    analyze_spod(cfg, out, None)?;
    let matches = match_lift(cfg, out)?;
    let metrics = evaluate(cfg, out, None)?;
    let mut artifacts = BTreeMap::new();
    for rel in [
        paths::LOW_FIELDS,
        paths::LOW_PRESSURE,
        paths::HIGH_PRESSURE,
        paths::VAE_CHECKPOINT,
        paths::P2Z_CHECKPOINT,
        paths::VAE_TRACE,
        paths::P2Z_TRACE,
        paths::INFERRED,
        paths::SPECTRUM,
        paths::PEAKS,
        paths::MODES,
        paths::LIFT_MATCHES,
        paths::METRICS_CSV,
        paths::METRICS_TXT,
    ] {
        artifacts.insert(rel.to_string(), io::file_digest(&out.join(rel))?);
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        artifacts,
        vae_final: vae_trace.last().copied(),
        p2z_final: p2z_trace.last().copied(),
        lift_matches: matches.len(),
        metrics,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_text(&out.join(paths::MANIFEST), &(json + "\n"))?;
    Ok(manifest)
}
