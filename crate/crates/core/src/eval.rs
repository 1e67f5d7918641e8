//! Unit conversions, lift-based snapshot matching and reconstruction metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::wake::{FlowSnapshot, PressureSample};

/// Per-channel velocity statistics plus the reference state for `Cp`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub rho: f64,
    pub u_ref: f64,
}

pub const AIR_DENSITY: f64 = 1.225;
pub const REFERENCE_VELOCITY: f64 = 10.0;

impl Default for NormalizationStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
            rho: AIR_DENSITY,
            u_ref: REFERENCE_VELOCITY,
        }
    }
}

impl NormalizationStats {
    /// Mean and population standard deviation of each channel over all
    /// snapshots and grid points.
    pub fn from_snapshots(snaps: &[FlowSnapshot]) -> Result<Self> {
        if snaps.is_empty() {
            return Err(Error::EmptyInput("normalization statistics"));
        }
        let mut stats = Self::default();
        for c in 0..2 {
            let n = snaps.iter().map(|s| s.channel(c).len()).sum::<usize>() as f64;
            let mean = snaps
                .iter()
                .flat_map(|s| s.channel(c))
                .map(|&x| x as f64)
                .sum::<f64>()
                / n;
            let var = snaps
                .iter()
                .flat_map(|s| s.channel(c))
                .map(|&x| (x as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            stats.mean[c] = mean;
            // A constant channel is left unscaled.
            stats.std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for c in 0..2 {
            if !(self.std[c].is_finite() && self.std[c] > 0.0) {
                return Err(Error::config("std", "must be positive"));
            }
            if !self.mean[c].is_finite() {
                return Err(Error::config("mean", "must be finite"));
            }
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::config("rho", "must be positive"));
        }
        if !(self.u_ref.is_finite() && self.u_ref > 0.0) {
            return Err(Error::config("u_ref", "must be positive"));
        }
        Ok(())
    }

    /// Standardised `[2, H, W]` network input.
    pub fn standardize(&self, snap: &FlowSnapshot) -> Tensor<f32> {
        let mut data = Vec::with_capacity(2 * snap.h * snap.w);
        for c in 0..2 {
            data.extend(
                snap.channel(c)
                    .iter()
                    .map(|&x| ((x as f64 - self.mean[c]) / self.std[c]) as f32),
            );
        }
        Tensor::new(vec![2, snap.h, snap.w], data).expect("snapshot channel sizes")
    }

    /// Inverse of [`standardize`](Self::standardize).
    pub fn destandardize(&self, field: &Tensor<f32>, t: f64) -> Result<FlowSnapshot> {
        let (c, h, w) = field.dims3("destandardize")?;
        if c != 2 {
            return Err(Error::shape("destandardize", format!("expected 2 channels, got {c}")));
        }
        let mut snap = FlowSnapshot::zeros(t, h, w);
        for ch in 0..2 {
            let src = &field.data()[ch * h * w..(ch + 1) * h * w];
            for (dst, &x) in snap.channel_mut(ch).iter_mut().zip(src) {
                *dst = (x as f64 * self.std[ch] + self.mean[ch]) as f32;
            }
        }
        Ok(snap)
    }

    fn dynamic_pressure(&self) -> f64 {
        0.5 * self.rho * self.u_ref * self.u_ref
    }
}

/// `Cp = p / (½ ρ u²)`.
pub fn pressure_to_cp(p: f64, stats: &NormalizationStats) -> f64 {
    p / stats.dynamic_pressure()
}

pub fn cp_to_pressure(cp: f64, stats: &NormalizationStats) -> f64 {
    cp * stats.dynamic_pressure()
}

/// Discrete surface integral `C_l = −Σ Cp_i · w_i · n_y,i`.
pub fn lift_coefficient(p: &PressureSample, weights: &[f64], normal_y: &[f64]) -> Result<f64> {
    if weights.len() != p.cp.len() || normal_y.len() != p.cp.len() {
        return Err(Error::Dimension(format!(
            "{} taps, {} weights, {} normals",
            p.cp.len(),
            weights.len(),
            normal_y.len()
        )));
    }
    Ok(-p
        .cp
        .iter()
        .zip(weights)
        .zip(normal_y)
        .map(|((c, w), n)| c * w * n)
        .sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub high_index: usize,
    pub low_index: usize,
    pub cl_high: f64,
    pub cl_low: f64,
    pub delta: f64,
}

/// Pairs the high-rate lift maximum with every low-rate sample within `tol`
/// of it, closest first. No candidate within `tol` yields an empty list.
pub fn match_by_lift(cl_high: &[f64], cl_low: &[f64], tol: f64) -> Result<Vec<MatchReport>> {
    if cl_high.is_empty() {
        return Err(Error::EmptyInput("high-rate lift series"));
    }
    if cl_low.is_empty() {
        return Err(Error::EmptyInput("low-rate lift series"));
    }
    let (high_index, &cl_max) = cl_high
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    let mut out: Vec<MatchReport> = cl_low
        .iter()
        .enumerate()
        .filter_map(|(low_index, &cl)| {
            let delta = (cl_max - cl).abs();
            (delta <= tol).then_some(MatchReport {
                high_index,
                low_index,
                cl_high: cl_max,
                cl_low: cl,
                delta,
            })
        })
        .collect();
    out.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.low_index.cmp(&b.low_index)));
    Ok(out)
}

/// A relative error, or an absolute one when the reference norm is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelError {
    pub value: f64,
    pub absolute: bool,
}

fn rel_error(est: &[f64], truth: &[f64]) -> RelError {
    let diff = est
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = truth.iter().map(|b| b * b).sum::<f64>().sqrt();
    if norm > 0.0 {
        RelError {
            value: diff / norm,
            absolute: false,
        }
    } else {
        RelError {
            value: diff,
            absolute: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMetrics {
    /// Relative L2 error of the time-mean field, per channel (u, v).
    pub mean_error: [RelError; 2],
    /// Relative L2 error of the per-point temporal variance map; needs two snapshots.
    pub variance_error: Option<[RelError; 2]>,
    /// Per-snapshot RMSE over both channels, when the series have equal length.
    pub rmse: Option<Vec<f64>>,
}

fn check_grid(a: &[FlowSnapshot], b: &[FlowSnapshot]) -> Result<(usize, usize)> {
    let (h, w) = (b[0].h, b[0].w);
    for s in a.iter().chain(b) {
        if (s.h, s.w) != (h, w) || s.u.len() != h * w || s.v.len() != h * w {
            return Err(Error::Dimension(format!(
                "snapshot grid {}x{} does not match {h}x{w}",
                s.h, s.w
            )));
        }
    }
    Ok((h, w))
}

/// Per-point time mean of one channel.
pub fn channel_mean(series: &[FlowSnapshot], c: usize) -> Vec<f64> {
    let m = series[0].channel(c).len();
    let mut acc = vec![0.0; m];
    for s in series {
        for (a, &x) in acc.iter_mut().zip(s.channel(c)) {
            *a += x as f64;
        }
    }
    let n = series.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Per-point unbiased temporal variance of one channel.
pub fn channel_variance(series: &[FlowSnapshot], c: usize) -> Vec<f64> {
    let mean = channel_mean(series, c);
    let mut acc = vec![0.0; mean.len()];
    for s in series {
        for ((a, &x), &m) in acc.iter_mut().zip(s.channel(c)).zip(&mean) {
            *a += (x as f64 - m).powi(2);
        }
    }
    let n = (series.len() - 1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Compares an estimate `a` against ground truth `b`.
pub fn field_metrics(a: &[FlowSnapshot], b: &[FlowSnapshot]) -> Result<FieldMetrics> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("field series"));
    }
    let (h, w) = check_grid(a, b)?;
    let mean_error = [0, 1].map(|c| rel_error(&channel_mean(a, c), &channel_mean(b, c)));
    let variance_error = (a.len() >= 2 && b.len() >= 2)
        .then(|| [0, 1].map(|c| rel_error(&channel_variance(a, c), &channel_variance(b, c))));
    let rmse = (a.len() == b.len()).then(|| {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let sq: f64 = x
                    .u
                    .iter()
                    .chain(&x.v)
                    .zip(y.u.iter().chain(&y.v))
                    .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                    .sum();
                (sq / (2 * h * w) as f64).sqrt()
            })
            .collect()
    });
    Ok(FieldMetrics {
        mean_error,
        variance_error,
        rmse,
    })
}

/// Mirror defect of a cross-stream field about the centreline:
/// `‖f(x, y) + f(x, −y)‖ / scale`. Rows must be symmetric about `y = 0`.
pub fn antisymmetry_defect(field: &[f64], h: usize, w: usize, scale: f64) -> f64 {
    let mut sq = 0.0;
    for i in 0..h {
        let mirror = h - 1 - i;
        for j in 0..w {
            sq += (field[i * w + j] + field[mirror * w + j]).powi(2);
        }
    }
    sq.sqrt() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wake::{WakeConfig, WakeModel};

    #[test]
    fn dynamic_pressure_conversion() {
        let s = NormalizationStats::default();
        assert_eq!(pressure_to_cp(61.25, &s), 1.0);
        assert_eq!(pressure_to_cp(0.0, &s), 0.0);
        for cp in [-1.7, 0.3, 2.25] {
            assert!((pressure_to_cp(cp_to_pressure(cp, &s), &s) - cp).abs() < 1e-12);
        }
    }

    #[test]
    fn lift_examples() {
        let uniform = PressureSample {
            t: 0.0,
            cp: vec![0.4; 4],
        };
        let w = [1.0; 4];
        let ny = [1.0, 0.0, -1.0, 0.0];
        assert_eq!(lift_coefficient(&uniform, &w, &ny).unwrap(), 0.0);

        let two = PressureSample {
            t: 0.0,
            cp: vec![-1.0, 1.0],
        };
        assert_eq!(lift_coefficient(&two, &[1.0, 1.0], &[1.0, -1.0]).unwrap(), 2.0);
        assert!(lift_coefficient(&two, &[1.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn synthetic_lift_is_sinusoidal_at_shedding_frequency() {
        let cfg = WakeConfig {
            noise_std: 0.0,
            ..WakeConfig::default()
        };
        let model = WakeModel::new(&cfg).unwrap();
        let taps = cfg.taps();
        let n = 256;
        let rate = 64.0 * cfg.shed_freq;
        let cl: Vec<f64> = (0..n)
            .map(|k| {
                let p = PressureSample {
                    t: k as f64 / rate,
                    cp: model.cp_clean(k as f64 / rate),
                };
                lift_coefficient(&p, &taps.weights, &taps.normal_y).unwrap()
            })
            .collect();
        let mags: Vec<f64> = (0..n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (j, &v) in cl.iter().enumerate() {
                    let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re.hypot(im)
            })
            .collect();
        let peak = (1..n / 2).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert_eq!(peak, 4);
        // Symmetric mean pressure and harmonic cancel in the lift.
        assert!(mags[0] < 1e-9 && mags[8] < 1e-9);
    }

    #[test]
    fn matching_examples() {
        let same = [0.1, 0.9, 0.3];
        let m = match_by_lift(&same, &same, 1e-12).unwrap();
        assert_eq!((m[0].high_index, m[0].low_index, m[0].delta), (1, 1, 0.0));

        let high: Vec<f64> = (0..64)
            .map(|k| (2.0 * std::f64::consts::PI * (k as f64 + 0.3) / 64.0).sin())
            .collect();
        let low: Vec<f64> = high.iter().step_by(16).copied().collect();
        let m = match_by_lift(&high, &low, 0.5).unwrap();
        // Peak sits between high samples 15 and 16; low index 1 is sample 16.
        assert_eq!(m[0].low_index, 1);
        let spacing = 2.0 * std::f64::consts::PI / 64.0;
        assert!(m[0].delta <= 1.0 - (spacing).cos());

        let no_tie = [0.0, 0.5, 0.25];
        assert!(match_by_lift(&no_tie, &[0.1, 0.2], 0.0).unwrap().is_empty());
        assert!(match_by_lift(&[], &[0.1], 0.1).is_err());
    }

    fn series(n: usize, f: impl Fn(usize, usize) -> (f32, f32)) -> Vec<FlowSnapshot> {
        (0..n)
            .map(|k| {
                let mut s = FlowSnapshot::zeros(k as f64, 3, 4);
                for i in 0..12 {
                    let (u, v) = f(k, i);
                    s.u[i] = u;
                    s.v[i] = v;
                }
                s
            })
            .collect()
    }

    #[test]
    fn metric_examples() {
        let b = series(5, |k, i| (1.0 + (k * i) as f32 * 0.25, (k as f32 - i as f32) * 0.5));
        let m = field_metrics(&b, &b).unwrap();
        assert_eq!(m.mean_error[0].value, 0.0);
        assert_eq!(m.variance_error.unwrap()[1].value, 0.0);
        assert!(m.rmse.unwrap().iter().all(|&r| r == 0.0));

        let c = 0.5f32;
        let a: Vec<FlowSnapshot> = b
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.u.iter_mut().for_each(|u| *u -= c);
                s
            })
            .collect();
        let m = field_metrics(&a, &b).unwrap();
        let mean_b = channel_mean(&b, 0);
        let norm = mean_b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = c as f64 * (12f64).sqrt() / norm;
        assert!((m.mean_error[0].value - want).abs() < 1e-6);
        assert!(m.variance_error.unwrap()[0].value < 1e-6);

        let zeros = series(5, |_, _| (0.0, 0.0));
        let m = field_metrics(&zeros, &b).unwrap();
        assert_eq!(m.mean_error[0].value, 1.0);
        assert_eq!(m.variance_error.unwrap()[0].value, 1.0);

        let odd = vec![FlowSnapshot::zeros(0.0, 2, 2)];
        assert!(matches!(field_metrics(&odd, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn standardize_round_trip() {
        let snaps = series(4, |k, i| (10.0 + (k + i) as f32, (i as f32) - 3.0));
        let stats = NormalizationStats::from_snapshots(&snaps).unwrap();
        let t = stats.standardize(&snaps[2]);
        let back = stats.destandardize(&t, snaps[2].t).unwrap();
        for (a, b) in back.u.iter().chain(&back.v).zip(snaps[2].u.iter().chain(&snaps[2].v)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
