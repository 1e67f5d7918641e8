//! Analytic von Kármán street with phase-locked wall pressure.
//!
//! The field is a uniform stream plus two staggered rows of Gaussian-core
//! vortices of opposite sign that convect downstream. Vortex strength is
//! tapered by a smooth streamwise envelope that vanishes at both ends of the
//! lattice, so the field is exactly periodic in time with period `1/f0`.
//!
//! Pressure taps sit on a circular body of unit width. Each tap carries a mean
//! `Cp`, a fundamental at `f0` and a first harmonic, all locked to the same
//! phase variable that positions the vortex lattice.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Shedding frequency of the desk configuration.
///
/// Sampling an exact 4 Hz street at exactly 1 Hz sees the same phase at every
/// sample. The detuning (golden-ratio fraction of 0.1 Hz) makes the low-rate
/// phases equidistribute over the cycle while staying well inside one SPOD bin
/// of 4 Hz.
pub const DESK_SHED_FREQ: f64 = 4.061_803_398_874_989;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WakeConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Streamwise extent in body widths, measured from the body centre.
    pub x_extent: [f64; 2],
    /// Cross-stream extent in body widths.
    pub y_extent: [f64; 2],
    /// Body width D in metres.
    pub body_width: f64,
    pub u_inf: f64,
    pub shed_freq: f64,
    /// Vortex convection speed as a fraction of `u_inf`.
    pub convection_ratio: f64,
    /// Vortex circulation magnitude, m²/s.
    pub circulation: f64,
    /// Gaussian core radius in body widths.
    pub core_radius: f64,
    /// Half the spacing between the two vortex rows, in body widths.
    pub row_offset: f64,
    /// Phase of the street at t = 0, radians.
    pub phase_offset: f64,
    pub n_taps: usize,
    /// Fundamental Cp amplitude at the top tap.
    pub cp_fluct_amp: f64,
    /// Harmonic Cp amplitude scale.
    pub cp_harmonic_amp: f64,
    /// Streamwise phase lag across the body, radians.
    pub tap_phase_lag: f64,
    pub noise_std: f64,
}

impl Default for WakeConfig {
    fn default() -> Self {
        Self {
            grid_h: 64,
            grid_w: 64,
            x_extent: [0.75, 8.75],
            y_extent: [-2.0, 2.0],
            body_width: 0.5,
            u_inf: 10.0,
            shed_freq: DESK_SHED_FREQ,
            convection_ratio: 0.85,
            circulation: 4.5,
            core_radius: 0.3,
            row_offset: 0.6,
            phase_offset: 0.7,
            n_taps: 30,
            cp_fluct_amp: 0.6,
            cp_harmonic_amp: 0.25,
            tap_phase_lag: 0.4,
            noise_std: 0.02,
        }
    }
}

impl WakeConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = |key: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite, got {v}")))
            }
        };
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {v}")))
            }
        };
        if self.grid_h < 8 {
            return Err(Error::config("grid_h", "must be at least 8"));
        }
        if self.grid_w < 8 {
            return Err(Error::config("grid_w", "must be at least 8"));
        }
        for (key, ext) in [("x_extent", self.x_extent), ("y_extent", self.y_extent)] {
            finite(key, ext[0])?;
            finite(key, ext[1])?;
            if ext[1] <= ext[0] {
                return Err(Error::config(key, "upper bound must exceed lower bound"));
            }
        }
        positive("body_width", self.body_width)?;
        positive("u_inf", self.u_inf)?;
        positive("shed_freq", self.shed_freq)?;
        positive("convection_ratio", self.convection_ratio)?;
        positive("core_radius", self.core_radius)?;
        finite("circulation", self.circulation)?;
        finite("row_offset", self.row_offset)?;
        finite("phase_offset", self.phase_offset)?;
        finite("cp_fluct_amp", self.cp_fluct_amp)?;
        finite("cp_harmonic_amp", self.cp_harmonic_amp)?;
        finite("tap_phase_lag", self.tap_phase_lag)?;
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be finite and non-negative"));
        }
        if self.n_taps < 2 {
            return Err(Error::config("n_taps", "must be at least 2"));
        }
        Ok(())
    }

    /// Streamwise vortex spacing in metres.
    pub fn wavelength(&self) -> f64 {
        self.convection_ratio * self.u_inf / self.shed_freq
    }

    pub fn x_coords(&self) -> Vec<f64> {
        linspace(self.x_extent[0], self.x_extent[1], self.grid_w)
            .map(|x| x * self.body_width)
            .collect()
    }

    /// Row coordinates; row 0 is the lowest `y`.
    pub fn y_coords(&self) -> Vec<f64> {
        linspace(self.y_extent[0], self.y_extent[1], self.grid_h)
            .map(|y| y * self.body_width)
            .collect()
    }

    /// Street phase in cycles, reduced to `[0, 1)`.
    pub fn cycles_at(&self, t: f64) -> f64 {
        reduce_cycles(self.shed_freq * t + self.phase_offset / (2.0 * PI))
    }

    pub fn taps(&self) -> TapLayout {
        TapLayout::circular(self)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(move |i| if i + 1 == n { b } else { a + step * i as f64 })
}

fn reduce_cycles(c: f64) -> f64 {
    let r = c - c.floor();
    // floor(1 - ulp) leaves a value that rounds to 1.0
    if r < 1e-13 || 1.0 - r < 1e-13 {
        0.0
    } else {
        r
    }
}

/// One velocity field on the H×W grid, row-major with row 0 at the lowest `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSnapshot {
    pub t: f64,
    pub h: usize,
    pub w: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowSnapshot {
    pub const CHANNELS: usize = 2;

    pub fn zeros(t: f64, h: usize, w: usize) -> Self {
        Self {
            t,
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
        }
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        match c {
            0 => &self.u,
            1 => &self.v,
            _ => panic!("flow snapshots have two channels, asked for {c}"),
        }
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        match c {
            0 => &mut self.u,
            1 => &mut self.v,
            _ => panic!("flow snapshots have two channels, asked for {c}"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PressureSample {
    pub t: f64,
    pub cp: Vec<f64>,
}

/// A uniformly sampled record. `snapshots` is empty for pressure-only series.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSeries {
    pub rate: f64,
    pub snapshots: Vec<FlowSnapshot>,
    pub pressures: Vec<PressureSample>,
}

impl SampledSeries {
    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn len(&self) -> usize {
        self.pressures.len().max(self.snapshots.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamps(&self) -> Vec<f64> {
        if self.pressures.is_empty() {
            self.snapshots.iter().map(|s| s.t).collect()
        } else {
            self.pressures.iter().map(|p| p.t).collect()
        }
    }

    /// Checks uniform spacing and, when both modalities are present, that they
    /// share timestamps.
    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::config("rate", "must be positive"));
        }
        let ts = self.timestamps();
        let dt = self.dt();
        for (k, pair) in ts.windows(2).enumerate() {
            let step = pair[1] - pair[0];
            if !(step > 0.0) || (step - dt).abs() > 1e-9 * dt.max(1.0) {
                return Err(Error::InsufficientData(format!(
                    "timestamps not uniformly spaced at index {}: step {step}, expected {dt}",
                    k + 1
                )));
            }
        }
        if !self.snapshots.is_empty() && !self.pressures.is_empty() {
            if self.snapshots.len() != self.pressures.len() {
                return Err(Error::Dimension(format!(
                    "{} snapshots but {} pressure samples",
                    self.snapshots.len(),
                    self.pressures.len()
                )));
            }
            for (k, (s, p)) in self.snapshots.iter().zip(&self.pressures).enumerate() {
                if s.t != p.t {
                    return Err(Error::Dimension(format!(
                        "snapshot {k} at t={} but pressure at t={}",
                        s.t, p.t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tap positions on the body together with the quadrature used for lift.
#[derive(Clone, Debug, PartialEq)]
pub struct TapLayout {
    /// Angle of each tap from the +x axis; tap 0 is at the top of the body.
    pub angles: Vec<f64>,
    /// Arc length per tap in body widths.
    pub weights: Vec<f64>,
    /// y component of the outward surface normal.
    pub normal_y: Vec<f64>,
}

impl TapLayout {
    fn circular(cfg: &WakeConfig) -> Self {
        let n = cfg.n_taps;
        let angles: Vec<f64> = (0..n)
            .map(|i| PI / 2.0 + 2.0 * PI * i as f64 / n as f64)
            .collect();
        let weights = vec![PI / n as f64; n];
        let normal_y = angles.iter().map(|a| a.sin()).collect();
        Self {
            angles,
            weights,
            normal_y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Vortex {
    x: f64,
    y: f64,
    strength: f64,
}

/// Precomputed evaluator for a validated [`WakeConfig`].
#[derive(Clone, Debug)]
pub struct WakeModel {
    cfg: WakeConfig,
    xs: Vec<f64>,
    ys: Vec<f64>,
    lambda: f64,
    env_start: f64,
    env_end: f64,
    ramp: f64,
    n_lattice: i64,
    core2: f64,
    cp_mean: Vec<f64>,
    cp_fund: Vec<f64>,
    cp_harm: Vec<f64>,
    cp_phase: Vec<f64>,
}

impl WakeModel {
    pub fn new(cfg: &WakeConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.body_width;
        let lambda = cfg.wavelength();
        let env_start = 0.0;
        let env_end = cfg.x_extent[1] * d + 1.5 * lambda;
        let ramp = lambda.min(0.5 * (env_end - env_start));
        let n_lattice = ((env_end - env_start) / lambda).ceil() as i64 + 2;

        let taps = cfg.taps();
        let mut cp_mean = Vec::with_capacity(cfg.n_taps);
        let mut cp_fund = Vec::with_capacity(cfg.n_taps);
        let mut cp_harm = Vec::with_capacity(cfg.n_taps);
        let mut cp_phase = Vec::with_capacity(cfg.n_taps);
        for &theta in &taps.angles {
            let (s, c) = theta.sin_cos();
            // Stagnation at the front (c = -1), flat base pressure behind.
            cp_mean.push(if c <= 0.0 { 1.0 - 2.2 * s * s } else { -1.2 });
            cp_fund.push(cfg.cp_fluct_amp * s.abs());
            cp_harm.push(cfg.cp_harmonic_amp * (0.5 + 0.5 * c));
            let side = if s < 0.0 { PI } else { 0.0 };
            cp_phase.push(cfg.phase_offset + cfg.tap_phase_lag * c + side);
        }

        Ok(Self {
            xs: cfg.x_coords(),
            ys: cfg.y_coords(),
            lambda,
            env_start,
            env_end,
            ramp,
            n_lattice,
            core2: (cfg.core_radius * d).powi(2),
            cp_mean,
            cp_fund,
            cp_harm,
            cp_phase,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &WakeConfig {
        &self.cfg
    }

    fn envelope(&self, x: f64) -> f64 {
        if x <= self.env_start || x >= self.env_end {
            return 0.0;
        }
        let rise = ((x - self.env_start) / self.ramp).min(1.0);
        let fall = ((self.env_end - x) / self.ramp).min(1.0);
        let s = (0.5 * PI * rise).sin() * (0.5 * PI * fall).sin();
        s * s
    }

    fn vortices(&self, cycles: f64) -> Vec<Vortex> {
        let a = self.cfg.row_offset * self.cfg.body_width;
        let gamma = self.cfg.circulation;
        let mut out = Vec::with_capacity(2 * (self.n_lattice as usize + 2));
        for m in -1..=self.n_lattice {
            let xu = self.env_start + (m as f64 + cycles) * self.lambda;
            let xl = xu + 0.5 * self.lambda;
            let (wu, wl) = (self.envelope(xu), self.envelope(xl));
            // Upper row turns clockwise, lower row counter-clockwise.
            if wu > 0.0 {
                out.push(Vortex {
                    x: xu,
                    y: a,
                    strength: -gamma * wu,
                });
            }
            if wl > 0.0 {
                out.push(Vortex {
                    x: xl,
                    y: -a,
                    strength: gamma * wl,
                });
            }
        }
        out
    }

    fn induced(&self, vortices: &[Vortex], x: f64, y: f64) -> (f64, f64) {
        let mut u = self.cfg.u_inf;
        let mut v = 0.0;
        for vx in vortices {
            let dx = x - vx.x;
            let dy = y - vx.y;
            let r2 = dx * dx + dy * dy;
            let q = r2 / self.core2;
            // (1 - exp(-q)) / r², with the q → 0 limit 1/core².
            let kernel = if q < 1e-8 {
                (1.0 - 0.5 * q) / self.core2
            } else {
                -(-q).exp_m1() / r2
            };
            let f = vx.strength / (2.0 * PI) * kernel;
            u -= f * dy;
            v += f * dx;
        }
        (u, v)
    }

    /// Velocity at a point (metres) for a street phase given in cycles.
    pub fn velocity(&self, x: f64, y: f64, cycles: f64) -> (f64, f64) {
        let vortices = self.vortices(reduce_cycles(cycles));
        self.induced(&vortices, x, y)
    }

    pub fn field_at_cycles(&self, t: f64, cycles: f64) -> FlowSnapshot {
        let vortices = self.vortices(reduce_cycles(cycles));
        let (h, w) = (self.cfg.grid_h, self.cfg.grid_w);
        let mut snap = FlowSnapshot::zeros(t, h, w);
        for (i, &y) in self.ys.iter().enumerate() {
            for (j, &x) in self.xs.iter().enumerate() {
                let (u, v) = self.induced(&vortices, x, y);
                snap.u[i * w + j] = u as f32;
                snap.v[i * w + j] = v as f32;
            }
        }
        snap
    }

    pub fn field(&self, t: f64) -> FlowSnapshot {
        self.field_at_cycles(t, self.cfg.cycles_at(t))
    }

    /// Noise-free tap coefficients at time `t`.
    pub fn cp_clean(&self, t: f64) -> Vec<f64> {
        let cycles = self.cfg.shed_freq * t;
        let wt = 2.0 * PI * (cycles - cycles.floor());
        (0..self.cfg.n_taps)
            .map(|i| {
                let ph = self.cp_phase[i];
                self.cp_mean[i]
                    + self.cp_fund[i] * (wt + ph).sin()
                    + self.cp_harm[i] * (2.0 * wt + 2.0 * ph).sin()
            })
            .collect()
    }

    pub fn pressure<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> PressureSample {
        let mut cp = self.cp_clean(t);
        if self.cfg.noise_std > 0.0 {
            for c in &mut cp {
                let e: f64 = StandardNormal.sample(rng);
                *c += self.cfg.noise_std * e;
            }
        }
        PressureSample { t, cp }
    }
}

pub fn generate_field(cfg: &WakeConfig, t: f64) -> Result<FlowSnapshot> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::config("t", format!("must be finite and >= 0, got {t}")));
    }
    Ok(WakeModel::new(cfg)?.field(t))
}

pub fn sample_pressure<R: Rng + ?Sized>(
    cfg: &WakeConfig,
    t: f64,
    rng: &mut R,
) -> Result<PressureSample> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::config("t", format!("must be finite and >= 0, got {t}")));
    }
    Ok(WakeModel::new(cfg)?.pressure(t, rng))
}

/// Uniform timestamps `k · (1 / rate)`, the same expression field files use
/// to rebuild times from `t0` and `dt`.
pub fn timestamps(rate: f64, n: usize) -> Vec<f64> {
    let dt = 1.0 / rate;
    (0..n).map(|k| k as f64 * dt).collect()
}

/// Ground-truth fields at the given times. Pure per timestamp, so the result
/// does not depend on the thread count.
pub fn sample_fields(model: &WakeModel, times: &[f64]) -> Vec<FlowSnapshot> {
    times.par_iter().map(|&t| model.field(t)).collect()
}

/// Pressure samples whose noise for sample `k` comes from substream `(seed, stream, k)`.
pub fn sample_pressures(
    model: &WakeModel,
    times: &[f64],
    seed: u64,
    stream: &str,
) -> Vec<PressureSample> {
    times
        .par_iter()
        .enumerate()
        .map(|(k, &t)| model.pressure(t, &mut rng::substream(seed, stream, k as u64)))
        .collect()
}

/// Low-rate flow+pressure pairs and a high-rate pressure-only record drawn
/// from the same street.
pub fn build_dataset(
    cfg: &WakeConfig,
    low_rate: f64,
    high_rate: f64,
    n_low: usize,
    n_high: usize,
    seed: u64,
) -> Result<(SampledSeries, SampledSeries)> {
    if !(low_rate.is_finite() && low_rate > 0.0) {
        return Err(Error::config("low_rate", "must be positive"));
    }
    if !(high_rate.is_finite() && high_rate > 0.0) {
        return Err(Error::config("high_rate", "must be positive"));
    }
    if low_rate >= high_rate {
        return Err(Error::config("low_rate", "must be below high_rate"));
    }
    let model = WakeModel::new(cfg)?;
    let t_low = timestamps(low_rate, n_low);
    let t_high = timestamps(high_rate, n_high);
    let low = SampledSeries {
        rate: low_rate,
        snapshots: sample_fields(&model, &t_low),
        pressures: sample_pressures(&model, &t_low, seed, "pressure-low"),
    };
    let high = SampledSeries {
        rate: high_rate,
        snapshots: Vec::new(),
        pressures: sample_pressures(&model, &t_high, seed, "pressure-high"),
    };
    Ok((low, high))
}
