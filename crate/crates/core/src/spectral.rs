//! Time averages, POD and Welch-based SPOD of snapshot series.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wake::FlowSnapshot;

/// Pointwise time mean of a series, kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanField {
    pub h: usize,
    pub w: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn time_average(series: &[FlowSnapshot]) -> Result<MeanField> {
    let first = series.first().ok_or(Error::EmptyInput("snapshot series"))?;
    let (h, w) = (first.h, first.w);
    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    for s in series {
        if (s.h, s.w) != (h, w) {
            return Err(Error::Dimension(format!("snapshot {}x{} in a {h}x{w} series", s.h, s.w)));
        }
        for i in 0..h * w {
            u[i] += s.u[i] as f64;
            v[i] += s.v[i] as f64;
        }
    }
    let n = series.len() as f64;
    u.iter_mut().chain(v.iter_mut()).for_each(|x| *x /= n);
    Ok(MeanField { h, w, u, v })
}

/// Mean-subtracted data matrix: row `j` is snapshot `j` minus the time mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    pub mean: Vec<f64>,
    pub fluct: DMatrix<f64>,
    pub dt: f64,
}

/// Which velocity components enter the state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    U,
    V,
    Both,
}

impl SnapshotMatrix {
    pub fn from_rows(rows: &[Vec<f64>], dt: f64) -> Result<Self> {
        let t = rows.len();
        if t == 0 {
            return Err(Error::EmptyInput("snapshot matrix"));
        }
        let m = rows[0].len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension("snapshot rows must share a non-zero length".into()));
        }
        let mut mean = vec![0.0; m];
        for r in rows {
            for (a, x) in mean.iter_mut().zip(r) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= t as f64);
        let fluct = DMatrix::from_fn(t, m, |j, i| rows[j][i] - mean[i]);
        Ok(Self { mean, fluct, dt })
    }

    pub fn from_snapshots(series: &[FlowSnapshot], component: Component, dt: f64) -> Result<Self> {
        let rows: Vec<Vec<f64>> = series
            .iter()
            .map(|s| {
                let it: Box<dyn Iterator<Item = &f32>> = match component {
                    Component::U => Box::new(s.u.iter()),
                    Component::V => Box::new(s.v.iter()),
                    Component::Both => Box::new(s.u.iter().chain(&s.v)),
                };
                it.map(|&x| x as f64).collect()
            })
            .collect();
        Self::from_rows(&rows, dt)
    }

    pub fn snapshots(&self) -> usize {
        self.fluct.nrows()
    }

    pub fn points(&self) -> usize {
        self.fluct.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PodMethod {
    /// Snapshot method when there are fewer snapshots than points.
    Auto,
    Snapshot,
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PodResult {
    /// `M × r`, orthonormal columns.
    pub modes: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// `t × r` temporal coefficients `Q̂ Φ`.
    pub coefficients: DMatrix<f64>,
    /// Fraction of the total variance (trace of the covariance) in the leading `k` modes.
    pub cumulative_energy: Vec<f64>,
}

/// Eigenpairs of a symmetric matrix sorted by decreasing eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Replaces columns `from..` with an orthonormal completion of the first `from`.
fn complete_basis(modes: &mut DMatrix<f64>, from: usize) {
    let m = modes.nrows();
    let mut next = 0;
    for c in from..modes.ncols() {
        loop {
            let mut v = DVector::<f64>::zeros(m);
            v[next % m] = 1.0;
            next += 1;
            for _ in 0..2 {
                for k in 0..c {
                    let q = modes.column(k).clone_owned();
                    let p = q.dot(&v);
                    v -= q * p;
                }
            }
            let n = v.norm();
            if n > 1e-8 {
                modes.set_column(c, &(v / n));
                break;
            }
        }
    }
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_signs(modes: &mut DMatrix<f64>) {
    for mut col in modes.column_iter_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &x in col.iter() {
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}

/// Leading `r` eigenpairs of `C = Q̂ᵀQ̂ / (t − 1)`.
pub fn pod_decompose(x: &SnapshotMatrix, r: usize, method: PodMethod) -> Result<PodResult> {
    let (t, m) = (x.snapshots(), x.points());
    if t < 2 {
        return Err(Error::InsufficientData(format!("POD needs at least 2 snapshots, got {t}")));
    }
    let max_r = (t - 1).min(m);
    if r == 0 || r > max_r {
        return Err(Error::Range {
            what: "mode count",
            msg: format!("{r} not in 1..={max_r} for {t} snapshots of {m} points"),
        });
    }
    let q = &x.fluct;
    let scale = 1.0 / (t - 1) as f64;
    let snapshot = match method {
        PodMethod::Auto => t < m,
        PodMethod::Snapshot => true,
        PodMethod::Direct => false,
    };
    let (all, mut modes) = if snapshot {
        let (vals, vecs) = sorted_eigen(q * q.transpose() * scale);
        let mut modes = DMatrix::zeros(m, r);
        let floor = vals[0].abs().max(f64::MIN_POSITIVE) * 1e-12;
        let mut good = 0;
        for i in 0..r {
            if vals[i] <= floor {
                break;
            }
            let col = q.transpose() * vecs.column(i) / ((t - 1) as f64 * vals[i]).sqrt();
            modes.set_column(i, &col);
            good += 1;
        }
        complete_basis(&mut modes, good);
        (vals, modes)
    } else {
        let (vals, vecs) = sorted_eigen(q.transpose() * q * scale);
        (vals, vecs.columns(0, r).into_owned())
    };
    fix_signs(&mut modes);
    let eigenvalues: Vec<f64> = all[..r].iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = q.iter().map(|v| v * v).sum::<f64>() * scale;
    let mut acc = 0.0;
    let cumulative_energy = eigenvalues
        .iter()
        .map(|l| {
            acc += l;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect();
    let coefficients = q * &modes;
    Ok(PodResult {
        modes,
        eigenvalues,
        coefficients,
        cumulative_energy,
    })
}

/// `q̄ + Σ_i a_ji Φ_i` for snapshot `j`.
pub fn pod_reconstruct(x: &SnapshotMatrix, pod: &PodResult, j: usize) -> Vec<f64> {
    let fl = &pod.modes * pod.coefficients.row(j).transpose();
    x.mean.iter().zip(fl.iter()).map(|(a, b)| a + b).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hamming,
    Rectangular,
}

impl Window {
    pub fn weights(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hamming if n == 1 => vec![1.0],
            Window::Hamming => (0..n)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos())
                .collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hamming => "hamming",
            Window::Rectangular => "rectangular",
        }
    }
}

/// `⌊(t − n_dft) / (n_dft − overlap)⌋ + 1`.
pub fn block_count(t: usize, n_dft: usize, overlap: usize) -> Result<usize> {
    if n_dft == 0 || overlap >= n_dft {
        return Err(Error::Range {
            what: "overlap",
            msg: format!("need 0 <= overlap < n_dft, got overlap {overlap}, n_dft {n_dft}"),
        });
    }
    if t < n_dft {
        return Err(Error::InsufficientData(format!("{t} samples is shorter than one block of {n_dft}")));
    }
    Ok((t - n_dft) / (n_dft - overlap) + 1)
}

/// One-sided bin count `n_dft / 2 + 1`.
pub fn frequency_count(n_dft: usize) -> usize {
    n_dft / 2 + 1
}

/// One-sided factor: DC and (for even lengths) Nyquist count once, other bins twice.
fn one_sided_factor(k: usize, n_dft: usize) -> f64 {
    if k == 0 || (n_dft.is_multiple_of(2) && k == n_dft / 2) {
        1.0
    } else {
        2.0
    }
}

/// Windowed block transforms. `coeffs[f]` is `M × n_b`; entry `(x, b)` is
/// `sqrt(c_f / (n_dft · Σw²)) · Σ_n w_n q_x(t_b + n) e^{−2πi f n / n_dft}` so
/// that summing `|·|²` over frequencies gives the window-weighted mean square.
#[derive(Clone, Debug, PartialEq)]
pub struct WelchBlocks {
    pub n_blocks: usize,
    pub n_dft: usize,
    pub overlap: usize,
    pub window: Window,
    pub frequencies: Vec<f64>,
    pub coeffs: Vec<DMatrix<Complex<f64>>>,
}

/// `series` is `t × M` (one row per time step).
pub fn welch_blocks(series: &DMatrix<f64>, dt: f64, n_dft: usize, overlap: usize, window: Window) -> Result<WelchBlocks> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::config("dt", "must be positive"));
    }
    let (t, m) = (series.nrows(), series.ncols());
    let n_blocks = block_count(t, n_dft, overlap)?;
    let n_f = frequency_count(n_dft);
    let w = window.weights(n_dft);
    let energy: f64 = w.iter().map(|x| x * x).sum();
    let hop = n_dft - overlap;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_dft);
    let mut coeffs = vec![DMatrix::<Complex<f64>>::zeros(m, n_blocks); n_f];
    let scale: Vec<f64> = (0..n_f)
        .map(|k| (one_sided_factor(k, n_dft) / (n_dft as f64 * energy)).sqrt())
        .collect();
    let mut buf = vec![Complex::new(0.0, 0.0); n_dft];
    for b in 0..n_blocks {
        let start = b * hop;
        for x in 0..m {
            for n in 0..n_dft {
                buf[n] = Complex::new(series[(start + n, x)] * w[n], 0.0);
            }
            fft.process(&mut buf);
            for k in 0..n_f {
                coeffs[k][(x, b)] = buf[k] * scale[k];
            }
        }
    }
    let frequencies = (0..n_f).map(|k| k as f64 / (n_dft as f64 * dt)).collect();
    Ok(WelchBlocks {
        n_blocks,
        n_dft,
        overlap,
        window,
        frequencies,
        coeffs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpodResult {
    pub frequencies: Vec<f64>,
    /// `[frequency][mode]`, descending within each frequency.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Per frequency an `M × n_modes` matrix of unit-norm modes.
    pub modes: Vec<DMatrix<Complex<f64>>>,
    pub n_blocks: usize,
    pub n_dft: usize,
    pub overlap: usize,
    pub window: Window,
}

impl SpodResult {
    pub fn leading(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| l[0]).collect()
    }
}

/// Gram–Schmidt completion for complex columns `from..`.
fn complete_complex(modes: &mut DMatrix<Complex<f64>>, from: usize) {
    let m = modes.nrows();
    let mut next = 0;
    for c in from..modes.ncols() {
        loop {
            let mut v = DVector::<Complex<f64>>::zeros(m);
            v[next % m] = Complex::new(1.0, 0.0);
            next += 1;
            for _ in 0..2 {
                for k in 0..c {
                    let q = modes.column(k).clone_owned();
                    let p = q.dotc(&v);
                    v -= q * p;
                }
            }
            let n = v.norm();
            if n > 1e-8 {
                modes.set_column(c, &(v.unscale(n)));
                break;
            }
        }
    }
}

/// Rotates each column so its first non-negligible entry is real and positive.
fn fix_phases(modes: &mut DMatrix<Complex<f64>>) {
    for mut col in modes.column_iter_mut() {
        let norm = col.norm();
        if let Some(&z) = col.iter().find(|z| z.norm() > 1e-12 * norm.max(f64::MIN_POSITIVE)) {
            let rot = z.conj() / z.norm();
            col.iter_mut().for_each(|x| *x *= rot);
        }
    }
}

/// Per-frequency SPOD from Welch blocks via the `n_b × n_b` problem
/// `X_fᴴ X_f / n_b`. Frequencies are solved in parallel on the current
/// rayon pool; each is independent, so the result is thread-count invariant.
pub fn spod_from_blocks(blocks: &WelchBlocks, n_modes: usize) -> Result<SpodResult> {
    let nb = blocks.n_blocks;
    let m = blocks.coeffs[0].nrows();
    if n_modes == 0 || n_modes > nb || n_modes > m {
        return Err(Error::Range {
            what: "mode count",
            msg: format!("{n_modes} not in 1..={} ({nb} blocks, {m} points)", nb.min(m)),
        });
    }
    let solved: Vec<(Vec<f64>, DMatrix<Complex<f64>>)> = blocks
        .coeffs
        .par_iter()
        .map(|x| {
            let g = x.adjoint() * x / Complex::new(nb as f64, 0.0);
            let eig = SymmetricEigen::new(g);
            let mut order: Vec<usize> = (0..nb).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
            let floor = vals[0].abs().max(f64::MIN_POSITIVE) * 1e-12;
            let mut modes = DMatrix::<Complex<f64>>::zeros(m, n_modes);
            let mut good = 0;
            for (c, &i) in order.iter().take(n_modes).enumerate() {
                if vals[c] <= floor {
                    break;
                }
                let col = x * eig.eigenvectors.column(i) / Complex::new((nb as f64 * vals[c]).sqrt(), 0.0);
                modes.set_column(c, &col);
                good += 1;
            }
            complete_complex(&mut modes, good);
            fix_phases(&mut modes);
            (vals[..n_modes].iter().map(|&l| l.max(0.0)).collect(), modes)
        })
        .collect();
    let (eigenvalues, modes) = solved.into_iter().unzip();
    Ok(SpodResult {
        frequencies: blocks.frequencies.clone(),
        eigenvalues,
        modes,
        n_blocks: nb,
        n_dft: blocks.n_dft,
        overlap: blocks.overlap,
        window: blocks.window,
    })
}

/// SPOD of a `t × M` series after removing its long-time mean.
pub fn spod_decompose(
    series: &DMatrix<f64>,
    dt: f64,
    n_dft: usize,
    overlap: usize,
    n_modes: usize,
    window: Window,
) -> Result<SpodResult> {
    let t = series.nrows();
    if t == 0 {
        return Err(Error::EmptyInput("SPOD series"));
    }
    let mut centred = series.clone();
    for mut col in centred.column_iter_mut() {
        let mean = col.sum() / t as f64;
        col.add_scalar_mut(-mean);
    }
    spod_from_blocks(&welch_blocks(&centred, dt, n_dft, overlap, window)?, n_modes)
}

/// Up to `k` local maxima of the leading eigenvalue spectrum, DC excluded,
/// largest first, as `(frequency, λ_1)`.
pub fn peak_frequencies(result: &SpodResult, k: usize) -> Vec<(f64, f64)> {
    let l = result.leading();
    let mut peaks: Vec<(f64, f64)> = (1..l.len())
        .filter(|&i| l[i] > l[i - 1] && (i + 1 == l.len() || l[i] >= l[i + 1]))
        .map(|i| (result.frequencies[i], l[i]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(k);
    peaks
}

/// `St = f D / U`.
pub fn strouhal(f: f64, d: f64, u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(Error::Range {
            what: "velocity",
            msg: format!("Strouhal number needs U > 0, got {u}"),
        });
    }
    Ok(f * d / u)
}
