//! Independent reference computations: plain loops, no library spectral code.

#![allow(dead_code)]

use std::f64::consts::PI;

/// Cyclic Jacobi eigensolver for a dense real symmetric matrix (row-major).
/// Returns eigenvalues descending and eigenvectors as columns of a row-major matrix.
pub fn jacobi(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for r in 0..n {
        for (c, &o) in order.iter().enumerate() {
            vecs[r * n + c] = v[r * n + o];
        }
    }
    (vals, vecs)
}

pub fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / (n - 1) as f64).cos()).collect()
}

fn one_sided(k: usize, n: usize) -> f64 {
    if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
        1.0
    } else {
        2.0
    }
}

/// Windowed block DFT coefficients by direct summation, `[freq][point][block]`
/// as (re, im), normalised to one-sided power per bin. `x` is `t × m` row-major.
pub fn block_dft(x: &[f64], t: usize, m: usize, n_dft: usize, overlap: usize) -> Vec<Vec<Vec<(f64, f64)>>> {
    let w = hamming(n_dft);
    let s2: f64 = w.iter().map(|v| v * v).sum();
    let nb = (t - n_dft) / (n_dft - overlap) + 1;
    let mean: Vec<f64> = (0..m).map(|j| (0..t).map(|i| x[i * m + j]).sum::<f64>() / t as f64).collect();
    (0..n_dft / 2 + 1)
        .map(|k| {
            let scale = (one_sided(k, n_dft) / (n_dft as f64 * s2)).sqrt();
            (0..m)
                .map(|j| {
                    (0..nb)
                        .map(|b| {
                            let start = b * (n_dft - overlap);
                            let (mut re, mut im) = (0.0, 0.0);
                            for n in 0..n_dft {
                                let a = -2.0 * PI * (k * n % n_dft) as f64 / n_dft as f64;
                                let v = (x[(start + n) * m + j] - mean[j]) * w[n];
                                re += v * a.cos();
                                im += v * a.sin();
                            }
                            (re * scale, im * scale)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Welch PSD of a scalar series: one-sided averaged Hamming periodogram.
pub fn welch_psd(x: &[f64], n_dft: usize, overlap: usize) -> Vec<f64> {
    block_dft(x, x.len(), 1, n_dft, overlap)
        .iter()
        .map(|f| f[0].iter().map(|(re, im)| re * re + im * im).sum::<f64>() / f[0].len() as f64)
        .collect()
}

/// Eigenvalues of the Hermitian `M × M` CSD matrix `S = X Xᴴ / n_b`, via its
/// real `2M × 2M` embedding `[[A, −B], [B, A]]`, in which each appears twice.
pub fn csd_eigenvalues(coeffs: &[Vec<(f64, f64)>]) -> Vec<f64> {
    let m = coeffs.len();
    let nb = coeffs[0].len();
    let mut s = vec![(0.0, 0.0); m * m];
    for i in 0..m {
        for j in 0..m {
            let (mut re, mut im) = (0.0, 0.0);
            for b in 0..nb {
                let (ar, ai) = coeffs[i][b];
                let (br, bi) = coeffs[j][b];
                // a · conj(b)
                re += ar * br + ai * bi;
                im += ai * br - ar * bi;
            }
            s[i * m + j] = (re / nb as f64, im / nb as f64);
        }
    }
    let n = 2 * m;
    let mut real = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (re, im) = s[(r % m) * m + c % m];
            real[r * n + c] = match (r < m, c < m) {
                (true, true) | (false, false) => re,
                (true, false) => -im,
                (false, true) => im,
            };
        }
    }
    let (vals, _) = jacobi(&real, n);
    vals.iter().step_by(2).copied().collect()
}

/// Monte-Carlo estimate of KL(N(μ, diag e^lv) ‖ N(0, I)) as the sample mean
/// of log q(z) − log p(z).
pub fn kl_monte_carlo<R: rand::Rng>(mu: &[f64], logvar: &[f64], samples: usize, rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let sd: Vec<f64> = logvar.iter().map(|lv| (0.5 * lv).exp()).collect();
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut s = 0.0;
        for j in 0..mu.len() {
            let e: f64 = StandardNormal.sample(rng);
            let z = mu[j] + sd[j] * e;
            // log q − log p with the 2π terms cancelled
            s += -0.5 * logvar[j] - 0.5 * e * e + 0.5 * z * z;
        }
        acc += s;
    }
    acc / samples as f64
}
