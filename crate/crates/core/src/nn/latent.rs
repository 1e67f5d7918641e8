//! Gaussian latent sampling and the KL term against a standard normal prior.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;
use crate::error::{Error, Result};

/// Log-variance is clamped to this range before it is exponentiated.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Posterior parameters, the standard-normal draw and the resulting sample.
/// Vectors may hold a whole batch laid out row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mu: Vec<T>,
    /// Clamped log-variance, the value actually used for `z`.
    pub logvar: Vec<T>,
    pub z: Vec<T>,
    pub eps: Vec<T>,
}

pub fn clamp_logvar<T: Real>(lv: T) -> T {
    let c = T::lit(LOGVAR_CLAMP);
    lv.max(-c).min(c)
}

/// `z = mu + exp(logvar / 2) ⊙ eps` with caller-supplied `eps`.
pub fn reparameterize_with_noise<T: Real>(mu: &[T], logvar: &[T], eps: Vec<T>) -> Result<LatentCode<T>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::shape(
            "reparameterize",
            format!("mu {}, logvar {}, eps {}", mu.len(), logvar.len(), eps.len()),
        ));
    }
    let half = T::lit(0.5);
    let logvar: Vec<T> = logvar.iter().map(|&lv| clamp_logvar(lv)).collect();
    let z = mu
        .iter()
        .zip(&logvar)
        .zip(&eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect();
    Ok(LatentCode {
        mu: mu.to_vec(),
        logvar,
        z,
        eps,
    })
}

pub fn reparameterize<T: Real, R: Rng + ?Sized>(mu: &[T], logvar: &[T], rng: &mut R) -> Result<LatentCode<T>> {
    let eps = (0..mu.len())
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(e)
        })
        .collect();
    reparameterize_with_noise(mu, logvar, eps)
}

/// Pulls `dL/dz` back to `(dL/dmu, dL/dlogvar)`; `eps` receives no gradient.
/// The log-variance gradient is zero where the clamp was active.
pub fn reparameterize_backward<T: Real>(code: &LatentCode<T>, raw_logvar: &[T], dz: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::lit(0.5);
    let c = T::lit(LOGVAR_CLAMP);
    let dmu = dz.to_vec();
    let dlv = dz
        .iter()
        .zip(&code.logvar)
        .zip(&code.eps)
        .zip(raw_logvar)
        .map(|(((&d, &lv), &e), &raw)| {
            if raw < -c || raw > c {
                T::zero()
            } else {
                d * half * (half * lv).exp() * e
            }
        })
        .collect();
    (dmu, dlv)
}

/// `0.5 Σ_j (mu² + e^logvar − 1 − logvar)`, summed over the latent dimension
/// `d` and averaged over the batch (`mu.len() / d` rows).
pub fn kl_divergence<T: Real>(mu: &[T], logvar: &[T], d: usize) -> Result<T> {
    if d == 0 || mu.len() != logvar.len() || !mu.len().is_multiple_of(d) || mu.is_empty() {
        return Err(Error::shape(
            "kl_divergence",
            format!("mu {}, logvar {}, d {d}", mu.len(), logvar.len()),
        ));
    }
    if !mu.iter().chain(logvar).all(|x| x.is_finite()) {
        return Err(Error::NonFinite("kl_divergence input".into()));
    }
    let batch = T::from_usize(mu.len() / d).unwrap();
    let half = T::lit(0.5);
    let total = mu
        .iter()
        .zip(logvar)
        .fold(T::zero(), |acc, (&m, &lv)| {
            acc + half * (m * m + lv.exp() - T::one() - lv)
        });
    Ok(total / batch)
}

pub fn kl_divergence_backward<T: Real>(mu: &[T], logvar: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let batch = T::from_usize(mu.len() / d).unwrap();
    let half = T::lit(0.5);
    let dmu = mu.iter().map(|&m| m / batch).collect();
    let dlv = logvar
        .iter()
        .map(|&lv| half * (lv.exp() - T::one()) / batch)
        .collect();
    (dmu, dlv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn zero_noise_returns_mean() {
        let code = reparameterize_with_noise(&[1.0, -2.0], &[0.3, 4.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(code.z, vec![1.0, -2.0]);
    }

    #[test]
    fn unit_variance_adds_noise() {
        let code = reparameterize_with_noise(&[1.0f64, 2.0], &[0.0, 0.0], vec![0.5, -1.5]).unwrap();
        assert_eq!(code.z, vec![1.5, 0.5]);
    }

    #[test]
    fn sample_variance_matches_logvar() {
        let n = 100_000;
        let mu = vec![0.0f64; n];
        let lv = vec![4.0f64.ln(); n];
        let code = reparameterize(&mu, &lv, &mut substream(3, "reparam", 0)).unwrap();
        let mean = code.z.iter().sum::<f64>() / n as f64;
        let var = code.z.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((3.9..=4.1).contains(&var), "{var}");
    }

    #[test]
    fn logvar_is_clamped() {
        let code = reparameterize_with_noise(&[0.0f64], &[50.0], vec![1.0]).unwrap();
        assert_eq!(code.logvar, vec![10.0]);
        assert!((code.z[0] - 5.0f64.exp()).abs() < 1e-9);
        let (_, dlv) = reparameterize_backward(&code, &[50.0], &[1.0]);
        assert_eq!(dlv, vec![0.0]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0f64; 4], &[0.0; 4], 2).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0f64], &[0.0], 1).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_divergence(&[f64::NAN], &[0.0], 1).is_err());
    }
}
