use serde::{Deserialize, Serialize};

use crate::error::{Result, SefiError};
use crate::tensor::Matrix;

/// Cumulative signal level `alpha_bar[t]` for every training timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = SefiError;

    fn try_from(alpha_bar: Vec<f64>) -> Result<Self> {
        Self::from_alpha_bar(alpha_bar)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.alpha_bar
    }
}

impl NoiseSchedule {
    /// Validates that `alpha_bar` is non-empty, strictly decreasing and
    /// within `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(SefiError::config("noise schedule is empty"));
        }
        if let Some(bad) = alpha_bar.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(SefiError::config(format!(
                "alpha_bar value {bad} outside (0, 1]"
            )));
        }
        if let Some(i) = alpha_bar.windows(2).position(|w| w[1] >= w[0]) {
            return Err(SefiError::config(format!(
                "alpha_bar is not strictly decreasing at t={}",
                i + 1
            )));
        }
        Ok(Self { alpha_bar })
    }

    /// Squared-cosine schedule with offset 0.008 and betas capped at 0.999.
    pub fn cosine(total_steps: usize) -> Result<Self> {
        let s = 0.008;
        let f = |t: f64| {
            (((t / total_steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for i in 0..total_steps {
            let beta = (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// The "scaled linear" beta schedule used by Stable Diffusion 1.x.
    pub fn scaled_linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = Vec::with_capacity(total_steps);
        let mut acc = 1.0;
        for i in 0..total_steps {
            let frac = if total_steps == 1 {
                0.0
            } else {
                i as f64 / (total_steps - 1) as f64
            };
            let beta = (a + (b - a) * frac).powi(2);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            SefiError::input(format!(
                "timestep {t} outside [0, {})",
                self.alpha_bar.len()
            ))
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Forward process: `sqrt(ab) * z0 + sqrt(1 - ab) * noise`.
    pub fn add_noise(&self, z0: &Matrix, t: usize, noise: &Matrix) -> Result<Matrix> {
        if z0.shape() != noise.shape() {
            return Err(SefiError::input(format!(
                "latent {:?} and noise {:?} differ in shape",
                z0.shape(),
                noise.shape()
            )));
        }
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0.zip_map(noise, |z, n| a * z + b * n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_valid() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.total_steps(), 1000);
        assert!(s.alpha_bar(0).unwrap() < 1.0 && s.alpha_bar(0).unwrap() > 0.99);
        assert!(s.alpha_bar(999).unwrap() > 0.0);
    }

    #[test]
    fn scaled_linear_matches_sd_endpoints() {
        let s = NoiseSchedule::scaled_linear(1000, 0.00085, 0.012).unwrap();
        assert!((s.alpha_bar(0).unwrap() - (1.0 - 0.00085)).abs() < 1e-12);
        // Final cumulative alpha of SD 1.x is ~0.0047.
        assert!((s.alpha_bar(999).unwrap() - 0.0047).abs() < 1e-4);
    }

    #[test]
    fn rejects_invalid_schedules() {
        assert!(NoiseSchedule::from_alpha_bar(vec![]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.9]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.7]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.1, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.0]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).is_ok());
    }

    #[test]
    fn add_noise_cases() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let z = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let n = Matrix::from_vec(2, 2, vec![0.3, 0.1, -0.7, 2.0]).unwrap();
        assert!(s.add_noise(&z, 0, &n).unwrap().bit_eq(&z));
        let zero = Matrix::zeros(2, 2);
        assert!(s.add_noise(&z, 1, &zero).unwrap().bit_eq(&z.scale(0.5)));
        let out = s.add_noise(&z, 1, &n).unwrap();
        for i in 0..4 {
            let want = 0.5 * z.data()[i] + 0.75f64.sqrt() * n.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-15);
        }
        assert!(s.add_noise(&z, 2, &n).is_err());
    }
}
