use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete forward-noising schedule. Steps are 1-based: step `t` uses
/// `betas[t - 1]`, and step 0 is the clean image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct DenoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for DenoiseSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        DenoiseSchedule::from_betas(r.betas)
    }
}

impl From<DenoiseSchedule> for ScheduleRepr {
    fn from(s: DenoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl DenoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// 1000 linear steps from 1e-4 to 0.02.
    pub fn default_toy() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("static schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to step `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Coefficients `(c_clean, c_noisy)` of the posterior mean
    /// `c_clean · x̂0 + c_noisy · x_t` for the transition `t → t-1`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        (
            ab_prev.sqrt() * beta / (1.0 - ab),
            self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bars_strictly_decrease() {
        let s = DenoiseSchedule::default_toy();
        assert_eq!(s.steps(), 1000);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(DenoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(DenoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(DenoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn posterior_coefficients_reduce_to_inverse_sqrt_alpha() {
        // c_clean / sqrt(ab_t) + c_noisy == 1 / sqrt(alpha_t)
        let s = DenoiseSchedule::default_toy();
        for t in [2, 10, 500, 1000] {
            let (a, b) = s.posterior_mean_coefs(t);
            let lhs = a / s.alpha_bar(t).sqrt() + b;
            assert!((lhs - 1.0 / s.alpha(t).sqrt()).abs() < 1e-9, "t={t}");
        }
        let (a, b) = s.posterior_mean_coefs(1);
        assert!((a - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn serde_keeps_only_betas() {
        let s = DenoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with("{\"betas\""));
        let back: DenoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
