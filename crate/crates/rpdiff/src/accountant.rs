//! Rényi differential-privacy bookkeeping for the sanitized-gradient
//! mechanism: per-step guarantee, additive composition, conversion to
//! (epsilon, delta)-DP, and noise-scale calibration.
//!
//! The accountant applies plain composition with no subsampling amplification
//! credit; the Poisson sampling rate is recorded so an amplification-aware
//! accountant can be slotted in later without changing the ledger format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Rényi orders tracked by the ledger.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![
        1.25, 1.5, 1.75, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 16.0, 20.0, 32.0, 64.0,
        128.0, 256.0,
    ]
}

/// Per-step RDP of one sanitized batch release: `2 * alpha / sigma^2`.
pub fn rdp_per_step(sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 1.0) {
        return Err(Error::InvalidConfig(format!(
            "renyi order must be > 1, got {alpha}"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise scale must be > 0, got {sigma}"
        )));
    }
    Ok(2.0 * alpha / (sigma * sigma))
}

/// A converted (epsilon, delta) guarantee and the order that attained it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
    pub best_alpha: f64,
}

/// Run-length encoded noise-scale history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSpan {
    pub sigma: f64,
    pub steps: u64,
}

/// Accumulated RDP over a fixed order grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    alpha_grid: Vec<f64>,
    accumulated_rdp: Vec<f64>,
    steps: u64,
    sigma_history: Vec<SigmaSpan>,
    /// Poisson sampling rate, recorded for audit only.
    sampling_rate: Option<f64>,
}

impl Default for PrivacyLedger {
    fn default() -> Self {
        Self::new(default_alpha_grid()).expect("default grid is valid")
    }
}

impl PrivacyLedger {
    pub fn new(alpha_grid: Vec<f64>) -> Result<Self> {
        if alpha_grid.is_empty() {
            return Err(Error::InvalidConfig("alpha grid is empty".into()));
        }
        for &a in &alpha_grid {
            if !(a.is_finite() && a > 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "renyi orders must be > 1, got {a}"
                )));
            }
        }
        let accumulated_rdp = vec![0.0; alpha_grid.len()];
        Ok(Self {
            alpha_grid,
            accumulated_rdp,
            steps: 0,
            sigma_history: Vec::new(),
            sampling_rate: None,
        })
    }

    pub fn alpha_grid(&self) -> &[f64] {
        &self.alpha_grid
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn sigma_history(&self) -> &[SigmaSpan] {
        &self.sigma_history
    }

    pub fn sampling_rate(&self) -> Option<f64> {
        self.sampling_rate
    }

    pub fn set_sampling_rate(&mut self, q: f64) {
        self.sampling_rate = Some(q);
    }

    /// Compose one mechanism invocation at noise scale `sigma`.
    pub fn record_step(&mut self, sigma: f64) -> Result<()> {
        self.record_steps(sigma, 1)
    }

    /// Compose `n` identical invocations; additive in RDP at every order.
    pub fn record_steps(&mut self, sigma: f64, n: u64) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        let per_step: Vec<f64> = self
            .alpha_grid
            .iter()
            .map(|&a| rdp_per_step(sigma, a))
            .collect::<Result<_>>()?;
        for (acc, step) in self.accumulated_rdp.iter_mut().zip(per_step) {
            *acc += step * n as f64;
        }
        self.steps += n;
        match self.sigma_history.last_mut() {
            Some(span) if span.sigma == sigma => span.steps += n,
            _ => self.sigma_history.push(SigmaSpan { sigma, steps: n }),
        }
        Ok(())
    }

    /// The accumulated `(alpha, epsilon_rdp)` curve.
    pub fn rdp_curve(&self) -> Vec<(f64, f64)> {
        self.alpha_grid
            .iter()
            .copied()
            .zip(self.accumulated_rdp.iter().copied())
            .collect()
    }

    /// Convert to (epsilon, delta)-DP:
    /// `epsilon = min_alpha [ rdp(alpha) + ln(1/delta) / (alpha - 1) ]`.
    pub fn to_dp(&self, delta: f64) -> Result<DpGuarantee> {
        if self.steps == 0 {
            return Err(Error::EmptyLedger);
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = f64::INFINITY;
        let mut best_alpha = self.alpha_grid[0];
        for (&alpha, &rdp) in self.alpha_grid.iter().zip(&self.accumulated_rdp) {
            let eps = rdp + log_inv_delta / (alpha - 1.0);
            if eps < best {
                best = eps;
                best_alpha = alpha;
            }
        }
        Ok(DpGuarantee {
            epsilon: best,
            delta,
            best_alpha,
        })
    }

    /// Write the ledger as structured text, embedding the converted guarantee
    /// when a delta is supplied.
    pub fn save(&self, path: &Path, delta: Option<f64>) -> Result<()> {
        #[derive(Serialize)]
        struct OnDisk<'a> {
            #[serde(flatten)]
            ledger: &'a PrivacyLedger,
            guarantee: Option<DpGuarantee>,
        }
        let guarantee = match delta {
            Some(d) if self.steps > 0 => Some(self.to_dp(d)?),
            _ => None,
        };
        let body = serde_json::to_string_pretty(&OnDisk {
            ledger: self,
            guarantee,
        })?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PrivacyLedger> {
        #[derive(Deserialize)]
        struct OnDisk {
            #[serde(flatten)]
            ledger: PrivacyLedger,
            #[serde(default)]
            #[allow(dead_code)]
            guarantee: Option<DpGuarantee>,
        }
        let body = std::fs::read_to_string(path)?;
        let on_disk: OnDisk = serde_json::from_str(&body)?;
        let ledger = on_disk.ledger;
        if ledger.accumulated_rdp.len() != ledger.alpha_grid.len() {
            return Err(Error::BadFormat {
                path: path.display().to_string(),
                reason: "accumulated values do not match the alpha grid".into(),
            });
        }
        Ok(ledger)
    }
}

/// Smallest sigma whose composed guarantee meets `target_epsilon` after
/// `steps` identical releases, found by bisection to 1e-6 relative width and
/// verified by a forward accounting pass.
pub fn calibrate_sigma(
    target_epsilon: f64,
    delta: f64,
    steps: u64,
    alpha_grid: &[f64],
) -> Result<f64> {
    if !(target_epsilon.is_finite() && target_epsilon > 0.0) {
        return Err(Error::InvalidConfig("target epsilon must be > 0".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let epsilon_at = |sigma: f64| -> Result<f64> {
        let mut ledger = PrivacyLedger::new(alpha_grid.to_vec())?;
        ledger.record_steps(sigma, steps)?;
        Ok(ledger.to_dp(delta)?.epsilon)
    };
    let mut lo = 1e-6;
    if epsilon_at(lo)? <= target_epsilon {
        return Ok(lo);
    }
    let mut hi = 1.0;
    while epsilon_at(hi)? > target_epsilon {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::CalibrationFailed(format!(
                "no sigma below 1e6 meets epsilon = {target_epsilon}"
            )));
        }
    }
    while (hi - lo) / hi > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if epsilon_at(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let achieved = epsilon_at(hi)?;
    if achieved > target_epsilon {
        return Err(Error::CalibrationFailed(format!(
            "calibration verification failed: epsilon {achieved} > {target_epsilon}"
        )));
    }
    Ok(hi)
}
