//! Repeated projective measurement: survival `P(τ)^N`, the effective decay
//! rate `R(τ) = −ln P(τ)/τ`, and the overlap model
//! `R(τ) = 2π ∫ F(ω, τ) G(ω) dω` with the measurement-induced broadening
//! `F(ω, τ) = (τ/2π) sinc²((ω − ω_a)τ/2)`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dynamics::SurvivalCurve;
use crate::{Error, Result};

/// Floor applied to `P` inside the logarithm of [`effective_rate`].
pub const CLAMP_FLOOR: f64 = 1e-15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZenoDiagnostics {
    /// Probabilities above one (CCE overshoot) clamped to one.
    pub clamped_high: u64,
    /// Probabilities below [`CLAMP_FLOOR`] clamped up to it.
    pub clamped_low: u64,
}

impl ZenoDiagnostics {
    pub fn clamp_count(&self) -> u64 {
        self.clamped_high + self.clamped_low
    }

    fn clamp(&mut self, p: f64) -> f64 {
        if p > 1.0 {
            self.clamped_high += 1;
            1.0
        } else if p < CLAMP_FLOOR {
            self.clamped_low += 1;
            CLAMP_FLOOR
        } else {
            p
        }
    }
}

/// Survival after `n` ideal measurements spaced by `τ`: `P(τ)^n`.
pub fn repeated_measurement_survival(p_tau: f64, n: u32, diag: &mut ZenoDiagnostics) -> Result<f64> {
    if !(p_tau > 0.0) || !p_tau.is_finite() {
        return Err(Error::Domain(format!("single-interval survival must be in (0, 1], got {p_tau}")));
    }
    let p = if p_tau > 1.0 {
        diag.clamped_high += 1;
        1.0
    } else {
        p_tau
    };
    Ok(p.powi(n as i32))
}

/// `R(τ) = −ln P(τ) / τ`, interpolating `P` linearly on the curve grid.
pub fn effective_rate(curve: &SurvivalCurve, tau: f64, diag: &mut ZenoDiagnostics) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("measurement interval must be positive, got {tau:e}")));
    }
    let p = diag.clamp(curve.value_at(tau)?);
    Ok(-p.ln() / tau)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// `F(ω, τ) = (τ/2π) sinc²((ω − ω_a)τ/2)` in seconds.
pub fn broadening(omega: f64, tau: f64, omega_a: f64) -> f64 {
    let s = sinc((omega - omega_a) * tau / 2.0);
    tau / (2.0 * PI) * s * s
}

fn sorted_spectrum(spectrum: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut s = spectrum.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    s
}

/// Overlap-integral rate for a discrete spectrum `G(ω) = Σ w_j δ(ω − ω_j)`:
/// `R = 2π Σ_j F(ω_j, τ) w_j`, summed by ascending `ω_j`.
pub fn overlap_rate(spectrum: &[(f64, f64)], tau: f64, omega_a: f64) -> f64 {
    sorted_spectrum(spectrum)
        .iter()
        .map(|&(w_j, g)| 2.0 * PI * broadening(w_j, tau, omega_a) * g)
        .sum()
}

/// Gaussian-smoothed density `G_σ(ω) = Σ_j w_j N(ω; ω_j, σ)`.
pub fn smoothed_density(spectrum: &[(f64, f64)], omega: f64, sigma: f64) -> f64 {
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    sorted_spectrum(spectrum)
        .iter()
        .map(|&(w_j, g)| {
            let x = (omega - w_j) / sigma;
            g * norm * (-0.5 * x * x).exp()
        })
        .sum()
}

/// Mean spacing between sorted line positions, the default smoothing width.
pub fn typical_line_spacing(spectrum: &[(f64, f64)]) -> Option<f64> {
    if spectrum.len() < 2 {
        return None;
    }
    let s = sorted_spectrum(spectrum);
    let span = s.last().unwrap().0 - s[0].0;
    (span > 0.0).then(|| span / (s.len() - 1) as f64)
}

/// Overlap rate against the Gaussian-smoothed spectrum. As `τ → ∞` this
/// tends to `2π G_σ(ω_a)`.
pub fn smoothed_overlap_rate(spectrum: &[(f64, f64)], tau: f64, omega_a: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(tau > 0.0) {
        return Err(Error::Domain(format!("smoothing width and τ must be positive (σ = {sigma:e}, τ = {tau:e})")));
    }
    let width = 2.0 * PI / tau;
    if width < sigma / 50.0 {
        return Ok(2.0 * PI * smoothed_density(spectrum, omega_a, sigma));
    }
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let mut total = 0.0;
    for &(w_j, g) in &sorted_spectrum(spectrum) {
        // integrate over whichever factor is narrower: the line (±8σ) or F (±40 linewidths)
        let (center, half, step) = if sigma < width {
            (w_j, 8.0 * sigma, sigma / 16.0)
        } else {
            (omega_a, 40.0 * width, width / 16.0)
        };
        let n = ((2.0 * half / step).ceil() as usize).max(2) | 1;
        let h = 2.0 * half / (n - 1) as f64;
        let mut acc = 0.0;
        for k in 0..n {
            let w = center - half + k as f64 * h;
            let c = if k == 0 || k == n - 1 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let x = (w - w_j) / sigma;
            acc += c * broadening(w, tau, omega_a) * norm * (-0.5 * x * x).exp();
        }
        total += g * acc * h / 3.0;
    }
    Ok(2.0 * PI * total)
}

/// `∫ F(ω, τ) dω` over `ω_a ± half_width` by composite Simpson quadrature.
pub fn broadening_integral(tau: f64, omega_a: f64, half_width: f64, n: usize) -> f64 {
    let n = n.max(2) | 1;
    let h = 2.0 * half_width / (n - 1) as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let w = omega_a - half_width + k as f64 * h;
        let c = if k == 0 || k == n - 1 {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += c * broadening(w, tau, omega_a);
    }
    acc * h / 3.0
}

/// Ordinary least squares `y = a + b x`, returning `(a, b, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (a, b, r2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeFitOptions {
    /// Fraction of the curve used for the quadratic fit.
    pub quadratic_fraction: f64,
    /// Trailing fraction of the curve used for the exponential fit.
    pub exponential_fraction: f64,
    /// Largest rise of `P` above its running minimum that is tolerated.
    pub monotone_tolerance: f64,
}

impl Default for RegimeFitOptions {
    fn default() -> Self {
        Self { quadratic_fraction: 0.1, exponential_fraction: 0.3, monotone_tolerance: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeFit {
    /// κ in `P ≈ exp(−(κt)²)` (s⁻¹).
    pub gaussian_kappa: f64,
    /// Slope of `−ln P` on the tail (s⁻¹).
    pub exp_rate: f64,
    /// Intercept of the tail fit.
    pub exp_offset: f64,
    /// First time after which the exponential model fits better (s).
    pub crossover_t: f64,
    pub quadratic_window: (f64, f64),
    pub exponential_window: (f64, f64),
    /// Relative RMS residual of the quadratic fit.
    pub quadratic_rel_rms: f64,
    pub exponential_r2: f64,
    /// Ratio of local tail slopes (second half over first half).
    pub tail_slope_ratio: f64,
    pub gaussian_ok: bool,
    pub exponential_ok: bool,
}

/// Fit `−ln P = κ²t²` on the head and `−ln P = c + R t` on the tail.
pub fn regime_fit(curve: &SurvivalCurve, opts: &RegimeFitOptions) -> Result<RegimeFit> {
    let n = curve.times.len();
    let n_q = ((n as f64 * opts.quadratic_fraction).round() as usize).max(1);
    let n_e = (n as f64 * opts.exponential_fraction).round() as usize;
    if n < 10 || n_q < 3 || n_e < 4 {
        return Err(Error::Domain(format!("curve of {n} points is too short for regime fitting")));
    }
    let mut running_min = f64::INFINITY;
    for &p in &curve.values {
        if p > running_min + opts.monotone_tolerance {
            return Err(Error::Domain(format!(
                "curve rises by {:.3} above its running minimum; not a decay",
                p - running_min
            )));
        }
        running_min = running_min.min(p);
    }
    let y: Vec<f64> = curve.values.iter().map(|&p| -p.clamp(CLAMP_FLOOR, 1.0).ln()).collect();
    let t = &curve.times;

    // quadratic head through the origin, skipping t = 0
    let head: Vec<usize> = (0..n_q + 1).filter(|&k| t[k] > 0.0).collect();
    let num: f64 = head.iter().map(|&k| t[k] * t[k] * y[k]).sum();
    let den: f64 = head.iter().map(|&k| t[k].powi(4)).sum();
    let kappa_sq = (num / den).max(0.0);
    let scale = head.iter().map(|&k| y[k] * y[k]).sum::<f64>() / head.len() as f64;
    let rms = (head.iter().map(|&k| (y[k] - kappa_sq * t[k] * t[k]).powi(2)).sum::<f64>() / head.len() as f64).sqrt();
    let quadratic_rel_rms = if scale > 0.0 { rms / scale.sqrt() } else { 0.0 };

    let tail = n - n_e..n;
    let (offset, rate, r2) = linear_fit(&t[tail.clone()], &y[tail.clone()]);
    let mid = tail.start + n_e / 2;
    let (_, s1, _) = linear_fit(&t[tail.start..mid + 1], &y[tail.start..mid + 1]);
    let (_, s2, _) = linear_fit(&t[mid..n], &y[mid..n]);
    let tail_slope_ratio = s2 / s1;

    let crossover_t = (0..n)
        .find(|&k| {
            t[k] > 0.0 && (y[k] - (offset + rate * t[k])).abs() <= (y[k] - kappa_sq * t[k] * t[k]).abs()
        })
        .map(|k| t[k])
        .unwrap_or(t[n - 1]);

    Ok(RegimeFit {
        gaussian_kappa: kappa_sq.sqrt(),
        exp_rate: rate,
        exp_offset: offset,
        crossover_t,
        quadratic_window: (t[0], t[n_q]),
        exponential_window: (t[n - n_e], t[n - 1]),
        quadratic_rel_rms,
        exponential_r2: r2,
        tail_slope_ratio,
        gaussian_ok: quadratic_rel_rms < 0.05 && kappa_sq > 0.0,
        exponential_ok: r2 > 0.95 && (tail_slope_ratio - 1.0).abs() < 0.1,
    })
}

/// Rates from simulation and from the overlap model on a grid of intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZenoReport {
    pub tau_grid: Vec<f64>,
    pub r_sim: Vec<f64>,
    pub r_model: Vec<f64>,
    /// Overlap rate against the Gaussian-smoothed spectrum.
    pub r_model_smoothed: Vec<f64>,
    pub smoothing_sigma: f64,
    pub omega_a: f64,
    pub spectrum: Vec<(f64, f64)>,
    /// Interval at which the broadening profile is tabulated.
    pub broadening_tau: f64,
    pub broadening: Vec<(f64, f64)>,
    pub diagnostics: ZenoDiagnostics,
}

impl ZenoReport {
    pub fn build(
        curve: &SurvivalCurve,
        tau_grid: &[f64],
        spectrum: &[(f64, f64)],
        omega_a: f64,
        broadening_tau: f64,
        smoothing_sigma: Option<f64>,
    ) -> Result<Self> {
        if tau_grid.is_empty() {
            return Err(Error::Config("τ grid is empty".into()));
        }
        let mut diagnostics = ZenoDiagnostics::default();
        let r_sim = tau_grid
            .iter()
            .map(|&tau| effective_rate(curve, tau, &mut diagnostics))
            .collect::<Result<Vec<_>>>()?;
        let r_model = tau_grid.iter().map(|&tau| overlap_rate(spectrum, tau, omega_a)).collect();
        let sigma = smoothing_sigma.or_else(|| typical_line_spacing(spectrum)).unwrap_or(2.0 * PI / broadening_tau);
        let r_model_smoothed = tau_grid
            .iter()
            .map(|&tau| smoothed_overlap_rate(spectrum, tau, omega_a, sigma))
            .collect::<Result<Vec<_>>>()?;
        let width = 2.0 * PI / broadening_tau;
        let broadening_rows = (0..=400)
            .map(|k| {
                let w = omega_a + (k as f64 - 200.0) / 200.0 * 5.0 * width;
                (w, broadening(w, broadening_tau, omega_a))
            })
            .collect();
        Ok(Self {
            tau_grid: tau_grid.to_vec(),
            r_sim,
            r_model,
            r_model_smoothed,
            smoothing_sigma: sigma,
            omega_a,
            spectrum: sorted_spectrum(spectrum),
            broadening_tau,
            broadening: broadening_rows,
            diagnostics,
        })
    }

    pub fn to_csv(&self, extra: &[(&str, String)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# omega_a_rad_s={:.16e}", self.omega_a);
        let _ = writeln!(s, "# smoothing_sigma_rad_s={:.16e}", self.smoothing_sigma);
        let _ = writeln!(s, "# clamp_count={}", self.diagnostics.clamp_count());
        for (k, v) in extra {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("#SECTION rates\ntau_seconds,R_sim,R_model,R_model_smoothed\n");
        for k in 0..self.tau_grid.len() {
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.tau_grid[k], self.r_sim[k], self.r_model[k], self.r_model_smoothed[k]
            );
        }
        s.push_str("#SECTION spectrum\nomega_j_rad_s,weight_rad2_s2\n");
        for (w, g) in &self.spectrum {
            let _ = writeln!(s, "{w:.16e},{g:.16e}");
        }
        let _ = writeln!(s, "#SECTION broadening tau_seconds={:.16e}", self.broadening_tau);
        s.push_str("omega_rad_s,F_seconds\n");
        for (w, f) in &self.broadening {
            let _ = writeln!(s, "{w:.16e},{f:.16e}");
        }
        s
    }
}
