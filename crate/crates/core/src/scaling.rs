//! Power-law fits of the curvature series, `k_el = alpha (V0 - V_pzt)^gamma`,
//! with the exponent fixed or free.
//!
//! The optimizer works on `(ln alpha, V0[, gamma])`; the reported covariance
//! is mapped back to `(alpha, V0[, gamma])`. `alpha` carries units of
//! Hz^2 V^-2 (PZT V)^-gamma.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{lm_minimize, LeastSquaresProblem, LmSettings, Termination};

/// Closest allowed approach of V0 to the data.
pub const V0_BARRIER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvaturePoint {
    /// Polarity-normalized PZT bias (V).
    pub v_pzt: f64,
    pub k_el: f64,
    pub sigma_k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitMode {
    Fixed { gamma: f64 },
    Free,
}

impl FitMode {
    pub fn fixed_gamma(&self) -> Option<f64> {
        match *self {
            Self::Fixed { gamma } => Some(gamma),
            Self::Free => None,
        }
    }

    fn n_params(&self) -> usize {
        match self {
            Self::Fixed { .. } => 2,
            Self::Free => 3,
        }
    }
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed { gamma } => write!(f, "fixed:{gamma}"),
            Self::Free => f.write_str("free"),
        }
    }
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "free" {
            return Ok(Self::Free);
        }
        let gamma = s
            .strip_prefix("fixed:")
            .and_then(|g| g.parse::<f64>().ok())
            .filter(|g| g.is_finite() && *g < 0.0)
            .ok_or_else(|| {
                Error::InvalidInput(format!("mode must be `free` or `fixed:<negative exponent>`, got `{s}`"))
            })?;
        Ok(Self::Fixed { gamma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub v0_pzt: f64,
    pub gamma: f64,
    pub gamma_fixed: bool,
    /// Over `(alpha, v0_pzt)` or `(alpha, v0_pzt, gamma)`.
    pub cov: Vec<Vec<f64>>,
    pub chi2_red: f64,
    pub n_points: usize,
    pub converged: bool,
    pub iterations: usize,
}

impl PowerLawFit {
    pub fn sigma_alpha(&self) -> f64 {
        self.cov[0][0].sqrt()
    }

    pub fn sigma_v0(&self) -> f64 {
        self.cov[1][1].sqrt()
    }

    /// Zero when the exponent was fixed.
    pub fn sigma_gamma(&self) -> f64 {
        if self.gamma_fixed {
            0.0
        } else {
            self.cov[2][2].sqrt()
        }
    }

    pub fn model(&self, v_pzt: f64) -> f64 {
        self.alpha * (self.v0_pzt - v_pzt).powf(self.gamma)
    }

    pub fn mode(&self) -> FitMode {
        if self.gamma_fixed {
            FitMode::Fixed { gamma: self.gamma }
        } else {
            FitMode::Free
        }
    }
}

/// `value±sigma` rounded to the first significant digit of `sigma`,
/// e.g. `43.12±0.01`.
pub fn format_with_uncertainty(value: f64, sigma: f64) -> String {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return format!("{value}");
    }
    let decimals = (-sigma.log10().floor()).max(0.0) as usize;
    format!("{value:.decimals$}±{sigma:.decimals$}")
}

/// Weighted residuals `(k_i - alpha (V0 - v_i)^gamma) / sigma_i` over
/// `(ln alpha, V0[, gamma])`.
pub struct PowerLawProblem<'a> {
    points: &'a [CurvaturePoint],
    fixed_gamma: Option<f64>,
    v_max: f64,
}

impl<'a> PowerLawProblem<'a> {
    pub fn new(points: &'a [CurvaturePoint], mode: FitMode) -> Self {
        let v_max = points.iter().map(|p| p.v_pzt).fold(f64::MIN, f64::max);
        Self {
            points,
            fixed_gamma: mode.fixed_gamma(),
            v_max,
        }
    }

    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        (p[0].exp(), p[1], self.fixed_gamma.unwrap_or_else(|| p[2]))
    }
}

impl LeastSquaresProblem for PowerLawProblem<'_> {
    fn n_params(&self) -> usize {
        if self.fixed_gamma.is_some() {
            2
        } else {
            3
        }
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        let (alpha, v0, gamma) = self.unpack(p);
        self.points
            .iter()
            .map(|pt| (pt.k_el - alpha * (v0 - pt.v_pzt).powf(gamma)) / pt.sigma_k)
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let (alpha, v0, gamma) = self.unpack(p);
        let n = self.n_params();
        let mut jac = DMatrix::zeros(self.points.len(), n);
        for (i, pt) in self.points.iter().enumerate() {
            let x = v0 - pt.v_pzt;
            let m = alpha * x.powf(gamma) / pt.sigma_k;
            jac[(i, 0)] = -m;
            jac[(i, 1)] = -m * gamma / x;
            if n == 3 {
                jac[(i, 2)] = -m * x.ln();
            }
        }
        jac
    }

    fn is_feasible(&self, p: &[f64]) -> bool {
        p[1] > self.v_max + V0_BARRIER && p.iter().all(|x| x.is_finite())
    }
}

fn check_points(series: &[CurvaturePoint], needed: usize) -> Result<()> {
    for p in series {
        if !(p.k_el > 0.0 && p.k_el.is_finite() && p.sigma_k > 0.0 && p.sigma_k.is_finite() && p.v_pzt.is_finite()) {
            return Err(Error::InvalidInput(format!("invalid curvature point {p:?}")));
        }
    }
    let distinct = crate::synth::count_distinct(&series.iter().map(|p| p.v_pzt).collect::<Vec<_>>());
    if distinct < needed {
        return Err(Error::InsufficientPoints { needed, got: distinct });
    }
    if distinct != series.len() {
        return Err(Error::InvalidInput("PZT biases must be distinct".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawGuess {
    pub alpha: f64,
    pub v0_pzt: f64,
    pub gamma: f64,
}

/// Contact bias from the two closest usable points under exponent `gamma`.
fn extrapolate_v0(sorted: &[CurvaturePoint], gamma: f64) -> Result<f64> {
    let last = sorted[sorted.len() - 1];
    for other in sorted[..sorted.len() - 1].iter().rev() {
        // (V0 - v_far) / (V0 - v_near) = (k_far / k_near)^(1 / gamma)
        let ratio = (other.k_el / last.k_el).powf(1.0 / gamma);
        if ratio > 1.0 && ratio.is_finite() {
            let v0 = (ratio * last.v_pzt - other.v_pzt) / (ratio - 1.0);
            if v0.is_finite() && v0 > last.v_pzt {
                return Ok(v0);
            }
        }
    }
    Err(Error::DegenerateSeries(
        "curvature does not grow towards contact".into(),
    ))
}

/// Ordinary least squares of `ln k` on `ln(V0 - v)`: `(ln alpha, gamma, ssr)`.
fn log_log_line(sorted: &[CurvaturePoint], v0: f64) -> (f64, f64, f64) {
    let n = sorted.len() as f64;
    let xs: Vec<f64> = sorted.iter().map(|p| (v0 - p.v_pzt).ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|p| p.k_el.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    (intercept, slope, ssr)
}

/// Starting point for [`fit_power_law`]. V0 is extrapolated from the two
/// points closest to contact under a -2 law (or the fixed exponent); the
/// exponent and prefactor then come from a log-log line. In free mode the
/// extrapolation is repeated with the updated exponent until it settles.
pub fn initial_guess(series: &[CurvaturePoint], mode: FitMode) -> Result<PowerLawGuess> {
    if series.len() < 4 {
        return Err(Error::InsufficientPoints {
            needed: 4,
            got: series.len(),
        });
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(|a, b| a.v_pzt.total_cmp(&b.v_pzt));
    match mode {
        FitMode::Fixed { gamma } => {
            let v0 = extrapolate_v0(&sorted, gamma)?;
            let n = sorted.len() as f64;
            let ln_alpha = sorted
                .iter()
                .map(|p| p.k_el.ln() - gamma * (v0 - p.v_pzt).ln())
                .sum::<f64>()
                / n;
            Ok(PowerLawGuess {
                alpha: ln_alpha.exp(),
                v0_pzt: v0,
                gamma,
            })
        }
        FitMode::Free => {
            let mut v0 = extrapolate_v0(&sorted, -2.0)?;
            let (mut ln_alpha, mut gamma, mut ssr) = log_log_line(&sorted, v0);
            // Re-extrapolate V0 with the updated exponent while the log-log
            // line keeps improving; noisy closest points can make the plain
            // fixed-point iteration run away.
            for _ in 0..100 {
                if !(gamma < 0.0) {
                    break;
                }
                let Ok(next_v0) = extrapolate_v0(&sorted, gamma) else {
                    break;
                };
                let (next_ln_alpha, next_gamma, next_ssr) = log_log_line(&sorted, next_v0);
                if !(next_ssr < ssr) || !(next_gamma < 0.0) {
                    break;
                }
                let settled = (next_gamma - gamma).abs() <= 1e-13 * gamma.abs();
                (v0, ln_alpha, gamma, ssr) = (next_v0, next_ln_alpha, next_gamma, next_ssr);
                if settled {
                    break;
                }
            }
            if !(gamma < 0.0) {
                return Err(Error::DegenerateSeries(format!(
                    "log-log slope {gamma} is not negative"
                )));
            }
            Ok(PowerLawGuess {
                alpha: ln_alpha.exp(),
                v0_pzt: v0,
                gamma,
            })
        }
    }
}

pub fn fit_power_law(series: &[CurvaturePoint], mode: FitMode, settings: &LmSettings) -> Result<PowerLawFit> {
    let needed = mode.n_params() + 2;
    check_points(series, needed)?;
    let guess = initial_guess(series, mode)?;
    let problem = PowerLawProblem::new(series, mode);
    let mut start = vec![guess.alpha.ln(), guess.v0_pzt];
    if mode == FitMode::Free {
        start.push(guess.gamma);
    }
    let out = lm_minimize(&problem, &start, settings)?;
    if out.termination == (Termination::Stalled { infeasible: true }) {
        return Err(Error::V0Collision {
            v0_pzt: out.params[1],
            v_max: problem.v_max,
        });
    }
    let cov_internal = out.covariance()?;
    let alpha = out.params[0].exp();
    let n_par = start.len();
    // d alpha / d ln alpha = alpha
    let mut cov = vec![vec![0.0; n_par]; n_par];
    for i in 0..n_par {
        for j in 0..n_par {
            let si = if i == 0 { alpha } else { 1.0 };
            let sj = if j == 0 { alpha } else { 1.0 };
            cov[i][j] = si * sj * cov_internal[(i, j)];
        }
    }
    let dof = series.len() - n_par;
    Ok(PowerLawFit {
        alpha,
        v0_pzt: out.params[1],
        gamma: mode
            .fixed_gamma()
            .unwrap_or(out.params.get(2).copied().unwrap_or(f64::NAN)),
        gamma_fixed: mode != FitMode::Free,
        cov,
        chi2_red: out.cost / dof as f64,
        n_points: series.len(),
        converged: out.converged,
        iterations: out.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact_series(alpha: f64, v0: f64, gamma: f64, vs: &[f64]) -> Vec<CurvaturePoint> {
        vs.iter()
            .map(|&v| {
                let k = alpha * (v0 - v).powf(gamma);
                CurvaturePoint {
                    v_pzt: v,
                    k_el: k,
                    sigma_k: 0.04 * k,
                }
            })
            .collect()
    }

    fn biases() -> Vec<f64> {
        // irregular spacing, offsets 0.4 .. 25 V from a 43.12 V contact
        [
            18.1, 21.7, 24.0, 27.5, 29.9, 31.2, 33.6, 35.0, 36.4, 37.9, 39.1, 40.0, 40.8, 41.5, 42.1, 42.45, 42.72,
        ]
        .to_vec()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn exact_coulomb_recovery_free() {
        let s = exact_series(1.67e4, 43.12, -2.0, &biases());
        let fit = fit_power_law(&s, FitMode::Free, &LmSettings::default()).unwrap();
        assert!(fit.converged);
        assert!(rel(fit.gamma, -2.0) < 1e-8, "{}", fit.gamma);
        assert!(rel(fit.alpha, 1.67e4) < 1e-8);
        assert!(rel(fit.v0_pzt, 43.12) < 1e-8);
        assert!(fit.chi2_red < 1e-12);
        assert_eq!(fit.cov.len(), 3);
    }

    #[test]
    fn fixed_and_free_agree_on_exact_data() {
        let s = exact_series(830.0, 43.12, -1.7, &biases());
        let free = fit_power_law(&s, FitMode::Free, &LmSettings::default()).unwrap();
        let fixed = fit_power_law(&s, FitMode::Fixed { gamma: -1.7 }, &LmSettings::default()).unwrap();
        assert!(rel(free.alpha, fixed.alpha) < 1e-8);
        assert!(rel(free.v0_pzt, fixed.v0_pzt) < 1e-8);
        assert_eq!(fixed.cov.len(), 2);
        assert_eq!(fixed.sigma_gamma(), 0.0);
    }

    #[test]
    fn initial_guess_quality() {
        let s = exact_series(1.67e4, 43.12, -2.0, &biases());
        let g = initial_guess(&s, FitMode::Free).unwrap();
        assert!(rel(g.alpha, 1.67e4) < 0.05);
        assert!(rel(g.v0_pzt, 43.12) < 0.05);
        assert!(rel(g.gamma, -2.0) < 0.05);

        let s = exact_series(830.0, 43.12, -1.7, &biases());
        let g = initial_guess(&s, FitMode::Free).unwrap();
        assert!((g.gamma + 1.7).abs() < 1e-6, "{}", g.gamma);
        assert!((g.v0_pzt - 43.12).abs() < 1e-6);

        assert!(initial_guess(&s[..2], FitMode::Free).is_err());
    }

    #[test]
    fn flat_series_cannot_be_seeded() {
        let s: Vec<CurvaturePoint> = biases()
            .iter()
            .map(|&v| CurvaturePoint {
                v_pzt: v,
                k_el: 10.0 - 0.01 * v,
                sigma_k: 0.1,
            })
            .collect();
        assert!(matches!(
            initial_guess(&s, FitMode::Free),
            Err(Error::DegenerateSeries(_))
        ));
    }

    #[test]
    fn point_count_preconditions() {
        let s = exact_series(1.0, 43.12, -2.0, &[30.0, 35.0, 40.0, 42.0]);
        assert!(fit_power_law(&s, FitMode::Fixed { gamma: -2.0 }, &LmSettings::default()).is_ok());
        assert_eq!(
            fit_power_law(&s, FitMode::Free, &LmSettings::default()).unwrap_err(),
            Error::InsufficientPoints { needed: 5, got: 4 }
        );
    }

    #[test]
    fn mode_parsing_and_formatting() {
        assert_eq!("free".parse::<FitMode>().unwrap(), FitMode::Free);
        assert_eq!("fixed:-2".parse::<FitMode>().unwrap(), FitMode::Fixed { gamma: -2.0 });
        assert_eq!("fixed:-1.7".parse::<FitMode>().unwrap().to_string(), "fixed:-1.7");
        assert!("fixed:2".parse::<FitMode>().is_err());
        assert!("loose".parse::<FitMode>().is_err());
        assert_eq!(format_with_uncertainty(43.1234, 0.0104), "43.12±0.01");
        assert_eq!(format_with_uncertainty(56.771, 0.02), "56.77±0.02");
        assert_eq!(format_with_uncertainty(-1.7031, 0.0123), "-1.70±0.01");
    }
}
