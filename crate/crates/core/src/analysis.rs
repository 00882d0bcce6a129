//! Diagnostics built on the parabola and power-law fits: prefix stability
//! scans, the two absolute-distance estimators, contact-potential trends,
//! the residual force-gradient power law and the Casimir-equivalent voltage
//! comparison.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{lm_minimize, LeastSquaresProblem, LmSettings};
use crate::parabola::CalibrationSeries;
use crate::physics::{self, ApparatusConfig};
use crate::scaling::{fit_power_law, CurvaturePoint, FitMode, PowerLawFit};

/// Gradient exponent of the ideal PFA Casimir force.
pub const CASIMIR_EXPONENT: f64 = -4.0;

/// Curvature points from the valid fits of `series`, in run order.
///
/// Biases are polarity-normalized. With `sigma_floor = Some(f)` each
/// uncertainty is raised to at least `f * k_el`.
pub fn curvature_points(
    series: &CalibrationSeries,
    cfg: &ApparatusConfig,
    sigma_floor: Option<f64>,
) -> Vec<CurvaturePoint> {
    series
        .valid_fits()
        .map(|f| {
            let floor = sigma_floor.map_or(0.0, |r| r * f.k_el);
            CurvaturePoint {
                v_pzt: cfg.normalize_pzt(f.v_pzt),
                k_el: f.k_el,
                sigma_k: f.sigma_k_el().max(floor),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityEntry {
    pub n_included: usize,
    pub fit: Option<PowerLawFit>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrace {
    pub exponent_used: FitMode,
    pub entries: Vec<StabilityEntry>,
    /// First entry of the stable window (the final half of the trace).
    pub window_start: usize,
    /// `(max - min) / |mean|` of alpha over the stable window.
    pub spread_alpha: f64,
    /// Same for V0.
    pub spread_v0: f64,
}

fn relative_spread(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (max - min) / mean.abs()
}

/// Refit growing prefixes of `series`, largest gaps first.
pub fn stability_scan(
    series: &[CurvaturePoint],
    mode: FitMode,
    min_points: usize,
    settings: &LmSettings,
) -> Result<StabilityTrace> {
    if min_points < 4 {
        return Err(Error::InvalidInput(format!(
            "min_points must be >= 4, got {min_points}"
        )));
    }
    if series.len() < min_points + 2 {
        return Err(Error::InsufficientPoints {
            needed: min_points + 2,
            got: series.len(),
        });
    }
    if series.windows(2).any(|w| w[1].v_pzt <= w[0].v_pzt) {
        return Err(Error::InvalidInput(
            "series must run from the largest gap to the smallest".into(),
        ));
    }
    let entries: Vec<StabilityEntry> = (min_points..=series.len())
        .map(|n| match fit_power_law(&series[..n], mode, settings) {
            Ok(fit) => StabilityEntry {
                n_included: n,
                fit: Some(fit),
                error: None,
            },
            Err(e) => StabilityEntry {
                n_included: n,
                fit: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let window_start = entries.len() / 2;
    let window: Vec<&PowerLawFit> = entries[window_start..].iter().filter_map(|e| e.fit.as_ref()).collect();
    let alphas: Vec<f64> = window.iter().map(|f| f.alpha).collect();
    let v0s: Vec<f64> = window.iter().map(|f| f.v0_pzt).collect();
    Ok(StabilityTrace {
        exponent_used: mode,
        window_start,
        spread_alpha: relative_spread(&alphas),
        spread_v0: relative_spread(&v0s),
        entries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub v_pzt: f64,
    /// `beta (V0 - V)`.
    pub d_linear: f64,
    /// `beta (k_el / alpha)^(1 / gamma)`.
    pub d_curvature: f64,
    pub rel_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub records: Vec<DistanceRecord>,
    pub max_rel_discrepancy: f64,
    pub mean_rel_discrepancy: f64,
}

pub fn distance_report(fit: &PowerLawFit, series: &[CurvaturePoint], beta: f64) -> Result<DistanceReport> {
    if !fit.converged {
        return Err(Error::InvalidInput("distance estimates need a converged fit".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    if series.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let records = series
        .iter()
        .map(|p| {
            let offset = fit.v0_pzt - p.v_pzt;
            if !(offset > 0.0) {
                return Err(Error::V0Collision {
                    v0_pzt: fit.v0_pzt,
                    v_max: p.v_pzt,
                });
            }
            let d_linear = beta * offset;
            let d_curvature = beta * (p.k_el / fit.alpha).powf(1.0 / fit.gamma);
            Ok(DistanceRecord {
                v_pzt: p.v_pzt,
                d_linear,
                d_curvature,
                rel_discrepancy: (d_linear - d_curvature).abs() / d_linear,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max = records.iter().map(|r| r.rel_discrepancy).fold(0.0, f64::max);
    let mean = records.iter().map(|r| r.rel_discrepancy).sum::<f64>() / records.len() as f64;
    Ok(DistanceReport {
        records,
        max_rel_discrepancy: max,
        mean_rel_discrepancy: mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcModelChoice {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantVc {
    pub v_c: f64,
    pub sigma: f64,
    pub chi2_red: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearVc {
    /// Value at `d = 0` (V).
    pub intercept: f64,
    /// V/m.
    pub slope: f64,
    pub sigma_intercept: f64,
    pub sigma_slope: f64,
    pub cov_intercept_slope: f64,
    pub chi2_red: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcTrend {
    pub constant: ConstantVc,
    pub linear: LinearVc,
    /// `|slope| / sigma_slope`.
    pub slope_significance: f64,
    pub preferred: VcModelChoice,
}

impl VcTrend {
    /// Contact potential at `d` under the preferred model.
    pub fn eval(&self, d: f64) -> f64 {
        match self.preferred {
            VcModelChoice::Constant => self.constant.v_c,
            VcModelChoice::Linear => self.linear.intercept + self.linear.slope * d,
        }
    }
}

/// Constant and linear weighted fits of `V_c` against gap distance.
///
/// `distances` pairs with `series.valid_fits()`. The linear model is
/// preferred only when its slope is significant beyond 3 sigma and its
/// reduced chi-square is the lower one.
pub fn vc_trend(series: &CalibrationSeries, distances: &[f64]) -> Result<VcTrend> {
    let fits: Vec<_> = series.valid_fits().collect();
    if fits.len() != distances.len() {
        return Err(Error::InvalidInput(format!(
            "{} distances for {} valid fits",
            distances.len(),
            fits.len()
        )));
    }
    if fits.len() < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: fits.len(),
        });
    }
    let mut pts = Vec::with_capacity(fits.len());
    for (f, &d) in fits.iter().zip(distances) {
        let sigma = f.sigma_v_c();
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "contact potential at {} V has no usable uncertainty",
                f.v_pzt
            )));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NonPositiveDistance(d));
        }
        pts.push((d, f.v_c, 1.0 / (sigma * sigma)));
    }
    let n = pts.len() as f64;
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let mean_v = pts.iter().map(|p| p.1 * p.2).sum::<f64>() / sw;
    let chi2_const: f64 = pts.iter().map(|p| (p.1 - mean_v).powi(2) * p.2).sum();
    let constant = ConstantVc {
        v_c: mean_v,
        sigma: sw.sqrt().recip(),
        chi2_red: chi2_const / (n - 1.0),
    };

    // Centered on the weighted mean distance; intercept moved back to d = 0.
    let mean_d = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / sw;
    let sdd: f64 = pts.iter().map(|p| (p.0 - mean_d).powi(2) * p.2).sum();
    if !(sdd > 0.0) {
        return Err(Error::DegenerateDesign);
    }
    let sdv: f64 = pts.iter().map(|p| (p.0 - mean_d) * (p.1 - mean_v) * p.2).sum();
    let slope = sdv / sdd;
    let var_slope = 1.0 / sdd;
    let var_center = 1.0 / sw;
    let intercept = mean_v - slope * mean_d;
    let chi2_lin: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2) * p.2).sum();
    let linear = LinearVc {
        intercept,
        slope,
        sigma_intercept: (var_center + mean_d * mean_d * var_slope).sqrt(),
        sigma_slope: var_slope.sqrt(),
        cov_intercept_slope: -mean_d * var_slope,
        chi2_red: chi2_lin / (n - 2.0),
    };
    let slope_significance = slope.abs() / linear.sigma_slope;
    let preferred = if slope_significance > 3.0 && linear.chi2_red < constant.chi2_red {
        VcModelChoice::Linear
    } else {
        VcModelChoice::Constant
    };
    Ok(VcTrend {
        constant,
        linear,
        slope_significance,
        preferred,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub d: f64,
    pub delta_nu_r_sq: f64,
    pub sigma: f64,
}

/// `delta_nu_r^2 = amplitude * (d + gap_offset)^exponent`, d in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPowerLaw {
    pub amplitude: f64,
    pub exponent: f64,
    pub sigma_amplitude: f64,
    pub sigma_exponent: f64,
    /// Reference gap used internally; `amplitude_at_ref` is the model there.
    pub d_ref: f64,
    pub amplitude_at_ref: f64,
    pub sigma_amplitude_at_ref: f64,
    /// Common correction to the supplied distances; zero unless fitted.
    pub gap_offset: f64,
    pub sigma_gap_offset: f64,
    pub chi2_red: f64,
    pub converged: bool,
    /// `(exponent + 4) / sigma_exponent`.
    pub casimir_deviation_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualOutcome {
    Detected(ResidualPowerLaw),
    /// Fewer than two steps carry a residual beyond 3 sigma.
    Null {
        significant_points: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub nu_p: f64,
    pub points: Vec<ResidualPoint>,
    pub outcome: ResidualOutcome,
    pub casimir_expected_exponent: f64,
}

impl ResidualReport {
    pub fn fit(&self) -> Option<&ResidualPowerLaw> {
        match &self.outcome {
            ResidualOutcome::Detected(p) => Some(p),
            ResidualOutcome::Null { .. } => None,
        }
    }
}

/// Free frequency estimated from the mean `nu0^2` of the `n` largest-gap steps.
pub fn nu_p_from_far_steps(series: &CalibrationSeries, n: usize) -> Result<f64> {
    let far: Vec<f64> = series.valid_fits().take(n).map(|f| f.nu0_sq).collect();
    if far.len() < n || n == 0 {
        return Err(Error::InsufficientPoints {
            needed: n,
            got: far.len(),
        });
    }
    Ok((far.iter().sum::<f64>() / n as f64).sqrt())
}

/// `A_ref ((d + offset) / d_ref)^p` over `(ln A_ref, p[, offset / d_ref])`.
struct GapPowerLaw<'a> {
    points: &'a [ResidualPoint],
    d_ref: f64,
    fit_offset: bool,
    d_min: f64,
}

impl GapPowerLaw<'_> {
    fn ratio(&self, d: f64, p: &[f64]) -> f64 {
        d / self.d_ref + if self.fit_offset { p[2] } else { 0.0 }
    }
}

impl LeastSquaresProblem for GapPowerLaw<'_> {
    fn n_params(&self) -> usize {
        if self.fit_offset {
            3
        } else {
            2
        }
    }

    fn residuals(&self, p: &[f64]) -> Vec<f64> {
        self.points
            .iter()
            .map(|pt| (pt.delta_nu_r_sq - p[0].exp() * self.ratio(pt.d, p).powf(p[1])) / pt.sigma)
            .collect()
    }

    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.points.len(), self.n_params());
        for (i, pt) in self.points.iter().enumerate() {
            let ratio = self.ratio(pt.d, p);
            let m = p[0].exp() * ratio.powf(p[1]) / pt.sigma;
            jac[(i, 0)] = -m;
            jac[(i, 1)] = -m * ratio.ln();
            if self.fit_offset {
                jac[(i, 2)] = -m * p[1] / ratio;
            }
        }
        jac
    }

    fn is_feasible(&self, p: &[f64]) -> bool {
        p.iter().all(|x| x.is_finite()) && self.ratio(self.d_min, p) > 0.0
    }
}

/// Power-law fit of the non-electrostatic squared-frequency shift
/// `nu_p^2 - nu0^2` against gap distance.
///
/// `distances` pairs with `series.valid_fits()`. With `fit_offset` the fit
/// also absorbs a common shift of the distance scale, which any error in the
/// fitted contact bias produces; near contact that shift dominates the
/// residual error budget.
pub fn residual_analysis(
    series: &CalibrationSeries,
    distances: &[f64],
    nu_p: f64,
    fit_offset: bool,
    settings: &LmSettings,
) -> Result<ResidualReport> {
    let fits: Vec<_> = series.valid_fits().collect();
    if fits.len() != distances.len() {
        return Err(Error::InvalidInput(format!(
            "{} distances for {} valid fits",
            distances.len(),
            fits.len()
        )));
    }
    if fits.len() < 5 {
        return Err(Error::InsufficientPoints {
            needed: 5,
            got: fits.len(),
        });
    }
    if !(nu_p > 0.0 && nu_p.is_finite()) {
        return Err(Error::InvalidConfig(format!("nu_p must be positive, got {nu_p}")));
    }
    let points: Vec<ResidualPoint> = fits
        .iter()
        .zip(distances)
        .map(|(f, &d)| {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::NonPositiveDistance(d));
            }
            let sigma = f.sigma_nu0_sq();
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "nu0^2 at {} V has no usable uncertainty",
                    f.v_pzt
                )));
            }
            Ok(ResidualPoint {
                d,
                delta_nu_r_sq: nu_p * nu_p - f.nu0_sq,
                sigma,
            })
        })
        .collect::<Result<_>>()?;

    let significant: Vec<ResidualPoint> = points
        .iter()
        .filter(|p| p.delta_nu_r_sq > 3.0 * p.sigma)
        .copied()
        .collect();
    if significant.len() < 2 {
        return Ok(ResidualReport {
            nu_p,
            points,
            outcome: ResidualOutcome::Null {
                significant_points: significant.len(),
            },
            casimir_expected_exponent: CASIMIR_EXPONENT,
        });
    }

    // Seed from a log-log line through the significant points.
    let d_ref = (significant.iter().map(|p| p.d.ln()).sum::<f64>() / significant.len() as f64).exp();
    let xs: Vec<f64> = significant.iter().map(|p| (p.d / d_ref).ln()).collect();
    let ys: Vec<f64> = significant.iter().map(|p| p.delta_nu_r_sq.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 {
        xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx
    } else {
        CASIMIR_EXPONENT
    };
    let start = [my - slope * mx, slope];

    let problem = GapPowerLaw {
        points: &points,
        d_ref,
        fit_offset,
        d_min: points.iter().map(|p| p.d).fold(f64::INFINITY, f64::min),
    };
    let mut start = start.to_vec();
    if fit_offset {
        start.push(0.0);
    }
    let out = lm_minimize(&problem, &start, settings)?;
    let cov = out.covariance()?;
    let a_ref = out.params[0].exp();
    let exponent = out.params[1];
    let sigma_exponent = cov[(1, 1)].sqrt();
    // amplitude = a_ref * d_ref^-p: d ln A = d ln a_ref - ln(d_ref) dp
    let ln_dref = d_ref.ln();
    let var_ln_amp = cov[(0, 0)] - 2.0 * ln_dref * cov[(0, 1)] + ln_dref * ln_dref * cov[(1, 1)];
    let amplitude = a_ref * d_ref.powf(-exponent);
    Ok(ResidualReport {
        nu_p,
        outcome: ResidualOutcome::Detected(ResidualPowerLaw {
            amplitude,
            exponent,
            sigma_amplitude: amplitude * var_ln_amp.max(0.0).sqrt(),
            sigma_exponent,
            d_ref,
            amplitude_at_ref: a_ref,
            sigma_amplitude_at_ref: a_ref * cov[(0, 0)].sqrt(),
            gap_offset: if fit_offset { out.params[2] * d_ref } else { 0.0 },
            sigma_gap_offset: if fit_offset { cov[(2, 2)].sqrt() * d_ref } else { 0.0 },
            chi2_red: out.cost / (points.len() - start.len()) as f64,
            converged: out.converged,
            casimir_deviation_sigma: (exponent - CASIMIR_EXPONENT) / sigma_exponent,
        }),
        points,
        casimir_expected_exponent: CASIMIR_EXPONENT,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeqRow {
    pub d: f64,
    pub v_eq: f64,
    /// `|V_c(d) - V_c(d_min)|` under the preferred trend.
    pub miscompensation: f64,
    pub ratio: f64,
    pub exceeds: bool,
}

/// Casimir-equivalent voltage against the contact-potential miscompensation
/// left by nulling the potential at the smallest gap.
pub fn veq_comparison(trend: &VcTrend, distances: &[f64]) -> Result<Vec<VeqRow>> {
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let v_ref = trend.eval(d_min);
    distances
        .iter()
        .map(|&d| {
            let v_eq = physics::equivalent_voltage(d)?;
            let miscompensation = (trend.eval(d) - v_ref).abs();
            Ok(VeqRow {
                d,
                v_eq,
                miscompensation,
                ratio: miscompensation / v_eq,
                exceeds: miscompensation > v_eq,
            })
        })
        .collect()
}
