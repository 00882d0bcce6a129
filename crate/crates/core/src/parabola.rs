//! Per-step extraction of `(nu0^2, k_el, V_c)` from a voltage sweep.
//!
//! The fit is linear least squares in squared-frequency space,
//! `nu^2 = c0 + c1 V + c2 V^2`, weighted by `var(nu^2) = (2 nu sigma)^2`.
//! The parabola parameters follow from `k_el = -c2`, `V_c = -c1 / (2 c2)`,
//! `nu0^2 = c0 - c1^2 / (4 c2)`; their covariance is the first-order
//! propagation of the linear-fit covariance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{count_distinct, MeasurementRun, VoltageSweep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParabolaStatus {
    Valid,
    /// Upward-opening parabola (`k_el <= 0`); returned for inspection only.
    NonConcave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParabolaFit {
    pub v_pzt: f64,
    pub nu0_sq: f64,
    pub k_el: f64,
    pub v_c: f64,
    /// Covariance over `(nu0_sq, k_el, v_c)`.
    pub cov: [[f64; 3]; 3],
    /// Zero when there are no degrees of freedom left.
    pub chi2_red: f64,
    pub n_points: usize,
    pub status: ParabolaStatus,
}

impl ParabolaFit {
    pub fn sigma_nu0_sq(&self) -> f64 {
        self.cov[0][0].sqrt()
    }

    pub fn sigma_k_el(&self) -> f64 {
        self.cov[1][1].sqrt()
    }

    pub fn sigma_v_c(&self) -> f64 {
        self.cov[2][2].sqrt()
    }

    pub fn is_valid(&self) -> bool {
        self.status == ParabolaStatus::Valid
    }
}

pub fn fit_parabola(sweep: &VoltageSweep) -> Result<ParabolaFit> {
    let samples = &sweep.samples;
    let voltages: Vec<f64> = samples.iter().map(|s| s.v_applied).collect();
    let distinct = count_distinct(&voltages);
    if distinct < 3 {
        return Err(Error::InsufficientPoints {
            needed: 3,
            got: distinct,
        });
    }
    for s in samples {
        if !(s.sigma_nu > 0.0 && s.sigma_nu.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma_nu must be positive, got {}",
                s.sigma_nu
            )));
        }
        if !(s.nu_m.is_finite() && s.v_applied.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample".into()));
        }
    }

    // Work relative to the largest frequency and the weighted mean voltage;
    // the parabola depth can be 1e-6 of nu^2.
    let nu_ref = samples.iter().map(|s| s.nu_m).fold(f64::MIN, f64::max);
    let weights: Vec<f64> = samples
        .iter()
        .map(|s| 1.0 / (2.0 * s.nu_m * s.sigma_nu).powi(2))
        .collect();
    let w_sum: f64 = weights.iter().sum();
    let v_mean = voltages.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / w_sum;

    let mut normal = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    let rows: Vec<(Vector3<f64>, f64)> = samples
        .iter()
        .map(|s| {
            let x = s.v_applied - v_mean;
            let y = (s.nu_m - nu_ref) * (s.nu_m + nu_ref);
            (Vector3::new(1.0, x, x * x), y)
        })
        .collect();
    for ((row, y), w) in rows.iter().zip(&weights) {
        normal += row * row.transpose() * *w;
        rhs += row * (*y * w);
    }
    // Column scaling keeps the 3x3 solve well conditioned for tiny voltage spans.
    let scale = Vector3::new(
        normal[(0, 0)].sqrt().recip(),
        normal[(1, 1)].sqrt().recip(),
        normal[(2, 2)].sqrt().recip(),
    );
    if scale.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateDesign);
    }
    let d = Matrix3::from_diagonal(&scale);
    let scaled = d * normal * d;
    let chol = scaled.cholesky().ok_or(Error::DegenerateDesign)?;
    let coef = d * chol.solve(&(d * rhs));
    let cov_c = d * chol.inverse() * d;
    let (b0, b1, b2) = (coef[0], coef[1], coef[2]);
    if b2 == 0.0 || !b2.is_finite() {
        return Err(Error::DegenerateDesign);
    }

    let ssr: f64 = rows
        .iter()
        .zip(&weights)
        .map(|((row, y), w)| (y - row.dot(&coef)).powi(2) * w)
        .sum();
    let dof = samples.len().saturating_sub(3);
    let chi2_red = if dof > 0 { ssr / dof as f64 } else { 0.0 };

    let x_c = -b1 / (2.0 * b2);
    let nu0_sq = nu_ref * nu_ref + (b0 - b1 * b1 / (4.0 * b2));
    let jac = Matrix3::new(
        1.0,
        -b1 / (2.0 * b2),
        b1 * b1 / (4.0 * b2 * b2),
        0.0,
        0.0,
        -1.0,
        0.0,
        -1.0 / (2.0 * b2),
        b1 / (2.0 * b2 * b2),
    );
    let cov = jac * cov_c * jac.transpose();
    let cov = [0, 1, 2].map(|i| [0, 1, 2].map(|j| 0.5 * (cov[(i, j)] + cov[(j, i)])));

    Ok(ParabolaFit {
        v_pzt: sweep.v_pzt,
        nu0_sq,
        k_el: -b2,
        v_c: v_mean + x_c,
        cov,
        chi2_red,
        n_points: samples.len(),
        status: if b2 < 0.0 {
            ParabolaStatus::Valid
        } else {
            ParabolaStatus::NonConcave
        },
    })
}

/// Outcome for one sweep of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub index: usize,
    pub v_pzt: f64,
    pub fit: Option<ParabolaFit>,
    /// Why the step is unusable: a fit error or a non-concave parabola.
    pub issue: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSeries {
    pub run_id: String,
    /// One entry per sweep, in run order (largest gap first).
    pub steps: Vec<StepFit>,
}

impl CalibrationSeries {
    /// Fits usable downstream, in run order.
    pub fn valid_fits(&self) -> impl Iterator<Item = &ParabolaFit> {
        self.steps
            .iter()
            .filter_map(|s| s.fit.as_ref())
            .filter(|f| f.is_valid())
    }

    pub fn gaps(&self) -> impl Iterator<Item = &StepFit> {
        self.steps.iter().filter(|s| s.issue.is_some())
    }
}

pub fn fit_run(run: &MeasurementRun) -> Result<CalibrationSeries> {
    if run.sweeps.is_empty() {
        return Err(Error::EmptyRun);
    }
    let steps = run
        .sweeps
        .iter()
        .enumerate()
        .map(|(index, sweep)| match fit_parabola(sweep) {
            Ok(fit) => {
                let issue = (!fit.is_valid()).then(|| format!("non-concave parabola (k_el = {})", fit.k_el));
                StepFit {
                    index,
                    v_pzt: sweep.v_pzt,
                    fit: Some(fit),
                    issue,
                }
            }
            Err(e) => StepFit {
                index,
                v_pzt: sweep.v_pzt,
                fit: None,
                issue: Some(e.to_string()),
            },
        })
        .collect();
    Ok(CalibrationSeries {
        run_id: run.run_id.clone(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Sample;

    fn sweep_from(f: impl Fn(f64) -> f64, voltages: &[f64], sigma: f64) -> VoltageSweep {
        VoltageSweep {
            v_pzt: 30.0,
            samples: voltages
                .iter()
                .map(|&v| Sample {
                    v_applied: v,
                    nu_m: f(v).sqrt(),
                    sigma_nu: sigma,
                })
                .collect(),
        }
    }

    fn grid(center: f64) -> Vec<f64> {
        (0..9).map(|i| center - 0.25 + 0.0625 * i as f64).collect()
    }

    #[test]
    fn exact_recovery() {
        let truth = |v: f64| 894.0f64.powi(2) - 100.0 * (v - 0.05).powi(2);
        let fit = fit_parabola(&sweep_from(truth, &grid(0.05), 1e-3)).unwrap();
        assert!(((fit.nu0_sq - 894.0f64.powi(2)) / 894.0f64.powi(2)).abs() < 1e-10);
        assert!(((fit.k_el - 100.0) / 100.0).abs() < 1e-10);
        assert!(((fit.v_c - 0.05) / 0.05).abs() < 1e-10);
        assert!(fit.chi2_red < 1e-12);
        assert!(fit.is_valid());
        for i in 0..3 {
            assert!(fit.cov[i][i] >= 0.0);
            for j in 0..3 {
                assert_eq!(fit.cov[i][j], fit.cov[j][i]);
            }
        }
    }

    #[test]
    fn reflection_symmetry_of_vc() {
        let vc = 0.1;
        let base = |v: f64| 8e5 - 250.0 * (v - vc).powi(2);
        let noise = [0.3, -0.1, 0.7, -0.4, 0.0, -0.4, 0.7, -0.1, 0.3];
        let volts = grid(vc);
        let sweep = VoltageSweep {
            v_pzt: 1.0,
            samples: volts
                .iter()
                .zip(noise)
                .map(|(&v, n)| Sample {
                    v_applied: v,
                    nu_m: base(v).sqrt() + n * 1e-3,
                    sigma_nu: 1e-3,
                })
                .collect(),
        };
        let mut mirrored = sweep.clone();
        for s in &mut mirrored.samples {
            s.v_applied = 2.0 * vc - s.v_applied;
        }
        let a = fit_parabola(&sweep).unwrap();
        let b = fit_parabola(&mirrored).unwrap();
        assert!((a.v_c - b.v_c).abs() < 1e-12);
        assert!((a.v_c - vc).abs() < 1e-12);
    }

    #[test]
    fn voltage_shift_moves_only_vc() {
        let f = |v: f64| 7.9e5 - 40.0 * (v + 0.12).powi(2) + 0.01 * (v * 37.0).sin();
        let volts = grid(-0.12);
        let a = fit_parabola(&sweep_from(f, &volts, 2e-3)).unwrap();
        let delta = 0.731;
        let shifted: Vec<f64> = volts.iter().map(|v| v + delta).collect();
        let b = fit_parabola(&sweep_from(|v| f(v - delta), &shifted, 2e-3)).unwrap();
        assert!((b.v_c - a.v_c - delta).abs() < 1e-10);
        assert!(((b.k_el - a.k_el) / a.k_el).abs() < 1e-10);
        assert!(((b.nu0_sq - a.nu0_sq) / a.nu0_sq).abs() < 1e-10);
    }

    #[test]
    fn error_paths() {
        let f = |v: f64| 8e5 - 10.0 * v * v;
        let two = sweep_from(f, &[0.0, 0.1, 0.1, 0.0], 1e-3);
        assert_eq!(fit_parabola(&two), Err(Error::InsufficientPoints { needed: 3, got: 2 }));
        let zero_sigma = sweep_from(f, &grid(0.0), 0.0);
        assert!(matches!(fit_parabola(&zero_sigma), Err(Error::InvalidInput(_))));
        let up = sweep_from(|v| 8e5 + 10.0 * v * v, &grid(0.0), 1e-3);
        let fit = fit_parabola(&up).unwrap();
        assert_eq!(fit.status, ParabolaStatus::NonConcave);
        assert!(fit.k_el < 0.0);
    }

    #[test]
    fn duplicate_voltages_are_independent_points() {
        let f = |v: f64| 8e5 - 30.0 * (v - 0.02).powi(2);
        let mut volts = grid(0.0);
        volts.extend(grid(0.0));
        let fit = fit_parabola(&sweep_from(f, &volts, 1e-3)).unwrap();
        assert_eq!(fit.n_points, 18);
        assert!(((fit.k_el - 30.0) / 30.0).abs() < 1e-9);
    }

    #[test]
    fn run_isolation() {
        let f = |v: f64| 8e5 - 30.0 * v * v;
        let good = sweep_from(f, &grid(0.0), 1e-3);
        let bad = sweep_from(f, &[0.0, 0.1], 1e-3);
        let run = MeasurementRun {
            run_id: "t".into(),
            created: "now".into(),
            apparatus: None,
            plan: None,
            sweeps: vec![good.clone(), bad, good],
            provenance: None,
        };
        let series = fit_run(&run).unwrap();
        assert_eq!(series.steps.len(), 3);
        assert_eq!(series.valid_fits().count(), 2);
        let gap = series.gaps().next().unwrap();
        assert_eq!(gap.index, 1);
        assert!(gap.issue.as_ref().unwrap().contains("at least 3"));
        let empty = MeasurementRun { sweeps: vec![], ..run };
        assert_eq!(fit_run(&empty), Err(Error::EmptyRun));
    }
}
