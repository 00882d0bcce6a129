//! Seeded synthetic apparatus.
//!
//! Runs are generated from a [`GroundTruth`] and a [`SweepPlan`]: every PZT
//! step is mapped to a gap (with optional PZT nonlinearity and drift), the
//! curvature follows a power law with a free exponent, the contact potential
//! and the non-electrostatic residual follow pluggable models, and Gaussian
//! noise is added to the measured frequency. The random source is
//! xoshiro256++ seeded through SplitMix64 (`seed_from_u64`), with Gaussian
//! deviates from the Box-Muller transform, so a run is a pure function of
//! `(truth, plan, seed)`.

use nalgebra::{Matrix3, Vector3};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{self, ApparatusConfig};

/// Drift extents above this need `GroundTruth::allow_large_drift`.
pub const MAX_DRIFT_EXTENT: f64 = 2e-7;

/// Relative k_el uncertainty advertised by noiseless runs, which still need a
/// positive `sigma_nu` for weighting.
pub const NOISELESS_SIGMA_REL: f64 = 1e-6;

/// Timestamp stamped on synthetic runs so that output stays reproducible.
pub const SYNTHETIC_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

/// Distance dependence of the contact potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContactPotentialModel {
    Constant {
        v0: f64,
    },
    /// `v0 + slope * d`, slope in V/m.
    Linear {
        v0: f64,
        slope: f64,
    },
    /// `v_near` up to `knee`, then linear up to `v_far` reached at `d_far`,
    /// constant beyond.
    SaturatingLinear {
        v_far: f64,
        v_near: f64,
        knee: f64,
        d_far: f64,
    },
}

impl ContactPotentialModel {
    pub fn eval(&self, d: f64) -> f64 {
        match *self {
            Self::Constant { v0 } => v0,
            Self::Linear { v0, slope } => v0 + slope * d,
            Self::SaturatingLinear {
                v_far,
                v_near,
                knee,
                d_far,
            } => {
                if d <= knee {
                    v_near
                } else if d >= d_far {
                    v_far
                } else {
                    v_near + (v_far - v_near) * (d - knee) / (d_far - knee)
                }
            }
        }
    }
}

/// Contact potential at gap `d`.
pub fn eval_vc(model: &ContactPotentialModel, d: f64) -> f64 {
    model.eval(d)
}

/// Non-electrostatic contribution to the squared-frequency shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualModel {
    None,
    /// Ideal-mirror PFA Casimir gradient.
    CasimirPfa,
    /// `amplitude * (d / 1 um)^exponent`, amplitude in Hz^2.
    PowerLaw {
        amplitude: f64,
        exponent: f64,
    },
}

impl ResidualModel {
    /// Squared-frequency shift (Hz^2) at gap `d`.
    pub fn shift(&self, cfg: &ApparatusConfig, d: f64) -> Result<f64> {
        Ok(match *self {
            Self::None => 0.0,
            Self::CasimirPfa => physics::frequency_shift_squared(cfg, physics::casimir_force_gradient_pfa(cfg, d)?),
            Self::PowerLaw { amplitude, exponent } => amplitude * (d / 1e-6).powf(exponent),
        })
    }
}

/// Gap drift accumulated over the acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftModel {
    None,
    /// Signed extent spread linearly from the first to the last step.
    LinearTotal {
        extent: f64,
    },
    /// Smooth half-cosine ramp reaching `extent` at the last step.
    Monotone {
        extent: f64,
    },
}

impl DriftModel {
    fn extent(&self) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::LinearTotal { extent } | Self::Monotone { extent } => extent,
        }
    }
}

/// Gap at acquisition step `step_index` of `total_steps` under `model`.
pub fn apply_drift(d_nominal: f64, step_index: usize, total_steps: usize, model: &DriftModel) -> Result<f64> {
    if !(d_nominal > 0.0) {
        return Err(Error::NonPositiveDistance(d_nominal));
    }
    let t = if total_steps > 1 {
        step_index as f64 / (total_steps - 1) as f64
    } else {
        0.0
    };
    let d = match *model {
        DriftModel::None => d_nominal,
        DriftModel::LinearTotal { extent } => d_nominal + extent * t,
        DriftModel::Monotone { extent } => d_nominal + extent * 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
    };
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::NegativeDistance(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cfg: ApparatusConfig,
    /// Curvature scaling exponent; -2 is the Coulomb law.
    pub gamma_true: f64,
    pub vc_model: ContactPotentialModel,
    pub residual_model: ResidualModel,
    /// Target relative scatter of the fitted k_el.
    pub noise_rel_kel: f64,
    pub drift_model: DriftModel,
    /// Quadratic PZT correction: `d = beta x (1 + c x / x_max)`.
    pub pzt_nonlinearity: f64,
    #[serde(default)]
    pub allow_large_drift: bool,
}

impl GroundTruth {
    /// Ideal Coulomb apparatus: no anomaly, noise, drift or residual force.
    pub fn ideal(cfg: ApparatusConfig) -> Self {
        Self {
            cfg,
            gamma_true: -2.0,
            vc_model: ContactPotentialModel::Constant { v0: 0.0 },
            residual_model: ResidualModel::None,
            noise_rel_kel: 0.0,
            drift_model: DriftModel::None,
            pzt_nonlinearity: 0.0,
            allow_large_drift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if !(self.gamma_true < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma_true must be negative, got {}",
                self.gamma_true
            )));
        }
        if !(self.noise_rel_kel >= 0.0 && self.noise_rel_kel.is_finite()) {
            return Err(Error::InvalidConfig("noise_rel_kel must be finite and >= 0".into()));
        }
        if self.drift_model.extent().abs() > MAX_DRIFT_EXTENT && !self.allow_large_drift {
            return Err(Error::InvalidConfig(format!(
                "drift extent {} m exceeds {MAX_DRIFT_EXTENT} m",
                self.drift_model.extent()
            )));
        }
        if !self.pzt_nonlinearity.is_finite() {
            return Err(Error::InvalidConfig("pzt_nonlinearity must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    /// PZT biases, any order and spacing.
    pub v_pzt_steps: Vec<f64>,
    /// Applied bias voltages of each sweep. Offsets from the step's contact
    /// potential when `center_on_vc` is set, absolute voltages otherwise.
    pub v_applied_grid: Vec<f64>,
    pub center_on_vc: bool,
    pub repeats_per_point: usize,
}

impl SweepPlan {
    /// 9 points spanning +-0.25 V around the contact potential.
    pub fn default_grid() -> Vec<f64> {
        (0..9).map(|i| -0.25 + 0.0625 * i as f64).collect()
    }

    pub fn with_steps(v_pzt_steps: Vec<f64>) -> Self {
        Self {
            v_pzt_steps,
            v_applied_grid: Self::default_grid(),
            center_on_vc: true,
            repeats_per_point: 1,
        }
    }

    /// `n` steps whose PZT offsets from contact are log-uniform in
    /// `[offset_min, offset_max]` volts, drawn from their own seeded stream.
    pub fn random_log_spaced(cfg: &ApparatusConfig, n: usize, offset_min: f64, offset_max: f64, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (lo, hi) = (offset_min.ln(), offset_max.ln());
        let steps = (0..n)
            .map(|_| {
                let x = (lo + (hi - lo) * unit_f64(&mut rng)).exp();
                f64::from(cfg.polarity) * (cfg.normalize_pzt(cfg.v0_pzt) - x)
            })
            .collect();
        Self::with_steps(steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_pzt_steps.is_empty() {
            return Err(Error::InvalidPlan("no PZT steps".into()));
        }
        if self.v_pzt_steps.iter().any(|v| !v.is_finite()) || self.v_applied_grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPlan("non-finite voltage".into()));
        }
        let distinct = count_distinct(&self.v_applied_grid);
        if distinct < 5 {
            return Err(Error::InvalidPlan(format!(
                "need >= 5 distinct applied voltages, got {distinct}"
            )));
        }
        if self.repeats_per_point == 0 {
            return Err(Error::InvalidPlan("repeats_per_point must be >= 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn count_distinct(values: &[f64]) -> usize {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub v_applied: f64,
    pub nu_m: f64,
    pub sigma_nu: f64,
}

/// One fixed-PZT step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSweep {
    pub v_pzt: f64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRun {
    pub run_id: String,
    pub created: String,
    pub apparatus: Option<ApparatusConfig>,
    pub plan: Option<SweepPlan>,
    /// Largest gap first.
    pub sweeps: Vec<VoltageSweep>,
    /// Present only for synthetic runs.
    pub provenance: Option<GroundTruth>,
}

/// Noiseless state of one step, as seen by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTruth {
    pub v_pzt: f64,
    pub distance: f64,
    pub k_el: f64,
    pub v_c: f64,
    pub nu0_sq: f64,
}

/// Plan steps in acquisition order: largest gap first.
fn ordered_steps(cfg: &ApparatusConfig, plan: &SweepPlan) -> Vec<f64> {
    let mut steps = plan.v_pzt_steps.clone();
    steps.sort_by(|a, b| cfg.normalize_pzt(*a).total_cmp(&cfg.normalize_pzt(*b)));
    steps
}

/// Per-step ground truth in acquisition order.
pub fn step_truths(truth: &GroundTruth, plan: &SweepPlan) -> Result<Vec<StepTruth>> {
    truth.validate()?;
    plan.validate()?;
    let cfg = &truth.cfg;
    let steps = ordered_steps(cfg, plan);
    let offsets: Vec<f64> = steps.iter().map(|&v| cfg.pzt_offset(v)).collect();
    if let Some(&x) = offsets.iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::InvalidPlan(format!(
            "PZT offset {x} V puts the gap at or beyond contact"
        )));
    }
    let x_max = offsets.iter().copied().fold(f64::MIN, f64::max);
    let nominal: Vec<f64> = offsets
        .iter()
        .map(|&x| cfg.beta * x * (1.0 + truth.pzt_nonlinearity * x / x_max))
        .collect();
    if let Some(&d) = nominal.iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::InvalidPlan(format!("nonlinearity drives nominal gap to {d} m")));
    }
    // The gamma-law is pinned to the Coulomb curvature at the largest gap.
    let d_ref = nominal.iter().copied().fold(f64::MIN, f64::max);
    let k_ref = physics::curvature_coefficient(cfg, d_ref)?;
    let n = steps.len();
    let nu_p_sq = cfg.nu_p * cfg.nu_p;
    steps
        .iter()
        .zip(&nominal)
        .enumerate()
        .map(|(i, (&v_pzt, &d_nom))| {
            let d = apply_drift(d_nom, i, n, &truth.drift_model)?;
            let k_el = if truth.gamma_true == -2.0 {
                physics::curvature_coefficient(cfg, d)?
            } else {
                k_ref * (d / d_ref).powf(truth.gamma_true)
            };
            let nu0_sq = nu_p_sq - truth.residual_model.shift(cfg, d)?;
            Ok(StepTruth {
                v_pzt,
                distance: d,
                k_el,
                v_c: truth.vc_model.eval(d),
                nu0_sq,
            })
        })
        .collect()
}

/// Frequency noise giving a relative k_el scatter of `rel` for a weighted
/// quadratic fit over `voltages` sampled at frequencies `nus`.
fn sigma_nu_for(rel: f64, k_el: f64, voltages: &[f64], nus: &[f64]) -> Result<f64> {
    let mean = voltages.iter().sum::<f64>() / voltages.len() as f64;
    let mut normal = Matrix3::<f64>::zeros();
    for (&v, &nu) in voltages.iter().zip(nus) {
        let x = v - mean;
        let row = Vector3::new(1.0, x, x * x);
        normal += row * row.transpose() / (4.0 * nu * nu);
    }
    let inv = normal.try_inverse().ok_or(Error::DegenerateDesign)?;
    Ok(rel * k_el / inv[(2, 2)].sqrt())
}

fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal deviates by Box-Muller, one spare cached.
struct Gaussian {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare: None,
        }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - unit_f64(&mut self.rng);
        let u2 = unit_f64(&mut self.rng);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

pub fn generate_run(truth: &GroundTruth, plan: &SweepPlan, seed: u64) -> Result<MeasurementRun> {
    let truths = step_truths(truth, plan)?;
    let mut gauss = Gaussian::new(seed);
    let mut sweeps = Vec::with_capacity(truths.len());
    for st in &truths {
        let voltages: Vec<f64> = plan
            .v_applied_grid
            .iter()
            .flat_map(|&g| {
                let v = if plan.center_on_vc { st.v_c + g } else { g };
                std::iter::repeat_n(v, plan.repeats_per_point)
            })
            .collect();
        let clean: Vec<f64> = voltages
            .iter()
            .map(|&v| {
                let dv = v - st.v_c;
                let nu_sq = st.nu0_sq - st.k_el * dv * dv;
                if nu_sq > 0.0 {
                    Ok(nu_sq.sqrt())
                } else {
                    Err(Error::UnstableResonator(nu_sq))
                }
            })
            .collect::<Result<_>>()?;
        let rel = if truth.noise_rel_kel > 0.0 {
            truth.noise_rel_kel
        } else {
            NOISELESS_SIGMA_REL
        };
        let sigma_nu = sigma_nu_for(rel, st.k_el, &voltages, &clean)?;
        let samples = voltages
            .iter()
            .zip(&clean)
            .map(|(&v, &nu)| {
                let noise = if truth.noise_rel_kel > 0.0 {
                    sigma_nu * gauss.next()
                } else {
                    0.0
                };
                Sample {
                    v_applied: v,
                    nu_m: nu + noise,
                    sigma_nu,
                }
            })
            .collect();
        sweeps.push(VoltageSweep {
            v_pzt: st.v_pzt,
            samples,
        });
    }
    Ok(MeasurementRun {
        run_id: format!("synthetic-{seed}"),
        created: SYNTHETIC_TIMESTAMP.to_string(),
        apparatus: Some(truth.cfg),
        plan: Some(plan.clone()),
        sweeps,
        provenance: Some(truth.clone()),
    })
}

/// Synthetic counterpart of a long anomalous-exponent run: 30 randomly spaced
/// steps between 0.05 V and 40 V from contact (about 4 nm to 3.5 um), a
/// -1.70 curvature exponent, 4% k_el scatter and a -150 mV contact potential.
pub fn run1_analog(plan_seed: u64) -> (GroundTruth, SweepPlan) {
    let cfg = ApparatusConfig::default();
    let truth = GroundTruth {
        gamma_true: -1.70,
        vc_model: ContactPotentialModel::Constant { v0: -0.150 },
        noise_rel_kel: 0.04,
        ..GroundTruth::ideal(cfg)
    };
    let plan = SweepPlan::random_log_spaced(&cfg, 30, 0.05, 40.0, plan_seed);
    (truth, plan)
}

/// Coulomb curvature with an injected ideal PFA Casimir residual: 30 steps
/// between about 50 nm and 1.7 um, 4% k_el scatter.
pub fn casimir_analog(plan_seed: u64) -> (GroundTruth, SweepPlan) {
    let cfg = ApparatusConfig::default();
    let truth = GroundTruth {
        residual_model: ResidualModel::CasimirPfa,
        vc_model: ContactPotentialModel::Constant { v0: -0.150 },
        noise_rel_kel: 0.04,
        ..GroundTruth::ideal(cfg)
    };
    let plan = SweepPlan::random_log_spaced(&cfg, 30, 0.6, 20.0, plan_seed);
    (truth, plan)
}
