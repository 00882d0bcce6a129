//! End-to-end analysis of one measurement run.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    curvature_points, distance_report, nu_p_from_far_steps, residual_analysis, stability_scan, vc_trend,
    veq_comparison, DistanceReport, ResidualReport, StabilityTrace, VcTrend, VeqRow,
};
use crate::error::{Error, Result};
use crate::io::SCHEMA_VERSION;
use crate::lm::LmSettings;
use crate::parabola::{fit_run, CalibrationSeries};
use crate::physics::{pzt_to_distance, ApparatusConfig};
use crate::scaling::{fit_power_law, CurvaturePoint, FitMode, PowerLawFit};
use crate::synth::MeasurementRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceEstimator {
    /// `beta (V0 - V)` from the fitted contact bias.
    #[default]
    Linear,
    /// Inverted from the fitted power law.
    Curvature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuPSource {
    /// The apparatus `nu_p`.
    #[default]
    Config,
    /// Mean `nu0` of the three largest-gap steps.
    FarSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Overrides the apparatus recorded in the run file.
    pub apparatus: Option<ApparatusConfig>,
    /// Every mode is fitted; the first free mode (else the first mode that
    /// converges) supplies distances for the later stages.
    pub modes: Vec<FitMode>,
    pub lm: LmSettings,
    /// Lower bound on `sigma_k / k_el` for the power-law fit.
    pub sigma_floor: Option<f64>,
    pub stability_min_points: usize,
    pub distance_estimator: DistanceEstimator,
    pub nu_p_source: NuPSource,
    pub residual_gap_offset: bool,
    pub output_dir: Option<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            apparatus: None,
            modes: vec![FitMode::Free, FitMode::Fixed { gamma: -2.0 }],
            lm: LmSettings::default(),
            sigma_floor: Some(0.04),
            stability_min_points: 5,
            distance_estimator: DistanceEstimator::Linear,
            nu_p_source: NuPSource::Config,
            residual_gap_offset: true,
            output_dir: None,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("at least one fit mode is required".into()));
        }
        for m in &self.modes {
            if let Some(g) = m.fixed_gamma() {
                if !(g < 0.0) || !g.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "fixed exponent must be negative, got {g}"
                    )));
                }
            }
        }
        if let Some(f) = self.sigma_floor {
            if !(f >= 0.0) || !f.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "sigma_floor must be non-negative, got {f}"
                )));
            }
        }
        if self.stability_min_points < 4 {
            return Err(Error::InvalidConfig("stability_min_points must be at least 4".into()));
        }
        if let Some(cfg) = &self.apparatus {
            cfg.validate()?;
        }
        self.lm.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub mode: FitMode,
    pub fit: Option<PowerLawFit>,
    pub stability: Option<StabilityTrace>,
    pub distances: Option<DistanceReport>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: String,
    pub run_id: String,
    pub created: String,
    pub apparatus: ApparatusConfig,
    pub config: AnalysisConfig,
    pub series: CalibrationSeries,
    /// Aligned with `series.valid_fits()`.
    pub curvature: Vec<CurvaturePoint>,
    pub modes: Vec<ModeResult>,
    /// Mode whose fit produced `distances`, if any.
    pub distance_mode: Option<FitMode>,
    /// Gap per valid step, aligned with `curvature`.
    pub distances: Vec<f64>,
    pub vc_trend: Option<VcTrend>,
    pub veq: Option<Vec<VeqRow>>,
    pub residual: Option<ResidualReport>,
    pub diagnostics: Vec<String>,
}

impl AnalysisReport {
    pub fn mode(&self, mode: FitMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Stage output shared by the subcommands.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub apparatus: ApparatusConfig,
    pub series: CalibrationSeries,
    pub curvature: Vec<CurvaturePoint>,
    pub diagnostics: Vec<String>,
}

pub fn resolve_apparatus(run: &MeasurementRun, config: &AnalysisConfig) -> Result<ApparatusConfig> {
    let cfg = config
        .apparatus
        .or(run.apparatus)
        .ok_or_else(|| Error::InvalidConfig("no apparatus in the config or the run header".into()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parabola fits and curvature points, with steps ordered from the largest
/// gap to the smallest.
pub fn prepare(run: &MeasurementRun, config: &AnalysisConfig) -> Result<Prepared> {
    config.validate()?;
    let apparatus = resolve_apparatus(run, config)?;
    let mut diagnostics = Vec::new();
    let mut ordered = run.clone();
    ordered.sweeps.sort_by(|a, b| {
        apparatus
            .normalize_pzt(a.v_pzt)
            .total_cmp(&apparatus.normalize_pzt(b.v_pzt))
    });
    if ordered.sweeps != run.sweeps {
        diagnostics.push("sweeps reordered from the largest gap to the smallest".into());
    }
    let series = fit_run(&ordered)?;
    for gap in series.gaps() {
        diagnostics.push(format!(
            "step {} (v_pzt = {}) skipped: {}",
            gap.index,
            gap.v_pzt,
            gap.issue.as_deref().unwrap_or("unusable")
        ));
    }
    let curvature = curvature_points(&series, &apparatus, config.sigma_floor);
    Ok(Prepared {
        apparatus,
        series,
        curvature,
        diagnostics,
    })
}

pub fn analyze_mode(prepared: &Prepared, mode: FitMode, config: &AnalysisConfig) -> ModeResult {
    let mut errors = Vec::new();
    let fit = fit_power_law(&prepared.curvature, mode, &config.lm)
        .map_err(|e| errors.push(format!("power-law fit: {e}")))
        .ok();
    if let Some(f) = &fit {
        if !f.converged {
            errors.push(format!(
                "power-law fit did not converge after {} iterations",
                f.iterations
            ));
        }
    }
    let stability = stability_scan(&prepared.curvature, mode, config.stability_min_points, &config.lm)
        .map_err(|e| errors.push(format!("stability scan: {e}")))
        .ok();
    let distances = fit.as_ref().and_then(|f| {
        distance_report(f, &prepared.curvature, prepared.apparatus.beta)
            .map_err(|e| errors.push(format!("distances: {e}")))
            .ok()
    });
    ModeResult {
        mode,
        fit,
        stability,
        distances,
        errors,
    }
}

/// Picks the mode that supplies gap distances and extracts them.
pub fn select_distances(modes: &[ModeResult], estimator: DistanceEstimator) -> Option<(FitMode, Vec<f64>)> {
    let usable = |m: &&ModeResult| m.distances.is_some();
    let chosen = modes
        .iter()
        .filter(usable)
        .find(|m| m.mode == FitMode::Free)
        .or_else(|| modes.iter().find(usable))?;
    let report = chosen.distances.as_ref()?;
    let d = report
        .records
        .iter()
        .map(|r| match estimator {
            DistanceEstimator::Linear => r.d_linear,
            DistanceEstimator::Curvature => r.d_curvature,
        })
        .collect();
    Some((chosen.mode, d))
}

/// Gaps from the configured contact bias when no fit is usable.
fn nominal_distances(prepared: &Prepared) -> Result<Vec<f64>> {
    prepared
        .series
        .valid_fits()
        .map(|f| pzt_to_distance(&prepared.apparatus, f.v_pzt))
        .collect()
}

pub fn run_pipeline(run: &MeasurementRun, config: &AnalysisConfig) -> Result<AnalysisReport> {
    let prepared = prepare(run, config)?;
    let mut diagnostics = prepared.diagnostics.clone();
    let modes: Vec<ModeResult> = config
        .modes
        .iter()
        .map(|&m| analyze_mode(&prepared, m, config))
        .collect();
    for m in &modes {
        diagnostics.extend(m.errors.iter().map(|e| format!("{}: {e}", m.mode)));
    }

    let (distance_mode, distances) = match select_distances(&modes, config.distance_estimator) {
        Some((mode, d)) => (Some(mode), d),
        None => match nominal_distances(&prepared) {
            Ok(d) => {
                diagnostics.push("no usable power-law fit; distances use the configured contact bias".into());
                (None, d)
            }
            Err(e) => {
                diagnostics.push(format!("no distances available: {e}"));
                (None, Vec::new())
            }
        },
    };

    let mut trend = None;
    let mut veq = None;
    let mut residual = None;
    if !distances.is_empty() {
        match vc_trend(&prepared.series, &distances) {
            Ok(t) => {
                match veq_comparison(&t, &distances) {
                    Ok(rows) => veq = Some(rows),
                    Err(e) => diagnostics.push(format!("veq comparison: {e}")),
                }
                trend = Some(t);
            }
            Err(e) => diagnostics.push(format!("contact-potential trend: {e}")),
        }
        let nu_p = match config.nu_p_source {
            NuPSource::Config => Ok(prepared.apparatus.nu_p),
            NuPSource::FarSteps => nu_p_from_far_steps(&prepared.series, 3),
        };
        match nu_p.and_then(|nu_p| {
            residual_analysis(
                &prepared.series,
                &distances,
                nu_p,
                config.residual_gap_offset,
                &config.lm,
            )
        }) {
            Ok(r) => residual = Some(r),
            Err(e) => diagnostics.push(format!("residual analysis: {e}")),
        }
    }

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION.to_string(),
        run_id: run.run_id.clone(),
        created: run.created.clone(),
        apparatus: prepared.apparatus,
        config: config.clone(),
        series: prepared.series,
        curvature: prepared.curvature,
        modes,
        distance_mode,
        distances,
        vc_trend: trend,
        veq,
        residual,
        diagnostics,
    })
}
