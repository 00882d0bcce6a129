//! Calibration of a sphere-plate microresonator gap from electrostatic
//! frequency-shift sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod io;
pub mod lm;
pub mod parabola;
pub mod physics;
pub mod pipeline;
pub mod scaling;
pub mod synth;

pub use error::{Error, Result};
pub use lm::LmSettings;
pub use parabola::{fit_parabola, fit_run, CalibrationSeries, ParabolaFit};
pub use physics::{ApparatusConfig, CONSTANTS};
pub use pipeline::{run_pipeline, AnalysisConfig, AnalysisReport};
pub use scaling::{fit_power_law, CurvaturePoint, FitMode, PowerLawFit};
pub use synth::{generate_run, GroundTruth, MeasurementRun, SweepPlan};
