//! Closed-form electrostatic and Casimir models for the sphere-plane geometry.
//!
//! Everything here is strict SI. PZT volts enter only through the actuation
//! coefficient `beta` (m/V) and the polarity flag.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CODATA 2018 constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    pub epsilon0: f64,
    pub hbar: f64,
    pub c: f64,
}

pub const CONSTANTS: PhysicalConstants = PhysicalConstants {
    epsilon0: 8.8541878128e-12,
    hbar: 1.054571817e-34,
    c: 2.99792458e8,
};

/// Ground-truth description of the sphere-plane apparatus.
///
/// `m_eff` is the modal mass of the fundamental flexural mode. It is an
/// input, not derived from the beam geometry; `m_p / 4` is a common
/// approximation when only the physical mass is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApparatusConfig {
    /// Sphere radius of curvature (m).
    pub radius: f64,
    /// Effective modal mass (kg).
    pub m_eff: f64,
    /// Free flexural frequency (Hz).
    pub nu_p: f64,
    /// PZT actuation coefficient (m/V).
    pub beta: f64,
    /// PZT bias at which the surfaces touch (V).
    pub v0_pzt: f64,
    /// +1 if the gap shrinks as the PZT bias grows, -1 otherwise.
    pub polarity: i8,
}

impl Default for ApparatusConfig {
    /// Dartmouth-style sphere-plane setup: 30.9 mm lens, 894 Hz cantilever,
    /// 87 nm/V PZT, contact at 43.12 V. The physical mass 1.72e-4 kg
    /// stands in for `m_eff`.
    fn default() -> Self {
        Self {
            radius: 30.9e-3,
            m_eff: 1.72e-4,
            nu_p: 894.0,
            beta: 87e-9,
            v0_pzt: 43.12,
            polarity: 1,
        }
    }
}

fn check_distance(d: f64) -> Result<()> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveDistance(d))
    }
}

impl ApparatusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("radius", self.radius),
            ("m_eff", self.m_eff),
            ("nu_p", self.nu_p),
            ("beta", self.beta),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if !self.v0_pzt.is_finite() {
            return Err(Error::InvalidConfig("v0_pzt must be finite".into()));
        }
        if self.polarity != 1 && self.polarity != -1 {
            return Err(Error::InvalidConfig(format!(
                "polarity must be +1 or -1, got {}",
                self.polarity
            )));
        }
        Ok(())
    }

    /// PZT bias mapped to the convention where the gap shrinks as it grows.
    pub fn normalize_pzt(&self, v_pzt: f64) -> f64 {
        f64::from(self.polarity) * v_pzt
    }

    /// Gap distance offset in PZT volts, `V0 - V` after polarity normalization.
    pub fn pzt_offset(&self, v_pzt: f64) -> f64 {
        self.normalize_pzt(self.v0_pzt) - self.normalize_pzt(v_pzt)
    }

    /// `4 pi^2 m_eff`, the map from force gradient to squared-frequency shift.
    fn gradient_to_shift(&self) -> f64 {
        4.0 * PI * PI * self.m_eff
    }
}

/// PFA electrostatic force gradient `pi eps0 R V^2 / d^2`.
pub fn electrostatic_force_gradient(cfg: &ApparatusConfig, v_diff: f64, d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(PI * CONSTANTS.epsilon0 * cfg.radius * v_diff * v_diff / (d * d))
}

/// PFA Casimir force gradient `pi^3 hbar c R / (120 d^4)` for ideal mirrors.
pub fn casimir_force_gradient_pfa(cfg: &ApparatusConfig, d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(PI.powi(3) * CONSTANTS.hbar * CONSTANTS.c * cfg.radius / (120.0 * d.powi(4)))
}

/// PFA Casimir force `pi^3 hbar c R / (360 d^3)`.
pub fn casimir_force_pfa(cfg: &ApparatusConfig, d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(PI.powi(3) * CONSTANTS.hbar * CONSTANTS.c * cfg.radius / (360.0 * d.powi(3)))
}

/// Squared-frequency shift produced by a force gradient (Hz^2).
pub fn frequency_shift_squared(cfg: &ApparatusConfig, f_prime: f64) -> f64 {
    f_prime / cfg.gradient_to_shift()
}

/// Squared resonance frequency under a total external force gradient.
pub fn frequency_squared(cfg: &ApparatusConfig, f_prime_total: f64) -> Result<f64> {
    let nu_sq = cfg.nu_p * cfg.nu_p - frequency_shift_squared(cfg, f_prime_total);
    if nu_sq > 0.0 {
        Ok(nu_sq)
    } else {
        Err(Error::UnstableResonator(nu_sq))
    }
}

/// Parabola curvature `eps0 R / (4 pi m_eff d^2)` in Hz^2/V^2.
pub fn curvature_coefficient(cfg: &ApparatusConfig, d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(CONSTANTS.epsilon0 * cfg.radius / (4.0 * PI * cfg.m_eff * d * d))
}

/// Calibration factor `eps0 R / (4 pi m_eff beta^2)`, the prefactor of the
/// inverse-square curvature law written in PZT volts.
pub fn alpha_factor(cfg: &ApparatusConfig) -> f64 {
    CONSTANTS.epsilon0 * cfg.radius / (4.0 * PI * cfg.m_eff * cfg.beta * cfg.beta)
}

/// Absolute gap from the PZT bias, `beta (V0 - V)`.
pub fn pzt_to_distance(cfg: &ApparatusConfig, v_pzt: f64) -> Result<f64> {
    let offset = cfg.pzt_offset(v_pzt);
    if offset > 0.0 {
        Ok(cfg.beta * offset)
    } else {
        Err(Error::ContactOrBeyond {
            v_pzt,
            v0_pzt: cfg.v0_pzt,
        })
    }
}

/// Bias whose electrostatic force equals the PFA Casimir force at `d`:
/// `(pi / d) sqrt(hbar c / (360 eps0))`.
pub fn equivalent_voltage(d: f64) -> Result<f64> {
    check_distance(d)?;
    Ok(PI / d * (CONSTANTS.hbar * CONSTANTS.c / (360.0 * CONSTANTS.epsilon0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn electrostatic_gradient_values() {
        let cfg = ApparatusConfig::default();
        assert_eq!(electrostatic_force_gradient(&cfg, 0.0, 1e-6).unwrap(), 0.0);
        let a = electrostatic_force_gradient(&cfg, 0.37, 2e-7).unwrap();
        let b = electrostatic_force_gradient(&cfg, -0.37, 2e-7).unwrap();
        assert_eq!(a, b);
        // pi * eps0 * R * V^2 / d^2 with R = 0.0309, V = 0.1, d = 1e-7
        let expected = std::f64::consts::PI * 8.8541878128e-12 * 0.0309 * 0.01 / 1e-14;
        let got = electrostatic_force_gradient(&cfg, 0.1, 1e-7).unwrap();
        assert!(rel(got, expected) < 1e-14);
        assert!(matches!(
            electrostatic_force_gradient(&cfg, 0.1, 0.0),
            Err(Error::NonPositiveDistance(_))
        ));
    }

    #[test]
    fn casimir_gradient_scaling() {
        let cfg = ApparatusConfig::default();
        let g1 = casimir_force_gradient_pfa(&cfg, 1e-7).unwrap();
        let g2 = casimir_force_gradient_pfa(&cfg, 2e-7).unwrap();
        let g10 = casimir_force_gradient_pfa(&cfg, 1e-6).unwrap();
        assert!(rel(g1 / g2, 16.0) < 1e-12);
        assert!(rel(g1 / g10, 1e4) < 1e-12);
        // 30-digit evaluation of pi^3 hbar c R / (120 d^4) at d = 1 um
        let at_um = casimir_force_gradient_pfa(&cfg, 1e-6).unwrap();
        assert!(rel(at_um, 2.524_199_725_637_134e-4) < 1e-13, "{at_um}");
        assert!(casimir_force_gradient_pfa(&cfg, -1.0).is_err());
    }

    #[test]
    fn frequency_squared_cases() {
        let cfg = ApparatusConfig::default();
        assert_eq!(frequency_squared(&cfg, 0.0).unwrap(), 894.0 * 894.0);
        let unit_shift = 4.0 * PI * PI * cfg.m_eff;
        let got = frequency_squared(&cfg, unit_shift).unwrap();
        assert!((got - (894.0 * 894.0 - 1.0)).abs() < 1e-9);
        let too_much = 1.0001 * 4.0 * PI * PI * cfg.m_eff * 894.0 * 894.0;
        assert!(matches!(
            frequency_squared(&cfg, too_much),
            Err(Error::UnstableResonator(_))
        ));
    }

    #[test]
    fn electrostatic_shift_matches_curvature_over_grid() {
        let cfg = ApparatusConfig::default();
        for &d in &[3e-8, 1e-7, 4.4e-7, 1e-6, 3.3e-6] {
            for &v in &[-0.3, -0.05, 0.0, 0.12, 0.25] {
                let lhs = frequency_squared(&cfg, electrostatic_force_gradient(&cfg, v, d).unwrap()).unwrap();
                let rhs = cfg.nu_p * cfg.nu_p - curvature_coefficient(&cfg, d).unwrap() * v * v;
                assert!(rel(lhs, rhs) < 1e-12);
            }
        }
    }

    #[test]
    fn curvature_values() {
        let cfg = ApparatusConfig::default();
        let k1 = curvature_coefficient(&cfg, 1e-6).unwrap();
        // eps0 R / (4 pi m d^2) = 8.8541878128e-12 * 0.0309 / (4 pi 1.72e-4 1e-12)
        let hand = 8.8541878128e-12 * 0.0309 / (4.0 * std::f64::consts::PI * 1.72e-4 * 1e-12);
        assert!(rel(k1, hand) < 1e-14);
        assert!((k1 - 126.58).abs() < 0.01, "{k1}");
        let k2 = curvature_coefficient(&cfg, 2e-6).unwrap();
        assert!(rel(k1 / k2, 4.0) < 1e-12);
    }

    #[test]
    fn alpha_dependencies() {
        let cfg = ApparatusConfig::default();
        let a = alpha_factor(&cfg);
        let a_beta = alpha_factor(&ApparatusConfig {
            beta: 2.0 * cfg.beta,
            ..cfg
        });
        let a_mass = alpha_factor(&ApparatusConfig {
            m_eff: 2.0 * cfg.m_eff,
            ..cfg
        });
        assert!(rel(a / a_beta, 4.0) < 1e-12);
        assert!(rel(a / a_mass, 2.0) < 1e-12);
        for &v in &[10.0, 33.12, 40.0, 43.0] {
            let d = pzt_to_distance(&cfg, v).unwrap();
            let k = curvature_coefficient(&cfg, d).unwrap();
            assert!(rel(a * (cfg.v0_pzt - v).powi(-2), k) < 1e-12);
        }
    }

    #[test]
    fn pzt_distance() {
        let cfg = ApparatusConfig::default();
        assert!(rel(pzt_to_distance(&cfg, 33.12).unwrap(), 8.70e-7) < 1e-12);
        assert!(rel(pzt_to_distance(&cfg, cfg.v0_pzt - 1e-3).unwrap(), 87e-12) < 1e-9);
        assert!(matches!(
            pzt_to_distance(&cfg, cfg.v0_pzt),
            Err(Error::ContactOrBeyond { .. })
        ));
        let flipped = ApparatusConfig {
            polarity: -1,
            v0_pzt: -43.12,
            ..cfg
        };
        assert!(rel(pzt_to_distance(&flipped, -33.12).unwrap(), 8.70e-7) < 1e-12);
    }

    #[test]
    fn equivalent_voltage_values() {
        let v = equivalent_voltage(1e-6).unwrap();
        assert!((v - 9.9e-3).abs() < 0.1e-3, "{v}");
        // 30-digit evaluation
        assert!(rel(v, 9.894_017_842_878_067e-3) < 1e-13);
        assert!(rel(equivalent_voltage(2e-6).unwrap(), v / 2.0) < 1e-14);
        let cfg = ApparatusConfig::default();
        for &d in &[5e-8, 1e-7, 1e-6, 7e-6] {
            let veq = equivalent_voltage(d).unwrap();
            let electro = PI * CONSTANTS.epsilon0 * cfg.radius * veq * veq / d;
            assert!(rel(electro, casimir_force_pfa(&cfg, d).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ApparatusConfig::default().validate().is_ok());
        let bad = ApparatusConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ApparatusConfig {
            polarity: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
