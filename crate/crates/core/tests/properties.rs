use proptest::prelude::*;

use spcal_core::io::{format_run, parse_run};
use spcal_core::parabola::fit_parabola;
use spcal_core::synth::{MeasurementRun, Sample, VoltageSweep};
use spcal_core::{fit_power_law, CurvaturePoint, FitMode, LmSettings};

fn points(alpha: f64, v0: f64, gamma: f64, noise: &[f64]) -> Vec<CurvaturePoint> {
    noise
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let x = 0.1 * 1.25f64.powi(i as i32);
            let k = alpha * x.powf(gamma) * (1.0 + e);
            CurvaturePoint {
                v_pzt: v0 - x,
                k_el: k,
                sigma_k: 0.03 * k,
            }
        })
        .rev()
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn power_law_fit_is_scale_and_shift_equivariant(
        alpha in 10.0f64..1e4,
        v0 in 5.0f64..60.0,
        gamma in -2.6f64..-1.2,
        noise in prop::collection::vec(-0.03f64..0.03, 20),
        scale in 0.01f64..100.0,
        shift in -4.0f64..4.0,
    ) {
        let st = LmSettings::default();
        let base = points(alpha, v0, gamma, &noise);
        let reference = fit_power_law(&base, FitMode::Free, &st).unwrap();

        let scaled: Vec<_> = base
            .iter()
            .map(|p| CurvaturePoint { k_el: p.k_el * scale, sigma_k: p.sigma_k * scale, ..*p })
            .collect();
        let f = fit_power_law(&scaled, FitMode::Free, &st).unwrap();
        prop_assert!(close(f.alpha, reference.alpha * scale, 1e-6));
        prop_assert!(close(f.v0_pzt, reference.v0_pzt, 1e-7));
        prop_assert!(close(f.gamma, reference.gamma, 1e-7));
        prop_assert!(close(f.chi2_red, reference.chi2_red, 1e-6));

        let shifted: Vec<_> = base.iter().map(|p| CurvaturePoint { v_pzt: p.v_pzt + shift, ..*p }).collect();
        let f = fit_power_law(&shifted, FitMode::Free, &st).unwrap();
        prop_assert!(close(f.alpha, reference.alpha, 1e-6));
        prop_assert!(close(f.v0_pzt, reference.v0_pzt + shift, 1e-7));
        prop_assert!(close(f.gamma, reference.gamma, 1e-7));
    }

    #[test]
    fn parabola_fit_follows_a_bias_shift(
        nu0 in 500.0f64..2000.0,
        k in 0.5f64..500.0,
        vc in -0.5f64..0.5,
        shift in -2.0f64..2.0,
        noise in prop::collection::vec(-1e-4f64..1e-4, 9),
    ) {
        let sweep = |offset: f64| VoltageSweep {
            v_pzt: 30.0,
            samples: noise
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let v = vc + (i as f64 - 4.0) * 0.0625;
                    Sample {
                        v_applied: v + offset,
                        nu_m: (nu0 * nu0 - k * (v - vc).powi(2)).sqrt() + e,
                        sigma_nu: 1e-4,
                    }
                })
                .collect(),
        };
        let a = fit_parabola(&sweep(0.0)).unwrap();
        let b = fit_parabola(&sweep(shift)).unwrap();
        prop_assert!(close(a.k_el, b.k_el, 1e-7));
        prop_assert!(close(a.nu0_sq, b.nu0_sq, 1e-12));
        prop_assert!((b.v_c - a.v_c - shift).abs() < 1e-8);
        prop_assert!(close(a.sigma_k_el(), b.sigma_k_el(), 1e-6));
    }

    #[test]
    fn run_file_round_trip_is_lossless(
        rows in prop::collection::vec(
            (-1e3f64..1e3, prop::collection::vec((-1e2f64..1e2, 1e-3f64..1e7, 1e-300f64..1e3), 1..6)),
            1..8,
        ),
        run_id in "[a-zA-Z0-9_-]{1,16}",
    ) {
        let mut sweeps: Vec<VoltageSweep> = Vec::new();
        for (v_pzt, samples) in rows {
            if sweeps.iter().any(|s| s.v_pzt == v_pzt) {
                continue;
            }
            sweeps.push(VoltageSweep {
                v_pzt,
                samples: samples
                    .into_iter()
                    .map(|(v_applied, nu_m, sigma_nu)| Sample { v_applied, nu_m, sigma_nu })
                    .collect(),
            });
        }
        let run = MeasurementRun {
            run_id,
            created: "2024-03-01T12:00:00Z".into(),
            apparatus: None,
            plan: None,
            sweeps,
            provenance: None,
        };
        let text = format_run(&run).unwrap();
        prop_assert_eq!(parse_run(&text).unwrap(), run);
    }
}
