use spcal_core::analysis::{curvature_points, distance_report, residual_analysis, stability_scan, VcModelChoice};
use spcal_core::physics::{alpha_factor, ApparatusConfig};
use spcal_core::pipeline::{run_pipeline, AnalysisConfig};
use spcal_core::synth::{
    casimir_analog, generate_run, run1_analog, step_truths, ContactPotentialModel, GroundTruth, ResidualModel,
};
use spcal_core::{fit_power_law, fit_run, FitMode, LmSettings};

fn ideal_run() -> (GroundTruth, spcal_core::SweepPlan) {
    let (truth, plan) = run1_analog(8);
    let ideal = GroundTruth {
        vc_model: ContactPotentialModel::Constant { v0: 0.05 },
        ..GroundTruth::ideal(truth.cfg)
    };
    (ideal, plan)
}

#[test]
fn generated_scatter_matches_requested_noise() {
    let (truth, plan) = run1_analog(2);
    let truths = step_truths(&truth, &plan).unwrap();
    let n = 300;
    let mut ks = vec![Vec::with_capacity(n); truths.len()];
    for s in 0..n as u64 {
        let series = fit_run(&generate_run(&truth, &plan, 50_000 + s).unwrap()).unwrap();
        for (slot, f) in ks.iter_mut().zip(series.valid_fits()) {
            slot.push(f.k_el);
        }
    }
    let rel_sd: Vec<f64> = ks
        .iter()
        .zip(&truths)
        .map(|(k, t)| {
            let m = k.iter().sum::<f64>() / k.len() as f64;
            (k.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k.len() - 1) as f64).sqrt() / t.k_el
        })
        .collect();
    let pooled = rel_sd.iter().sum::<f64>() / rel_sd.len() as f64;
    assert!((pooled - 0.04).abs() < 0.002, "pooled relative scatter {pooled}");
}

#[test]
fn noiseless_stability_trace_is_flat() {
    let (truth, plan) = ideal_run();
    let series = fit_run(&generate_run(&truth, &plan, 0).unwrap()).unwrap();
    let pts = curvature_points(&series, &truth.cfg, None);
    let trace = stability_scan(&pts, FitMode::Fixed { gamma: -2.0 }, 5, &LmSettings::default()).unwrap();
    let alpha = alpha_factor(&truth.cfg);
    for e in &trace.entries {
        let f = e.fit.as_ref().unwrap();
        assert!(((f.alpha - alpha) / alpha).abs() < 1e-8, "n = {}", e.n_included);
        assert!((f.v0_pzt - truth.cfg.v0_pzt).abs() < 1e-8);
    }
    assert!(trace.spread_alpha < 1e-8 && trace.spread_v0 < 1e-10);
}

#[test]
fn noiseless_distance_estimates_agree_with_truth() {
    let (truth, plan) = ideal_run();
    let series = fit_run(&generate_run(&truth, &plan, 0).unwrap()).unwrap();
    let pts = curvature_points(&series, &truth.cfg, None);
    let fit = fit_power_law(&pts, FitMode::Free, &LmSettings::default()).unwrap();
    let report = distance_report(&fit, &pts, truth.cfg.beta).unwrap();
    let truths = step_truths(&truth, &plan).unwrap();
    for (r, t) in report.records.iter().zip(&truths) {
        assert!(((r.d_linear - t.distance) / t.distance).abs() < 1e-9);
        assert!(((r.d_curvature - t.distance) / t.distance).abs() < 1e-9);
    }
    assert!(report.max_rel_discrepancy < 1e-9);
}

#[test]
fn linear_contact_potential_is_detected() {
    let (truth, plan) = run1_analog(5);
    // 90 mV across 3.5 um
    let slope = 0.09 / 3.5e-6;
    let truth = GroundTruth {
        vc_model: ContactPotentialModel::Linear { v0: -0.15, slope },
        ..truth
    };
    let run = generate_run(&truth, &plan, 5).unwrap();
    let trend = run_pipeline(&run, &AnalysisConfig::default())
        .unwrap()
        .vc_trend
        .unwrap();
    assert_eq!(trend.preferred, VcModelChoice::Linear);
    assert!(trend.slope_significance > 10.0);
    assert!((trend.linear.slope - slope).abs() < 3.0 * trend.linear.sigma_slope);

    let flat = generate_run(&run1_analog(5).0, &plan, 5).unwrap();
    let trend = run_pipeline(&flat, &AnalysisConfig::default())
        .unwrap()
        .vc_trend
        .unwrap();
    assert_eq!(trend.preferred, VcModelChoice::Constant);
    assert!((trend.constant.v_c + 0.15).abs() < 3.0 * trend.constant.sigma);
}

#[test]
fn no_residual_gives_null_detection() {
    let (casimir, _) = casimir_analog(0);
    let truth = GroundTruth {
        residual_model: ResidualModel::None,
        ..casimir
    };
    let mut nulls = 0;
    for s in 0..20 {
        let (_, plan) = casimir_analog(700 + s);
        let run = generate_run(&truth, &plan, s).unwrap();
        let report = run_pipeline(&run, &AnalysisConfig::default()).unwrap();
        if report.residual.unwrap().fit().is_none() {
            nulls += 1;
        }
    }
    assert!(nulls >= 19, "{nulls}/20 null detections");
}

#[test]
fn shallow_residual_is_flagged_against_casimir() {
    let (casimir, plan) = casimir_analog(3);
    let truth = GroundTruth {
        residual_model: ResidualModel::PowerLaw {
            amplitude: 10.0,
            exponent: -2.12,
        },
        ..casimir
    };
    let run = generate_run(&truth, &plan, 3).unwrap();
    let series = fit_run(&run).unwrap();
    let d: Vec<f64> = step_truths(&truth, &plan).unwrap().iter().map(|t| t.distance).collect();
    let report = residual_analysis(&series, &d, truth.cfg.nu_p, false, &LmSettings::default()).unwrap();
    let fit = report.fit().expect("residual detected");
    assert!((fit.exponent + 2.12).abs() < 3.0 * fit.sigma_exponent, "{fit:?}");
    assert!(fit.casimir_deviation_sigma > 5.0, "{fit:?}");
}

#[test]
fn reversed_polarity_gives_the_same_calibration() {
    let (truth, _) = run1_analog(6);
    let flipped_cfg = ApparatusConfig {
        polarity: -1,
        v0_pzt: -truth.cfg.v0_pzt,
        ..truth.cfg
    };
    let flipped = GroundTruth {
        cfg: flipped_cfg,
        ..truth.clone()
    };
    let plan = spcal_core::SweepPlan::random_log_spaced(&truth.cfg, 30, 0.05, 40.0, 6);
    let flipped_plan = spcal_core::SweepPlan::random_log_spaced(&flipped_cfg, 30, 0.05, 40.0, 6);
    let a = run_pipeline(&generate_run(&truth, &plan, 6).unwrap(), &AnalysisConfig::default()).unwrap();
    let b = run_pipeline(
        &generate_run(&flipped, &flipped_plan, 6).unwrap(),
        &AnalysisConfig::default(),
    )
    .unwrap();
    let fa = a.mode(FitMode::Free).unwrap().fit.as_ref().unwrap();
    let fb = b.mode(FitMode::Free).unwrap().fit.as_ref().unwrap();
    assert!(((fa.alpha - fb.alpha) / fa.alpha).abs() < 1e-9);
    assert!((fa.v0_pzt - fb.v0_pzt).abs() < 1e-9 && (fa.gamma - fb.gamma).abs() < 1e-9);
    for (x, y) in a.distances.iter().zip(&b.distances) {
        assert!(((x - y) / x).abs() < 1e-9);
    }
}

#[test]
fn nonconcave_step_is_recorded_not_dropped() {
    let (truth, plan) = run1_analog(9);
    let mut run = generate_run(&truth, &plan, 9).unwrap();
    let vc = -0.15;
    for s in &mut run.sweeps[4].samples {
        s.nu_m = (894.0f64.powi(2) + 50.0 * (s.v_applied - vc).powi(2)).sqrt();
    }
    let report = run_pipeline(&run, &AnalysisConfig::default()).unwrap();
    assert_eq!(report.series.steps.len(), 30);
    assert_eq!(report.curvature.len(), 29);
    assert!(report.series.steps[4].issue.is_some());
    assert!(report.diagnostics.iter().any(|d| d.contains("step 4")));
}
