//! Run files and report output.
//!
//! A run file is comma-delimited text with a `#`-prefixed header block:
//!
//! ```text
//! # spcal run
//! # schema_version: 1
//! # run_id: synthetic-7
//! # created: 1970-01-01T00:00:00Z
//! # apparatus: {"radius":0.0309,...}
//! v_pzt,v_applied,nu_m,sigma_nu
//! 3.12,-0.4,893.99998,0.00012
//! ```
//!
//! `apparatus`, `plan` and `provenance` header values are JSON. Numbers are
//! written in shortest round-trip form, so reading back is exact. Rows of one
//! sweep must be contiguous.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::AnalysisReport;
use crate::scaling::FitMode;
use crate::synth::{MeasurementRun, Sample, VoltageSweep};

pub const SCHEMA_VERSION: &str = "1";
pub const COLUMNS: &str = "v_pzt,v_applied,nu_m,sigma_nu";

pub fn format_run(run: &MeasurementRun) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "# spcal run").unwrap();
    writeln!(out, "# schema_version: {SCHEMA_VERSION}").unwrap();
    writeln!(out, "# run_id: {}", single_line(&run.run_id)?).unwrap();
    writeln!(out, "# created: {}", single_line(&run.created)?).unwrap();
    if let Some(cfg) = &run.apparatus {
        writeln!(out, "# apparatus: {}", to_json(cfg)?).unwrap();
    }
    if let Some(plan) = &run.plan {
        writeln!(out, "# plan: {}", to_json(plan)?).unwrap();
    }
    if let Some(truth) = &run.provenance {
        writeln!(out, "# provenance: {}", to_json(truth)?).unwrap();
    }
    writeln!(out, "{COLUMNS}").unwrap();
    for sweep in &run.sweeps {
        for s in &sweep.samples {
            writeln!(out, "{},{},{},{}", sweep.v_pzt, s.v_applied, s.nu_m, s.sigma_nu).unwrap();
        }
    }
    Ok(out)
}

fn single_line(s: &str) -> Result<&str> {
    if s.contains('\n') || s.contains('\r') {
        Err(Error::InvalidInput(format!("header value {s:?} spans lines")))
    } else {
        Ok(s)
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn write_run(run: &MeasurementRun, path: &Path) -> Result<()> {
    fs::write(path, format_run(run)?)?;
    Ok(())
}

pub fn read_run(path: &Path) -> Result<MeasurementRun> {
    parse_run(&fs::read_to_string(path)?)
}

fn parse_error(line: usize, column: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        reason: reason.into(),
    }
}

fn header_json<T: serde::de::DeserializeOwned>(line: usize, value: &str) -> Result<T> {
    serde_json::from_str(value).map_err(|e| parse_error(line, e.column(), e.to_string()))
}

pub fn parse_run(text: &str) -> Result<MeasurementRun> {
    let mut schema = None;
    let mut run_id = None;
    let mut created = None;
    let mut apparatus = None;
    let mut plan = None;
    let mut provenance = None;
    let mut saw_columns = false;
    let mut sweeps: Vec<VoltageSweep> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if saw_columns {
                continue;
            }
            let Some((key, value)) = comment.split_once(':') else {
                continue;
            };
            let value = value.trim();
            match key.trim() {
                "schema_version" => schema = Some(value.to_string()),
                "run_id" => run_id = Some(value.to_string()),
                "created" => created = Some(value.to_string()),
                "apparatus" => apparatus = Some(header_json(line_no, value)?),
                "plan" => plan = Some(header_json(line_no, value)?),
                "provenance" => provenance = Some(header_json(line_no, value)?),
                _ => {}
            }
            continue;
        }
        if !saw_columns {
            match schema.as_deref() {
                Some(SCHEMA_VERSION) => {}
                other => {
                    return Err(Error::SchemaVersionMismatch {
                        found: other.unwrap_or("missing").to_string(),
                        expected: SCHEMA_VERSION.to_string(),
                    })
                }
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.join(",") != COLUMNS {
                return Err(parse_error(line_no, 1, format!("expected column header `{COLUMNS}`")));
            }
            saw_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_error(
                line_no,
                1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let mut values = [0.0; 4];
        for (col, (field, slot)) in fields.iter().zip(values.iter_mut()).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(line_no, col + 1, format!("`{}` is not a number", field.trim())))?;
            if !v.is_finite() {
                return Err(parse_error(
                    line_no,
                    col + 1,
                    format!("non-finite value `{}`", field.trim()),
                ));
            }
            *slot = v;
        }
        let [v_pzt, v_applied, nu_m, sigma_nu] = values;
        if !(sigma_nu > 0.0) {
            return Err(parse_error(line_no, 4, "sigma_nu must be positive"));
        }
        if !(nu_m > 0.0) {
            return Err(parse_error(line_no, 3, "frequency must be positive"));
        }
        let sample = Sample {
            v_applied,
            nu_m,
            sigma_nu,
        };
        match sweeps.last_mut() {
            Some(last) if last.v_pzt == v_pzt => last.samples.push(sample),
            _ => {
                if sweeps.iter().any(|s| s.v_pzt == v_pzt) {
                    return Err(parse_error(
                        line_no,
                        1,
                        format!("rows for v_pzt = {v_pzt} are not contiguous"),
                    ));
                }
                sweeps.push(VoltageSweep {
                    v_pzt,
                    samples: vec![sample],
                });
            }
        }
    }
    if !saw_columns {
        if schema.as_deref() != Some(SCHEMA_VERSION) {
            return Err(Error::SchemaVersionMismatch {
                found: schema.unwrap_or_else(|| "missing".into()),
                expected: SCHEMA_VERSION.to_string(),
            });
        }
        return Err(Error::EmptyRun);
    }
    if sweeps.is_empty() {
        return Err(Error::EmptyRun);
    }
    Ok(MeasurementRun {
        run_id: run_id.unwrap_or_else(|| "unnamed".into()),
        created: created.unwrap_or_default(),
        apparatus,
        plan,
        sweeps,
        provenance,
    })
}

pub fn report_to_json(report: &AnalysisReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn read_report(path: &Path) -> Result<AnalysisReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(e.line(), e.column(), e.to_string()))
}

/// File-name fragment for a fit mode: `free`, `fixed_-2`.
pub fn mode_slug(mode: &FitMode) -> String {
    mode.to_string().replace(':', "_")
}

struct Table {
    out: String,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            out: format!("{}\n", columns.join(",")),
        }
    }

    fn row(&mut self, values: &[f64]) {
        let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }
}

/// Writes `report.json` plus flat plot tables into `dir`; returns the paths
/// written.
pub fn write_report(report: &AnalysisReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("report.json".into(), report_to_json(report)?)?;

    // curvature vs PZT bias with every fitted curve
    let mut cols = vec!["v_pzt", "k_el", "sigma_k", "d_m", "d_nm"];
    let fitted: Vec<_> = report.modes.iter().filter(|m| m.fit.is_some()).collect();
    let names: Vec<String> = fitted.iter().map(|m| format!("k_fit_{}", mode_slug(&m.mode))).collect();
    cols.extend(names.iter().map(String::as_str));
    let mut t = Table::new(&cols);
    for (i, p) in report.curvature.iter().enumerate() {
        let d = report.distances.get(i).copied().unwrap_or(f64::NAN);
        let mut row = vec![p.v_pzt, p.k_el, p.sigma_k, d, d * 1e9];
        row.extend(fitted.iter().map(|m| m.fit.as_ref().unwrap().model(p.v_pzt)));
        t.row(&row);
    }
    put("curvature.csv".into(), t.out)?;

    for m in &report.modes {
        if let Some(trace) = &m.stability {
            let mut t = Table::new(&[
                "n_included",
                "alpha",
                "sigma_alpha",
                "v0_pzt",
                "sigma_v0",
                "gamma",
                "chi2_red",
            ]);
            for e in &trace.entries {
                if let Some(f) = &e.fit {
                    t.row(&[
                        e.n_included as f64,
                        f.alpha,
                        f.sigma_alpha(),
                        f.v0_pzt,
                        f.sigma_v0(),
                        f.gamma,
                        f.chi2_red,
                    ]);
                }
            }
            put(format!("stability_{}.csv", mode_slug(&m.mode)), t.out)?;
        }
        if let Some(dr) = &m.distances {
            let mut t = Table::new(&[
                "v_pzt",
                "d_linear_m",
                "d_curvature_m",
                "d_linear_nm",
                "d_curvature_nm",
                "rel_discrepancy",
            ]);
            for r in &dr.records {
                t.row(&[
                    r.v_pzt,
                    r.d_linear,
                    r.d_curvature,
                    r.d_linear * 1e9,
                    r.d_curvature * 1e9,
                    r.rel_discrepancy,
                ]);
            }
            put(format!("distances_{}.csv", mode_slug(&m.mode)), t.out)?;
        }
    }

    let mut t = Table::new(&["d_m", "d_nm", "v_c", "sigma_v_c", "v_c_trend"]);
    for (f, &d) in report.series.valid_fits().zip(&report.distances) {
        let trend = report.vc_trend.as_ref().map_or(f64::NAN, |tr| tr.eval(d));
        t.row(&[d, d * 1e9, f.v_c, f.sigma_v_c(), trend]);
    }
    put("contact_potential.csv".into(), t.out)?;

    if let Some(rows) = &report.veq {
        let mut t = Table::new(&["d_m", "d_nm", "v_eq", "miscompensation", "ratio", "exceeds"]);
        for r in rows {
            t.row(&[
                r.d,
                r.d * 1e9,
                r.v_eq,
                r.miscompensation,
                r.ratio,
                f64::from(u8::from(r.exceeds)),
            ]);
        }
        put("veq.csv".into(), t.out)?;
    }
    if let Some(res) = &report.residual {
        let mut t = Table::new(&["d_m", "d_nm", "delta_nu_r_sq", "sigma", "model"]);
        for p in &res.points {
            let model = res
                .fit()
                .map_or(f64::NAN, |f| f.amplitude * (p.d + f.gap_offset).powf(f.exponent));
            t.row(&[p.d, p.d * 1e9, p.delta_nu_r_sq, p.sigma, model]);
        }
        put("residual.csv".into(), t.out)?;
    }
    Ok(written)
}
