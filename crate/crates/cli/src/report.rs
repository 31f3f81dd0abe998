//! Output assembly: trace CSVs, grid bookkeeping, the fit report and the
//! standalone diagnose command.

use crate::io::{self, OutputGuard};
use anyhow::{bail, Context, Result};
use nsgp::additive::{CellKind, Model2d, Trace2d};
use nsgp::diagnostics::{
    credible_band, ec, ess, mae, oes, posterior_mean, EssSummary, FitReport, TimingReport,
};
use nsgp::experiments::Grid1d;
use nsgp::sampler::Trace;
use nsgp::spde::ObsOperator;
use std::path::Path;

fn min_coord_ess(samples: &[Vec<f64>]) -> Option<f64> {
    if samples.is_empty() || samples[0].is_empty() {
        return None;
    }
    let dim = samples[0].len();
    let mut min = f64::INFINITY;
    for k in 0..dim {
        let series: Vec<f64> = samples.iter().map(|row| row[k]).collect();
        match ess(&series) {
            Ok(e) => min = min.min(e),
            Err(_) => min = min.min(1.0),
        }
    }
    Some(min)
}

fn timing_from(burned_secs: f64, sampling_secs: f64, e: &EssSummary) -> TimingReport {
    let total = (burned_secs + sampling_secs) / 60.0;
    let per = |v: Option<f64>| v.map(|e| oes(e, total));
    TimingReport {
        burned_minutes: burned_secs / 60.0,
        sampling_minutes: sampling_secs / 60.0,
        total_minutes: total,
        oes_log_lambda: per(e.log_lambda),
        oes_log_sigma2: per(e.log_sigma2),
        oes_z_min: per(e.z_min),
        oes_u_min: per(e.u_min),
    }
}

/// Linear interpolation of a curve known at grid nodes onto query points.
fn interp_onto(grid_x: &[f64], values: &[f64], query: &[f64]) -> Vec<f64> {
    query
        .iter()
        .map(|&q| {
            let idx = match grid_x.binary_search_by(|v| v.total_cmp(&q)) {
                Ok(i) => return values[i],
                Err(i) => i,
            };
            if idx == 0 {
                values[0]
            } else if idx >= grid_x.len() {
                values[grid_x.len() - 1]
            } else {
                let (x0, x1) = (grid_x[idx - 1], grid_x[idx]);
                let w = (q - x0) / (x1 - x0);
                values[idx - 1] * (1.0 - w) + values[idx] * w
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn write_fit_outputs(
    dir: &Path,
    guard: &OutputGuard,
    trace: &Trace,
    grid: &Grid1d,
    obs_x: &[f64],
    a: &ObsOperator,
    truth: Option<&[f64]>,
    scale_back: (f64, f64),
) -> Result<()> {
    let (mean_shift, scale) = scale_back;
    let n = grid.n;

    // traces on the original data scale
    let z_rows: Vec<Vec<f64>> = trace
        .z
        .iter()
        .map(|row| row.iter().map(|v| v * scale + mean_shift).collect())
        .collect();
    let ell_rows = trace.ell();

    let headers_z: Vec<String> = (0..n).map(|j| format!("z_{j}")).collect();
    io::write_csv(
        &guard.track(dir.join("trace_z.csv")),
        &headers_z.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        z_rows.iter().cloned(),
    )?;
    let headers_ell: Vec<String> = (0..n).map(|j| format!("ell_{j}")).collect();
    io::write_csv(
        &guard.track(dir.join("trace_ell.csv")),
        &headers_ell.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        ell_rows.iter().cloned(),
    )?;
    io::write_csv(
        &guard.track(dir.join("trace_scalars.csv")),
        &["lambda", "sigma2"],
        trace
            .log_lambda
            .iter()
            .zip(&trace.log_sigma2)
            .map(|(l, s)| vec![l.exp(), s.exp() * scale * scale]),
    )?;
    io::write_csv(
        &guard.track(dir.join("grid.csv")),
        &["index", "x", "interior"],
        (0..n).map(|j| {
            let x = grid.node(j);
            let interior = if obs_x.is_empty()
                || (x >= obs_x.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12
                    && x <= obs_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12)
            {
                1.0
            } else {
                0.0
            };
            vec![j as f64, x, interior]
        }),
    )?;

    // report: posterior summaries, errors, coverage
    let fitted_obs: Vec<Vec<f64>> = z_rows.iter().map(|z| a.matvec(z)).collect();
    let mean_fit_obs = posterior_mean(&fitted_obs);
    let (lo_obs, hi_obs) = credible_band(&fitted_obs, 0.95)
        .map_err(|e| anyhow::anyhow!("banding fitted trace: {e}"))?;

    let (mae_val, ec_obs, ec_grid) = match truth {
        Some(t) if t.len() == obs_x.len() => {
            let mae_v = mae(&mean_fit_obs, t).map_err(|e| anyhow::anyhow!("{e}"))?;
            let ec_o = ec(&lo_obs, &hi_obs, t).map_err(|e| anyhow::anyhow!("{e}"))?;
            // grid-side coverage against truth interpolated onto interior nodes
            let (lo_z, hi_z) = credible_band(&z_rows, 0.95)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let mut sorted: Vec<(f64, f64)> =
                obs_x.iter().cloned().zip(t.iter().cloned()).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let sx: Vec<f64> = sorted.iter().map(|p| p.0).collect();
            let st: Vec<f64> = sorted.iter().map(|p| p.1).collect();
            let interior: Vec<usize> = (0..n)
                .filter(|&j| grid.node(j) >= sx[0] && grid.node(j) <= sx[sx.len() - 1])
                .collect();
            let nodes: Vec<f64> = interior.iter().map(|&j| grid.node(j)).collect();
            let t_grid = interp_onto(&sx, &st, &nodes);
            let lo_g: Vec<f64> = interior.iter().map(|&j| lo_z[j]).collect();
            let hi_g: Vec<f64> = interior.iter().map(|&j| hi_z[j]).collect();
            let ec_g = ec(&lo_g, &hi_g, &t_grid).ok();
            (Some(mae_v), Some(ec_o), ec_g)
        }
        Some(_) => bail!("truth file length does not match the data"),
        None => (None, None, None),
    };

    let ess_summary = EssSummary {
        log_lambda: ess(&trace.log_lambda).ok(),
        log_sigma2: ess(&trace.log_sigma2).ok(),
        z_min: min_coord_ess(&trace.z),
        u_min: min_coord_ess(&trace.u),
    };
    let (lo_z, hi_z) = credible_band(&z_rows, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
    let (lo_e, hi_e) = credible_band(&ell_rows, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
    let report = FitReport {
        timing: timing_from(trace.burned_secs, trace.sampling_secs, &ess_summary),
        ess: ess_summary,
        mae: mae_val,
        ec_obs,
        ec_grid,
        posterior_mean_z: posterior_mean(&z_rows),
        band_z_lo: lo_z,
        band_z_hi: hi_z,
        posterior_mean_ell: posterior_mean(&ell_rows),
        band_ell_lo: lo_e,
        band_ell_hi: hi_e,
    };
    let path = guard.track(dir.join("report.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_fit2d_outputs(
    dir: &Path,
    guard: &OutputGuard,
    trace: &Trace2d,
    model: &Model2d,
    truth: Option<&Vec<(f64, f64, f64)>>,
) -> Result<()> {
    let grid = &model.grid;
    let (n1, n2) = (grid.n1(), grid.n2());

    let write_wide = |name: &str, prefix: &str, rows: &[Vec<f64>]| -> Result<()> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let headers: Vec<String> = (0..dim).map(|j| format!("{prefix}_{j}")).collect();
        io::write_csv(
            &guard.track(dir.join(name)),
            &headers.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
            rows.iter().cloned(),
        )
    };
    write_wide("trace_z1.csv", "z1", &trace.z1)?;
    write_wide("trace_z2.csv", "z2", &trace.z2)?;
    let ell = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().map(|v| v.exp()).collect())
            .collect()
    };
    write_wide("trace_ell1.csv", "ell1", &ell(&trace.u[0]))?;
    write_wide("trace_ell2.csv", "ell2", &ell(&trace.u[1]))?;
    if model.interaction {
        write_wide("trace_ell3.csv", "ell3", &ell(&trace.u[2]))?;
        write_wide("trace_ell4.csv", "ell4", &ell(&trace.u[3]))?;
    }

    let mut scalar_headers = vec!["lambda1".to_string(), "lambda2".to_string()];
    if model.interaction {
        scalar_headers.push("lambda3".to_string());
        scalar_headers.push("lambda4".to_string());
    }
    scalar_headers.push("sigma2".to_string());
    io::write_csv(
        &guard.track(dir.join("trace_scalars.csv")),
        &scalar_headers.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
        (0..trace.kept()).map(|t| {
            let lam = trace.log_lambda[t];
            let mut row = vec![lam[0].exp(), lam[1].exp()];
            if model.interaction {
                row.push(lam[2].exp());
                row.push(lam[3].exp());
            }
            row.push(trace.log_sigma2[t].exp());
            row
        }),
    )?;

    // per-cell fitted-surface summary over interior cells
    let mean_fit = posterior_mean(&trace.fitted);
    let (lo_fit, hi_fit) =
        credible_band(&trace.fitted, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
    io::write_csv(
        &guard.track(dir.join("surface.csv")),
        &["x1", "x2", "mean", "lo", "hi", "observed"],
        (0..n1 * n2).filter_map(|c| {
            let kind = grid.cells[c];
            if kind == CellKind::Extension {
                return None;
            }
            let j1 = c / n2;
            let j2 = c % n2;
            Some(vec![
                grid.axis1.node(j1),
                grid.axis2.node(j2),
                mean_fit[c],
                lo_fit[c],
                hi_fit[c],
                if matches!(kind, CellKind::Observed(_)) { 1.0 } else { 0.0 },
            ])
        }),
    )?;

    if model.interaction {
        let z3_rows: Vec<Vec<f64>> = (0..trace.kept()).map(|t| trace.z3_row(t, grid)).collect();
        let z3_mean = posterior_mean(&z3_rows);
        let (z3_lo, z3_hi) = credible_band(&z3_rows, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
        io::write_csv(
            &guard.track(dir.join("z3_summary.csv")),
            &["x1", "x2", "mean", "lo", "hi"],
            (0..n1 * n2).filter_map(|c| {
                if grid.cells[c] == CellKind::Extension {
                    return None;
                }
                let j1 = c / n2;
                let j2 = c % n2;
                Some(vec![
                    grid.axis1.node(j1),
                    grid.axis2.node(j2),
                    z3_mean[c],
                    z3_lo[c],
                    z3_hi[c],
                ])
            }),
        )?;
    }

    // observed-cell scoring against the provided truth
    let (mae_val, ec_obs) = if let Some(truth_rows) = truth {
        let mut obs_cells = Vec::new();
        let mut truth_obs = Vec::new();
        for (c, kind) in grid.cells.iter().enumerate() {
            if matches!(kind, CellKind::Observed(_)) {
                let j1 = c / n2;
                let j2 = c % n2;
                let (x1, x2) = (grid.axis1.node(j1), grid.axis2.node(j2));
                let hit = truth_rows.iter().find(|(a, b, _)| {
                    (a - x1).abs() <= 1e-9 * (1.0 + x1.abs())
                        && (b - x2).abs() <= 1e-9 * (1.0 + x2.abs())
                });
                if let Some((_, _, t)) = hit {
                    obs_cells.push(c);
                    truth_obs.push(*t);
                }
            }
        }
        if obs_cells.is_empty() {
            (None, None)
        } else {
            let fitted_obs: Vec<Vec<f64>> = trace
                .fitted
                .iter()
                .map(|row| obs_cells.iter().map(|&c| row[c]).collect())
                .collect();
            let mean_obs = posterior_mean(&fitted_obs);
            let (lo, hi) = credible_band(&fitted_obs, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
            (
                mae(&mean_obs, &truth_obs).ok(),
                ec(&lo, &hi, &truth_obs).ok(),
            )
        }
    } else {
        (None, None)
    };

    let lam1: Vec<f64> = trace.log_lambda.iter().map(|r| r[0]).collect();
    let ess_summary = EssSummary {
        log_lambda: ess(&lam1).ok(),
        log_sigma2: ess(&trace.log_sigma2).ok(),
        z_min: min_coord_ess(&trace.z1),
        u_min: min_coord_ess(&trace.u[0]),
    };
    let report = FitReport {
        timing: timing_from(trace.burned_secs, trace.sampling_secs, &ess_summary),
        ess: ess_summary,
        mae: mae_val,
        ec_obs,
        ec_grid: None,
        posterior_mean_z: posterior_mean(&trace.z1),
        band_z_lo: Vec::new(),
        band_z_hi: Vec::new(),
        posterior_mean_ell: posterior_mean(&ell(&trace.u[0])),
        band_ell_lo: Vec::new(),
        band_ell_hi: Vec::new(),
    };
    let path = guard.track(dir.join("report.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Recomputes diagnostics from trace files written by `fit`. Coverage and
/// error need the truth file; timing (and so the efficiency scores) is
/// recovered from the original report when present.
pub fn diagnose(traces: &Path, truth: Option<&[f64]>, out: &Path) -> Result<()> {
    let (_, z_rows) = io::read_trace_csv(&traces.join("trace_z.csv"))?;
    let (_, ell_rows) = io::read_trace_csv(&traces.join("trace_ell.csv"))?;
    let (scalar_headers, scalar_rows) = io::read_trace_csv(&traces.join("trace_scalars.csv"))?;
    if z_rows.is_empty() {
        bail!("empty trace_z.csv");
    }
    let col = |name: &str| scalar_headers.iter().position(|h| h == name);
    let log_lambda: Vec<f64> = match col("lambda") {
        Some(i) => scalar_rows.iter().map(|r| r[i].ln()).collect(),
        None => Vec::new(),
    };
    let log_sigma2: Vec<f64> = match col("sigma2") {
        Some(i) => scalar_rows.iter().map(|r| r[i].ln()).collect(),
        None => Vec::new(),
    };

    // timings from the original fit report, when present
    let timing_src: Option<(f64, f64)> = std::fs::read_to_string(traces.join("report.json"))
        .ok()
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).ok())
        .and_then(|v| {
            let t = v.get("timing")?;
            Some((
                t.get("burned_minutes")?.as_f64()? * 60.0,
                t.get("sampling_minutes")?.as_f64()? * 60.0,
            ))
        });

    // fitted values at observation locations: interpolate the trace onto the
    // truth grid when the node coordinates are available
    let grid_info = io::read_trace_csv(&traces.join("grid.csv")).ok();

    let (mae_val, ec_obs) = match (truth, &grid_info) {
        (Some(t), Some((headers, rows))) => {
            let xi = headers.iter().position(|h| h == "x");
            match xi {
                Some(xi) if rows.len() == z_rows[0].len() => {
                    let grid_x: Vec<f64> = rows.iter().map(|r| r[xi]).collect();
                    // score on the interior span covered by the truth length:
                    // the truth file is at the original observation locations,
                    // which we do not know here, so fall back to comparing the
                    // posterior mean interpolated onto equispaced locations
                    let lo_x = grid_x
                        .iter()
                        .zip(rows.iter())
                        .filter(|(_, r)| r[2] > 0.5)
                        .map(|(x, _)| *x)
                        .fold(f64::INFINITY, f64::min);
                    let hi_x = grid_x
                        .iter()
                        .zip(rows.iter())
                        .filter(|(_, r)| r[2] > 0.5)
                        .map(|(x, _)| *x)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let m = t.len();
                    let obs_x: Vec<f64> = (0..m)
                        .map(|i| lo_x + (hi_x - lo_x) * i as f64 / (m - 1) as f64)
                        .collect();
                    let mean_z = posterior_mean(&z_rows);
                    let fit_at_obs = interp_onto(&grid_x, &mean_z, &obs_x);
                    let (lo, hi) =
                        credible_band(&z_rows, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
                    let lo_at = interp_onto(&grid_x, &lo, &obs_x);
                    let hi_at = interp_onto(&grid_x, &hi, &obs_x);
                    (mae(&fit_at_obs, t).ok(), ec(&lo_at, &hi_at, t).ok())
                }
                _ => (None, None),
            }
        }
        _ => (None, None),
    };

    let ess_summary = EssSummary {
        log_lambda: if log_lambda.is_empty() { None } else { ess(&log_lambda).ok() },
        log_sigma2: if log_sigma2.is_empty() { None } else { ess(&log_sigma2).ok() },
        z_min: min_coord_ess(&z_rows),
        u_min: None,
    };
    let (burned, sampling) = timing_src.unwrap_or((0.0, 0.0));
    let timing = if burned + sampling > 0.0 {
        timing_from(burned, sampling, &ess_summary)
    } else {
        TimingReport {
            burned_minutes: 0.0,
            sampling_minutes: 0.0,
            total_minutes: 0.0,
            oes_log_lambda: None,
            oes_log_sigma2: None,
            oes_z_min: None,
            oes_u_min: None,
        }
    };
    let (lo_z, hi_z) = credible_band(&z_rows, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
    let (lo_e, hi_e) = credible_band(&ell_rows, 0.95).map_err(|e| anyhow::anyhow!("{e}"))?;
    let report = FitReport {
        timing,
        ess: ess_summary,
        mae: mae_val,
        ec_obs,
        ec_grid: None,
        posterior_mean_z: posterior_mean(&z_rows),
        band_z_lo: lo_z,
        band_z_hi: hi_z,
        posterior_mean_ell: posterior_mean(&ell_rows),
        band_ell_lo: lo_e,
        band_ell_hi: hi_e,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
