//! File formats: trajectory / sensitivity / convergence CSV, model JSON,
//! and run-summary JSON.
//!
//! All CSV numbers are written with 17 significant digits so re-reading and
//! re-emitting a file is byte-identical.

use crate::error::{MbsError, Result};
use crate::model::MbModel;
use crate::optimizer::OptTrace;
use crate::sensitivity::{SimRun, SysLayout};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

/// Trajectory CSV: `t,q_1..q_n,qd_1..qd_n,lam_1..lam_m,aux_*`.
pub fn trajectory_csv(run: &SimRun<f64>, layout: &SysLayout) -> String {
    let mut out = String::new();
    out.push('t');
    for i in 1..=layout.n {
        let _ = write!(out, ",q_{}", i);
    }
    for i in 1..=layout.n {
        let _ = write!(out, ",qd_{}", i);
    }
    for i in 1..=layout.m {
        let _ = write!(out, ",lam_{}", i);
    }
    for i in 1..=layout.nc {
        let _ = write!(out, ",aux_{}", i);
    }
    if layout.quad {
        out.push_str(",aux_quad");
    }
    out.push('\n');
    let rows: Box<dyn Iterator<Item = (&f64, &Vec<f64>)>> = match &run.result.samples {
        Some((ts, ys)) => Box::new(ts.iter().zip(ys.iter())),
        None => Box::new(run.result.t.iter().zip(run.result.y.iter())),
    };
    let cols = layout.dyn_dim();
    for (t, y) in rows {
        out.push_str(&fmt_f64(*t));
        for v in y.iter().take(cols) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// Sensitivity CSV in parameter-major order:
/// `t, dq_1/drho_1..dq_n/drho_1, dqd_*/drho_1, ..., then per k`.
pub fn sensitivity_csv(run: &SimRun<f64>, layout: &SysLayout) -> String {
    let mut out = String::new();
    out.push('t');
    for k in 1..=layout.p_sens {
        for i in 1..=layout.n {
            let _ = write!(out, ",dq{}_drho{}", i, k);
        }
        for i in 1..=layout.n {
            let _ = write!(out, ",dqd{}_drho{}", i, k);
        }
        for i in 1..=layout.nc {
            let _ = write!(out, ",daux{}_drho{}", i, k);
        }
    }
    out.push('\n');
    let rows: Box<dyn Iterator<Item = (&f64, &Vec<f64>)>> = match &run.result.samples {
        Some((ts, ys)) => Box::new(ts.iter().zip(ys.iter())),
        None => Box::new(run.result.t.iter().zip(run.result.y.iter())),
    };
    for (t, y) in rows {
        out.push_str(&fmt_f64(*t));
        for k in 0..layout.p_sens {
            let o = layout.sens_col(k);
            for v in &y[o..o + layout.sens_dim()] {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
        }
        out.push('\n');
    }
    out
}

/// Convergence CSV: `iter,psi,proj_grad_inf,alpha,n_feval,rho_1..rho_p`.
pub fn convergence_csv(trace: &OptTrace) -> String {
    let p = trace.iterates.first().map_or(0, |it| it.rho.len());
    let mut out = String::from("iter,psi,proj_grad_inf,alpha,n_feval");
    for k in 1..=p {
        let _ = write!(out, ",rho_{}", k);
    }
    out.push('\n');
    for it in &trace.iterates {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            it.iter,
            fmt_f64(it.psi),
            fmt_f64(it.proj_grad_inf),
            fmt_f64(it.alpha),
            it.n_feval
        );
        for r in &it.rho {
            out.push(',');
            out.push_str(&fmt_f64(*r));
        }
        out.push('\n');
    }
    out
}

/// Parse a CSV produced by this module back into header + rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| MbsError::ModelFile("empty csv".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| MbsError::ModelFile(format!("bad csv number: {}", e)))?);
    }
    Ok((header, rows))
}

/// Re-emit a parsed CSV; byte-identical to the original writer output.
pub fn emit_csv(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            // integer-valued leading columns (iter counts) survive because
            // the writer always emits floats except for those columns; a
            // round-trip therefore reuses the exact float formatting
            out.push_str(&fmt_f64(*v));
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Model JSON round-trip.
pub fn write_model_json(model: &MbModel, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(model)
        .map_err(|e| MbsError::ModelFile(format!("serialize: {}", e)))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_model_json(path: &Path) -> Result<MbModel> {
    let text = std::fs::read_to_string(path)?;
    let model: MbModel =
        serde_json::from_str(&text).map_err(|e| MbsError::ModelFile(format!("parse: {}", e)))?;
    model.validate()?;
    Ok(model)
}

/// Summary emitted by the simulate command.
#[derive(Serialize)]
pub struct SimSummary {
    pub case: String,
    pub t_final: f64,
    pub psi: Option<f64>,
    pub phi_inf: f64,
    pub phidot_inf: f64,
    pub energy: Option<f64>,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
}

/// Generic plotting script referencing the emitted CSV files.
pub fn plot_script(files: &[&str]) -> String {
    let mut out = String::new();
    out.push_str("#!/usr/bin/env python3\n");
    out.push_str("# Plot helper for the CSV outputs of this run.\n");
    out.push_str("import csv\n");
    out.push_str("import matplotlib.pyplot as plt\n\n");
    out.push_str("def load(path):\n");
    out.push_str("    with open(path) as fh:\n");
    out.push_str("        rows = list(csv.reader(fh))\n");
    out.push_str("    head = rows[0]\n");
    out.push_str("    data = [[float(x) for x in r] for r in rows[1:]]\n");
    out.push_str("    return head, list(zip(*data))\n\n");
    for f in files {
        let _ = write!(
            out,
            "head, cols = load({f:?})\nplt.figure()\nfor name, col in list(zip(head, cols))[1:8]:\n    plt.plot(cols[0], col, label=name)\nplt.xlabel(head[0]); plt.legend(); plt.title({f:?})\n\n",
        );
    }
    out.push_str("plt.show()\n");
    out
}
