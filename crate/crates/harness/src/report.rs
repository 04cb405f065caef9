//! Writing a report to disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::pipeline::Report;
use crate::HarnessError;

/// Four decimals in the usual range, scientific notation outside it.
pub fn fmt_num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0.0000".into()
    } else if (1e-3..1e6).contains(&a) {
        format!("{v:.4}")
    } else {
        format!("{v:.4e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn table(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// CSV of the closed-loop states: `k,norm_x,x_1..x_n`.
pub fn trajectory_csv(states: &[nalgebra::DVector<f64>], n: usize) -> String {
    let mut s = String::from("k,norm_x");
    for i in 1..=n {
        let _ = write!(s, ",x_{i}");
    }
    s.push('\n');
    for (k, x) in states.iter().enumerate() {
        let _ = write!(s, "{k},{}", x.norm());
        for v in x.iter() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

const PLOT_STUB: &str = "\
# gnuplot -p plot.gp
set datafile separator ','
set key autotitle columnhead
set logscale y
set xlabel 'k'
set ylabel '||x(k)||'
plot 'trajectory.csv' using 1:2 with lines
";

/// Writes `report.json`, the three tables, `trajectory.csv` and a gnuplot
/// stub into `dir`. Fails after writing if the report's self-consistency
/// check recorded a violation.
pub fn emit_report(r: &Report, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<(), HarnessError> {
        let p = dir.join(name);
        write(&p, &text)?;
        written.push(p);
        Ok(())
    };
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    put("report.json", json + "\n")?;
    put(
        "table_condition.csv",
        table(
            "mode,kappa_raw,kappa_pre",
            r.modes.iter().map(|m| format!("{},{},{}", m.mode, fmt_num(m.kappa_raw), opt(m.kappa_pre))),
        ),
    )?;
    put(
        "table_bounds.csv",
        table(
            "mode,bound_raw,bound_pre",
            r.modes.iter().map(|m| format!("{},{},{}", m.mode, fmt_num(m.bound_raw), opt(m.bound_pre))),
        ),
    )?;
    put(
        "table_errors.csv",
        table(
            "mode,err_raw,err_pre",
            r.modes.iter().map(|m| format!("{},{},{}", m.mode, opt(m.actual_err_raw), opt(m.actual_err_pre))),
        ),
    )?;
    put("trajectory.csv", trajectory_csv(&r.trajectory, r.config.n))?;
    put("plot.gp", PLOT_STUB.to_string())?;
    if let Some(c) = &r.consistency {
        if !c.violations.is_empty() {
            return Err(HarnessError::Consistency(c.violations.join("; ")));
        }
    }
    Ok(written)
}
