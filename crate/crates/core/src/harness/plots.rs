//! Gnuplot scripts over tidy CSVs.

use std::fmt::Write as _;
use std::path::Path;

use super::io::write_table;
use super::study::{read_mse, MsePoint};
use super::HarnessError;

pub const COST_MSE_HEADER: [&str; 5] = ["method", "functional", "point", "log_mse", "log_cost"];

fn write_script(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes `plot_cost_mse.csv` and, for a nonempty study, `cost_mse.gp`.
pub fn emit_cost_mse(mse: &[MsePoint], dir: &Path) -> Result<Vec<String>, HarnessError> {
    let mut rows: Vec<&MsePoint> = mse.iter().collect();
    rows.sort_by(|a, b| (a.functional.as_str(), a.method, a.point).cmp(&(b.functional.as_str(), b.method, b.point)));
    write_table(
        &dir.join("plot_cost_mse.csv"),
        &COST_MSE_HEADER,
        rows.iter().map(|m| {
            vec![
                m.method.as_str().to_string(),
                m.functional.clone(),
                m.point.to_string(),
                m.mse.ln().to_string(),
                m.mean_cost.ln().to_string(),
            ]
        }),
    )?;
    let mut written = vec!["plot_cost_mse.csv".to_string()];
    if rows.is_empty() {
        return Ok(written);
    }
    let mut functionals: Vec<&str> = rows.iter().map(|m| m.functional.as_str()).collect();
    functionals.dedup();
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset terminal pngcairo size 900,600\nset key top right\n");
    s.push_str("set xlabel 'log MSE'\nset ylabel 'log cost'\n");
    for f in functionals {
        let _ = writeln!(s, "set output 'cost_mse_{f}.png'");
        let _ = writeln!(s, "set title 'Cost versus MSE: {f}'");
        let _ = writeln!(
            s,
            "plot 'plot_cost_mse.csv' using ($2 eq '{f}' && strcol(1) eq 'pmcmc' ? $4 : NaN):5 with linespoints title 'PMCMC', \\\n     \
             'plot_cost_mse.csv' using ($2 eq '{f}' && strcol(1) eq 'mlpmcmc' ? $4 : NaN):5 with linespoints title 'MLPMCMC'"
        );
    }
    // Column 2 holds a string; compare through strcol.
    let s = s.replace("($2 eq", "(strcol(2) eq");
    write_script(&dir.join("cost_mse.gp"), &s)?;
    written.push("cost_mse.gp".into());
    Ok(written)
}

/// Trace and state plots for a single-level run directory.
pub fn emit_traces(dir: &Path) -> Result<Option<String>, HarnessError> {
    if !dir.join("chain.csv").exists() || !dir.join("states.csv").exists() {
        return Ok(None);
    }
    let mut s = String::new();
    s.push_str("set datafile separator ','\nset terminal pngcairo size 900,500\nset key autotitle columnhead\n");
    s.push_str("set output 'states.png'\nset xlabel 't'\nplot 'states.csv' using 1:2 with lines, '' using 1:3 with lines");
    if dir.join("data.csv").exists() {
        s.push_str(", 'data.csv' using 1:2 with points");
    }
    s.push('\n');
    s.push_str("set xlabel 'iteration'\n");
    s.push_str("set output 'trace_theta.png'\nplot 'chain.csv' using 1:2 with lines\n");
    s.push_str("set output 'trace_sigma.png'\nplot 'chain.csv' using 1:3 with lines\n");
    write_script(&dir.join("traces.gp"), &s)?;
    Ok(Some("traces.gp".into()))
}

/// Plot artifacts for whatever results `dir` holds.
pub fn emit_plots(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let mse_path = dir.join("study_mse.csv");
    let mse = if mse_path.exists() { read_mse(&mse_path)? } else { Vec::new() };
    let mut written = emit_cost_mse(&mse, dir)?;
    written.extend(emit_traces(dir)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::study::Method;

    #[test]
    fn empty_study_gives_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let written = emit_plots(dir.path()).unwrap();
        assert_eq!(written, vec!["plot_cost_mse.csv"]);
        let text = std::fs::read_to_string(dir.path().join("plot_cost_mse.csv")).unwrap();
        assert_eq!(text, "method,functional,point,log_mse,log_cost\n");
        assert!(!dir.path().join("cost_mse.gp").exists());
    }

    #[test]
    fn script_references_each_functional() {
        let dir = tempfile::tempdir().unwrap();
        let pt = |method, functional: &str, point| MsePoint {
            method,
            point,
            epsilon: 0.1,
            functional: functional.into(),
            mse: 0.5,
            variance: 0.25,
            bias_sq: 0.25,
            mean_cost: 100.0,
        };
        let mse = vec![pt(Method::Mlpmcmc, "sigma", 3), pt(Method::Pmcmc, "theta", 4), pt(Method::Pmcmc, "theta", 3)];
        emit_cost_mse(&mse, dir.path()).unwrap();
        let script = std::fs::read_to_string(dir.path().join("cost_mse.gp")).unwrap();
        assert!(script.contains("cost_mse_sigma.png") && script.contains("cost_mse_theta.png"));
        let csv = std::fs::read_to_string(dir.path().join("plot_cost_mse.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("mlpmcmc,sigma,3,"));
        assert!(lines[2].starts_with("pmcmc,theta,3,"));
    }
}
