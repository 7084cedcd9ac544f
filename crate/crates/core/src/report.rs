//! CSV series and text summaries for runs and sweeps.
//!
//! Numbers are written with 17 significant digits so that reading a file back
//! reproduces the logged `f64` values exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::sim::{ExcitationReport, RunLog, RunSummary, ScenarioConfig, StepRecord};

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

fn columns_of(r: &StepRecord, fields: &[&str]) -> Vec<f64> {
    let mut out = vec![r.t];
    for f in fields {
        match *f {
            "x" => out.extend(r.x.iter()),
            "xhat" => out.extend(r.x_hat.iter()),
            "a" => out.extend(r.a.iter()),
            "ahat" => out.extend(r.a_hat.iter()),
            "b" => out.push(r.b),
            "bhat" => out.push(r.b_hat),
            "lyap" => out.push(r.lyap),
            "log_lyap" => out.push(r.log_lyap()),
            "lam_min_P" => out.push(r.lam_min_p),
            "lam_max_P" => out.push(r.lam_max_p),
            "trace_P" => out.push(r.trace_p),
            "trace_P_inv" => out.push(r.trace_p_inv),
            "residual" => out.push(r.residual_norm),
            other => unreachable!("unknown column family {other}"),
        }
    }
    out
}

fn column_names(fields: &[&str], n: usize) -> Vec<String> {
    let mut names = vec!["t".to_string()];
    for f in fields {
        match *f {
            "x" | "xhat" | "a" | "ahat" => names.extend(header(f, n)),
            other => names.push(other.to_string()),
        }
    }
    names
}

/// Column families of each emitted file.
pub const SERIES: &[(&str, &[&str])] = &[
    ("log.csv", &["x", "xhat", "a", "ahat", "lyap", "log_lyap", "lam_min_P", "lam_max_P"]),
    ("positions.csv", &["x", "xhat"]),
    ("bias.csv", &["a", "ahat", "b", "bhat"]),
    ("lyapunov.csv", &["lyap", "log_lyap", "lam_min_P", "lam_max_P", "trace_P", "trace_P_inv", "residual"]),
];

pub fn write_series<W: Write>(out: &mut W, log: &RunLog, fields: &[&str]) -> io::Result<()> {
    let n = log.records.first().map_or(0, |r| r.x.len());
    writeln!(out, "{}", column_names(fields, n).join(","))?;
    for r in &log.records {
        let row: Vec<String> = columns_of(r, fields).into_iter().map(fmt_num).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes every CSV series plus `summary.txt` into `dir` (created if missing).
pub fn write_run(dir: &Path, cfg: &ScenarioConfig, log: &RunLog, failure: Option<&str>) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, fields) in SERIES {
        let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
        write_series(&mut w, log, fields)?;
        w.flush()?;
    }
    fs::write(dir.join("summary.txt"), summary_text(cfg, &log.summary(), failure))
}

pub fn summary_text(cfg: &ScenarioConfig, s: &RunSummary, failure: Option<&str>) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "variant = {}", cfg.kind);
    let _ = writeln!(t, "trajectory = {}", cfg.trajectory.name());
    let _ = writeln!(t, "sources = {}", cfg.sources.len());
    let _ = writeln!(t, "velocity_mode = {}", cfg.velocity_mode);
    let _ = writeln!(t, "seed = {}", cfg.seed);
    let _ = writeln!(t, "h = {}", cfg.h);
    let _ = writeln!(t, "steps = {}", s.steps);
    let _ = writeln!(t, "horizon = {}", s.horizon);
    let _ = writeln!(t, "status = {}", failure.map_or("ok".to_string(), |f| format!("failed: {f}")));
    let rows = [
        ("initial_position_error", s.initial_position_error),
        ("final_position_error", s.final_position_error),
        ("final_bias_error", s.final_bias_error),
        ("final_range_bias_error", s.final_range_bias_error),
        ("log_lyap_slope_second_half", s.log_lyap_slope),
        ("p_m_second_half", s.p_m),
        ("p_M_second_half", s.p_big_m),
        ("rate_lower_bound", s.rate_bound),
        ("rate_lower_bound_direct", s.rate_bound_direct),
        ("min_lambda_min_P", s.min_lambda_min),
        ("max_lambda_max_P", s.max_lambda_max),
        ("tail_rms_position_error", s.tail_rms_position_error),
        ("k_a", s.bounds.k_a),
        ("mu_q_bar", s.bounds.mu_q_bar),
        ("v_m", s.bounds.v_m),
        ("v_M", s.bounds.v_big_m),
    ];
    for (k, v) in rows {
        let _ = writeln!(t, "{k} = {v:e}");
    }
    let _ = writeln!(t, "dropped_direction_samples = {}", s.dropped_directions);
    t
}

pub fn write_sweep<W: Write>(out: &mut W, rep: &ExcitationReport) -> io::Result<()> {
    writeln!(out, "condition,worst,worst_at,threshold,satisfied")?;
    for c in &rep.conditions {
        writeln!(out, "{},{},{},{},{}", c.kind, fmt_num(c.worst), fmt_num(c.worst_at), fmt_num(c.threshold), c.satisfied)?;
    }
    if let Some(g) = rep.gramian_floor {
        writeln!(out, "riccati_gramian_WQ,{},,,{}", fmt_num(g), g > 0.0)?;
    }
    Ok(())
}

/// Numeric CSV contents: header and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn parse_csv(text: &str) -> Result<Table, String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().ok_or("empty file")?.split(',').map(str::to_string).collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| format!("row {}: '{c}' is not a number", i + 2)))
                .collect::<Result<_, _>>()?;
            if row.len() != header.len() {
                return Err(format!("row {} has {} fields, header has {}", i + 2, row.len(), header.len()));
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    Ok(Table { header, rows })
}

pub fn read_csv(path: &Path) -> Result<Table, String> {
    parse_csv(&fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observers::ObserverKind;
    use crate::sim::run_scenario;

    #[test]
    fn series_round_trip_exactly() {
        let mut cfg = ScenarioConfig::preset(1, ObserverKind::DirBiasedSingle).unwrap();
        cfg.horizon = 0.2;
        cfg.noise_pos_std = 0.05;
        let log = run_scenario(&cfg).unwrap();
        let mut buf = Vec::new();
        write_series(&mut buf, &log, SERIES[0].1).unwrap();
        let table = parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(table.header[..4], ["t", "x1", "x2", "x3"]);
        assert_eq!(table.header.last().unwrap(), "lam_max_P");
        for (row, r) in table.rows.iter().zip(&log.records) {
            assert_eq!(*row, columns_of(r, SERIES[0].1));
        }
    }

    #[test]
    fn awkward_values_survive() {
        for v in [0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -2.5e-310, f64::MAX] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
        assert!(fmt_num(f64::NAN).parse::<f64>().unwrap().is_nan());
    }

    #[test]
    fn malformed_csv() {
        assert!(parse_csv("").is_err());
        assert!(parse_csv("t,x\n1,2,3\n").is_err());
        assert!(parse_csv("t\nabc\n").is_err());
    }
}
