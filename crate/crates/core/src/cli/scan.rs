//! `(t_o, s)` grid scans written as CSV.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfigFile;
use crate::entanglement::{certify_config, Side};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t_o,t_d,s,var_u,var_v,min_s_b,ent_in,ent_out,certified_in,certified_out";

/// One grid point. Fields of an unselected side are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanRow {
    pub t_o: f64,
    pub t_d: f64,
    pub s: f64,
    pub var_u: f64,
    pub var_v: f64,
    pub min_s_b: f64,
    pub ent_in: Option<f64>,
    pub ent_out: Option<f64>,
    pub certified_in: Option<bool>,
    pub certified_out: Option<bool>,
}

/// Evaluates every grid point, ordered by `(t_o, s)`.
pub fn scan(cfg: &RunConfigFile) -> Result<Vec<ScanRow>> {
    let points: Vec<(f64, f64)> = cfg
        .t_o
        .values()
        .into_iter()
        .flat_map(|t| cfg.s.values().into_iter().map(move |s| (t, s)))
        .collect();
    points.par_iter().map(|&(t_o, s)| scan_point(cfg, t_o, s)).collect()
}

fn scan_point(cfg: &RunConfigFile, t_o: f64, s: f64) -> Result<ScanRow> {
    let sc = cfg.scheme_config(t_o, s)?;
    let t_d = sc.t_d()?;
    let input = cfg.side.input().then(|| certify_config(&sc, Side::Input)).transpose()?;
    let output = cfg.side.output().then(|| certify_config(&sc, Side::Output)).transpose()?;
    let shown = input.as_ref().or(output.as_ref()).expect("at least one side is selected");
    Ok(ScanRow {
        t_o,
        t_d,
        s,
        var_u: shown.var_u,
        var_v: shown.var_v,
        min_s_b: shown.min_s_b,
        ent_in: input.as_ref().map(|r| r.ent),
        ent_out: output.as_ref().map(|r| r.ent),
        certified_in: input.as_ref().map(|r| r.certified),
        certified_out: output.as_ref().map(|r| r.certified),
    })
}

/// Formats with 12 significant digits, dropping trailing zeros; non-finite
/// values print as `inf`, `-inf` or `nan`.
pub fn fmt_sig(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let fixed = format!("{:.*}", (11 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.') } else { s }
}

pub fn write_csv<W: Write>(rows: &[ScanRow], mut out: W) -> std::io::Result<()> {
    let opt_f = |x: Option<f64>| x.map(fmt_sig).unwrap_or_default();
    let opt_b = |x: Option<bool>| x.map(|b| b.to_string()).unwrap_or_default();
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_sig(r.t_o),
            fmt_sig(r.t_d),
            fmt_sig(r.s),
            fmt_sig(r.var_u),
            fmt_sig(r.var_v),
            fmt_sig(r.min_s_b),
            opt_f(r.ent_in),
            opt_f(r.ent_out),
            opt_b(r.certified_in),
            opt_b(r.certified_out),
        )?;
    }
    Ok(())
}

pub fn cmd_scan(config: &Path, output: &Path) -> Result<usize> {
    let cfg = RunConfigFile::load(config)?;
    let rows = scan(&cfg)?;
    let io = |source| Error::Io { path: output.into(), source };
    let file = std::fs::File::create(output).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(&rows, &mut w).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(rows.len())
}
