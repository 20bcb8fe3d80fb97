//! Single-point JSON report.

use std::path::Path;

use serde::Serialize;

use super::config::RunConfigFile;
use crate::entanglement::{certify, uv_input, uv_output, CertResult, Side};
use crate::error::{Error, Result};
use crate::scheme::{run_analytic, run_monte_carlo, CoefficientTable, McSummary};

#[derive(Debug, Serialize)]
pub struct ModeForms {
    pub mode: String,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Readouts {
    pub p_a: Vec<f64>,
    pub q_b: Vec<f64>,
    /// `(V_p^A, V_q^B)` including detector constants.
    pub variances: (f64, f64),
}

#[derive(Debug, Default, Serialize)]
pub struct Certification {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<CertResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<CertResult>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config: RunConfigFile,
    pub coefficients: CoefficientTable,
    /// Coordinate names labelling every coefficient list.
    pub coordinates: Vec<String>,
    pub readouts: Readouts,
    pub outputs: Vec<ModeForms>,
    pub certification: Certification,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<McSummary>,
}

pub fn run_report(cfg: &RunConfigFile) -> Result<RunReport> {
    let (Some(t_o), Some(s)) = (cfg.t_o.scalar(), cfg.s.scalar()) else {
        return Err(Error::Config("run needs scalar t_o and s; use `scan` for ranges".into()));
    };
    let sc = cfg.scheme_config(t_o, s)?;
    let run = run_analytic(&sc)?;
    let mut certification = Certification::default();
    for side in cfg.side.sides() {
        match side {
            Side::Input => certification.input = Some(certify(&uv_input(&sc)?, &sc.input)?),
            Side::Output => {
                let state = run.output_state.as_ref().expect("analytic run fills the state");
                certification.output = Some(certify(&uv_output(&sc, &run)?, state)?);
            }
        }
    }
    let monte_carlo = cfg.mc.map(|mc| run_monte_carlo(&sc, mc.samples, mc.seed)).transpose()?;
    let basis = sc.basis();
    Ok(RunReport {
        config: cfg.clone(),
        coordinates: basis.coord_names(),
        readouts: Readouts {
            p_a: run.readout_pa.coeffs().to_vec(),
            q_b: run.readout_qb.coeffs().to_vec(),
            variances: run.readout_variances.expect("analytic run fills the variances"),
        },
        outputs: run
            .outputs
            .iter()
            .enumerate()
            .map(|(j, [q, p])| ModeForms {
                mode: (j + 1).to_string(),
                q: q.coeffs().to_vec(),
                p: p.coeffs().to_vec(),
            })
            .collect(),
        coefficients: run.table,
        certification,
        monte_carlo,
    })
}

pub fn cmd_run(config: &Path) -> Result<String> {
    let cfg = RunConfigFile::load(config)?;
    Ok(serde_json::to_string_pretty(&run_report(&cfg)?)?)
}
