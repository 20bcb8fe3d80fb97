use std::path::PathBuf;

use thiserror::Error;

use crate::quadops::ModeLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode {0} is not part of a basis with {1} target modes")]
    ModeOutOfRange(ModeLabel, usize),

    #[error("mode index {index} out of range for a {n_modes}-mode state")]
    StateModeOutOfRange { index: usize, n_modes: usize },

    #[error("target-mode count {0} outside the supported range 1..={max}", max = crate::quadops::MAX_TARGETS)]
    TargetCount(usize),

    #[error("linear forms live on different bases ({0} vs {1} target modes)")]
    BasisMismatch(usize, usize),

    #[error("a beam splitter needs two distinct modes, got {0} twice")]
    SameMode(ModeLabel),

    #[error("beam-splitter amplitudes are not unitary: t^2 + r^2 - 1 = {defect:e} (t = {t}, r = {r})")]
    NonUnitary { t: f64, r: f64, defect: f64 },

    #[error("matrix is not symplectic: max |S Ω S^T - Ω| = {0:e}")]
    NotSymplectic(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("state is unphysical: smallest symplectic eigenvalue {0}")]
    Unphysical(f64),

    #[error("mode {0} has already been consumed by a homodyne measurement")]
    Consumed(usize),

    #[error("invalid scheme configuration: {0}")]
    Config(String),

    #[error("no compatible transmission t_d in (0, 1) for N = {n}, m = {m}, t_o = {t_o}")]
    NoCompatibleRoot { n: usize, m: usize, t_o: f64 },

    #[error("self-check failed: {what} (deviation {deviation:e})")]
    SelfCheck { what: String, deviation: f64 },

    #[error("closed-form expression unavailable: {0}")]
    FormulaUnavailable(String),

    #[error("degenerate certifier: minimum S_B is zero")]
    DegenerateSpec,

    #[error("{0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid run configuration: {0}")]
    Json(#[from] serde_json::Error),
}
