//! JSON run configuration.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::entanglement::Side;
use crate::error::{Error, Result};
use crate::gaussian::GaussianState;
use crate::scheme::{db_to_squeezing, InputFamily, SchemeConfig, Variant, DEFAULT_ANCILLA_DB};

#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

/// A single value or an inclusive, evenly spaced grid.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Param {
    Scalar(f64),
    Range(Range),
}

impl Param {
    pub fn values(&self) -> Vec<f64> {
        match *self {
            Param::Scalar(x) => vec![x],
            Param::Range(Range { min, max, steps }) => (0..steps)
                .map(|i| if i + 1 == steps { max } else { min + (max - min) * i as f64 / (steps - 1) as f64 })
                .collect(),
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match *self {
            Param::Scalar(x) => Some(x),
            Param::Range(_) => None,
        }
    }

    fn validate(&self, name: &str, lo: f64, hi: f64, open: bool) -> Result<()> {
        let inside = |x: f64| {
            if open { x > lo && x < hi } else { x >= lo && x <= hi }
        };
        if let Param::Range(r) = self {
            if r.steps < 2 || !(r.min < r.max) {
                return Err(Error::Config(format!("{name} range needs steps >= 2 and min < max")));
            }
        }
        let bounds = if open { format!("({lo}, {hi})") } else { format!("[{lo}, {hi}]") };
        match self.values().into_iter().find(|x| !inside(*x)) {
            Some(x) => Err(Error::Config(format!("{name} = {x} outside {bounds}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedState {
    Ghz,
    EprType,
    Vacuum,
}

impl From<NamedState> for InputFamily {
    fn from(s: NamedState) -> Self {
        match s {
            NamedState::Ghz => InputFamily::Ghz,
            NamedState::EprType => InputFamily::EprType,
            NamedState::Vacuum => InputFamily::Vacuum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitState {
    /// `2N × 2N` covariance in interleaved `(q_1, p_1, …)` order.
    pub covariance: Vec<Vec<f64>>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum StateSpec {
    Named(NamedState),
    Explicit(ExplicitState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideSel {
    Input,
    Output,
    Both,
}

impl SideSel {
    pub fn input(self) -> bool {
        self != SideSel::Output
    }

    pub fn output(self) -> bool {
        self != SideSel::Input
    }

    pub fn sides(self) -> Vec<Side> {
        match self {
            SideSel::Input => vec![Side::Input],
            SideSel::Output => vec![Side::Output],
            SideSel::Both => vec![Side::Input, Side::Output],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_t_o")]
    pub t_o: Param,
    #[serde(default = "default_s")]
    pub s: Param,
    pub state: StateSpec,
    #[serde(default = "default_db")]
    pub ancilla_squeeze_db: f64,
    #[serde(default = "default_side")]
    pub side: SideSel,
    #[serde(default)]
    pub mc: Option<McConfig>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub k_a: f64,
    #[serde(default = "one")]
    pub k_b: f64,
}

fn default_variant() -> Variant {
    Variant::UniformLast
}

fn default_t_o() -> Param {
    Param::Range(Range { min: 0.5, max: 0.999, steps: 50 })
}

fn default_s() -> Param {
    Param::Range(Range { min: 0.0, max: 2.5, steps: 50 })
}

fn default_db() -> f64 {
    DEFAULT_ANCILLA_DB
}

fn default_side() -> SideSel {
    SideSel::Input
}

fn one() -> f64 {
    1.0
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.t_o.validate("t_o", 0.0, 1.0, true)?;
        self.s.validate("s", 0.0, 20.0, false)?;
        if !(self.ancilla_squeeze_db.is_finite() && self.ancilla_squeeze_db >= 0.0) {
            return Err(Error::Config(format!("ancilla_squeeze_db = {} must be finite and >= 0", self.ancilla_squeeze_db)));
        }
        if let Some(mc) = self.mc {
            if mc.samples == 0 {
                return Err(Error::Config("mc.samples must be positive".into()));
            }
        }
        if let StateSpec::Explicit(_) = self.state {
            if self.s.scalar().is_none() {
                return Err(Error::Config("an explicit state takes no s range".into()));
            }
        }
        // Builds one configuration to run the scheme-level checks.
        let t_o = self.t_o.values()[0];
        let s = self.s.values()[0];
        self.scheme_config(t_o, s).map(|_| ())
    }

    pub fn input_state(&self, s: f64) -> Result<GaussianState> {
        match &self.state {
            StateSpec::Named(named) => InputFamily::from(*named).state(self.n, s),
            StateSpec::Explicit(e) => {
                let d = e.covariance.len();
                if e.covariance.iter().any(|r| r.len() != d) {
                    return Err(Error::Config("covariance must be square".into()));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| e.covariance[i][j]);
                let mean = match &e.mean {
                    Some(m) if m.len() != d => {
                        return Err(Error::Config(format!("mean has {} entries, expected {d}", m.len())))
                    }
                    Some(m) => DVector::from_column_slice(m),
                    None => DVector::zeros(d),
                };
                GaussianState::new(mean, cov)
            }
        }
    }

    pub fn scheme_config(&self, t_o: f64, s: f64) -> Result<SchemeConfig> {
        let s_anc = db_to_squeezing(self.ancilla_squeeze_db);
        let mut cfg = SchemeConfig::new(self.n, self.m, t_o, self.variant)?
            .with_input(self.input_state(s)?)?
            .with_ancilla_squeezing(s_anc, s_anc);
        cfg.alpha = self.alpha;
        cfg.beta = self.beta;
        cfg.k_a = self.k_a;
        cfg.k_b = self.k_b;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_defaults() {
        let c = RunConfigFile::parse(r#"{"n": 3, "m": 2, "state": "ghz"}"#).unwrap();
        assert_eq!(c.variant, Variant::UniformLast);
        assert_eq!(c.t_o.values().len(), 50);
        assert_eq!(c.t_o.values()[49], 0.999);
        assert_eq!(c.s.values()[0], 0.0);
        assert_eq!(c.ancilla_squeeze_db, 60.0);
        assert_eq!(c.side, SideSel::Input);
    }

    #[test]
    fn parses_full() {
        let c = RunConfigFile::parse(
            r#"{"n": 3, "m": 2, "variant": "alt-bn", "t_o": 0.9, "s": {"min": 0, "max": 1, "steps": 3},
                "state": "epr-type", "ancilla_squeeze_db": 30, "side": "both",
                "mc": {"samples": 10, "seed": 4}, "alpha": 2, "beta": 0.5, "k_a": 1, "k_b": 1}"#,
        )
        .unwrap();
        assert_eq!(c.s.values(), vec![0.0, 0.5, 1.0]);
        assert_eq!(c.mc, Some(McConfig { samples: 10, seed: 4 }));
        let sc = c.scheme_config(0.9, 0.5).unwrap();
        assert_eq!(sc.alpha, 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            r#"{"n": 3, "m": 2, "state": "ghz", "bogus": 1}"#,
            r#"{"n": 3, "m": 3, "state": "ghz"}"#,
            r#"{"n": 3, "m": 2, "state": "ghz", "t_o": 1.0}"#,
            r#"{"n": 3, "m": 2, "state": "ghz", "t_o": {"min": 0.9, "max": 0.5, "steps": 3}}"#,
            r#"{"n": 3, "m": 2, "state": "ghz", "s": {"min": 0, "max": 1, "steps": 1}}"#,
            r#"{"n": 3, "m": 2, "state": "cat"}"#,
            r#"{"n": 4, "m": 2, "variant": "alt-bn", "state": "ghz"}"#,
            r#"{"n": 1, "m": 0, "state": "ghz"}"#,
            r#"{"n": 3, "m": 2, "state": "ghz", "mc": {"samples": 0}}"#,
        ] {
            assert!(RunConfigFile::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn explicit_state_checked() {
        let good = r#"{"n": 2, "m": 1, "s": 0, "state": {"covariance": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}}"#;
        assert!(RunConfigFile::parse(good).is_ok());
        let unphysical = r#"{"n": 2, "m": 1, "s": 0, "state": {"covariance": [[0.5,0,0,0],[0,0.5,0,0],[0,0,1,0],[0,0,0,1]]}}"#;
        assert!(matches!(RunConfigFile::parse(unphysical), Err(Error::Unphysical(_))));
        let wrong_n = r#"{"n": 3, "m": 1, "s": 0, "state": {"covariance": [[1,0],[0,1]]}}"#;
        assert!(RunConfigFile::parse(wrong_n).is_err());
    }
}
