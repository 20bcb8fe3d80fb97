//! The two-ancilla measurement-mediated QND circuit.
//!
//! Ancilla `A` (squeezed in `q`) sweeps targets `1..=m` and then `m+1..=N`;
//! ancilla `B` (squeezed in `p`) sweeps `N..=m+1` and then `m..=1`. After the
//! cascade `p_A` and `q_B` are read out by homodyne detection and fed forward
//! onto every target. Two engines evaluate the circuit: the Heisenberg engine
//! tracks every quadrature as a [`LinearForm`], and the Gaussian engine
//! propagates covariance matrices, optionally sampling measurement records.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::gaussian::GaussianState;
use crate::quadops::{
    bracket, Axis, Basis, LinearForm, ModeLabel, ModeRegister, KAPPA, MAX_TARGETS,
};

/// Ancilla squeezing used when none is configured, in dB.
pub const DEFAULT_ANCILLA_DB: f64 = 60.0;

/// Relative tolerance of the closed-form coefficient self-checks.
pub const SELF_CHECK_TOL: f64 = 1e-12;

/// Agreement required between the bisected and the closed-form `t_d`.
pub const ROOT_TOL: f64 = 1e-10;

/// Squeezing parameter for a squeezing level in dB: `s = ln(10^{dB/20})`.
pub fn db_to_squeezing(db: f64) -> f64 {
    db / 20.0 * std::f64::consts::LN_10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Every splitter at `t_o` except both splitters on mode `N`, which use
    /// `t_d` with `r_{B,N} = -r_{A,N} = r_d`.
    UniformLast,
    /// Only the `(A, N)` splitter differs, with `(t_d, -r_d)`.
    #[serde(rename = "alt-bn")]
    AltBN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Amplitude {
    Common,
    Distinguished,
}

impl Variant {
    /// Amplitude pair and reflection sign of the splitter coupling `ancilla` to target `j`.
    fn splitter_kind(self, ancilla: ModeLabel, j: usize, n: usize) -> (Amplitude, f64) {
        if j != n {
            return (Amplitude::Common, 1.0);
        }
        match (self, ancilla) {
            (_, ModeLabel::AncillaA) => (Amplitude::Distinguished, -1.0),
            (Variant::UniformLast, _) => (Amplitude::Distinguished, 1.0),
            (Variant::AltBN, _) => (Amplitude::Common, 1.0),
        }
    }
}

/// Named input-state families for the targets.
///
/// Every mode is given a quarter-turn phase, so the GHZ family has `Σ q_j` and
/// `p_i - p_j` squeezed, and the EPR-type family keeps its undivided arm on
/// the probe mode `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFamily {
    Vacuum,
    Ghz,
    EprType,
}

impl InputFamily {
    pub fn state(self, n: usize, s: f64) -> Result<GaussianState> {
        match self {
            InputFamily::Vacuum => GaussianState::vacuum(n),
            InputFamily::Ghz => GaussianState::ghz_state(n, s)?.rotate_all(FRAC_PI_2),
            InputFamily::EprType => {
                let order: Vec<usize> = (1..n).chain(std::iter::once(0)).collect();
                GaussianState::epr_type_state(n, s)?
                    .reorder_modes(&order)?
                    .rotate_all(FRAC_PI_2)
            }
        }
    }
}

/// Feedforward gains: `q_j += phi_j I_B`, `p_j += gamma_j I_A`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gains {
    /// Gains that cancel the anti-squeezed ancilla quadratures.
    Auto,
    Manual { phi: Vec<f64>, gamma: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct SchemeConfig {
    pub n: usize,
    pub m: usize,
    pub t_o: f64,
    pub variant: Variant,
    /// Squeezing of ancilla `A` (in `q`).
    pub s_a: f64,
    /// Squeezing of ancilla `B` (in `p`).
    pub s_b: f64,
    pub input: GaussianState,
    pub gains: Gains,
    pub k_a: f64,
    pub k_b: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Forces `t_d` instead of solving for compatibility.
    pub td_override: Option<f64>,
}

impl SchemeConfig {
    /// Vacuum targets, 60 dB ancillas, automatic gains and unit constants.
    pub fn new(n: usize, m: usize, t_o: f64, variant: Variant) -> Result<Self> {
        let s = db_to_squeezing(DEFAULT_ANCILLA_DB);
        let cfg = SchemeConfig {
            n,
            m,
            t_o,
            variant,
            s_a: s,
            s_b: s,
            input: GaussianState::vacuum(n.max(1))?,
            gains: Gains::Auto,
            k_a: 1.0,
            k_b: 1.0,
            alpha: 1.0,
            beta: 1.0,
            td_override: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_input(mut self, input: GaussianState) -> Result<Self> {
        self.input = input;
        self.validate()?;
        Ok(self)
    }

    pub fn with_family(self, family: InputFamily, s: f64) -> Result<Self> {
        let state = family.state(self.n, s)?;
        self.with_input(state)
    }

    pub fn with_ancilla_squeezing(mut self, s_a: f64, s_b: f64) -> Self {
        self.s_a = s_a;
        self.s_b = s_b;
        self
    }

    pub fn with_gains(mut self, gains: Gains) -> Result<Self> {
        self.gains = gains;
        self.validate()?;
        Ok(self)
    }

    pub fn with_td(mut self, t_d: f64) -> Result<Self> {
        self.td_override = Some(t_d);
        self.validate()?;
        Ok(self)
    }

    pub fn basis(&self) -> Basis {
        Basis::new(self.n).expect("validated target count")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 2 || self.n > MAX_TARGETS {
            return bad(format!("N = {} outside 2..={MAX_TARGETS}", self.n));
        }
        if self.m < 1 || self.m >= self.n {
            return bad(format!("m = {} outside 1..={}", self.m, self.n - 1));
        }
        if self.variant == Variant::AltBN && (self.n, self.m) != (3, 2) {
            return bad(format!("the alternative setup is defined for N = 3, m = 2 only, got N = {}, m = {}", self.n, self.m));
        }
        if !(self.t_o > 0.0 && self.t_o < 1.0) {
            return bad(format!("t_o = {} outside (0, 1)", self.t_o));
        }
        if let Some(t_d) = self.td_override {
            if !(t_d > 0.0 && t_d <= 1.0) {
                return bad(format!("t_d = {t_d} outside (0, 1]"));
            }
        }
        if !(self.s_a.is_finite() && self.s_b.is_finite()) {
            return bad("ancilla squeezing must be finite".into());
        }
        for (name, v) in [("k_a", self.k_a), ("k_b", self.k_b), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if self.input.n_modes() != self.n {
            return bad(format!(
                "input state has {} modes but N = {}",
                self.input.n_modes(),
                self.n
            ));
        }
        if let Gains::Manual { phi, gamma } = &self.gains {
            if phi.len() != self.n || gamma.len() != self.n {
                return bad(format!("manual gains need {} entries each", self.n));
            }
        }
        Ok(())
    }

    /// The configured `t_d`, or the compatible one.
    pub fn t_d(&self) -> Result<f64> {
        match self.td_override {
            Some(t_d) => Ok(t_d),
            None => solve_compatibility(self.n, self.m, self.t_o, self.variant),
        }
    }
}

fn sweep_order(n: usize, m: usize) -> impl Iterator<Item = (ModeLabel, usize)> {
    use ModeLabel::{AncillaA as A, AncillaB as B};
    (1..=m)
        .map(|j| (A, j))
        .chain((m + 1..=n).rev().map(|j| (B, j)))
        .chain((1..=m).rev().map(|j| (B, j)))
        .chain((m + 1..=n).map(|j| (A, j)))
}

/// Splitter sequence `(ancilla, target, t, r)` in application order.
pub fn cascade_steps(
    n: usize,
    m: usize,
    t_o: f64,
    t_d: f64,
    variant: Variant,
) -> Vec<(ModeLabel, usize, f64, f64)> {
    let r_o = (1.0 - t_o * t_o).sqrt();
    let r_d = (1.0 - t_d * t_d).sqrt();
    sweep_order(n, m)
        .map(|(anc, j)| match variant.splitter_kind(anc, j, n) {
            (Amplitude::Common, sign) => (anc, j, t_o, sign * r_o),
            (Amplitude::Distinguished, sign) => (anc, j, t_d, sign * r_d),
        })
        .collect()
}

/// Mode-level transfer matrix of the cascade (identical for `q` and `p`) in
/// double-double arithmetic, row `k` holding output mode `k` over input modes
/// `1..=N, A, B`. Compatible `t_d` can be as small as 1e-9, where `r_d` is 1
/// in f64 and the readout coefficients cancel below f64 resolution.
fn mode_transfer(n: usize, m: usize, t_o: f64, t_d: f64, variant: Variant) -> Vec<Vec<TwoFloat>> {
    let one = TwoFloat::from(1.0);
    let (t_o, t_d) = (TwoFloat::from(t_o), TwoFloat::from(t_d));
    let r_o = (one - t_o * t_o).sqrt();
    let r_d = (one - t_d * t_d).sqrt();
    let d = n + 2;
    let mut x: Vec<Vec<TwoFloat>> = (0..d)
        .map(|i| (0..d).map(|k| if i == k { one } else { TwoFloat::from(0.0) }).collect())
        .collect();
    for (anc, j) in sweep_order(n, m) {
        let (t, r) = match variant.splitter_kind(anc, j, n) {
            (Amplitude::Common, sign) => (t_o, r_o * sign),
            (Amplitude::Distinguished, sign) => (t_d, r_d * sign),
        };
        let (ix, iy) = (j - 1, if anc == ModeLabel::AncillaA { n } else { n + 1 });
        for k in 0..d {
            let (a, b) = (x[ix][k], x[iy][k]);
            x[ix][k] = t * a + r * b;
            x[iy][k] = t * b - r * a;
        }
    }
    x
}

/// Target-restricted bracket `[q_B^out, p_A^out]` as a function of `t_d`.
fn split_bracket(n: usize, m: usize, t_o: f64, t_d: f64, variant: Variant) -> TwoFloat {
    let x = mode_transfer(n, m, t_o, t_d, variant);
    (0..n).fold(TwoFloat::from(0.0), |acc, j| acc + x[n + 1][j] * x[n][j]) * KAPPA
}

/// Register after the beam-splitter cascade, coefficients rounded from the
/// double-double transfer matrix.
pub fn cascade(n: usize, m: usize, t_o: f64, t_d: f64, variant: Variant) -> Result<ModeRegister> {
    let basis = Basis::new(n)?;
    let x = mode_transfer(n, m, t_o, t_d, variant);
    let mut reg = ModeRegister::identity(basis);
    for (i, row) in x.iter().enumerate() {
        for axis in Axis::BOTH {
            let mut coeffs = vec![0.0; basis.dim()];
            for (k, v) in row.iter().enumerate() {
                coeffs[2 * k + axis.offset()] = f64::from(*v);
            }
            let form = LinearForm::from_coeffs(basis, coeffs, 0.0)?;
            reg = reg.with_form(basis.label(i), axis, form)?;
        }
    }
    Ok(reg)
}

pub fn build_register(config: &SchemeConfig) -> Result<ModeRegister> {
    config.validate()?;
    cascade(config.n, config.m, config.t_o, config.t_d()?, config.variant)
}

/// Brackets between the readouts `q_B^out` and `p_A^out`: target parts,
/// ancilla parts, and full forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReadoutBrackets {
    pub target: f64,
    pub ancilla: f64,
    pub full: f64,
}

pub fn readout_brackets(reg: &ModeRegister) -> Result<ReadoutBrackets> {
    let q_b = reg.q(ModeLabel::AncillaB)?;
    let p_a = reg.p(ModeLabel::AncillaA)?;
    Ok(ReadoutBrackets {
        target: bracket(&q_b.targets_part(), &p_a.targets_part()),
        ancilla: bracket(&q_b.ancilla_part(), &p_a.ancilla_part()),
        full: bracket(q_b, p_a),
    })
}

/// Closed-form compatible `t_d`, where one is known.
pub fn closed_form_td(n: usize, m: usize, t_o: f64, variant: Variant) -> Result<f64> {
    match variant {
        Variant::UniformLast => {
            Ok(t_o.powi(m as i32) / (2.0 - t_o.powi(2 * (n - m - 1) as i32)).sqrt())
        }
        Variant::AltBN if n == 3 && m == 2 => {
            let t2 = t_o * t_o;
            Ok(t_o / (t2 + (1.0 + t2) * (1.0 - t2 * t2)).sqrt())
        }
        Variant::AltBN => Err(Error::FormulaUnavailable(format!(
            "compatible t_d for the alternative setup with N = {n}, m = {m}"
        ))),
    }
}

/// Transmission `t_d ∈ (0, 1)` making the target and ancilla parts of the
/// readouts commute separately. Found by bisection on the target-restricted
/// bracket; cross-checked against the closed form when one exists.
pub fn solve_compatibility(n: usize, m: usize, t_o: f64, variant: Variant) -> Result<f64> {
    if !(2..=MAX_TARGETS).contains(&n) || m < 1 || m >= n || !(t_o > 0.0 && t_o < 1.0) {
        return Err(Error::Config(format!("invalid (N, m, t_o) = ({n}, {m}, {t_o})")));
    }
    let h = |t_d: f64| f64::from(split_bracket(n, m, t_o, t_d, variant));
    // Roots can sit many decades below 1, so scan a log grid as well as a linear one.
    let mut grid: Vec<f64> = (1..=160).rev().map(|k| 10f64.powf(-(k as f64) / 8.0)).collect();
    grid.extend((1..200).map(|i| i as f64 / 200.0));
    grid.push(1.0 - 1e-12);
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut prev = (grid[0], h(grid[0]));
    let mut root = None;
    for &x in &grid[1..] {
        let hx = h(x);
        if prev.1 == 0.0 {
            root = Some(prev.0);
            break;
        }
        if prev.1.signum() != hx.signum() {
            root = Some(bisect(&h, prev.0, x, prev.1));
            break;
        }
        prev = (x, hx);
    }
    let t_d = root.ok_or(Error::NoCompatibleRoot { n, m, t_o })?;

    match closed_form_td(n, m, t_o, variant) {
        Ok(expected) if (t_d - expected).abs() > ROOT_TOL => Err(Error::SelfCheck {
            what: format!("bisected t_d {t_d} vs closed form {expected} (N = {n}, m = {m}, t_o = {t_o})"),
            deviation: (t_d - expected).abs(),
        }),
        _ => Ok(t_d),
    }
}

fn bisect(h: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, mut h_lo: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let h_mid = h(mid);
        if h_mid == 0.0 {
            return mid;
        }
        if h_mid.signum() == h_lo.signum() {
            lo = mid;
            h_lo = h_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Closed-form coefficients and gains for a configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientTable {
    pub t_d: f64,
    pub r_d: f64,
    /// Certifier coefficients attached to the `p` readout.
    pub f: Vec<f64>,
    /// Certifier coefficients attached to the `q` readout.
    pub g: Vec<f64>,
    /// QND gains `G_j` of the signal modes `1..N`.
    pub big_g: Vec<f64>,
    /// Automatic feedforward gain on `q_j` from `I_B`.
    pub phi: Vec<f64>,
    /// Automatic feedforward gain on `p_j` from `I_A`.
    pub gamma: Vec<f64>,
}

impl CoefficientTable {
    /// `Σ f_j g_j`.
    pub fn fg_sum(&self) -> f64 {
        self.f.iter().zip(&self.g).map(|(f, g)| f * g).sum()
    }

    /// `Σ |f_j g_j|`, the natural scale of [`Self::fg_sum`].
    pub fn fg_scale(&self) -> f64 {
        self.f.iter().zip(&self.g).map(|(f, g)| (f * g).abs()).sum()
    }
}

/// `(f, g)` of the uniform setup in closed form.
pub fn closed_form_fg(n: usize, m: usize, t_o: f64, t_d: f64) -> (Vec<f64>, Vec<f64>) {
    let r_o = (1.0 - t_o * t_o).sqrt();
    let r_d = (1.0 - t_d * t_d).sqrt();
    let p = |e: i64| t_o.powi(e as i32);
    let (ni, mi) = (n as i64, m as i64);
    let mut f = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for j in 1..n as i64 {
        if j <= mi {
            f.push(-r_o * p(-j));
            g.push(-r_o / t_d * p(2 * mi - ni - j + 1));
        } else {
            f.push(-r_o * p(j - 2 * mi - 1));
            g.push(-r_o / t_d * p(j - ni));
        }
    }
    f.push(-r_d * p(1 - ni) * (2.0 - p(2 * (ni - mi - 1))));
    g.push(r_d / t_d);
    (f, g)
}

/// `(f, g)` read off the readout forms: target coefficients of `p_A^out` and
/// `q_B^out` divided by the `p_A^in` self-coefficient, with mode `N` negated.
pub fn readout_fg(reg: &ModeRegister) -> Result<(Vec<f64>, Vec<f64>)> {
    let p_a = reg.p(ModeLabel::AncillaA)?;
    let q_b = reg.q(ModeLabel::AncillaB)?;
    let c = p_a.coeff(ModeLabel::AncillaA, Axis::P)?;
    let n = reg.basis().n_targets();
    let mut f: Vec<f64> = p_a.target_coeffs(Axis::P).iter().map(|x| x / c).collect();
    let mut g: Vec<f64> = q_b.target_coeffs(Axis::Q).iter().map(|x| x / c).collect();
    f[n - 1] = -f[n - 1];
    g[n - 1] = -g[n - 1];
    Ok((f, g))
}

/// Gains that remove the anti-squeezed `q_B^in` from every `q_j` and
/// `p_A^in` from every `p_j` after feedforward.
pub fn cancellation_gains(reg: &ModeRegister) -> Result<(Vec<f64>, Vec<f64>)> {
    use ModeLabel::{AncillaA as A, AncillaB as B};
    let q_b_self = reg.q(B)?.coeff(B, Axis::Q)?;
    let p_a_self = reg.p(A)?.coeff(A, Axis::P)?;
    let n = reg.basis().n_targets();
    let mut phi = Vec::with_capacity(n);
    let mut gamma = Vec::with_capacity(n);
    for j in 1..=n {
        let t = ModeLabel::Target(j);
        phi.push(-reg.q(t)?.coeff(B, Axis::Q)? / q_b_self);
        gamma.push(-reg.p(t)?.coeff(A, Axis::P)? / p_a_self);
    }
    Ok((phi, gamma))
}

pub fn coefficient_table(config: &SchemeConfig) -> Result<CoefficientTable> {
    config.validate()?;
    let t_d = config.t_d()?;
    let r_d = (1.0 - t_d * t_d).sqrt();
    let reg = cascade(config.n, config.m, config.t_o, t_d, config.variant)?;
    let (phi, gamma) = cancellation_gains(&reg)?;
    let n = config.n;
    let (f, g, big_g) = match config.variant {
        Variant::UniformLast => {
            let (f, g) = closed_form_fg(n, config.m, config.t_o, t_d);
            let big_g = g[..n - 1].iter().map(|g| -2.0 * r_d * t_d * g).collect();
            (f, g, big_g)
        }
        Variant::AltBN => {
            let (f, g) = readout_fg(&reg)?;
            let outputs = feedforward(&reg, &phi, &gamma)?;
            let p_n = ModeLabel::Target(n);
            let big_g = outputs[..n - 1]
                .iter()
                .map(|[_, p]| p.coeff(p_n, Axis::P).map(|c| -c))
                .collect::<Result<_>>()?;
            (f, g, big_g)
        }
    };
    Ok(CoefficientTable { t_d, r_d, f, g, big_g, phi, gamma })
}

fn feedforward(reg: &ModeRegister, phi: &[f64], gamma: &[f64]) -> Result<Vec<[LinearForm; 2]>> {
    let q_b = reg.q(ModeLabel::AncillaB)?;
    let p_a = reg.p(ModeLabel::AncillaA)?;
    let mut out = reg.clone();
    for j in 1..=reg.basis().n_targets() {
        let t = ModeLabel::Target(j);
        out = out
            .apply_feedforward(t, Axis::Q, phi[j - 1], q_b)?
            .apply_feedforward(t, Axis::P, gamma[j - 1], p_a)?;
    }
    (1..=reg.basis().n_targets())
        .map(|j| {
            let t = ModeLabel::Target(j);
            Ok([out.q(t)?.clone(), out.p(t)?.clone()])
        })
        .collect()
}

/// Everything the circuit produces for one configuration.
#[derive(Clone, Debug)]
pub struct SchemeRun {
    pub table: CoefficientTable,
    /// Register after the cascade, before feedforward.
    pub stage2: ModeRegister,
    pub readout_pa: LinearForm,
    pub readout_qb: LinearForm,
    /// `[q_j^out, p_j^out]` for `j = 1..=N`.
    pub outputs: Vec<[LinearForm; 2]>,
    /// Output target state; filled by the Gaussian engine.
    pub output_state: Option<GaussianState>,
    /// `(V_p^A, V_q^B)`; filled by the Gaussian engine.
    pub readout_variances: Option<(f64, f64)>,
}

impl SchemeRun {
    pub fn output(&self, j: usize, axis: Axis) -> &LinearForm {
        &self.outputs[j - 1][axis.offset()]
    }

    /// Output forms stacked as rows, in interleaved target order.
    pub fn output_matrix(&self) -> DMatrix<f64> {
        let rows: Vec<&LinearForm> = self.outputs.iter().flat_map(|f| f.iter()).collect();
        let d = rows[0].basis().dim();
        DMatrix::from_fn(rows.len(), d, |i, k| rows[i].coeffs()[k])
    }
}

/// Largest deviation of the output forms from canonical brackets, relative
/// to the size of the coefficients involved.
pub fn output_bracket_defect(outputs: &[[LinearForm; 2]]) -> f64 {
    let forms: Vec<&LinearForm> = outputs.iter().flat_map(|f| f.iter()).collect();
    let mut worst: f64 = 0.0;
    for (i, u) in forms.iter().enumerate() {
        for (j, v) in forms.iter().enumerate().skip(i + 1) {
            let expected = if i % 2 == 0 && j == i + 1 { KAPPA } else { 0.0 };
            let scale = u.coeffs().iter().map(|c| c.abs()).fold(1.0, f64::max)
                * v.coeffs().iter().map(|c| c.abs()).fold(1.0, f64::max);
            worst = worst.max((bracket(u, v) - expected).abs() / scale);
        }
    }
    worst
}

/// Heisenberg engine: cascade, readouts, feedforward, and self-checks.
pub fn run_heisenberg(config: &SchemeConfig) -> Result<SchemeRun> {
    config.validate()?;
    let table = coefficient_table(config)?;
    let stage2 = cascade(config.n, config.m, config.t_o, table.t_d, config.variant)?;
    let (phi, gamma) = match &config.gains {
        Gains::Auto => (table.phi.clone(), table.gamma.clone()),
        Gains::Manual { phi, gamma } => (phi.clone(), gamma.clone()),
    };
    let outputs = feedforward(&stage2, &phi, &gamma)?;
    let run = SchemeRun {
        readout_pa: stage2.p(ModeLabel::AncillaA)?.clone(),
        readout_qb: stage2.q(ModeLabel::AncillaB)?.clone(),
        table,
        stage2,
        outputs,
        output_state: None,
        readout_variances: None,
    };

    let full = bracket(&run.readout_qb, &run.readout_pa).abs();
    if full > SELF_CHECK_TOL {
        return Err(Error::SelfCheck { what: "readouts do not commute".into(), deviation: full });
    }
    let defect = output_bracket_defect(&run.outputs);
    if defect > SELF_CHECK_TOL {
        return Err(Error::SelfCheck { what: "output brackets not canonical".into(), deviation: defect });
    }
    if config.variant == Variant::UniformLast && config.gains == Gains::Auto && config.td_override.is_none() {
        for (what, deviation) in closed_form_deviations(config, &run)? {
            if deviation > SELF_CHECK_TOL {
                return Err(Error::SelfCheck { what, deviation });
            }
        }
    }
    Ok(run)
}

/// Scaled deviations of a run from the closed forms of the uniform setup:
/// readouts, automatic gains, the readout-derived `(f, g)`, and the outputs.
/// Each entry is `max |got - want| / max(1, |want|)` over one identity.
pub fn closed_form_deviations(config: &SchemeConfig, run: &SchemeRun) -> Result<Vec<(String, f64)>> {
    use ModeLabel::{AncillaA as A, AncillaB as B, Target as T};
    if config.variant != Variant::UniformLast {
        return Err(Error::FormulaUnavailable("closed forms exist for the uniform setup only".into()));
    }
    let (n, m, t_o) = (config.n, config.m, config.t_o);
    let tab = &run.table;
    let (t_d, r_d) = (tab.t_d, tab.r_d);
    let (f, g) = (&tab.f, &tab.g);
    let basis = config.basis();
    let c = t_d * t_o.powi(n as i32 - 1);
    let rd2_td2 = r_d * r_d - t_d * t_d;
    let scaled = |got: &[f64], want: &[f64]| {
        got.iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    };
    let mut out = Vec::new();

    let sign_n = |j: usize| if j == n { -1.0 } else { 1.0 };
    let mut pa_terms: Vec<_> = (1..=n).map(|j| (T(j), Axis::P, c * sign_n(j) * f[j - 1])).collect();
    pa_terms.push((A, Axis::P, c));
    let pb_printed = 1.0 - t_d * t_d * (2.0 - t_o.powi(2 * (n - m - 1) as i32));
    let pb_alt = 1.0 - t_o.powi(2 * m as i32);
    let mut pa_alt = pa_terms.clone();
    pa_terms.push((B, Axis::P, pb_printed));
    pa_alt.push((B, Axis::P, pb_alt));
    let pa = LinearForm::from_terms(basis, &pa_terms)?;
    let pa2 = LinearForm::from_terms(basis, &pa_alt)?;
    out.push(("readout p_A^out, t_d-form p_B coefficient".into(), run.readout_pa.max_scaled_diff(&pa)?));
    out.push(("readout p_A^out, t_o-form p_B coefficient".into(), run.readout_pa.max_scaled_diff(&pa2)?));

    let mut qb_terms: Vec<_> = (1..=n).map(|j| (T(j), Axis::Q, c * sign_n(j) * g[j - 1])).collect();
    qb_terms.push((A, Axis::Q, -pb_alt));
    qb_terms.push((B, Axis::Q, c));
    let qb = LinearForm::from_terms(basis, &qb_terms)?;
    out.push(("readout q_B^out".into(), run.readout_qb.max_scaled_diff(&qb)?));

    let (rf, rg) = readout_fg(&run.stage2)?;
    out.push(("f from readout".into(), scaled(&rf, f)));
    out.push(("g from readout".into(), scaled(&rg, g)));
    out.push(("automatic q gains equal f".into(), scaled(&tab.phi, f)));
    out.push(("automatic p gains equal g".into(), scaled(&tab.gamma, g)));
    let big_g: Vec<f64> = g[..n - 1].iter().map(|g| -2.0 * r_d * t_d * g).collect();
    out.push(("G_j = -2 r_d t_d g_j".into(), scaled(&tab.big_g, &big_g)));

    let mut worst_q: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for j in 1..n {
        let q = LinearForm::from_terms(basis, &[(T(j), Axis::Q, 1.0), (A, Axis::Q, -f[j - 1])])?;
        let p = LinearForm::from_terms(
            basis,
            &[
                (T(j), Axis::P, 1.0),
                (T(n), Axis::P, 2.0 * r_d * t_d * g[j - 1]),
                (B, Axis::P, rd2_td2 * g[j - 1]),
            ],
        )?;
        worst_q = worst_q.max(run.output(j, Axis::Q).max_scaled_diff(&q)?);
        worst_p = worst_p.max(run.output(j, Axis::P).max_scaled_diff(&p)?);
    }
    out.push(("signal outputs q_j^out".into(), worst_q));
    out.push(("signal outputs p_j^out".into(), worst_p));

    let mut qn_terms: Vec<_> = (1..n).map(|j| (T(j), Axis::Q, -2.0 * r_d * t_d * g[j - 1])).collect();
    qn_terms.push((T(n), Axis::Q, 1.0));
    let mut qn_alt = qn_terms.clone();
    qn_terms.push((A, Axis::Q, -rd2_td2 * f[n - 1]));
    qn_alt.push((A, Axis::Q, -(f[n - 1] + 2.0 * r_d * t_o.powi(2 * m as i32 - 3))));
    let qn = LinearForm::from_terms(basis, &qn_terms)?;
    out.push(("probe output q_N^out".into(), run.output(n, Axis::Q).max_scaled_diff(&qn)?));
    if n == 4 {
        let qn2 = LinearForm::from_terms(basis, &qn_alt)?;
        out.push((
            "probe output q_N^out, tetrapartite q_A coefficient".into(),
            run.output(n, Axis::Q).max_scaled_diff(&qn2)?,
        ));
    }
    let pn = LinearForm::from_terms(basis, &[(T(n), Axis::P, 1.0), (B, Axis::P, g[n - 1])])?;
    out.push(("probe output p_N^out".into(), run.output(n, Axis::P).max_scaled_diff(&pn)?));
    Ok(out)
}

/// Ideal QND map for a signal-by-probe gain matrix: signals keep `q` and
/// take `p_j - Σ_k G_jk p_k`; probes keep `p` and take `q_k + Σ_j G_jk q_j`.
/// Signals are the first `G.nrows()` modes.
pub fn ideal_qnd_map(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("QND gains must be finite".into()));
    }
    let (ns, np) = g.shape();
    let n = ns + np;
    let mut s = DMatrix::identity(2 * n, 2 * n);
    for j in 0..ns {
        for k in 0..np {
            let probe = ns + k;
            s[(2 * j + 1, 2 * probe + 1)] = -g[(j, k)];
            s[(2 * probe, 2 * j)] = g[(j, k)];
        }
    }
    Ok(s)
}

/// Ideal map for the single-probe coupling realised by the scheme.
pub fn scheme_ideal_map(table: &CoefficientTable) -> Result<DMatrix<f64>> {
    ideal_qnd_map(&DMatrix::from_column_slice(table.big_g.len(), 1, &table.big_g))
}

/// Targets followed by ancilla `A` squeezed in `q` and `B` squeezed in `p`.
pub fn joint_input_state(config: &SchemeConfig) -> Result<GaussianState> {
    GaussianState::tensor(&[
        config.input.clone(),
        GaussianState::squeezed(config.s_a, Axis::Q)?,
        GaussianState::squeezed(config.s_b, Axis::P)?,
    ])
}

/// Gaussian engine, analytic: evaluates the output forms and readouts
/// against the joint input covariance.
pub fn run_analytic(config: &SchemeConfig) -> Result<SchemeRun> {
    let mut run = run_heisenberg(config)?;
    let joint = joint_input_state(config)?;
    let rows = run.output_matrix();
    let offset = DVector::from_iterator(
        rows.nrows(),
        run.outputs.iter().flat_map(|f| f.iter().map(LinearForm::constant)),
    );
    run.output_state = Some(joint.linear_image(&rows, &offset)?);
    run.readout_variances = Some((
        config.k_a * joint.quad_variance(&run.readout_pa)?,
        config.k_b * joint.quad_variance(&run.readout_qb)?,
    ));
    Ok(run)
}

/// Empirical output statistics from sampled measurement records.
#[derive(Clone, Debug, Serialize)]
pub struct McSummary {
    pub n_samples: usize,
    pub seed: u64,
    /// Empirical output mean, interleaved target order.
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    /// Sample covariance of the conditional means plus the conditional covariance.
    pub cov: Vec<Vec<f64>>,
    pub cov_se: Vec<Vec<f64>>,
    /// Outcome-independent covariance left after conditioning and feedforward.
    pub conditional_cov: Vec<Vec<f64>>,
    /// Smallest symplectic eigenvalue met along the first trajectory.
    pub min_symplectic_eigenvalue: f64,
}

const MC_CHUNK: usize = 1024;

/// Gaussian engine, sampled: per trajectory, measure `p_A` then `q_B` on the
/// post-cascade state and displace the targets by gain × outcome.
/// Results depend only on `(config, n_samples, seed)`, not on thread count.
pub fn run_monte_carlo(config: &SchemeConfig, n_samples: usize, seed: u64) -> Result<McSummary> {
    if n_samples == 0 {
        return Err(Error::Input("Monte Carlo needs at least one sample".into()));
    }
    let table = coefficient_table(config)?;
    let (phi, gamma) = match &config.gains {
        Gains::Auto => (table.phi.clone(), table.gamma.clone()),
        Gains::Manual { phi, gamma } => (phi.clone(), gamma.clone()),
    };
    let reg = cascade(config.n, config.m, config.t_o, table.t_d, config.variant)?;
    let post = joint_input_state(config)?.apply_symplectic(&reg.matrix(), None)?;
    let n = config.n;
    let (mode_a, mode_b) = (n, n + 1);
    let targets: Vec<usize> = (0..n).collect();

    let trajectory = |rng: &mut ChaCha8Rng| -> Result<(GaussianState, GaussianState)> {
        let (rec_a, s1) = post.homodyne_measure(mode_a, Axis::P, rng)?;
        let (rec_b, s2) = s1.homodyne_measure(mode_b, Axis::Q, rng)?;
        let mut st = s2;
        for j in 0..n {
            st = st
                .displace(j, Axis::Q, phi[j] * rec_b.outcome)?
                .displace(j, Axis::P, gamma[j] * rec_a.outcome)?;
        }
        Ok((s1, st.marginal(&targets)?))
    };

    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<Vec<DVector<f64>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            (0..len)
                .map(|_| trajectory(&mut rng).map(|(_, s)| s.mean().clone()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let means: Vec<DVector<f64>> = chunks.into_iter().flatten().collect();

    let mut probe_rng = ChaCha8Rng::seed_from_u64(seed);
    probe_rng.set_stream(u64::MAX);
    let (mid, last) = trajectory(&mut probe_rng)?;
    let min_nu = [post.min_symplectic_eigenvalue(), mid.min_symplectic_eigenvalue(), last.min_symplectic_eigenvalue()]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let cond = last.cov().clone();

    let d = 2 * n;
    let ns = n_samples as f64;
    let mean = means.iter().fold(DVector::zeros(d), |acc, x| acc + x) / ns;
    let mut sample = DMatrix::<f64>::zeros(d, d);
    for x in &means {
        let dx = x - &mean;
        sample += &dx * dx.transpose();
    }
    // A single trajectory has no spread estimate; its standard errors are infinite.
    let (sample, cov_se, mean_se) = if n_samples > 1 {
        let sample = sample / (ns - 1.0);
        let cov_se = DMatrix::from_fn(d, d, |i, j| {
            ((sample[(i, i)] * sample[(j, j)] + sample[(i, j)].powi(2)) / (ns - 1.0)).sqrt()
        });
        let mean_se = DVector::from_fn(d, |i, _| (sample[(i, i)] / ns).sqrt());
        (sample, cov_se, mean_se)
    } else {
        (sample, DMatrix::from_element(d, d, f64::INFINITY), DVector::from_element(d, f64::INFINITY))
    };
    let cov = &sample + &cond;
    let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(McSummary {
        n_samples,
        seed,
        mean: mean.iter().copied().collect(),
        mean_se: mean_se.iter().copied().collect(),
        cov: rows(&cov),
        cov_se: rows(&cov_se),
        conditional_cov: rows(&cond),
        min_symplectic_eigenvalue: min_nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use ModeLabel::{AncillaA as A, AncillaB as B, Target as T};

    fn cfg(n: usize, m: usize, t_o: f64, v: Variant) -> SchemeConfig {
        SchemeConfig::new(n, m, t_o, v).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    #[test]
    fn config_validation() {
        assert!(SchemeConfig::new(1, 1, 0.5, Variant::UniformLast).is_err());
        assert!(SchemeConfig::new(3, 3, 0.5, Variant::UniformLast).is_err());
        assert!(SchemeConfig::new(3, 0, 0.5, Variant::UniformLast).is_err());
        assert!(SchemeConfig::new(3, 2, 1.0, Variant::UniformLast).is_err());
        assert!(SchemeConfig::new(33, 2, 0.5, Variant::UniformLast).is_err());
        let c = cfg(3, 2, 0.8, Variant::UniformLast);
        assert!(c.clone().with_input(GaussianState::vacuum(4).unwrap()).is_err());
        assert!(c.with_gains(Gains::Manual { phi: vec![0.0; 2], gamma: vec![0.0; 3] }).is_err());
    }

    #[test]
    fn cascade_order_and_coefficients() {
        let steps = cascade_steps(4, 2, 0.8, 0.5, Variant::UniformLast);
        let order: Vec<(ModeLabel, usize)> = steps.iter().map(|s| (s.0, s.1)).collect();
        assert_eq!(order, vec![(A, 1), (A, 2), (B, 4), (B, 3), (B, 2), (B, 1), (A, 3), (A, 4)]);
        let r_d = (1.0f64 - 0.25).sqrt();
        assert_eq!((steps[2].2, steps[2].3), (0.5, r_d));
        assert_eq!((steps[7].2, steps[7].3), (0.5, -r_d));
        let alt = cascade_steps(3, 2, 0.8, 0.5, Variant::AltBN);
        assert_eq!(alt[2].2, 0.8);
        assert!((alt[2].3 - 0.6).abs() < 1e-15);
        assert_eq!((alt[5].2, alt[5].3), (0.5, -r_d));
        // Targets j <= m meet A first, targets j > m meet B first.
        for j in 1..=4 {
            let first = order.iter().find(|s| s.1 == j).unwrap().0;
            assert_eq!(first, if j <= 2 { A } else { B });
        }
    }

    #[test]
    fn order_of_independent_sweeps_is_irrelevant() {
        // A and B never share a splitter, so interleaving the first two sweeps
        // in the opposite order gives the same register.
        let (n, m, t_o, t_d) = (5, 2, 0.7, 0.3);
        let steps = cascade_steps(n, m, t_o, t_d, Variant::UniformLast);
        let mut swapped = steps.clone();
        swapped[..n].rotate_left(m);
        let run = |s: &[(ModeLabel, usize, f64, f64)]| {
            let mut reg = ModeRegister::identity(Basis::new(n).unwrap());
            for &(anc, j, t, r) in s {
                reg = reg.apply_beamsplitter(T(j), anc, t, r).unwrap();
            }
            reg
        };
        let (a, b) = (run(&steps), run(&swapped));
        assert!((a.matrix() - b.matrix()).amax() < 1e-15);
    }

    #[test]
    fn transparent_cascade_is_identity() {
        let t_o = 1.0 - 1e-9;
        let reg = cascade(4, 2, t_o, t_o, Variant::UniformLast).unwrap();
        let dev = (reg.matrix() - DMatrix::<f64>::identity(12, 12)).amax();
        assert!(dev < 1e-4, "{dev}");
    }

    #[test]
    fn extended_cascade_matches_linear_form_cascade() {
        for variant in [Variant::UniformLast, Variant::AltBN] {
            let (n, m, t_o, t_d) = (5, 3, 0.77, 0.41);
            let mut reg = ModeRegister::identity(Basis::new(n).unwrap());
            for (anc, j, t, r) in cascade_steps(n, m, t_o, t_d, variant) {
                reg = reg.apply_beamsplitter(T(j), anc, t, r).unwrap();
            }
            let fast = cascade(n, m, t_o, t_d, variant).unwrap();
            assert!((reg.matrix() - fast.matrix()).amax() < 1e-15);
            let x = mode_transfer(n, m, t_o, t_d, variant);
            let mat = fast.matrix();
            for i in 0..n + 2 {
                for j in 0..n + 2 {
                    assert_eq!(mat[(2 * i, 2 * j)], f64::from(x[i][j]));
                    assert_eq!(mat[(2 * i + 1, 2 * j + 1)], f64::from(x[i][j]));
                    assert_eq!(mat[(2 * i, 2 * j + 1)], 0.0);
                }
            }
        }
    }

    #[test]
    fn compatibility_closed_forms() {
        for &t_o in &[0.3f64, 0.6, 0.8, 0.95] {
            let t2 = t_o * t_o;
            let cases = [
                (3, 2, Variant::UniformLast, t2),
                (4, 3, Variant::UniformLast, t2 * t_o),
                (4, 2, Variant::UniformLast, t2 / (2.0 - t2).sqrt()),
                (3, 2, Variant::AltBN, t_o / (t2 + (1.0 + t2) * (1.0 - t2 * t2)).sqrt()),
            ];
            for (n, m, v, want) in cases {
                let got = solve_compatibility(n, m, t_o, v).unwrap();
                assert!((got - want).abs() < 1e-12, "{n} {m} {v:?} {t_o}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn alternative_setup_roots_beyond_three_modes() {
        let t = solve_compatibility(4, 3, 0.8, Variant::AltBN).unwrap();
        assert!((t - 0.5453).abs() < 1e-3, "{t}");
        let t = solve_compatibility(5, 2, 0.8, Variant::AltBN).unwrap();
        assert!((t - 0.4437).abs() < 1e-3, "{t}");
        assert!(matches!(closed_form_td(4, 3, 0.8, Variant::AltBN), Err(Error::FormulaUnavailable(_))));
    }

    #[test]
    fn perturbed_td_breaks_the_split_bracket() {
        for (n, m) in [(3, 2), (4, 2), (5, 1), (6, 4)] {
            let t_d = solve_compatibility(n, m, 0.8, Variant::UniformLast).unwrap();
            let at = readout_brackets(&cascade(n, m, 0.8, t_d, Variant::UniformLast).unwrap()).unwrap();
            let off = readout_brackets(&cascade(n, m, 0.8, t_d + 0.01, Variant::UniformLast).unwrap()).unwrap();
            assert!(at.target.abs() < 1e-12 && at.ancilla.abs() < 1e-12 && at.full.abs() < 1e-12);
            assert!(off.target.abs() > 1e-4, "{off:?}");
            assert!((off.target + off.ancilla).abs() < 1e-12);
        }
    }

    #[test]
    fn tripartite_coefficients() {
        let t_o = 0.8;
        let tab = coefficient_table(&cfg(3, 2, t_o, Variant::UniformLast)).unwrap();
        let (t_d, r_d) = (tab.t_d, tab.r_d);
        assert!((tab.g[2] - r_d / t_d).abs() < 1e-12);
        assert!((tab.f[2] + r_d / (t_o * t_o)).abs() < 1e-12);
        assert!(tab.fg_sum().abs() < 1e-12 * tab.fg_scale());
        let tab4 = coefficient_table(&cfg(4, 3, t_o, Variant::UniformLast)).unwrap();
        assert!((tab4.f[3] + tab4.r_d / t_o.powi(3)).abs() < 1e-12);
        assert!((tab4.g[3] - tab4.r_d / tab4.t_d).abs() < 1e-12);
    }

    #[test]
    fn tripartite_readouts_literal() {
        let t_o: f64 = 0.85;
        let run = run_heisenberg(&cfg(3, 2, t_o, Variant::UniformLast)).unwrap();
        let (t_d, r_d) = (run.table.t_d, run.table.r_d);
        let r_o = (1.0 - t_o * t_o).sqrt();
        let t2 = t_o * t_o;
        let basis = Basis::new(3).unwrap();
        let qb = LinearForm::from_terms(basis, &[
            (T(1), Axis::Q, -r_o * t2 * t_o),
            (T(2), Axis::Q, -r_o * t2),
            (T(3), Axis::Q, -r_d * t2),
            (A, Axis::Q, -(1.0 - t2 * t2)),
            (B, Axis::Q, t_d * t2),
        ]).unwrap();
        let pa = LinearForm::from_terms(basis, &[
            (T(1), Axis::P, -r_o * t_d * t_o),
            (T(2), Axis::P, -r_o * t_d),
            (T(3), Axis::P, r_d * t_d),
            (A, Axis::P, t_d * t2),
            (B, Axis::P, r_d * r_d),
        ]).unwrap();
        assert!(run.readout_qb.approx_eq(&qb, 1e-12));
        assert!(run.readout_pa.approx_eq(&pa, 1e-12));
    }

    #[test]
    fn tripartite_outputs_literal() {
        let t_o: f64 = 0.9;
        let run = run_heisenberg(&cfg(3, 2, t_o, Variant::UniformLast)).unwrap();
        let (t_d, r_d) = (run.table.t_d, run.table.r_d);
        let r_o = (1.0 - t_o * t_o).sqrt();
        let k = r_d * r_d - t_d * t_d;
        let basis = Basis::new(3).unwrap();
        let lf = |terms: &[(ModeLabel, Axis, f64)]| LinearForm::from_terms(basis, terms).unwrap();
        let want = [
            [
                lf(&[(T(1), Axis::Q, 1.0), (A, Axis::Q, r_o / t_o)]),
                lf(&[(T(1), Axis::P, 1.0), (T(3), Axis::P, -2.0 * r_o * r_d * t_o), (B, Axis::P, -r_o * t_o / t_d * k)]),
            ],
            [
                lf(&[(T(2), Axis::Q, 1.0), (A, Axis::Q, r_o / (t_o * t_o))]),
                lf(&[(T(2), Axis::P, 1.0), (T(3), Axis::P, -2.0 * r_o * r_d), (B, Axis::P, -r_o / t_d * k)]),
            ],
            [
                lf(&[
                    (T(3), Axis::Q, 1.0),
                    (T(1), Axis::Q, 2.0 * r_o * r_d * t_o),
                    (T(2), Axis::Q, 2.0 * r_o * r_d),
                    (A, Axis::Q, r_d / (t_o * t_o) * (1.0 - 2.0 * t_o.powi(4))),
                ]),
                lf(&[(T(3), Axis::P, 1.0), (B, Axis::P, r_d / t_d)]),
            ],
        ];
        for j in 0..3 {
            for a in 0..2 {
                let d = run.outputs[j][a].max_abs_diff(&want[j][a]).unwrap();
                assert!(d < 1e-12, "mode {} axis {a}: {d}", j + 1);
            }
        }
    }

    #[test]
    fn alternative_setup_literal() {
        let t_o: f64 = 0.8;
        let run = run_heisenberg(&cfg(3, 2, t_o, Variant::AltBN)).unwrap();
        let (t_d, r_d) = (run.table.t_d, run.table.r_d);
        let r_o = (1.0 - t_o * t_o).sqrt();
        let t2 = t_o * t_o;
        let basis = Basis::new(3).unwrap();
        let lf = |terms: &[(ModeLabel, Axis, f64)]| LinearForm::from_terms(basis, terms).unwrap();
        let qb = lf(&[
            (T(1), Axis::Q, -r_o * t2 * t_o),
            (T(2), Axis::Q, -r_o * t2),
            (T(3), Axis::Q, -r_o * t2),
            (A, Axis::Q, -(1.0 - t2 * t2)),
            (B, Axis::Q, t2 * t_o),
        ]);
        let pa = lf(&[
            (T(1), Axis::P, -r_o * t_d * t_o),
            (T(2), Axis::P, -r_o * t_d),
            (T(3), Axis::P, t_o * r_d),
            (A, Axis::P, t2 * t_d),
            (B, Axis::P, r_o * r_d),
        ]);
        assert!(run.readout_qb.approx_eq(&qb, 1e-12));
        assert!(run.readout_pa.approx_eq(&pa, 1e-12));
        let x = r_o * t_d + t_o * r_d;
        let y = r_o * r_d - t_o * t_d;
        let signals = [
            [
                lf(&[(T(1), Axis::Q, 1.0), (A, Axis::Q, r_o / t_o)]),
                lf(&[(T(1), Axis::P, 1.0), (T(3), Axis::P, -r_o * t_o / t_d * x), (B, Axis::P, -r_o * t_o / t_d * y)]),
            ],
            [
                lf(&[(T(2), Axis::Q, 1.0), (A, Axis::Q, r_o / t2)]),
                lf(&[(T(2), Axis::P, 1.0), (T(3), Axis::P, -r_o / t_d * x), (B, Axis::P, -r_o / t_d * y)]),
            ],
        ];
        for j in 0..2 {
            for a in 0..2 {
                assert!(run.outputs[j][a].approx_eq(&signals[j][a], 1e-12), "mode {} axis {a}", j + 1);
            }
        }
        // The probe picks up a local squeeze: q_3 scales by λ and p_3 by 1/λ.
        let lambda = run.output(3, Axis::Q).coeff(T(3), Axis::Q).unwrap();
        let inv = run.output(3, Axis::P).coeff(T(3), Axis::P).unwrap();
        assert!((lambda * inv - 1.0).abs() < 1e-12);
        assert!((lambda - 1.0).abs() > 0.1);
        for j in 1..=2 {
            assert!((run.table.big_g[j - 1] + run.output(j, Axis::P).coeff(T(3), Axis::P).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_deviations_small() {
        for (n, m) in [(3, 2), (4, 2), (4, 3), (5, 1), (6, 3), (8, 5)] {
            for &t_o in &[0.3, 0.7, 0.95] {
                let c = cfg(n, m, t_o, Variant::UniformLast);
                let run = run_heisenberg(&c).unwrap();
                for (what, d) in closed_form_deviations(&c, &run).unwrap() {
                    assert!(d < 1e-12, "{n} {m} {t_o} {what}: {d}");
                }
            }
        }
    }

    /// Stage-2 target forms written out in closed form.
    fn stage2_closed(n: usize, m: usize, t_o: f64, t_d: f64, j: usize) -> Vec<(ModeLabel, f64)> {
        let r_o = (1.0 - t_o * t_o).sqrt();
        let r_d = (1.0 - t_d * t_d).sqrt();
        let p = |e: i32| t_o.powi(e);
        let (ni, mi, ji) = (n as i32, m as i32, j as i32);
        let mut terms = Vec::new();
        if j <= m {
            terms.push((T(j), 1.0));
            for i in 1..=mi {
                terms.push((T(i as usize), -r_o * r_o * p(2 * mi - ji - i)));
            }
            for i in mi + 1..ni {
                terms.push((T(i as usize), -r_o * r_o * p(-ji - 1 + i)));
            }
            terms.push((T(n), -r_o * r_d * p(ni - ji - 1)));
            terms.push((A, r_o * p(2 * mi - ji)));
            terms.push((B, r_o * t_d * p(ni - ji - 1)));
        } else if j < n {
            terms.push((T(j), 1.0));
            for i in 1..=mi {
                terms.push((T(i as usize), -r_o * r_o * p(ji - 1 - i)));
            }
            for i in mi + 1..ni {
                terms.push((T(i as usize), -r_o * r_o * p(ji - 2 * (mi + 1) + i)));
            }
            terms.push((T(n), -r_o * r_d * p(ni + ji - 2 * (mi + 1))));
            terms.push((A, r_o * p(ji - 1)));
            terms.push((B, r_o * t_d * p(ni + ji - 2 * (mi + 1))));
        } else {
            let k = 2.0 - p(2 * (ni - mi - 1));
            terms.push((T(n), 1.0 - r_d * r_d * k));
            for i in 1..=mi {
                terms.push((T(i as usize), r_o * r_d * p(ni - 1 - i)));
            }
            for i in mi + 1..ni {
                terms.push((T(i as usize), r_o * r_d * p(ni - 2 * (mi + 1) + i)));
            }
            terms.push((A, -r_d * p(ni - 1)));
            terms.push((B, r_d * t_d * k));
        }
        terms
    }

    #[test]
    fn zero_gains_leave_stage2_forms() {
        for (n, m) in [(3, 2), (4, 2), (5, 3)] {
            let t_o = 0.75;
            let c = cfg(n, m, t_o, Variant::UniformLast)
                .with_gains(Gains::Manual { phi: vec![0.0; n], gamma: vec![0.0; n] })
                .unwrap();
            let run = run_heisenberg(&c).unwrap();
            let basis = c.basis();
            for j in 1..=n {
                for axis in Axis::BOTH {
                    let terms: Vec<_> = stage2_closed(n, m, t_o, run.table.t_d, j)
                        .into_iter()
                        .map(|(mode, c)| (mode, axis, c))
                        .collect();
                    let want = LinearForm::from_terms(basis, &terms).unwrap();
                    let d = run.output(j, axis).max_abs_diff(&want).unwrap();
                    assert!(d < 1e-12, "N={n} m={m} j={j} {axis}: {d}");
                }
            }
        }
    }

    #[test]
    fn qnd_structure_of_outputs() {
        let c = cfg(5, 2, 0.8, Variant::UniformLast);
        let run = run_heisenberg(&c).unwrap();
        for j in 1..5 {
            for i in 1..=5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((run.output(j, Axis::Q).coeff(T(i), Axis::Q).unwrap() - want).abs() < 1e-12);
            }
            let g = run.output(j, Axis::P).coeff(T(5), Axis::P).unwrap();
            assert!((g + run.table.big_g[j - 1]).abs() < 1e-12);
        }
        for i in 1..=5 {
            let want = if i == 5 { 1.0 } else { 0.0 };
            assert!((run.output(5, Axis::P).coeff(T(i), Axis::P).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ideal_map_cases() {
        assert_eq!(ideal_qnd_map(&DMatrix::zeros(2, 1)).unwrap(), DMatrix::identity(6, 6));
        let g = DMatrix::from_column_slice(2, 1, &[0.4, -1.3]);
        let s = ideal_qnd_map(&g).unwrap();
        // Single-probe form: p_j -> p_j - G_j p_N, q_N -> q_N + Σ G_j q_j.
        assert_eq!(s[(1, 5)], -0.4);
        assert_eq!(s[(3, 5)], 1.3);
        assert_eq!(s[(4, 0)], 0.4);
        assert_eq!(s[(4, 2)], -1.3);
        assert!(crate::gaussian::symplectic_defect(&s).unwrap() < 1e-15);
    }

    #[test]
    fn ideal_map_on_vacuum_probe_variance() {
        let g = [0.3, 0.9, -0.5];
        let s = ideal_qnd_map(&DMatrix::from_column_slice(3, 1, &g)).unwrap();
        let out = GaussianState::vacuum(4).unwrap().apply_symplectic(&s, None).unwrap();
        let want = 1.0 + g.iter().map(|x| x * x).sum::<f64>();
        assert!((out.cov()[(6, 6)] - want).abs() < 1e-12);
    }

    #[test]
    fn analytic_vacuum_variances() {
        let c = cfg(3, 2, 0.8, Variant::UniformLast).with_ancilla_squeezing(0.0, 0.0);
        let run = run_analytic(&c).unwrap();
        let st = run.output_state.as_ref().unwrap();
        for j in 0..2 {
            assert!(rel(st.cov()[(2 * j, 2 * j)], 1.0 + run.table.f[j].powi(2)) < 1e-12);
        }
        assert!(st.is_physical());
    }

    #[test]
    fn analytic_large_squeezing_preserves_signal_q() {
        let input = InputFamily::Ghz.state(3, 0.7).unwrap();
        let mut prev = f64::INFINITY;
        for db in [10.0, 30.0, 60.0, 90.0] {
            let s = db_to_squeezing(db);
            let c = cfg(3, 2, 0.8, Variant::UniformLast)
                .with_input(input.clone())
                .unwrap()
                .with_ancilla_squeezing(s, s);
            let st = run_analytic(&c).unwrap().output_state.unwrap();
            let d = (st.cov()[(0, 0)] - input.cov()[(0, 0)]).abs();
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn readout_variance_decomposition() {
        let input = InputFamily::EprType.state(3, 0.5).unwrap();
        let (s_a, s_b) = (0.4, 0.9);
        let c = cfg(3, 2, 0.8, Variant::UniformLast)
            .with_input(input.clone())
            .unwrap()
            .with_ancilla_squeezing(s_a, s_b);
        let run = run_analytic(&c).unwrap();
        let tab = &run.table;
        let n = 3;
        let cst = tab.t_d * 0.8f64.powi(n as i32 - 1);
        let mut a = vec![0.0; 2 * n];
        for j in 0..n {
            a[2 * j + 1] = if j == n - 1 { -tab.f[j] } else { tab.f[j] };
        }
        let target = cst * cst * input.variance_of(&a).unwrap();
        let anc = cst * cst * (2.0 * s_a).exp() + (1.0 - 0.8f64.powi(4)).powi(2) * (-2.0 * s_b).exp();
        let (v_pa, _) = run.readout_variances.unwrap();
        assert!(rel(v_pa, target + anc) < 1e-12);
    }

    #[test]
    fn ideal_limit_matches_qnd_map() {
        for (n, m) in [(3, 2), (4, 2), (4, 3)] {
            for fam in [InputFamily::Vacuum, InputFamily::Ghz] {
                let c = cfg(n, m, 0.85, Variant::UniformLast).with_family(fam, 0.8).unwrap();
                let run = run_analytic(&c).unwrap();
                let ideal = c.input.apply_symplectic(&scheme_ideal_map(&run.table).unwrap(), None).unwrap();
                let got = run.output_state.unwrap();
                let worst = got.cov().iter().zip(ideal.cov().iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
                assert!(worst < 1e-3, "{n} {m} {fam:?}: {worst}");
            }
        }
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let c = cfg(3, 2, 0.8, Variant::UniformLast).with_family(InputFamily::Ghz, 1.0).unwrap();
        let a = run_monte_carlo(&c, 1, 42).unwrap();
        let b = run_monte_carlo(&c, 1, 42).unwrap();
        assert_eq!(a.mean, b.mean);
        let c2 = run_monte_carlo(&c, 1, 43).unwrap();
        assert_ne!(a.mean, c2.mean);
        assert!(a.cov_se.iter().flatten().all(|x| x.is_infinite()));
    }

    #[test]
    fn monte_carlo_agrees_with_analytic_small() {
        let s = db_to_squeezing(10.0);
        let c = cfg(3, 2, 0.8, Variant::UniformLast)
            .with_family(InputFamily::Ghz, 0.6)
            .unwrap()
            .with_ancilla_squeezing(s, s);
        let mc = run_monte_carlo(&c, 20_000, 5).unwrap();
        let an = run_analytic(&c).unwrap().output_state.unwrap();
        for i in 0..6 {
            assert!(mc.mean[i].abs() < 5.0 * mc.mean_se[i] + 1e-12);
            for j in 0..6 {
                let d = (mc.cov[i][j] - an.cov()[(i, j)]).abs();
                assert!(d < 5.0 * mc.cov_se[i][j] + 1e-9, "({i},{j}) {d} se {}", mc.cov_se[i][j]);
            }
        }
    }

    #[test]
    fn input_families() {
        let g = InputFamily::Ghz.state(3, 0.9).unwrap();
        let sum_q = g.variance_of(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((sum_q - 3.0 * (-1.8f64).exp()).abs() < 1e-12);
        let e = InputFamily::EprType.state(4, 0.9).unwrap();
        assert!((e.cov()[(6, 6)] - 1.8f64.cosh()).abs() < 1e-12);
        assert_eq!(InputFamily::Vacuum.state(3, 2.0).unwrap(), GaussianState::vacuum(3).unwrap());
    }

    proptest! {
        #[test]
        fn compatibility_everywhere(n in 2usize..9, m_frac in 0.0..1.0f64, t_o in 0.05..0.999f64) {
            let m = 1 + ((n - 1) as f64 * m_frac) as usize % (n - 1);
            let t_d = solve_compatibility(n, m, t_o, Variant::UniformLast).unwrap();
            let closed = closed_form_td(n, m, t_o, Variant::UniformLast).unwrap();
            prop_assert!((t_d - closed).abs() <= 1e-12 * closed.max(1e-300) + 1e-300 || (t_d - closed).abs() < 1e-15);
            let b = readout_brackets(&cascade(n, m, t_o, t_d, Variant::UniformLast).unwrap()).unwrap();
            prop_assert!(b.full.abs() < 1e-12 && b.target.abs() < 1e-12);
            let tab = coefficient_table(&SchemeConfig::new(n, m, t_o, Variant::UniformLast).unwrap()).unwrap();
            prop_assert!(tab.fg_sum().abs() <= 1e-12 * tab.fg_scale().max(1.0));
        }

        #[test]
        fn ideal_map_is_symplectic(g in prop::collection::vec(-5.0..5.0f64, 6), ns in 1usize..4) {
            let np = 6 / ns;
            let gm = DMatrix::from_fn(ns, np.min(6), |i, j| g[(i * np + j) % 6]);
            let s = ideal_qnd_map(&gm).unwrap();
            prop_assert!(crate::gaussian::symplectic_defect(&s).unwrap() < 1e-12);
        }
    }
}
