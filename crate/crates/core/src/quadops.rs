//! Heisenberg-picture quadrature algebra.
//!
//! Every quadrature that appears in the scheme is a real linear combination of
//! the *input* quadratures of the N target modes and the two ancillas. Passive
//! optics and feedforward only ever produce such combinations, so a dense
//! coefficient vector over the fixed `(q_1, p_1, ..., q_N, p_N, q_A, p_A, q_B, p_B)`
//! basis is a complete description. The symplectic bracket between two forms is
//! the c-number `[u, v] / i`, which is what compatibility and symplecticity are
//! checked against.

use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Canonical bracket constant: `[q, p] = KAPPA * i`, vacuum variance 1.
pub const KAPPA: f64 = 2.0;

/// Absolute tolerance for coefficient-level comparisons.
pub const COEFF_TOL: f64 = 1e-12;

/// Largest supported number of target modes.
pub const MAX_TARGETS: usize = 32;

/// A mode of the scheme. Targets are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ModeLabel {
    Target(usize),
    AncillaA,
    AncillaB,
}

impl ModeLabel {
    pub fn is_ancilla(self) -> bool {
        !matches!(self, ModeLabel::Target(_))
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeLabel::Target(j) => write!(f, "{j}"),
            ModeLabel::AncillaA => f.write_str("A"),
            ModeLabel::AncillaB => f.write_str("B"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Axis {
    Q,
    P,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::Q, Axis::P];

    pub fn offset(self) -> usize {
        match self {
            Axis::Q => 0,
            Axis::P => 1,
        }
    }

    pub fn conjugate(self) -> Axis {
        match self {
            Axis::Q => Axis::P,
            Axis::P => Axis::Q,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Q => "q",
            Axis::P => "p",
        })
    }
}

/// The input-mode basis shared by every form of one scheme instance:
/// targets `1..=N` occupy mode indices `0..N`, then `A`, then `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Basis {
    n_targets: usize,
}

impl Basis {
    pub fn new(n_targets: usize) -> Result<Self> {
        if n_targets == 0 || n_targets > MAX_TARGETS {
            return Err(Error::TargetCount(n_targets));
        }
        Ok(Basis { n_targets })
    }

    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    /// Targets plus the two ancillas.
    pub fn n_modes(&self) -> usize {
        self.n_targets + 2
    }

    /// Length of a coefficient vector.
    pub fn dim(&self) -> usize {
        2 * self.n_modes()
    }

    pub fn mode_index(&self, mode: ModeLabel) -> Result<usize> {
        match mode {
            ModeLabel::Target(j) if (1..=self.n_targets).contains(&j) => Ok(j - 1),
            ModeLabel::Target(_) => Err(Error::ModeOutOfRange(mode, self.n_targets)),
            ModeLabel::AncillaA => Ok(self.n_targets),
            ModeLabel::AncillaB => Ok(self.n_targets + 1),
        }
    }

    pub fn label(&self, index: usize) -> ModeLabel {
        match index {
            i if i < self.n_targets => ModeLabel::Target(i + 1),
            i if i == self.n_targets => ModeLabel::AncillaA,
            i if i == self.n_targets + 1 => ModeLabel::AncillaB,
            i => panic!("mode index {i} outside basis with {} targets", self.n_targets),
        }
    }

    pub fn coord(&self, mode: ModeLabel, axis: Axis) -> Result<usize> {
        Ok(2 * self.mode_index(mode)? + axis.offset())
    }

    pub fn labels(&self) -> impl Iterator<Item = ModeLabel> + '_ {
        (0..self.n_modes()).map(|i| self.label(i))
    }

    /// Coordinate names in storage order, e.g. `q1, p1, ..., qA, pA, qB, pB`.
    pub fn coord_names(&self) -> Vec<String> {
        self.labels()
            .flat_map(|m| Axis::BOTH.map(|a| format!("{a}{m}")))
            .collect()
    }
}

/// A quadrature written as `constant + Σ c_(mode,axis) x_(mode,axis)^in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearForm {
    basis: Basis,
    coeffs: Vec<f64>,
    constant: f64,
}

impl LinearForm {
    pub fn zero(basis: Basis) -> Self {
        LinearForm {
            basis,
            coeffs: vec![0.0; basis.dim()],
            constant: 0.0,
        }
    }

    /// Unit form on one input quadrature.
    pub fn basis_form(basis: Basis, mode: ModeLabel, axis: Axis) -> Result<Self> {
        let mut form = LinearForm::zero(basis);
        form.coeffs[basis.coord(mode, axis)?] = 1.0;
        Ok(form)
    }

    pub fn from_terms(basis: Basis, terms: &[(ModeLabel, Axis, f64)]) -> Result<Self> {
        let mut form = LinearForm::zero(basis);
        for &(mode, axis, c) in terms {
            form.coeffs[basis.coord(mode, axis)?] += c;
        }
        Ok(form)
    }

    pub fn from_coeffs(basis: Basis, coeffs: Vec<f64>, constant: f64) -> Result<Self> {
        if coeffs.len() != basis.dim() {
            return Err(Error::Dimension(format!(
                "{} coefficients for a basis of dimension {}",
                coeffs.len(),
                basis.dim()
            )));
        }
        Ok(LinearForm { basis, coeffs, constant })
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn coeff(&self, mode: ModeLabel, axis: Axis) -> Result<f64> {
        Ok(self.coeffs[self.basis.coord(mode, axis)?])
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn scaled(&self, a: f64) -> Self {
        LinearForm {
            basis: self.basis,
            coeffs: self.coeffs.iter().map(|c| a * c).collect(),
            constant: a * self.constant,
        }
    }

    /// Keeps only the coefficients whose mode satisfies `keep`.
    pub fn restrict(&self, keep: impl Fn(ModeLabel) -> bool) -> Self {
        let mut out = self.clone();
        for (i, c) in out.coeffs.iter_mut().enumerate() {
            if !keep(self.basis.label(i / 2)) {
                *c = 0.0;
            }
        }
        out
    }

    pub fn targets_part(&self) -> Self {
        self.restrict(|m| !m.is_ancilla())
    }

    pub fn ancilla_part(&self) -> Self {
        self.restrict(ModeLabel::is_ancilla)
    }

    /// Coefficients of the target modes on one axis, in target order.
    pub fn target_coeffs(&self, axis: Axis) -> Vec<f64> {
        (0..self.basis.n_targets())
            .map(|i| self.coeffs[2 * i + axis.offset()])
            .collect()
    }

    pub fn max_abs_diff(&self, other: &LinearForm) -> Result<f64> {
        self.check_basis(other)?;
        let d = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(d.max((self.constant - other.constant).abs()))
    }

    /// Largest coefficient deviation scaled by `max(1, |expected|)`.
    pub fn max_scaled_diff(&self, expected: &LinearForm) -> Result<f64> {
        self.check_basis(expected)?;
        Ok(self
            .coeffs
            .iter()
            .chain(std::iter::once(&self.constant))
            .zip(expected.coeffs.iter().chain(std::iter::once(&expected.constant)))
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max))
    }

    pub fn approx_eq(&self, other: &LinearForm, tol: f64) -> bool {
        self.max_abs_diff(other).is_ok_and(|d| d <= tol)
    }

    fn check_basis(&self, other: &LinearForm) -> Result<()> {
        if self.basis != other.basis {
            return Err(Error::BasisMismatch(
                self.basis.n_targets(),
                other.basis.n_targets(),
            ));
        }
        Ok(())
    }
}

/// Weighted sum `Σ w_i u_i`, constants included.
pub fn combine(terms: &[(f64, &LinearForm)]) -> Result<LinearForm> {
    let Some(&(_, first)) = terms.first() else {
        return Err(Error::Input("cannot combine an empty list of forms".into()));
    };
    let mut out = LinearForm::zero(first.basis);
    for &(w, form) in terms {
        out.check_basis(form)?;
        for (o, c) in out.coeffs.iter_mut().zip(&form.coeffs) {
            *o += w * c;
        }
        out.constant += w * form.constant;
    }
    Ok(out)
}

/// `[u, v] / i` for the canonical bracket `[q, p] = KAPPA i`.
///
/// Panics if the forms live on different bases.
pub fn bracket(u: &LinearForm, v: &LinearForm) -> f64 {
    assert_eq!(u.basis, v.basis, "bracket of forms over different bases");
    KAPPA
        * u.coeffs
            .chunks_exact(2)
            .zip(v.coeffs.chunks_exact(2))
            .map(|(a, b)| a[0] * b[1] - a[1] * b[0])
            .sum::<f64>()
}

/// Current `(q, p)` forms of every mode after some optical processing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeRegister {
    basis: Basis,
    forms: Vec<[LinearForm; 2]>,
}

impl ModeRegister {
    pub fn identity(basis: Basis) -> Self {
        let forms = basis
            .labels()
            .map(|m| {
                Axis::BOTH.map(|a| LinearForm::basis_form(basis, m, a).expect("label from basis"))
            })
            .collect();
        ModeRegister { basis, forms }
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn form(&self, mode: ModeLabel, axis: Axis) -> Result<&LinearForm> {
        Ok(&self.forms[self.basis.mode_index(mode)?][axis.offset()])
    }

    pub fn q(&self, mode: ModeLabel) -> Result<&LinearForm> {
        self.form(mode, Axis::Q)
    }

    pub fn p(&self, mode: ModeLabel) -> Result<&LinearForm> {
        self.form(mode, Axis::P)
    }

    /// Real beam splitter: `X_x <- t X_x + r X_y`, `X_y <- t X_y - r X_x`.
    pub fn apply_beamsplitter(&self, x: ModeLabel, y: ModeLabel, t: f64, r: f64) -> Result<Self> {
        if x == y {
            return Err(Error::SameMode(x));
        }
        let defect = t * t + r * r - 1.0;
        if !defect.is_finite() || defect.abs() > 1e-12 {
            return Err(Error::NonUnitary { t, r, defect });
        }
        let (ix, iy) = (self.basis.mode_index(x)?, self.basis.mode_index(y)?);
        let mut out = self.clone();
        for a in 0..2 {
            let (fx, fy) = (&self.forms[ix][a], &self.forms[iy][a]);
            out.forms[ix][a] = combine(&[(t, fx), (r, fy)])?;
            out.forms[iy][a] = combine(&[(t, fy), (-r, fx)])?;
        }
        Ok(out)
    }

    /// Adds `gain * measured` to one quadrature of `target`.
    pub fn apply_feedforward(
        &self,
        target: ModeLabel,
        axis: Axis,
        gain: f64,
        measured: &LinearForm,
    ) -> Result<Self> {
        let i = self.basis.mode_index(target)?;
        let mut out = self.clone();
        out.forms[i][axis.offset()] = combine(&[(1.0, &self.forms[i][axis.offset()]), (gain, measured)])?;
        Ok(out)
    }

    /// The linear map as a matrix: row `2k + a` holds the form of mode `k`, axis `a`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.basis.dim();
        DMatrix::from_fn(d, d, |row, col| self.forms[row / 2][row % 2].coeffs[col])
    }

    /// Replaces one form; the caller keeps the register canonical.
    pub fn with_form(mut self, mode: ModeLabel, axis: Axis, form: LinearForm) -> Result<Self> {
        if form.basis() != self.basis {
            return Err(Error::BasisMismatch(self.basis.n_targets(), form.basis().n_targets()));
        }
        let i = self.basis.mode_index(mode)?;
        self.forms[i][axis.offset()] = form;
        Ok(self)
    }

    /// Largest violation of the canonical brackets among all register forms.
    pub fn bracket_defect(&self) -> f64 {
        let all: Vec<&LinearForm> = self.forms.iter().flat_map(|f| f.iter()).collect();
        let mut worst: f64 = 0.0;
        for (i, u) in all.iter().enumerate() {
            for (j, v) in all.iter().enumerate().skip(i + 1) {
                let expected = if i % 2 == 0 && j == i + 1 { KAPPA } else { 0.0 };
                worst = worst.max((bracket(u, v) - expected).abs());
            }
        }
        worst
    }
}
