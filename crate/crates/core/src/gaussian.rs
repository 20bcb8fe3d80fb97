//! Gaussian states in the interleaved `(q_1, p_1, q_2, p_2, ...)` ordering,
//! normalised so that the vacuum has unit quadrature variance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadops::{Axis, LinearForm};

/// Covariance symmetry tolerance.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Lower slack on symplectic eigenvalues for a state to count as physical.
pub const PHYSICALITY_TOL: f64 = 1e-9;
/// Marginal variances below this are treated as zero when conditioning.
pub const PINV_THRESHOLD: f64 = 1e-12;
/// Default variance given to the unmeasured quadrature of a consumed mode.
pub const DEFAULT_NOISE_CAP: f64 = 1e12;

/// One homodyne detection: which quadrature of which mode, and what was seen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HomodyneRecord {
    pub mode: usize,
    pub axis: Axis,
    pub outcome: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    consumed: Vec<bool>,
    noise_cap: f64,
}

/// The symplectic form `⊕ [[0, 1], [-1, 0]]` on `n_modes` modes.
pub fn omega(n_modes: usize) -> DMatrix<f64> {
    let mut o = DMatrix::zeros(2 * n_modes, 2 * n_modes);
    for k in 0..n_modes {
        o[(2 * k, 2 * k + 1)] = 1.0;
        o[(2 * k + 1, 2 * k)] = -1.0;
    }
    o
}

/// `max |S Ω Sᵀ - Ω|`, or an error if `s` is not square with even size.
pub fn symplectic_defect(s: &DMatrix<f64>) -> Result<f64> {
    if !s.is_square() || !s.nrows().is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "symplectic matrix must be square of even size, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let o = omega(s.nrows() / 2);
    Ok((s * &o * s.transpose() - o).amax())
}

/// Phase rotation by `theta` on one mode: `q' = cos θ q + sin θ p`, `p' = -sin θ q + cos θ p`.
pub fn rotation(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, s, -s, c])
}

/// Real beam splitter acting on modes `x`, `y` of an `n_modes` register,
/// with the same convention as the Heisenberg engine.
pub fn beamsplitter_matrix(n_modes: usize, x: usize, y: usize, t: f64, r: f64) -> DMatrix<f64> {
    let mut s = DMatrix::identity(2 * n_modes, 2 * n_modes);
    for a in 0..2 {
        let (ix, iy) = (2 * x + a, 2 * y + a);
        s[(ix, ix)] = t;
        s[(ix, iy)] = r;
        s[(iy, iy)] = t;
        s[(iy, ix)] = -r;
    }
    s
}

impl GaussianState {
    /// Builds a state from raw parts after checking shape, symmetry and physicality.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let state = Self::unchecked(mean, cov)?;
        let asym = (&state.cov - state.cov.transpose()).amax();
        if asym > SYMMETRY_TOL * state.cov.amax().max(1.0) {
            return Err(Error::Asymmetric(asym));
        }
        state.check_physical()?;
        Ok(state)
    }

    fn unchecked(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || !d.is_multiple_of(2) || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean of length {d} with a {}x{} covariance",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Input("state contains non-finite entries".into()));
        }
        Ok(GaussianState {
            mean,
            cov,
            consumed: vec![false; d / 2],
            noise_cap: DEFAULT_NOISE_CAP,
        })
    }

    fn from_cov(cov: DMatrix<f64>) -> Self {
        let d = cov.nrows();
        Self::unchecked(DVector::zeros(d), cov).expect("factory covariance is well formed")
    }

    pub fn vacuum(n_modes: usize) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::Input("a state needs at least one mode".into()));
        }
        Ok(Self::from_cov(DMatrix::identity(2 * n_modes, 2 * n_modes)))
    }

    /// Single-mode squeezed vacuum with variance `e^{-2s}` on `axis`.
    pub fn squeezed(s: f64, axis: Axis) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::Input(format!("squeezing parameter {s} is not finite")));
        }
        let (lo, hi) = ((-2.0 * s).exp(), (2.0 * s).exp());
        let diag = match axis {
            Axis::Q => [lo, hi],
            Axis::P => [hi, lo],
        };
        Ok(Self::from_cov(DMatrix::from_diagonal(&DVector::from_row_slice(&diag))))
    }

    /// Thermal state with variance `v >= 1` on both quadratures of one mode.
    pub fn thermal(v: f64) -> Result<Self> {
        if !(v >= 1.0 && v.is_finite()) {
            return Err(Error::Unphysical(v));
        }
        Ok(Self::from_cov(DMatrix::identity(2, 2) * v))
    }

    pub fn two_mode_squeezed(s: f64) -> Result<Self> {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Input(format!("two-mode squeezing needs s >= 0, got {s}")));
        }
        let (c, sh) = ((2.0 * s).cosh(), (2.0 * s).sinh());
        let mut cov = DMatrix::identity(4, 4) * c;
        cov[(0, 2)] = sh;
        cov[(2, 0)] = sh;
        cov[(1, 3)] = -sh;
        cov[(3, 1)] = -sh;
        Ok(Self::from_cov(cov))
    }

    /// Continuous-variable GHZ state: `q_i - q_j` and `Σ p_j` squeezed.
    pub fn ghz_state(n: usize, s: f64) -> Result<Self> {
        if n < 2 || !s.is_finite() {
            return Err(Error::Input(format!("GHZ state needs N >= 2 and finite s, got N = {n}, s = {s}")));
        }
        let (up, down) = ((2.0 * s).exp(), (-2.0 * s).exp());
        let inv = 1.0 / n as f64;
        let mut cov = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                cov[(2 * i, 2 * j)] = inv * up + (delta - inv) * down;
                cov[(2 * i + 1, 2 * j + 1)] = inv * down + (delta - inv) * up;
            }
        }
        Ok(Self::from_cov(cov))
    }

    /// EPR-type state: mode 1 is one arm of a two-mode squeezed vacuum, the other
    /// arm is spread evenly over modes `2..=n` with vacuum in the idle ports.
    pub fn epr_type_state(n: usize, s: f64) -> Result<Self> {
        if n < 3 || !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Input(format!(
                "EPR-type state needs N >= 3 and s >= 0, got N = {n}, s = {s}"
            )));
        }
        let (c, sh) = ((2.0 * s).cosh(), (2.0 * s).sinh());
        let w = 1.0 / ((n - 1) as f64).sqrt();
        let mut cov = DMatrix::identity(2 * n, 2 * n);
        for a in 0..2 {
            let sign = if a == 0 { 1.0 } else { -1.0 };
            cov[(a, a)] = c;
            for i in 1..n {
                cov[(a, 2 * i + a)] = sign * sh * w;
                cov[(2 * i + a, a)] = sign * sh * w;
                for j in 1..n {
                    cov[(2 * i + a, 2 * j + a)] += (c - 1.0) * w * w;
                }
            }
        }
        Ok(Self::from_cov(cov))
    }

    /// Direct sum of independent states, in the given order.
    pub fn tensor(states: &[GaussianState]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Input("cannot tensor an empty list of states".into()));
        }
        let d: usize = states.iter().map(|s| s.dim()).sum();
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        let mut consumed = Vec::with_capacity(d / 2);
        let mut off = 0;
        for s in states {
            let k = s.dim();
            mean.rows_mut(off, k).copy_from(&s.mean);
            cov.view_mut((off, off), (k, k)).copy_from(&s.cov);
            consumed.extend_from_slice(&s.consumed);
            off += k;
        }
        Ok(GaussianState {
            mean,
            cov,
            consumed,
            noise_cap: states[0].noise_cap,
        })
    }

    pub fn with_noise_cap(mut self, cap: f64) -> Self {
        self.noise_cap = cap;
        self
    }

    pub fn n_modes(&self) -> usize {
        self.consumed.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn is_consumed(&self, mode: usize) -> bool {
        self.consumed.get(mode).copied().unwrap_or(false)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.n_modes() {
            return Err(Error::StateModeOutOfRange {
                index: mode,
                n_modes: self.n_modes(),
            });
        }
        Ok(())
    }

    /// `mean <- S mean + d`, `cov <- S cov Sᵀ`.
    ///
    /// `S` must be symplectic to `1e-10` relative to its largest squared entry.
    pub fn apply_symplectic(&self, s: &DMatrix<f64>, d: Option<&DVector<f64>>) -> Result<Self> {
        if s.nrows() != self.dim() {
            return Err(Error::Dimension(format!(
                "{}x{} symplectic matrix on a {}-mode state",
                s.nrows(),
                s.ncols(),
                self.n_modes()
            )));
        }
        let defect = symplectic_defect(s)?;
        if defect > 1e-10 * s.amax().powi(2).max(1.0) {
            return Err(Error::NotSymplectic(defect));
        }
        let mut mean = s * &self.mean;
        if let Some(d) = d {
            if d.len() != self.dim() {
                return Err(Error::Dimension(format!(
                    "displacement of length {} on a {}-mode state",
                    d.len(),
                    self.n_modes()
                )));
            }
            mean += d;
        }
        let cov = s * &self.cov * s.transpose();
        Ok(GaussianState {
            mean,
            cov: symmetrize(cov),
            consumed: self.consumed.clone(),
            noise_cap: self.noise_cap,
        })
    }

    /// State of the quadratures `rows · x + offset`, checked for physicality.
    /// `rows` need not be square: it may describe a subset of outputs.
    pub fn linear_image(&self, rows: &DMatrix<f64>, offset: &DVector<f64>) -> Result<Self> {
        if rows.ncols() != self.dim() || rows.nrows() != offset.len() {
            return Err(Error::Dimension(format!(
                "{}x{} map with offset of length {} on a {}-mode state",
                rows.nrows(),
                rows.ncols(),
                offset.len(),
                self.n_modes()
            )));
        }
        let mean = rows * &self.mean + offset;
        let cov = symmetrize(rows * &self.cov * rows.transpose());
        Self::new(mean, cov).map(|s| s.with_noise_cap(self.noise_cap))
    }

    /// Rotates the phase of one mode by `theta`.
    pub fn rotate(&self, mode: usize, theta: f64) -> Result<Self> {
        self.check_mode(mode)?;
        let mut s = DMatrix::identity(self.dim(), self.dim());
        s.view_mut((2 * mode, 2 * mode), (2, 2)).copy_from(&rotation(theta));
        self.apply_symplectic(&s, None)
    }

    pub fn rotate_all(&self, theta: f64) -> Result<Self> {
        let r = rotation(theta);
        let mut s = DMatrix::zeros(self.dim(), self.dim());
        for k in 0..self.n_modes() {
            s.view_mut((2 * k, 2 * k), (2, 2)).copy_from(&r);
        }
        self.apply_symplectic(&s, None)
    }

    /// Returns the state whose mode `k` is this state's mode `order[k]`.
    pub fn reorder_modes(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_modes()];
        for &k in order {
            self.check_mode(k)?;
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Input(format!("mode {k} repeated in reordering")));
            }
        }
        if order.len() != self.n_modes() {
            return Err(Error::Input("reordering must list every mode once".into()));
        }
        Ok(self.select(order))
    }

    /// Reduced state on the listed modes, in the listed order.
    pub fn marginal(&self, modes: &[usize]) -> Result<Self> {
        for &k in modes {
            self.check_mode(k)?;
        }
        if modes.is_empty() {
            return Err(Error::Input("marginal over no modes".into()));
        }
        Ok(self.select(modes))
    }

    fn select(&self, modes: &[usize]) -> Self {
        let idx: Vec<usize> = modes.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect();
        let d = idx.len();
        GaussianState {
            mean: DVector::from_fn(d, |i, _| self.mean[idx[i]]),
            cov: DMatrix::from_fn(d, d, |i, j| self.cov[(idx[i], idx[j])]),
            consumed: modes.iter().map(|&k| self.consumed[k]).collect(),
            noise_cap: self.noise_cap,
        }
    }

    pub fn displace(&self, mode: usize, axis: Axis, amount: f64) -> Result<Self> {
        self.check_mode(mode)?;
        let mut out = self.clone();
        out.mean[2 * mode + axis.offset()] += amount;
        Ok(out)
    }

    /// Gaussian conditioning on a known homodyne outcome. The measured mode is
    /// decoupled, pinned to the outcome, and flagged consumed.
    pub fn condition_on(&self, mode: usize, axis: Axis, outcome: f64) -> Result<Self> {
        self.check_mode(mode)?;
        if self.consumed[mode] {
            return Err(Error::Consumed(mode));
        }
        if !outcome.is_finite() {
            return Err(Error::Input(format!("homodyne outcome {outcome} is not finite")));
        }
        let i = 2 * mode + axis.offset();
        let var = self.cov[(i, i)];
        let gain = if var < PINV_THRESHOLD { 0.0 } else { 1.0 / var };
        let col = self.cov.column(i).into_owned();
        let mut mean = &self.mean + &col * (gain * (outcome - self.mean[i]));
        let mut cov = &self.cov - &col * col.transpose() * gain;
        for j in [2 * mode, 2 * mode + 1] {
            cov.row_mut(j).fill(0.0);
            cov.column_mut(j).fill(0.0);
        }
        let c = 2 * mode + axis.conjugate().offset();
        cov[(i, i)] = 1.0 / self.noise_cap;
        cov[(c, c)] = self.noise_cap;
        mean[i] = outcome;
        mean[c] = 0.0;
        let mut consumed = self.consumed.clone();
        consumed[mode] = true;
        Ok(GaussianState {
            mean,
            cov: symmetrize(cov),
            consumed,
            noise_cap: self.noise_cap,
        })
    }

    /// Samples an outcome from the marginal of `(mode, axis)` and conditions on it.
    pub fn homodyne_measure<R: Rng + ?Sized>(
        &self,
        mode: usize,
        axis: Axis,
        rng: &mut R,
    ) -> Result<(HomodyneRecord, Self)> {
        self.check_mode(mode)?;
        if self.consumed[mode] {
            return Err(Error::Consumed(mode));
        }
        let i = 2 * mode + axis.offset();
        let sd = self.cov[(i, i)].max(0.0).sqrt();
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
        let outcome = self.mean[i] + sd * z;
        let next = self.condition_on(mode, axis, outcome)?;
        Ok((HomodyneRecord { mode, axis, outcome }, next))
    }

    /// `cᵀ V c` for a raw coefficient vector over this state's quadratures.
    pub fn variance_of(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "{} coefficients on a {}-mode state",
                c.len(),
                self.n_modes()
            )));
        }
        for (k, used) in self.consumed.iter().enumerate() {
            if *used && (c[2 * k] != 0.0 || c[2 * k + 1] != 0.0) {
                return Err(Error::Consumed(k));
            }
        }
        let c = DVector::from_column_slice(c);
        Ok((c.transpose() * &self.cov * &c)[(0, 0)])
    }

    /// Variance of a quadrature form. The state may cover the full
    /// targets-plus-ancillas basis, or only the targets when the form has no
    /// ancilla component.
    pub fn quad_variance(&self, form: &LinearForm) -> Result<f64> {
        let basis = form.basis();
        if self.n_modes() == basis.n_modes() {
            return self.variance_of(form.coeffs());
        }
        if self.n_modes() == basis.n_targets() {
            let (targets, ancillas) = form.coeffs().split_at(2 * basis.n_targets());
            if ancillas.iter().any(|&c| c != 0.0) {
                return Err(Error::Dimension(
                    "form has ancilla terms but the state covers only the targets".into(),
                ));
            }
            return self.variance_of(targets);
        }
        Err(Error::Dimension(format!(
            "form over {} modes evaluated on a {}-mode state",
            basis.n_modes(),
            self.n_modes()
        )))
    }

    /// Symplectic eigenvalues of the unconsumed modes, ascending.
    ///
    /// Uncoupled blocks are diagonalised separately, so product states keep
    /// full precision even when their factors are strongly squeezed.
    pub fn symplectic_eigenvalues(&self) -> Vec<f64> {
        let live: Vec<usize> = (0..self.n_modes()).filter(|&k| !self.consumed[k]).collect();
        let mut out = Vec::with_capacity(live.len());
        for block in self.coupled_blocks(&live) {
            out.extend(block_symplectic_eigenvalues(&self.select(&block).cov));
        }
        out.sort_by(f64::total_cmp);
        out
    }

    fn coupled_blocks(&self, live: &[usize]) -> Vec<Vec<usize>> {
        let coupled = |a: usize, b: usize| {
            (0..2).any(|x| (0..2).any(|y| self.cov[(2 * a + x, 2 * b + y)] != 0.0))
        };
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut assigned = vec![false; live.len()];
        for start in 0..live.len() {
            if assigned[start] {
                continue;
            }
            assigned[start] = true;
            let mut block = vec![live[start]];
            let mut frontier = vec![live[start]];
            while let Some(a) = frontier.pop() {
                for (j, &b) in live.iter().enumerate() {
                    if !assigned[j] && coupled(a, b) {
                        assigned[j] = true;
                        block.push(b);
                        frontier.push(b);
                    }
                }
            }
            block.sort_unstable();
            blocks.push(block);
        }
        blocks
    }

    pub fn min_symplectic_eigenvalue(&self) -> f64 {
        self.symplectic_eigenvalues()
            .first()
            .copied()
            .unwrap_or(f64::INFINITY)
    }

    pub fn is_physical(&self) -> bool {
        self.min_symplectic_eigenvalue() >= 1.0 - PHYSICALITY_TOL
    }

    pub fn check_physical(&self) -> Result<()> {
        let nu = self.min_symplectic_eigenvalue();
        if nu >= 1.0 - PHYSICALITY_TOL {
            Ok(())
        } else {
            Err(Error::Unphysical(nu))
        }
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Symplectic spectrum of one coupled block via `K = V^{1/2} Ω V^{1/2}`,
/// whose singular values are the symplectic eigenvalues, each twice.
fn block_symplectic_eigenvalues(cov: &DMatrix<f64>) -> Vec<f64> {
    let n = cov.nrows() / 2;
    if n == 1 {
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        return vec![det.max(0.0).sqrt()];
    }
    let eig = SymmetricEigen::new(cov.clone());
    let sqrt_vals = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let k = &root * omega(n) * &root;
    let mut sq: Vec<f64> = SymmetricEigen::new(k.transpose() * &k)
        .eigenvalues
        .iter()
        .map(|x| x.max(0.0).sqrt())
        .collect();
    sq.sort_by(f64::total_cmp);
    sq.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect()
}
