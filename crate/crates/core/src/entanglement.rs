//! Genuine multipartite entanglement witness built from conjugate
//! combinations `û = Σ a_j p_j` and `v̂ = Σ b_j q_j`.
//!
//! A biseparable state satisfies `Var û + Var v̂ ≥ 2 min_B S_B`, where
//! `S_B = |Σ_{k∈L} a_k b_k| + |Σ_{k∈R} a_k b_k|` for the bipartition `B = L|R`.
//! `Ent < 1` therefore certifies genuine `N`-partite entanglement.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::gaussian::GaussianState;
use crate::quadops::{Axis, ModeLabel, MAX_TARGETS};
use crate::scheme::{coefficient_table, run_analytic, run_heisenberg, SchemeConfig, SchemeRun, Variant};

/// Relative tolerance, against `Σ_k |a_k b_k|`, for ties in `S_B`.
pub const TIE_TOL: f64 = 1e-12;

/// Agreement required between brute-force and closed-form `min S_B`.
pub const CLOSED_FORM_TOL: f64 = 1e-10;

/// Largest `N` for which every `S_B` value is kept.
pub const STORE_ALL_MAX_N: usize = 16;

/// At most this many argmin bipartitions are kept.
pub const ARGMIN_CAP: usize = 4096;

/// Whether `û`, `v̂` act on the input or on the output target modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Input,
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UVSpec {
    /// Coefficients of `p_j` in `û`.
    pub a: Vec<f64>,
    /// Coefficients of `q_j` in `v̂`.
    pub b: Vec<f64>,
    pub side: Side,
}

impl UVSpec {
    pub fn new(a: Vec<f64>, b: Vec<f64>, side: Side) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Dimension(format!("a has {} entries, b has {}", a.len(), b.len())));
        }
        if a.len() < 2 || a.len() > MAX_TARGETS {
            return Err(Error::TargetCount(a.len()));
        }
        if a.iter().chain(&b).any(|x| !x.is_finite()) {
            return Err(Error::Input("u/v coefficients must be finite".into()));
        }
        Ok(UVSpec { a, b, side })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// Products `a_k b_k`.
    pub fn weights(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a * b).collect()
    }

    /// `Σ a_k b_k`.
    pub fn ab_sum(&self) -> f64 {
        self.weights().iter().sum()
    }

    /// `Σ |a_k b_k|`.
    pub fn ab_scale(&self) -> f64 {
        self.weights().iter().map(|w| w.abs()).sum()
    }

    /// `û` as a coefficient vector over interleaved `(q_1, p_1, …)`.
    pub fn u_coeffs(&self) -> Vec<f64> {
        self.interleave(Axis::P, &self.a)
    }

    /// `v̂` as a coefficient vector over interleaved `(q_1, p_1, …)`.
    pub fn v_coeffs(&self) -> Vec<f64> {
        self.interleave(Axis::Q, &self.b)
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        UVSpec {
            a: self.a.iter().map(|x| lambda * x).collect(),
            b: self.b.iter().map(|x| lambda * x).collect(),
            side: self.side,
        }
    }

    fn interleave(&self, axis: Axis, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; 2 * c.len()];
        for (j, x) in c.iter().enumerate() {
            out[2 * j + axis.offset()] = *x;
        }
        out
    }
}

/// A split of modes `1..=N` into two nonempty parts, stored with mode 1 on the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bipartition {
    /// Bit `k` set when mode `k + 1` is on the left.
    left: u32,
    n: usize,
}

impl Bipartition {
    /// Canonicalises `left` so that mode 1 sits on the left.
    pub fn new(n: usize, left: &[usize]) -> Result<Self> {
        if !(2..=MAX_TARGETS).contains(&n) {
            return Err(Error::TargetCount(n));
        }
        let mut mask = 0u32;
        for &k in left {
            if k < 1 || k > n {
                return Err(Error::ModeOutOfRange(ModeLabel::Target(k), n));
            }
            mask |= 1 << (k - 1);
        }
        let full = full_mask(n);
        if mask == 0 || mask == full {
            return Err(Error::Input("a bipartition needs two nonempty parts".into()));
        }
        if mask & 1 == 0 {
            mask = full & !mask;
        }
        Ok(Bipartition { left: mask, n })
    }

    pub fn left(&self) -> Vec<usize> {
        (1..=self.n).filter(|k| self.left & (1 << (k - 1)) != 0).collect()
    }

    pub fn right(&self) -> Vec<usize> {
        (1..=self.n).filter(|k| self.left & (1 << (k - 1)) == 0).collect()
    }

    pub fn contains_left(&self, k: usize) -> bool {
        k >= 1 && k <= self.n && self.left & (1 << (k - 1)) != 0
    }
}

fn full_mask(n: usize) -> u32 {
    if n == 32 { u32::MAX } else { (1u32 << n) - 1 }
}

impl fmt::Display for Bipartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<usize>| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        write!(f, "{{{}}}|{{{}}}", join(self.left()), join(self.right()))
    }
}

impl Serialize for Bipartition {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// `S_B = |Σ_{k∈L} a_k b_k| + |Σ_{k∈R} a_k b_k|`.
pub fn s_b(uv: &UVSpec, bipartition: &Bipartition) -> Result<f64> {
    if bipartition.n != uv.n() {
        return Err(Error::Dimension(format!(
            "bipartition of {} modes applied to a {}-mode spec",
            bipartition.n,
            uv.n()
        )));
    }
    let (l, r) = uv.weights().iter().enumerate().fold((0.0, 0.0), |(l, r), (k, w)| {
        if bipartition.contains_left(k + 1) { (l + w, r) } else { (l, r + w) }
    });
    Ok(f64::abs(l) + f64::abs(r))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinSb {
    pub min_s_b: f64,
    /// Every bipartition within the tie tolerance of the minimum, up to [`ARGMIN_CAP`].
    pub argmin: Vec<Bipartition>,
    /// Number of tied minimisers, including any beyond the cap.
    pub n_argmin: usize,
    /// Every `S_B` value for `N ≤ STORE_ALL_MAX_N`.
    pub s_b_all: Option<Vec<(Bipartition, f64)>>,
}

/// Visits every canonical bipartition in Gray-code order with its `S_B`.
fn for_each_s_b(uv: &UVSpec, mut visit: impl FnMut(u32, f64)) {
    let w = uv.weights();
    let n = uv.n();
    let total: f64 = w.iter().sum();
    let rest = n - 1;
    let all = full_mask(rest);
    let mut left_sum = w[0];
    let mut gray = 0u32;
    for i in 0..(1u64 << rest) {
        if i > 0 {
            let bit = (i as u32).trailing_zeros() as usize;
            gray ^= 1 << bit;
            if gray & (1 << bit) != 0 {
                left_sum += w[bit + 1];
            } else {
                left_sum -= w[bit + 1];
            }
        }
        if gray == all {
            continue;
        }
        // Recompute from scratch every 2^16 steps so drift stays bounded.
        if i & 0xffff == 0 && i > 0 {
            left_sum = w[0] + (0..rest).filter(|k| gray & (1 << k) != 0).map(|k| w[k + 1]).sum::<f64>();
        }
        visit(1 | (gray << 1), left_sum.abs() + (total - left_sum).abs());
    }
}

/// Exhaustive minimum of `S_B` over the `2^{N-1} - 1` bipartitions.
pub fn min_s_b(uv: &UVSpec) -> MinSb {
    let n = uv.n();
    let mut min = f64::INFINITY;
    let mut all = (n <= STORE_ALL_MAX_N).then(Vec::new);
    for_each_s_b(uv, |mask, v| {
        min = min.min(v);
        if let Some(all) = all.as_mut() {
            all.push((Bipartition { left: mask, n }, v));
        }
    });
    let tol = TIE_TOL * uv.ab_scale();
    let mut argmin = Vec::new();
    let mut n_argmin = 0;
    let mut take = |mask: u32, v: f64| {
        if v <= min + tol {
            n_argmin += 1;
            if argmin.len() < ARGMIN_CAP {
                argmin.push(Bipartition { left: mask, n });
            }
        }
    };
    match &all {
        Some(all) => all.iter().for_each(|(b, v)| take(b.left, *v)),
        None => for_each_s_b(uv, take),
    }
    argmin.sort();
    if let Some(all) = all.as_mut() {
        all.sort_by_key(|(b, _)| *b);
    }
    MinSb { min_s_b: min, argmin, n_argmin, s_b_all: all }
}

/// Input-side spec: `a = √α (f_1..f_{N-1}, -f_N)`, `b = √β (g_1..g_{N-1}, -g_N)`.
pub fn uv_input(config: &SchemeConfig) -> Result<UVSpec> {
    let table = coefficient_table(config)?;
    let n = config.n;
    let sign = |j: usize| if j == n - 1 { -1.0 } else { 1.0 };
    let (sa, sb) = (config.alpha.sqrt(), config.beta.sqrt());
    UVSpec::new(
        (0..n).map(|j| sa * sign(j) * table.f[j]).collect(),
        (0..n).map(|j| sb * sign(j) * table.g[j]).collect(),
        Side::Input,
    )
}

/// Output-side spec: the input-side `û`, `v̂` rewritten over the output target
/// quadratures, `a' = T_p^{-T} a` and `b' = -T_q^{-T} b`, with `T` the
/// target-to-target block of the output forms. For the uniform setup this is
/// `a' = (f_1..f_{N-1}, (r_d²-t_d²) f_N)`, `b' = ((r_d²-t_d²) g_1.., g_N)`,
/// which is checked.
pub fn uv_output(config: &SchemeConfig, run: &SchemeRun) -> Result<UVSpec> {
    let n = config.n;
    let input = uv_input(config)?;
    let block = |axis: Axis| -> Result<DMatrix<f64>> {
        let mut t = DMatrix::zeros(n, n);
        for j in 1..=n {
            let form = run.output(j, axis);
            for k in 1..=n {
                t[(j - 1, k - 1)] = form.coeff(ModeLabel::Target(k), axis)?;
            }
        }
        Ok(t)
    };
    let solve = |t: DMatrix<f64>, rhs: &[f64]| -> Result<Vec<f64>> {
        t.transpose()
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(rhs))
            .map(|x| x.iter().copied().collect())
            .ok_or_else(|| Error::Input("output target transfer is singular".into()))
    };
    let a = solve(block(Axis::P)?, &input.a)?;
    let b: Vec<f64> = solve(block(Axis::Q)?, &input.b)?.into_iter().map(|x| -x).collect();
    let spec = UVSpec::new(a, b, Side::Output)?;

    if config.variant == Variant::UniformLast {
        let tab = &run.table;
        let k = tab.r_d * tab.r_d - tab.t_d * tab.t_d;
        let (sa, sb) = (config.alpha.sqrt(), config.beta.sqrt());
        let want_a: Vec<f64> = (0..n).map(|j| sa * tab.f[j] * if j == n - 1 { k } else { 1.0 }).collect();
        let want_b: Vec<f64> = (0..n).map(|j| sb * tab.g[j] * if j == n - 1 { 1.0 } else { k }).collect();
        let dev = spec
            .a
            .iter()
            .zip(&want_a)
            .chain(spec.b.iter().zip(&want_b))
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max);
        if dev > CLOSED_FORM_TOL {
            return Err(Error::SelfCheck { what: "output-side u/v coefficients".into(), deviation: dev });
        }
    }
    Ok(spec)
}

/// `min S_B` from the two-term shortcut `2 √(αβ) min(|f_1 g_1|, |f_{N-1} g_{N-1}|)`,
/// times `|r_d² - t_d²|` on the output side, after checking it against the
/// brute-force minimum.
pub fn min_s_b_closed(config: &SchemeConfig, side: Side) -> Result<f64> {
    let run = run_heisenberg(config)?;
    let tab = &run.table;
    let n = config.n;
    let pair = (tab.f[0] * tab.g[0]).abs().min((tab.f[n - 2] * tab.g[n - 2]).abs());
    let scale = 2.0 * (config.alpha * config.beta).sqrt();
    let (closed, uv) = match side {
        Side::Input => (scale * pair, uv_input(config)?),
        Side::Output if config.variant == Variant::UniformLast => {
            let k = (tab.r_d * tab.r_d - tab.t_d * tab.t_d).abs();
            (scale * k * pair, uv_output(config, &run)?)
        }
        Side::Output => {
            return Err(Error::FormulaUnavailable(
                "output-side minimum for the alternative setup".into(),
            ))
        }
    };
    let brute = min_s_b(&uv).min_s_b;
    let dev = (closed - brute).abs() / brute.abs().max(1.0);
    if dev > CLOSED_FORM_TOL {
        return Err(Error::SelfCheck {
            what: format!("two-term min S_B shortcut {closed} vs exhaustive {brute}"),
            deviation: dev,
        });
    }
    Ok(closed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertResult {
    pub var_u: f64,
    pub var_v: f64,
    pub min_s_b: f64,
    pub argmin: Vec<Bipartition>,
    pub n_argmin: usize,
    pub s_b_all: Option<Vec<(Bipartition, f64)>>,
    pub ent: f64,
    pub certified: bool,
}

/// Evaluates `Ent = (Var û + Var v̂) / (2 min S_B)` on an `N`-mode state.
pub fn certify(uv: &UVSpec, state: &GaussianState) -> Result<CertResult> {
    if state.n_modes() != uv.n() {
        return Err(Error::Dimension(format!(
            "{}-mode spec evaluated on a {}-mode state",
            uv.n(),
            state.n_modes()
        )));
    }
    let m = min_s_b(uv);
    if m.min_s_b <= TIE_TOL * uv.ab_scale() {
        return Err(Error::DegenerateSpec);
    }
    let var_u = state.variance_of(&uv.u_coeffs())?;
    let var_v = state.variance_of(&uv.v_coeffs())?;
    let ent = (var_u + var_v) / (2.0 * m.min_s_b);
    Ok(CertResult {
        var_u,
        var_v,
        min_s_b: m.min_s_b,
        argmin: m.argmin,
        n_argmin: m.n_argmin,
        s_b_all: m.s_b_all,
        ent,
        certified: ent < 1.0,
    })
}

/// Runs the scheme and certifies the input state or the output state.
pub fn certify_config(config: &SchemeConfig, side: Side) -> Result<CertResult> {
    match side {
        Side::Input => certify(&uv_input(config)?, &config.input),
        Side::Output => {
            let run = run_analytic(config)?;
            let uv = uv_output(config, &run)?;
            certify(&uv, run.output_state.as_ref().expect("analytic run fills the state"))
        }
    }
}
