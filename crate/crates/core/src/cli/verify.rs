//! Identity suite behind `cvqnd verify`.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entanglement::{certify, certify_config, min_s_b, min_s_b_closed, uv_input, uv_output, Side};
use crate::error::Result;
use crate::gaussian::GaussianState;
use crate::quadops::{combine, Axis, Basis, LinearForm, ModeLabel};
use crate::scheme::{
    build_register, closed_form_deviations, closed_form_td, db_to_squeezing, output_bracket_defect, readout_brackets,
    run_analytic, run_heisenberg, run_monte_carlo, scheme_ideal_map, solve_compatibility, Gains,
    InputFamily, SchemeConfig, SchemeRun, Variant,
};

use ModeLabel::{AncillaA as A, AncillaB as B, Target as T};

/// `(N, m)` pairs exercised when none is given.
pub const DEFAULT_PAIRS: [(usize, usize); 6] = [(3, 2), (4, 2), (4, 3), (5, 2), (6, 3), (8, 5)];

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub n: Option<usize>,
    pub m: Option<usize>,
    /// Added to every compatible `t_d` in the generic identities.
    pub perturb_td: f64,
}

/// Largest deviation of one identity over all its cases.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub tol: f64,
    pub worst: f64,
    pub case: String,
    pub error: Option<String>,
    pub n_cases: usize,
}

impl Check {
    fn new(name: impl Into<String>, tol: f64) -> Self {
        Check { name: name.into(), tol, worst: 0.0, case: String::new(), error: None, n_cases: 0 }
    }

    fn record(&mut self, dev: f64, case: impl FnOnce() -> String) {
        self.n_cases += 1;
        if !(dev <= self.worst) {
            self.worst = dev;
            self.case = case();
        }
    }

    fn record_result(&mut self, dev: Result<f64>, case: impl Fn() -> String) {
        match dev {
            Ok(d) => self.record(d, case),
            Err(e) => {
                self.n_cases += 1;
                if self.error.is_none() {
                    self.error = Some(format!("{}: {e}", case()));
                }
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.n_cases > 0 && self.worst <= self.tol
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<58} max dev {:>9.2e}  tol {:.0e}  ({} cases)", self.name, self.worst, self.tol, self.n_cases)?;
        if let Some(e) = &self.error {
            write!(f, "\n      error at {e}")?;
        } else if !self.passed() {
            write!(f, "\n      worst case {}", self.case)?;
        }
        Ok(())
    }
}

fn t_grid(k: usize) -> Vec<f64> {
    (0..k).map(|i| 0.05 + (0.999 - 0.05) * i as f64 / (k - 1) as f64).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn cfg(n: usize, m: usize, t_o: f64, v: Variant) -> Result<SchemeConfig> {
    SchemeConfig::new(n, m, t_o, v)
}

/// Runs every identity and returns them in report order.
pub fn verify_suite(opts: &VerifyOptions) -> Vec<Check> {
    let pairs: Vec<(usize, usize)> = match (opts.n, opts.m) {
        (Some(n), m) => vec![(n, m.unwrap_or(n.saturating_sub(1)))],
        (None, Some(m)) => DEFAULT_PAIRS.iter().copied().filter(|p| p.1 == m).collect(),
        (None, None) => DEFAULT_PAIRS.to_vec(),
    };
    let mut checks = generic_checks(&pairs, opts.perturb_td);
    checks.extend(named_td_checks());
    checks.extend(literal_checks());
    checks.extend(certifier_checks());
    checks.extend(gaussian_checks());
    checks
}

fn generic_checks(pairs: &[(usize, usize)], perturb: f64) -> Vec<Check> {
    let mut split = Check::new("compatibility: split readout bracket vanishes at t_d", 1e-12);
    let mut full = Check::new("compatibility: full readout bracket vanishes", 1e-12);
    let mut root = Check::new("compatibility: bisected t_d equals closed form", 1e-10);
    let mut unit = Check::new("t_d^2 + r_d^2 = 1", 1e-12);
    let mut fg = Check::new("constraint: sum f_j g_j = 0 (scaled)", 1e-12);
    let mut canon = Check::new("output quadratures keep canonical brackets", 1e-12);
    let mut named: Vec<Check> = Vec::new();
    for &(n, m) in pairs {
        for t_o in t_grid(12) {
            let case = || format!("N={n} m={m} t_o={t_o:.4}");
            let base = match cfg(n, m, t_o, Variant::UniformLast) {
                Ok(c) => c,
                Err(e) => {
                    split.record_result(Err(e), case);
                    continue;
                }
            };
            let solved = base.t_d();
            match &solved {
                Ok(t_d) => {
                    let closed = closed_form_td(n, m, t_o, Variant::UniformLast);
                    root.record_result(closed.map(|c| (t_d - c).abs()), case);
                }
                Err(e) => root.record_result(Err(crate::Error::Input(e.to_string())), case),
            }
            let Ok(t_d) = solved else { continue };
            let c = if perturb != 0.0 {
                match base.with_td(t_d + perturb) {
                    Ok(c) => c,
                    Err(e) => {
                        split.record_result(Err(e), case);
                        continue;
                    }
                }
            } else {
                base
            };
            match build_register(&c).and_then(|r| readout_brackets(&r)) {
                Ok(b) => {
                    split.record(b.target.abs(), case);
                    full.record(b.full.abs(), case);
                }
                Err(e) => split.record_result(Err(e), case),
            }
            let run = match run_heisenberg(&c) {
                Ok(r) => r,
                Err(e) => {
                    canon.record_result(Err(e), case);
                    continue;
                }
            };
            let tab = &run.table;
            unit.record((tab.t_d * tab.t_d + tab.r_d * tab.r_d - 1.0).abs(), case);
            fg.record(tab.fg_sum().abs() / tab.fg_scale().max(1.0), case);
            canon.record(output_bracket_defect(&run.outputs), case);
            // Perturbed runs are compared with the closed forms at the perturbed t_d.
            let dev_cfg = SchemeConfig { td_override: None, ..c.clone() };
            match closed_form_deviations(&dev_cfg, &run) {
                Ok(devs) => {
                    for (what, d) in devs {
                        let name = format!("closed form: {what}");
                        let idx = match named.iter().position(|c| c.name == name) {
                            Some(i) => i,
                            None => {
                                named.push(Check::new(name, 1e-12));
                                named.len() - 1
                            }
                        };
                        named[idx].record(d, case);
                    }
                }
                Err(e) => canon.record_result(Err(e), case),
            }
        }
    }
    let mut out = vec![split, full, root, unit, fg, canon];
    out.extend(named);
    out
}

fn named_td_checks() -> Vec<Check> {
    type Closed = fn(f64) -> f64;
    let setups: [(&str, usize, usize, Variant, Closed); 4] = [
        ("t_d = t_o^2 (N=3, m=2)", 3, 2, Variant::UniformLast, |t| t * t),
        ("t_d = t_o^2 / sqrt(2 - t_o^2) (N=4, m=2)", 4, 2, Variant::UniformLast, |t| t * t / (2.0 - t * t).sqrt()),
        ("t_d = t_o^3 (N=4, m=3)", 4, 3, Variant::UniformLast, |t| t * t * t),
        ("t_d of the alternative setup (N=3, m=2)", 3, 2, Variant::AltBN, |t| {
            let t2 = t * t;
            t / (t2 + (1.0 + t2) * (1.0 - t2 * t2)).sqrt()
        }),
    ];
    setups
        .iter()
        .map(|&(name, n, m, v, f)| {
            let mut c = Check::new(name, 1e-12);
            for t_o in t_grid(20) {
                c.record_result(solve_compatibility(n, m, t_o, v).map(|t| (t - f(t_o)).abs()), || format!("t_o={t_o:.4}"));
            }
            c
        })
        .collect()
}

fn lf(basis: Basis, terms: &[(ModeLabel, Axis, f64)]) -> LinearForm {
    LinearForm::from_terms(basis, terms).expect("labels inside the basis")
}

fn form_dev(got: &LinearForm, want: &LinearForm) -> f64 {
    got.max_scaled_diff(want).unwrap_or(f64::INFINITY)
}

fn literal_checks() -> Vec<Check> {
    let mut tri_read = Check::new("tripartite readouts, literal", 1e-12);
    let mut tri_out = Check::new("tripartite output quadratures, literal", 1e-12);
    let mut tetra_read = Check::new("tetrapartite (m=3) readouts, literal", 1e-12);
    let mut alt_read = Check::new("alternative setup readouts, literal", 1e-12);
    let mut alt_out = Check::new("alternative setup signal outputs, literal", 1e-12);
    let mut stage2 = Check::new("pre-feedforward target quadratures, closed form", 1e-12);
    let b3 = Basis::new(3).expect("three targets");
    let b4 = Basis::new(4).expect("four targets");
    for t_o in t_grid(10) {
        let case = || format!("t_o={t_o:.4}");
        let r_o = (1.0 - t_o * t_o).sqrt();
        let (t2, t3, t4) = (t_o * t_o, t_o.powi(3), t_o.powi(4));

        match cfg(3, 2, t_o, Variant::UniformLast).and_then(|c| run_heisenberg(&c)) {
            Ok(run) => {
                let (t_d, r_d) = (run.table.t_d, run.table.r_d);
                let k = r_d * r_d - t_d * t_d;
                let qb = lf(b3, &[(T(1), Axis::Q, -r_o * t3), (T(2), Axis::Q, -r_o * t2), (T(3), Axis::Q, -r_d * t2), (A, Axis::Q, -(1.0 - t4)), (B, Axis::Q, t_d * t2)]);
                let pa = lf(b3, &[(T(1), Axis::P, -r_o * t_d * t_o), (T(2), Axis::P, -r_o * t_d), (T(3), Axis::P, r_d * t_d), (A, Axis::P, t_d * t2), (B, Axis::P, r_d * r_d)]);
                tri_read.record(form_dev(&run.readout_qb, &qb).max(form_dev(&run.readout_pa, &pa)), case);
                let want = [
                    lf(b3, &[(T(1), Axis::Q, 1.0), (A, Axis::Q, r_o / t_o)]),
                    lf(b3, &[(T(1), Axis::P, 1.0), (T(3), Axis::P, -2.0 * r_o * r_d * t_o), (B, Axis::P, -r_o * t_o / t_d * k)]),
                    lf(b3, &[(T(2), Axis::Q, 1.0), (A, Axis::Q, r_o / t2)]),
                    lf(b3, &[(T(2), Axis::P, 1.0), (T(3), Axis::P, -2.0 * r_o * r_d), (B, Axis::P, -r_o / t_d * k)]),
                    lf(b3, &[(T(3), Axis::Q, 1.0), (T(1), Axis::Q, 2.0 * r_o * r_d * t_o), (T(2), Axis::Q, 2.0 * r_o * r_d), (A, Axis::Q, r_d / t2 * (1.0 - 2.0 * t4))]),
                    lf(b3, &[(T(3), Axis::P, 1.0), (B, Axis::P, r_d / t_d)]),
                ];
                let got: Vec<&LinearForm> = run.outputs.iter().flat_map(|f| f.iter()).collect();
                let dev = got.iter().zip(&want).map(|(g, w)| form_dev(g, w)).fold(0.0, f64::max);
                tri_out.record(dev, case);
            }
            Err(e) => tri_out.record_result(Err(e), case),
        }

        match cfg(4, 3, t_o, Variant::UniformLast).and_then(|c| run_heisenberg(&c)) {
            Ok(run) => {
                let (t_d, r_d) = (run.table.t_d, run.table.r_d);
                let t6 = t_o.powi(6);
                let qb = lf(b4, &[(T(1), Axis::Q, -r_o * t3 * t2), (T(2), Axis::Q, -r_o * t3 * t_o), (T(3), Axis::Q, -r_o * t3), (T(4), Axis::Q, -r_d * t3), (A, Axis::Q, -(1.0 - t6)), (B, Axis::Q, t_d * t3)]);
                let pa = lf(b4, &[(T(1), Axis::P, -r_o * t_d * t2), (T(2), Axis::P, -r_o * t_d * t_o), (T(3), Axis::P, -r_o * t_d), (T(4), Axis::P, r_d * t_d), (A, Axis::P, t_d * t3), (B, Axis::P, 1.0 - t_d * t_d)]);
                tetra_read.record(form_dev(&run.readout_qb, &qb).max(form_dev(&run.readout_pa, &pa)), case);
            }
            Err(e) => tetra_read.record_result(Err(e), case),
        }

        match cfg(3, 2, t_o, Variant::AltBN).and_then(|c| run_heisenberg(&c)) {
            Ok(run) => {
                let (t_d, r_d) = (run.table.t_d, run.table.r_d);
                let qb = lf(b3, &[(T(1), Axis::Q, -r_o * t3), (T(2), Axis::Q, -r_o * t2), (T(3), Axis::Q, -r_o * t2), (A, Axis::Q, -(1.0 - t4)), (B, Axis::Q, t3)]);
                let pa = lf(b3, &[(T(1), Axis::P, -r_o * t_d * t_o), (T(2), Axis::P, -r_o * t_d), (T(3), Axis::P, t_o * r_d), (A, Axis::P, t2 * t_d), (B, Axis::P, r_o * r_d)]);
                alt_read.record(form_dev(&run.readout_qb, &qb).max(form_dev(&run.readout_pa, &pa)), case);
                let x = r_o * t_d + t_o * r_d;
                let y = r_o * r_d - t_o * t_d;
                let want = [
                    lf(b3, &[(T(1), Axis::Q, 1.0), (A, Axis::Q, r_o / t_o)]),
                    lf(b3, &[(T(1), Axis::P, 1.0), (T(3), Axis::P, -r_o * t_o / t_d * x), (B, Axis::P, -r_o * t_o / t_d * y)]),
                    lf(b3, &[(T(2), Axis::Q, 1.0), (A, Axis::Q, r_o / t2)]),
                    lf(b3, &[(T(2), Axis::P, 1.0), (T(3), Axis::P, -r_o / t_d * x), (B, Axis::P, -r_o / t_d * y)]),
                ];
                let got: Vec<&LinearForm> = run.outputs[..2].iter().flat_map(|f| f.iter()).collect();
                alt_out.record(got.iter().zip(&want).map(|(g, w)| form_dev(g, w)).fold(0.0, f64::max), case);
            }
            Err(e) => alt_out.record_result(Err(e), case),
        }

        for (n, m) in [(3, 2), (4, 2), (5, 3)] {
            let zero = Gains::Manual { phi: vec![0.0; n], gamma: vec![0.0; n] };
            match cfg(n, m, t_o, Variant::UniformLast).and_then(|c| c.with_gains(zero)).and_then(|c| run_heisenberg(&c)) {
                Ok(run) => {
                    let dev = (1..=n)
                        .flat_map(|j| Axis::BOTH.map(move |a| (j, a)))
                        .map(|(j, a)| form_dev(run.output(j, a), &stage2_form(n, m, t_o, run.table.t_d, j, a)))
                        .fold(0.0, f64::max);
                    stage2.record(dev, || format!("N={n} m={m} t_o={t_o:.4}"));
                }
                Err(e) => stage2.record_result(Err(e), case),
            }
        }
    }
    vec![tri_read, tri_out, tetra_read, alt_read, alt_out, stage2]
}

/// Target quadrature `j` after the cascade, before feedforward.
fn stage2_form(n: usize, m: usize, t_o: f64, t_d: f64, j: usize, axis: Axis) -> LinearForm {
    let r_o = (1.0 - t_o * t_o).sqrt();
    let r_d = (1.0 - t_d * t_d).sqrt();
    let p = |e: i32| t_o.powi(e);
    let (ni, mi, ji) = (n as i32, m as i32, j as i32);
    let mut terms = Vec::new();
    let mut push = |mode: ModeLabel, c: f64| terms.push((mode, axis, c));
    if j < n {
        push(T(j), 1.0);
        let low = j <= m;
        for i in 1..ni {
            let e = match (low, i <= mi) {
                (true, true) => 2 * mi - ji - i,
                (true, false) => i - ji - 1,
                (false, true) => ji - 1 - i,
                (false, false) => ji - 2 * (mi + 1) + i,
            };
            push(T(i as usize), -r_o * r_o * p(e));
        }
        let e_n = if low { ni - ji - 1 } else { ni + ji - 2 * (mi + 1) };
        push(T(n), -r_o * r_d * p(e_n));
        push(A, r_o * p(if low { 2 * mi - ji } else { ji - 1 }));
        push(B, r_o * t_d * p(e_n));
    } else {
        let k = 2.0 - p(2 * (ni - mi - 1));
        push(T(n), 1.0 - r_d * r_d * k);
        for i in 1..ni {
            let e = if i <= mi { ni - 1 - i } else { ni - 2 * (mi + 1) + i };
            push(T(i as usize), r_o * r_d * p(e));
        }
        push(A, -r_d * p(ni - 1));
        push(B, r_d * t_d * k);
    }
    lf(Basis::new(n).expect("valid target count"), &terms)
}

fn certifier_checks() -> Vec<Check> {
    type Closed = fn(f64) -> f64;
    let setups: [(&str, usize, usize, Variant, Side, Closed); 5] = [
        ("min S_B = 2(1-t_o^2)/t_o^2 (N=3, m=2)", 3, 2, Variant::UniformLast, Side::Input, |t| 2.0 * (1.0 - t * t) / (t * t)),
        ("min S_B = 2(1-t_o^2)sqrt(2-t_o^2)/t_o^3 (N=4, m=2)", 4, 2, Variant::UniformLast, Side::Input, |t| {
            2.0 * (1.0 - t * t) * (2.0 - t * t).sqrt() / t.powi(3)
        }),
        ("min S_B = 2(1-t_o^2)/t_o^2 (N=4, m=3)", 4, 3, Variant::UniformLast, Side::Input, |t| 2.0 * (1.0 - t * t) / (t * t)),
        ("min S_B of the alternative setup (N=3, m=2)", 3, 2, Variant::AltBN, Side::Input, |t| {
            let t2 = t * t;
            2.0 * (1.0 - t2) * (t2 + (1.0 + t2) * (1.0 - t2 * t2)).sqrt() / t
        }),
        ("output-side min S_B = |1-2t_o^4| 2(1-t_o^2)/t_o^2 (N=3)", 3, 2, Variant::UniformLast, Side::Output, |t| {
            (1.0 - 2.0 * t.powi(4)).abs() * 2.0 * (1.0 - t * t) / (t * t)
        }),
    ];
    let mut out: Vec<Check> = setups
        .iter()
        .map(|&(name, n, m, v, side, f)| {
            let mut c = Check::new(name, 1e-10);
            for t_o in t_grid(50) {
                let dev = cfg(n, m, t_o, v).and_then(|c| {
                    let brute = match side {
                        Side::Input => min_s_b(&uv_input(&c)?).min_s_b,
                        Side::Output => min_s_b(&uv_output(&c, &run_heisenberg(&c)?)?).min_s_b,
                    };
                    let shortcut = min_s_b_closed(&c, side)?;
                    Ok(rel(brute, f(t_o)).max(rel(shortcut, f(t_o))))
                });
                c.record_result(dev, || format!("t_o={t_o:.4}"));
            }
            c
        })
        .collect();

    let mut readout_u = Check::new("readout p_A over output modes = t_d t_o^(N-1) u_out", 1e-12);
    for (n, m) in [(3, 2), (4, 2), (4, 3), (6, 3)] {
        for t_o in t_grid(8) {
            let dev = cfg(n, m, t_o, Variant::UniformLast).and_then(|c| {
                let run = run_heisenberg(&c)?;
                let uv = uv_output(&c, &run)?;
                Ok(readout_over_outputs(&run, &uv.a, t_o, n))
            });
            readout_u.record_result(dev, || format!("N={n} m={m} t_o={t_o:.4}"));
        }
    }
    out.push(readout_u);

    let mut vac = Check::new("vacuum input never certifies (1 - Ent)", 0.0);
    let mut sep = Check::new("random product states never certify (1 - Ent)", 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t_o in t_grid(10) {
        for (n, m, v) in [(3, 2, Variant::UniformLast), (4, 2, Variant::UniformLast), (3, 2, Variant::AltBN)] {
            let case = || format!("N={n} m={m} {v:?} t_o={t_o:.4}");
            let dev = cfg(n, m, t_o, v).and_then(|c| {
                let uv = uv_input(&c)?;
                let r = certify(&uv, &GaussianState::vacuum(n)?)?;
                Ok((1.0 - r.ent).max(0.0))
            });
            vac.record_result(dev, case);
            let dev = cfg(n, m, t_o, v).and_then(|c| {
                let modes = (0..n)
                    .map(|_| {
                        let st = if rng.random_bool(0.5) {
                            GaussianState::squeezed(rng.random_range(-1.5..1.5), Axis::Q)?
                        } else {
                            GaussianState::thermal(rng.random_range(1.0..3.0))?
                        };
                        st.rotate(0, rng.random_range(0.0..std::f64::consts::PI))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let r = certify(&uv_input(&c)?, &GaussianState::tensor(&modes)?)?;
                Ok((1.0 - r.ent).max(0.0))
            });
            sep.record_result(dev, case);
        }
    }
    out.push(vac);
    out.push(sep);

    let mut alt = Check::new("alternative setup certifies GHZ s=1 at t_o=0.9 (Ent)", 1.0 - 1e-9);
    alt.record_result(
        cfg(3, 2, 0.9, Variant::AltBN)
            .and_then(|c| c.with_family(InputFamily::Ghz, 1.0))
            .and_then(|c| certify_config(&c, Side::Input))
            .map(|r| r.ent),
        || "t_o=0.9 s=1".into(),
    );
    out.push(alt);
    out
}

/// Largest target coefficient of `p_A^out - c Σ a_j p_j^out`.
fn readout_over_outputs(run: &SchemeRun, a: &[f64], t_o: f64, n: usize) -> f64 {
    let c = run.table.t_d * t_o.powi(n as i32 - 1);
    let terms: Vec<(f64, &LinearForm)> = (1..=n).map(|j| (-c * a[j - 1], run.output(j, Axis::P))).collect();
    let mut all = vec![(1.0, &run.readout_pa)];
    all.extend(terms);
    match combine(&all) {
        Ok(diff) => diff.targets_part().coeffs().iter().map(|x| x.abs()).fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    }
}

fn gaussian_checks() -> Vec<Check> {
    let mut ideal = Check::new("60 dB ancillas reproduce the ideal QND map (rel)", 1e-3);
    let mut phys = Check::new("output states physical (1 - min symplectic eigenvalue)", 1e-9);
    for (n, m) in [(3, 2), (4, 2), (4, 3)] {
        for fam in [InputFamily::Vacuum, InputFamily::Ghz] {
            let case = || format!("N={n} m={m} {fam:?}");
            let res = cfg(n, m, 0.85, Variant::UniformLast)
                .and_then(|c| c.with_family(fam, 1.0))
                .and_then(|c| {
                    let run = run_analytic(&c)?;
                    let want = c.input.apply_symplectic(&scheme_ideal_map(&run.table)?, None)?;
                    let got = run.output_state.expect("analytic run fills the state");
                    let dev = got.cov().iter().zip(want.cov().iter()).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
                    Ok((dev, 1.0 - got.min_symplectic_eigenvalue()))
                });
            match res {
                Ok((dev, nu)) => {
                    ideal.record(dev, case);
                    phys.record(nu, case);
                }
                Err(e) => ideal.record_result(Err(e), case),
            }
        }
    }
    let mut mc = Check::new("Monte Carlo covariance vs analytic (max |z|, 2e4 samples)", 5.0);
    let s = db_to_squeezing(30.0);
    let res = cfg(3, 2, 0.85, Variant::UniformLast)
        .and_then(|c| c.with_family(InputFamily::Ghz, 1.0))
        .map(|c| c.with_ancilla_squeezing(s, s))
        .and_then(|c| {
            let summary = run_monte_carlo(&c, 20_000, 11)?;
            let an = run_analytic(&c)?.output_state.expect("analytic run fills the state");
            let d = an.dim();
            let ana = DMatrix::from_fn(d, d, |i, j| an.cov()[(i, j)]);
            let mut z: f64 = 0.0;
            for i in 0..d {
                for j in 0..d {
                    z = z.max((summary.cov[i][j] - ana[(i, j)]).abs() / summary.cov_se[i][j]);
                }
            }
            Ok(z)
        });
    mc.record_result(res, || "N=3 m=2 GHZ s=1 30 dB".into());
    vec![ideal, phys, mc]
}

/// Prints the report; returns whether every identity passed. A closed
/// reader stops the report without changing the verdict.
pub fn cmd_verify(opts: &VerifyOptions, out: &mut impl std::io::Write) -> std::io::Result<bool> {
    let checks = verify_suite(opts);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    let mut report = || -> std::io::Result<()> {
        for c in &checks {
            writeln!(out, "{c}")?;
        }
        writeln!(out, "{} identities, {} passed, {} failed", checks.len(), checks.len() - failed, failed)
    };
    match report() {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e),
        _ => Ok(failed == 0),
    }
}
