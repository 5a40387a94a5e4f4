//! Mixed-integer linear models, a HiGHS-backed solver and a ranked solution pool.
//!
//! The pool is built by re-solving with no-good cuts over the key integer
//! variables. Every incumbent is polished by an LP with the integers fixed,
//! then re-checked against the stored rows before it is accepted.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::time::Instant;

use highs::{HighsModelStatus, HighsSolutionStatus, RowProblem, Sense as HSense};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEAS_TOL: f64 = 1e-6;

/// Coefficients at or below this are dropped before the backend sees them
/// (HiGHS would zero them itself and warn).
const TINY_COEF: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
    Integer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Var {
    pub name: String,
    pub kind: VarKind,
    pub lb: f64,
    pub ub: f64,
    /// Whether the pool must tell solutions apart on this variable.
    pub pool_key: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sense::Le => "<=",
            Sense::Eq => "=",
            Sense::Ge => ">=",
        })
    }
}

/// Sparse affine expression `Σ coef·var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(VarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(v: VarId, coef: f64) -> Self {
        LinExpr {
            terms: vec![(v, coef)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: VarId, coef: f64) -> &mut Self {
        self.terms.push((v, coef));
        self
    }

    pub fn sum(vars: impl IntoIterator<Item = VarId>) -> Self {
        LinExpr {
            terms: vars.into_iter().map(|v| (v, 1.0)).collect(),
            constant: 0.0,
        }
    }

    /// Merges repeated variables and drops zero coefficients.
    pub fn compact(&self) -> LinExpr {
        let mut terms: Vec<(VarId, f64)> = self.terms.clone();
        terms.sort_by_key(|t| t.0);
        let mut out: Vec<(VarId, f64)> = Vec::with_capacity(terms.len());
        for (v, c) in terms {
            match out.last_mut() {
                Some((w, d)) if *w == v => *d += c,
                _ => out.push((v, c)),
            }
        }
        out.retain(|t| t.1 != 0.0);
        LinExpr {
            terms: out,
            constant: self.constant,
        }
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(v, c)| c * values[v.0]).sum::<f64>()
    }
}

impl From<VarId> for LinExpr {
    fn from(v: VarId) -> Self {
        LinExpr::term(v, 1.0)
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

impl<T: Into<LinExpr>> Add<T> for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: T) -> LinExpr {
        self += rhs;
        self
    }
}

impl<T: Into<LinExpr>> AddAssign<T> for LinExpr {
    fn add_assign(&mut self, rhs: T) {
        let r = rhs.into();
        self.terms.extend(r.terms);
        self.constant += r.constant;
    }
}

impl<T: Into<LinExpr>> Sub<T> for LinExpr {
    type Output = LinExpr;
    fn sub(self, rhs: T) -> LinExpr {
        self + (-rhs.into())
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, k: f64) -> LinExpr {
        self.terms.iter_mut().for_each(|t| t.1 *= k);
        self.constant *= k;
        self
    }
}

impl<T: Into<LinExpr>> Add<T> for VarId {
    type Output = LinExpr;
    fn add(self, rhs: T) -> LinExpr {
        LinExpr::from(self) + rhs
    }
}

impl<T: Into<LinExpr>> Sub<T> for VarId {
    type Output = LinExpr;
    fn sub(self, rhs: T) -> LinExpr {
        LinExpr::from(self) - rhs
    }
}

impl Mul<f64> for VarId {
    type Output = LinExpr;
    fn mul(self, k: f64) -> LinExpr {
        LinExpr::term(self, k)
    }
}

/// `Σ coef·var  sense  rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(VarId, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Constraint {
    pub fn lhs(&self, values: &[f64]) -> f64 {
        self.terms.iter().map(|(v, c)| c * values[v.0]).sum()
    }

    /// Amount by which `values` violate the row (0 when satisfied).
    pub fn violation(&self, values: &[f64]) -> f64 {
        let a = self.lhs(values);
        match self.sense {
            Sense::Le => (a - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - a).max(0.0),
            Sense::Eq => (a - self.rhs).abs(),
        }
    }
}

/// Minimization model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MioModel {
    vars: Vec<Var>,
    cons: Vec<Constraint>,
    objective: LinExpr,
}

impl MioModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, v: VarId) -> &Var {
        &self.vars[v.0]
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.cons
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, kind: VarKind, lb: f64, ub: f64) -> Result<VarId> {
        let name = name.into();
        let (lb, ub) = match kind {
            VarKind::Binary => (lb.max(0.0), ub.min(1.0)),
            VarKind::Integer => (lb.ceil(), ub.floor()),
            VarKind::Continuous => (lb, ub),
        };
        if lb.is_nan() || ub.is_nan() || lb > ub || lb == f64::INFINITY || ub == f64::NEG_INFINITY {
            return Err(Error::Model(format!("variable `{name}` has empty bounds [{lb}, {ub}]")));
        }
        self.vars.push(Var {
            name,
            kind,
            lb,
            ub,
            pool_key: kind != VarKind::Continuous,
        });
        Ok(VarId(self.vars.len() - 1))
    }

    pub fn add_continuous(&mut self, name: impl Into<String>, lb: f64, ub: f64) -> Result<VarId> {
        self.add_var(name, VarKind::Continuous, lb, ub)
    }

    pub fn add_binary(&mut self, name: impl Into<String>) -> Result<VarId> {
        self.add_var(name, VarKind::Binary, 0.0, 1.0)
    }

    pub fn add_integer(&mut self, name: impl Into<String>, lb: f64, ub: f64) -> Result<VarId> {
        self.add_var(name, VarKind::Integer, lb, ub)
    }

    /// Excludes an integer variable from the pool's distinctness cuts.
    pub fn set_pool_key(&mut self, v: VarId, key: bool) {
        self.vars[v.0].pool_key = key;
    }

    /// Narrows both bounds to `value`.
    pub fn fix(&mut self, v: VarId, value: f64) -> Result<()> {
        let var = &mut self.vars[v.0];
        if value.is_nan() || value < var.lb - FEAS_TOL || value > var.ub + FEAS_TOL {
            return Err(Error::Model(format!(
                "cannot fix `{}` to {value} outside [{}, {}]",
                var.name, var.lb, var.ub
            )));
        }
        let value = value.clamp(var.lb, var.ub);
        var.lb = value;
        var.ub = value;
        Ok(())
    }

    pub fn set_bounds(&mut self, v: VarId, lb: f64, ub: f64) -> Result<()> {
        if lb.is_nan() || ub.is_nan() || lb > ub {
            return Err(Error::Model(format!("bad bounds [{lb}, {ub}]")));
        }
        self.vars[v.0].lb = lb;
        self.vars[v.0].ub = ub;
        Ok(())
    }

    fn check_expr(&self, e: &LinExpr) -> Result<()> {
        if e.constant.is_nan() {
            return Err(Error::Model("NaN constant".into()));
        }
        for (v, c) in &e.terms {
            if v.0 >= self.vars.len() {
                return Err(Error::Model(format!("unknown variable id {}", v.0)));
            }
            if !c.is_finite() {
                return Err(Error::Model(format!("non-finite coefficient {c} on `{}`", self.vars[v.0].name)));
            }
        }
        Ok(())
    }

    /// Adds `expr sense rhs`; the expression constant moves to the right-hand side.
    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        expr: impl Into<LinExpr>,
        sense: Sense,
        rhs: f64,
    ) -> Result<ConId> {
        let expr = expr.into();
        self.check_expr(&expr)?;
        if !rhs.is_finite() {
            return Err(Error::Model(format!("non-finite right-hand side {rhs}")));
        }
        let e = expr.compact();
        self.cons.push(Constraint {
            name: name.into(),
            terms: e.terms,
            sense,
            rhs: rhs - e.constant,
        });
        Ok(ConId(self.cons.len() - 1))
    }

    pub fn add_le(&mut self, name: impl Into<String>, lhs: impl Into<LinExpr>, rhs: impl Into<LinExpr>) -> Result<ConId> {
        self.add_constraint(name, lhs.into() - rhs.into(), Sense::Le, 0.0)
    }

    pub fn add_ge(&mut self, name: impl Into<String>, lhs: impl Into<LinExpr>, rhs: impl Into<LinExpr>) -> Result<ConId> {
        self.add_constraint(name, lhs.into() - rhs.into(), Sense::Ge, 0.0)
    }

    pub fn add_eq(&mut self, name: impl Into<String>, lhs: impl Into<LinExpr>, rhs: impl Into<LinExpr>) -> Result<ConId> {
        self.add_constraint(name, lhs.into() - rhs.into(), Sense::Eq, 0.0)
    }

    /// Interval of `expr` over the variable boxes.
    pub fn expr_bounds(&self, expr: &LinExpr) -> (f64, f64) {
        let (mut lo, mut hi) = (expr.constant, expr.constant);
        for (v, c) in &expr.terms {
            let var = &self.vars[v.0];
            if *c >= 0.0 {
                lo += c * var.lb;
                hi += c * var.ub;
            } else {
                lo += c * var.ub;
                hi += c * var.lb;
            }
        }
        (lo, hi)
    }

    /// `indicator = active ⇒ expr sense rhs`, compiled to big-M rows from the
    /// variable bounds. Rows that can never bind are skipped.
    pub fn add_indicator(
        &mut self,
        name: impl Into<String>,
        indicator: VarId,
        active: bool,
        expr: impl Into<LinExpr>,
        sense: Sense,
        rhs: f64,
    ) -> Result<()> {
        let name = name.into();
        if self.vars[indicator.0].kind != VarKind::Binary {
            return Err(Error::Model(format!("indicator `{name}` needs a binary variable")));
        }
        let expr = expr.into();
        self.check_expr(&expr)?;
        let (lo, hi) = self.expr_bounds(&expr);
        // slack = 1 - b when active on b = 1, b when active on b = 0
        let slack = if active {
            LinExpr::constant(1.0) - indicator
        } else {
            LinExpr::from(indicator)
        };
        if matches!(sense, Sense::Le | Sense::Eq) {
            let m = hi - rhs;
            if !m.is_finite() {
                return Err(Error::Model(format!("indicator `{name}` has an unbounded expression")));
            }
            if m > 0.0 {
                self.add_constraint(format!("{name}_le"), expr.clone() - slack.clone() * m, Sense::Le, rhs)?;
            }
        }
        if matches!(sense, Sense::Ge | Sense::Eq) {
            let m = rhs - lo;
            if !m.is_finite() {
                return Err(Error::Model(format!("indicator `{name}` has an unbounded expression")));
            }
            if m > 0.0 {
                self.add_constraint(format!("{name}_ge"), expr + slack * m, Sense::Ge, rhs)?;
            }
        }
        Ok(())
    }

    pub fn set_objective(&mut self, expr: impl Into<LinExpr>) -> Result<()> {
        let e = expr.into();
        self.check_expr(&e)?;
        self.objective = e.compact();
        Ok(())
    }

    /// Bound, integrality and row violations above `tol`, as messages.
    pub fn check(&self, values: &[f64], tol: f64) -> std::result::Result<(), String> {
        if values.len() != self.vars.len() {
            return Err(format!("{} values for {} variables", values.len(), self.vars.len()));
        }
        for (var, &x) in self.vars.iter().zip(values) {
            if !x.is_finite() || x < var.lb - tol || x > var.ub + tol {
                return Err(format!("`{}` = {x} outside [{}, {}]", var.name, var.lb, var.ub));
            }
            if var.kind != VarKind::Continuous && (x - x.round()).abs() > tol {
                return Err(format!("`{}` = {x} is not integral", var.name));
            }
        }
        for c in &self.cons {
            let v = c.violation(values);
            if v > tol {
                return Err(format!("row `{}` violated by {v:e}", c.name));
            }
        }
        Ok(())
    }

    /// CPLEX LP text, one row per line.
    pub fn to_lp_string(&self) -> String {
        let names = self.lp_names();
        let mut s = String::new();
        let fmt_terms = |terms: &[(VarId, f64)]| -> String {
            if terms.is_empty() {
                return "0".into();
            }
            let mut out = String::new();
            for (i, (v, c)) in terms.iter().enumerate() {
                let sign = if *c < 0.0 { "-" } else { "+" };
                if i == 0 {
                    if *c < 0.0 {
                        out.push_str("- ");
                    }
                } else {
                    let _ = write!(out, " {sign} ");
                }
                let _ = write!(out, "{} {}", c.abs(), names[v.0]);
            }
            out
        };
        s.push_str("\\ minimization model\nMinimize\n");
        let _ = writeln!(s, " obj: {}", fmt_terms(&self.objective.terms));
        if self.objective.constant != 0.0 {
            let _ = writeln!(s, "\\ objective constant {}", self.objective.constant);
        }
        s.push_str("Subject To\n");
        for (i, c) in self.cons.iter().enumerate() {
            let name = lp_ident(&c.name, &format!("c{i}"));
            let _ = writeln!(s, " {name}_{i}: {} {} {}", fmt_terms(&c.terms), c.sense, c.rhs);
        }
        s.push_str("Bounds\n");
        for (v, n) in self.vars.iter().zip(&names) {
            let lb = if v.lb == f64::NEG_INFINITY { "-inf".to_string() } else { v.lb.to_string() };
            let ub = if v.ub == f64::INFINITY { "+inf".to_string() } else { v.ub.to_string() };
            let _ = writeln!(s, " {lb} <= {n} <= {ub}");
        }
        let generals: Vec<&str> = self
            .vars
            .iter()
            .zip(&names)
            .filter(|(v, _)| v.kind == VarKind::Integer)
            .map(|(_, n)| n.as_str())
            .collect();
        if !generals.is_empty() {
            s.push_str("Generals\n");
            for n in generals {
                let _ = writeln!(s, " {n}");
            }
        }
        let binaries: Vec<&str> = self
            .vars
            .iter()
            .zip(&names)
            .filter(|(v, _)| v.kind == VarKind::Binary)
            .map(|(_, n)| n.as_str())
            .collect();
        if !binaries.is_empty() {
            s.push_str("Binaries\n");
            for n in binaries {
                let _ = writeln!(s, " {n}");
            }
        }
        s.push_str("End\n");
        s
    }

    fn lp_names(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let base = lp_ident(&v.name, &format!("x{i}"));
                if seen.insert(base.clone()) {
                    base
                } else {
                    let n = format!("{base}_{i}");
                    seen.insert(n.clone());
                    n
                }
            })
            .collect()
    }
}

fn lp_ident(name: &str, fallback: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "_.[]".contains(c) { c } else { '_' })
        .collect();
    match s.chars().next() {
        None => fallback.to_string(),
        Some(c) if c.is_ascii_digit() || c == '.' => format!("v{s}"),
        _ => s,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveParams {
    /// Wall-clock budget in seconds for the whole pool.
    pub time_limit: f64,
    pub pool_size: usize,
    /// Relative and absolute optimality gap.
    pub mip_gap: f64,
    pub seed: u64,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams {
            time_limit: 120.0,
            pool_size: 10,
            mip_gap: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleTimeout,
    Infeasible,
    NoIncumbentTimeout,
    NumericFailure,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleTimeout => "feasible_timeout",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::NoIncumbentTimeout => "no_incumbent_timeout",
            SolveStatus::NumericFailure => "numeric_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    /// Indexed by `VarId`.
    pub values: Vec<f64>,
    pub objective: f64,
    pub optimal: bool,
}

impl PoolEntry {
    pub fn value(&self, v: VarId) -> f64 {
        self.values[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPool {
    pub status: SolveStatus,
    pub entries: Vec<PoolEntry>,
}

impl SolutionPool {
    pub fn best(&self) -> Option<&PoolEntry> {
        self.entries.first()
    }
}

enum Outcome {
    Found { values: Vec<f64>, optimal: bool },
    Infeasible,
    NoIncumbent,
    Failure(String),
}

/// Solves `model` and enumerates up to `pool_size` best distinct solutions.
pub fn solve(model: &MioModel, params: &SolveParams) -> Result<SolutionPool> {
    if !(params.time_limit > 0.0) || params.pool_size == 0 {
        return Err(Error::Config("time_limit must be positive and pool_size at least 1".into()));
    }
    let start = Instant::now();
    let mut cuts = CutSet::default();
    let mut status = None;
    let mut entries = Vec::new();
    for k in 0..params.pool_size {
        let remaining = params.time_limit - start.elapsed().as_secs_f64();
        if remaining <= 0.0 {
            if k == 0 {
                status = Some(SolveStatus::NoIncumbentTimeout);
            }
            break;
        }
        let outcome = solve_once(model, &cuts, params, remaining);
        match outcome {
            Outcome::Found { values, optimal } => {
                if k == 0 {
                    status = Some(if optimal {
                        SolveStatus::Optimal
                    } else {
                        SolveStatus::FeasibleTimeout
                    });
                }
                let objective = model.objective.eval(&values);
                cuts.exclude(model, &values);
                entries.push(PoolEntry {
                    values,
                    objective,
                    optimal,
                });
                if !optimal || cuts.exhausted {
                    break;
                }
            }
            Outcome::Infeasible => {
                if k == 0 {
                    status = Some(SolveStatus::Infeasible);
                }
                break;
            }
            Outcome::NoIncumbent => {
                if k == 0 {
                    status = Some(SolveStatus::NoIncumbentTimeout);
                }
                break;
            }
            Outcome::Failure(msg) => {
                log::warn!("solver failure: {msg}");
                if k == 0 {
                    status = Some(SolveStatus::NumericFailure);
                }
                break;
            }
        }
    }
    entries.sort_by(|a, b| a.objective.total_cmp(&b.objective));
    let status = status.unwrap_or(SolveStatus::NoIncumbentTimeout);
    if let Some(first) = entries.first_mut() {
        first.optimal = status == SolveStatus::Optimal;
    }
    Ok(SolutionPool { status, entries })
}

/// No-good cuts accumulated between pool solves.
#[derive(Default)]
struct CutSet {
    /// (terms, rhs) rows of the form `Σ terms ≥ rhs`, over original and auxiliary columns.
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    /// Auxiliary binaries `(var, above: bool, threshold)`: above ⇒ x ≥ t, else x ≤ t.
    aux: Vec<(usize, bool, f64)>,
    exhausted: bool,
}

impl CutSet {
    fn exclude(&mut self, model: &MioModel, values: &[f64]) {
        let n = model.vars.len();
        let mut terms = Vec::new();
        let mut rhs = 1.0;
        for (i, var) in model.vars.iter().enumerate() {
            if !var.pool_key || var.lb == var.ub {
                continue;
            }
            let x = values[i].round();
            match var.kind {
                VarKind::Binary => {
                    if x >= 0.5 {
                        terms.push((i, -1.0));
                        rhs -= 1.0;
                    } else {
                        terms.push((i, 1.0));
                    }
                }
                VarKind::Integer => {
                    if x < var.ub {
                        self.aux.push((i, true, x + 1.0));
                        terms.push((n + self.aux.len() - 1, 1.0));
                    }
                    if x > var.lb {
                        self.aux.push((i, false, x - 1.0));
                        terms.push((n + self.aux.len() - 1, 1.0));
                    }
                }
                VarKind::Continuous => {}
            }
        }
        if terms.is_empty() {
            self.exhausted = true;
        }
        self.rows.push((terms, rhs));
    }
}

fn solve_once(model: &MioModel, cuts: &CutSet, params: &SolveParams, time_limit: f64) -> Outcome {
    let mut pb = RowProblem::default();
    let mut cols = Vec::with_capacity(model.vars.len() + cuts.aux.len());
    for (i, v) in model.vars.iter().enumerate() {
        let cost = model
            .objective
            .terms
            .binary_search_by_key(&VarId(i), |t| t.0)
            .map_or(0.0, |k| model.objective.terms[k].1);
        let integer = v.kind != VarKind::Continuous;
        cols.push(pb.add_column_with_integrality(cost, v.lb..=v.ub, integer));
    }
    for _ in &cuts.aux {
        cols.push(pb.add_column_with_integrality(0.0, 0.0..=1.0, true));
    }
    for c in &model.cons {
        if c.terms.is_empty() {
            if c.violation(&[]) > FEAS_TOL {
                return Outcome::Infeasible;
            }
            continue;
        }
        let row: Vec<_> = c.terms.iter().filter(|t| t.1.abs() > TINY_COEF).map(|(v, k)| (cols[v.0], *k)).collect();
        match c.sense {
            Sense::Le => pb.add_row(..=c.rhs, row),
            Sense::Ge => pb.add_row(c.rhs.., row),
            Sense::Eq => pb.add_row(c.rhs..=c.rhs, row),
        }
    }
    let n = model.vars.len();
    for (a, &(i, above, t)) in cuts.aux.iter().enumerate() {
        let (lb, ub) = (model.vars[i].lb, model.vars[i].ub);
        let z = cols[n + a];
        if above {
            // x >= t - (t - lb)(1 - z)
            pb.add_row((lb).., [(cols[i], 1.0), (z, -(t - lb))]);
        } else {
            // x <= t + (ub - t)(1 - z)
            pb.add_row(..=ub, [(cols[i], 1.0), (z, ub - t)]);
        }
    }
    for (terms, rhs) in &cuts.rows {
        if terms.is_empty() {
            return Outcome::Infeasible;
        }
        pb.add_row(*rhs.., terms.iter().map(|(i, k)| (cols[*i], *k)));
    }
    if n + cuts.aux.len() == 0 {
        return Outcome::Found {
            values: Vec::new(),
            optimal: true,
        };
    }

    let mut m = pb.optimise(HSense::Minimise);
    configure(&mut m, params, time_limit);
    let solved = match m.try_solve() {
        Ok(s) => s,
        Err(e) => return Outcome::Failure(format!("{e:?}")),
    };
    let status = solved.status();
    let has_primal = solved.primal_solution_status() == HighsSolutionStatus::Feasible;
    let optimal = match status {
        HighsModelStatus::Optimal => true,
        HighsModelStatus::Infeasible | HighsModelStatus::UnboundedOrInfeasible => return Outcome::Infeasible,
        HighsModelStatus::ReachedTimeLimit | HighsModelStatus::ReachedInterrupt if has_primal => false,
        HighsModelStatus::ReachedTimeLimit | HighsModelStatus::ReachedInterrupt => return Outcome::NoIncumbent,
        other => return Outcome::Failure(format!("backend status {other:?}")),
    };
    if !has_primal {
        return Outcome::Failure("optimal status without a primal solution".into());
    }
    let raw: Vec<f64> = solved.get_solution().columns()[..n].to_vec();
    match polish(model, &raw, params) {
        Some(v) => Outcome::Found { values: v, optimal },
        None => match model.check(&raw, FEAS_TOL) {
            Ok(()) => Outcome::Found { values: raw, optimal },
            Err(msg) => Outcome::Failure(format!("incumbent failed verification: {msg}")),
        },
    }
}

fn configure(m: &mut highs::Model, params: &SolveParams, time_limit: f64) {
    m.make_quiet();
    m.set_option("threads", 1);
    m.set_option("random_seed", (params.seed % i32::MAX as u64) as i32);
    m.set_option("time_limit", time_limit.max(1e-6));
    m.set_option("mip_rel_gap", params.mip_gap);
    m.set_option("mip_abs_gap", params.mip_gap);
    m.set_option("mip_feasibility_tolerance", 1e-7);
    m.set_option("primal_feasibility_tolerance", 1e-9);
}

/// Re-solves the continuous part with integers fixed at their rounded values.
/// Returns a verified assignment or `None`.
fn polish(model: &MioModel, raw: &[f64], params: &SolveParams) -> Option<Vec<f64>> {
    let mut pb = RowProblem::default();
    let fixed: Vec<Option<f64>> = model
        .vars
        .iter()
        .zip(raw)
        .map(|(v, x)| (v.kind != VarKind::Continuous).then(|| x.round().clamp(v.lb, v.ub)))
        .collect();
    let mut cols = Vec::new();
    for (i, v) in model.vars.iter().enumerate() {
        let cost = model
            .objective
            .terms
            .binary_search_by_key(&VarId(i), |t| t.0)
            .map_or(0.0, |k| model.objective.terms[k].1);
        cols.push(match fixed[i] {
            Some(x) => pb.add_column(cost, x..=x),
            None => pb.add_column(cost, v.lb..=v.ub),
        });
    }
    for c in &model.cons {
        if c.terms.is_empty() {
            continue;
        }
        let row: Vec<_> = c.terms.iter().filter(|t| t.1.abs() > TINY_COEF).map(|(v, k)| (cols[v.0], *k)).collect();
        match c.sense {
            Sense::Le => pb.add_row(..=c.rhs, row),
            Sense::Ge => pb.add_row(c.rhs.., row),
            Sense::Eq => pb.add_row(c.rhs..=c.rhs, row),
        }
    }
    let mut m = pb.optimise(HSense::Minimise);
    configure(&mut m, params, 10.0);
    let solved = m.try_solve().ok()?;
    if solved.status() != HighsModelStatus::Optimal {
        return None;
    }
    let mut vals = solved.get_solution().columns().to_vec();
    for (v, f) in vals.iter_mut().zip(&fixed) {
        if let Some(x) = f {
            *v = *x;
        }
    }
    // clip tiny bound excursions of continuous columns
    for (x, var) in vals.iter_mut().zip(&model.vars) {
        *x = x.clamp(var.lb, var.ub);
    }
    model.check(&vals, FEAS_TOL).ok().map(|_| vals)
}
