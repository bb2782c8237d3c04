//! Exact LP solver for `max c·y  s.t.  A·y <= b,  0 <= y <= u`.
//!
//! Bounded-variable primal simplex on a dense tableau. Variables with
//! `u = 0` are fixed at zero and never enter the tableau, so the working
//! problem only carries the live columns. Pricing is Dantzig's largest
//! reduced cost; after a run of degenerate pivots the solver switches to
//! Bland's smallest-index rule, which cannot cycle.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod oracle;

pub const PIVOT_TOL: f64 = 1e-10;
const OPT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;
/// Consecutive degenerate pivots tolerated before switching to Bland's rule.
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("objective is unbounded")]
    Unbounded,
    #[error("iteration limit reached")]
    IterationLimit,
    #[error("malformed dump at line {0}")]
    Parse(usize),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseRow {
    pub entries: Vec<(usize, f64)>,
}

impl SparseRow {
    pub fn new(entries: Vec<(usize, f64)>) -> Self {
        Self { entries }
    }

    pub fn dot(&self, y: &[f64]) -> f64 {
        self.entries.iter().map(|(j, a)| a * y[*j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub y: Vec<f64>,
    pub objective_value: f64,
    pub status: LpStatus,
    /// Row duals from the final basis (zero for rows that never entered it).
    pub duals: Vec<f64>,
    pub pivots: usize,
}

impl LinearProgram {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.objective.len();
        if self.upper.len() != n {
            return Err(LpError::DimensionMismatch(format!(
                "{} objective entries, {} upper bounds",
                n,
                self.upper.len()
            )));
        }
        if self.rows.len() != self.rhs.len() {
            return Err(LpError::DimensionMismatch(format!(
                "{} rows, {} right-hand sides",
                self.rows.len(),
                self.rhs.len()
            )));
        }
        for (i, row) in self.rows.iter().enumerate() {
            for (j, a) in &row.entries {
                if *j >= n {
                    return Err(LpError::DimensionMismatch(format!(
                        "row {i} references variable {j} of {n}"
                    )));
                }
                if !a.is_finite() {
                    return Err(LpError::InvalidData(format!("row {i} coefficient")));
                }
            }
        }
        if self.rhs.iter().any(|b| !b.is_finite()) {
            return Err(LpError::InvalidData("non-finite rhs".into()));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(LpError::InvalidData("non-finite objective".into()));
        }
        if self.upper.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return Err(LpError::InvalidData("upper bounds must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Largest amount by which `y` violates a row or a bound.
    pub fn max_violation(&self, y: &[f64]) -> (f64, f64) {
        let rows = self
            .rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, b)| (r.dot(y) - b).max(0.0))
            .fold(0.0, f64::max);
        let bounds = y
            .iter()
            .zip(&self.upper)
            .map(|(v, u)| (-v).max(v - u).max(0.0))
            .fold(0.0, f64::max);
        (rows, bounds)
    }

    /// Fixed plain-text form, one record per line:
    /// `lp <vars> <rows>`, `c ...`, `u ...`, then `r <rhs> <j>:<a> ...` per row.
    /// Floats use shortest round-trip formatting.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "lp {} {}", self.objective.len(), self.rows.len());
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "c {}", join(&self.objective));
        let _ = writeln!(out, "u {}", join(&self.upper));
        for (row, b) in self.rows.iter().zip(&self.rhs) {
            let _ = write!(out, "r {b:?}");
            for (j, a) in &row.entries {
                let _ = write!(out, " {j}:{a:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self, LpError> {
        let mut lines = text.lines().enumerate();
        let mut next = |tag: &str| -> Result<(usize, Vec<String>), LpError> {
            let (no, line) = lines.next().ok_or(LpError::Parse(0))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(LpError::Parse(no + 1));
            }
            Ok((no + 1, parts.map(str::to_string).collect()))
        };
        let num = |no: usize, s: &str| s.parse::<f64>().map_err(|_| LpError::Parse(no));
        let (no, head) = next("lp")?;
        if head.len() != 2 {
            return Err(LpError::Parse(no));
        }
        let n: usize = head[0].parse().map_err(|_| LpError::Parse(no))?;
        let m: usize = head[1].parse().map_err(|_| LpError::Parse(no))?;
        let (no, c) = next("c")?;
        let objective = c.iter().map(|s| num(no, s)).collect::<Result<Vec<_>, _>>()?;
        let (no, u) = next("u")?;
        let upper = u.iter().map(|s| num(no, s)).collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::with_capacity(m);
        let mut rhs = Vec::with_capacity(m);
        for _ in 0..m {
            let (no, parts) = next("r")?;
            let b = num(no, parts.first().ok_or(LpError::Parse(no))?)?;
            let mut entries = Vec::new();
            for p in &parts[1..] {
                let (j, a) = p.split_once(':').ok_or(LpError::Parse(no))?;
                entries.push((j.parse().map_err(|_| LpError::Parse(no))?, num(no, a)?));
            }
            rows.push(SparseRow { entries });
            rhs.push(b);
        }
        if objective.len() != n {
            return Err(LpError::Parse(2));
        }
        Ok(Self {
            objective,
            rows,
            rhs,
            upper,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Structural,
    Slack,
    Artificial,
}

/// Dense bounded-variable tableau over live structurals, slacks and
/// (phase one only) artificials. Every column has lower bound 0.
struct Tableau {
    m: usize,
    cols: usize,
    /// Row-major `m x cols`, holds B⁻¹A.
    t: Vec<f64>,
    /// Values of basic variables.
    xb: Vec<f64>,
    basis: Vec<usize>,
    upper: Vec<f64>,
    at_upper: Vec<bool>,
    is_basic: Vec<bool>,
    /// Reduced costs `c_j - c_B B⁻¹ A_j` for the current phase.
    d: Vec<f64>,
    pivots: usize,
}

impl Tableau {
    fn price(&mut self, cost: &[f64]) {
        self.d.copy_from_slice(cost);
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.t[i * self.cols..(i + 1) * self.cols];
                for (dj, a) in self.d.iter_mut().zip(row) {
                    *dj -= cb * a;
                }
            }
        }
        for &b in &self.basis {
            self.d[b] = 0.0;
        }
    }

    fn entering(&self, bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = 0.0;
        for j in 0..self.cols {
            if self.is_basic[j] || self.upper[j] <= 0.0 {
                continue;
            }
            let dir = if self.at_upper[j] { -1.0 } else { 1.0 };
            let score = dir * self.d[j];
            if score > OPT_TOL {
                if bland {
                    return Some((j, dir));
                }
                if score > best_score {
                    best_score = score;
                    best = Some((j, dir));
                }
            }
        }
        best
    }

    /// One simplex iteration. `None` at optimality, otherwise whether the
    /// step was degenerate.
    fn step(&mut self, bland: bool) -> Result<Option<bool>, LpError> {
        let Some((j, dir)) = self.entering(bland) else {
            return Ok(None);
        };
        let mut theta = self.upper[j];
        let mut leave: Option<(usize, bool)> = None;
        for i in 0..self.m {
            let a = self.t[i * self.cols + j];
            if a.abs() <= PIVOT_TOL {
                continue;
            }
            // x_B[i] moves by -dir * a * θ.
            let rate = -dir * a;
            let b = self.basis[i];
            let (limit, to_upper) = if rate < 0.0 {
                (self.xb[i].max(0.0) / -rate, false)
            } else if self.upper[b].is_finite() {
                ((self.upper[b] - self.xb[i]).max(0.0) / rate, true)
            } else {
                continue;
            };
            let better = if limit < theta - 1e-15 {
                true
            } else if limit <= theta + 1e-15 {
                // Ties with a bound flip keep the flip; ties between rows
                // use Bland's index order or the larger pivot.
                match leave {
                    None => false,
                    Some((r, _)) if bland => b < self.basis[r],
                    Some((r, _)) => a.abs() > self.t[r * self.cols + j].abs(),
                }
            } else {
                false
            };
            if better {
                theta = limit.min(theta);
                leave = Some((i, to_upper));
            }
        }
        if !theta.is_finite() {
            return Err(LpError::Unbounded);
        }
        for i in 0..self.m {
            let a = self.t[i * self.cols + j];
            if a != 0.0 {
                self.xb[i] -= dir * a * theta;
            }
        }
        let degenerate = theta <= 1e-12;
        match leave {
            None => {
                // Bound flip.
                self.at_upper[j] = !self.at_upper[j];
            }
            Some((r, to_upper)) => {
                let entering_value = if self.at_upper[j] {
                    self.upper[j] - theta
                } else {
                    theta
                };
                let old = self.basis[r];
                self.pivot(r, j);
                self.is_basic[old] = false;
                self.at_upper[old] = to_upper;
                self.is_basic[j] = true;
                self.at_upper[j] = false;
                self.basis[r] = j;
                self.xb[r] = entering_value;
            }
        }
        self.pivots += 1;
        Ok(Some(degenerate))
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let p = self.t[r * cols + j];
        let (before, rest) = self.t.split_at_mut(r * cols);
        let (prow, after) = rest.split_at_mut(cols);
        for v in prow.iter_mut() {
            *v /= p;
        }
        prow[j] = 1.0;
        let eliminate = |row: &mut [f64]| {
            let f = row[j];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * pv;
                }
                row[j] = 0.0;
            }
        };
        for row in before.chunks_mut(cols) {
            eliminate(row);
        }
        for row in after.chunks_mut(cols) {
            eliminate(row);
        }
        let f = self.d[j];
        if f != 0.0 {
            for (v, pv) in self.d.iter_mut().zip(prow.iter()) {
                *v -= f * pv;
            }
            self.d[j] = 0.0;
        }
    }

    fn optimize(&mut self, cost: &[f64]) -> Result<(), LpError> {
        self.price(cost);
        let limit = 50 * (self.m + self.cols) + 1000;
        let mut degenerate_run = 0;
        for _ in 0..limit {
            let bland = degenerate_run >= DEGENERATE_RUN;
            match self.step(bland)? {
                None => return Ok(()),
                Some(true) => degenerate_run += 1,
                Some(false) => degenerate_run = 0,
            }
        }
        Err(LpError::IterationLimit)
    }

    fn value(&self, col: usize) -> f64 {
        if self.is_basic[col] {
            let i = self.basis.iter().position(|&b| b == col).unwrap();
            self.xb[i]
        } else if self.at_upper[col] {
            self.upper[col]
        } else {
            0.0
        }
    }
}

/// Solves the LP to optimality, or reports infeasibility.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let n = lp.num_vars();
    let live: Vec<usize> = (0..n).filter(|&j| lp.upper[j] > 0.0).collect();
    let mut col_of = vec![usize::MAX; n];
    for (k, &j) in live.iter().enumerate() {
        col_of[j] = k;
    }

    // Rows touching at least one live variable; the rest only need b >= 0.
    let mut kept: Vec<usize> = Vec::new();
    for (i, row) in lp.rows.iter().enumerate() {
        let touches = row
            .entries
            .iter()
            .any(|(j, a)| col_of[*j] != usize::MAX && *a != 0.0);
        if touches {
            kept.push(i);
        } else if lp.rhs[i] < -FEAS_TOL {
            return Ok(infeasible(lp));
        }
    }

    let m = kept.len();
    let nl = live.len();
    let flipped: Vec<bool> = kept.iter().map(|&i| lp.rhs[i] < 0.0).collect();
    let n_art = flipped.iter().filter(|f| **f).count();
    let cols = nl + m + n_art;
    let mut t = vec![0.0; m * cols];
    let mut xb = vec![0.0; m];
    let mut basis = vec![0; m];
    let mut kind = vec![Kind::Structural; cols];
    let mut upper = vec![f64::INFINITY; cols];
    for (k, &j) in live.iter().enumerate() {
        upper[k] = lp.upper[j];
    }
    let mut art = nl + m;
    for (r, &i) in kept.iter().enumerate() {
        let sign = if flipped[r] { -1.0 } else { 1.0 };
        let row = &mut t[r * cols..(r + 1) * cols];
        for (j, a) in &lp.rows[i].entries {
            if col_of[*j] != usize::MAX {
                row[col_of[*j]] += sign * a;
            }
        }
        row[nl + r] = sign;
        kind[nl + r] = Kind::Slack;
        xb[r] = sign * lp.rhs[i];
        if flipped[r] {
            row[art] = 1.0;
            kind[art] = Kind::Artificial;
            basis[r] = art;
            art += 1;
        } else {
            basis[r] = nl + r;
        }
    }
    let mut is_basic = vec![false; cols];
    for &b in &basis {
        is_basic[b] = true;
    }
    let mut tab = Tableau {
        m,
        cols,
        t,
        xb,
        basis,
        upper,
        at_upper: vec![false; cols],
        is_basic,
        d: vec![0.0; cols],
        pivots: 0,
    };

    if n_art > 0 {
        let phase1: Vec<f64> = kind
            .iter()
            .map(|k| if *k == Kind::Artificial { -1.0 } else { 0.0 })
            .collect();
        tab.optimize(&phase1)?;
        let infeas: f64 = (0..cols)
            .filter(|&c| kind[c] == Kind::Artificial)
            .map(|c| tab.value(c))
            .sum();
        if infeas > FEAS_TOL {
            return Ok(infeasible(lp));
        }
        for c in 0..cols {
            if kind[c] == Kind::Artificial {
                tab.upper[c] = 0.0;
                tab.at_upper[c] = false;
            }
        }
        for i in 0..m {
            if kind[tab.basis[i]] == Kind::Artificial {
                tab.xb[i] = 0.0;
            }
        }
    }

    let mut cost = vec![0.0; cols];
    for (k, &j) in live.iter().enumerate() {
        cost[k] = lp.objective[j];
    }
    tab.optimize(&cost)?;

    let mut y = vec![0.0; n];
    for (k, &j) in live.iter().enumerate() {
        y[j] = tab.value(k).clamp(0.0, lp.upper[j]);
    }
    // Slack reduced cost is -π_i; a flipped row negates both the row and
    // its slack column, so the relation holds unchanged.
    let mut duals = vec![0.0; lp.rows.len()];
    for (r, &i) in kept.iter().enumerate() {
        duals[i] = -tab.d[nl + r];
    }
    let objective_value = lp.objective.iter().zip(&y).map(|(c, v)| c * v).sum();
    Ok(LpSolution {
        y,
        objective_value,
        status: LpStatus::Optimal,
        duals,
        pivots: tab.pivots,
    })
}

fn infeasible(lp: &LinearProgram) -> LpSolution {
    LpSolution {
        y: vec![0.0; lp.num_vars()],
        objective_value: f64::NEG_INFINITY,
        status: LpStatus::Infeasible,
        duals: vec![0.0; lp.rows.len()],
        pivots: 0,
    }
}

/// Optimality certificate: the larger of the primal feasibility residual
/// and the complementary-slackness residual of the basis duals, relative
/// to `max(1, Σ|c_j|·u_j)`.
///
/// With row duals π (clipped at zero) and reduced costs `r = c - Aᵀπ`, the
/// slackness terms are `π_i·(b_i - A_i y)`, `max(r_j,0)·(u_j - y_j)` and
/// `max(-r_j,0)·y_j`; their sum is the duality gap of the certificate.
pub fn duality_gap_check(lp: &LinearProgram, sol: &LpSolution) -> f64 {
    let scale = lp
        .objective
        .iter()
        .zip(&lp.upper)
        .map(|(c, u)| c.abs() * u)
        .sum::<f64>()
        .max(1.0);
    let (row_viol, bound_viol) = lp.max_violation(&sol.y);
    let primal = row_viol.max(bound_viol);

    let pi: Vec<f64> = sol.duals.iter().map(|p| p.max(0.0)).collect();
    let dual_sign: f64 = sol.duals.iter().map(|p| (-p).max(0.0)).fold(0.0, f64::max);
    let mut reduced = lp.objective.clone();
    for (row, p) in lp.rows.iter().zip(&pi) {
        if *p != 0.0 {
            for (j, a) in &row.entries {
                reduced[*j] -= p * a;
            }
        }
    }
    let mut slack_terms = 0.0;
    for ((row, b), p) in lp.rows.iter().zip(&lp.rhs).zip(&pi) {
        slack_terms += p * (b - row.dot(&sol.y)).max(0.0);
    }
    for j in 0..lp.num_vars() {
        let r = reduced[j];
        slack_terms += r.max(0.0) * (lp.upper[j] - sol.y[j]).max(0.0);
        slack_terms += (-r).max(0.0) * sol.y[j].max(0.0);
    }
    primal.max(slack_terms / scale).max(dual_sign / scale)
}
