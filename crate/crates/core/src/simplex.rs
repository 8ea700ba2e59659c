//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Sized for the broker programs: a few thousand rows at most, so a dense
//! tableau without factorization updates is the right trade. Infeasible and
//! Unbounded are ordinary statuses, not errors; only hitting the iteration
//! cap is an error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entries smaller than this are treated as zero when selecting pivots.
pub const PIVOT_TOLERANCE: f64 = 1e-10;
/// Constraint satisfaction tolerance.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
/// Hard cap on pivots across both phases.
pub const ITERATION_CAP: usize = 50_000;

#[derive(Debug, Error)]
pub enum SimplexError {
    #[error("iteration cap of {0} exceeded")]
    IterationLimit(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid program: {0}")]
    InvalidProgram(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
}

impl Relation {
    fn symbol(self) -> &'static str {
        match self {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

/// Per-variable bounds; infinities mark absent bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const NONNEGATIVE: Bounds = Bounds { lower: 0.0, upper: f64::INFINITY };
    pub const FREE: Bounds = Bounds { lower: f64::NEG_INFINITY, upper: f64::INFINITY };
}

/// A maximization program over real variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub bounds: Vec<Bounds>,
    pub names: Vec<String>,
}

impl LinearProgram {
    /// New program with all variables nonnegative and default names.
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LinearProgram {
            objective,
            constraints: Vec::new(),
            bounds: vec![Bounds::NONNEGATIVE; n],
            names: (0..n).map(|j| format!("x{j}")).collect(),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_constraint(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        self.constraints.push(Constraint { coeffs, relation, rhs });
    }

    pub fn validate(&self) -> Result<(), SimplexError> {
        if self.objective.is_empty() {
            return Err(SimplexError::InvalidProgram("at least one variable required".into()));
        }
        if self.bounds.len() != self.num_vars() || self.names.len() != self.num_vars() {
            return Err(SimplexError::DimensionMismatch(format!(
                "{} vars, {} bounds, {} names",
                self.num_vars(),
                self.bounds.len(),
                self.names.len()
            )));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != self.num_vars() {
                return Err(SimplexError::DimensionMismatch(format!(
                    "constraint {i} has {} coefficients, expected {}",
                    c.coeffs.len(),
                    self.num_vars()
                )));
            }
            if !c.rhs.is_finite() {
                return Err(SimplexError::InvalidProgram(format!(
                    "constraint {i} has non-finite rhs"
                )));
            }
        }
        Ok(())
    }

    /// Human-readable dump, one constraint per line.
    pub fn dump(&self) -> String {
        let term = |coeffs: &[f64]| {
            let mut parts = Vec::new();
            for (j, &a) in coeffs.iter().enumerate() {
                if a != 0.0 {
                    parts.push(format!("{:+.6}*{}", a, self.names[j]));
                }
            }
            if parts.is_empty() {
                "0".to_string()
            } else {
                parts.join(" ")
            }
        };
        let mut out = format!("maximize {}\n", term(&self.objective));
        for (i, c) in self.constraints.iter().enumerate() {
            out.push_str(&format!("r{}: {} {} {:.6}\n", i, term(&c.coeffs), c.relation.symbol(), c.rhs));
        }
        for (j, b) in self.bounds.iter().enumerate() {
            if b.lower != 0.0 || b.upper.is_finite() {
                out.push_str(&format!("bound: {} <= {} <= {}\n", b.lower, self.names[j], b.upper));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexSolution {
    pub status: SolveStatus,
    pub objective_value: f64,
    pub primal: Vec<f64>,
    pub iterations: usize,
}

/// How each original variable maps into the standardized column space.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// `x = offset + u`, `u >= 0`.
    Shifted { col: usize, offset: f64 },
    /// `x = offset - u`, `u >= 0` (finite upper bound, no lower bound).
    Mirrored { col: usize, offset: f64 },
    /// `x = u_pos - u_neg`.
    Split { pos: usize, neg: usize },
}

/// Equality-form program with nonnegative variables plus the bookkeeping to
/// map solutions back to the original space.
pub struct StandardForm {
    pub num_cols: usize,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    maps: Vec<VarMap>,
    /// Column usable as an initial basic variable per row (+1 coefficient),
    /// if any.
    ready_basis: Vec<Option<usize>>,
}

/// Result of standardization: contradictory bounds short-circuit to an
/// infeasibility signal rather than an error.
pub enum Standardized {
    Form(StandardForm),
    InfeasibleBounds { variable: usize },
}

/// Rewrites the program so that every variable is nonnegative and every
/// constraint is an equality with a slack column. Rows are equilibrated by
/// their largest coefficient magnitude.
pub fn to_standard_form(lp: &LinearProgram) -> Result<Standardized, SimplexError> {
    lp.validate()?;
    let n = lp.num_vars();
    let mut maps = Vec::with_capacity(n);
    let mut num_cols = 0usize;
    // (column, upper value) pairs needing an explicit upper-bound row.
    let mut upper_rows: Vec<(usize, f64)> = Vec::new();

    for (j, b) in lp.bounds.iter().enumerate() {
        if b.lower > b.upper {
            return Ok(Standardized::InfeasibleBounds { variable: j });
        }
        if b.lower.is_finite() {
            let col = num_cols;
            num_cols += 1;
            maps.push(VarMap::Shifted { col, offset: b.lower });
            if b.upper.is_finite() {
                upper_rows.push((col, b.upper - b.lower));
            }
        } else if b.upper.is_finite() {
            let col = num_cols;
            num_cols += 1;
            maps.push(VarMap::Mirrored { col, offset: b.upper });
        } else {
            let pos = num_cols;
            let neg = num_cols + 1;
            num_cols += 2;
            maps.push(VarMap::Split { pos, neg });
        }
    }

    let num_rows = lp.constraints.len() + upper_rows.len();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_rows);
    let mut rhs: Vec<f64> = Vec::with_capacity(num_rows);
    let mut relations: Vec<Relation> = Vec::with_capacity(num_rows);

    for c in &lp.constraints {
        let mut row = vec![0.0; num_cols];
        let mut b = c.rhs;
        for (j, &a) in c.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            match maps[j] {
                VarMap::Shifted { col, offset } => {
                    row[col] += a;
                    b -= a * offset;
                }
                VarMap::Mirrored { col, offset } => {
                    row[col] -= a;
                    b -= a * offset;
                }
                VarMap::Split { pos, neg } => {
                    row[pos] += a;
                    row[neg] -= a;
                }
            }
        }
        // Equilibrate so mixed scales (values near 1e4 next to probabilities)
        // do not distort pivot selection.
        let scale = row.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if scale > 0.0 {
            for v in row.iter_mut() {
                *v /= scale;
            }
            b /= scale;
        }
        rows.push(row);
        rhs.push(b);
        relations.push(c.relation);
    }
    for &(col, ub) in &upper_rows {
        let mut row = vec![0.0; num_cols];
        row[col] = 1.0;
        rows.push(row);
        rhs.push(ub);
        relations.push(Relation::Le);
    }

    // Slack columns turn inequalities into equalities; flip rows afterwards
    // so every rhs is nonnegative.
    let slack_base = num_cols;
    let num_slacks = relations.iter().filter(|r| **r != Relation::Eq).count();
    num_cols += num_slacks;
    let mut ready_basis = vec![None; rows.len()];
    let mut next_slack = slack_base;
    for (i, rel) in relations.iter().enumerate() {
        rows[i].resize(num_cols, 0.0);
        let mut slack_coef = match rel {
            Relation::Le => 1.0,
            Relation::Ge => -1.0,
            Relation::Eq => 0.0,
        };
        let slack_col = if *rel == Relation::Eq {
            None
        } else {
            let c = next_slack;
            next_slack += 1;
            Some(c)
        };
        // Flip rows so the rhs is nonnegative; also flip zero-rhs rows whose
        // slack would otherwise enter with a -1 coefficient, so their slack
        // can seed the starting basis instead of an artificial.
        if rhs[i] < 0.0 || (rhs[i] == 0.0 && slack_coef < 0.0) {
            for v in rows[i].iter_mut() {
                *v = -*v;
            }
            rhs[i] = -rhs[i];
            slack_coef = -slack_coef;
        }
        if let Some(c) = slack_col {
            rows[i][c] = slack_coef;
            if slack_coef > 0.0 {
                ready_basis[i] = Some(c);
            }
        }
    }

    Ok(Standardized::Form(StandardForm { num_cols, rows, rhs, maps, ready_basis }))
}

impl StandardForm {
    /// Recovers original-variable values from a standardized point.
    pub fn recover(&self, std_point: &[f64]) -> Vec<f64> {
        self.maps
            .iter()
            .map(|m| match *m {
                VarMap::Shifted { col, offset } => offset + std_point[col],
                VarMap::Mirrored { col, offset } => offset - std_point[col],
                VarMap::Split { pos, neg } => std_point[pos] - std_point[neg],
            })
            .collect()
    }

    /// Objective over standardized columns plus the constant term induced by
    /// the variable shifts.
    fn standard_objective(&self, objective: &[f64]) -> (Vec<f64>, f64) {
        let mut c = vec![0.0; self.num_cols];
        let mut constant = 0.0;
        for (j, &a) in objective.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            match self.maps[j] {
                VarMap::Shifted { col, offset } => {
                    c[col] += a;
                    constant += a * offset;
                }
                VarMap::Mirrored { col, offset } => {
                    c[col] -= a;
                    constant += a * offset;
                }
                VarMap::Split { pos, neg } => {
                    c[pos] += a;
                    c[neg] -= a;
                }
            }
        }
        (c, constant)
    }
}

struct Tableau {
    width: usize,
    /// Row-major body; last column is the rhs.
    body: Vec<f64>,
    obj: Vec<f64>,
    basis: Vec<usize>,
    /// The initial basic column of each row; the identity block these form
    /// drives the lexicographic ratio test.
    initial_basis: Vec<usize>,
    num_rows: usize,
    /// First artificial column, if any; artificials never re-enter.
    artificial_base: usize,
    iterations: usize,
}

impl Tableau {
    fn row(&self, i: usize) -> &[f64] {
        &self.body[i * self.width..(i + 1) * self.width]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.body[i * self.width + self.width - 1]
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width;
        let pivot_val = self.body[pr * w + pc];
        let (before, rest) = self.body.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        let inv = 1.0 / pivot_val;
        for v in prow.iter_mut() {
            *v *= inv;
        }
        prow[pc] = 1.0;
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * *p;
                }
                row[pc] = 0.0;
            }
        };
        for r in before.chunks_exact_mut(w) {
            eliminate(r);
        }
        for r in after.chunks_exact_mut(w) {
            eliminate(r);
        }
        eliminate(&mut self.obj);
        self.basis[pr] = pc;
        // Scrub tiny negative rhs noise so later ratio tests stay sane.
        for i in 0..self.num_rows {
            let cell = i * w + w - 1;
            if self.body[cell] < 0.0 && self.body[cell] > -1e-11 {
                self.body[cell] = 0.0;
            }
        }
    }

    /// Lexicographic comparison of two eligible leaving rows: candidate
    /// replaces the incumbent when its scaled row is lexicographically
    /// smaller. The comparison walks the rhs, then the initial identity
    /// block, which resolves degenerate ties after a handful of columns.
    fn lexico_smaller(&self, cand: usize, best: usize, pc: usize) -> bool {
        let w = self.width;
        let a_cand = self.body[cand * w + pc];
        let a_best = self.body[best * w + pc];
        for col in std::iter::once(w - 1).chain(self.initial_basis.iter().copied()) {
            let kc = self.body[cand * w + col] / a_cand;
            let kb = self.body[best * w + col] / a_best;
            let tol = 1e-12 * (1.0 + kc.abs() + kb.abs());
            if kc < kb - tol {
                return true;
            }
            if kc > kb + tol {
                return false;
            }
        }
        cand < best
    }

    /// Runs simplex iterations until optimality, an unbounded ray, or the
    /// iteration cap. `allowed_cols` bounds the entering-column search (used
    /// to keep artificials out in phase 2).
    ///
    /// Entering column: largest reduced cost, ties to the lowest index.
    /// Leaving row: lexicographic ratio test, the classical anti-cycling
    /// rule; it keeps every pivot choice unique and deterministic, which the
    /// heavily degenerate broker programs need.
    fn run(&mut self, allowed_cols: usize) -> Result<SolveStatus, SimplexError> {
        loop {
            if self.iterations >= ITERATION_CAP {
                return Err(SimplexError::IterationLimit(ITERATION_CAP));
            }
            let mut entering = None;
            let mut best_rc = PIVOT_TOLERANCE;
            for j in 0..allowed_cols {
                if self.obj[j] > best_rc {
                    best_rc = self.obj[j];
                    entering = Some(j);
                }
            }
            let Some(pc) = entering else {
                return Ok(SolveStatus::Optimal);
            };
            let mut leaving: Option<(usize, f64)> = None;
            for i in 0..self.num_rows {
                let a = self.body[i * self.width + pc];
                if a > PIVOT_TOLERANCE {
                    let ratio = self.rhs(i).max(0.0) / a;
                    let better = match leaving {
                        None => true,
                        Some((cur, best)) => {
                            let window = 1e-9 * (1.0 + best.abs());
                            if ratio < best - window {
                                true
                            } else if ratio <= best + window {
                                self.lexico_smaller(i, cur, pc)
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            let Some((pr, _)) = leaving else {
                return Ok(SolveStatus::Unbounded);
            };
            self.pivot(pr, pc);
            self.iterations += 1;
        }
    }
}

/// Solves the program with the two-phase primal simplex.
pub fn solve(lp: &LinearProgram) -> Result<SimplexSolution, SimplexError> {
    let form = match to_standard_form(lp)? {
        Standardized::Form(f) => f,
        Standardized::InfeasibleBounds { .. } => {
            return Ok(SimplexSolution {
                status: SolveStatus::Infeasible,
                objective_value: f64::NAN,
                primal: Vec::new(),
                iterations: 0,
            })
        }
    };

    let num_rows = form.rows.len();
    let artificial_rows: Vec<usize> = (0..num_rows)
        .filter(|&i| form.ready_basis[i].is_none())
        .collect();
    let artificial_base = form.num_cols;
    let width = form.num_cols + artificial_rows.len() + 1;

    let mut body = vec![0.0; num_rows * width];
    let mut basis = vec![0usize; num_rows];
    let mut next_artificial = artificial_base;
    for i in 0..num_rows {
        let dst = &mut body[i * width..i * width + form.num_cols];
        dst.copy_from_slice(&form.rows[i]);
        body[i * width + width - 1] = form.rhs[i];
        basis[i] = match form.ready_basis[i] {
            Some(c) => c,
            None => {
                let c = next_artificial;
                next_artificial += 1;
                body[i * width + c] = 1.0;
                c
            }
        };
    }

    let initial_basis = basis.clone();
    let mut tab = Tableau {
        width,
        body,
        obj: vec![0.0; width],
        basis,
        initial_basis,
        num_rows,
        artificial_base,
        iterations: 0,
    };

    // Phase 1: maximize minus the sum of artificials.
    if !artificial_rows.is_empty() {
        for c in artificial_base..width - 1 {
            tab.obj[c] = -1.0;
        }
        // Zero the reduced costs of the basic artificials.
        for i in 0..num_rows {
            if tab.basis[i] >= artificial_base {
                let row: Vec<f64> = tab.row(i).to_vec();
                for (v, r) in tab.obj.iter_mut().zip(row.iter()) {
                    *v += *r;
                }
            }
        }
        let status = tab.run(width - 1)?;
        debug_assert!(status != SolveStatus::Unbounded);
        // The objective row's last cell carries minus the phase objective, so
        // this is the residual sum of artificials.
        let infeasibility = tab.obj[width - 1];
        if infeasibility > FEASIBILITY_TOLERANCE {
            return Ok(SimplexSolution {
                status: SolveStatus::Infeasible,
                objective_value: f64::NAN,
                primal: Vec::new(),
                iterations: tab.iterations,
            });
        }
        // Drive remaining artificials out of the basis where possible;
        // all-zero rows are redundant and stay inert.
        for i in 0..num_rows {
            if tab.basis[i] >= tab.artificial_base {
                let pc = (0..form.num_cols)
                    .find(|&j| tab.body[i * width + j].abs() > PIVOT_TOLERANCE);
                if let Some(pc) = pc {
                    tab.pivot(i, pc);
                }
            }
        }
    }

    // Phase 2: restore the real objective and re-eliminate basic columns.
    let (std_obj, constant) = form.standard_objective(&lp.objective);
    tab.obj.fill(0.0);
    tab.obj[..form.num_cols].copy_from_slice(&std_obj);
    for i in 0..num_rows {
        let b = tab.basis[i];
        let cb = if b < form.num_cols { std_obj[b] } else { 0.0 };
        if cb != 0.0 {
            let row: Vec<f64> = tab.row(i).to_vec();
            for (v, r) in tab.obj.iter_mut().zip(row.iter()) {
                *v -= cb * *r;
            }
        }
    }
    let status = tab.run(form.num_cols)?;
    if status == SolveStatus::Unbounded {
        return Ok(SimplexSolution {
            status,
            objective_value: f64::INFINITY,
            primal: Vec::new(),
            iterations: tab.iterations,
        });
    }

    let mut std_point = vec![0.0; form.num_cols];
    for i in 0..num_rows {
        if tab.basis[i] < form.num_cols {
            std_point[tab.basis[i]] = tab.rhs(i);
        }
    }
    let primal = form.recover(&std_point);
    let objective_value: f64 = lp
        .objective
        .iter()
        .zip(&primal)
        .map(|(c, x)| c * x)
        .sum::<f64>();
    debug_assert!((objective_value - (std_obj.iter().zip(&std_point).map(|(c, x)| c * x).sum::<f64>() + constant)).abs() <= 1e-6 * objective_value.abs().max(1.0));
    Ok(SimplexSolution { status: SolveStatus::Optimal, objective_value, primal, iterations: tab.iterations })
}

/// Signed slack of one constraint at a point; nonnegative means satisfied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowSlack {
    pub index: usize,
    pub slack: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub rows: Vec<RowSlack>,
    pub bound_violations: Vec<RowSlack>,
    pub worst_violation: f64,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.rows.iter().all(|r| !r.violated) && self.bound_violations.iter().all(|r| !r.violated)
    }
}

/// Exact per-constraint and per-bound slack of `point`, flagging violations
/// beyond `tol`.
pub fn audit(lp: &LinearProgram, point: &[f64], tol: f64) -> Result<AuditReport, SimplexError> {
    lp.validate()?;
    if point.len() != lp.num_vars() {
        return Err(SimplexError::DimensionMismatch(format!(
            "point has {} entries, program has {} variables",
            point.len(),
            lp.num_vars()
        )));
    }
    let mut rows = Vec::with_capacity(lp.constraints.len());
    let mut worst = 0.0f64;
    for (i, c) in lp.constraints.iter().enumerate() {
        let value: f64 = c.coeffs.iter().zip(point).map(|(a, x)| a * x).sum();
        let slack = match c.relation {
            Relation::Le => c.rhs - value,
            Relation::Ge => value - c.rhs,
            Relation::Eq => -(value - c.rhs).abs(),
        };
        let violated = slack < -tol;
        if violated {
            worst = worst.max(-slack);
        }
        rows.push(RowSlack { index: i, slack, violated });
    }
    let mut bound_violations = Vec::new();
    for (j, b) in lp.bounds.iter().enumerate() {
        let mut slack = f64::INFINITY;
        if b.lower.is_finite() {
            slack = slack.min(point[j] - b.lower);
        }
        if b.upper.is_finite() {
            slack = slack.min(b.upper - point[j]);
        }
        if slack.is_finite() {
            let violated = slack < -tol;
            if violated {
                worst = worst.max(-slack);
            }
            bound_violations.push(RowSlack { index: j, slack, violated });
        }
    }
    Ok(AuditReport { rows, bound_violations, worst_violation: worst })
}
