//! Dense convex QP solver.
//!
//! Solves `min 0.5 y'Py + q'y  s.t.  l <= Ay <= u` with the dual active-set
//! method of Goldfarb and Idnani. The Hessian must be positive definite.
//! Each two-sided row becomes up to two one-sided constraints (or one
//! equality when `l == u`); rows are normalized and stored sparsely.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    /// Warm start point; rows tight at `y0` seed the active set.
    pub y0: Option<DVector<f64>>,
    /// Warm active set; takes precedence over `y0`.
    pub active0: Option<Vec<(usize, ActiveBound)>>,
}

/// Which side of a row is held active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActiveBound {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max_iter",
            QpStatus::PrimalInfeasible => "primal_infeasible",
        }
    }
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub y: DVector<f64>,
    /// Row multipliers with `Py + q + A'duals = 0`; positive on upper bounds.
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
    /// Rows active at return; equality rows are reported as `Lower`.
    pub active: Vec<(usize, ActiveBound)>,
}

impl QpSolution {
    pub fn kkt_residual(&self) -> f64 {
        self.primal_residual.max(self.dual_residual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 4000 }
    }
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Self {
        Self { p, q, a, l, u, y0: None, active0: None }
    }

    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self::new(p, q, DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    pub fn with_warm_start(mut self, y0: DVector<f64>) -> Self {
        self.y0 = Some(y0);
        self
    }

    pub fn with_active_set(mut self, active: Vec<(usize, ActiveBound)>) -> Self {
        self.active0 = Some(active);
        self
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_rows(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        let m = self.l.len();
        if self.p.shape() != (n, n) || self.a.shape() != (m, n) || self.u.len() != m {
            return Err(Error::Qp(format!(
                "inconsistent dimensions: P {:?}, q {}, A {:?}, l {}, u {}",
                self.p.shape(),
                n,
                self.a.shape(),
                m,
                self.u.len()
            )));
        }
        if let Some(y0) = &self.y0 {
            if y0.len() != n {
                return Err(Error::Qp("warm start has the wrong length".into()));
            }
        }
        if self.active0.as_ref().is_some_and(|a| a.iter().any(|&(r, _)| r >= m)) {
            return Err(Error::Qp("warm active set refers to a missing row".into()));
        }
        let scale = self.p.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (self.p[(i, j)] - self.p[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Qp("P is not symmetric".into()));
                }
            }
        }
        for i in 0..m {
            if self.l[i] > self.u[i] || self.l[i].is_nan() || self.u[i].is_nan() {
                return Err(Error::Qp(format!("row {i} has l > u")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.p * y)) + self.q.dot(y)
    }

    /// Parses the text format: `n m`, then `P` (n rows), `q`, `A` (m rows),
    /// `l`, `u`, all whitespace separated; `inf`/`-inf` allowed in bounds and
    /// `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
        let mut next_usize = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("{what}: {e}")))
        };
        let n = next_usize("variable count")?;
        let m = next_usize("row count")?;
        let rest: Vec<f64> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .skip(2)
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad number {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        let expected = n * n + n + m * n + 2 * m;
        if rest.len() != expected {
            return Err(Error::Parse(format!("expected {expected} numbers after the header, found {}", rest.len())));
        }
        let mut at = 0;
        let mut take = |k: usize| {
            let s = &rest[at..at + k];
            at += k;
            s.to_vec()
        };
        let p = DMatrix::from_row_slice(n, n, &take(n * n));
        let q = DVector::from_vec(take(n));
        let a = DMatrix::from_row_slice(m, n, &take(m * n));
        let l = DVector::from_vec(take(m));
        let u = DVector::from_vec(take(m));
        let prob = Self::new(p, q, a, l, u);
        prob.validate()?;
        Ok(prob)
    }
}

/// One-sided constraint `sign * a_row . y >= b` on a normalized row.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    row: usize,
    sign: f64,
    b: f64,
    equality: bool,
}

struct SparseRows {
    start: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
    scale: Vec<f64>,
}

impl SparseRows {
    fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut rows = SparseRows { start: vec![0], idx: Vec::new(), val: Vec::new(), scale: Vec::with_capacity(m) };
        for i in 0..m {
            let norm = a.row(i).norm();
            let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            for j in 0..n {
                let v = a[(i, j)];
                if v != 0.0 {
                    rows.idx.push(j);
                    rows.val.push(v * inv);
                }
            }
            rows.start.push(rows.idx.len());
            rows.scale.push(norm);
        }
        rows
    }

    fn dot(&self, row: usize, x: &DVector<f64>) -> f64 {
        let r = self.start[row]..self.start[row + 1];
        self.idx[r.clone()].iter().zip(&self.val[r]).map(|(&j, &v)| v * x[j]).sum()
    }

    /// `J' n` for the normalized row times `sign`.
    fn project(&self, row: usize, sign: f64, j: &DMatrix<f64>, out: &mut DVector<f64>) {
        let r = self.start[row]..self.start[row + 1];
        let n = j.ncols();
        for c in 0..n {
            let col = j.column(c);
            let mut s = 0.0;
            for (&k, &v) in self.idx[r.clone()].iter().zip(&self.val[r.clone()]) {
                s += v * col[k];
            }
            out[c] = sign * s;
        }
    }
}

/// Givens rotation `(c, s)` with `c a + s b = hypot(a, b)` and `-s a + c b = 0`.
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let rows = m.nrows();
    for r in 0..rows {
        let (a, b) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * a + s * b;
        m[(r, j)] = -s * a + c * b;
    }
}

/// Active-set factorization: `J' N = [R; 0]` with `R` upper triangular.
struct ActiveSet {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    cons: Vec<usize>,
    mult: Vec<f64>,
}

impl ActiveSet {
    fn len(&self) -> usize {
        self.cons.len()
    }

    /// Adds a constraint given `d = J' n`. Returns false when the normal is
    /// linearly dependent on the active ones.
    fn add(&mut self, d: &mut DVector<f64>, con: usize, mult: f64) -> bool {
        let q = self.len();
        let n = d.len();
        if q >= n {
            return false;
        }
        let tail = d.rows(q, n - q).norm();
        if tail <= 1e-12 * d.norm().max(1e-300) {
            return false;
        }
        for k in (q + 1..n).rev() {
            if d[k] == 0.0 {
                continue;
            }
            let (c, s, h) = givens(d[k - 1], d[k]);
            d[k - 1] = h;
            d[k] = 0.0;
            rotate_columns(&mut self.j, k - 1, k, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.cons.push(con);
        self.mult.push(mult);
        true
    }

    fn drop(&mut self, k: usize) {
        let q = self.len();
        for c in k..q - 1 {
            for i in 0..=c + 1 {
                self.r[(i, c)] = self.r[(i, c + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        for c in k..q - 1 {
            let (co, si, h) = givens(self.r[(c, c)], self.r[(c + 1, c)]);
            self.r[(c, c)] = h;
            self.r[(c + 1, c)] = 0.0;
            for col in c + 1..q - 1 {
                let (a, b) = (self.r[(c, col)], self.r[(c + 1, col)]);
                self.r[(c, col)] = co * a + si * b;
                self.r[(c + 1, col)] = -si * a + co * b;
            }
            rotate_columns(&mut self.j, c, c + 1, co, si);
        }
        self.cons.remove(k);
        self.mult.remove(k);
    }

    /// Solves `R x = b` for the leading `q` entries.
    fn solve_r(&self, b: &[f64]) -> Vec<f64> {
        let q = self.len();
        let mut x = b[..q].to_vec();
        for i in (0..q).rev() {
            let mut s = x[i];
            for k in i + 1..q {
                s -= self.r[(i, k)] * x[k];
            }
            x[i] = s / self.r[(i, i)];
        }
        x
    }

    /// Solves `R' x = b`.
    fn solve_rt(&self, b: &[f64]) -> Vec<f64> {
        let q = self.len();
        let mut x = b[..q].to_vec();
        for i in 0..q {
            let mut s = x[i];
            for k in 0..i {
                s -= self.r[(k, i)] * x[k];
            }
            x[i] = s / self.r[(i, i)];
        }
        x
    }
}

/// Reusable solver; caches the inverse Cholesky factor of the last Hessian.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    cache: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings, cache: None }
    }

    fn inverse_factor(&mut self, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if let Some((cached_p, j0)) = &self.cache {
            if cached_p == p {
                return Ok(j0.clone());
            }
        }
        let chol = p.clone().cholesky().ok_or_else(|| Error::Qp("Hessian is not positive definite".into()))?;
        let n = p.nrows();
        let linv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Qp("singular Cholesky factor".into()))?;
        let j0 = linv.transpose();
        self.cache = Some((p.clone(), j0.clone()));
        Ok(j0)
    }

    pub fn solve(&mut self, prob: &QpProblem) -> Result<QpSolution> {
        prob.validate()?;
        let n = prob.num_vars();
        let m = prob.num_rows();
        let tol = self.settings.tol;
        let j0 = self.inverse_factor(&prob.p)?;
        let rows = SparseRows::new(&prob.a);

        let mut cons = Vec::with_capacity(2 * m);
        for i in 0..m {
            let s = rows.scale[i];
            let (l, u) = (prob.l[i], prob.u[i]);
            if s == 0.0 {
                if l > tol || u < -tol {
                    return Ok(self.finish(prob, &rows, DVector::zeros(n), &[], &[], QpStatus::PrimalInfeasible, 0));
                }
                continue;
            }
            if l == u {
                cons.push(Constraint { row: i, sign: 1.0, b: l / s, equality: true });
                continue;
            }
            if l.is_finite() {
                cons.push(Constraint { row: i, sign: 1.0, b: l / s, equality: false });
            }
            if u.is_finite() {
                cons.push(Constraint { row: i, sign: -1.0, b: -u / s, equality: false });
            }
        }
        let slack = |c: &Constraint, x: &DVector<f64>| c.sign * rows.dot(c.row, x) - c.b;
        let viol_tol = |c: &Constraint| 1e-10 * (1.0 + c.b.abs());

        let mut act = ActiveSet { j: j0, r: DMatrix::zeros(n, n), cons: Vec::new(), mult: Vec::new() };
        let mut is_active = vec![false; cons.len()];
        let mut d = DVector::zeros(n);
        let mut iterations = 0usize;

        // initial active set: equalities, then warm-start actives
        let mut initial: Vec<usize> = (0..cons.len()).filter(|&k| cons[k].equality).collect();
        if let Some(active0) = &prob.active0 {
            let mut by_row = vec![[None; 2]; m];
            for (k, c) in cons.iter().enumerate().filter(|(_, c)| !c.equality) {
                by_row[c.row][usize::from(c.sign < 0.0)] = Some(k);
            }
            initial
                .extend(active0.iter().filter_map(|&(row, side)| by_row[row][usize::from(side == ActiveBound::Upper)]));
        } else if let Some(y0) = &prob.y0 {
            initial.extend(
                (0..cons.len())
                    .filter(|&k| !cons[k].equality && slack(&cons[k], y0).abs() <= 1e-8 * (1.0 + cons[k].b.abs())),
            );
        }
        for k in initial {
            let c = cons[k];
            rows.project(c.row, c.sign, &act.j, &mut d);
            if act.add(&mut d, k, 0.0) {
                is_active[k] = true;
            }
        }
        let mut x;
        loop {
            let q = act.len();
            let jta = act.j.tr_mul(&prob.q);
            let b: Vec<f64> = act.cons.iter().map(|&k| cons[k].b).collect();
            let w1 = act.solve_rt(&b);
            let rhs: Vec<f64> = (0..q).map(|i| w1[i] + jta[i]).collect();
            let u = act.solve_r(&rhs);
            let mut w = -jta.clone();
            for i in 0..q {
                w[i] = w1[i];
            }
            x = &act.j * w;
            act.mult.copy_from_slice(&u);
            let worst = (0..q)
                .filter(|&i| !cons[act.cons[i]].equality && act.mult[i] < 0.0)
                .min_by(|&a, &b| act.mult[a].total_cmp(&act.mult[b]));
            match worst {
                Some(i) => {
                    is_active[act.cons[i]] = false;
                    act.drop(i);
                    iterations += 1;
                }
                None => break,
            }
        }

        let mut z = DVector::zeros(n);
        loop {
            // most violated inactive constraint
            let mut pick: Option<(usize, f64, f64)> = None;
            for (k, c) in cons.iter().enumerate() {
                if is_active[k] {
                    continue;
                }
                let mut s = slack(c, &x);
                let mut sign = 1.0;
                if c.equality && s > 0.0 {
                    s = -s;
                    sign = -1.0;
                }
                if s < -viol_tol(c) && pick.is_none_or(|(_, best, _)| s < best) {
                    pick = Some((k, s, sign));
                }
            }
            let Some((p, _, flip)) = pick else {
                let active: Vec<(Constraint, f64)> =
                    act.cons.iter().zip(&act.mult).map(|(&k, &u)| (cons[k], u)).collect();
                let (cs, us): (Vec<_>, Vec<_>) = active.into_iter().unzip();
                return Ok(self.finish(prob, &rows, x, &cs, &us, QpStatus::Optimal, iterations));
            };
            if flip < 0.0 {
                cons[p].sign = -cons[p].sign;
                cons[p].b = -cons[p].b;
            }
            let cp = cons[p];
            let mut u_p = 0.0;
            loop {
                iterations += 1;
                if iterations > self.settings.max_iter {
                    return Ok(self.finish_unconverged(prob, &rows, x, &act, &cons, QpStatus::MaxIter, iterations));
                }
                let q = act.len();
                rows.project(cp.row, cp.sign, &act.j, &mut d);
                z.fill(0.0);
                for c in q..n {
                    z.axpy(d[c], &act.j.column(c), 1.0);
                }
                let rstep = act.solve_r(d.as_slice());
                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for i in 0..q {
                    if !cons[act.cons[i]].equality && rstep[i] > 0.0 {
                        let t = act.mult[i] / rstep[i];
                        if t < t1 {
                            t1 = t;
                            drop_at = Some(i);
                        }
                    }
                }
                let zn: f64 = d.rows(q, n - q).norm_squared();
                let s_p = slack(&cp, &x);
                let t2 = if zn > 1e-24 { -s_p / zn } else { f64::INFINITY };
                if t1.is_infinite() && t2.is_infinite() {
                    let cs: Vec<Constraint> = act.cons.iter().map(|&k| cons[k]).collect();
                    let us = act.mult.clone();
                    return Ok(self.finish(prob, &rows, x, &cs, &us, QpStatus::PrimalInfeasible, iterations));
                }
                if t2.is_infinite() {
                    for i in 0..q {
                        act.mult[i] -= t1 * rstep[i];
                    }
                    u_p += t1;
                    let i = drop_at.expect("finite t1 has a blocking constraint");
                    is_active[act.cons[i]] = false;
                    act.drop(i);
                    continue;
                }
                let t = t1.min(t2);
                x.axpy(t, &z, 1.0);
                for i in 0..q {
                    act.mult[i] -= t * rstep[i];
                }
                u_p += t;
                if t2 <= t1 {
                    rows.project(cp.row, cp.sign, &act.j, &mut d);
                    if act.add(&mut d, p, u_p) {
                        is_active[p] = true;
                    }
                    break;
                }
                let i = drop_at.expect("partial step has a blocking constraint");
                is_active[act.cons[i]] = false;
                act.drop(i);
            }
        }
    }

    fn finish_unconverged(
        &self,
        prob: &QpProblem,
        rows: &SparseRows,
        x: DVector<f64>,
        act: &ActiveSet,
        cons: &[Constraint],
        status: QpStatus,
        iterations: usize,
    ) -> QpSolution {
        let cs: Vec<Constraint> = act.cons.iter().map(|&k| cons[k]).collect();
        self.finish(prob, rows, x, &cs, &act.mult, status, iterations)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        prob: &QpProblem,
        rows: &SparseRows,
        y: DVector<f64>,
        active: &[Constraint],
        mult: &[f64],
        status: QpStatus,
        iterations: usize,
    ) -> QpSolution {
        let m = prob.num_rows();
        let mut duals: DVector<f64> = DVector::zeros(m);
        for (c, &u) in active.iter().zip(mult) {
            duals[c.row] -= c.sign * u / rows.scale[c.row];
        }
        let ay = &prob.a * &y;
        let mut primal: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for i in 0..m {
            let v = ay[i];
            primal = primal.max(prob.l[i] - v).max(v - prob.u[i]);
            let lam = duals[i];
            if lam > 0.0 {
                comp = comp.max(lam * (prob.u[i] - v).abs());
            } else if lam < 0.0 {
                comp = comp.max(-lam * (v - prob.l[i]).abs());
            }
        }
        let grad = &prob.p * &y + &prob.q + prob.a.tr_mul(&duals);
        let active = active
            .iter()
            .map(|c| (c.row, if c.equality || c.sign > 0.0 { ActiveBound::Lower } else { ActiveBound::Upper }))
            .collect();
        QpSolution {
            active,
            objective: prob.objective(&y),
            y,
            duals,
            status,
            iterations,
            primal_residual: primal.max(0.0),
            dual_residual: if grad.is_empty() { 0.0 } else { grad.amax() },
            complementarity: comp,
        }
    }
}

/// One-shot solve with default iteration cap.
pub fn solve(prob: &QpProblem, tol: f64) -> Result<QpSolution> {
    QpSolver::new(QpSettings { tol, ..QpSettings::default() }).solve(prob)
}
