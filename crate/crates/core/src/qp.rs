//! Dense convex QP `min 1/2 x'Hx + f'x  s.t.  l <= Ax <= u` by ADMM
//! (OSQP-style splitting) with Ruiz equilibration, adaptive step size and
//! active-set polishing.
//!
//! `H` and `A` are fixed when the solver is built; `f`, `l`, `u` change per
//! solve, which is the shape of a receding-horizon problem.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub check_every: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 0.0,
            eps_infeasible: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_every: 10,
            polish: true,
        }
    }
}

/// A named range of constraint rows, used to report infeasibility.
#[derive(Debug, Clone, PartialEq)]
pub struct RowBlock {
    pub name: &'static str,
    pub rows: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint multipliers: negative at an active lower bound, positive at
    /// an active upper bound.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `1/2 x'Hx + f'x`.
    pub objective: f64,
    pub polished: bool,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const BOUND_INF: f64 = 1e20;

pub struct QpSolver {
    h: DMatrix<f64>,
    a: DMatrix<f64>,
    blocks: Vec<RowBlock>,
    settings: QpSettings,
    // Ruiz scaling: x = D x~, z = E^-1 z~, cost multiplied by c.
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    hs: DMatrix<f64>,
    as_: DMatrix<f64>,
    rho: f64,
    factor: Option<(f64, Vec<bool>, Cholesky<f64, Dyn>)>,
}

impl QpSolver {
    pub fn new(h: DMatrix<f64>, a: DMatrix<f64>, blocks: Vec<RowBlock>, settings: QpSettings) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: h.ncols(), context: "QP Hessian must be square" });
        }
        if a.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: a.ncols(), context: "QP constraint matrix columns" });
        }
        if h.iter().chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("QP data must be finite".into()));
        }
        let (d, e, c) = ruiz(&h, &a, 15);
        let hs = DMatrix::from_fn(n, n, |i, j| c * d[i] * h[(i, j)] * d[j]);
        let as_ = DMatrix::from_fn(a.nrows(), n, |i, j| e[i] * a[(i, j)] * d[j]);
        let rho = settings.rho;
        Ok(Self { h, a, blocks, settings, d, e, c, hs, as_, rho, factor: None })
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.a
    }

    fn block_of(&self, row: usize) -> &'static str {
        self.blocks
            .iter()
            .find(|b| b.rows.contains(&row))
            .map_or("constraints", |b| b.name)
    }

    fn rho_vec(&self, eq: &[bool]) -> DVector<f64> {
        DVector::from_iterator(eq.len(), eq.iter().map(|&q| if q { self.rho * RHO_EQ_SCALE } else { self.rho }))
    }

    fn factorize(&mut self, eq: &[bool]) -> Result<()> {
        if let Some((r, e, _)) = &self.factor {
            if *r == self.rho && e.as_slice() == eq {
                return Ok(());
            }
        }
        let rho = self.rho_vec(eq);
        let mut k = self.hs.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += self.settings.sigma;
        }
        let ar = DMatrix::from_fn(self.as_.nrows(), self.as_.ncols(), |i, j| rho[i] * self.as_[(i, j)]);
        k.gemm_tr(1.0, &self.as_, &ar, 1.0);
        let chol = Cholesky::new(k).ok_or_else(|| Error::InvalidParameter("QP Hessian is not positive semidefinite".into()))?;
        self.factor = Some((self.rho, eq.to_vec(), chol));
        Ok(())
    }

    /// Solve with the given linear term and bounds. `warm` is an optional
    /// `(x, y)` starting point in unscaled coordinates.
    pub fn solve(
        &mut self,
        f: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        warm: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<QpSolution> {
        let (n, m) = (self.n(), self.m());
        if f.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: f.len(), context: "QP linear term" });
        }
        if l.len() != m || u.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: l.len().min(u.len()), context: "QP bounds" });
        }
        if f.iter().any(|v| !v.is_finite()) || l.iter().chain(u.iter()).any(|v| v.is_nan()) {
            return Err(Error::InvalidParameter("QP vectors must be finite".into()));
        }
        if let Some(i) = (0..m).find(|&i| l[i] > u[i]) {
            return Err(Error::Infeasible { block: self.block_of(i) });
        }
        let st = self.settings;
        let eq: Vec<bool> = (0..m).map(|i| u[i] - l[i] < 1e-9).collect();

        let fs = DVector::from_fn(n, |i, _| self.c * self.d[i] * f[i]);
        let ls = DVector::from_fn(m, |i, _| self.e[i] * l[i].max(-BOUND_INF));
        let us = DVector::from_fn(m, |i, _| self.e[i] * u[i].min(BOUND_INF));

        let (mut x, mut y) = match warm {
            Some((wx, wy)) if wx.len() == n && wy.len() == m => (
                DVector::from_fn(n, |i, _| wx[i] / self.d[i]),
                DVector::from_fn(m, |i, _| self.c * wy[i] / self.e[i]),
            ),
            _ => (DVector::zeros(n), DVector::zeros(m)),
        };
        let mut z = &self.as_ * &x;
        for i in 0..m {
            z[i] = z[i].clamp(ls[i], us[i]);
        }

        self.factorize(&eq)?;
        let mut rho_v = self.rho_vec(&eq);
        let mut y_prev = y.clone();
        let mut best: Option<QpSolution> = None;
        let mut rhs = DVector::zeros(n);
        let mut tmp_m = DVector::zeros(m);

        for iter in 1..=st.max_iter {
            y_prev.copy_from(&y);
            // x~ = K^-1 (sigma x - f + A'(rho z - y))
            for i in 0..m {
                tmp_m[i] = rho_v[i] * z[i] - y[i];
            }
            rhs.copy_from(&fs);
            rhs.neg_mut();
            rhs.axpy(st.sigma, &x, 1.0);
            rhs.gemv_tr(1.0, &self.as_, &tmp_m, 1.0);
            let chol = &self.factor.as_ref().expect("factorized").2;
            let xt = chol.solve(&rhs);
            let zt = &self.as_ * &xt;
            x.axpy(st.alpha, &xt, 1.0 - st.alpha);
            for i in 0..m {
                let zr = st.alpha * zt[i] + (1.0 - st.alpha) * z[i];
                let zn = (zr + y[i] / rho_v[i]).clamp(ls[i], us[i]);
                y[i] += rho_v[i] * (zr - zn);
                z[i] = zn;
            }

            if iter % st.check_every != 0 && iter != st.max_iter {
                continue;
            }
            let sol = self.unscale(&x, &y, &z, f, iter);
            let (rp, rd) = (sol.primal_residual, sol.dual_residual);
            let (ep, ed) = self.tolerances(&sol, f);
            if rp <= ep && rd <= ed {
                return Ok(self.maybe_polish(sol, f, l, u));
            }
            // Try polishing early: an exact active-set solve often lands in
            // tolerance long before ADMM does.
            if st.polish && rp < 1e-3 && rd < 1e-3 {
                let p = self.polish(&sol, f, l, u);
                if let Some(p) = p {
                    let (ep2, ed2) = self.tolerances(&p, f);
                    if p.primal_residual <= ep2 && p.dual_residual <= ed2 {
                        return Ok(p);
                    }
                }
            }
            if let Some(block) = self.infeasibility(&y, &y_prev, &ls, &us) {
                return Err(Error::Infeasible { block });
            }
            if best.as_ref().is_none_or(|b| rp.max(rd) < b.primal_residual.max(b.dual_residual)) {
                best = Some(sol);
            }
            // adaptive step size, refactorize on large changes only
            let ax = &self.as_ * &x;
            let hx = &self.hs * &x;
            let aty = self.as_.tr_mul(&y);
            let prim = (&ax - &z).amax() / ax.amax().max(z.amax()).max(1e-12);
            let dual = (&hx + &fs + &aty).amax() / hx.amax().max(aty.amax()).max(fs.amax()).max(1e-12);
            let new_rho = (self.rho * (prim / dual.max(1e-12)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * self.rho || new_rho < 0.2 * self.rho {
                self.rho = new_rho;
                self.factorize(&eq)?;
                rho_v = self.rho_vec(&eq);
            }
        }
        let b = best.expect("at least one residual check");
        Err(Error::NotConverged { iterations: st.max_iter, primal: b.primal_residual, dual: b.dual_residual })
    }

    fn tolerances(&self, sol: &QpSolution, f: &DVector<f64>) -> (f64, f64) {
        let st = self.settings;
        if st.eps_rel == 0.0 {
            return (st.eps_abs, st.eps_abs);
        }
        let ax = &self.a * &sol.x;
        let hx = &self.h * &sol.x;
        let aty = self.a.tr_mul(&sol.y);
        (
            st.eps_abs + st.eps_rel * ax.amax(),
            st.eps_abs + st.eps_rel * hx.amax().max(aty.amax()).max(f.amax()),
        )
    }

    fn unscale(&self, xs: &DVector<f64>, ys: &DVector<f64>, zs: &DVector<f64>, f: &DVector<f64>, iterations: usize) -> QpSolution {
        let x = xs.component_mul(&self.d);
        let y = DVector::from_fn(ys.len(), |i, _| self.e[i] * ys[i] / self.c);
        let axs = &self.as_ * xs;
        let primal = (0..zs.len()).map(|i| ((axs[i] - zs[i]) / self.e[i]).abs()).fold(0.0, f64::max);
        let mut s = self.evaluate(x, y, f, iterations, false);
        s.primal_residual = primal;
        s
    }

    /// Dual residual is stationarity `|Hx + f + A'y|`; the primal residual is
    /// filled in by the caller.
    fn evaluate(&self, x: DVector<f64>, y: DVector<f64>, f: &DVector<f64>, iterations: usize, polished: bool) -> QpSolution {
        let hx = &self.h * &x;
        let dual = (&hx + f + self.a.tr_mul(&y)).amax();
        let objective = 0.5 * x.dot(&hx) + f.dot(&x);
        QpSolution { x, y, iterations, primal_residual: f64::NAN, dual_residual: dual, objective, polished }
    }

    fn primal_residual(&self, x: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..ax.len())
            .map(|i| (l[i] - ax[i]).max(ax[i] - u[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    fn with_primal(&self, mut s: QpSolution, l: &DVector<f64>, u: &DVector<f64>) -> QpSolution {
        s.primal_residual = self.primal_residual(&s.x, l, u);
        s
    }

    fn maybe_polish(&self, sol: QpSolution, f: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> QpSolution {
        if !self.settings.polish {
            return sol;
        }
        match self.polish(&sol, f, l, u) {
            Some(p) if p.primal_residual.max(p.dual_residual) <= sol.primal_residual.max(sol.dual_residual) => p,
            _ => sol,
        }
    }

    /// Solve the equality QP on the guessed active set. Returns `None` if the
    /// result is not primal/dual consistent.
    fn polish(&self, sol: &QpSolution, f: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> Option<QpSolution> {
        let (n, m) = (self.n(), self.m());
        let ax = &self.a * &sol.x;
        let mut act: Vec<(usize, f64)> = Vec::new();
        for i in 0..m {
            let lower = ax[i] - l[i] < -sol.y[i];
            let upper = u[i] - ax[i] < sol.y[i];
            if lower && l[i] > -BOUND_INF {
                act.push((i, l[i]));
            } else if upper && u[i] < BOUND_INF {
                act.push((i, u[i]));
            }
        }
        let k = act.len();
        if k > n {
            return None;
        }
        let dim = n + k;
        let delta = 1e-10;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
        for (r, &(i, _)) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = self.a[(i, j)];
                kkt[(j, n + r)] = self.a[(i, j)];
            }
        }
        let mut reg = kkt.clone();
        for i in 0..n {
            reg[(i, i)] += delta;
        }
        for r in 0..k {
            reg[(n + r, n + r)] -= delta;
        }
        let lu = reg.lu();
        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -f[j];
        }
        for (r, &(_, b)) in act.iter().enumerate() {
            rhs[n + r] = b;
        }
        let mut sol_k = lu.solve(&rhs)?;
        for _ in 0..5 {
            let res = &rhs - &kkt * &sol_k;
            sol_k += lu.solve(&res)?;
        }
        let x = sol_k.rows(0, n).into_owned();
        let mut y = DVector::zeros(m);
        for (r, &(i, _)) in act.iter().enumerate() {
            y[i] = sol_k[n + r];
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return None;
        }
        let tol = 1e-9 * (1.0 + y.amax());
        let ax = &self.a * &x;
        for &(i, _) in &act {
            let is_lower = (ax[i] - l[i]).abs() <= (ax[i] - u[i]).abs();
            if (is_lower && y[i] > tol && l[i] != u[i]) || (!is_lower && y[i] < -tol && l[i] != u[i]) {
                return None;
            }
        }
        let s = self.evaluate(x, y, f, sol.iterations, true);
        Some(self.with_primal(s, l, u))
    }

    fn infeasibility(&self, y: &DVector<f64>, y_prev: &DVector<f64>, ls: &DVector<f64>, us: &DVector<f64>) -> Option<&'static str> {
        let dy = y - y_prev;
        let norm = dy.iter().zip(self.e.iter()).map(|(v, e)| (v * e).abs()).fold(0.0, f64::max);
        if norm < 1e-12 {
            return None;
        }
        let eps = self.settings.eps_infeasible;
        let atdy = self.as_.tr_mul(&dy);
        let lhs = atdy.iter().zip(self.d.iter()).map(|(v, d)| (v / d).abs()).fold(0.0, f64::max);
        if lhs > eps * norm {
            return None;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            if dy[i] > 0.0 {
                if us[i] >= BOUND_INF * self.e[i] * 0.5 {
                    return None;
                }
                support += us[i] * dy[i];
            } else if dy[i] < 0.0 {
                if ls[i] <= -BOUND_INF * self.e[i] * 0.5 {
                    return None;
                }
                support += ls[i] * dy[i];
            }
        }
        if support >= -eps * norm {
            return None;
        }
        let row = (0..dy.len())
            .max_by(|&i, &j| (dy[i] * self.e[i]).abs().total_cmp(&(dy[j] * self.e[j]).abs()))
            .unwrap_or(0);
        Some(self.block_of(row))
    }
}

/// Modified Ruiz equilibration of the KKT matrix `[H A'; A 0]`.
fn ruiz(h: &DMatrix<f64>, a: &DMatrix<f64>, iters: usize) -> (DVector<f64>, DVector<f64>, f64) {
    let (n, m) = (h.nrows(), a.nrows());
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut hs = h.clone();
    let mut as_ = a.clone();
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { 1.0 / v.min(1e4).sqrt() };
    for _ in 0..iters {
        let dd = DVector::from_fn(n, |j, _| {
            let col = hs.column(j).amax().max(as_.column(j).amax());
            clamp(col)
        });
        let de = DVector::from_fn(m, |i, _| clamp(as_.row(i).amax()));
        for i in 0..n {
            for j in 0..n {
                hs[(i, j)] *= dd[i] * dd[j];
            }
        }
        for i in 0..m {
            for j in 0..n {
                as_[(i, j)] *= de[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = (0..n).map(|j| hs.column(j).amax()).sum::<f64>() / n.max(1) as f64;
    let c = if mean_col > 1e-4 { (1.0 / mean_col).min(1e4) } else { 1.0 };
    (d, e, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solver(h: &[f64], a: &[f64], n: usize, m: usize) -> QpSolver {
        QpSolver::new(
            DMatrix::from_row_slice(n, n, h),
            DMatrix::from_row_slice(m, n, a),
            vec![RowBlock { name: "first", rows: 0..1 }, RowBlock { name: "rest", rows: 1..m }],
            QpSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_matches_linear_solve() {
        let h = [4.0, 1.0, 1.0, 2.0];
        let mut s = solver(&h, &[1.0, 0.0, 0.0, 1.0], 2, 2);
        let f = DVector::from_vec(vec![1.0, 1.0]);
        let inf = DVector::from_element(2, f64::INFINITY);
        let sol = s.solve(&f, &(-&inf), &inf, None).unwrap();
        let exact = DMatrix::from_row_slice(2, 2, &h).lu().solve(&(-&f)).unwrap();
        assert!((sol.x - exact).amax() < 1e-8);
    }

    #[test]
    fn small_active_bound() {
        // min (x - 2)^2 + (y - 2)^2 with x + y <= 1 -> (0.5, 0.5)
        let mut s = solver(&[2.0, 0.0, 0.0, 2.0], &[1.0, 1.0, 1.0, 0.0], 2, 2);
        let f = DVector::from_vec(vec![-4.0, -4.0]);
        let l = DVector::from_vec(vec![f64::NEG_INFINITY, -10.0]);
        let u = DVector::from_vec(vec![1.0, 10.0]);
        let sol = s.solve(&f, &l, &u, None).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-8 && (sol.x[1] - 0.5).abs() < 1e-8, "{:?}", sol.x);
        assert!(sol.y[0] > 0.0);
        assert!(sol.primal_residual < 1e-6 && sol.dual_residual < 1e-6);
    }

    #[test]
    fn infeasible_names_block() {
        // x >= 1 and x <= 0 through two different rows
        let mut s = solver(&[1.0], &[1.0, 1.0], 1, 2);
        let f = DVector::from_vec(vec![0.0]);
        let l = DVector::from_vec(vec![1.0, -5.0]);
        let u = DVector::from_vec(vec![5.0, 0.0]);
        let err = s.solve(&f, &l, &u, None).unwrap_err();
        assert!(matches!(err, Error::Infeasible { .. }), "{err}");
        let err = s.solve(&f, &DVector::from_vec(vec![2.0, 0.0]), &DVector::from_vec(vec![1.0, 1.0]), None).unwrap_err();
        assert!(matches!(err, Error::Infeasible { block: "first" }));
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 6;
            let m = 9;
            let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let l = DVector::from_fn(m, |_, _| rng.random_range(-1.0..-0.1));
            let u = DVector::from_fn(m, |_, _| rng.random_range(0.1..1.0));
            let mut s = QpSolver::new(h.clone(), a.clone(), vec![], QpSettings::default()).unwrap();
            let sol = s.solve(&f, &l, &u, None).unwrap();
            let ax = &a * &sol.x;
            for i in 0..m {
                assert!(ax[i] >= l[i] - 1e-6 && ax[i] <= u[i] + 1e-6);
                // complementarity
                if sol.y[i] > 1e-6 {
                    assert!((ax[i] - u[i]).abs() < 1e-6);
                }
                if sol.y[i] < -1e-6 {
                    assert!((ax[i] - l[i]).abs() < 1e-6);
                }
            }
            assert!((&h * &sol.x + &f + a.tr_mul(&sol.y)).amax() < 1e-6);
        }
    }

    #[test]
    fn warm_start_converges_faster() {
        let h = [2.0, 0.5, 0.5, 1.0];
        let mut s = solver(&h, &[1.0, 1.0, 1.0, -1.0], 2, 2);
        let f = DVector::from_vec(vec![-3.0, -1.0]);
        let l = DVector::from_vec(vec![-1.0, -1.0]);
        let u = DVector::from_vec(vec![1.0, 1.0]);
        let cold = s.solve(&f, &l, &u, None).unwrap();
        let warm = s.solve(&f, &l, &u, Some((&cold.x, &cold.y))).unwrap();
        assert!(warm.iterations <= cold.iterations);
        assert!((warm.x - cold.x).amax() < 1e-6);
    }
}
