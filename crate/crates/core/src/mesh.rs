//! Cartesian grid restricted to the unit ball, a symmetric finite-volume
//! stencil with cut-cell Dirichlet closure, and the Krylov solvers used on it.
//!
//! Lattice nodes sit at `-1 + i h` with `h = 1/m`. Nodes strictly inside the
//! ball are unknowns. A link from an interior node to a node outside the ball
//! is cut at the sphere; the Dirichlet value there enters with weight `1/θ`,
//! where `θ h` is the distance to the sphere along the link. This keeps the
//! operator symmetric.

use rayon::prelude::*;

use crate::error::{CgoError, Result};

pub const NO_NODE: u32 = u32::MAX;

/// Unit steps along +x, -x, +y, -y, +z, -z.
pub const DIRS: [[i64; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// Smallest cut fraction kept as is; shorter cuts are clamped.
const MIN_THETA: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BallGrid {
    m: usize,
    h: f64,
    side: usize,
    slot: Vec<u32>,
    cells: Vec<[usize; 3]>,
    nbr: Vec<[u32; 6]>,
    theta: Vec<[f64; 6]>,
}

impl BallGrid {
    /// Grid with `m` cells per unit length.
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(CgoError::param(format!("mesh resolution must be at least 2, got {m}")));
        }
        let side = 2 * m + 1;
        let h = 1.0 / m as f64;
        let coord = |i: usize| -1.0 + i as f64 * h;
        let mut slot = vec![NO_NODE; side * side * side];
        let mut cells = Vec::new();
        for i in 0..side {
            for j in 0..side {
                for k in 0..side {
                    let (x, y, z) = (coord(i), coord(j), coord(k));
                    if x * x + y * y + z * z < 1.0 - 1e-12 {
                        slot[(i * side + j) * side + k] = cells.len() as u32;
                        cells.push([i, j, k]);
                    }
                }
            }
        }
        let mut nbr = Vec::with_capacity(cells.len());
        let mut theta = Vec::with_capacity(cells.len());
        for c in &cells {
            let p = [coord(c[0]), coord(c[1]), coord(c[2])];
            let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
            let mut nb = [NO_NODE; 6];
            let mut th = [1.0; 6];
            for (d, dir) in DIRS.iter().enumerate() {
                let q = [c[0] as i64 + dir[0], c[1] as i64 + dir[1], c[2] as i64 + dir[2]];
                let s = slot[(q[0] as usize * side + q[1] as usize) * side + q[2] as usize];
                if s != NO_NODE {
                    nb[d] = s;
                } else {
                    let a = d / 2;
                    let sign = dir[a] as f64;
                    let t = -sign * p[a] + (p[a] * p[a] + 1.0 - r2).sqrt();
                    th[d] = (t / h).clamp(MIN_THETA, 1.0);
                }
            }
            nbr.push(nb);
            theta.push(th);
        }
        Ok(Self {
            m,
            h,
            side,
            slot,
            cells,
            nbr,
            theta,
        })
    }

    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Lattice points per axis, `2m + 1`.
    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of interior unknowns.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        -1.0 + i as f64 * self.h
    }

    pub fn lattice_point(&self, idx: [usize; 3]) -> [f64; 3] {
        [self.coordinate(idx[0]), self.coordinate(idx[1]), self.coordinate(idx[2])]
    }

    pub fn cube_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.side + idx[1]) * self.side + idx[2]
    }

    /// Interior unknown at a lattice index, if any.
    pub fn interior_index(&self, idx: [usize; 3]) -> Option<usize> {
        let s = self.slot[self.cube_index(idx)];
        (s != NO_NODE).then_some(s as usize)
    }

    pub fn lattice_index(&self, node: usize) -> [usize; 3] {
        self.cells[node]
    }

    pub fn point(&self, node: usize) -> [f64; 3] {
        self.lattice_point(self.cells[node])
    }

    pub fn points(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Neighbour unknowns per direction; `NO_NODE` marks a cut link.
    pub fn neighbors(&self, node: usize) -> &[u32; 6] {
        &self.nbr[node]
    }

    /// Link length per direction in units of `h` (1 for uncut links).
    pub fn link_fraction(&self, node: usize) -> &[f64; 6] {
        &self.theta[node]
    }

    /// Far end of a link: the neighbour node or the point on the sphere.
    pub fn link_end(&self, node: usize, dir: usize) -> [f64; 3] {
        let p = self.point(node);
        let t = self.theta[node][dir] * self.h;
        let d = DIRS[dir];
        [p[0] + t * d[0] as f64, p[1] + t * d[1] as f64, p[2] + t * d[2] as f64]
    }

    /// Scatters interior values into a full lattice array, filling the rest.
    pub fn to_lattice(&self, values: &[f64], fill: f64) -> Vec<f64> {
        let mut out = vec![fill; self.side * self.side * self.side];
        for (node, c) in self.cells.iter().enumerate() {
            out[self.cube_index(*c)] = values[node];
        }
        out
    }
}

/// Symmetric operator
/// `(A x)_a = s Σ_links c (x_a - x_b) + s Σ_cuts c x_a / θ + d_a x_a`.
#[derive(Debug, Clone)]
pub struct StencilOperator<'g> {
    grid: &'g BallGrid,
    coef: Vec<[f64; 6]>,
    shift: Vec<f64>,
    scale: f64,
}

impl<'g> StencilOperator<'g> {
    /// Link coefficients are given per node and direction and must agree on
    /// both sides of a shared link.
    pub fn new(grid: &'g BallGrid, coef: Vec<[f64; 6]>, shift: Vec<f64>, scale: f64) -> Self {
        assert_eq!(coef.len(), grid.len());
        assert_eq!(shift.len(), grid.len());
        Self { grid, coef, shift, scale }
    }

    /// `-Δ_h`.
    pub fn laplacian(grid: &'g BallGrid) -> Self {
        let h = grid.spacing();
        Self::new(grid, vec![[1.0; 6]; grid.len()], vec![0.0; grid.len()], 1.0 / (h * h))
    }

    pub fn grid(&self) -> &BallGrid {
        self.grid
    }

    pub fn coefficients(&self) -> &[[f64; 6]] {
        &self.coef
    }

    /// Right-hand side contribution of Dirichlet data `g` on the sphere.
    pub fn boundary_rhs(&self, g: impl Fn([f64; 3]) -> f64 + Sync) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|a| {
                let mut acc = 0.0;
                for d in 0..6 {
                    if self.grid.nbr[a][d] == NO_NODE {
                        acc += self.scale * self.coef[a][d] * g(self.grid.link_end(a, d)) / self.grid.theta[a][d];
                    }
                }
                acc
            })
            .collect()
    }
}

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

impl LinearOperator for StencilOperator<'_> {
    fn dim(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = self.grid;
        y.par_iter_mut().enumerate().for_each(|(a, ya)| {
            let xa = x[a];
            let mut acc = 0.0;
            for d in 0..6 {
                let b = g.nbr[a][d];
                acc += if b == NO_NODE {
                    self.coef[a][d] * xa / g.theta[a][d]
                } else {
                    self.coef[a][d] * (xa - x[b as usize])
                };
            }
            *ya = self.scale * acc + self.shift[a] * xa;
        });
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|a| {
                let mut acc = 0.0;
                for d in 0..6 {
                    acc += if self.grid.nbr[a][d] == NO_NODE {
                        self.coef[a][d] / self.grid.theta[a][d]
                    } else {
                        self.coef[a][d]
                    };
                }
                self.scale * acc + self.shift[a]
            })
            .collect()
    }
}

/// Operator given by a dense symmetric matrix, for small problems and tests.
pub struct DenseOperator(pub nalgebra::DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let v = &self.0 * nalgebra::DVector::from_column_slice(x);
        y.copy_from_slice(v.as_slice());
    }

    fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final `‖b - A x‖ / ‖b‖`.
    pub relative_residual: f64,
}

pub fn residual_norm(op: &dyn LinearOperator, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; b.len()];
    op.apply(x, &mut ax);
    ax.iter().zip(b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>().sqrt()
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive definite
/// operators, started from zero.
pub fn conjugate_gradient(op: &dyn LinearOperator, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = op.dim();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, SolveStats { iterations: 0, relative_residual: 0.0 }));
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rn = norm(&r);
        if rn <= tol * bn {
            let true_res = residual_norm(op, &x, b) / bn;
            return Ok((x, SolveStats { iterations: it, relative_residual: true_res }));
        }
        z.iter_mut().zip(&r).zip(&inv_diag).for_each(|((zi, ri), di)| *zi = ri * di);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(CgoError::Numerical(format!(
        "conjugate gradients did not converge in {max_iter} iterations (relative residual {:.3e})",
        residual_norm(op, &x, b) / bn
    )))
}

/// Preconditioned MINRES for symmetric, possibly indefinite operators. The
/// preconditioner is the given positive diagonal.
pub fn minres(op: &dyn LinearOperator, b: &[f64], precond: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = op.dim();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, SolveStats { iterations: 0, relative_residual: 0.0 }));
    }
    let minv = |v: &[f64]| -> Vec<f64> { v.iter().zip(precond).map(|(a, d)| a / d).collect() };

    let mut r1 = b.to_vec();
    let mut y = minv(&r1);
    let beta1 = dot(&r1, &y).sqrt();
    let mut r2 = r1.clone();
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut check_every = 0usize;

    for it in 1..=max_iter {
        let s = 1.0 / beta;
        v.iter_mut().zip(&y).for_each(|(vi, yi)| *vi = s * yi);
        op.apply(&v, &mut y);
        if it >= 2 {
            axpy(-beta / oldb, &r1, &mut y);
        }
        let alfa = dot(&v, &y);
        axpy(-alfa / beta, &r2, &mut y);
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        y = minv(&r2);
        oldb = beta;
        beta = dot(&r2, &y).max(0.0).sqrt();

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        let denom = 1.0 / gamma;
        let w1 = std::mem::replace(&mut w2, std::mem::take(&mut w));
        w = v.iter().zip(&w1).zip(&w2).map(|((vi, a), b)| (vi - oldeps * a - delta * b) * denom).collect();
        axpy(phi, &w, &mut x);

        check_every += 1;
        if phibar <= tol * beta1 || beta == 0.0 || check_every >= 200 {
            check_every = 0;
            let res = residual_norm(op, &x, b) / bn;
            if res <= tol || beta == 0.0 {
                return Ok((x, SolveStats { iterations: it, relative_residual: res }));
            }
        }
    }
    Err(CgoError::Numerical(format!(
        "MINRES did not converge in {max_iter} iterations (relative residual {:.3e})",
        residual_norm(op, &x, b) / bn
    )))
}

/// Ritz values of a `steps`-step Lanczos run with full reorthogonalization.
pub fn lanczos_ritz(op: &dyn LinearOperator, steps: usize, seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let n = op.dim();
    let k = steps.min(n).max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let qn = norm(&q);
    q.iter_mut().for_each(|x| *x /= qn);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut alphas = Vec::with_capacity(k);
    let mut betas = Vec::with_capacity(k);
    let mut w = vec![0.0; n];
    for _ in 0..k {
        op.apply(&q, &mut w);
        let a = dot(&q, &w);
        alphas.push(a);
        basis.push(q.clone());
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                axpy(-c, v, &mut w);
            }
        }
        let b = norm(&w);
        if b < 1e-12 * a.abs().max(1.0) || basis.len() == k {
            break;
        }
        betas.push(b);
        q = w.iter().map(|x| x / b).collect();
    }
    let m = alphas.len();
    let mut t = nalgebra::DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let mut ev: Vec<f64> = t.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn dense_of(op: &dyn LinearOperator) -> DMatrix<f64> {
        let n = op.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            op.apply(&e, &mut col);
            m.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        m
    }

    #[test]
    fn grid_counts_and_symmetry() {
        let g = BallGrid::new(6).unwrap();
        let vol = g.len() as f64 * g.spacing().powi(3);
        assert!((vol - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.3);
        for a in 0..g.len() {
            for d in 0..6 {
                let b = g.neighbors(a)[d];
                if b != NO_NODE {
                    assert_eq!(g.neighbors(b as usize)[d ^ 1], a as u32);
                } else {
                    let e = g.link_end(a, d);
                    let r = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
                    assert!((r - 1.0).abs() < 1e-12 || g.link_fraction(a)[d] == MIN_THETA);
                }
            }
        }
        assert!(BallGrid::new(1).is_err());
    }

    #[test]
    fn laplacian_is_symmetric_positive() {
        let g = BallGrid::new(4).unwrap();
        let op = StencilOperator::laplacian(&g);
        let m = dense_of(&op);
        assert!((&m - m.transpose()).amax() < 1e-12);
        let ev = m.clone().symmetric_eigenvalues();
        assert!(ev.min() > 0.0);
        let d = op.diagonal();
        for i in 0..g.len() {
            assert!((d[i] - m[(i, i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_and_minres_solve_dirichlet_problem() {
        // u = x² - y² + z is harmonic; interior values solve A u = boundary terms.
        let g = BallGrid::new(8).unwrap();
        let op = StencilOperator::laplacian(&g);
        let f = |p: [f64; 3]| p[0] * p[0] - p[1] * p[1] + p[2];
        let b = op.boundary_rhs(f);
        let (u, st) = conjugate_gradient(&op, &b, 1e-12, 2000).unwrap();
        assert!(st.relative_residual < 1e-11);
        let d = op.diagonal();
        let (u2, st2) = minres(&op, &b, &d, 1e-12, 4000).unwrap();
        assert!(st2.relative_residual < 1e-11);
        let err = (0..g.len()).map(|a| (u[a] - f(g.point(a))).abs()).fold(0.0, f64::max);
        let diff = (0..g.len()).map(|a| (u[a] - u2[a]).abs()).fold(0.0, f64::max);
        // quadratic harmonic: the 7-point stencil is exact away from cuts
        assert!(err < 2e-2, "{err}");
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn dirichlet_solution_converges_at_second_order() {
        let f = |p: [f64; 3]| (p[0] * 1.3).exp() * (p[1] * 1.3).cos() + p[0] * p[1] * p[2];
        let mut errs = Vec::new();
        // coarser pairs are still pre-asymptotic near the cut cells
        for m in [16, 32] {
            let g = BallGrid::new(m).unwrap();
            let op = StencilOperator::laplacian(&g);
            let b = op.boundary_rhs(f);
            let (u, _) = conjugate_gradient(&op, &b, 1e-12, 5000).unwrap();
            let e = (0..g.len()).map(|a| (u[a] - f(g.point(a))).abs()).fold(0.0, f64::max);
            errs.push(e);
        }
        let order = (errs[0] / errs[1]).log2();
        assert!(order > 1.7, "order {order} errors {errs:?}");
    }

    #[test]
    fn minres_handles_indefinite_systems() {
        let g = BallGrid::new(4).unwrap();
        let lap = StencilOperator::laplacian(&g);
        let n = g.len();
        let ev = dense_of(&lap).symmetric_eigenvalues();
        let mut sorted: Vec<f64> = ev.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let shift = -(sorted[0] + sorted[1]) / 2.0 - 0.7;
        let op = StencilOperator::new(&g, vec![[1.0; 6]; n], vec![shift; n], 1.0 / (g.spacing() * g.spacing()));
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let (x, st) = minres(&op, &b, &lap.diagonal(), 1e-11, 5000).unwrap();
        assert!(st.relative_residual <= 1e-11);
        let dense = dense_of(&op);
        let exact = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        let err = x.iter().zip(exact.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8 * exact.amax(), "{err}");
    }

    #[test]
    fn lanczos_finds_extreme_eigenvalues() {
        let g = BallGrid::new(4).unwrap();
        let lap = StencilOperator::laplacian(&g);
        let ev = dense_of(&lap).symmetric_eigenvalues();
        let ritz = lanczos_ritz(&lap, 60, 1);
        assert!((ritz[0] - ev.min()).abs() < 1e-6 * ev.min());
        assert!((ritz[ritz.len() - 1] - ev.max()).abs() < 1e-6 * ev.max());
    }
}
