//! Conductivity from the potential: `(-Δ + q) w = -q`, `w = 0` on the sphere,
//! `γ = (w + 1)²`.
//!
//! The operator `L = -Δ_h + q` is symmetric. Eigenvalues of the normal
//! operator `L*L = L²` at or below `κ₂ = r₂²/4`, `r₂ = 1/C₄`, are floored:
//! an eigenpair `(λ, v)` with `λ² ≤ κ₂` contributes `λ/κ₂ (v·b) v` in place of
//! `(v·b)/λ v`. A Lanczos screen decides whether small eigenvalues can be
//! present at all; only then are they computed by block inverse iteration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CgoError, Result};
use crate::mesh::{dot, lanczos_ritz, minres, BallGrid, LinearOperator, StencilOperator};
use crate::scattering::VolumeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaOptions {
    pub resolution: usize,
    pub c4: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub lanczos_steps: usize,
    pub block: usize,
    pub seed: u64,
    /// Run the eigenvalue check even when the screen passes.
    pub force_guard: bool,
}

impl Default for SigmaOptions {
    fn default() -> Self {
        Self {
            resolution: 16,
            c4: 1.0,
            tolerance: 1e-10,
            max_iterations: 20000,
            lanczos_steps: 80,
            block: 6,
            seed: 7,
            force_guard: false,
        }
    }
}

impl SigmaOptions {
    pub fn kappa2(&self) -> f64 {
        1.0 / (4.0 * self.c4 * self.c4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaDiagnostics {
    /// `max |Im q| / max |Re q|` over the mesh samples.
    pub imaginary_ratio: f64,
    pub ritz_min: f64,
    pub ritz_max: f64,
    pub guarded: bool,
    pub floor_active: bool,
    pub floored_modes: usize,
    /// Eigenvalues of `L` found by the guard, by increasing magnitude.
    pub small_eigenvalues: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone)]
pub struct SigmaField {
    pub grid: BallGrid,
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    pub gamma: Vec<f64>,
    pub diagnostics: SigmaDiagnostics,
}

impl SigmaField {
    /// `γ` on the full lattice cube; 1 at every node that is not an unknown.
    pub fn gamma_lattice(&self) -> Vec<f64> {
        self.grid.to_lattice(&self.gamma, 1.0)
    }
}

/// Piecewise rule for `α(ε)`; `p ≥ 3/2` and `0 < ε₀ < 1`.
pub fn alpha_rule(epsilon: f64, p: f64, epsilon0: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(CgoError::param(format!("noise level must be positive, got {epsilon}")));
    }
    if !(p >= 1.5) || !p.is_finite() {
        return Err(CgoError::param(format!("exponent p must be at least 3/2, got {p}")));
    }
    if !(epsilon0 > 0.0 && epsilon0 < 1.0) {
        return Err(CgoError::param(format!("breakpoint ε₀ must lie in (0, 1), got {epsilon0}")));
    }
    let branch = |e: f64| (-e.ln() / 11.0).powf(-1.0 / p);
    Ok(if epsilon < epsilon0 {
        branch(epsilon)
    } else {
        epsilon / epsilon0 * branch(epsilon0)
    })
}

/// `M = 1/α`.
pub fn truncation_radius(epsilon: f64, p: f64, epsilon0: f64) -> Result<f64> {
    alpha_rule(epsilon, p, epsilon0).map(|a| 1.0 / a)
}

/// `L = -Δ_h + diag(q)` on the ball mesh.
pub fn schrodinger_operator<'g>(grid: &'g BallGrid, q: &[f64]) -> StencilOperator<'g> {
    let h = grid.spacing();
    StencilOperator::new(grid, vec![[1.0; 6]; grid.len()], q.to_vec(), 1.0 / (h * h))
}

/// `L` with selected eigenvalues moved to `target`.
struct Deflated<'a> {
    op: &'a dyn LinearOperator,
    modes: &'a [(f64, Vec<f64>)],
    target: f64,
}

impl LinearOperator for Deflated<'_> {
    fn dim(&self) -> usize {
        self.op.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.op.apply(x, y);
        for (lam, v) in self.modes {
            let c = (self.target - lam) * dot(v, x);
            y.iter_mut().zip(v).for_each(|(yi, vi)| *yi += c * vi);
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.op.diagonal()
    }
}

fn positive_precond(op: &dyn LinearOperator) -> Vec<f64> {
    let d = op.diagonal();
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    d.iter().map(|v| v.abs().max(1e-8 * scale).max(f64::MIN_POSITIVE)).collect()
}

fn orthonormalize(vs: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..vs.len() {
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = vs.split_at_mut(i);
                let c = dot(&head[j], &tail[0]);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = dot(&vs[i], &vs[i]).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(CgoError::Numerical("eigenvalue estimation lost rank in block inverse iteration".into()));
        }
        vs[i].iter_mut().for_each(|a| *a /= n);
    }
    Ok(())
}

/// Approximate eigenpairs of the `block` smallest-magnitude eigenvalues of
/// `op`, by block inverse iteration with Rayleigh–Ritz, sorted by `|λ|`.
/// Iterates until the smallest pair and every pair with `|λ| < watch` have
/// converged; the rest of the block only accelerates those.
pub fn smallest_eigenpairs(
    op: &dyn LinearOperator,
    block: usize,
    watch: f64,
    norm_estimate: f64,
    seed: u64,
    tol: f64,
    max_iterations: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let n = op.dim();
    let b = block.min(n).max(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<f64>> = (0..b).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    orthonormalize(&mut x)?;
    let precond = positive_precond(op);
    let mut lx = vec![vec![0.0; n]; b];
    let mut last_res = f64::INFINITY;
    for _ in 0..60 {
        let mut y = Vec::with_capacity(b);
        for xi in &x {
            let (yi, _) = minres(op, xi, &precond, 1e-12, max_iterations)
                .map_err(|e| CgoError::Numerical(format!("eigenvalue estimation: inner solve failed: {e}")))?;
            y.push(yi);
        }
        orthonormalize(&mut y)?;
        for (yi, li) in y.iter().zip(lx.iter_mut()) {
            op.apply(yi, li);
        }
        let h = DMatrix::from_fn(b, b, |i, j| 0.5 * (dot(&y[i], &lx[j]) + dot(&y[j], &lx[i])));
        let eig = h.symmetric_eigen();
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].abs().partial_cmp(&eig.eigenvalues[j].abs()).unwrap());
        let mut pairs = Vec::with_capacity(b);
        let mut worst = 0.0f64;
        for &k in &order {
            let mut v = vec![0.0; n];
            let mut lv = vec![0.0; n];
            for i in 0..b {
                let c = eig.eigenvectors[(i, k)];
                v.iter_mut().zip(&y[i]).for_each(|(a, s)| *a += c * s);
                lv.iter_mut().zip(&lx[i]).for_each(|(a, s)| *a += c * s);
            }
            let lam = eig.eigenvalues[k];
            let r = lv.iter().zip(&v).map(|(a, s)| (a - lam * s).powi(2)).sum::<f64>().sqrt();
            if pairs.is_empty() || lam.abs() < watch {
                worst = worst.max(r);
            }
            pairs.push((lam, v));
        }
        last_res = worst;
        if worst <= tol * norm_estimate.max(1.0) {
            return Ok(pairs);
        }
        x = pairs.into_iter().map(|(_, v)| v).collect();
    }
    Err(CgoError::Numerical(format!(
        "eigenvalue estimation did not converge (residual {last_res:.3e})"
    )))
}

/// Guarded solve of `L w = b`. Returns the solution, the diagnostics fields
/// that depend on the operator, and solver statistics.
pub fn guarded_solve(op: &dyn LinearOperator, b: &[f64], opts: &SigmaOptions) -> Result<(Vec<f64>, SigmaDiagnostics)> {
    let kappa2 = opts.kappa2();
    let root = kappa2.sqrt();
    let ritz = lanczos_ritz(op, opts.lanczos_steps, opts.seed);
    let ritz_min = ritz.first().copied().unwrap_or(0.0);
    let ritz_max = ritz.last().copied().unwrap_or(0.0);
    let smallest_abs = ritz.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    // Ritz values bracket the spectrum from inside, so keep a margin.
    let suspicious = ritz_min <= 0.0 || smallest_abs < 4.0 * root;
    let precond = positive_precond(op);
    let mut diag = SigmaDiagnostics {
        imaginary_ratio: 0.0,
        ritz_min,
        ritz_max,
        guarded: suspicious || opts.force_guard,
        floor_active: false,
        floored_modes: 0,
        small_eigenvalues: Vec::new(),
        iterations: 0,
        relative_residual: 0.0,
    };
    if !diag.guarded {
        let (w, stats) = minres(op, b, &precond, opts.tolerance, opts.max_iterations)?;
        diag.iterations = stats.iterations;
        diag.relative_residual = stats.relative_residual;
        return Ok((w, diag));
    }

    let norm_est = ritz.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pairs = smallest_eigenpairs(op, opts.block, 2.0 * root, norm_est, opts.seed ^ 0x5eed, 1e-9, opts.max_iterations)?;
    diag.small_eigenvalues = pairs.iter().map(|p| p.0).collect();
    let floored: Vec<(f64, Vec<f64>)> = pairs.into_iter().filter(|(lam, _)| lam * lam <= kappa2).collect();
    if floored.len() >= opts.block.min(op.dim()) {
        return Err(CgoError::Numerical(format!(
            "all {} computed eigenvalues lie below the floor; increase the block size",
            floored.len()
        )));
    }
    diag.floor_active = !floored.is_empty();
    diag.floored_modes = floored.len();
    if floored.is_empty() {
        let (w, stats) = minres(op, b, &precond, opts.tolerance, opts.max_iterations)?;
        diag.iterations = stats.iterations;
        diag.relative_residual = stats.relative_residual;
        return Ok((w, diag));
    }

    let mut rest = b.to_vec();
    let mut coeffs = Vec::with_capacity(floored.len());
    for (_, v) in &floored {
        let c = dot(v, &rest);
        rest.iter_mut().zip(v).for_each(|(r, vi)| *r -= c * vi);
        coeffs.push(c);
    }
    let deflated = Deflated {
        op,
        modes: &floored,
        target: (4.0 * root).max(1.0),
    };
    let (mut w, stats) = minres(&deflated, &rest, &precond, opts.tolerance, opts.max_iterations)?;
    for ((lam, v), c) in floored.iter().zip(&coeffs) {
        let stray = dot(v, &w);
        let f = lam / kappa2 * c - stray;
        w.iter_mut().zip(v).for_each(|(wi, vi)| *wi += f * vi);
    }
    diag.iterations = stats.iterations;
    diag.relative_residual = stats.relative_residual;
    Ok((w, diag))
}

/// Solve on given real potential samples at the interior mesh nodes.
pub fn solve_sigma_samples(grid: BallGrid, q: Vec<f64>, opts: &SigmaOptions) -> Result<SigmaField> {
    if q.len() != grid.len() {
        return Err(CgoError::Dimension {
            what: "potential samples",
            expected: grid.len(),
            got: q.len(),
        });
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(CgoError::Numerical("potential has non-finite samples".into()));
    }
    let op = schrodinger_operator(&grid, &q);
    let rhs: Vec<f64> = q.iter().map(|v| -v).collect();
    let (w, diagnostics) = guarded_solve(&op, &rhs, opts)?;
    let gamma = w.iter().map(|v| (v + 1.0) * (v + 1.0)).collect();
    Ok(SigmaField {
        grid,
        q,
        w,
        gamma,
        diagnostics,
    })
}

/// Sample `q` trilinearly onto the mesh, keep the real part, and solve.
pub fn solve_sigma(q: &VolumeGrid, opts: &SigmaOptions) -> Result<SigmaField> {
    let grid = BallGrid::new(opts.resolution)?;
    let samples = q.sample_many(&grid.points())?;
    let re_max = samples.iter().fold(0.0f64, |m, v| m.max(v.re.abs()));
    let im_max = samples.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    let ratio = if re_max > 0.0 {
        im_max / re_max
    } else if im_max > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let mut field = solve_sigma_samples(grid, samples.iter().map(|v| v.re).collect(), opts)?;
    field.diagnostics.imaginary_ratio = ratio;
    if ratio > 1e-2 {
        log::warn!("reconstructed potential has sizeable imaginary part: max |Im q| / max |Re q| = {ratio:.3e}");
    }
    Ok(field)
}
