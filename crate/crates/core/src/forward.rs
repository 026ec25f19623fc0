//! Forward maps `γ ↦ Λ_γ`: analytic for a layered ball, a radial ODE for
//! smooth radial conductivities, and a volumetric solver for phantoms.
//!
//! The volumetric solver never differentiates a solution at the boundary.
//! It computes the coefficient matrix of `Λ_γ - Λ_1` from the energy identity
//! `⟨(Λ_γ - Λ_1) f, g⟩ = ∫ (γ - 1) ∇u_f · ∇v_g`, where `u_f` solves the
//! conductivity problem and `v_g = r^n Y_n^m` is the exact harmonic extension.
//! With `u = v + w` and `w` solving `A_γ w = -(A_γ - A_1) v`, the discrete
//! matrix is Hermitian and annihilates constants by construction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::dtn::{DtnKind, DtnMatrix};
use crate::error::{CgoError, Result};
use crate::mesh::{conjugate_gradient, BallGrid, StencilOperator, NO_NODE};
use crate::phantom::Phantom;
use crate::sphere::{sh_count, sh_index, spherical_harmonics, QuadratureGrid};

/// Eigenvalue of `Λ_γ` on degree `n` for a centred ball of radius `r0` and
/// conductivity `c` in unit background.
pub fn layered_ball_eigenvalue(r0: f64, c: f64, n: usize) -> f64 {
    let nf = n as f64;
    let beta = -nf * (c - 1.0) * r0.powi(2 * n as i32 + 1) / (c * nf + nf + 1.0);
    (nf - (nf + 1.0) * beta) / (1.0 + beta)
}

pub fn layered_ball_dtn(r0: f64, c: f64, grid: &QuadratureGrid) -> Result<DtnMatrix> {
    if !(r0 > 0.0 && r0 < 1.0) {
        return Err(CgoError::param(format!("layer radius must lie in (0, 1), got {r0}")));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(CgoError::param(format!("conductivity must be positive, got {c}")));
    }
    Ok(DtnMatrix::from_eigenvalues(grid, |n| layered_ball_eigenvalue(r0, c, n)))
}

/// Eigenvalue of `Λ_q` on degree `n` for a radial potential `q(r)` with
/// `γ = 1` near the boundary. Writes the radial factor as `r^n S(r)` and
/// integrates `S'' + 2(n+1) S'/r = q S` from the origin; `λ_n = n + S'(1)/S(1)`.
pub fn radial_eigenvalue(q: &dyn Fn(f64) -> f64, n: usize, steps: usize) -> f64 {
    let k = 2.0 * (n as f64 + 1.0);
    let r_start = 1e-3;
    let q0 = q(0.0);
    let mut s = 1.0 + q0 * r_start * r_start / (2.0 * (2.0 * n as f64 + 3.0));
    let mut ds = q0 * r_start / (2.0 * n as f64 + 3.0);
    let f = |r: f64, s: f64, ds: f64| (ds, q(r) * s - k * ds / r);
    let h_max = (1.0 - r_start) / steps as f64;
    let mut r = r_start;
    while r < 1.0 {
        // keep h k / r small near the origin
        let h = h_max.min(0.1 * r / k).min(1.0 - r);
        let (a1, b1) = f(r, s, ds);
        let (a2, b2) = f(r + h / 2.0, s + h / 2.0 * a1, ds + h / 2.0 * b1);
        let (a3, b3) = f(r + h / 2.0, s + h / 2.0 * a2, ds + h / 2.0 * b2);
        let (a4, b4) = f(r + h, s + h * a3, ds + h * b3);
        s += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        ds += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        r += h;
    }
    n as f64 + ds / s
}

/// Smooth radial conductivity `γ = (1 + a (1 - r²/R²)^6)²` for `r < R`,
/// `γ = 1` beyond. The potential `q = Δγ^{1/2} / γ^{1/2}` is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothRadial {
    pub amplitude: f64,
    pub radius: f64,
}

const BUMP_POWER: i32 = 6;

impl SmoothRadial {
    pub fn new(amplitude: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius < 1.0) {
            return Err(CgoError::param(format!("bump radius must lie in (0, 1), got {radius}")));
        }
        if !(amplitude > -1.0) {
            return Err(CgoError::param("bump amplitude must exceed -1"));
        }
        Ok(Self { amplitude, radius })
    }

    pub fn sqrt_gamma(&self, r: f64) -> f64 {
        let u = 1.0 - (r / self.radius).powi(2);
        if u <= 0.0 {
            1.0
        } else {
            1.0 + self.amplitude * u.powi(BUMP_POWER)
        }
    }

    pub fn gamma(&self, r: f64) -> f64 {
        self.sqrt_gamma(r).powi(2)
    }

    pub fn potential(&self, r: f64) -> f64 {
        let r2 = self.radius * self.radius;
        let u = 1.0 - r * r / r2;
        if u <= 0.0 {
            return 0.0;
        }
        let k = BUMP_POWER as f64;
        let lap = 4.0 * k * (k - 1.0) * u.powi(BUMP_POWER - 2) * r * r / (r2 * r2) - 6.0 * k * u.powi(BUMP_POWER - 1) / r2;
        self.amplitude * lap / self.sqrt_gamma(r)
    }

    /// `q̂(ξ) = ∫ e^{-ix·ξ} q(x) dx = 4π ∫ q(r) r² sinc(|ξ| r) dr`.
    pub fn potential_transform(&self, xi_norm: f64) -> f64 {
        let (x, w) = crate::sphere::gauss_legendre(200);
        let half = self.radius / 2.0;
        let mut acc = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            let r = half * (xi + 1.0);
            let sinc = if xi_norm * r == 0.0 { 1.0 } else { (xi_norm * r).sin() / (xi_norm * r) };
            acc += wi * half * self.potential(r) * r * r * sinc;
        }
        4.0 * std::f64::consts::PI * acc
    }

    pub fn eigenvalue(&self, n: usize) -> f64 {
        radial_eigenvalue(&|r| self.potential(r), n, 4000)
    }

    pub fn dtn(&self, grid: &QuadratureGrid) -> DtnMatrix {
        let ev: Vec<f64> = (0..=grid.degree()).map(|n| self.eigenvalue(n)).collect();
        DtnMatrix::from_eigenvalues(grid, |n| ev[n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Mesh cells per unit length.
    pub resolution: usize,
    /// Relative residual for each conductivity solve.
    pub tolerance: f64,
    /// Samples per link for the harmonic-mean face conductivity.
    pub face_samples: usize,
    pub max_iterations: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            resolution: 24,
            tolerance: 1e-10,
            face_samples: 16,
            max_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardReport {
    /// Coefficient matrix of `Λ_γ - Λ_1` (rows `n'`, columns `n`).
    pub difference_coeffs: DMatrix<Complex64>,
    pub unknowns: usize,
    pub active_links: usize,
    pub max_iterations: usize,
    pub max_residual: f64,
}

/// Harmonic mean of `γ` along the segment from `a` to `b`.
fn face_conductivity(phantom: &Phantom, a: [f64; 3], b: [f64; 3], samples: usize) -> f64 {
    let mut resist = 0.0;
    for s in 0..samples {
        let t = (s as f64 + 0.5) / samples as f64;
        let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])];
        resist += 1.0 / phantom.conductivity(p);
    }
    samples as f64 / resist
}

/// Real harmonic basis `r^n Re Y_n^m` (slot `sh_index(n, m)`) and
/// `r^n Im Y_n^m` (slot `sh_index(n, -m)`), `m ≥ 0`, at a point in the ball.
fn real_harmonics(degree: usize, p: [f64; 3]) -> Vec<f64> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let mut out = vec![0.0; sh_count(degree)];
    if r == 0.0 {
        out[0] = (0.25 / std::f64::consts::PI).sqrt();
        return out;
    }
    let y = spherical_harmonics(degree, &[p[0] / r, p[1] / r, p[2] / r]);
    for n in 0..=degree {
        let rn = r.powi(n as i32);
        for m in 0..=n as i64 {
            let v = y[sh_index(n, m)] * rn;
            out[sh_index(n, m)] = v.re;
            if m > 0 {
                out[sh_index(n, -m)] = v.im;
            }
        }
    }
    out
}

/// Change of basis `T` with `Y_n^m = Σ_b T[b, j] φ_b` on the sphere.
fn real_to_complex(degree: usize) -> DMatrix<Complex64> {
    let len = sh_count(degree);
    let mut t = DMatrix::zeros(len, len);
    let i = Complex64::new(0.0, 1.0);
    for n in 0..=degree {
        t[(sh_index(n, 0), sh_index(n, 0))] = Complex64::new(1.0, 0.0);
        for m in 1..=n as i64 {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            let (re, im) = (sh_index(n, m), sh_index(n, -m));
            t[(re, sh_index(n, m))] = Complex64::new(1.0, 0.0);
            t[(im, sh_index(n, m))] = i;
            t[(re, sh_index(n, -m))] = Complex64::new(sign, 0.0);
            t[(im, sh_index(n, -m))] = -i * sign;
        }
    }
    t
}

struct Link {
    a: usize,
    /// Neighbour unknown, or `None` for a cut link ending on the sphere.
    b: Option<usize>,
    end: [f64; 3],
    theta: f64,
    excess: f64,
}

/// Volumetric forward map for a phantom. Returns `Q_γ` and the solve report.
pub fn numerical_dtn(phantom: &Phantom, grid: &QuadratureGrid, opts: &ForwardOptions) -> Result<(DtnMatrix, ForwardReport)> {
    phantom.validate()?;
    if opts.face_samples == 0 {
        return Err(CgoError::param("face_samples must be positive"));
    }
    let mesh = BallGrid::new(opts.resolution)?;
    let degree = grid.degree();
    let nb = sh_count(degree);
    let nodes = mesh.len();

    let mut coef = vec![[1.0; 6]; nodes];
    for a in 0..nodes {
        for d in 0..6 {
            let b = mesh.neighbors(a)[d];
            if b != NO_NODE && (d % 2 == 1) {
                continue;
            }
            let g = face_conductivity(phantom, mesh.point(a), mesh.link_end(a, d), opts.face_samples);
            coef[a][d] = g;
            if b != NO_NODE {
                coef[b as usize][d ^ 1] = g;
            }
        }
    }

    let mut links = Vec::new();
    for a in 0..nodes {
        for d in 0..6 {
            let b = mesh.neighbors(a)[d];
            let excess = coef[a][d] - 1.0;
            if excess == 0.0 || (b != NO_NODE && d % 2 == 1) {
                continue;
            }
            links.push(Link {
                a,
                b: (b != NO_NODE).then_some(b as usize),
                end: mesh.link_end(a, d),
                theta: mesh.link_fraction(a)[d],
                excess,
            });
        }
    }

    let basis: Vec<Vec<f64>> = (0..nodes).into_par_iter().map(|a| real_harmonics(degree, mesh.point(a))).collect();
    let end_basis: Vec<Option<Vec<f64>>> = links.iter().map(|l| l.b.is_none().then(|| real_harmonics(degree, l.end))).collect();
    let phi_diff = |l: &Link, k: usize, bidx: usize, phi: &dyn Fn(usize) -> f64| -> f64 {
        match l.b {
            Some(b) => phi(l.a) - phi(b),
            None => phi(l.a) - end_basis[k].as_ref().unwrap()[bidx],
        }
    };

    let op = StencilOperator::new(&mesh, coef, vec![0.0; nodes], 1.0);

    let solves: Vec<Result<(Vec<f64>, usize, f64)>> = (0..nb)
        .into_par_iter()
        .map(|bidx| {
            let mut rhs = vec![0.0; nodes];
            for (k, l) in links.iter().enumerate() {
                let diff = phi_diff(l, k, bidx, &|i| basis[i][bidx]);
                let flux = l.excess * diff / l.theta;
                rhs[l.a] -= flux;
                if let Some(b) = l.b {
                    rhs[b] += flux;
                }
            }
            if rhs.iter().all(|v| *v == 0.0) {
                return Ok((rhs, 0, 0.0));
            }
            let (w, st) = conjugate_gradient(&op, &rhs, opts.tolerance, opts.max_iterations)?;
            Ok((w, st.iterations, st.relative_residual))
        })
        .collect();

    let mut corrections = Vec::with_capacity(nb);
    let (mut max_it, mut max_res) = (0, 0.0f64);
    for s in solves {
        let (w, it, res) = s.map_err(|e| e.in_stage("forward solve"))?;
        max_it = max_it.max(it);
        max_res = max_res.max(res);
        corrections.push(w);
    }

    // Du, Dφ over active links; R = h Dφᵀ diag(γ_f - 1) Du
    let nl = links.len();
    let mut du = DMatrix::<f64>::zeros(nl, nb);
    let mut dphi = DMatrix::<f64>::zeros(nl, nb);
    for (k, l) in links.iter().enumerate() {
        for bidx in 0..nb {
            let dp = phi_diff(l, k, bidx, &|i| basis[i][bidx]);
            let w = &corrections[bidx];
            let dw = w[l.a] - l.b.map_or(0.0, |b| w[b]);
            dphi[(k, bidx)] = dp;
            du[(k, bidx)] = l.excess * (dp + dw) / l.theta;
        }
    }
    let h = mesh.spacing();
    let r = dphi.transpose() * du * h;
    let r = (&r + r.transpose()) * 0.5;
    let t = real_to_complex(degree);
    let rc = r.map(|v| Complex64::new(v, 0.0));
    let diff = t.adjoint() * rc * &t;

    let mut full = diff.clone();
    for j in 0..nb {
        full[(j, j)] += grid.degree_of(j) as f64;
    }
    let q = DtnMatrix::from_coefficients(grid, DtnKind::Map, &full)?;
    Ok((
        q,
        ForwardReport {
            difference_coeffs: diff,
            unknowns: nodes,
            active_links: nl,
            max_iterations: max_it,
            max_residual: max_res,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtn::lambda_one;

    #[test]
    fn layered_ball_reference_values() {
        let beta: f64 = -0.125 / 4.0;
        assert_eq!(beta, -0.03125);
        let l1 = layered_ball_eigenvalue(0.5, 2.0, 1);
        assert!((l1 - 1.0625 / 0.96875).abs() < 1e-15);
        for n in 0..10 {
            assert!((layered_ball_eigenvalue(0.5, 1.0, n) - n as f64).abs() < 1e-15);
            assert!((layered_ball_eigenvalue(1e-6, 5.0, n) - n as f64).abs() < 1e-6);
        }
        assert_eq!(layered_ball_eigenvalue(0.5, 2.0, 0), 0.0);
    }

    /// Shooting oracle for a two-layer ball in conductivity form:
    /// `(r² γ f')' = γ n(n+1) f`, continuity of `f` and `γ f'` at `r0`.
    fn shooting_eigenvalue(r0: f64, c: f64, n: usize) -> f64 {
        let nn = (n * (n + 1)) as f64;
        let integrate = |f: &mut f64, g: &mut f64, a: f64, b: f64, gamma: f64| {
            // g = r² γ f'
            let steps = 20_000;
            let h = (b - a) / steps as f64;
            let rhs = |r: f64, f: f64, g: f64| (g / (r * r * gamma), gamma * nn * f);
            let mut r = a;
            for _ in 0..steps {
                let (k1, l1) = rhs(r, *f, *g);
                let (k2, l2) = rhs(r + h / 2.0, *f + h / 2.0 * k1, *g + h / 2.0 * l1);
                let (k3, l3) = rhs(r + h / 2.0, *f + h / 2.0 * k2, *g + h / 2.0 * l2);
                let (k4, l4) = rhs(r + h, *f + h * k3, *g + h * l3);
                *f += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                *g += h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
                r += h;
            }
        };
        let a: f64 = 1e-3;
        let mut f = a.powi(n as i32);
        let mut g = if n == 0 { 0.0 } else { a * a * c * n as f64 * a.powi(n as i32 - 1) };
        integrate(&mut f, &mut g, a, r0, c);
        integrate(&mut f, &mut g, r0, 1.0, 1.0);
        g / f
    }

    #[test]
    fn layered_ball_matches_shooting() {
        for n in 1..=6 {
            let a = layered_ball_eigenvalue(0.5, 2.0, n);
            let b = shooting_eigenvalue(0.5, 2.0, n);
            assert!((a - b).abs() < 1e-8 * a, "n={n}: {a} vs {b}");
        }
        let a = layered_ball_eigenvalue(0.7, 0.3, 3);
        let b = shooting_eigenvalue(0.7, 0.3, 3);
        assert!((a - b).abs() < 1e-8 * a);
    }

    #[test]
    fn layered_ball_rejects_bad_input() {
        let g = QuadratureGrid::new(3).unwrap();
        assert!(layered_ball_dtn(1.0, 2.0, &g).is_err());
        assert!(layered_ball_dtn(0.5, 0.0, &g).is_err());
        let q = layered_ball_dtn(0.5, 1.0, &g).unwrap();
        assert!((q.entries - lambda_one(&g).entries).camax() < 1e-12);
    }

    #[test]
    fn radial_ode_matches_layered_form() {
        // q = 0 recovers Λ_1
        for n in 0..6 {
            assert!((radial_eigenvalue(&|_| 0.0, n, 1000) - n as f64).abs() < 1e-12);
        }
        // constant q = k²: S = sinh-type regular solution, λ_n = k i_n'(k)/i_n(k)
        let k: f64 = 1.5;
        let l0 = radial_eigenvalue(&|_| k * k, 0, 4000);
        let exact = k / k.tanh() - 1.0;
        assert!((l0 - exact).abs() < 1e-10, "{l0} {exact}");
    }

    #[test]
    fn smooth_radial_potential_matches_finite_differences() {
        let p = SmoothRadial::new(0.4, 0.7).unwrap();
        for &r in &[0.05, 0.2, 0.45, 0.65] {
            let h = 1e-4;
            let f = |r: f64| p.sqrt_gamma(r);
            let lap = (f(r + h) - 2.0 * f(r) + f(r - h)) / (h * h) + (f(r + h) - f(r - h)) / (h * r);
            let fd = lap / f(r);
            assert!((fd - p.potential(r)).abs() < 1e-5 * (1.0 + fd.abs()), "r={r}");
        }
        assert_eq!(p.potential(0.8), 0.0);
    }

    #[test]
    fn smooth_radial_transform_matches_cartesian_quadrature() {
        let p = SmoothRadial::new(0.3, 0.6).unwrap();
        let xi = [0.8, -1.1, 0.5];
        let nx = 80;
        let h = 1.4 / nx as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..nx {
            for j in 0..nx {
                for k in 0..nx {
                    let x = [-0.7 + (i as f64 + 0.5) * h, -0.7 + (j as f64 + 0.5) * h, -0.7 + (k as f64 + 0.5) * h];
                    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                    let ph = -(x[0] * xi[0] + x[1] * xi[1] + x[2] * xi[2]);
                    acc += Complex64::from_polar(p.potential(r), ph) * h.powi(3);
                }
            }
        }
        let xn = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
        let exact = p.potential_transform(xn);
        assert!((acc.re - exact).abs() < 1e-3 * exact.abs().max(1.0), "{acc} {exact}");
        assert!(acc.im.abs() < 1e-6);
    }

    #[test]
    fn real_basis_change_reproduces_complex_harmonics() {
        let deg = 4;
        let t = real_to_complex(deg);
        let x: [f64; 3] = [0.3, -0.5, 0.81];
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        let u = [x[0] / r, x[1] / r, x[2] / r];
        let phi = real_harmonics(deg, u);
        let y = spherical_harmonics(deg, &u);
        for j in 0..sh_count(deg) {
            let mut s = Complex64::new(0.0, 0.0);
            for b in 0..sh_count(deg) {
                s += t[(b, j)] * phi[b];
            }
            assert!((s - y[j]).norm() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_phantom_gives_lambda_one() {
        let g = QuadratureGrid::new(4).unwrap();
        let opts = ForwardOptions {
            resolution: 6,
            ..Default::default()
        };
        let (q, rep) = numerical_dtn(&Phantom::homogeneous(), &g, &opts).unwrap();
        assert_eq!(rep.active_links, 0);
        let q1 = lambda_one(&g);
        assert!((q.entries - q1.entries).camax() < 1e-10);
    }

    #[test]
    fn centered_ball_matches_layered_eigenvalues() {
        let g = QuadratureGrid::new(6).unwrap();
        let opts = ForwardOptions {
            resolution: 16,
            ..Default::default()
        };
        let (_, rep) = numerical_dtn(&Phantom::centered_ball(0.5, 2.0).unwrap(), &g, &opts).unwrap();
        let c = &rep.difference_coeffs;
        for n in 1..=6 {
            let mut avg = 0.0;
            for m in -(n as i64)..=n as i64 {
                avg += c[(sh_index(n, m), sh_index(n, m))].re;
            }
            avg /= (2 * n + 1) as f64;
            let num = n as f64 + avg;
            let exact = layered_ball_eigenvalue(0.5, 2.0, n);
            assert!((num - exact).abs() < 0.01 * exact, "n={n}: {num} vs {exact}");
        }
        assert!((c - c.adjoint()).camax() < 1e-10);
        assert!(c.row(0).camax() < 1e-14 && c.column(0).camax() < 1e-14);
    }
}
