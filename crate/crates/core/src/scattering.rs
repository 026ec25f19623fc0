//! Truncated scattering transform on a uniform ξ-lattice and its inversion to
//! the potential by FFT.
//!
//! Lattices per axis: `ξ_k = -M + k Δξ` and `x_n = -X + n Δx` with
//! `Δξ = 2M/(K-1)`, `Δx = 2X/(K-1)`, and `X = π(K-1)²/(2KM)`, so that
//! `Δx Δξ = 2π/K`. Then
//!
//! `q(x_n) = (2π)^{-3} Δξ³ Σ_k t(ξ_k) e^{i x_n·ξ_k}`
//!
//! factors per axis into phases around a length-`K` inverse DFT.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cgo::{solve_regularized, zeta_magnitude, zeta_magnitude_at, BieContext, SolveDiagnostics, ZetaRule};
use crate::dtn::DtnMatrix;
use crate::error::{CgoError, Result};
use crate::faddeev::{make_zeta, FaddeevTable, Zeta};
use crate::sphere::QuadratureGrid;

/// Half-width of the x-lattice paired with `(M, K)`.
pub fn x_extent(m: f64, k: usize) -> f64 {
    let kf = k as f64;
    PI * (kf - 1.0) * (kf - 1.0) / (2.0 * kf * m)
}

fn lattice(half_width: f64, k: usize, i: usize) -> f64 {
    -half_width + i as f64 * 2.0 * half_width / (k as f64 - 1.0)
}

#[inline]
fn flat(k: usize, a: usize, b: usize, c: usize) -> usize {
    (a * k + b) * k + c
}

fn check_lattice(m: f64, k: usize) -> Result<()> {
    if k < 2 {
        return Err(CgoError::param(format!("K must be at least 2, got {k}")));
    }
    if !(m > 0.0) || !m.is_finite() {
        return Err(CgoError::param(format!("M must be positive, got {m}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterDiagnostics {
    pub solved_points: usize,
    pub floor_active_points: usize,
    pub max_residual: f64,
    pub min_sigma: f64,
    pub max_zeta: f64,
}

/// `t(ξ)` on the `K³` lattice of half-width `M`; zero for `|ξ| ≥ M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatteringGrid {
    pub m: f64,
    pub k: usize,
    pub rule: ZetaRule,
    pub values: Vec<Complex64>,
}

impl ScatteringGrid {
    pub fn zeros(m: f64, k: usize, rule: ZetaRule) -> Result<Self> {
        check_lattice(m, k)?;
        Ok(Self {
            m,
            k,
            rule,
            values: vec![Complex64::new(0.0, 0.0); k * k * k],
        })
    }

    /// Lattice filled by `f(ξ)` inside the ball `|ξ| < M`.
    pub fn from_fn(m: f64, k: usize, rule: ZetaRule, f: impl Fn([f64; 3]) -> Complex64) -> Result<Self> {
        let mut g = Self::zeros(m, k, rule)?;
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let xi = g.xi([a, b, c]);
                    if norm3(xi) < m {
                        g.values[flat(k, a, b, c)] = f(xi);
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.m / (self.k as f64 - 1.0)
    }

    pub fn xi_coordinate(&self, i: usize) -> f64 {
        lattice(self.m, self.k, i)
    }

    pub fn xi(&self, idx: [usize; 3]) -> [f64; 3] {
        idx.map(|i| self.xi_coordinate(i))
    }

    pub fn get(&self, idx: [usize; 3]) -> Complex64 {
        self.values[flat(self.k, idx[0], idx[1], idx[2])]
    }

    pub fn x_extent(&self) -> f64 {
        x_extent(self.m, self.k)
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Smallest nonzero `|ξ|` on the lattice, used as the per-ξ floor default.
pub fn smallest_nonzero_xi(m: f64, k: usize) -> f64 {
    (0..k).map(|i| lattice(m, k, i).abs()).filter(|v| *v > 1e-12 * m).fold(f64::INFINITY, f64::min)
}

/// `t(ξ, ζ) = Σ_k w_k e^{-i x_k·(ξ+ζ)} [(Q^ε - Q_1) ψ_ζ]_k` at one point.
pub fn scattering_value(ctx: &BieContext, xi: [f64; 3], zeta: &Zeta) -> Result<(Complex64, SolveDiagnostics)> {
    let sys = ctx.assemble(zeta)?;
    let (psi, diag) = solve_regularized(&sys)?;
    let dpsi: DVector<Complex64> = ctx.difference() * psi;
    let grid = ctx.grid();
    let mut t = Complex64::new(0.0, 0.0);
    for (j, x) in grid.nodes().iter().enumerate() {
        let phase = Complex64::new(
            x[0] * zeta.im[0] + x[1] * zeta.im[1] + x[2] * zeta.im[2],
            -(x[0] * (xi[0] + zeta.re[0]) + x[1] * (xi[1] + zeta.re[1]) + x[2] * (xi[2] + zeta.re[2])),
        );
        t += grid.weights()[j] * phase.exp() * dpsi[j];
    }
    Ok((t, diag))
}

/// `t(ξ)` on the lattice points `|ξ| < M`.
pub fn scattering_transform(
    q_eps: &DtnMatrix,
    m: f64,
    k: usize,
    rule: ZetaRule,
    grid: &QuadratureGrid,
    table: &FaddeevTable,
    floor: f64,
) -> Result<(ScatteringGrid, ScatterDiagnostics)> {
    check_lattice(m, k)?;
    let top = zeta_magnitude(m, &rule)?;
    if top / 2f64.sqrt() > table.kappa_max() * (1.0 + 1e-12) {
        return Err(CgoError::Range(format!(
            "|ζ| up to {top:.4} needs a Faddeev table with κ_max ≥ {:.4}, have {:.4}",
            top / 2f64.sqrt(),
            table.kappa_max()
        )));
    }
    let ctx = BieContext::new(q_eps, grid, table, floor)?;
    let mut out = ScatteringGrid::zeros(m, k, rule)?;
    let points: Vec<[usize; 3]> = (0..k)
        .flat_map(|a| (0..k).flat_map(move |b| (0..k).map(move |c| [a, b, c])))
        .filter(|idx| norm3(out.xi(*idx)) < m)
        .collect();
    struct PointResult {
        idx: [usize; 3],
        t: Complex64,
        residual: f64,
        sigma: f64,
        floor_active: bool,
        zeta: f64,
    }

    let results: Vec<Result<PointResult>> = points
        .par_iter()
        .map(|idx| {
            let xi = out.xi(*idx);
            let mag = zeta_magnitude_at(m, &rule, norm3(xi))?;
            let zeta = make_zeta(xi, mag / 2f64.sqrt())?;
            let (t, diag) = scattering_value(&ctx, xi, &zeta)?;
            Ok(PointResult {
                idx: *idx,
                t,
                residual: diag.residual,
                sigma: diag.sigma_min,
                floor_active: diag.floor_active,
                zeta: zeta.magnitude(),
            })
        })
        .collect();

    let mut diag = ScatterDiagnostics {
        solved_points: 0,
        floor_active_points: 0,
        max_residual: 0.0,
        min_sigma: f64::INFINITY,
        max_zeta: 0.0,
    };
    for r in results {
        let r = r?;
        if !r.t.re.is_finite() || !r.t.im.is_finite() {
            return Err(CgoError::Numerical(format!("non-finite scattering value at ξ = {:?}", out.xi(r.idx))));
        }
        out.values[flat(k, r.idx[0], r.idx[1], r.idx[2])] = r.t;
        diag.solved_points += 1;
        diag.floor_active_points += r.floor_active as usize;
        diag.max_residual = diag.max_residual.max(r.residual);
        diag.min_sigma = diag.min_sigma.min(r.sigma);
        diag.max_zeta = diag.max_zeta.max(r.zeta);
    }
    Ok((out, diag))
}

/// Scalar field on the `K³` x-lattice of half-width `x_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub x_max: f64,
    pub k: usize,
    pub values: Vec<Complex64>,
}

impl VolumeGrid {
    pub fn from_fn(x_max: f64, k: usize, f: impl Fn([f64; 3]) -> Complex64) -> Result<Self> {
        if k < 2 || !(x_max > 0.0) {
            return Err(CgoError::param("volume grid needs K ≥ 2 and x_max > 0"));
        }
        let mut values = Vec::with_capacity(k * k * k);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    values.push(f([lattice(x_max, k, a), lattice(x_max, k, b), lattice(x_max, k, c)]));
                }
            }
        }
        Ok(Self { x_max, k, values })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.x_max / (self.k as f64 - 1.0)
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        lattice(self.x_max, self.k, i)
    }

    pub fn get(&self, idx: [usize; 3]) -> Complex64 {
        self.values[flat(self.k, idx[0], idx[1], idx[2])]
    }

    /// Largest `|Im| / |Re|` ratio, as max-abs over the grid.
    pub fn imaginary_ratio(&self) -> f64 {
        let re = self.values.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
        let im = self.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        if re == 0.0 {
            if im == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            im / re
        }
    }

    /// Trilinear interpolation at `p`.
    pub fn sample(&self, p: [f64; 3]) -> Result<Complex64> {
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let s = (p[a] + self.x_max) / h;
            let tol = 1e-12 * (self.k as f64);
            if !(s >= -tol && s <= (self.k - 1) as f64 + tol) {
                return Err(CgoError::Range(format!(
                    "point {p:?} outside the lattice hull [-{x}, {x}]³",
                    x = self.x_max
                )));
            }
            let i = (s.floor().max(0.0) as usize).min(self.k - 2);
            base[a] = i;
            frac[a] = (s - i as f64).clamp(0.0, 1.0);
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for da in 0..2 {
            for db in 0..2 {
                for dc in 0..2 {
                    let w = (if da == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if db == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dc == 1 { frac[2] } else { 1.0 - frac[2] });
                    if w != 0.0 {
                        acc += self.get([base[0] + da, base[1] + db, base[2] + dc]) * w;
                    }
                }
            }
        }
        Ok(acc)
    }

    pub fn sample_many(&self, points: &[[f64; 3]]) -> Result<Vec<Complex64>> {
        points.iter().map(|p| self.sample(*p)).collect()
    }
}

/// `q = F^{-1} t` on the paired x-lattice.
pub fn invert_to_potential(t: &ScatteringGrid) -> Result<VolumeGrid> {
    check_lattice(t.m, t.k)?;
    let k = t.k;
    let m = t.m;
    let x = x_extent(m, k);
    let dxi = t.spacing();
    let dx = 2.0 * x / (k as f64 - 1.0);
    let pre: Vec<Complex64> = (0..k).map(|i| Complex64::from_polar(1.0, -x * dxi * i as f64)).collect();
    let post: Vec<Complex64> = (0..k).map(|n| Complex64::from_polar(1.0, x * m - m * dx * n as f64)).collect();

    let mut data = t.values.clone();
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                data[flat(k, a, b, c)] *= pre[a] * pre[b] * pre[c];
            }
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_inverse(k);
    // axis 2 is contiguous
    for chunk in data.chunks_exact_mut(k) {
        fft.process(chunk);
    }
    let mut line = vec![Complex64::new(0.0, 0.0); k];
    for axis in 0..2 {
        for i in 0..k {
            for j in 0..k {
                for (n, slot) in line.iter_mut().enumerate() {
                    *slot = data[if axis == 0 { flat(k, n, i, j) } else { flat(k, i, n, j) }];
                }
                fft.process(&mut line);
                for (n, v) in line.iter().enumerate() {
                    data[if axis == 0 { flat(k, n, i, j) } else { flat(k, i, n, j) }] = *v;
                }
            }
        }
    }
    let scale = (dxi / (2.0 * PI)).powi(3);
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                data[flat(k, a, b, c)] *= post[a] * post[b] * post[c] * scale;
            }
        }
    }
    Ok(VolumeGrid { x_max: x, k, values: data })
}

/// Same as [`invert_to_potential`] but against a caller-supplied `x_max`,
/// which must satisfy the Shannon relation.
pub fn invert_to_potential_on(t: &ScatteringGrid, x_max: f64) -> Result<VolumeGrid> {
    let derived = x_extent(t.m, t.k);
    if (x_max - derived).abs() > 1e-12 * derived {
        return Err(CgoError::param(format!(
            "x_max = {x_max} violates M = π(K-1)²/(2K x_max); expected {derived}"
        )));
    }
    invert_to_potential(t)
}

/// Direct summation of the inverse transform; `O(K⁶)`, for checks.
pub fn invert_direct(t: &ScatteringGrid) -> VolumeGrid {
    let k = t.k;
    let x = x_extent(t.m, k);
    let scale = (t.spacing() / (2.0 * PI)).powi(3);
    let mut values = vec![Complex64::new(0.0, 0.0); k * k * k];
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                let xn = [lattice(x, k, a), lattice(x, k, b), lattice(x, k, c)];
                let mut acc = Complex64::new(0.0, 0.0);
                for (idx, v) in t.values.iter().enumerate() {
                    if *v == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let xi = t.xi([idx / (k * k), (idx / k) % k, idx % k]);
                    acc += v * Complex64::from_polar(1.0, xn[0] * xi[0] + xn[1] * xi[1] + xn[2] * xi[2]);
                }
                values[flat(k, a, b, c)] = acc * scale;
            }
        }
    }
    VolumeGrid { x_max: x, k, values }
}
