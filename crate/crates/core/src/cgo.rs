//! Discretized boundary integral equation for the CGO trace
//!
//! `[I + (𝒮_0 L_N + ℋ_ζ)(Q^ε - Q_1) L_N] ψ = e^{i x·ζ}`
//!
//! solved through the spectrally filtered pseudoinverse `h(B*B) B*` with
//! `h(t) = 1/t` above the floor `κ_1(α)` and `1/κ_1(α)` below it.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dtn::{lambda_one, DtnKind, DtnMatrix};
use crate::error::{CgoError, Result};
use crate::faddeev::{h_matrix, single_layer_matrix, FaddeevTable, Zeta};
use crate::sphere::QuadratureGrid;

/// Constants of the α-pseudoinverse floor `κ_1(α) = r_1(α)²/4`,
/// `r_1(α) = 1 / (C_2 (1 + α^{-p}) e^{2 α^{-p}})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorConstants {
    pub c2: f64,
    pub p: f64,
}

impl Default for FloorConstants {
    fn default() -> Self {
        Self { c2: 1.0, p: 1.5 }
    }
}

impl FloorConstants {
    pub fn r1(&self, alpha: f64) -> f64 {
        let a = alpha.powf(-self.p);
        1.0 / (self.c2 * (1.0 + a) * (2.0 * a).exp())
    }

    pub fn kappa1(&self, alpha: f64) -> f64 {
        let r = self.r1(alpha);
        r * r / 4.0
    }
}

/// How `|ζ(ξ)|` is chosen for a truncation radius `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
#[derive(Default)]
pub enum ZetaRule {
    /// `|ζ| = M/√2`, the smallest admissible constant choice.
    #[default]
    Minimal,
    /// `|ζ| = K_1 M^p`.
    Theory { k1: f64, p: f64 },
    /// `|ζ(ξ)| = |ξ|/√2`, floored at `floor/√2` so that `ζ(0) ≠ 0`.
    PerXi { floor: f64 },
}


/// `|ζ|` for a constant rule, or its largest value over `|ξ| < M` for the
/// per-ξ rule.
pub fn zeta_magnitude(m: f64, rule: &ZetaRule) -> Result<f64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(CgoError::param(format!("truncation radius must be positive, got {m}")));
    }
    let bound = m / 2f64.sqrt();
    match *rule {
        ZetaRule::Minimal => Ok(bound),
        ZetaRule::Theory { k1, p } => {
            if !(k1 > 0.0 && k1 < 1.0) || !(p >= 1.5) {
                return Err(CgoError::param(format!("theory rule needs 0 < K1 < 1 and p ≥ 3/2, got K1 = {k1}, p = {p}")));
            }
            let z = k1 * m.powf(p);
            if z < bound * (1.0 - 1e-12) {
                return Err(CgoError::param(format!(
                    "|ζ| = K1 M^p = {z:.6} is below M/√2 = {bound:.6}; not admissible for M = {m}"
                )));
            }
            Ok(z)
        }
        ZetaRule::PerXi { floor } => {
            if !(floor > 0.0) {
                return Err(CgoError::param("per-ξ rule needs a positive floor"));
            }
            Ok(bound.max(floor / 2f64.sqrt()))
        }
    }
}

/// `|ζ(ξ)|` at a given `|ξ|`.
pub fn zeta_magnitude_at(m: f64, rule: &ZetaRule, xi_norm: f64) -> Result<f64> {
    match *rule {
        ZetaRule::PerXi { floor } => {
            zeta_magnitude(m, rule)?;
            Ok(xi_norm.max(floor) / 2f64.sqrt())
        }
        _ => zeta_magnitude(m, rule),
    }
}

#[derive(Debug, Clone)]
pub struct BieSystem {
    pub zeta: Zeta,
    pub matrix: DMatrix<Complex64>,
    pub rhs: DVector<Complex64>,
    pub floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub floor_active: bool,
    /// `‖Bψ - rhs‖ / ‖rhs‖`.
    pub residual: f64,
}

/// Pieces of the system that do not depend on `ζ`.
pub struct BieContext<'a> {
    grid: &'a QuadratureGrid,
    table: &'a FaddeevTable,
    s0l: DMatrix<Complex64>,
    dl: DMatrix<Complex64>,
    difference: DMatrix<Complex64>,
    floor: f64,
}

impl<'a> BieContext<'a> {
    pub fn new(q_eps: &DtnMatrix, grid: &'a QuadratureGrid, table: &'a FaddeevTable, floor: f64) -> Result<Self> {
        if q_eps.kind != DtnKind::Map {
            return Err(CgoError::param("the boundary integral equation takes a full DtN map"));
        }
        if q_eps.degree != grid.degree() || q_eps.nodes() != grid.len() {
            return Err(CgoError::Dimension {
                what: "DtN matrix vs quadrature grid",
                expected: grid.len(),
                got: q_eps.nodes(),
            });
        }
        if !(floor >= 0.0) {
            return Err(CgoError::param("spectral floor must be non-negative"));
        }
        let l = grid.projection_matrix();
        let difference = q_eps.difference(&lambda_one(grid))?.entries;
        let dl = &difference * &l;
        let s0l = single_layer_matrix(grid) * &l;
        Ok(Self {
            grid,
            table,
            s0l,
            dl,
            difference,
            floor,
        })
    }

    /// `Q^ε - Q_1`.
    pub fn difference(&self) -> &DMatrix<Complex64> {
        &self.difference
    }

    pub fn grid(&self) -> &QuadratureGrid {
        self.grid
    }

    pub fn assemble(&self, zeta: &Zeta) -> Result<BieSystem> {
        if zeta.magnitude() == 0.0 {
            return Err(CgoError::param("|ζ| must be positive"));
        }
        let h = h_matrix(zeta, self.grid, self.table)?;
        let mut b = (&self.s0l + h) * &self.dl;
        for i in 0..b.nrows() {
            b[(i, i)] += Complex64::new(1.0, 0.0);
        }
        let rhs = DVector::from_iterator(self.grid.len(), self.grid.nodes().iter().map(|x| zeta.plane_wave(*x)));
        Ok(BieSystem {
            zeta: *zeta,
            matrix: b,
            rhs,
            floor: self.floor,
        })
    }
}

pub fn assemble(q_eps: &DtnMatrix, zeta: &Zeta, grid: &QuadratureGrid, table: &FaddeevTable, floor: f64) -> Result<BieSystem> {
    BieContext::new(q_eps, grid, table, floor)?.assemble(zeta)
}

/// `x = V h(Σ²) Σ U* b` with `h(t) = 1/t` for `t > floor` and `1/floor`
/// otherwise.
pub fn filtered_solve(matrix: &DMatrix<Complex64>, rhs: &DVector<Complex64>, floor: f64) -> Result<(DVector<Complex64>, SolveDiagnostics)> {
    let n = matrix.ncols();
    if matrix.nrows() != rhs.len() {
        return Err(CgoError::Dimension {
            what: "system right-hand side",
            expected: matrix.nrows(),
            got: rhs.len(),
        });
    }
    let svd = matrix.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or_else(|| CgoError::Numerical("SVD failed to produce U".into()))?;
    let vt = svd.v_t.as_ref().ok_or_else(|| CgoError::Numerical("SVD failed to produce V".into()))?;
    let sig = &svd.singular_values;
    let coeffs = u.adjoint() * rhs;
    let mut floor_active = false;
    let mut scaled = DVector::zeros(sig.len());
    for i in 0..sig.len() {
        let s = sig[i];
        let t = s * s;
        let f = if t > floor {
            1.0 / s
        } else {
            floor_active = true;
            if floor > 0.0 {
                s / floor
            } else {
                0.0
            }
        };
        scaled[i] = coeffs[i] * f;
    }
    let x = vt.adjoint() * scaled;
    debug_assert_eq!(x.len(), n);
    let rn = rhs.norm();
    let residual = if rn > 0.0 { (matrix * &x - rhs).norm() / rn } else { 0.0 };
    Ok((
        x,
        SolveDiagnostics {
            sigma_min: sig.min(),
            sigma_max: sig.max(),
            floor_active,
            residual,
        },
    ))
}

pub fn solve_regularized(sys: &BieSystem) -> Result<(DVector<Complex64>, SolveDiagnostics)> {
    filtered_solve(&sys.matrix, &sys.rhs, sys.floor)
}
