//! Discrete Dirichlet-to-Neumann operators.
//!
//! A [`DtnMatrix`] acts on point-cloud Dirichlet data at the quadrature nodes
//! and returns point-cloud Neumann data. Its coefficient form `ℬ(Q)`, scaled
//! by the Sobolev multipliers, approximates the operator in
//! `H^s → H^{-s}` and gives the data-space norm used for noise levels.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CgoError, Result};
use crate::sphere::{sobolev_weight, QuadratureGrid};

/// Sobolev index of the data-space norm.
pub const DATA_SOBOLEV_INDEX: f64 = 0.5;

/// Largest coefficient dimension for which the spectral norm uses a full SVD.
const SVD_NORM_LIMIT: usize = 700;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtnKind {
    /// A full map such as `Λ_γ` or `Λ_1`.
    Map,
    /// A difference of maps, `Λ - Λ_1`.
    Difference,
    /// A data perturbation `ℰ`.
    Perturbation,
}

impl DtnKind {
    pub fn code(self) -> u8 {
        match self {
            DtnKind::Map => 0,
            DtnKind::Difference => 1,
            DtnKind::Perturbation => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DtnKind::Map),
            1 => Some(DtnKind::Difference),
            2 => Some(DtnKind::Perturbation),
            _ => None,
        }
    }
}

/// Node-to-node matrix `Q` with `(Λg)(x_k) ≈ [Q g]_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DtnMatrix {
    pub degree: usize,
    pub kind: DtnKind,
    pub entries: DMatrix<Complex64>,
}

impl DtnMatrix {
    pub fn new(degree: usize, kind: DtnKind, entries: DMatrix<Complex64>) -> Result<Self> {
        let p = crate::sphere::node_count(degree);
        if entries.nrows() != p || entries.ncols() != p {
            return Err(CgoError::Dimension {
                what: "DtN matrix size",
                expected: p,
                got: entries.nrows().max(entries.ncols()),
            });
        }
        Ok(Self { degree, kind, entries })
    }

    pub fn zeros(degree: usize, kind: DtnKind) -> Self {
        let p = crate::sphere::node_count(degree);
        Self {
            degree,
            kind,
            entries: DMatrix::zeros(p, p),
        }
    }

    /// Map diagonal in the harmonic basis, `Λ Y_n^m = eigenvalue(n) Y_n^m`.
    pub fn from_eigenvalues(grid: &QuadratureGrid, eigenvalue: impl Fn(usize) -> f64) -> Self {
        Self {
            degree: grid.degree(),
            kind: DtnKind::Map,
            entries: grid.spectral_operator(eigenvalue),
        }
    }

    /// Map `Q̃ A` whose coefficient matrix is `coeffs` (rows `n'`, columns `n`).
    pub fn from_coefficients(grid: &QuadratureGrid, kind: DtnKind, coeffs: &DMatrix<Complex64>) -> Result<Self> {
        if coeffs.nrows() != grid.coeff_len() || coeffs.ncols() != grid.coeff_len() {
            return Err(CgoError::Dimension {
                what: "coefficient matrix",
                expected: grid.coeff_len(),
                got: coeffs.nrows(),
            });
        }
        Ok(Self {
            degree: grid.degree(),
            kind,
            entries: grid.lift(coeffs),
        })
    }

    pub fn nodes(&self) -> usize {
        self.entries.nrows()
    }

    fn check_compatible(&self, other: &DtnMatrix) -> Result<()> {
        if self.degree != other.degree || self.entries.shape() != other.entries.shape() {
            return Err(CgoError::Dimension {
                what: "DtN degree",
                expected: self.degree,
                got: other.degree,
            });
        }
        Ok(())
    }

    /// `self - other`, tagged as a difference of maps.
    pub fn difference(&self, other: &DtnMatrix) -> Result<DtnMatrix> {
        self.check_compatible(other)?;
        Ok(DtnMatrix {
            degree: self.degree,
            kind: DtnKind::Difference,
            entries: &self.entries - &other.entries,
        })
    }

    pub fn scaled(&self, factor: f64) -> DtnMatrix {
        DtnMatrix {
            degree: self.degree,
            kind: self.kind,
            entries: self.entries.map(|z| z * factor),
        }
    }

    pub fn add(&self, other: &DtnMatrix) -> Result<DtnMatrix> {
        self.check_compatible(other)?;
        Ok(DtnMatrix {
            degree: self.degree,
            kind: self.kind,
            entries: &self.entries + &other.entries,
        })
    }
}

/// `Λ_1`: the homogeneous map, `Λ_1 Y_n^m = n Y_n^m`.
pub fn lambda_one(grid: &QuadratureGrid) -> DtnMatrix {
    DtnMatrix::from_eigenvalues(grid, |n| n as f64)
}

/// Coefficient form `𝒬` with `[𝒬]_{ij} = w_{-s}(n) w_{-s}(n') c_{n',m'}(Λ Y_n^m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffOperator {
    pub degree: usize,
    pub s: f64,
    pub entries: DMatrix<Complex64>,
}

impl CoeffOperator {
    /// Operator 2-norm of the coefficient matrix.
    pub fn norm(&self) -> f64 {
        spectral_norm(&self.entries)
    }
}

fn check_grid(q: &DtnMatrix, grid: &QuadratureGrid) -> Result<()> {
    if q.degree != grid.degree() || q.nodes() != grid.len() {
        return Err(CgoError::Dimension {
            what: "DtN matrix vs quadrature grid",
            expected: grid.len(),
            got: q.nodes(),
        });
    }
    Ok(())
}

/// The map `ℬ`: from a node matrix to its scaled coefficient matrix.
pub fn to_coeff_operator(q: &DtnMatrix, s: f64, grid: &QuadratureGrid) -> Result<CoeffOperator> {
    check_grid(q, grid)?;
    let mut c = grid.reduce(&q.entries);
    scale_coeffs(&mut c, s, grid);
    Ok(CoeffOperator {
        degree: q.degree,
        s,
        entries: c,
    })
}

fn scale_coeffs(c: &mut DMatrix<Complex64>, s: f64, grid: &QuadratureGrid) {
    let w: Vec<f64> = (0..grid.coeff_len()).map(|j| sobolev_weight(grid.degree_of(j), -s)).collect();
    for j in 0..c.ncols() {
        for i in 0..c.nrows() {
            c[(i, j)] *= w[i] * w[j];
        }
    }
}

/// Largest singular value. Full SVD up to moderate sizes, power iteration on
/// `M^H M` beyond that.
pub fn spectral_norm(m: &DMatrix<Complex64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows().max(m.ncols()) <= SVD_NORM_LIMIT {
        return m.singular_values().max();
    }
    let mut v = nalgebra::DVector::from_fn(m.ncols(), |i, _| Complex64::new(1.0 + (i as f64 * 0.618).sin(), 0.0));
    v /= Complex64::new(v.norm(), 0.0);
    let mut sigma = 0.0;
    for _ in 0..1000 {
        let w = m.adjoint() * (m * &v);
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw.sqrt();
        v = w / Complex64::new(nw, 0.0);
        if (next - sigma).abs() <= 1e-13 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Approximate `‖Q‖_{H^{1/2} → H^{-1/2}}` as `‖ℬ(Q)‖_N`.
pub fn y_norm(q: &DtnMatrix, grid: &QuadratureGrid) -> Result<f64> {
    Ok(to_coeff_operator(q, DATA_SOBOLEV_INDEX, grid)?.norm())
}

/// Replaces `E` by the node matrix whose coefficient matrix equals that of `E`
/// with the first row and column set to zero. Constants are then in the kernel
/// and every output has zero mean.
pub fn project_compatible(e: &DMatrix<Complex64>, grid: &QuadratureGrid) -> DMatrix<Complex64> {
    let c = grid.reduce(e);
    let mut removed = DMatrix::zeros(c.nrows(), c.ncols());
    removed.row_mut(0).copy_from(&c.row(0));
    removed.column_mut(0).copy_from(&c.column(0));
    e - grid.lift(&removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    /// Fixed scale `δ` of the standardized perturbation.
    Delta(f64),
    /// Absolute noise level `‖ℰ‖_Y = ε`.
    Epsilon(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Independent standard normal entries.
    #[default]
    Iid,
    /// Columns of `Q̃` perturbed independently with per-pattern scales; rows of
    /// the resulting node matrix are correlated through the analysis matrix.
    ElectrodeCorrelated,
}

/// Result of [`add_noise`].
#[derive(Debug, Clone)]
pub struct NoiseRealization {
    /// `Q_γ + δE`.
    pub noisy: DtnMatrix,
    /// The projected standardized perturbation `E` (before scaling by `δ`).
    pub perturbation: DtnMatrix,
    pub delta: f64,
    /// `‖ℬ(δE)‖_N`.
    pub epsilon: f64,
    /// Mean harmonic-wise signal-to-noise ratio; infinite when `δ = 0`.
    pub snr: f64,
    /// `δ ‖ℬE‖ / ‖ℬQ_γ‖`.
    pub relative_noise: f64,
}

fn draw_perturbation(q: &DtnMatrix, model: NoiseModel, seed: u64, grid: &QuadratureGrid) -> DMatrix<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = grid.len();
    match model {
        NoiseModel::Iid => DMatrix::from_fn(p, p, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(x, 0.0)
        }),
        NoiseModel::ElectrodeCorrelated => {
            // Q̃ columns are Λ Y_j at the nodes; scale each pattern's noise by
            // its own signal strength.
            let qt = &q.entries * grid.synthesis_matrix();
            let norms: Vec<f64> = (0..qt.ncols()).map(|j| qt.column(j).norm()).collect();
            let mean = norms.iter().sum::<f64>() / norms.len() as f64;
            let mut et = DMatrix::zeros(p, grid.coeff_len());
            for j in 0..grid.coeff_len() {
                let scale = if mean > 0.0 { norms[j] / mean } else { 1.0 };
                for k in 0..p {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    et[(k, j)] = Complex64::new(scale * x, 0.0);
                }
            }
            et * grid.analysis_matrix()
        }
    }
}

/// Mean over harmonics of `‖Q_γ Y‖ / (δ ‖E Y‖)`.
pub fn signal_to_noise(q: &DtnMatrix, e: &DtnMatrix, delta: f64, grid: &QuadratureGrid) -> f64 {
    if delta == 0.0 {
        return f64::INFINITY;
    }
    let y = grid.synthesis_matrix();
    let qy = &q.entries * y;
    let ey = &e.entries * y;
    let total: f64 = (0..y.ncols()).map(|j| qy.column(j).norm() / (delta * ey.column(j).norm())).sum();
    total / y.ncols() as f64
}

/// `δ ‖ℬE‖_N / ‖ℬQ_γ‖_N`.
pub fn relative_noise(q: &DtnMatrix, e: &DtnMatrix, delta: f64, grid: &QuadratureGrid) -> Result<f64> {
    Ok(delta * y_norm(e, grid)? / y_norm(q, grid)?)
}

/// Perturbs `Q_γ` by `δE` with `E` standard Gaussian projected onto the
/// compatible class. For an `Epsilon` target, `δ` is chosen so that
/// `‖ℬ(δE)‖_N = ε`.
pub fn add_noise(q: &DtnMatrix, target: NoiseTarget, seed: u64, model: NoiseModel, grid: &QuadratureGrid) -> Result<NoiseRealization> {
    check_grid(q, grid)?;
    if q.kind != DtnKind::Map {
        return Err(CgoError::param("noise is added to a full DtN map"));
    }
    let level = match target {
        NoiseTarget::Delta(v) | NoiseTarget::Epsilon(v) => v,
    };
    if !(level >= 0.0) || !level.is_finite() {
        return Err(CgoError::param(format!("noise level must be a finite non-negative number, got {level}")));
    }

    let raw = draw_perturbation(q, model, seed, grid);
    let e = DtnMatrix {
        degree: q.degree,
        kind: DtnKind::Perturbation,
        entries: project_compatible(&raw, grid),
    };
    let e_norm = y_norm(&e, grid)?;
    let delta = match target {
        NoiseTarget::Delta(d) => d,
        NoiseTarget::Epsilon(eps) => {
            if e_norm == 0.0 {
                return Err(CgoError::Numerical("perturbation has zero norm".into()));
            }
            eps / e_norm
        }
    };
    let scaled = e.scaled(delta);
    let noisy = if delta == 0.0 { q.clone() } else { q.add(&scaled)? };
    let epsilon = y_norm(&scaled, grid)?;
    let snr = signal_to_noise(q, &e, delta, grid);
    let relative_noise = relative_noise(q, &e, delta, grid)?;
    Ok(NoiseRealization {
        noisy,
        perturbation: e,
        delta,
        epsilon,
        snr,
        relative_noise,
    })
}
