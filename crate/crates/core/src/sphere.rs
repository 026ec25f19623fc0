//! Spherical-harmonic analysis and synthesis on the unit sphere.
//!
//! Functions on the sphere are carried as point clouds on a product
//! Gauss–Legendre grid: `N + 1` Gauss–Legendre nodes in `cos θ` times
//! `2(N + 1)` equispaced azimuths, `2(N + 1)^2` nodes in total. The rule is
//! exact for every product `Y_n^m conj(Y_n'^m')` with `n, n' ≤ N`, so
//! [`QuadratureGrid::analyze`] is an exact left inverse of
//! [`QuadratureGrid::synthesize`] on band-limited data.
//!
//! Harmonics are the orthonormal complex ones with the Condon–Shortley phase.
//! Coefficient vectors use the flat index `n^2 + n + m` (zero based).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{CgoError, Result};

pub type Point3 = [f64; 3];

/// Flat coefficient index of `(n, m)`, zero based.
#[inline]
pub fn sh_index(n: usize, m: i64) -> usize {
    debug_assert!(m.unsigned_abs() as usize <= n);
    ((n * n + n) as i64 + m) as usize
}

/// Inverse of [`sh_index`].
#[inline]
pub fn sh_degree_order(j: usize) -> (usize, i64) {
    let n = (j as f64).sqrt().floor() as usize;
    let n = if (n + 1) * (n + 1) <= j { n + 1 } else { n };
    (n, j as i64 - (n * n + n) as i64)
}

/// Number of coefficients up to degree `n_max`.
#[inline]
pub fn sh_count(n_max: usize) -> usize {
    (n_max + 1) * (n_max + 1)
}

/// Number of quadrature nodes for degree `n_max`.
#[inline]
pub fn node_count(n_max: usize) -> usize {
    2 * (n_max + 1) * (n_max + 1)
}

/// Sobolev multiplier `(1 + n^2)^{s/2}`.
#[inline]
pub fn sobolev_weight(n: usize, s: f64) -> f64 {
    (1.0 + (n * n) as f64).powf(0.5 * s)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(count: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; count];
    let mut weights = vec![0.0; count];
    let n = count as f64;
    for i in 0..count.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=count {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_count(x), p0 = P_{count-1}(x)
            dp = n * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[count - 1 - i] = x;
        weights[i] = w;
        weights[count - 1 - i] = w;
    }
    (nodes, weights)
}

/// Fully normalized associated Legendre values `P̄_n^m(x)` for `0 ≤ m ≤ n ≤ n_max`,
/// including `sqrt((2n+1)/4π · (n-m)!/(n+m)!)` and the Condon–Shortley phase,
/// stored at `sh_index(n, m)`.
pub fn normalized_legendre(n_max: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; sh_count(n_max)];
    let sin_theta = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = (0.25 / PI).sqrt();
    for m in 0..=n_max {
        if m > 0 {
            pmm *= -((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * sin_theta;
        }
        out[sh_index(m, m as i64)] = pmm;
        if m == n_max {
            break;
        }
        let mut p_prev = pmm;
        let mut p_cur = x * ((2 * m + 3) as f64).sqrt() * pmm;
        out[sh_index(m + 1, m as i64)] = p_cur;
        for n in (m + 2)..=n_max {
            let nf = n as f64;
            let mf = m as f64;
            let a = ((4.0 * nf * nf - 1.0) / (nf * nf - mf * mf)).sqrt();
            let b = (((nf - 1.0) * (nf - 1.0) - mf * mf) / (4.0 * (nf - 1.0) * (nf - 1.0) - 1.0)).sqrt();
            let p_next = a * (x * p_cur - b * p_prev);
            out[sh_index(n, m as i64)] = p_next;
            p_prev = p_cur;
            p_cur = p_next;
        }
    }
    out
}

/// All `Y_n^m(x)` for a unit vector `x`, indexed by [`sh_index`].
pub fn spherical_harmonics(n_max: usize, x: &Point3) -> Vec<Complex64> {
    let ct = x[2].clamp(-1.0, 1.0);
    let phi = x[1].atan2(x[0]);
    let plm = normalized_legendre(n_max, ct);
    let mut out = vec![Complex64::new(0.0, 0.0); sh_count(n_max)];
    for n in 0..=n_max {
        for m in 0..=n as i64 {
            let p = plm[sh_index(n, m)];
            let y = Complex64::from_polar(p, m as f64 * phi);
            out[sh_index(n, m)] = y;
            if m > 0 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                out[sh_index(n, -m)] = sign * y.conj();
            }
        }
    }
    out
}

/// Coefficients of a band-limited function in the harmonic basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    pub degree: usize,
    pub coeffs: DVector<Complex64>,
}

impl ShCoeffs {
    pub fn zeros(degree: usize) -> Self {
        Self {
            degree,
            coeffs: DVector::zeros(sh_count(degree)),
        }
    }

    /// Single unit coefficient at `(n, m)`.
    pub fn unit(degree: usize, n: usize, m: i64) -> Self {
        let mut c = Self::zeros(degree);
        c.coeffs[sh_index(n, m)] = Complex64::new(1.0, 0.0);
        c
    }

    pub fn from_vec(degree: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != sh_count(degree) {
            return Err(CgoError::Dimension {
                what: "coefficient vector",
                expected: sh_count(degree),
                got: coeffs.len(),
            });
        }
        Ok(Self {
            degree,
            coeffs: DVector::from_vec(coeffs),
        })
    }

    pub fn get(&self, n: usize, m: i64) -> Complex64 {
        self.coeffs[sh_index(n, m)]
    }
}

/// `⟨c1, c2⟩_s = Σ (1+n^2)^s c1_{n,m} conj(c2_{n,m})`.
pub fn sobolev_inner(c1: &ShCoeffs, c2: &ShCoeffs, s: f64) -> Result<Complex64> {
    if c1.degree != c2.degree {
        return Err(CgoError::Dimension {
            what: "coefficient degree",
            expected: c1.degree,
            got: c2.degree,
        });
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for n in 0..=c1.degree {
        let w = sobolev_weight(n, s).powi(2);
        for m in -(n as i64)..=(n as i64) {
            let j = sh_index(n, m);
            acc += w * c1.coeffs[j] * c2.coeffs[j].conj();
        }
    }
    Ok(acc)
}

/// `‖f‖_{H^s}` from the coefficients of `f`.
pub fn sobolev_norm(c: &ShCoeffs, s: f64) -> f64 {
    sobolev_inner(c, c, s).map(|v| v.re.max(0.0).sqrt()).unwrap_or(0.0)
}

/// Product Gauss–Legendre grid on the unit sphere together with the
/// precomputed harmonic tables.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    degree: usize,
    nodes: Vec<Point3>,
    weights: Vec<f64>,
    /// `Y[k, j] = Y_j(x_k)`, nodes × coefficients.
    ynm: DMatrix<Complex64>,
    /// Analysis matrix `A = Y^H W`, coefficients × nodes.
    analysis: DMatrix<Complex64>,
    degrees: Vec<usize>,
}

impl QuadratureGrid {
    pub fn new(degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(CgoError::param("spherical-harmonic degree must be at least 1"));
        }
        let n_theta = degree + 1;
        let n_phi = 2 * (degree + 1);
        let (ct, wt) = gauss_legendre(n_theta);
        let dphi = 2.0 * PI / n_phi as f64;

        let mut nodes = Vec::with_capacity(n_theta * n_phi);
        let mut weights = Vec::with_capacity(n_theta * n_phi);
        for (i, &c) in ct.iter().enumerate() {
            let st = (1.0 - c * c).sqrt();
            for j in 0..n_phi {
                let phi = j as f64 * dphi;
                nodes.push([st * phi.cos(), st * phi.sin(), c]);
                weights.push(wt[i] * dphi);
            }
        }

        let p = nodes.len();
        let jn = sh_count(degree);
        let mut ynm = DMatrix::zeros(p, jn);
        for (k, x) in nodes.iter().enumerate() {
            let y = spherical_harmonics(degree, x);
            for (j, v) in y.into_iter().enumerate() {
                ynm[(k, j)] = v;
            }
        }
        let analysis = DMatrix::from_fn(jn, p, |j, k| ynm[(k, j)].conj() * weights[k]);
        let degrees = (0..jn).map(|j| sh_degree_order(j).0).collect();

        Ok(Self {
            degree,
            nodes,
            weights,
            ynm,
            analysis,
            degrees,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn coeff_len(&self) -> usize {
        sh_count(self.degree)
    }

    pub fn nodes(&self) -> &[Point3] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Degree `n` of flat coefficient index `j`.
    pub fn degree_of(&self, j: usize) -> usize {
        self.degrees[j]
    }

    /// Synthesis table, nodes × coefficients.
    pub fn synthesis_matrix(&self) -> &DMatrix<Complex64> {
        &self.ynm
    }

    /// Analysis matrix `A`, coefficients × nodes.
    pub fn analysis_matrix(&self) -> &DMatrix<Complex64> {
        &self.analysis
    }

    /// Samples of `Y_j` at the nodes.
    pub fn harmonic_samples(&self, j: usize) -> DVector<Complex64> {
        self.ynm.column(j).into_owned()
    }

    fn check_values(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(CgoError::Dimension {
                what: "point-cloud values",
                expected: self.len(),
                got: len,
            });
        }
        Ok(())
    }

    /// Quadrature coefficients `c_{n,m}(g) = Σ_k w_k g(x_k) conj(Y_n^m(x_k))`.
    pub fn analyze(&self, values: &[Complex64]) -> Result<ShCoeffs> {
        self.check_values(values.len())?;
        let v = DVector::from_column_slice(values);
        Ok(ShCoeffs {
            degree: self.degree,
            coeffs: &self.analysis * v,
        })
    }

    /// Point values of `Σ c_{n,m} Y_n^m`; lower-degree inputs are zero padded.
    pub fn synthesize(&self, c: &ShCoeffs) -> Result<DVector<Complex64>> {
        if c.degree > self.degree || c.coeffs.len() != sh_count(c.degree) {
            return Err(CgoError::Dimension {
                what: "coefficient degree",
                expected: self.degree,
                got: c.degree,
            });
        }
        let used = c.coeffs.len();
        Ok(self.ynm.columns(0, used) * &c.coeffs)
    }

    /// Band-limiting projection `L_N = synthesize ∘ analyze` as a node matrix.
    pub fn projection_matrix(&self) -> DMatrix<Complex64> {
        &self.ynm * &self.analysis
    }

    /// Node matrix of the operator acting as `multiplier(n)` on degree `n`.
    pub fn spectral_operator(&self, multiplier: impl Fn(usize) -> f64) -> DMatrix<Complex64> {
        let mut scaled = self.ynm.clone();
        for j in 0..self.coeff_len() {
            let f = multiplier(self.degrees[j]);
            scaled.column_mut(j).scale_mut(f);
        }
        scaled * &self.analysis
    }

    /// Coefficient-space matrix `D` lifted to nodes, `Y D A`.
    pub fn lift(&self, coeff_matrix: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        &self.ynm * coeff_matrix * &self.analysis
    }

    /// Node-space matrix `Q` reduced to coefficients, `A Q Y`.
    pub fn reduce(&self, node_matrix: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        &self.analysis * node_matrix * &self.ynm
    }
}
