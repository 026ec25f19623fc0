//! Faddeev Green's function `G_ζ = G_0 + H_ζ` with `G_0(x) = 1/(4π|x|)`.
//!
//! Shifting the Fourier variable by `Re ζ` shows that `G_ζ` depends only on
//! `Im ζ`. Integrating out the component along `k = Im ζ / |Im ζ|` by residues
//! and the transverse plane by a Hankel transform leaves
//!
//! `H_ζ(x) = -(1/4π) ∫_0^κ J_0(ρ t) e^{-z t} dt`,  `z = x·k`, `ρ = |x - z k|`,
//!
//! with `κ = |Im ζ| = |ζ|/√2`. So `H_ζ` is real, harmonic, axisymmetric about
//! `Im ζ`, and `H_ζ(x) = κ H_1(κρ, κz)`. One two-dimensional table of `H_1` in
//! `(ρ, z)` covers every `ζ` up to a maximal `κ`; the rotation to the canonical
//! frequency reduces to computing `(ρ, z)`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{CgoError, Result};
use crate::sphere::{gauss_legendre, QuadratureGrid};

/// Largest `|x|` needed: differences of points on the unit sphere, with margin.
pub const KERNEL_RADIUS: f64 = 2.05;

pub type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Complex frequency with `ζ·ζ = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zeta {
    pub re: Vec3,
    pub im: Vec3,
}

impl Zeta {
    pub fn new(re: Vec3, im: Vec3) -> Result<Self> {
        let z = Self { re, im };
        let scale = dot(re, re).max(dot(im, im)).max(1e-300);
        if z.self_dot().norm() > 1e-10 * scale {
            return Err(CgoError::param("ζ·ζ must vanish"));
        }
        Ok(z)
    }

    pub fn components(&self) -> [Complex64; 3] {
        [0, 1, 2].map(|i| Complex64::new(self.re[i], self.im[i]))
    }

    pub fn self_dot(&self) -> Complex64 {
        Complex64::new(dot(self.re, self.re) - dot(self.im, self.im), 2.0 * dot(self.re, self.im))
    }

    /// `|ζ| = √2 κ`.
    pub fn magnitude(&self) -> f64 {
        (dot(self.re, self.re) + dot(self.im, self.im)).sqrt()
    }

    pub fn kappa(&self) -> f64 {
        dot(self.im, self.im).sqrt()
    }

    /// `x·ζ`.
    pub fn dot_point(&self, x: Vec3) -> Complex64 {
        Complex64::new(dot(x, self.re), dot(x, self.im))
    }

    /// `e^{i x·ζ}`.
    pub fn plane_wave(&self, x: Vec3) -> Complex64 {
        (Complex64::i() * self.dot_point(x)).exp()
    }

    /// Axial and transverse coordinates `(z, ρ)` of `x` about `Im ζ`.
    fn axis_coordinates(&self, x: Vec3) -> (f64, f64) {
        let k = self.kappa();
        let z = dot(x, self.im) / k;
        let rho = (dot(x, x) - z * z).max(0.0).sqrt();
        (z, rho)
    }
}

/// Orthonormal pair `(k⊥, k⊥⊥)` completing `ξ` to an orthogonal frame.
///
/// `k⊥ = ±normalize(ξ × e_a)` with `e_a` the coordinate axis least aligned with
/// `ξ`; the sign is that of the largest component of `ξ`, which makes `k⊥`
/// even in `ξ`. `k⊥⊥ = normalize(ξ × k⊥)`. At `ξ = 0` the pair is `(e_2, e_1)`.
pub fn orientation(xi: Vec3) -> (Vec3, Vec3) {
    if dot(xi, xi) == 0.0 {
        return ([0.0, 1.0, 0.0], [1.0, 0.0, 0.0]);
    }
    let abs = xi.map(f64::abs);
    let mut least = 0;
    let mut most = 0;
    for a in 1..3 {
        if abs[a] < abs[least] {
            least = a;
        }
        if abs[a] > abs[most] {
            most = a;
        }
    }
    let mut e = [0.0; 3];
    e[least] = 1.0;
    let mut kp = normalize(cross(xi, e));
    if xi[most] < 0.0 {
        kp = kp.map(|v| -v);
    }
    let kpp = normalize(cross(xi, kp));
    (kp, kpp)
}

/// `ζ(ξ) = -ξ/2 + (κ² - |ξ|²/4)^{1/2} k⊥⊥ + iκ k⊥`, which satisfies
/// `ζ·ζ = 0` and `(ζ + ξ)·(ζ + ξ) = 0`.
pub fn make_zeta(xi: Vec3, kappa: f64) -> Result<Zeta> {
    let xi2 = dot(xi, xi);
    let disc = kappa * kappa - xi2 / 4.0;
    if !(kappa >= 0.0) || disc < -1e-12 * kappa * kappa.max(1.0) {
        return Err(CgoError::param(format!(
            "κ = {kappa} is below |ξ|/2 = {}",
            xi2.sqrt() / 2.0
        )));
    }
    let s = disc.max(0.0).sqrt();
    let (kp, kpp) = orientation(xi);
    let re = [0, 1, 2].map(|i| -xi[i] / 2.0 + s * kpp[i]);
    let im = kp.map(|v| kappa * v);
    Ok(Zeta { re, im })
}

/// `G_0(x) = 1/(4π|x|)`.
pub fn laplace_green(x: Vec3) -> f64 {
    1.0 / (4.0 * PI * dot(x, x).sqrt())
}

/// `H_1(ρ, z) = -(1/4π) ∫_0^1 J_0(ρt) e^{-zt} dt` by Gauss–Legendre with
/// panels fine enough for the oscillation and growth of the integrand.
pub fn canonical_remainder_exact(rho: f64, z: f64) -> f64 {
    let panels = 1 + ((rho + z.abs()) / 4.0).ceil() as usize;
    let (x, w) = gauss_legendre(40);
    let mut acc = 0.0;
    for p in 0..panels {
        let a = p as f64 / panels as f64;
        let half = 0.5 / panels as f64;
        for (xi, wi) in x.iter().zip(&w) {
            let t = a + half * (xi + 1.0);
            acc += wi * half * libm::j0(rho * t) * (-z * t).exp();
        }
    }
    -acc / (4.0 * PI)
}

/// `H_ζ(x)` by direct quadrature; no range limit.
pub fn remainder_exact(x: Vec3, zeta: &Zeta) -> f64 {
    let k = zeta.kappa();
    if k == 0.0 {
        return 0.0;
    }
    let (z, rho) = zeta.axis_coordinates(x);
    k * canonical_remainder_exact(k * rho, k * z)
}

const TABLE_MAGIC: &[u8; 8] = b"CGOFDV01";
const TABLE_NODES: usize = 40;

/// Tabulated `H_1(ρ, z)` on `ρ ∈ [0, R]`, `z ∈ [-R, R]`, `R = 2.05 κ_max`,
/// with 4-point Lagrange interpolation in each variable.
#[derive(Debug, Clone, PartialEq)]
pub struct FaddeevTable {
    kappa_max: f64,
    spacing: f64,
    n_rho: usize,
    n_z: usize,
    z_min: f64,
    values: Vec<f64>,
}

impl FaddeevTable {
    pub fn build(kappa_max: f64, spacing: f64) -> Result<Self> {
        if !(kappa_max > 0.0) || !(spacing > 0.0) || spacing > 0.5 {
            return Err(CgoError::param(format!(
                "table needs κ_max > 0 and spacing in (0, 0.5], got {kappa_max}, {spacing}"
            )));
        }
        let extent = KERNEL_RADIUS * kappa_max;
        let half = (extent / spacing).ceil() as usize;
        let n_rho = half + 3;
        // z = 0 is a lattice node
        let z_min = -((half + 2) as f64) * spacing;
        let n_z = 2 * half + 5;
        if n_rho.saturating_mul(n_z) > 400_000_000 {
            return Err(CgoError::param("Faddeev table too large; increase the spacing"));
        }
        let (x, w) = gauss_legendre(TABLE_NODES);
        // nodes on [0, 1]
        let t: Vec<f64> = x.iter().map(|v| 0.5 * (v + 1.0)).collect();
        let wt: Vec<f64> = w.iter().map(|v| 0.5 * v).collect();
        let bessel = DMatrix::from_fn(n_rho, TABLE_NODES, |i, k| wt[k] * libm::j0(i as f64 * spacing * t[k]));
        let expo = DMatrix::from_fn(TABLE_NODES, n_z, |k, j| (-(z_min + j as f64 * spacing) * t[k]).exp());
        let prod = bessel * expo;
        let scale = -1.0 / (4.0 * PI);
        let values = prod.as_slice().iter().map(|v| v * scale).collect();
        Ok(Self {
            kappa_max,
            spacing,
            n_rho,
            n_z,
            z_min,
            values,
        })
    }

    pub fn kappa_max(&self) -> f64 {
        self.kappa_max
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    fn extent(&self) -> f64 {
        KERNEL_RADIUS * self.kappa_max
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        // column-major (ρ fastest), matching the product above
        self.values[i + j * self.n_rho]
    }

    /// Interpolated `H_1(ρ, z)`.
    pub fn canonical(&self, rho: f64, z: f64) -> Result<f64> {
        let ext = self.extent() * (1.0 + 1e-12);
        if !(rho >= 0.0 && rho <= ext && z.abs() <= ext) {
            return Err(CgoError::Range(format!(
                "Faddeev table covers ρ, |z| ≤ {:.4}, got ρ = {rho:.4}, z = {z:.4}",
                self.extent()
            )));
        }
        let h = self.spacing;
        let fi = rho / h;
        let i1 = (fi.floor() as usize).min(self.n_rho - 3);
        let u = fi - i1 as f64;
        let fj = (z - self.z_min) / h;
        let j1 = (fj.floor() as usize).clamp(1, self.n_z - 3);
        let v = fj - j1 as f64;
        let wu = lagrange4(u);
        let wv = lagrange4(v);
        let mut acc = 0.0;
        for (a, wa) in wu.iter().enumerate() {
            // ρ is even: index -1 reflects to 1
            let i = (i1 as i64 + a as i64 - 1).unsigned_abs() as usize;
            let mut row = 0.0;
            for (b, wb) in wv.iter().enumerate() {
                row += wb * self.at(i, j1 + b - 1);
            }
            acc += wa * row;
        }
        Ok(acc)
    }

    /// `H_ζ(x)`, for `|x| ≤ 2.05` and `κ ≤ κ_max`.
    pub fn remainder(&self, x: Vec3, zeta: &Zeta) -> Result<f64> {
        let k = zeta.kappa();
        if k > self.kappa_max * (1.0 + 1e-12) {
            return Err(CgoError::Range(format!(
                "|ζ| = {:.4} exceeds the table limit {:.4}",
                zeta.magnitude(),
                self.kappa_max * 2f64.sqrt()
            )));
        }
        if dot(x, x).sqrt() > KERNEL_RADIUS * (1.0 + 1e-12) {
            return Err(CgoError::Range(format!("|x| = {:.4} exceeds {KERNEL_RADIUS}", dot(x, x).sqrt())));
        }
        if k == 0.0 {
            return Ok(0.0);
        }
        let (z, rho) = zeta.axis_coordinates(x);
        Ok(k * self.canonical(k * rho, k * z)?)
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(TABLE_MAGIC)?;
        for v in [self.kappa_max, self.spacing, self.z_min] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in [self.n_rho as u64, self.n_z as u64, TABLE_NODES as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let fmt = |reason: &str| CgoError::Format {
            what: "Faddeev table",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != TABLE_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut word = [0u8; 8];
        let mut next = |input: &mut dyn Read| -> Result<[u8; 8]> {
            input.read_exact(&mut word).map_err(|_| fmt("truncated header"))?;
            Ok(word)
        };
        let kappa_max = f64::from_le_bytes(next(&mut input)?);
        let spacing = f64::from_le_bytes(next(&mut input)?);
        let z_min = f64::from_le_bytes(next(&mut input)?);
        let n_rho = u64::from_le_bytes(next(&mut input)?) as usize;
        let n_z = u64::from_le_bytes(next(&mut input)?) as usize;
        let nodes = u64::from_le_bytes(next(&mut input)?) as usize;
        if nodes != TABLE_NODES || n_rho < 4 || n_z < 4 || n_rho.saturating_mul(n_z) > 400_000_000 {
            return Err(fmt("inconsistent header"));
        }
        let mut bytes = vec![0u8; n_rho * n_z * 8];
        input.read_exact(&mut bytes).map_err(|_| fmt("truncated data"))?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            kappa_max,
            spacing,
            n_rho,
            n_z,
            z_min,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CgoError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| CgoError::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| CgoError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CgoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CgoError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Loads a cached table covering `kappa_max` at `spacing`, or builds and
    /// caches a new one.
    pub fn load_or_build(path: &Path, kappa_max: f64, spacing: f64) -> Result<Self> {
        if let Ok(t) = Self::load(path) {
            if t.kappa_max >= kappa_max && t.spacing == spacing {
                return Ok(t);
            }
        }
        let t = Self::build(kappa_max, spacing)?;
        t.save(path)?;
        Ok(t)
    }
}

/// Weights of 4-point Lagrange interpolation on nodes -1, 0, 1, 2 at `u`.
#[inline]
fn lagrange4(u: f64) -> [f64; 4] {
    [
        -u * (u - 1.0) * (u - 2.0) / 6.0,
        (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
        -(u + 1.0) * u * (u - 2.0) / 2.0,
        (u + 1.0) * u * (u - 1.0) / 6.0,
    ]
}

/// `H_ζ(x)` as a complex number (it is real).
pub fn green_remainder(x: Vec3, zeta: &Zeta, table: &FaddeevTable) -> Result<Complex64> {
    Ok(Complex64::new(table.remainder(x, zeta)?, 0.0))
}

/// `g_ζ(x) = e^{-ix·ζ} G_ζ(x)`, by direct quadrature.
pub fn conjugated_kernel(x: Vec3, zeta: &Zeta) -> Complex64 {
    let g = laplace_green(x) + remainder_exact(x, zeta);
    (-Complex64::i() * zeta.dot_point(x)).exp() * g
}

/// `𝒮_0` on the unit sphere: multiplication by `1/(2n+1)` on degree `n`.
pub fn single_layer_matrix(grid: &QuadratureGrid) -> DMatrix<Complex64> {
    grid.spectral_operator(|n| 1.0 / (2 * n + 1) as f64)
}

pub fn single_layer_zero(charge: &[Complex64], grid: &QuadratureGrid) -> Result<Vec<Complex64>> {
    let c = grid.analyze(charge)?;
    let scaled = crate::sphere::ShCoeffs::from_vec(
        grid.degree(),
        (0..grid.coeff_len()).map(|j| c.coeffs[j] / (2 * grid.degree_of(j) + 1) as f64).collect(),
    )?;
    Ok(grid.synthesize(&scaled)?.iter().copied().collect())
}

/// Nyström matrix `[H]_{kl} = w_l H_ζ(x_k - x_l)`.
pub fn h_matrix(zeta: &Zeta, grid: &QuadratureGrid, table: &FaddeevTable) -> Result<DMatrix<Complex64>> {
    let p = grid.len();
    let nodes = grid.nodes();
    let w = grid.weights();
    let rows: Vec<Result<Vec<f64>>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let xk = nodes[k];
            (0..p)
                .map(|l| {
                    let d = [xk[0] - nodes[l][0], xk[1] - nodes[l][1], xk[2] - nodes[l][2]];
                    Ok(w[l] * table.remainder(d, zeta)?)
                })
                .collect()
        })
        .collect();
    let mut m = DMatrix::zeros(p, p);
    for (k, row) in rows.into_iter().enumerate() {
        for (l, v) in row?.into_iter().enumerate() {
            m[(k, l)] = Complex64::new(v, 0.0);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{sh_index, spherical_harmonics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table() -> FaddeevTable {
        FaddeevTable::build(2.5, 0.01).unwrap()
    }

    fn random_xi(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        [0, 1, 2].map(|_| rng.random_range(-scale..scale))
    }

    #[test]
    fn zeta_examples() {
        let z = make_zeta([0.0; 3], 1.0).unwrap();
        assert_eq!(z.re, [1.0, 0.0, 0.0]);
        assert_eq!(z.im, [0.0, 1.0, 0.0]);
        assert!((z.magnitude() - 2f64.sqrt()).abs() < 1e-15);

        let z = make_zeta([2.0, 0.0, 0.0], 1.0).unwrap();
        assert!((z.re[0] + 1.0).abs() < 1e-15 && z.re[1].abs() < 1e-15 && z.re[2].abs() < 1e-15);
        assert!(z.im[0].abs() < 1e-15);
        assert!((z.magnitude() - 2f64.sqrt()).abs() < 1e-15);

        assert!(make_zeta([2.0, 0.0, 0.0], 0.99).is_err());
    }

    #[test]
    fn zeta_invariants_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let xi = random_xi(&mut rng, 5.0);
            let kappa = dot(xi, xi).sqrt() / 2.0 + rng.random_range(0.0..3.0);
            let z = make_zeta(xi, kappa).unwrap();
            assert!(z.self_dot().norm() < 1e-12 * kappa * kappa.max(1.0));
            let shifted = Zeta {
                re: [0, 1, 2].map(|i| z.re[i] + xi[i]),
                im: z.im,
            };
            assert!(shifted.self_dot().norm() < 1e-12 * kappa * kappa.max(1.0));
            assert!((z.magnitude() - 2f64.sqrt() * kappa).abs() < 1e-12 * kappa);
            let (kp, kpp) = orientation(xi);
            assert!(dot(kp, xi).abs() < 1e-12 && dot(kpp, xi).abs() < 1e-12 && dot(kp, kpp).abs() < 1e-12);
            // ζ(-ξ) = -conj ζ(ξ)
            let m = make_zeta(xi.map(|v| -v), kappa).unwrap();
            for i in 0..3 {
                assert!((m.re[i] + z.re[i]).abs() < 1e-12 && (m.im[i] - z.im[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_matches_direct_quadrature() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ext = 2.05 * 2.5;
        for _ in 0..500 {
            let rho = rng.random_range(0.0..ext);
            let z = rng.random_range(-ext..ext);
            let a = t.canonical(rho, z).unwrap();
            let b = canonical_remainder_exact(rho, z);
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "ρ={rho} z={z}: {a} vs {b}");
        }
        assert!((t.canonical(0.0, 0.0).unwrap() + 1.0 / (4.0 * PI)).abs() < 1e-14);
        assert!(t.canonical(0.0, 5.2).is_err());
    }

    #[test]
    fn remainder_is_harmonic() {
        let t = table();
        let zeta = make_zeta([0.0; 3], 1.0).unwrap();
        let h = 0.05;
        let c = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
        let mut worst = 0.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let mut x = random_xi(&mut rng, 1.9);
            while dot(x, x).sqrt() > 1.9 {
                x = random_xi(&mut rng, 1.9);
            }
            let mut lap = 0.0;
            for a in 0..3 {
                for (s, cs) in c.iter().enumerate() {
                    let mut y = x;
                    y[a] += (s as f64 - 2.0) * h;
                    lap += cs * t.remainder(y, &zeta).unwrap();
                }
            }
            worst = worst.max((lap / (h * h)).abs());
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn scaling_identity() {
        let t = table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let xi = random_xi(&mut rng, 1.0);
            let z = make_zeta(xi, 1.0).unwrap();
            let x = random_xi(&mut rng, 0.55);
            for s in [0.5, 2.0] {
                let zs = Zeta {
                    re: z.re.map(|v| s * v),
                    im: z.im.map(|v| s * v),
                };
                let lhs = t.remainder(x, &zs).unwrap();
                let rhs = s * t.remainder(x.map(|v| s * v), &z).unwrap();
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
                let exact = remainder_exact(x, &zs);
                assert!((lhs - exact).abs() < 1e-9 * exact.abs().max(1.0));
            }
        }
    }

    #[test]
    fn conjugated_kernel_decays_in_every_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = make_zeta([0.3, -0.2, 0.5], 1.5).unwrap();
        let kdir = normalize(z.im);
        let mut dirs = vec![kdir, kdir.map(|v| -v), normalize(z.re)];
        for _ in 0..5 {
            dirs.push(normalize(random_xi(&mut rng, 1.0)));
        }
        for d in dirs {
            for r in [5.0, 10.0, 20.0] {
                let g = conjugated_kernel(d.map(|v| r * v), &z);
                // the Faddeev kernel decays like 1/|x|; other fundamental
                // solutions grow exponentially in some direction
                assert!(g.norm() * 4.0 * PI * r < 2.0, "dir {d:?} r {r}: {g}");
            }
        }
    }

    #[test]
    fn remainder_is_smooth_at_origin() {
        let t = table();
        let z = make_zeta([0.0; 3], 1.7).unwrap();
        let h0 = t.remainder([0.0; 3], &z).unwrap();
        assert!((h0 + 1.7 / (4.0 * PI)).abs() < 1e-12);
        let h1 = t.remainder([1e-6, 0.0, 0.0], &z).unwrap();
        assert!((h1 - h0).abs() < 1e-8);
    }

    #[test]
    fn h_matrix_trace_and_mean_value() {
        let t = table();
        let grid = QuadratureGrid::new(10).unwrap();
        let z = make_zeta([0.4, 0.1, -0.3], 2.0).unwrap();
        let h = h_matrix(&z, &grid, &t).unwrap();
        let trace: f64 = (0..grid.len()).map(|k| h[(k, k)].re).sum();
        assert!((trace + 2.0).abs() < 1e-10, "{trace}");
        // harmonic in y: the sphere mean of H(x_k - ·) is H(x_k)
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let k = rng.random_range(0..grid.len());
            let row: f64 = (0..grid.len()).map(|l| h[(k, l)].re).sum();
            let expect = 4.0 * PI * remainder_exact(grid.nodes()[k], &z);
            assert!((row - expect).abs() < 1e-6 * expect.abs().max(1.0), "{row} {expect}");
        }
    }

    #[test]
    fn h_matrix_small_zeta_and_rotation_invariance() {
        let t = table();
        let grid = QuadratureGrid::new(6).unwrap();
        let small = make_zeta([0.0; 3], 0.1 / 2f64.sqrt()).unwrap();
        let hs = h_matrix(&small, &grid, &t).unwrap();
        assert!(hs.camax() < 0.01);
        let a = make_zeta([0.0; 3], 1.3).unwrap();
        let b = make_zeta([1.0, 1.0, 1.0], 1.3).unwrap();
        let ta: Complex64 = h_matrix(&a, &grid, &t).unwrap().trace();
        let tb: Complex64 = h_matrix(&b, &grid, &t).unwrap().trace();
        assert!((ta - tb).norm() < 1e-12);
        let far = make_zeta([0.0; 3], 3.0).unwrap();
        assert!(h_matrix(&far, &grid, &t).is_err());
    }

    #[test]
    fn single_layer_eigenvalues_match_potential_theory() {
        // interior potential of a Y_n^m layer is r^n/(2n+1) Y_n^m, checked
        // against a fine quadrature of 1/(4π|x - y|)
        let fine = QuadratureGrid::new(40).unwrap();
        let x = [0.2, -0.3, 0.3];
        let r = dot(x, x).sqrt();
        let yx = spherical_harmonics(5, &x.map(|v| v / r));
        for (n, m) in [(0usize, 0i64), (2, 1), (5, 3)] {
            let j = sh_index(n, m);
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, node) in fine.nodes().iter().enumerate() {
                let d = [x[0] - node[0], x[1] - node[1], x[2] - node[2]];
                acc += fine.weights()[k] * fine.harmonic_samples(j)[k] * laplace_green(d);
            }
            let expect = yx[j] * r.powi(n as i32) / (2 * n + 1) as f64;
            assert!((acc - expect).norm() < 1e-8, "n={n}: {acc} {expect}");
        }
        let grid = QuadratureGrid::new(8).unwrap();
        let y53: Vec<Complex64> = grid.harmonic_samples(sh_index(5, 3)).iter().copied().collect();
        let out = single_layer_zero(&y53, &grid).unwrap();
        for k in 0..grid.len() {
            assert!((out[k] - y53[k] / 11.0).norm() < 1e-12);
        }
        let s0 = single_layer_matrix(&grid);
        let one = grid.harmonic_samples(0);
        assert!((&s0 * &one - &one).camax() < 1e-12);
    }

    #[test]
    fn table_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.bin");
        let a = FaddeevTable::load_or_build(&path, 0.5, 0.05).unwrap();
        assert!(path.exists());
        let b = FaddeevTable::load_or_build(&path, 0.4, 0.05).unwrap();
        assert_eq!(a, b);
        let c = FaddeevTable::load_or_build(&path, 0.8, 0.05).unwrap();
        assert!(c.kappa_max() == 0.8);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(FaddeevTable::load(&path).is_err());
    }
}
