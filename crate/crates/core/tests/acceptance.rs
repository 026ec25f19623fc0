//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N: PASS|FAIL ...` line to stderr (uncaptured, so it shows in
//! plain `cargo test` output) and then asserts. Criteria run one at a time so
//! the wall-clock budgets are measured without contention.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use cgo_core::cgo::{solve_regularized, BieContext, BieSystem, ZetaRule};
use cgo_core::dtn::{add_noise, lambda_one, relative_noise, signal_to_noise, y_norm, NoiseModel, NoiseTarget};
use cgo_core::faddeev::{laplace_green, make_zeta, remainder_exact, single_layer_matrix, FaddeevTable, Zeta};
use cgo_core::forward::SmoothRadial;
use cgo_core::io::load_dtn;
use cgo_core::mesh::BallGrid;
use cgo_core::pipeline::{
    compute_forward, reconstruct, run_reconstruction, table_for, ExperimentConfig, ForwardConfig, ForwardSolver,
    Manifest, NoiseConfig, PhantomSource, SigmaConfig, TruncationConfig,
};
use cgo_core::scattering::{invert_direct, invert_to_potential, scattering_transform, scattering_value, ScatteringGrid};
use cgo_core::sigma::{alpha_rule, solve_sigma_samples, truncation_radius, SigmaOptions};
use cgo_core::sphere::QuadratureGrid;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id}: {verdict}  {detail}");
    assert!(pass, "criterion {id} failed: {detail}");
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

#[test]
fn criterion_01_spherical_machinery() {
    let _g = serial();
    let start = Instant::now();
    let grid = QuadratureGrid::new(8).unwrap();
    let y = grid.synthesis_matrix();
    let w = DMatrix::from_diagonal(&DVector::from_iterator(grid.len(), grid.weights().iter().map(|v| c(*v))));
    let gram = y.adjoint() * &w * y;
    let ortho = (gram - DMatrix::identity(grid.coeff_len(), grid.coeff_len())).camax();

    let l1 = lambda_one(&grid).entries;
    let s0 = single_layer_matrix(&grid);
    let (mut lambda_err, mut single_err) = (0.0f64, 0.0f64);
    for j in 0..grid.coeff_len() {
        let n = grid.degree_of(j) as f64;
        let yj = grid.harmonic_samples(j);
        lambda_err = lambda_err.max((&l1 * &yj - &yj * c(n)).camax());
        single_err = single_err.max((&s0 * &yj - &yj * c(1.0 / (2.0 * n + 1.0))).camax());
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ortho <= 1e-10 && lambda_err <= 1e-10 && single_err <= 1e-8 && secs < 10.0;
    report(
        1,
        pass,
        &format!("N=8 orthonormality {ortho:.2e} (≤1e-10), Λ1 {lambda_err:.2e} (≤1e-10), S0 {single_err:.2e} (≤1e-8), {secs:.2}s (<10s)"),
    );
}

#[test]
fn criterion_02_faddeev_contract() {
    let _g = serial();
    const INTERP_TOL: f64 = 1e-9;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("faddeev.bin");
    let start = Instant::now();
    let table = FaddeevTable::load_or_build(&path, 3.0, 0.01).unwrap();
    let build = start.elapsed();
    let cached = FaddeevTable::load_or_build(&path, 2.0, 0.01).unwrap();
    let cache_ok = cached == table;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point = |rng: &mut ChaCha8Rng, scale: f64| -> [f64; 3] {
        loop {
            let x = [0, 1, 2].map(|_| rng.random_range(-scale..scale));
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if r <= scale && r > 0.05 {
                return x;
            }
        }
    };

    // fourth-order five-point Laplacian
    let stencil = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
    let h = 0.05;
    let mut harmonic = 0.0f64;
    for kappa in [0.7, 1.5, 3.0] {
        let zeta = make_zeta([0.3, -0.4, 0.2], kappa).unwrap();
        for _ in 0..100 {
            let x = point(&mut rng, 1.9);
            let mut lap = 0.0;
            for a in 0..3 {
                for (s, cs) in stencil.iter().enumerate() {
                    let mut y = x;
                    y[a] += (s as f64 - 2.0) * h;
                    lap += cs * table.remainder(y, &zeta).unwrap();
                }
            }
            harmonic = harmonic.max((lap / (h * h)).abs());
        }
    }

    let g = |x: [f64; 3], z: &Zeta| laplace_green(x) + table.remainder(x, z).unwrap();
    let (mut interp, mut scaling) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let xi = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let z = make_zeta(xi, 1.4).unwrap();
        let x = point(&mut rng, 1.0);
        for s in [0.5, 2.0] {
            let zs = Zeta { re: z.re.map(|v| s * v), im: z.im.map(|v| s * v) };
            let xs = x.map(|v| s * v);
            let lhs = g(x, &zs);
            let rhs = s * g(xs, &z);
            scaling = scaling.max((lhs - rhs).abs() / lhs.abs().max(1.0));
            interp = interp.max((table.remainder(x, &zs).unwrap() - remainder_exact(x, &zs)).abs());
            interp = interp.max((table.remainder(xs, &z).unwrap() - remainder_exact(xs, &z)).abs());
        }
    }
    let pass = harmonic <= 1e-4 && interp <= INTERP_TOL && scaling <= 2.0 * INTERP_TOL && cache_ok && build < Duration::from_secs(1800);
    report(
        2,
        pass,
        &format!(
            "harmonicity {harmonic:.2e} (≤1e-4), interpolation {interp:.2e} (≤{INTERP_TOL:.0e}), scaling s∈{{1/2,2}} {scaling:.2e} (≤{:.0e}), cache reload {cache_ok}, build {:.1}s (<1800s)",
            2.0 * INTERP_TOL,
            build.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_homogeneous_identity() {
    let _g = serial();
    let start = Instant::now();
    let grid = QuadratureGrid::new(8).unwrap();
    let q1 = lambda_one(&grid);
    let (m, k) = (4.0, 7);
    let rule = ZetaRule::Minimal;
    let table = FaddeevTable::build(m / 2f64.sqrt() * 1.001, 0.02).unwrap();

    let ctx = BieContext::new(&q1, &grid, &table, 0.0).unwrap();
    let lattice = ScatteringGrid::zeros(m, k, rule).unwrap();
    let mut psi_err = 0.0f64;
    for a in 0..k {
        for b in 0..k {
            for cc in 0..k {
                let xi = lattice.xi([a, b, cc]);
                if (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt() >= m {
                    continue;
                }
                let zeta = make_zeta(xi, m / 2.0).unwrap();
                let sys = ctx.assemble(&zeta).unwrap();
                let (psi, _) = solve_regularized(&sys).unwrap();
                psi_err = psi_err.max((&psi - &sys.rhs).norm() / sys.rhs.norm());
            }
        }
    }
    let (t, _) = scattering_transform(&q1, m, k, rule, &grid, &table, 0.0).unwrap();
    let zero = t.values.iter().all(|v| *v == c(0.0));
    let secs = start.elapsed().as_secs_f64();
    let pass = psi_err <= 1e-10 && zero && secs < 60.0;
    report(
        3,
        pass,
        &format!("Q_1 data, M={m} K={k}: max ‖ψ - e_ζ‖/‖e_ζ‖ {psi_err:.2e} (≤1e-10), t ≡ 0 exactly: {zero}, {secs:.1}s (<60s)"),
    );
}

#[test]
fn criterion_04_scattering_converges_to_potential_transform() {
    let _g = serial();
    let start = Instant::now();
    // γ^{1/2} = 1 + 0.02 (1 - r²/0.64)^6; the |ζ| pair sits where the error
    // is resolved at N = 16 (see the README for the measured curve)
    let phantom = SmoothRadial::new(0.02, 0.8).unwrap();
    let grid = QuadratureGrid::new(16).unwrap();
    let q = phantom.dtn(&grid);
    let (z1, z2) = (3.0, 6.0);
    let table = FaddeevTable::build(z2 / 2f64.sqrt() * 1.001, 0.01).unwrap();
    let ctx = BieContext::new(&q, &grid, &table, 0.0).unwrap();
    let xis: Vec<[f64; 3]> = (0..10)
        .map(|i| {
            let (r, th, ph) = (0.15 * i as f64, 0.7 * i as f64 + 0.3, 1.3 * i as f64);
            [r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]
        })
        .collect();
    let max_err = |z: f64| {
        xis.iter()
            .map(|xi| {
                let zeta = make_zeta(*xi, z / 2f64.sqrt()).unwrap();
                let (t, _) = scattering_value(&ctx, *xi, &zeta).unwrap();
                let exact = phantom.potential_transform((xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt());
                (t - c(exact)).norm()
            })
            .fold(0.0, f64::max)
    };
    let (e1, e2) = (max_err(z1), max_err(z2));
    let rate = (e1 / e2).ln() / (z2 / z1).ln();
    let secs = start.elapsed().as_secs_f64();
    let pass = e2 < e1 && (0.5..=1.5).contains(&rate) && secs < 600.0;
    report(
        4,
        pass,
        &format!("max |t - q̂| over 10 ξ: {e1:.3e} at |ζ|={z1}, {e2:.3e} at |ζ|={z2}, rate {rate:.3} (in [0.5, 1.5]), {secs:.1}s (<600s)"),
    );
}

#[test]
fn criterion_05_layered_ball_reconstruction() {
    let _g = serial();
    let start = Instant::now();
    let cfg = ExperimentConfig {
        phantom: PhantomSource::layered(0.5, 2.0),
        forward: ForwardConfig { degree: 8, ..Default::default() },
        truncation: TruncationConfig::with_radius(6.0, 9),
        sigma: SigmaConfig { resolution: 16 },
        ..Default::default()
    };
    let prep = compute_forward(&cfg).unwrap();
    let rec = reconstruct(&prep, &cfg, None).unwrap();
    let ratio = rec.metrics.relative_l2 / rec.metrics.baseline_l2;
    let secs = start.elapsed().as_secs_f64();
    let pass = ratio <= 0.6 && rec.metrics.boundary_exact && secs < 900.0;
    report(
        5,
        pass,
        &format!(
            "r0=0.5 c=2, N=8 M=6 K=9: L² error {:.4} vs baseline {:.4}, ratio {ratio:.4} (≤0.6), boundary γ=1 exactly: {}, {secs:.1}s (<900s)",
            rec.metrics.relative_l2, rec.metrics.baseline_l2, rec.metrics.boundary_exact
        ),
    );
}

#[test]
fn criterion_06_regularization_trend() {
    let _g = serial();
    let start = Instant::now();
    let radii = [4.0, 6.0, 8.0];
    let mut cfg = ExperimentConfig {
        phantom: PhantomSource::default(),
        forward: ForwardConfig { degree: 8, solver: ForwardSolver::Numerical, resolution: 24, ..Default::default() },
        sigma: SigmaConfig { resolution: 16 },
        ..Default::default()
    };
    let prep = compute_forward(&cfg).unwrap();
    let table = table_for(&cfg, 8.0).unwrap();
    let mut errors = |eps: f64, seed: u64| -> Vec<f64> {
        cfg.noise = if eps > 0.0 { NoiseConfig::epsilon(eps, seed) } else { NoiseConfig::default() };
        radii
            .iter()
            .map(|m| {
                cfg.truncation = TruncationConfig::with_radius(*m, 9);
                reconstruct(&prep, &cfg, Some(&table)).unwrap().metrics.relative_l2
            })
            .collect()
    };
    let clean = errors(0.0, 0);
    let decreasing = clean.windows(2).all(|w| w[1] < w[0]);
    let best = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut held = 0;
    let mut per_seed = Vec::new();
    for seed in [1, 2, 3] {
        let high = best(&errors(1e-3, seed));
        let low = best(&errors(1e-5, seed));
        if high.is_finite() && low < high {
            held += 1;
        }
        per_seed.push(format!("seed {seed}: {low:.4} < {high:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = decreasing && held >= 2 && secs < 7200.0;
    report(
        6,
        pass,
        &format!(
            "heart-lungs, M∈{{4,6,8}}: clean errors {:.4?} strictly decreasing: {decreasing}; best-M ε=1e-5 vs ε=1e-3 [{}] holds in {held}/3 (≥2), {secs:.0}s (<7200s)",
            clean,
            per_seed.join(", ")
        ),
    );
}

#[test]
fn criterion_07_noise_accounting() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        phantom: PhantomSource::default(),
        forward: ForwardConfig { degree: 8, solver: ForwardSolver::Numerical, resolution: 24, ..Default::default() },
        truncation: TruncationConfig::with_radius(3.0, 5),
        noise: NoiseConfig::epsilon(1e-2, 5),
        sigma: SigmaConfig { resolution: 6 },
        output: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    run_reconstruction(&cfg).unwrap();

    let manifest = Manifest::load(&dir.path().join("manifest.json")).unwrap();
    let logged = manifest.noise.unwrap();
    let clean = load_dtn(&dir.path().join("dtn.bin")).unwrap();
    let noisy = load_dtn(&dir.path().join("noisy_dtn.bin")).unwrap();
    let grid = QuadratureGrid::new(8).unwrap();

    let realized = y_norm(&noisy.difference(&clean).unwrap(), &grid).unwrap();
    let eps_rel = (realized - 1e-2).abs() / 1e-2;
    let logged_rel = (logged.epsilon - 1e-2).abs() / 1e-2;

    // regenerate the perturbation from the logged seed, model, and δ
    let again = add_noise(&clean, NoiseTarget::Delta(logged.delta), logged.seed, logged.model, &grid).unwrap();
    let same_data = again.noisy == noisy;
    let snr = signal_to_noise(&clean, &again.perturbation, logged.delta, &grid);
    let rel = relative_noise(&clean, &again.perturbation, logged.delta, &grid).unwrap();
    let exact = snr == logged.snr && rel == logged.relative_noise;
    let ratio = logged.relative_noise / 1e-2;
    let roughly = (1.0 / 3.0..=3.0).contains(&ratio);
    let pass = eps_rel <= 1e-12 && logged_rel <= 1e-12 && same_data && exact && roughly && logged.model == NoiseModel::Iid;
    report(
        7,
        pass,
        &format!(
            "ε=1e-2: realized rel. error {eps_rel:.1e} / logged {logged_rel:.1e} (≤1e-12), artifacts reproduce noisy map: {same_data}, SNR {snr:.4} and relative noise {rel:.5} equal logged exactly: {exact}, relative noise / 1% = {ratio:.3} (in [1/3, 3])"
        ),
    );
}

#[test]
fn criterion_08_parameter_rule() {
    let _g = serial();
    let e0 = 1e-3;
    let continuity = (alpha_rule(e0 * (1.0 - 1e-15), 1.5, e0).unwrap() - alpha_rule(e0, 1.5, e0).unwrap()).abs();
    let mut monotone = true;
    let mut prev = 0.0;
    for i in 0..=9000 {
        let eps = 10f64.powf(-9.0 + i as f64 * 0.001);
        if eps >= 1.0 {
            break;
        }
        let a = alpha_rule(eps, 1.5, e0).unwrap();
        monotone &= a >= prev;
        prev = a;
    }
    let m = truncation_radius(1e-6, 1.5, e0).unwrap();
    let expect = (6.0 * 10f64.ln() / 11.0).powf(2.0 / 3.0);
    let m_err = (m - expect).abs();
    let pass = continuity <= 1e-12 && monotone && m_err <= 1e-12;
    report(
        8,
        pass,
        &format!("continuity at ε₀ {continuity:.1e} (≤1e-12), monotone on [1e-9, 1): {monotone}, M(1e-6, 3/2) = {m:.12} vs {expect:.12}, diff {m_err:.1e} (≤1e-12)"),
    );
}

#[test]
fn criterion_09_pseudoinverse_semantics() {
    let _g = serial();
    let zeta = make_zeta([0.0; 3], 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut direct_err = 0.0f64;
    let mut inactive = true;
    for _ in 0..5 {
        let mut gauss = || Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(50, 50, |_, _| gauss());
        let b = DVector::from_fn(50, |_, _| gauss());
        let sv = a.singular_values();
        let smin = sv.min();
        let sys = BieSystem { zeta, matrix: a.clone(), rhs: b.clone(), floor: 0.5 * smin * smin };
        let (x, d) = solve_regularized(&sys).unwrap();
        inactive &= !d.floor_active;
        let direct = a.lu().solve(&b).unwrap();
        direct_err = direct_err.max((&x - &direct).norm() / direct.norm());
    }

    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![c(1.0), c(1e-8)]));
    let b = DVector::from_vec(vec![Complex64::new(2.0, 1.0), Complex64::new(-3.0, 0.5)]);
    let sys = BieSystem { zeta, matrix: a, rhs: b.clone(), floor: 1e-4 };
    let (x, d) = solve_regularized(&sys).unwrap();
    let closed = DVector::from_vec(vec![b[0], b[1] * (1e-8 / 1e-4)]);
    let diag_err = (&x - &closed).camax();
    let pass = direct_err <= 1e-10 && inactive && d.floor_active && diag_err <= 1e-12;
    report(
        9,
        pass,
        &format!(
            "random 50×50 with κ₁ = σ_min²/2: rel. diff to LU {direct_err:.2e} (≤1e-10), floor inactive: {inactive}; diag(1, 1e-8) with κ₁ = 1e-4: diff to σ/κ₁ filter {diag_err:.1e} (≤1e-12)"
        ),
    );
}

#[test]
fn criterion_10_inversion_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut t = ScatteringGrid::zeros(3.0, 4, ZetaRule::Minimal).unwrap();
    for v in t.values.iter_mut() {
        *v = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    }
    let fft = invert_to_potential(&t).unwrap();
    let direct = invert_direct(&t);
    let scale = direct.values.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    let fft_err = fft.values.iter().zip(&direct.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale;

    // exp(-|x|²/(2σ²)) ↔ (2πσ²)^{3/2} exp(-σ²|ξ|²/2)
    let sigma: f64 = 0.6;
    let (m, k) = (12.0, 32);
    let t = ScatteringGrid::from_fn(m, k, ZetaRule::Minimal, |xi| {
        let r2 = xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2];
        c((2.0 * PI * sigma * sigma).powf(1.5) * (-sigma * sigma * r2 / 2.0).exp())
    })
    .unwrap();
    let q = invert_to_potential(&t).unwrap();
    let mut pair_err = 0.0f64;
    for a in 0..k {
        for b in 0..k {
            for cc in 0..k {
                let x = [q.coordinate(a), q.coordinate(b), q.coordinate(cc)];
                let r2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
                if r2 <= 1.0 {
                    pair_err = pair_err.max((q.get([a, b, cc]) - c((-r2 / (2.0 * sigma * sigma)).exp())).norm());
                }
            }
        }
    }

    // γ* = u², u = 1 + 0.5 (1 - r²)³ (1 + x/2), q = Δu/u
    let manufactured = |p: [f64; 3]| {
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        let s = 1.0 - r2;
        let g = 1.0 + 0.5 * p[0];
        let f = 0.5 * s.powi(3);
        let lap_f = -3.0 * (3.0 * s * s - 4.0 * r2 * s);
        let dfx = -3.0 * s * s * p[0];
        (1.0 + f * g, g * lap_f + dfx)
    };
    let err = |res: usize| {
        let grid = BallGrid::new(res).unwrap();
        let q: Vec<f64> = grid.points().iter().map(|p| {
            let (u, lap) = manufactured(*p);
            lap / u
        }).collect();
        let exact: Vec<f64> = grid.points().iter().map(|p| manufactured(*p).0.powi(2)).collect();
        let f = solve_sigma_samples(grid, q, &SigmaOptions { resolution: res, ..Default::default() }).unwrap();
        f.gamma.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let (e1, e2) = (err(8), err(16));
    let order = (e1 / e2).log2();
    let pass = fft_err <= 1e-12 && pair_err <= 1e-4 && order >= 1.7;
    report(
        10,
        pass,
        &format!(
            "FFT vs direct DFT at K=4 {fft_err:.1e} (≤1e-12), Gaussian pair M=12 K=32 {pair_err:.1e} (≤1e-4), manufactured γ errors {e1:.2e} → {e2:.2e}, order {order:.2} (≥1.7)"
        ),
    );
}
