use ionlink::hilbert::{Mat4, C64};
use ionlink::tomography::*;
use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(rng: &mut ChaCha8Rng) -> Mat4 {
    let a = Mat4::from_fn(|_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
    let m = a * a.adjoint();
    m / m.trace()
}

fn random_unitary(rng: &mut ChaCha8Rng) -> Matrix2<C64> {
    let (a, b, g, d): (f64, f64, f64, f64) = (rng.random(), rng.random(), rng.random(), rng.random());
    zyz_unitary(6.0 * a, 3.0 * b, 6.0 * g) * C64::from_polar(1.0, 6.0 * d)
}

fn bloch(rho: &Matrix2<C64>) -> Vector3<f64> {
    Vector3::new(2.0 * rho[(0, 1)].re, -2.0 * rho[(0, 1)].im, (rho[(0, 0)] - rho[(1, 1)]).re)
}

/// Best rotation by orthogonal Procrustes on Bloch vectors; returns the mean fidelity.
fn procrustes_fidelity(outputs: &[Matrix2<C64>; 6]) -> f64 {
    let inputs = polarization_inputs().map(|x| x * x.adjoint());
    let mut m = Matrix3::zeros();
    for (i, o) in inputs.iter().zip(outputs) {
        m += bloch(o) * bloch(i).transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * vt).determinant().signum();
    let r = u * d * vt;
    inputs.iter().zip(outputs).map(|(i, o)| 0.5 * (1.0 + bloch(o).dot(&(r * bloch(i))))).sum::<f64>() / 6.0
}

#[test]
fn recovers_random_unitary_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let u0 = random_unitary(&mut rng);
        let outs = polarization_inputs().map(|x| {
            let y = u0 * x;
            y * y.adjoint()
        });
        let fit = nearest_unitary_fit(&outs).unwrap();
        assert!((fit.mean_fidelity - 1.0).abs() < 1e-8, "{}", fit.mean_fidelity);
        let overlap = (fit.unitary.adjoint() * u0).trace().norm() / 2.0;
        assert!((overlap - 1.0).abs() < 1e-6);
    }
}

#[test]
fn noisy_channel_matches_procrustes_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let u0 = random_unitary(&mut rng);
        let outs = polarization_inputs().map(|x| {
            let y = u0 * x;
            let noise = Matrix2::from_fn(|_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)) * C64::new(0.2, 0.0);
            let m = y * y.adjoint() * C64::new(0.7, 0.0) + noise * noise.adjoint();
            m / m.trace()
        });
        let fit = nearest_unitary_fit(&outs).unwrap();
        assert!((fit.mean_fidelity - procrustes_fidelity(&outs)).abs() < 1e-8);
    }
}

#[test]
fn mle_converges_for_random_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let rho0 = random_state(&mut rng);
        let counts = CountsRecord::sample(&rho0, 100_000, &mut rng);
        let est = mle_reconstruct(&counts).unwrap();
        let d = trace_distance(&est, &rho0);
        assert!(d < 0.02, "trace distance {d}");
        assert!((est.trace().re - 1.0).abs() < 1e-10);
        assert!(est.symmetric_eigenvalues().min() > -1e-10);
    }
}

#[test]
fn resample_width_halves_with_four_times_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rho = bell_projector(BellSign::Minus, 0.4) * C64::new(0.8, 0.0) + Mat4::identity() * C64::new(0.05, 0.0);
    let counts = CountsRecord::sample(&rho, 2_000, &mut rng);
    let (small, _) = resample_uncertainty(&counts, BellSign::Minus, None, 200, 11).unwrap();
    let (large, _) = resample_uncertainty(&counts.scaled(4), BellSign::Minus, None, 200, 11).unwrap();
    let ratio = large.resample_std / small.resample_std;
    println!("std {:.4e} -> {:.4e}, ratio {ratio:.3}", small.resample_std, large.resample_std);
    assert!((0.35..=0.65).contains(&ratio));
}

#[test]
fn near_deterministic_counts_have_small_spread() {
    let counts = CountsRecord::expected(&bell_projector(BellSign::Plus, 0.0), 5_000);
    let (est, _) = resample_uncertainty(&counts, BellSign::Plus, Some(0.0), 200, 1).unwrap();
    assert!(est.resample_std < 0.01);
}
