//! Two-qubit state tomography from Pauli-basis counts: maximum-likelihood
//! reconstruction, Bell-state fidelity and phase, resampled uncertainties,
//! and the nearest-unitary fit of a polarization channel.
//!
//! Qubit convention: `|0⟩ = D'`, `|1⟩ = D`; two-qubit basis
//! `(D'D', D'D, DD', DD)` with node A first.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{c, Mat4, Vec4, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    X,
    Y,
    Z,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::X, Basis::Y, Basis::Z];

    /// Eigenvectors for outcomes `+` and `−`.
    pub fn eigenvectors(self) -> [Vector2<C64>; 2] {
        let s = FRAC_1_SQRT_2;
        match self {
            Basis::X => [Vector2::new(c(s), c(s)), Vector2::new(c(s), c(-s))],
            Basis::Y => [Vector2::new(c(s), C64::new(0.0, s)), Vector2::new(c(s), C64::new(0.0, -s))],
            Basis::Z => [Vector2::new(c(1.0), c(0.0)), Vector2::new(c(0.0), c(1.0))],
        }
    }

    fn letter(self) -> char {
        match self {
            Basis::X => 'X',
            Basis::Y => 'Y',
            Basis::Z => 'Z',
        }
    }

    fn from_letter(ch: char) -> Option<Basis> {
        match ch.to_ascii_uppercase() {
            'X' => Some(Basis::X),
            'Y' => Some(Basis::Y),
            'Z' => Some(Basis::Z),
            _ => None,
        }
    }
}

/// Counts for the nine Pauli settings, outcomes ordered `(++, +−, −+, −−)`.
/// Serialized as a map from setting labels such as `"XZ"` to four counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, [u64; 4]>", into = "BTreeMap<String, [u64; 4]>")]
pub struct CountsRecord {
    /// Indexed `3·a + b` for bases `a` (node A) and `b` (node B) in X, Y, Z order.
    pub counts: [[u64; 4]; 9],
}

impl CountsRecord {
    pub fn setting_index(a: Basis, b: Basis) -> usize {
        3 * (a as usize) + b as usize
    }

    pub fn label(k: usize) -> String {
        format!("{}{}", Basis::ALL[k / 3].letter(), Basis::ALL[k % 3].letter())
    }

    pub fn get(&self, a: Basis, b: Basis) -> &[u64; 4] {
        &self.counts[Self::setting_index(a, b)]
    }

    pub fn totals(&self) -> [u64; 9] {
        self.counts.map(|c| c.iter().sum())
    }

    pub fn scaled(&self, f: u64) -> CountsRecord {
        CountsRecord { counts: self.counts.map(|c| c.map(|n| n * f)) }
    }

    /// Counts proportional to the Born probabilities of `rho`, rounded.
    pub fn expected(rho: &Mat4, per_setting: u64) -> CountsRecord {
        let proj = projectors();
        let mut counts = [[0u64; 4]; 9];
        for (k, row) in counts.iter_mut().enumerate() {
            for (o, n) in row.iter_mut().enumerate() {
                let p = (proj[k][o] * rho).trace().re.max(0.0);
                *n = (p * per_setting as f64).round() as u64;
            }
        }
        CountsRecord { counts }
    }

    /// Multinomial counts drawn from the Born probabilities of `rho`.
    pub fn sample<R: Rng>(rho: &Mat4, per_setting: u64, rng: &mut R) -> CountsRecord {
        let proj = projectors();
        let mut counts = [[0u64; 4]; 9];
        for (k, row) in counts.iter_mut().enumerate() {
            let p: Vec<f64> = (0..4).map(|o| (proj[k][o] * rho).trace().re.max(0.0)).collect();
            *row = multinomial(per_setting, &p, rng);
        }
        CountsRecord { counts }
    }
}

impl TryFrom<BTreeMap<String, [u64; 4]>> for CountsRecord {
    type Error = String;

    fn try_from(map: BTreeMap<String, [u64; 4]>) -> std::result::Result<Self, String> {
        let mut counts = [[0u64; 4]; 9];
        let mut seen = [false; 9];
        for (label, v) in map {
            let mut ch = label.chars();
            let (a, b) = match (ch.next().and_then(Basis::from_letter), ch.next().and_then(Basis::from_letter), ch.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(format!("invalid setting label {label:?}")),
            };
            let k = CountsRecord::setting_index(a, b);
            if seen[k] {
                return Err(format!("duplicate setting {label:?}"));
            }
            seen[k] = true;
            counts[k] = v;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(format!("missing setting {}", CountsRecord::label(k)));
        }
        Ok(CountsRecord { counts })
    }
}

impl From<CountsRecord> for BTreeMap<String, [u64; 4]> {
    fn from(r: CountsRecord) -> Self {
        (0..9).map(|k| (CountsRecord::label(k), r.counts[k])).collect()
    }
}

fn multinomial<R: Rng>(n: u64, p: &[f64], rng: &mut R) -> [u64; 4] {
    let mut out = [0u64; 4];
    let mut left = n;
    let mut mass: f64 = p.iter().sum();
    for (i, &pi) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i == p.len() - 1 || mass <= 0.0 {
            out[i] = left;
            break;
        }
        let q = (pi / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, q).map(|d| d.sample(rng)).unwrap_or(0);
        out[i] = k;
        left -= k;
        mass -= pi;
    }
    out
}

fn kron_ket(a: &Vector2<C64>, b: &Vector2<C64>) -> Vec4 {
    Vec4::new(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
}

/// Projectors `[setting][outcome]`.
pub fn projectors() -> Vec<[Mat4; 4]> {
    let mut out = Vec::with_capacity(9);
    for a in Basis::ALL {
        for b in Basis::ALL {
            let (ea, eb) = (a.eigenvectors(), b.eigenvectors());
            let p = |i: usize, j: usize| {
                let v = kron_ket(&ea[i], &eb[j]);
                v * v.adjoint()
            };
            out.push([p(0, 0), p(0, 1), p(1, 0), p(1, 1)]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub max_iterations: usize,
    /// Stop when the largest entry change of ρ falls below this.
    pub tolerance: f64,
    /// Or when `λ_max(R) − 1`, an upper bound on the per-count log-likelihood
    /// shortfall, falls below this.
    pub likelihood_gap: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions { max_iterations: 200_000, tolerance: 1e-11, likelihood_gap: 1e-12 }
    }
}

/// Maximum-likelihood state by the fixed-point iteration `ρ ← RρR / tr(RρR)`,
/// `R = Σ f_k / p_k Π_k`. Starts from `I/4`, so the result is deterministic.
pub fn mle_reconstruct(counts: &CountsRecord) -> Result<Mat4> {
    mle_reconstruct_with(counts, &MleOptions::default())
}

pub fn mle_reconstruct_with(counts: &CountsRecord, opts: &MleOptions) -> Result<Mat4> {
    let totals = counts.totals();
    if let Some(k) = totals.iter().position(|&t| t == 0) {
        return Err(Error::InvalidParameter(format!("setting {} has no counts", CountsRecord::label(k))));
    }
    let n_all: u64 = totals.iter().sum();
    let proj = projectors();
    let terms: Vec<(f64, &Mat4)> = proj
        .iter()
        .zip(&counts.counts)
        .flat_map(|(ps, ns)| ps.iter().zip(ns).filter(|(_, &n)| n > 0).map(|(p, &n)| (n as f64 / n_all as f64, p)))
        .collect();
    let mut rho = Mat4::identity() * c(0.25);
    let mut change = f64::INFINITY;
    for it in 0..opts.max_iterations {
        let mut r = Mat4::zeros();
        for (f, p) in &terms {
            let prob = (*p * rho).trace().re.max(1e-300);
            r += *p * c(f / prob);
        }
        if it % 64 == 63 && r.symmetric_eigenvalues().max() - 1.0 < opts.likelihood_gap {
            return Ok(rho);
        }
        let mut next = r * rho * r;
        next = (next + next.adjoint()) * c(0.5);
        let tr = next.trace().re;
        next /= c(tr);
        change = (next - rho).camax();
        rho = next;
        if change < opts.tolerance {
            return Ok(rho);
        }
    }
    Err(Error::Estimation { iterations: opts.max_iterations, last_change: change })
}

pub fn trace_distance(a: &Mat4, b: &Mat4) -> f64 {
    let d = a - b;
    0.5 * d.symmetric_eigenvalues().iter().map(|x| x.abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BellSign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl BellSign {
    pub fn value(self) -> f64 {
        match self {
            BellSign::Plus => 1.0,
            BellSign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> BellSign {
        match self {
            BellSign::Plus => BellSign::Minus,
            BellSign::Minus => BellSign::Plus,
        }
    }
}

/// `|Ψ±⟩ = (|DD'⟩ ± e^{iφ}|D'D⟩)/√2`.
pub fn bell_state(sign: BellSign, phi: f64) -> Vec4 {
    let s = FRAC_1_SQRT_2;
    Vec4::new(c(0.0), C64::from_polar(sign.value() * s, phi), c(s), c(0.0))
}

pub fn bell_projector(sign: BellSign, phi: f64) -> Mat4 {
    let v = bell_state(sign, phi);
    v * v.adjoint()
}

pub fn bell_fidelity(rho: &Mat4, sign: BellSign, phi: f64) -> f64 {
    let v = bell_state(sign, phi);
    (v.adjoint() * rho * v)[(0, 0)].re
}

/// Phase maximizing the Bell fidelity, `φ* = arg(±ρ_{D'D,DD'})`; 0 when that coherence vanishes.
pub fn optimize_phase(rho: &Mat4, sign: BellSign) -> (f64, f64) {
    let coh = rho[(1, 2)] * sign.value();
    let base = 0.5 * (rho[(1, 1)].re + rho[(2, 2)].re);
    if coh.norm() < 1e-15 {
        return (0.0, base);
    }
    let phi = coh.arg().rem_euclid(2.0 * PI);
    (phi, base + coh.norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    pub value: f64,
    /// `F_m + δ − F`.
    pub upper: f64,
    /// `F − F_m + δ`.
    pub lower: f64,
    pub resample_mean: f64,
    pub resample_std: f64,
    pub phi: f64,
    /// True when either printed width comes out negative.
    pub negative_width: bool,
}

/// Multinomial resampling around the observed frequencies, each resample
/// reconstructed by maximum likelihood and scored at the phase `phi`
/// (optimized on the original data when `None`).
pub fn resample_uncertainty(
    counts: &CountsRecord,
    sign: BellSign,
    phi: Option<f64>,
    m: usize,
    seed: u64,
) -> Result<(FidelityEstimate, Vec<f64>)> {
    if m < 2 {
        return Err(Error::InvalidParameter("at least two resamples are required".into()));
    }
    let rho = mle_reconstruct(counts)?;
    let phi = phi.unwrap_or_else(|| optimize_phase(&rho, sign).0);
    let value = bell_fidelity(&rho, sign, phi);
    let totals = counts.totals();
    let samples = (0..m)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let mut re = [[0u64; 4]; 9];
            for k in 0..9 {
                let f: Vec<f64> = counts.counts[k].iter().map(|&n| n as f64 / totals[k] as f64).collect();
                re[k] = multinomial(totals[k], &f, &mut rng);
            }
            let rho = mle_reconstruct(&CountsRecord { counts: re })?;
            Ok(bell_fidelity(&rho, sign, phi))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = samples.iter().sum::<f64>() / m as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let std = var.sqrt();
    let upper = mean + std - value;
    let lower = value - mean + std;
    Ok((
        FidelityEstimate {
            value,
            upper,
            lower,
            resample_mean: mean,
            resample_std: std,
            phi,
            negative_width: upper < 0.0 || lower < 0.0,
        },
        samples,
    ))
}

/// Polarization inputs `H, V, D, A, R, L`.
pub fn polarization_inputs() -> [Vector2<C64>; 6] {
    let s = FRAC_1_SQRT_2;
    [
        Vector2::new(c(1.0), c(0.0)),
        Vector2::new(c(0.0), c(1.0)),
        Vector2::new(c(s), c(s)),
        Vector2::new(c(s), c(-s)),
        Vector2::new(c(s), C64::new(0.0, s)),
        Vector2::new(c(s), C64::new(0.0, -s)),
    ]
}

/// `Rz(α) Ry(β) Rz(γ)`.
pub fn zyz_unitary(alpha: f64, beta: f64, gamma: f64) -> Matrix2<C64> {
    let rz = |t: f64| Matrix2::new(C64::from_polar(1.0, -t / 2.0), c(0.0), c(0.0), C64::from_polar(1.0, t / 2.0));
    let (cb, sb) = ((beta / 2.0).cos(), (beta / 2.0).sin());
    let ry = Matrix2::new(c(cb), c(-sb), c(sb), c(cb));
    rz(alpha) * ry * rz(gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryFit {
    pub unitary: Matrix2<C64>,
    pub mean_fidelity: f64,
    /// All measured outputs coincide, so the rotation is not determined.
    pub ill_conditioned: bool,
}

fn mean_channel_fidelity(u: &Matrix2<C64>, outputs: &[Matrix2<C64>; 6]) -> f64 {
    polarization_inputs()
        .iter()
        .zip(outputs)
        .map(|(x, rho)| {
            let y = u * x;
            (y.adjoint() * rho * y)[(0, 0)].re
        })
        .sum::<f64>()
        / 6.0
}

struct ChannelCost<'a> {
    outputs: &'a [Matrix2<C64>; 6],
}

impl CostFunction for ChannelCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-mean_channel_fidelity(&zyz_unitary(p[0], p[1], p[2]), self.outputs))
    }
}

/// Unitary maximizing the mean fidelity between `U|input⟩` and the measured
/// output states, by Nelder–Mead over ZYZ angles from eight starting points.
pub fn nearest_unitary_fit(outputs: &[Matrix2<C64>; 6]) -> Result<UnitaryFit> {
    let mut spread = 0.0f64;
    for x in outputs.iter() {
        spread = spread.max((x - outputs[0]).camax());
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &alpha in &[0.0, PI] {
        for &beta in &[PI / 4.0, 3.0 * PI / 4.0] {
            for &gamma in &[0.0, PI] {
                let x0 = vec![alpha, beta, gamma];
                let simplex = (0..4)
                    .map(|i| {
                        let mut v = x0.clone();
                        if i > 0 {
                            v[i - 1] += 0.5;
                        }
                        v
                    })
                    .collect();
                let solver = NelderMead::new(simplex)
                    .with_sd_tolerance(1e-14)
                    .map_err(|e| Error::Degenerate(e.to_string()))?;
                let res = Executor::new(ChannelCost { outputs }, solver)
                    .configure(|s| s.max_iters(4000))
                    .run()
                    .map_err(|e| Error::Degenerate(e.to_string()))?;
                let p = res.state.best_param.clone().unwrap_or(x0);
                let f = mean_channel_fidelity(&zyz_unitary(p[0], p[1], p[2]), outputs);
                if best.as_ref().is_none_or(|(bf, _)| f > *bf + 1e-14) {
                    best = Some((f, p));
                }
            }
        }
    }
    let (f, p) = best.expect("eight starts");
    Ok(UnitaryFit { unitary: zyz_unitary(p[0], p[1], p[2]), mean_fidelity: f, ill_conditioned: spread < 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dephased(v: f64) -> Mat4 {
        bell_projector(BellSign::Plus, 0.3) * c((1.0 + v) / 2.0) + bell_projector(BellSign::Minus, 0.3) * c((1.0 - v) / 2.0)
    }

    #[test]
    fn projectors_complete() {
        for ps in projectors() {
            let s: Mat4 = ps.iter().sum();
            assert!((s - Mat4::identity()).camax() < 1e-15);
        }
    }

    #[test]
    fn bell_fidelity_cases() {
        assert_relative_eq!(bell_fidelity(&bell_projector(BellSign::Plus, 1.1), BellSign::Plus, 1.1), 1.0, epsilon = 1e-15);
        assert_relative_eq!(bell_fidelity(&(Mat4::identity() * c(0.25)), BellSign::Minus, 0.4), 0.25, epsilon = 1e-15);
        assert_relative_eq!(bell_fidelity(&dephased(0.7), BellSign::Plus, 0.3), 0.85, epsilon = 1e-15);
    }

    #[test]
    fn phase_optimum_closed_form_vs_grid() {
        for (sign, phi0) in [(BellSign::Plus, 0.7), (BellSign::Minus, 5.9)] {
            let (phi, f) = optimize_phase(&bell_projector(sign, phi0), sign);
            assert_relative_eq!(phi, phi0, epsilon = 1e-12);
            assert_relative_eq!(f, 1.0, epsilon = 1e-12);
        }
        let rho = dephased(0.4) * c(0.8) + Mat4::identity() * c(0.05);
        let (_, f) = optimize_phase(&rho, BellSign::Minus);
        let grid = (0..10_000).map(|k| bell_fidelity(&rho, BellSign::Minus, 2.0 * PI * k as f64 / 1e4)).fold(f64::MIN, f64::max);
        assert!((f - grid).abs() < 1e-6 && f >= grid - 1e-15);
        let diag = Mat4::from_diagonal(&Vec4::new(c(0.1), c(0.4), c(0.3), c(0.2)));
        assert_eq!(optimize_phase(&diag, BellSign::Plus).0, 0.0);
    }

    #[test]
    fn fidelity_is_sinusoidal_in_phase() {
        let rho = dephased(0.6) * c(0.9) + Mat4::identity() * c(0.025);
        let (phi_star, f_star) = optimize_phase(&rho, BellSign::Plus);
        let c0 = 0.5 * (rho[(1, 1)].re + rho[(2, 2)].re);
        for k in 0..16 {
            let phi = k as f64 * PI / 8.0;
            let want = c0 + (f_star - c0) * (phi - phi_star).cos();
            assert_relative_eq!(bell_fidelity(&rho, BellSign::Plus, phi), want, epsilon = 1e-14);
        }
    }

    #[test]
    fn mle_bell_round_trip() {
        let rho = bell_projector(BellSign::Plus, 0.0);
        let est = mle_reconstruct(&CountsRecord::expected(&rho, 1_000_000)).unwrap();
        assert!(bell_fidelity(&est, BellSign::Plus, 0.0) > 0.999);
        assert_relative_eq!(est.trace().re, 1.0, epsilon = 1e-10);
        assert!(est.symmetric_eigenvalues().min() > -1e-10);
    }

    #[test]
    fn mle_uniform_is_maximally_mixed() {
        let counts = CountsRecord { counts: [[250; 4]; 9] };
        let est = mle_reconstruct(&counts).unwrap();
        assert!(trace_distance(&est, &(Mat4::identity() * c(0.25))) < 1e-3);
    }

    #[test]
    fn mle_requires_counts_in_every_setting() {
        let mut counts = CountsRecord { counts: [[10; 4]; 9] };
        counts.counts[4] = [0; 4];
        assert!(matches!(mle_reconstruct(&counts), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn non_convergence_reports_diagnostics() {
        let counts = CountsRecord::expected(&bell_projector(BellSign::Plus, 0.0), 1000);
        let err = mle_reconstruct_with(&counts, &MleOptions { max_iterations: 3, tolerance: 1e-15, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Estimation { iterations: 3, .. }));
    }

    #[test]
    fn counts_json_round_trip() {
        let counts = CountsRecord::expected(&dephased(0.5), 1000);
        let s = serde_json::to_string(&counts).unwrap();
        assert!(s.contains("\"XY\""));
        assert_eq!(serde_json::from_str::<CountsRecord>(&s).unwrap(), counts);
        assert!(serde_json::from_str::<CountsRecord>(r#"{"XX":[1,2,3,4]}"#).is_err());
    }

    #[test]
    fn resampling_deterministic_and_tight() {
        let counts = CountsRecord::expected(&dephased(0.9), 20_000);
        let (a, sa) = resample_uncertainty(&counts, BellSign::Plus, None, 20, 7).unwrap();
        let (b, sb) = resample_uncertainty(&counts, BellSign::Plus, None, 20, 7).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b);
        assert!(a.resample_std < 0.01);
    }

    #[test]
    fn identity_channel_fit() {
        let outs = polarization_inputs().map(|x| x * x.adjoint());
        let fit = nearest_unitary_fit(&outs).unwrap();
        assert_relative_eq!(fit.mean_fidelity, 1.0, epsilon = 1e-8);
        let ph = fit.unitary[(0, 0)];
        assert!((fit.unitary - Matrix2::identity() * ph).camax() < 1e-4);
        assert!(!fit.ill_conditioned);
    }

    #[test]
    fn depolarized_outputs_flat() {
        let outs = [Matrix2::identity() * c(0.5); 6];
        let fit = nearest_unitary_fit(&outs).unwrap();
        assert_relative_eq!(fit.mean_fidelity, 0.5, epsilon = 1e-12);
        assert!(fit.ill_conditioned);
    }
}
