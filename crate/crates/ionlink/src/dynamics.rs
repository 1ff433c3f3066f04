//! Master-equation integration, photon envelopes, scattering rates and the
//! cavity-jitter ensemble.
//!
//! The generators are periodic in time with the bichromatic beat period. The
//! time grid is chosen commensurate with that period so one fourth-order
//! Magnus step propagator per beat phase is computed once and reused.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::hilbert::{build_operators, c, IonCavityState, Mat4, Mat6, NodeParams, OperatorSet, C64, D1, DP1, P0, S0};

/// Uniform time grid with `n_steps + 1` points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
        }
        Ok(TimeGrid { t_start, t_end: t_start + dt * n_steps as f64, dt, n_steps })
    }

    /// Grid over `[t_start, ≈t_end]` whose step divides `period` exactly and is
    /// as close as possible to `dt_target`.
    pub fn commensurate(t_start: f64, t_end: f64, dt_target: f64, period: Option<f64>) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::InvalidParameter("empty time range".into()));
        }
        let dt = match period {
            Some(tp) if tp.is_finite() && tp > 0.0 => tp / (tp / dt_target).round().max(1.0),
            _ => dt_target,
        };
        let n = ((t_end - t_start) / dt).round().max(1.0) as usize;
        TimeGrid::new(t_start, dt, n)
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t_start + self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }
}

/// Time grid plus the rectangular Raman pulse `[t_start, pulse_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub grid: TimeGrid,
    pub pulse_end: f64,
}

/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-9;
/// Default Raman pulse length.
pub const DEFAULT_PULSE: f64 = 50e-6;
/// Default end of the simulated record.
pub const DEFAULT_T_END: f64 = 60e-6;

impl Schedule {
    pub fn new(p: &NodeParams, t_end: f64, dt_target: f64, pulse_end: f64) -> Result<Self> {
        let grid = TimeGrid::commensurate(0.0, t_end, dt_target, beat_period(p))?;
        Ok(Schedule { grid, pulse_end })
    }

    /// 60 µs record, 1 ns step, 50 µs pulse.
    pub fn standard(p: &NodeParams) -> Result<Self> {
        Schedule::new(p, DEFAULT_T_END, DEFAULT_DT, DEFAULT_PULSE)
    }

    /// Number of steps taken with the drive on.
    pub fn n_on(&self) -> usize {
        let n = ((self.pulse_end - self.grid.t_start) / self.grid.dt).round();
        (n.max(0.0) as usize).min(self.grid.n_steps)
    }
}

pub fn beat_period(p: &NodeParams) -> Option<f64> {
    let w = p.beat().abs();
    if p.omega2 != 0.0 && w > 0.0 {
        Some(2.0 * PI / w)
    } else {
        None
    }
}

/// `A(t) = a0 + e^{iωt} ap + e^{-iωt} am`.
#[derive(Clone, Debug)]
pub(crate) struct PeriodicGenerator {
    pub a0: DMatrix<C64>,
    pub ap: DMatrix<C64>,
    pub am: DMatrix<C64>,
    pub omega: f64,
}

impl PeriodicGenerator {
    fn is_static(&self) -> bool {
        self.omega == 0.0 || (self.ap.iter().all(|z| *z == c(0.0)) && self.am.iter().all(|z| *z == c(0.0)))
    }

    fn at(&self, t: f64) -> DMatrix<C64> {
        if self.is_static() {
            return &self.a0 + &self.ap + &self.am;
        }
        let e = C64::from_polar(1.0, self.omega * t);
        &self.a0 + &self.ap * e + &self.am * e.conj()
    }

    /// Fourth-order Magnus propagator over `[t, t + dt]`.
    fn step(&self, t: f64, dt: f64) -> DMatrix<C64> {
        if self.is_static() {
            return (self.at(t) * c(dt)).exp();
        }
        let r = 3f64.sqrt() / 6.0;
        let a1 = self.at(t + (0.5 - r) * dt);
        let a2 = self.at(t + (0.5 + r) * dt);
        let comm = &a2 * &a1 - &a1 * &a2;
        let omega = (&a1 + &a2) * c(0.5 * dt) + comm * c(3f64.sqrt() / 12.0 * dt * dt);
        omega.exp()
    }
}

/// Step propagators for a schedule: cached per beat phase while the pulse is on.
pub(crate) struct StepPropagators {
    on_gen: PeriodicGenerator,
    on: Vec<DMatrix<C64>>,
    off: DMatrix<C64>,
    grid: TimeGrid,
    n_on: usize,
}

impl StepPropagators {
    pub fn new(on_gen: PeriodicGenerator, off_gen: &PeriodicGenerator, sched: &Schedule) -> Self {
        let grid = sched.grid;
        let dt = grid.dt;
        let n_on = sched.n_on();
        let classes = if on_gen.is_static() {
            Some(1)
        } else {
            let period = 2.0 * PI / on_gen.omega.abs();
            let k = (period / dt).round();
            let aligned = k >= 1.0 && (k * dt - period).abs() <= 1e-9 * period;
            aligned.then_some(k as usize)
        };
        let on = match classes {
            Some(k) => (0..k).map(|j| on_gen.step(grid.time(j), dt)).collect(),
            None => Vec::new(),
        };
        let off = off_gen.step(0.0, dt);
        StepPropagators { on_gen, on, off, grid, n_on }
    }

    /// Number of cached phase classes (0 when the grid is not commensurate).
    pub fn n_classes(&self) -> usize {
        self.on.len()
    }

    pub fn on_step(&self, q: usize) -> &DMatrix<C64> {
        &self.on[q]
    }

    pub fn off_step(&self) -> &DMatrix<C64> {
        &self.off
    }

    pub fn n_on(&self) -> usize {
        self.n_on
    }

    /// Propagator for the step `i → i + 1`.
    pub fn get(&self, i: usize) -> std::borrow::Cow<'_, DMatrix<C64>> {
        use std::borrow::Cow;
        if i >= self.n_on {
            Cow::Borrowed(&self.off)
        } else if self.on.is_empty() {
            Cow::Owned(self.on_gen.step(self.grid.time(i), self.grid.dt))
        } else {
            Cow::Borrowed(&self.on[i % self.on.len()])
        }
    }
}

fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}

/// `vec(Mρ)` for column-major vectorization.
fn left(m: &DMatrix<C64>) -> DMatrix<C64> {
    kron(&DMatrix::identity(m.nrows(), m.nrows()), m)
}

/// `vec(ρM)`.
fn right(m: &DMatrix<C64>) -> DMatrix<C64> {
    kron(&m.transpose(), &DMatrix::identity(m.nrows(), m.nrows()))
}

/// `vec(LρL†)`.
fn sandwich(l: &DMatrix<C64>) -> DMatrix<C64> {
    kron(&l.map(|z| z.conj()), l)
}

fn commutator_super(h: &DMatrix<C64>) -> DMatrix<C64> {
    (left(h) - right(h)) * C64::new(0.0, -1.0)
}

fn mat4_dyn(m: &Mat4) -> DMatrix<C64> {
    DMatrix::from_iterator(4, 4, m.iter().cloned())
}

fn mat6_dyn(m: &Mat6) -> DMatrix<C64> {
    DMatrix::from_iterator(6, 6, m.iter().cloned())
}

/// Non-Hermitian no-jump generator `−iH − ½ΣL†L` on the emitting manifold.
pub(crate) fn no_jump_generator(ops: &OperatorSet, drive_on: bool) -> PeriodicGenerator {
    let (h0, hp) = ops.emitting_parts(drive_on);
    let k = ops.emitting_loss_diag();
    let mut a0 = mat4_dyn(&h0) * C64::new(0.0, -1.0);
    for i in 0..4 {
        a0[(i, i)] -= c(0.5 * k[i]);
    }
    let hp = mat4_dyn(&hp);
    PeriodicGenerator {
        ap: &hp * C64::new(0.0, -1.0),
        am: hp.adjoint() * C64::new(0.0, -1.0),
        a0,
        omega: ops.params.beat(),
    }
}

/// Liouvillian of the restricted master equation on the emitting manifold:
/// recycling terms for `sp`, `ss`; anticommutator only for the loss channels.
fn restricted_generator(ops: &OperatorSet, drive_on: bool) -> PeriodicGenerator {
    let (h0, hp) = ops.emitting_parts(drive_on);
    let h0 = mat4_dyn(&h0);
    let hp = mat4_dyn(&hp);
    let k = ops.emitting_loss_diag();
    let kd = DMatrix::from_fn(4, 4, |i, j| if i == j { c(0.5 * k[i]) } else { c(0.0) });
    let mut a0 = commutator_super(&h0) - left(&kd) - right(&kd);
    for j in ops.jumps.iter().filter(|j| j.channel.recycles()) {
        let mut l = DMatrix::zeros(4, 4);
        l[(j.to, j.from)] = c(j.amp);
        a0 += sandwich(&l);
    }
    PeriodicGenerator {
        ap: commutator_super(&hp),
        am: commutator_super(&hp.adjoint()),
        a0,
        omega: ops.params.beat(),
    }
}

/// Liouvillian of the full six-level master equation (every jump recycles).
fn full_generator(ops: &OperatorSet, drive_on: bool) -> PeriodicGenerator {
    let (h0, hp) = ops.emitting_parts(drive_on);
    let mut h = DMatrix::zeros(6, 6);
    h.view_mut((0, 0), (4, 4)).copy_from(&mat4_dyn(&h0));
    let diag = ops.diagonal();
    h[(4, 4)] = c(diag[4]);
    h[(5, 5)] = c(diag[5]);
    let mut hpd = DMatrix::zeros(6, 6);
    hpd.view_mut((0, 0), (4, 4)).copy_from(&mat4_dyn(&hp));
    let mut a0 = commutator_super(&h);
    for (_, l) in ops.noise_ops() {
        let l = mat6_dyn(&l);
        let k = l.adjoint() * &l * c(0.5);
        a0 += sandwich(&l) - left(&k) - right(&k);
    }
    PeriodicGenerator {
        ap: commutator_super(&hpd),
        am: commutator_super(&hpd.adjoint()),
        a0,
        omega: ops.params.beat(),
    }
}

/// Density-operator trajectory on a grid.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<IonCavityState>,
}

impl Trajectory {
    pub fn traces(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.trace()).collect()
    }
}

fn embed4(v: &DVector<C64>) -> Mat6 {
    let mut m = Mat6::zeros();
    for j in 0..4 {
        for i in 0..4 {
            m[(i, j)] = v[i + 4 * j];
        }
    }
    m
}

fn unvec6(v: &DVector<C64>) -> Mat6 {
    Mat6::from_iterator(v.iter().cloned())
}

fn vec_trace(v: &DVector<C64>, n: usize) -> f64 {
    (0..n).map(|i| v[i + n * i].re).sum()
}

/// Propagates a vectorized density operator, calling `visit(i, ρ_i)` at every grid point.
fn run_vectorized<F: FnMut(usize, &DVector<C64>) -> Result<()>>(
    props: &StepPropagators,
    grid: &TimeGrid,
    n: usize,
    rho0: DVector<C64>,
    trace_preserving: bool,
    mut visit: F,
) -> Result<()> {
    let mut rho = rho0;
    let mut last = vec_trace(&rho, n);
    visit(0, &rho)?;
    for i in 0..grid.n_steps {
        rho = props.get(i).as_ref() * &rho;
        let tr = vec_trace(&rho, n);
        if !tr.is_finite() {
            return Err(Error::Integrator { t: grid.time(i + 1), msg: "non-finite state".into() });
        }
        if trace_preserving {
            if (tr - 1.0).abs() > 1e-6 {
                return Err(Error::Integrator { t: grid.time(i + 1), msg: format!("trace drifted to {tr}") });
            }
        } else if tr > last + 1e-6 {
            return Err(Error::Integrator { t: grid.time(i + 1), msg: format!("trace increased {last} → {tr}") });
        }
        last = tr;
        visit(i + 1, &rho)?;
    }
    Ok(())
}

fn restricted_props(ops: &OperatorSet, sched: &Schedule) -> StepPropagators {
    StepPropagators::new(restricted_generator(ops, true), &restricted_generator(ops, false), sched)
}

fn ground_vec(n: usize) -> DVector<C64> {
    let mut v = DVector::zeros(n * n);
    v[0] = c(1.0);
    v
}

/// Restricted master equation from |S,0⟩; the trace is the probability that
/// no loss event (dp, d'p, 4, 5) has occurred.
pub fn evolve_restricted(p: &NodeParams, sched: &Schedule, delta_omega: f64) -> Result<Trajectory> {
    let ops = build_operators(p, delta_omega)?;
    let props = restricted_props(&ops, sched);
    let mut states = Vec::with_capacity(sched.grid.len());
    run_vectorized(&props, &sched.grid, 4, ground_vec(4), false, |_, v| {
        states.push(IonCavityState::Mixed(embed4(v)));
        Ok(())
    })?;
    Ok(Trajectory { grid: sched.grid, states })
}

/// Full trace-preserving master equation on the six-level space.
pub fn evolve_full(p: &NodeParams, sched: &Schedule, delta_omega: f64) -> Result<Trajectory> {
    let ops = build_operators(p, delta_omega)?;
    let props = StepPropagators::new(full_generator(&ops, true), &full_generator(&ops, false), sched);
    let mut states = Vec::with_capacity(sched.grid.len());
    run_vectorized(&props, &sched.grid, 6, ground_vec(6), true, |_, v| {
        states.push(IonCavityState::Mixed(unvec6(v)));
        Ok(())
    })?;
    Ok(Trajectory { grid: sched.grid, states })
}

/// Photon envelopes `p_v(t) = 2κ⟨D,1|ρ|D,1⟩`, `p_h(t) = 2κ⟨D',1|ρ|D',1⟩` (1/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelopes {
    pub grid: TimeGrid,
    pub p_v: Vec<f64>,
    pub p_h: Vec<f64>,
}

impl Envelopes {
    pub fn total_v(&self) -> f64 {
        trapezoid(&self.p_v, self.grid.dt)
    }

    pub fn total_h(&self) -> f64 {
        trapezoid(&self.p_h, self.grid.dt)
    }

    /// Variance of the normalized arrival-time distribution of both polarizations.
    pub fn arrival_variance(&self) -> f64 {
        let ts = self.grid.times();
        let w: Vec<f64> = self.p_v.iter().zip(&self.p_h).map(|(a, b)| a + b).collect();
        let norm: f64 = w.iter().sum();
        let mean: f64 = w.iter().zip(&ts).map(|(w, t)| w * t).sum::<f64>() / norm;
        w.iter().zip(&ts).map(|(w, t)| w * (t - mean).powi(2)).sum::<f64>() / norm
    }
}

pub fn photon_envelopes(traj: &Trajectory, p: &NodeParams) -> Envelopes {
    let k2 = 2.0 * p.kappa;
    Envelopes {
        grid: traj.grid,
        p_v: traj.states.iter().map(|s| (k2 * s.population(D1)).max(0.0)).collect(),
        p_h: traj.states.iter().map(|s| (k2 * s.population(DP1)).max(0.0)).collect(),
    }
}

/// Rate of recycling scattering `tr((L_sp†L_sp + L_ss†L_ss)ρ)` (1/s).
pub fn scattering_rate(traj: &Trajectory, p: &NodeParams) -> Vec<f64> {
    traj.states
        .iter()
        .map(|s| (2.0 * p.gamma_sp * s.population(P0) + 2.0 * p.gamma_ss * s.population(S0)).max(0.0))
        .collect()
}

/// Rate of P → S spontaneous scattering events alone, `2γsp ρ_PP` (1/s).
pub fn sp_scattering_rate(traj: &Trajectory, p: &NodeParams) -> Vec<f64> {
    traj.states.iter().map(|s| (2.0 * p.gamma_sp * s.population(P0)).max(0.0)).collect()
}

/// Trapezoidal integral of uniformly sampled values.
pub fn trapezoid(ys: &[f64], dt: f64) -> f64 {
    match ys.len() {
        0 | 1 => 0.0,
        n => dt * (ys.iter().sum::<f64>() - 0.5 * (ys[0] + ys[n - 1])),
    }
}

/// Observables of the restricted master equation without storing the states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEmission {
    pub envelopes: Envelopes,
    /// Recycling scattering rate `P_s(t)`.
    pub p_s: Vec<f64>,
    /// P → S scattering rate only.
    pub p_sp: Vec<f64>,
    /// Trace of the restricted state.
    pub survival: Vec<f64>,
}

impl NodeEmission {
    /// Mean number of P → S scattering events up to the end of the pulse.
    pub fn scattering_events(&self, pulse_end: f64) -> f64 {
        let g = &self.envelopes.grid;
        let n = (((pulse_end - g.t_start) / g.dt).round().max(0.0) as usize).min(g.n_steps);
        trapezoid(&self.p_sp[..=n], g.dt)
    }
}

pub fn restricted_emission(p: &NodeParams, sched: &Schedule, delta_omega: f64) -> Result<NodeEmission> {
    let ops = build_operators(p, delta_omega)?;
    let props = restricted_props(&ops, sched);
    let n = sched.grid.len();
    let (mut pv, mut ph, mut ps, mut psp, mut tr) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let k2 = 2.0 * p.kappa;
    run_vectorized(&props, &sched.grid, 4, ground_vec(4), false, |_, v| {
        let pop = |i: usize| v[i + 4 * i].re;
        pv.push((k2 * pop(D1)).max(0.0));
        ph.push((k2 * pop(DP1)).max(0.0));
        let sp = (2.0 * p.gamma_sp * pop(P0)).max(0.0);
        psp.push(sp);
        ps.push(sp + (2.0 * p.gamma_ss * pop(S0)).max(0.0));
        tr.push(vec_trace(v, 4));
        Ok(())
    })?;
    Ok(NodeEmission { envelopes: Envelopes { grid: sched.grid, p_v: pv, p_h: ph }, p_s: ps, p_sp: psp, survival: tr })
}

/// Discrete Gaussian ensemble of static cavity-frequency offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterEnsemble {
    pub k_max: usize,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl JitterEnsemble {
    pub fn none() -> Self {
        JitterEnsemble { k_max: 0, offsets: vec![0.0], weights: vec![1.0] }
    }
}

/// `2·k_max + 1` offsets spanning `±span_factor·γclj`, Gaussian weights renormalized to one.
pub fn jitter_ensemble(gamma_clj: f64, k_max: usize, span_factor: f64) -> Result<JitterEnsemble> {
    if !(gamma_clj >= 0.0) || !(span_factor > 0.0) {
        return Err(Error::InvalidParameter("gamma_clj must be ≥ 0 and span_factor > 0".into()));
    }
    if gamma_clj == 0.0 || k_max == 0 {
        return Ok(JitterEnsemble::none());
    }
    let step = span_factor * gamma_clj / k_max as f64;
    let km = k_max as i64;
    let offsets: Vec<f64> = (-km..=km).map(|k| k as f64 * step).collect();
    let raw: Vec<f64> = offsets.iter().map(|d| (-d * d / (2.0 * gamma_clj * gamma_clj)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(JitterEnsemble { k_max, offsets, weights: raw.iter().map(|w| w / total).collect() })
}

/// Ensemble-averaged emission observables.
pub fn averaged_emission(p: &NodeParams, sched: &Schedule, ens: &JitterEnsemble) -> Result<NodeEmission> {
    let runs: Vec<NodeEmission> =
        ens.offsets.par_iter().map(|&d| restricted_emission(p, sched, d)).collect::<Result<_>>()?;
    if runs.len() == 1 {
        return Ok(runs.into_iter().next().unwrap());
    }
    let n = sched.grid.len();
    let avg = |f: &dyn Fn(&NodeEmission) -> &Vec<f64>| -> Vec<f64> {
        (0..n).map(|i| runs.iter().zip(&ens.weights).map(|(r, w)| w * f(r)[i]).sum()).collect()
    };
    Ok(NodeEmission {
        envelopes: Envelopes {
            grid: sched.grid,
            p_v: avg(&|r| &r.envelopes.p_v),
            p_h: avg(&|r| &r.envelopes.p_h),
        },
        p_s: avg(&|r| &r.p_s),
        p_sp: avg(&|r| &r.p_sp),
        survival: avg(&|r| &r.survival),
    })
}

/// Jitter-averaged envelopes `Σ_k w_k p^{(δω_k)}(t)`.
pub fn averaged_envelopes(p: &NodeParams, sched: &Schedule, ens: &JitterEnsemble) -> Result<Envelopes> {
    Ok(averaged_emission(p, sched, ens)?.envelopes)
}

/// Monte Carlo jump unraveling of the full model. Returns, for each checkpoint
/// time, the fraction of trajectories with no loss event (dp, d'p, 4, 5) so far.
pub fn survival_by_unraveling(
    p: &NodeParams,
    sched: &Schedule,
    delta_omega: f64,
    n_traj: usize,
    seed: u64,
    checkpoints: &[f64],
) -> Result<Vec<f64>> {
    let ops = build_operators(p, delta_omega)?;
    let props = StepPropagators::new(no_jump_generator(&ops, true), &no_jump_generator(&ops, false), sched);
    let grid = sched.grid;
    let jumps = ops.jumps;
    let loss_times: Vec<f64> = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut psi = DVector::from_element(4, c(0.0));
            psi[0] = c(1.0);
            let mut r: f64 = rng.random();
            for i in 0..grid.n_steps {
                let next = props.get(i).as_ref() * &psi;
                if next.norm_squared() >= r {
                    psi = next;
                    continue;
                }
                // A jump happened during this step; pick the channel from the rates at its start.
                let norm = psi.norm_squared();
                let rates: Vec<f64> = jumps.iter().map(|j| j.rate() * psi[j.from].norm_sqr() / norm).collect();
                let total: f64 = rates.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut chosen = jumps.len() - 1;
                for (idx, w) in rates.iter().enumerate() {
                    if u < *w {
                        chosen = idx;
                        break;
                    }
                    u -= w;
                }
                if jumps[chosen].channel.recycles() {
                    psi = DVector::from_element(4, c(0.0));
                    psi[0] = c(1.0);
                    r = rng.random();
                } else {
                    return grid.time(i + 1);
                }
            }
            f64::INFINITY
        })
        .collect();
    Ok(checkpoints
        .iter()
        .map(|&t| loss_times.iter().filter(|&&l| l > t).count() as f64 / n_traj as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{preset_params, MHZ};
    use approx::assert_relative_eq;

    fn rabi_params() -> NodeParams {
        NodeParams {
            omega1: 2.0 * PI * 12e6,
            omega2: 0.0,
            g1: 0.0,
            g2: 0.0,
            delta1: 2.0 * PI * 20e6,
            delta2: 2.0 * PI * 20e6,
            deltac1: 0.0,
            deltac2: 0.0,
            kappa: 0.0,
            gamma_sp: 0.0,
            gamma_dp: 0.0,
            gamma_dprime_p: 0.0,
            gamma_ss: 0.0,
            gamma_clj: 0.0,
            eta: 0.0,
        }
    }

    #[test]
    fn grid_is_commensurate() {
        let g = TimeGrid::commensurate(0.0, 60e-6, 1e-9, Some(0.1421e-6)).unwrap();
        let k = 0.1421e-6 / g.dt;
        assert!((k - k.round()).abs() < 1e-9);
        assert_relative_eq!(g.n_steps as f64 * g.dt, g.t_end - g.t_start, max_relative = 1e-12);
    }

    #[test]
    fn rabi_oracle() {
        let p = rabi_params();
        let sched = Schedule::new(&p, 2e-6, 1e-9, 1.0).unwrap();
        let traj = evolve_restricted(&p, &sched, 0.0).unwrap();
        let det = p.delta1 + crate::hilbert::stark_shift(&p).unwrap().abs();
        let w = (p.omega1.powi(2) + det * det).sqrt();
        for (i, s) in traj.states.iter().enumerate() {
            let t = sched.grid.time(i);
            let want = p.omega1.powi(2) / w.powi(2) * (0.5 * w * t).sin().powi(2);
            assert!((s.population(P0) - want).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn restricted_initial_trace() {
        let p = preset_params("nodeB").unwrap();
        let sched = Schedule::new(&p, 1e-6, 1e-9, 0.5e-6).unwrap();
        let traj = evolve_restricted(&p, &sched, 0.0).unwrap();
        assert_relative_eq!(traj.states[0].trace(), 1.0, epsilon = 1e-15);
        for s in &traj.states {
            s.validate().unwrap();
        }
    }

    #[test]
    fn restricted_trace_matches_loss_integral() {
        let p = preset_params("nodeB").unwrap();
        let sched = Schedule::standard(&p).unwrap();
        let em = restricted_emission(&p, &sched, 0.0).unwrap();
        let tr = em.survival.last().copied().unwrap();
        assert!(tr < 1.0);
        // d tr/dt = −(emission + P→D, D' decay).
        let loss: Vec<f64> = (0..sched.grid.len())
            .map(|i| {
                em.envelopes.p_v[i] + em.envelopes.p_h[i] + (p.gamma_dp + p.gamma_dprime_p) / p.gamma_sp * em.p_sp[i]
            })
            .collect();
        let lhs = 1.0 - trapezoid(&loss, sched.grid.dt);
        // Quadrature of the GHz ripple in the P population limits this to ~1e-4.
        assert!((lhs - tr).abs() < 1e-3, "{lhs} vs {tr}");
        for w in em.survival.windows(2) {
            assert!(w[1] <= w[0] + 1e-8);
        }
    }

    #[test]
    fn full_trace_and_absorbing_levels() {
        let p = preset_params("nodeB").unwrap();
        let sched = Schedule::new(&p, 5e-6, 1e-9, 50e-6).unwrap();
        let traj = evolve_full(&p, &sched, 0.0).unwrap();
        let mut last = 0.0;
        for s in &traj.states {
            assert!((s.trace() - 1.0).abs() < 1e-8);
            let absorbed = s.population(4) + s.population(5);
            assert!(absorbed >= last - 1e-12);
            last = absorbed;
        }
    }

    #[test]
    fn full_and_restricted_agree_on_emitting_block_without_recycling() {
        let p = NodeParams { gamma_sp: 0.0, gamma_ss: 0.0, ..preset_params("nodeB").unwrap() };
        let sched = Schedule::new(&p, 3e-6, 1e-9, 50e-6).unwrap();
        let a = evolve_full(&p, &sched, 0.0).unwrap();
        let b = evolve_restricted(&p, &sched, 0.0).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            let (x, y) = (x.density(), y.density());
            for i in 0..4 {
                for j in 0..4 {
                    assert!((x[(i, j)] - y[(i, j)]).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn no_coupling_no_photon() {
        let p = NodeParams { g1: 0.0, g2: 0.0, ..preset_params("nodeA").unwrap() };
        let sched = Schedule::new(&p, 2e-6, 1e-9, 50e-6).unwrap();
        let traj = evolve_restricted(&p, &sched, 0.0).unwrap();
        let env = photon_envelopes(&traj, &p);
        assert!(env.p_v.iter().chain(&env.p_h).all(|&x| x == 0.0));
    }

    #[test]
    fn no_scattering_rates_when_gammas_vanish() {
        let p = NodeParams { gamma_sp: 0.0, gamma_ss: 0.0, ..preset_params("nodeA").unwrap() };
        let sched = Schedule::new(&p, 1e-6, 1e-9, 50e-6).unwrap();
        let traj = evolve_restricted(&p, &sched, 0.0).unwrap();
        assert!(scattering_rate(&traj, &p).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn emission_probability_bounded() {
        let p = preset_params("nodeB").unwrap();
        let sched = Schedule::standard(&p).unwrap();
        let em = restricted_emission(&p, &sched, 0.0).unwrap();
        let total = em.envelopes.total_v() + em.envelopes.total_h();
        assert!(total > 0.0 && total <= 1.0);
    }

    #[test]
    fn jitter_trivial_ensembles() {
        let e = jitter_ensemble(0.0, 6, 3.0).unwrap();
        assert_eq!(e.offsets, vec![0.0]);
        assert_eq!(e.weights, vec![1.0]);
        let e = jitter_ensemble(2.0 * PI * 0.06e6, 6, 3.0).unwrap();
        assert_eq!(e.offsets.len(), 13);
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..13 {
            assert_eq!(e.weights[k], e.weights[12 - k]);
            assert_eq!(e.offsets[k], -e.offsets[12 - k]);
        }
    }

    #[test]
    fn single_sample_average_is_identity() {
        let p = preset_params("nodeB").unwrap();
        let sched = Schedule::new(&p, 3e-6, 1e-9, 50e-6).unwrap();
        let avg = averaged_envelopes(&p, &sched, &JitterEnsemble::none()).unwrap();
        let traj = evolve_restricted(&p, &sched, 0.0).unwrap();
        assert_eq!(avg, photon_envelopes(&traj, &p));
    }

    #[test]
    fn averaging_is_linear_in_totals() {
        let p = preset_params("nodeA").unwrap();
        let sched = Schedule::new(&p, 4e-6, 1e-9, 50e-6).unwrap();
        let ens = jitter_ensemble(2.0 * PI * 0.1e6, 2, 3.0).unwrap();
        let avg = averaged_envelopes(&p, &sched, &ens).unwrap();
        let want: f64 = ens
            .offsets
            .iter()
            .zip(&ens.weights)
            .map(|(&d, w)| {
                let e = restricted_emission(&p, &sched, d).unwrap().envelopes;
                w * (e.total_v() + e.total_h())
            })
            .sum();
        assert_relative_eq!(avg.total_v() + avg.total_h(), want, max_relative = 1e-12);
    }

    #[test]
    fn unit_conversion() {
        let p = preset_params("nodeB").unwrap();
        assert_relative_eq!(p.kappa / MHZ, 0.07, max_relative = 1e-12);
    }
}
