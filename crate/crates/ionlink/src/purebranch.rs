//! No-jump branch, emission amplitudes and single-photon coherence kernels.
//!
//! The density operator of a node decomposes into the no-scattering branch
//! plus branches restarted from |S,0⟩ at every recycling scattering time `s`.
//! Summing those branches per node gives the two-time kernel
//! `G(t1,t2) = Σ_s P̃_s(s) a(t1|s) a*(t2|s)` from which all coincidence rates
//! follow.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{no_jump_generator, Schedule, StepPropagators, TimeGrid};
use crate::error::{Error, Result};
use crate::hilbert::{build_operators, c, IonCavityState, Mat4, NodeParams, OperatorSet, Vec4, Vec6, C64, D1, DP1};

/// Pure emitting-manifold amplitudes `(S0, P0, D1, D'1)` on a grid.
#[derive(Clone, Debug)]
pub struct PureTrajectory {
    pub grid: TimeGrid,
    pub states: Vec<Vec4>,
}

impl PureTrajectory {
    pub fn norms(&self) -> Vec<f64> {
        self.states.iter().map(|v| v.norm_squared()).collect()
    }

    pub fn to_states(&self) -> Vec<IonCavityState> {
        self.states
            .iter()
            .map(|v| {
                let mut w = Vec6::zeros();
                w.fixed_rows_mut::<4>(0).copy_from(v);
                IonCavityState::Pure(w)
            })
            .collect()
    }
}

fn to_mat4(m: &DMatrix<C64>) -> Mat4 {
    Mat4::from_iterator(m.iter().cloned())
}

/// Cached no-jump step propagators of one node.
struct NoJump {
    on: Vec<Mat4>,
    off: Mat4,
    n_on: usize,
    ops: OperatorSet,
}

impl NoJump {
    fn new(p: &NodeParams, sched: &Schedule, delta_omega: f64) -> Result<Self> {
        let ops = build_operators(p, delta_omega)?;
        let props =
            StepPropagators::new(no_jump_generator(&ops, true), &no_jump_generator(&ops, false), sched);
        let on: Vec<Mat4> = if props.n_classes() > 0 {
            (0..props.n_classes()).map(|q| to_mat4(props.on_step(q))).collect()
        } else if props.n_on() == 0 {
            Vec::new()
        } else {
            return Err(Error::InvalidParameter(
                "time step is not commensurate with the bichromatic beat period".into(),
            ));
        };
        Ok(NoJump { on, off: to_mat4(props.off_step()), n_on: props.n_on(), ops })
    }

    fn step(&self, i: usize) -> &Mat4 {
        if i >= self.n_on {
            &self.off
        } else {
            &self.on[i % self.on.len()]
        }
    }
}

fn ground4() -> Vec4 {
    let mut v = Vec4::zeros();
    v[0] = c(1.0);
    v
}

/// No-jump evolution `dΨ/dt = −(iH + ½ΣL†L)Ψ` from |S,0⟩.
pub fn propagate_no_noise(p: &NodeParams, sched: &Schedule, delta_omega: f64) -> Result<PureTrajectory> {
    let nj = NoJump::new(p, sched, delta_omega)?;
    let mut states = Vec::with_capacity(sched.grid.len());
    let mut psi = ground4();
    states.push(psi);
    for i in 0..sched.grid.n_steps {
        let next = nj.step(i) * psi;
        if next.norm_squared() > psi.norm_squared() + 1e-8 {
            return Err(Error::Integrator { t: sched.grid.time(i + 1), msg: "norm increased".into() });
        }
        psi = next;
        states.push(psi);
    }
    Ok(PureTrajectory { grid: sched.grid, states })
}

/// Emission amplitudes α(t|0), β(t|0) in the photon frame, with the shift rule
/// `α(t|s) = e^{i s c_v} α(t−s|0)`.
#[derive(Clone, Debug)]
pub struct AmplitudeTable {
    pub grid: TimeGrid,
    /// Frame rates `Δc + δω − Δ1' − |δs|` for the V and H photon.
    pub c_v: f64,
    pub c_h: f64,
    pub alpha0: Vec<C64>,
    pub beta0: Vec<C64>,
}

impl AmplitudeTable {
    /// α(t_i | s_j) on grid indices.
    pub fn alpha(&self, i: usize, j: usize) -> C64 {
        if i < j {
            return c(0.0);
        }
        C64::from_polar(1.0, self.grid.dt * j as f64 * self.c_v) * self.alpha0[i - j]
    }

    pub fn beta(&self, i: usize, j: usize) -> C64 {
        if i < j {
            return c(0.0);
        }
        C64::from_polar(1.0, self.grid.dt * j as f64 * self.c_h) * self.beta0[i - j]
    }
}

pub fn build_amplitudes(traj: &PureTrajectory, p: &NodeParams, delta_omega: f64) -> Result<AmplitudeTable> {
    let ops = build_operators(p, delta_omega)?;
    let (c_v, c_h) = ops.frame_rates();
    let g = traj.grid;
    let alpha0 = traj.states.iter().enumerate().map(|(i, v)| C64::from_polar(1.0, g.time(i) * c_v) * v[D1]).collect();
    let beta0 = traj.states.iter().enumerate().map(|(i, v)| C64::from_polar(1.0, g.time(i) * c_h) * v[DP1]).collect();
    Ok(AmplitudeTable { grid: g, c_v, c_h, alpha0, beta0 })
}

/// Exact emission amplitudes for a branch started in |S,0⟩ at grid index `j`,
/// returned for grid indices `j..=n_steps`.
pub fn amplitudes_from_start(
    p: &NodeParams,
    sched: &Schedule,
    delta_omega: f64,
    j: usize,
) -> Result<(Vec<C64>, Vec<C64>)> {
    let nj = NoJump::new(p, sched, delta_omega)?;
    let (c_v, c_h) = nj.ops.frame_rates();
    let g = sched.grid;
    let mut psi = ground4();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in j..=g.n_steps {
        a.push(C64::from_polar(1.0, g.time(i) * c_v) * psi[D1]);
        b.push(C64::from_polar(1.0, g.time(i) * c_h) * psi[DP1]);
        if i < g.n_steps {
            psi = nj.step(i) * psi;
        }
    }
    Ok((a, b))
}

/// Uniform two-time grid of cells `[t0 + m h, t0 + (m+1) h)`, evaluated at cell centers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub t0: f64,
    pub h: f64,
    pub n: usize,
}

impl KernelGrid {
    pub fn new(t0: f64, t1: f64, h: f64) -> Result<Self> {
        if !(h > 0.0) || !(t1 > t0) {
            return Err(Error::InvalidParameter("kernel grid needs h > 0 and t1 > t0".into()));
        }
        Ok(KernelGrid { t0, h, n: ((t1 - t0) / h).round() as usize })
    }

    pub fn center(&self, m: usize) -> f64 {
        self.t0 + (m as f64 + 0.5) * self.h
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|m| self.center(m)).collect()
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.h * self.n as f64
    }

    /// Index range of cells lying inside `[a, b]`.
    pub fn cells_within(&self, a: f64, b: f64) -> std::ops::Range<usize> {
        let lo = ((a - self.t0) / self.h - 1e-9).ceil().max(0.0) as usize;
        let hi = (((b - self.t0) / self.h + 1e-9).floor().max(0.0) as usize).min(self.n);
        lo.min(hi)..hi
    }
}

/// Two-time single-photon coherence `G(t1,t2)` of one polarization.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceKernel {
    pub grid: KernelGrid,
    pub g: DMatrix<C64>,
}

impl CoherenceKernel {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.grid.n).map(|m| self.g[(m, m)].re).collect()
    }

    /// `max |G − G†|`.
    pub fn hermiticity_error(&self) -> f64 {
        (&self.g - self.g.adjoint()).camax()
    }

    /// `tr(K²)/tr(K)²` of the kernel as an operator on the grid.
    pub fn purity(&self) -> f64 {
        let tr: f64 = self.diagonal().iter().sum();
        let tr2: f64 = self.g.iter().map(|z| z.norm_sqr()).sum();
        tr2 / (tr * tr)
    }

    pub fn scaled(&self, f: f64) -> CoherenceKernel {
        CoherenceKernel { grid: self.grid, g: &self.g * c(f) }
    }

    /// `Σ_k w_k K_k`.
    pub fn weighted_sum(parts: &[CoherenceKernel], weights: &[f64]) -> Result<CoherenceKernel> {
        let first = parts.first().ok_or_else(|| Error::Degenerate("no kernels to average".into()))?;
        let mut g = DMatrix::zeros(first.grid.n, first.grid.n);
        for (k, w) in parts.iter().zip(weights) {
            if k.grid != first.grid {
                return Err(Error::InvalidParameter("kernel grids differ".into()));
            }
            g += &k.g * c(*w);
        }
        Ok(CoherenceKernel { grid: first.grid, g })
    }
}

/// How branches restarted at scattering time `s` are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartTimeModel {
    /// `Ψ_{t|s} ≈ Ψ_{t−s|0}`: one propagation, shifted.
    Shifted,
    /// `Ψ_{t|s}` propagated from the true start time, once per beat-phase class.
    #[default]
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Scattering times are taken every `s_stride` fine steps.
    pub s_stride: usize,
    pub start_model: StartTimeModel,
    /// When false only the no-scattering term `P̃_s = δ(s)` is kept.
    pub include_scattering: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions { s_stride: 4, start_model: StartTimeModel::Exact, include_scattering: true }
    }
}

/// Linear interpolation weights of a coarse time on the fine grid.
#[derive(Clone, Copy)]
struct Interp {
    i0: usize,
    f: f64,
}

fn interp_points(fine: &TimeGrid, kg: &KernelGrid) -> Result<Vec<Interp>> {
    (0..kg.n)
        .map(|m| {
            let x = (kg.center(m) - fine.t_start) / fine.dt;
            if x < 0.0 || x > fine.n_steps as f64 {
                return Err(Error::InvalidParameter("kernel grid extends beyond the integration grid".into()));
            }
            let i0 = (x.floor() as usize).min(fine.n_steps.saturating_sub(1));
            Ok(Interp { i0, f: x - i0 as f64 })
        })
        .collect()
}

/// Accumulates `Σ_j w_j a_j a_j†` for both polarizations in a fixed order.
struct Accumulator {
    gv: DMatrix<C64>,
    gh: DMatrix<C64>,
    av: Vec<C64>,
    ah: Vec<C64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Accumulator { gv: DMatrix::zeros(n, n), gh: DMatrix::zeros(n, n), av: vec![c(0.0); n], ah: vec![c(0.0); n] }
    }

    /// Rank-one update from the amplitudes currently held in `av`, `ah`, for cells `lo..`.
    fn add(&mut self, w: f64, lo: usize) {
        let n = self.av.len();
        for (g, a) in [(&mut self.gv, &self.av), (&mut self.gh, &self.ah)] {
            for m2 in lo..n {
                let b = a[m2].conj() * w;
                if b == c(0.0) {
                    continue;
                }
                let n_rows = g.nrows();
                let col = &mut g.as_mut_slice()[m2 * n_rows..(m2 + 1) * n_rows];
                for m1 in lo..=m2 {
                    col[m1] += a[m1] * b;
                }
            }
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.gv += &other.gv;
        self.gh += &other.gh;
    }

    fn finish(self, kg: KernelGrid) -> (CoherenceKernel, CoherenceKernel) {
        let fill = |mut g: DMatrix<C64>| {
            let n = g.nrows();
            for j in 0..n {
                g[(j, j)] = c(g[(j, j)].re);
                for i in 0..j {
                    g[(j, i)] = g[(i, j)].conj();
                }
            }
            g
        };
        (CoherenceKernel { grid: kg, g: fill(self.gv) }, CoherenceKernel { grid: kg, g: fill(self.gh) })
    }
}

fn first_cell_at_or_after(kg: &KernelGrid, t: f64) -> usize {
    let x = ((t - kg.t0) / kg.h - 0.5).ceil();
    if x <= 0.0 {
        0
    } else {
        (x as usize).min(kg.n)
    }
}

/// Scattering times used for the quadrature: `(fine index, weight)`, with the
/// no-scattering delta term first.
fn scattering_nodes(fine: &TimeGrid, p_s: &[f64], kg: &KernelGrid, opts: &KernelOptions, j_max: usize) -> Vec<(usize, f64)> {
    let mut nodes = vec![(0usize, 1.0)];
    if opts.include_scattering {
        let stride = opts.s_stride.max(1);
        let t_last = kg.end();
        let mut j = 0;
        while j <= j_max && fine.time(j) < t_last {
            let w = p_s[j] * stride as f64 * fine.dt;
            if w > 0.0 {
                nodes.push((j, w));
            }
            j += stride;
        }
    }
    nodes
}

/// Kernels under the start-time-shift approximation.
pub fn coherence_kernels(
    table: &AmplitudeTable,
    p_s: &[f64],
    kg: &KernelGrid,
    opts: &KernelOptions,
) -> Result<(CoherenceKernel, CoherenceKernel)> {
    let fine = table.grid;
    if p_s.len() != fine.len() {
        return Err(Error::InvalidParameter("P_s must be sampled on the amplitude grid".into()));
    }
    let ip = interp_points(&fine, kg)?;
    let nodes = scattering_nodes(&fine, p_s, kg, opts, fine.n_steps);
    let chunks = chunked(&nodes);
    let parts: Vec<Accumulator> = chunks
        .par_iter()
        .map(|chunk| {
            let mut acc = Accumulator::new(kg.n);
            for &(j, w) in chunk.iter() {
                let lo = first_cell_at_or_after(kg, fine.time(j));
                let (pv, ph) = (C64::from_polar(1.0, fine.time(j) * table.c_v), C64::from_polar(1.0, fine.time(j) * table.c_h));
                let rel = |i: usize| i.checked_sub(j);
                for m in 0..kg.n {
                    let (mut a, mut b) = (c(0.0), c(0.0));
                    if m >= lo {
                        let Interp { i0, f } = ip[m];
                        if let Some(r0) = rel(i0) {
                            let r1 = (r0 + 1).min(fine.n_steps);
                            a = pv * (table.alpha0[r0] * (1.0 - f) + table.alpha0[r1] * f);
                            b = ph * (table.beta0[r0] * (1.0 - f) + table.beta0[r1] * f);
                        }
                    }
                    acc.av[m] = a;
                    acc.ah[m] = b;
                }
                acc.add(w, lo);
            }
            acc
        })
        .collect();
    Ok(reduce(parts, kg))
}

fn chunked(nodes: &[(usize, f64)]) -> Vec<Vec<(usize, f64)>> {
    const CHUNKS: usize = 8;
    let size = nodes.len().div_ceil(CHUNKS).max(1);
    nodes.chunks(size).map(|c| c.to_vec()).collect()
}

fn reduce(parts: Vec<Accumulator>, kg: &KernelGrid) -> (CoherenceKernel, CoherenceKernel) {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_else(|| Accumulator::new(kg.n));
    for p in it {
        acc.merge(&p);
    }
    acc.finish(*kg)
}

/// Kernels with every restarted branch propagated from its true start time.
///
/// While the pulse is on, `Ψ_{t|s}` depends on `s` only through its phase
/// within the beat period, so one propagation per phase class suffices; after
/// the pulse the static free evolution is applied.
pub fn exact_coherence_kernels(
    p: &NodeParams,
    sched: &Schedule,
    delta_omega: f64,
    p_s: &[f64],
    kg: &KernelGrid,
    opts: &KernelOptions,
) -> Result<(CoherenceKernel, CoherenceKernel)> {
    let fine = sched.grid;
    if p_s.len() != fine.len() {
        return Err(Error::InvalidParameter("P_s must be sampled on the integration grid".into()));
    }
    let nj = NoJump::new(p, sched, delta_omega)?;
    let (c_v, c_h) = nj.ops.frame_rates();
    let ip = interp_points(&fine, kg)?;
    let n_on = nj.n_on;
    // Branches started after the pulse never leave |S,0⟩ and emit nothing.
    let j_max = n_on.saturating_sub(1);
    let mut nodes = scattering_nodes(&fine, p_s, kg, opts, j_max);
    if n_on == 0 {
        nodes.truncate(1);
    }
    let n_classes = nj.on.len().max(1);
    let last_fine = ip.iter().map(|x| x.i0 + 1).max().unwrap_or(0).min(fine.n_steps);

    // Free-evolution powers U_off^{i − n_on} for fine indices used after the pulse.
    let mut post: Vec<Option<Mat4>> = vec![None; last_fine + 1];
    {
        let mut u = Mat4::identity();
        for (i, slot) in post.iter_mut().enumerate().skip(n_on) {
            if i > n_on {
                u = nj.off * u;
            }
            *slot = Some(u);
        }
    }
    let phase_v: Vec<C64> = (0..=last_fine).map(|i| C64::from_polar(1.0, fine.time(i) * c_v)).collect();
    let phase_h: Vec<C64> = (0..=last_fine).map(|i| C64::from_polar(1.0, fine.time(i) * c_h)).collect();

    let mut by_class: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_classes];
    for &(j, w) in &nodes {
        by_class[j % n_classes].push((j, w));
    }
    let groups: Vec<Vec<usize>> = {
        let active: Vec<usize> = (0..n_classes).filter(|&q| !by_class[q].is_empty()).collect();
        let size = active.len().div_ceil(8).max(1);
        active.chunks(size).map(|c| c.to_vec()).collect()
    };
    let parts: Vec<Accumulator> = groups
        .par_iter()
        .map(|group| {
            let mut acc = Accumulator::new(kg.n);
            let mut phi: Vec<Vec4> = Vec::new();
            for &q in group {
                let members = &by_class[q];
                let j_min = members.iter().map(|x| x.0).min().unwrap();
                // Φ_q(m): m on-steps from phase q, needed up to min(last_fine, n_on) − j_min.
                let m_max = last_fine.min(n_on).saturating_sub(j_min);
                phi.clear();
                let mut psi = ground4();
                phi.push(psi);
                for m in 0..m_max {
                    psi = nj.on[(q + m) % n_classes] * psi;
                    phi.push(psi);
                }
                for &(j, w) in members {
                    let state_at = |i: usize| -> Option<Vec4> {
                        if i < j {
                            None
                        } else if i <= n_on {
                            Some(phi[i - j])
                        } else {
                            post[i].map(|u| u * phi[n_on - j])
                        }
                    };
                    let lo = first_cell_at_or_after(kg, fine.time(j));
                    for m in 0..kg.n {
                        let (mut a, mut b) = (c(0.0), c(0.0));
                        if m >= lo {
                            let Interp { i0, f } = ip[m];
                            let i1 = (i0 + 1).min(fine.n_steps);
                            if let (Some(x0), Some(x1)) = (state_at(i0), state_at(i1)) {
                                a = phase_v[i0] * x0[D1] * (1.0 - f) + phase_v[i1] * x1[D1] * f;
                                b = phase_h[i0] * x0[DP1] * (1.0 - f) + phase_h[i1] * x1[DP1] * f;
                            } else if let Some(x1) = state_at(i1) {
                                a = phase_v[i1] * x1[D1] * f;
                                b = phase_h[i1] * x1[DP1] * f;
                            }
                        }
                        acc.av[m] = a;
                        acc.ah[m] = b;
                    }
                    acc.add(w, lo);
                }
            }
            acc
        })
        .collect();
    Ok(reduce(parts, kg))
}

/// Kernels of one node for one cavity offset, using the selected start-time model.
pub fn node_kernels(
    p: &NodeParams,
    sched: &Schedule,
    delta_omega: f64,
    p_s: &[f64],
    kg: &KernelGrid,
    opts: &KernelOptions,
) -> Result<(CoherenceKernel, CoherenceKernel)> {
    match opts.start_model {
        StartTimeModel::Exact => exact_coherence_kernels(p, sched, delta_omega, p_s, kg, opts),
        StartTimeModel::Shifted => {
            let traj = propagate_no_noise(p, sched, delta_omega)?;
            let table = build_amplitudes(&traj, p, delta_omega)?;
            coherence_kernels(&table, p_s, kg, opts)
        }
    }
}

/// `(P_V, P_H) = 2κ ∫ G(t,t) dt`.
pub fn photon_emission_probabilities(kv: &CoherenceKernel, kh: &CoherenceKernel, p: &NodeParams) -> (f64, f64) {
    let f = |k: &CoherenceKernel| 2.0 * p.kappa * k.grid.h * k.diagonal().iter().sum::<f64>();
    (f(kv), f(kh))
}
