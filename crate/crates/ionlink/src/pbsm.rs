//! Photonic Bell-state measurement: beamsplitter, two-click coincidence
//! densities, window-integrated coincidences and the HOM visibility `V(T)`.
//!
//! Rate matrices are indexed `[u-port time cell, r-port time cell]`.

use std::ops::Range;

use nalgebra::{DMatrix, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{jitter_ensemble, restricted_emission, JitterEnsemble, Schedule};
use crate::error::{Error, Result};
use crate::hilbert::{c, NodeParams, C64};
use crate::purebranch::{node_kernels, CoherenceKernel, KernelGrid, KernelOptions};

/// `(u, r) = B (a, b)` for the balanced nonpolarizing splitter.
pub fn beamsplitter() -> Matrix2<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Matrix2::new(c(s), C64::new(0.0, s), C64::new(0.0, s), c(s))
}

pub fn beamsplitter_inverse() -> Matrix2<C64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Matrix2::new(c(s), C64::new(0.0, -s), C64::new(0.0, -s), c(s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
    Spcm1,
    Spcm2,
    Snspd1,
    Snspd2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Port {
    U,
    R,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    V,
    H,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::Spcm1, Detector::Spcm2, Detector::Snspd1, Detector::Snspd2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Detector::Spcm1 => "SPCM1",
            Detector::Spcm2 => "SPCM2",
            Detector::Snspd1 => "SNSPD1",
            Detector::Snspd2 => "SNSPD2",
        }
    }

    pub fn from_label(s: &str) -> Option<Detector> {
        Detector::ALL.into_iter().find(|d| d.label().eq_ignore_ascii_case(s))
    }

    /// SNSPDs sit behind the polarizer of the `u` output, SPCMs behind `r`.
    pub fn port(self) -> Port {
        match self {
            Detector::Snspd1 | Detector::Snspd2 => Port::U,
            Detector::Spcm1 | Detector::Spcm2 => Port::R,
        }
    }

    pub fn polarization(self) -> Polarization {
        match self {
            Detector::Snspd1 | Detector::Spcm2 => Polarization::H,
            Detector::Snspd2 | Detector::Spcm1 => Polarization::V,
        }
    }

    pub fn at(port: Port, pol: Polarization) -> Detector {
        match (port, pol) {
            (Port::U, Polarization::H) => Detector::Snspd1,
            (Port::U, Polarization::V) => Detector::Snspd2,
            (Port::R, Polarization::V) => Detector::Spcm1,
            (Port::R, Polarization::H) => Detector::Spcm2,
        }
    }
}

/// Detector pairs heralding `|Ψ+⟩` (same output, orthogonal polarization).
pub const PSI_PLUS_PAIRS: [(Detector, Detector); 1] = [(Detector::Snspd1, Detector::Snspd2)];
/// Detector pairs heralding `|Ψ−⟩` (opposite outputs, orthogonal polarization).
pub const PSI_MINUS_PAIRS: [(Detector, Detector); 2] =
    [(Detector::Snspd1, Detector::Spcm1), (Detector::Snspd2, Detector::Spcm2)];
/// Opposite-output pairs with identical polarization.
pub const PARALLEL_PAIRS: [(Detector, Detector); 2] =
    [(Detector::Snspd1, Detector::Spcm2), (Detector::Snspd2, Detector::Spcm1)];

/// One row of the detector calibration table. Probabilities are fractions, not percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorRow {
    pub background_rate: f64,
    pub p_bg_det: f64,
    pub p_det_a: f64,
    pub p_det_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorTable {
    /// Rows in the order SPCM1, SPCM2, SNSPD1, SNSPD2.
    pub rows: [DetectorRow; 4],
    /// Detection window `[start, end]` in seconds.
    pub window: (f64, f64),
    /// Background calibration window in seconds.
    pub background_window: (f64, f64),
}

pub const DETECTION_WINDOW: (f64, f64) = (5.5e-6, 23e-6);
pub const BACKGROUND_WINDOW: (f64, f64) = (70e-6, 100e-6);

impl Default for DetectorTable {
    fn default() -> Self {
        let row = |rate: f64, bg_pct: f64, a_pct: f64, b_pct: f64| DetectorRow {
            background_rate: rate,
            p_bg_det: bg_pct / 100.0,
            p_det_a: a_pct / 100.0,
            p_det_b: b_pct / 100.0,
        };
        DetectorTable {
            rows: [
                row(9.69, 0.017, 0.08, 1.30),
                row(9.37, 0.016, 0.12, 1.96),
                row(0.25, 0.0004, 0.19, 2.82),
                row(2.00, 0.0035, 0.24, 3.62),
            ],
            window: DETECTION_WINDOW,
            background_window: BACKGROUND_WINDOW,
        }
    }
}

impl DetectorTable {
    pub fn row(&self, d: Detector) -> &DetectorRow {
        &self.rows[d.index()]
    }

    pub fn window_length(&self) -> f64 {
        self.window.1 - self.window.0
    }

    pub fn validate(&self) -> Result<()> {
        let (w0, w1) = self.window;
        if !(w1 > w0 && w0 >= 0.0) {
            return Err(Error::InvalidParameter("detection window must satisfy 0 <= start < end".into()));
        }
        let (b0, b1) = self.background_window;
        if !(b1 > b0) || (b0 < w1 && w0 < b1) {
            return Err(Error::InvalidParameter("background window must be non-empty and disjoint from the detection window".into()));
        }
        for d in Detector::ALL {
            let r = self.row(d);
            if !(r.background_rate >= 0.0) {
                return Err(Error::InvalidParameter(format!("{}: negative background rate", d.label())));
            }
            for (name, p) in [("p_bg_det", r.p_bg_det), ("p_det_a", r.p_det_a), ("p_det_b", r.p_det_b)] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidParameter(format!("{}: {name} = {p} outside [0, 1]", d.label())));
                }
            }
            // Table values are printed to two significant digits.
            let expected = r.background_rate * self.window_length();
            if (r.p_bg_det - expected).abs() > 0.05 * expected.max(r.p_bg_det) + 5e-7 {
                return Err(Error::Consistency(format!(
                    "{}: p_bg_det {} inconsistent with rate x window {}",
                    d.label(),
                    r.p_bg_det,
                    expected
                )));
            }
        }
        Ok(())
    }

    pub fn p_det(&self, node: usize, d: Detector) -> f64 {
        let r = self.row(d);
        if node == 0 {
            r.p_det_a
        } else {
            r.p_det_b
        }
    }

    /// Per-node, per-detector efficiency `ε^k_r = p^k_r / (½ P^k_π)` given the
    /// modeled in-window emission probabilities `[node][V, H]`.
    pub fn efficiencies(&self, window_emission: [[f64; 2]; 2]) -> Result<[[f64; 4]; 2]> {
        let mut eps = [[0.0; 4]; 2];
        for (k, row) in eps.iter_mut().enumerate() {
            for d in Detector::ALL {
                let p = window_emission[k][pol_index(d.polarization())];
                if !(p > 0.0) {
                    return Err(Error::Degenerate(format!("node {k} emits no {:?} photon in the window", d.polarization())));
                }
                row[d.index()] = (self.p_det(k, d) / (0.5 * p)).min(1.0);
            }
        }
        Ok(eps)
    }

    /// Least-squares rank-one factorization `ε^k_r ≈ a_k b_r` in log space,
    /// normalized so that `max_r b_r = 1`. Returns `(a, b)`.
    pub fn efficiency_factors(eps: &[[f64; 4]; 2]) -> Result<([f64; 2], [f64; 4])> {
        let mut logs = [[0.0; 4]; 2];
        for k in 0..2 {
            for r in 0..4 {
                if !(eps[k][r] > 0.0) {
                    return Err(Error::Degenerate("zero detection efficiency".into()));
                }
                logs[k][r] = eps[k][r].ln();
            }
        }
        let mean: f64 = logs.iter().flatten().sum::<f64>() / 8.0;
        let row = |k: usize| logs[k].iter().sum::<f64>() / 4.0 - mean;
        let col = |r: usize| (logs[0][r] + logs[1][r]) / 2.0 - mean;
        let mut b = [0.0; 4];
        for (r, x) in b.iter_mut().enumerate() {
            *x = col(r);
        }
        let shift = b.iter().cloned().fold(f64::MIN, f64::max);
        let a = [(mean + row(0) + shift).exp(), (mean + row(1) + shift).exp()];
        Ok((a, b.map(|x| (x - shift).exp())))
    }
}

pub(crate) fn pol_index(p: Polarization) -> usize {
    match p {
        Polarization::V => 0,
        Polarization::H => 1,
    }
}

/// Product efficiencies `η_u η_r` of the four opposite-output detector pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEfficiencies {
    pub uv_rh: f64,
    pub uh_rv: f64,
    pub uh_rh: f64,
    pub uv_rv: f64,
}

impl PairEfficiencies {
    pub fn uniform(eta: f64) -> Self {
        PairEfficiencies { uv_rh: eta, uh_rv: eta, uh_rh: eta, uv_rv: eta }
    }

    /// From per-detector efficiencies `η_r` indexed like [`Detector::ALL`].
    pub fn from_detectors(eta: &[f64; 4]) -> Self {
        let e = |p, q| eta[Detector::at(p, q).index()];
        use Polarization::{H, V};
        use Port::{R, U};
        PairEfficiencies {
            uv_rh: e(U, V) * e(R, H),
            uh_rv: e(U, H) * e(R, V),
            uh_rh: e(U, H) * e(R, H),
            uv_rv: e(U, V) * e(R, V),
        }
    }
}

/// Emission kernels `K = 2κG` of one node; `K(t,t)` is the photon emission density.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeKernels {
    pub v: CoherenceKernel,
    pub h: CoherenceKernel,
}

impl NodeKernels {
    pub fn grid(&self) -> KernelGrid {
        self.v.grid
    }

    pub fn envelopes(&self) -> (Vec<f64>, Vec<f64>) {
        (self.v.diagonal(), self.h.diagonal())
    }

    /// Emission probability of each polarization with both times in `cells`.
    pub fn probability_in(&self, cells: Range<usize>) -> (f64, f64) {
        let h = self.grid().h;
        let sum = |k: &CoherenceKernel| cells.clone().map(|m| k.g[(m, m)].re).sum::<f64>() * h;
        (sum(&self.v), sum(&self.h))
    }

    pub fn weighted_sum(parts: &[NodeKernels], weights: &[f64]) -> Result<NodeKernels> {
        let v: Vec<_> = parts.iter().map(|k| k.v.clone()).collect();
        let h: Vec<_> = parts.iter().map(|k| k.h.clone()).collect();
        Ok(NodeKernels {
            v: CoherenceKernel::weighted_sum(&v, weights)?,
            h: CoherenceKernel::weighted_sum(&h, weights)?,
        })
    }
}

/// Two-time coincidence densities on the kernel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CoincidenceRates {
    pub grid: KernelGrid,
    pub det_vh: DMatrix<f64>,
    pub det_hv: DMatrix<f64>,
    pub det_hh: DMatrix<f64>,
    pub det_vv: DMatrix<f64>,
}

/// `det_vh` (u_V, r_H) and `det_hv` (u_H, r_V); photons of orthogonal polarization do not interfere.
pub fn orthogonal_coincidence(a: &NodeKernels, b: &NodeKernels, eta: &PairEfficiencies) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_grids(a, b)?;
    let n = a.grid().n;
    let (av, ah) = a.envelopes();
    let (bv, bh) = b.envelopes();
    let vh = DMatrix::from_fn(n, n, |x, y| eta.uv_rh / 4.0 * (ah[y] * bv[x] + av[x] * bh[y]));
    let hv = DMatrix::from_fn(n, n, |x, y| eta.uh_rv / 4.0 * (ah[x] * bv[y] + av[y] * bh[x]));
    Ok((vh, hv))
}

fn check_grids(a: &NodeKernels, b: &NodeKernels) -> Result<()> {
    if a.v.grid != b.v.grid || a.h.grid != a.v.grid || b.h.grid != b.v.grid {
        return Err(Error::InvalidParameter("node kernels live on different grids".into()));
    }
    Ok(())
}

fn bunching(ka: &CoherenceKernel, kb: &CoherenceKernel, eta: f64) -> Result<DMatrix<f64>> {
    let n = ka.grid.n;
    let scale = ka.g.camax() * kb.g.camax() * eta;
    let mut out = DMatrix::zeros(n, n);
    for y in 0..n {
        for x in 0..n {
            let direct = ka.g[(x, x)].re * kb.g[(y, y)].re + ka.g[(y, y)].re * kb.g[(x, x)].re;
            let cross = 2.0 * (ka.g[(x, y)] * kb.g[(y, x)]).re;
            let r = eta / 4.0 * (direct - cross);
            if r < -1e-12 * scale {
                return Err(Error::Consistency(format!("negative coincidence density {r:e} at cells ({x}, {y})")));
            }
            out[(x, y)] = r.max(0.0);
        }
    }
    Ok(out)
}

/// `det_hh` and `det_vv` from the factorized double scattering-time sum.
pub fn parallel_coincidence(a: &NodeKernels, b: &NodeKernels, eta: &PairEfficiencies) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_grids(a, b)?;
    Ok((bunching(&a.h, &b.h, eta.uh_rh)?, bunching(&a.v, &b.v, eta.uv_rv)?))
}

pub fn coincidence_rates(a: &NodeKernels, b: &NodeKernels, eta: &PairEfficiencies) -> Result<CoincidenceRates> {
    let (det_vh, det_hv) = orthogonal_coincidence(a, b, eta)?;
    let (det_hh, det_vv) = parallel_coincidence(a, b, eta)?;
    Ok(CoincidenceRates { grid: a.grid(), det_vh, det_hv, det_hh, det_vv })
}

/// CDF of the difference of two independent uniforms on `[0, h]`.
fn triangle_cdf(x: f64, h: f64) -> f64 {
    if x <= -h {
        0.0
    } else if x <= 0.0 {
        (x + h).powi(2) / (2.0 * h * h)
    } else if x < h {
        1.0 - (h - x).powi(2) / (2.0 * h * h)
    } else {
        1.0
    }
}

/// Fraction of a cell pair separated by `d` with `|t1 − t2| ≤ t_window`.
fn band_fraction(d: f64, t_window: f64, h: f64) -> f64 {
    triangle_cdf(t_window - d, h) - triangle_cdf(-t_window - d, h)
}

/// Sums of a rate matrix along diagonals `k = x − y`, restricted to `cells × cells`;
/// index `k + (len − 1)`.
pub fn diagonal_sums(rate: &DMatrix<f64>, cells: Range<usize>) -> Vec<f64> {
    let len = cells.len();
    let mut out = vec![0.0; (2 * len).saturating_sub(1)];
    for (j, y) in cells.clone().enumerate() {
        for (i, x) in cells.clone().enumerate() {
            out[i + len - 1 - j] += rate[(x, y)];
        }
    }
    out
}

/// `∫_{|t1−t2| ≤ T} det` from diagonal sums, exact for piecewise-constant cells.
pub fn integrate_band(diag: &[f64], h: f64, t_window: f64) -> f64 {
    if t_window <= 0.0 {
        return 0.0;
    }
    let len = (diag.len() + 1) / 2;
    diag.iter()
        .enumerate()
        .map(|(i, s)| {
            let d = (i as f64 - (len as f64 - 1.0)) * h;
            s * band_fraction(d, t_window, h)
        })
        .sum::<f64>()
        * h
        * h
}

/// `Det(T)` for one rate matrix with both click times restricted to `cells`.
pub fn integrated_coincidence(rate: &DMatrix<f64>, grid: &KernelGrid, t_window: f64, cells: Range<usize>) -> f64 {
    integrate_band(&diagonal_sums(rate, cells), grid.h, t_window)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetSums {
    pub vh: f64,
    pub hv: f64,
    pub hh: f64,
    pub vv: f64,
}

impl DetSums {
    pub fn visibility(&self) -> Result<f64> {
        let den = self.vh + self.hv;
        if !(den > 0.0) {
            return Err(Error::UndefinedVisibility("no orthogonal-polarization coincidences".into()));
        }
        Ok(1.0 - (self.hh + self.vv) / den)
    }

    pub fn add_scaled(&mut self, o: &DetSums, w: f64) {
        self.vh += w * o.vh;
        self.hv += w * o.hv;
        self.hh += w * o.hh;
        self.vv += w * o.vv;
    }
}

/// Diagonal sums of all four rate classes, reusable across a T sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct BandProfile {
    pub h: f64,
    pub vh: Vec<f64>,
    pub hv: Vec<f64>,
    pub hh: Vec<f64>,
    pub vv: Vec<f64>,
}

impl BandProfile {
    pub fn new(rates: &CoincidenceRates, cells: Range<usize>) -> Self {
        BandProfile {
            h: rates.grid.h,
            vh: diagonal_sums(&rates.det_vh, cells.clone()),
            hv: diagonal_sums(&rates.det_hv, cells.clone()),
            hh: diagonal_sums(&rates.det_hh, cells.clone()),
            vv: diagonal_sums(&rates.det_vv, cells),
        }
    }

    pub fn det(&self, t_window: f64) -> DetSums {
        DetSums {
            vh: integrate_band(&self.vh, self.h, t_window),
            hv: integrate_band(&self.hv, self.h, t_window),
            hh: integrate_band(&self.hh, self.h, t_window),
            vv: integrate_band(&self.vv, self.h, t_window),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    Full,
    /// `γss = γclj = 0` on both nodes.
    NoTechnical,
    /// Additionally no S↔P scattering: `P̃_s = δ(s)`.
    Pure,
}

impl VisibilityMode {
    pub const ALL: [VisibilityMode; 3] = [VisibilityMode::Full, VisibilityMode::NoTechnical, VisibilityMode::Pure];

    pub fn label(self) -> &'static str {
        match self {
            VisibilityMode::Full => "full",
            VisibilityMode::NoTechnical => "no_technical",
            VisibilityMode::Pure => "pure",
        }
    }

    pub fn params(self, p: &NodeParams) -> NodeParams {
        match self {
            VisibilityMode::Full => p.clone(),
            _ => p.without_technical_noise(),
        }
    }
}

/// Numerical settings shared by all kernel builds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub dt: f64,
    pub pulse_end: f64,
    pub t_end: f64,
    pub kernel_step: f64,
    pub s_stride: usize,
    /// Jitter offsets per side of zero.
    pub jitter_k_max: usize,
    /// Offsets span `±jitter_span·γclj`.
    pub jitter_span: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            dt: crate::dynamics::DEFAULT_DT,
            pulse_end: crate::dynamics::DEFAULT_PULSE,
            t_end: crate::dynamics::DEFAULT_T_END,
            kernel_step: 0.25e-6,
            s_stride: 2,
            jitter_k_max: 6,
            jitter_span: 3.0,
        }
    }
}

impl ModelSettings {
    pub fn kernel_grid(&self) -> Result<KernelGrid> {
        KernelGrid::new(0.0, self.t_end, self.kernel_step)
    }

    pub fn schedule(&self, p: &NodeParams) -> Result<Schedule> {
        Schedule::new(p, self.t_end, self.dt, self.pulse_end)
    }

    pub fn ensemble(&self, p: &NodeParams) -> Result<JitterEnsemble> {
        jitter_ensemble(p.gamma_clj, self.jitter_k_max, self.jitter_span)
    }
}

/// Emission kernels `2κG` of one node at one cavity offset.
pub fn emission_kernels(p: &NodeParams, settings: &ModelSettings, delta_omega: f64, include_scattering: bool) -> Result<NodeKernels> {
    let sched = settings.schedule(p)?;
    let kg = settings.kernel_grid()?;
    let em = restricted_emission(p, &sched, delta_omega)?;
    let opts = KernelOptions { s_stride: settings.s_stride, include_scattering, ..Default::default() };
    let (gv, gh) = node_kernels(p, &sched, delta_omega, &em.p_s, &kg, &opts)?;
    let f = 2.0 * p.kappa;
    Ok(NodeKernels { v: gv.scaled(f), h: gh.scaled(f) })
}

/// Kernels for every jitter offset of a node, with their weights.
pub fn jitter_kernels(
    p: &NodeParams,
    settings: &ModelSettings,
    include_scattering: bool,
) -> Result<(Vec<NodeKernels>, Vec<f64>)> {
    let ens = settings.ensemble(p)?;
    let kernels = ens
        .offsets
        .par_iter()
        .map(|&dw| emission_kernels(p, settings, dw, include_scattering))
        .collect::<Result<Vec<_>>>()?;
    Ok((kernels, ens.weights.clone()))
}

/// Jitter-averaged emission kernels. Coincidence rates are bilinear in the
/// kernels of the two independent nodes, so averaging the kernels is the same
/// as averaging the detection probabilities.
pub fn averaged_kernels(p: &NodeParams, settings: &ModelSettings, include_scattering: bool) -> Result<NodeKernels> {
    let (k, w) = jitter_kernels(p, settings, include_scattering)?;
    NodeKernels::weighted_sum(&k, &w)
}

/// Two-node interference model for one visibility mode.
#[derive(Clone, Debug)]
pub struct TwoNodeModel {
    pub mode: VisibilityMode,
    pub node_a: NodeKernels,
    pub node_b: NodeKernels,
    /// Coincidence densities with unit pair efficiencies.
    pub rates: CoincidenceRates,
    pub window_cells: Range<usize>,
}

impl TwoNodeModel {
    pub fn build(a: &NodeParams, b: &NodeParams, mode: VisibilityMode, settings: &ModelSettings, window: (f64, f64)) -> Result<Self> {
        let scatter = mode != VisibilityMode::Pure;
        let node_a = averaged_kernels(&mode.params(a), settings, scatter)?;
        let node_b = averaged_kernels(&mode.params(b), settings, scatter)?;
        Self::from_kernels(mode, node_a, node_b, window)
    }

    pub fn from_kernels(mode: VisibilityMode, node_a: NodeKernels, node_b: NodeKernels, window: (f64, f64)) -> Result<Self> {
        let rates = coincidence_rates(&node_a, &node_b, &PairEfficiencies::uniform(1.0))?;
        let window_cells = rates.grid.cells_within(window.0, window.1);
        if window_cells.is_empty() {
            return Err(Error::InvalidParameter("detection window contains no kernel cells".into()));
        }
        Ok(TwoNodeModel { mode, node_a, node_b, rates, window_cells })
    }

    pub fn profile(&self) -> BandProfile {
        BandProfile::new(&self.rates, self.window_cells.clone())
    }

    pub fn visibility(&self, t_list: &[f64]) -> Result<Vec<f64>> {
        let prof = self.profile();
        t_list.iter().map(|&t| prof.det(t).visibility()).collect()
    }

    /// In-window emission probabilities `[node][V, H]`.
    pub fn window_emission(&self) -> [[f64; 2]; 2] {
        let (av, ah) = self.node_a.probability_in(self.window_cells.clone());
        let (bv, bh) = self.node_b.probability_in(self.window_cells.clone());
        [[av, ah], [bv, bh]]
    }

    /// Fraction of the orthogonal-polarization coincidences with `|t1 − t2| ≤ T`.
    pub fn orthogonal_band_fraction(&self, t_window: f64) -> f64 {
        let prof = self.profile();
        let total = prof.det(f64::INFINITY);
        let d = prof.det(t_window);
        let den = total.vh + total.hv;
        if den > 0.0 {
            (d.vh + d.hv) / den
        } else {
            0.0
        }
    }
}

/// `V(T)` for the requested mode, building all kernels from node parameters.
pub fn model_visibility(
    a: &NodeParams,
    b: &NodeParams,
    settings: &ModelSettings,
    t_list: &[f64],
    mode: VisibilityMode,
    window: (f64, f64),
) -> Result<Vec<f64>> {
    TwoNodeModel::build(a, b, mode, settings, window)?.visibility(t_list)
}

/// Default coincidence-window sweep, 0.25 µs to 17.5 µs.
pub fn default_t_sweep() -> Vec<f64> {
    let mut t = vec![0.25e-6, 0.5e-6, 0.75e-6];
    t.extend((1..=17).map(|k| k as f64 * 1e-6));
    t.push(17.5e-6);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> KernelGrid {
        KernelGrid { t0: 0.0, h: 1.0, n }
    }

    /// Kernels `Σ_s w_s a_s a_s†` from explicit amplitudes.
    fn kernel_from(amps: &[Vec<C64>], w: &[f64]) -> CoherenceKernel {
        let n = amps[0].len();
        let g = DMatrix::from_fn(n, n, |i, j| amps.iter().zip(w).map(|(a, w)| a[i] * a[j].conj() * *w).sum());
        CoherenceKernel { grid: grid(n), g }
    }

    fn random_amps(rng: &mut ChaCha8Rng, n_s: usize, n_t: usize) -> Vec<Vec<C64>> {
        (0..n_s)
            .map(|s| {
                (0..n_t)
                    .map(|t| if t < s { c(0.0) } else { C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn beamsplitter_unitary() {
        let b = beamsplitter();
        assert!((b * beamsplitter_inverse() - Matrix2::identity()).camax() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = nalgebra::Vector2::new(C64::new(rng.random(), rng.random()), C64::new(rng.random(), rng.random()));
            assert_relative_eq!((b * x).norm_squared(), x.norm_squared(), epsilon = 1e-14);
        }
        let out = b * nalgebra::Vector2::new(c(1.0), c(0.0));
        assert_relative_eq!(out[0].norm_sqr(), 0.5, epsilon = 1e-15);
        assert_relative_eq!(out[1].norm_sqr(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn factorized_matches_literal_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 20;
        let (amp_a, amp_b) = (random_amps(&mut rng, n, n), random_amps(&mut rng, n, n));
        let wa: Vec<f64> = (0..n).map(|s| if s == 0 { 1.0 } else { rng.random::<f64>() * 0.1 }).collect();
        let wb: Vec<f64> = (0..n).map(|s| if s == 0 { 1.0 } else { rng.random::<f64>() * 0.1 }).collect();
        let ka = NodeKernels { v: kernel_from(&amp_a, &wa), h: kernel_from(&amp_a, &wa) };
        let kb = NodeKernels { v: kernel_from(&amp_b, &wb), h: kernel_from(&amp_b, &wb) };
        let (hh, _) = parallel_coincidence(&ka, &kb, &PairEfficiencies::uniform(1.0)).unwrap();
        let mut worst = 0.0f64;
        for t1 in 0..n {
            for t2 in 0..n {
                let mut lit = 0.0;
                for s in 0..n {
                    for s2 in 0..n {
                        let z = amp_a[s][t1] * amp_b[s2][t2] - amp_a[s][t2] * amp_b[s2][t1];
                        lit += wa[s] * wb[s2] * z.norm_sqr();
                    }
                }
                worst = worst.max((hh[(t1, t2)] - lit / 4.0).abs() / lit.max(1.0));
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn identical_pure_photons_bunch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_amps(&mut rng, 1, 12);
        let k = kernel_from(&a, &[1.0]);
        let nk = NodeKernels { v: k.clone(), h: k };
        let (hh, vv) = parallel_coincidence(&nk, &nk, &PairEfficiencies::uniform(1.0)).unwrap();
        assert!(hh.amax() < 1e-10 && vv.amax() < 1e-10);
        let r = coincidence_rates(&nk, &nk, &PairEfficiencies::uniform(1.0)).unwrap();
        let prof = BandProfile::new(&r, 0..12);
        for t in [0.5, 1.0, 3.0, 20.0] {
            assert_relative_eq!(prof.det(t).visibility().unwrap(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn disjoint_supports_have_no_cross_term() {
        let n = 10;
        let a: Vec<C64> = (0..n).map(|t| if t < 5 { c(0.3) } else { c(0.0) }).collect();
        let b: Vec<C64> = (0..n).map(|t| if t >= 5 { c(0.2) } else { c(0.0) }).collect();
        let ka = NodeKernels { v: kernel_from(&[a.clone()], &[1.0]), h: kernel_from(&[a], &[1.0]) };
        let kb = NodeKernels { v: kernel_from(&[b.clone()], &[1.0]), h: kernel_from(&[b], &[1.0]) };
        let (hh, _) = parallel_coincidence(&ka, &kb, &PairEfficiencies::uniform(1.0)).unwrap();
        let (pa, pb) = (ka.h.diagonal(), kb.h.diagonal());
        for x in 0..n {
            for y in 0..n {
                assert_relative_eq!(hh[(x, y)], (pa[x] * pb[y] + pa[y] * pb[x]) / 4.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn orthogonal_integral_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let mk = |rng: &mut ChaCha8Rng| {
            let a = random_amps(rng, 2, n);
            kernel_from(&a, &[1.0, 0.3])
        };
        let ka = NodeKernels { v: mk(&mut rng), h: mk(&mut rng) };
        let kb = NodeKernels { v: mk(&mut rng), h: mk(&mut rng) };
        let eta = PairEfficiencies::uniform(0.7);
        let (vh, hv) = orthogonal_coincidence(&ka, &kb, &eta).unwrap();
        let sum = |v: Vec<f64>| v.iter().sum::<f64>();
        let (pav, pah) = (sum(ka.v.diagonal()), sum(ka.h.diagonal()));
        let (pbv, pbh) = (sum(kb.v.diagonal()), sum(kb.h.diagonal()));
        assert_relative_eq!(vh.sum(), 0.7 / 4.0 * (pah * pbv + pav * pbh), max_relative = 1e-12);
        // Node exchange leaves both densities unchanged; exchanging the times maps vh onto hv.
        let (vh2, hv2) = orthogonal_coincidence(&kb, &ka, &eta).unwrap();
        assert!((&vh2 - &vh).amax() <= 1e-15 * vh.amax());
        assert!((&hv2 - &hv).amax() <= 1e-15 * hv.amax());
        assert!((vh.transpose() - &hv).amax() <= 1e-15 * hv.amax());
        let only_h = NodeKernels { v: ka.v.scaled(0.0), h: ka.h.clone() };
        let only_v = NodeKernels { v: kb.v.clone(), h: kb.h.scaled(0.0) };
        let (vh3, _) = orthogonal_coincidence(&only_h, &only_v, &eta).unwrap();
        let (ph, pv) = (only_h.h.diagonal(), only_v.v.diagonal());
        for x in 0..n {
            for y in 0..n {
                assert_relative_eq!(vh3[(x, y)], 0.7 / 4.0 * ph[y] * pv[x], epsilon = 1e-15);
            }
        }
        assert!(hv.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn band_integral_limits_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 16;
        let rate = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
        let g = KernelGrid { t0: 0.0, h: 0.5, n };
        assert_eq!(integrated_coincidence(&rate, &g, 0.0, 0..n), 0.0);
        let full = rate.sum() * 0.25;
        assert_relative_eq!(integrated_coincidence(&rate, &g, 100.0, 0..n), full, max_relative = 1e-14);
        let mut prev = 0.0;
        for k in 1..40 {
            let d = integrated_coincidence(&rate, &g, k as f64 * 0.2, 0..n);
            assert!(d >= prev - 1e-15);
            prev = d;
        }
    }

    #[test]
    fn band_integral_matches_fine_sampling() {
        // Piecewise-constant cells sampled on a much finer grid.
        let rate = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.5, 0.3, 4.0, 1.5, 2.5, 0.7, 3.0]);
        let g = KernelGrid { t0: 0.0, h: 1.0, n: 3 };
        let t = 0.8;
        let m = 600;
        let mut brute = 0.0;
        for i in 0..3 * m {
            for j in 0..3 * m {
                let (x, y) = ((i as f64 + 0.5) / m as f64, (j as f64 + 0.5) / m as f64);
                if (x - y).abs() <= t {
                    brute += rate[(i / m, j / m)];
                }
            }
        }
        brute /= (m * m) as f64;
        assert_relative_eq!(integrated_coincidence(&rate, &g, t, 0..3), brute, max_relative = 2e-3);
    }

    #[test]
    fn equal_efficiencies_cancel_in_visibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10;
        let mk = |rng: &mut ChaCha8Rng| kernel_from(&random_amps(rng, 3, n), &[1.0, 0.2, 0.1]);
        let ka = NodeKernels { v: mk(&mut rng), h: mk(&mut rng) };
        let kb = NodeKernels { v: mk(&mut rng), h: mk(&mut rng) };
        let v = |eta: f64| {
            let r = coincidence_rates(&ka, &kb, &PairEfficiencies::uniform(eta)).unwrap();
            BandProfile::new(&r, 0..n).det(3.0).visibility().unwrap()
        };
        assert_relative_eq!(v(1.0), v(0.013), max_relative = 1e-12);
    }

    #[test]
    fn zero_denominator_is_error() {
        assert!(matches!(DetSums::default().visibility(), Err(Error::UndefinedVisibility(_))));
    }

    #[test]
    fn detector_table_consistent() {
        let t = DetectorTable::default();
        t.validate().unwrap();
        let pb: f64 = Detector::ALL.iter().map(|&d| t.p_det(1, d)).sum();
        assert_relative_eq!(pb, 0.097, epsilon = 1e-12);
        let mut bad = t.clone();
        bad.rows[0].p_bg_det = 0.01;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn detector_assignment_is_a_bijection() {
        for d in Detector::ALL {
            assert_eq!(Detector::at(d.port(), d.polarization()), d);
            assert_eq!(Detector::from_label(d.label()), Some(d));
        }
        for (x, y) in PSI_PLUS_PAIRS.iter().chain(&PSI_MINUS_PAIRS) {
            assert_ne!(x.polarization(), y.polarization());
        }
        for (x, y) in PARALLEL_PAIRS {
            assert_eq!(x.polarization(), y.polarization());
            assert_ne!(x.port(), y.port());
        }
    }

    #[test]
    fn rank_one_factors_recover_exact_product() {
        let a = [0.3, 0.9];
        let b = [0.5, 0.7, 1.0, 0.8];
        let eps = [b.map(|x| a[0] * x), b.map(|x| a[1] * x)];
        let (fa, fb) = DetectorTable::efficiency_factors(&eps).unwrap();
        for k in 0..2 {
            for r in 0..4 {
                assert_relative_eq!(fa[k] * fb[r], eps[k][r], max_relative = 1e-12);
            }
        }
        assert_relative_eq!(fb[2], 1.0);
    }
}
