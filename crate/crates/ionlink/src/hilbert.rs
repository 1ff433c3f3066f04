//! Six-level ion–cavity state space, node parameters and operator builders.
//!
//! Basis order is fixed to `(S0, P0, D1, D'1, D0, D'0)`: ion level followed by
//! cavity photon number. The first four states span the emitting manifold; the
//! last two hold the ion after the photon has left the cavity.

use nalgebra::{Complex, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type Mat6 = SMatrix<C64, 6, 6>;
pub type Vec6 = SVector<C64, 6>;
pub type Mat4 = SMatrix<C64, 4, 4>;
pub type Vec4 = SVector<C64, 4>;

pub const S0: usize = 0;
pub const P0: usize = 1;
pub const D1: usize = 2;
pub const DP1: usize = 3;
pub const D0: usize = 4;
pub const DP0: usize = 5;

/// Conversion factor from MHz (pre-2π) to rad/s.
pub const MHZ: f64 = 2.0 * PI * 1e6;

pub(crate) fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Physical rates and detunings of one ion–cavity node, in rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub omega1: f64,
    pub omega2: f64,
    pub g1: f64,
    pub g2: f64,
    /// Calibrated (Stark-corrected) laser detunings Δ1', Δ2'.
    pub delta1: f64,
    pub delta2: f64,
    pub deltac1: f64,
    pub deltac2: f64,
    pub kappa: f64,
    pub gamma_sp: f64,
    pub gamma_dp: f64,
    pub gamma_dprime_p: f64,
    pub gamma_ss: f64,
    pub gamma_clj: f64,
    pub eta: f64,
}

impl NodeParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("g1", self.g1),
            ("g2", self.g2),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("deltac1", self.deltac1),
            ("deltac2", self.deltac2),
            ("kappa", self.kappa),
            ("gamma_sp", self.gamma_sp),
            ("gamma_dp", self.gamma_dp),
            ("gamma_dprime_p", self.gamma_dprime_p),
            ("gamma_ss", self.gamma_ss),
            ("gamma_clj", self.gamma_clj),
            ("eta", self.eta),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} is not finite")));
            }
        }
        let nonneg = [
            ("kappa", self.kappa),
            ("gamma_sp", self.gamma_sp),
            ("gamma_dp", self.gamma_dp),
            ("gamma_dprime_p", self.gamma_dprime_p),
            ("gamma_ss", self.gamma_ss),
            ("gamma_clj", self.gamma_clj),
            ("eta", self.eta),
        ];
        for (name, v) in nonneg {
            if v < 0.0 {
                return Err(Error::InvalidParameter(format!("{name} = {v} is negative")));
            }
        }
        if self.eta > 1.0 {
            return Err(Error::InvalidParameter(format!("eta = {} exceeds 1", self.eta)));
        }
        Ok(())
    }

    /// Angular frequency of the bichromatic beat, Δ2' − Δ1'.
    pub fn beat(&self) -> f64 {
        self.delta2 - self.delta1
    }

    /// Copy with the technical noise sources (laser dephasing, cavity jitter) removed.
    pub fn without_technical_noise(&self) -> NodeParams {
        NodeParams { gamma_ss: 0.0, gamma_clj: 0.0, ..self.clone() }
    }
}

/// Splits a bare coupling `g` into the two cavity couplings using dimensionless
/// transition-strength × polarization-projection weights.
pub fn couplings_from_weights(g: f64, w1: f64, w2: f64) -> (f64, f64) {
    (g * w1, g * w2)
}

/// AC Stark shift δs = Ω1²/(4Δ1) + Ω2²/(4Δ2) evaluated on the stored detunings.
pub fn stark_shift(p: &NodeParams) -> Result<f64> {
    stark_from(p.omega1, p.omega2, p.delta1, p.delta2)
}

fn stark_from(o1: f64, o2: f64, d1: f64, d2: f64) -> Result<f64> {
    if d1 == 0.0 || d2 == 0.0 {
        return Err(Error::Domain("Stark shift needs nonzero detunings".into()));
    }
    Ok(o1 * o1 / (4.0 * d1) + o2 * o2 / (4.0 * d2))
}

/// Noise channel labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// P → S spontaneous decay (recycles into the emitting manifold).
    Sp,
    /// Laser dephasing on S (recycles).
    Ss,
    /// P → D decay outside the cavity mode.
    Dp,
    /// P → D' decay outside the cavity mode.
    DpPrime,
    /// Cavity loss of a V photon, |D,1⟩ → |D,0⟩.
    CavityV,
    /// Cavity loss of an H photon, |D',1⟩ → |D',0⟩.
    CavityH,
}

impl Channel {
    pub const ALL: [Channel; 6] =
        [Channel::Sp, Channel::Ss, Channel::Dp, Channel::DpPrime, Channel::CavityV, Channel::CavityH];

    pub fn label(self) -> &'static str {
        match self {
            Channel::Sp => "sp",
            Channel::Ss => "ss",
            Channel::Dp => "dp",
            Channel::DpPrime => "d'p",
            Channel::CavityV => "4",
            Channel::CavityH => "5",
        }
    }

    /// Channels that return the system to |S,0⟩ and keep it in the emitting manifold.
    pub fn recycles(self) -> bool {
        matches!(self, Channel::Sp | Channel::Ss)
    }
}

/// A single-entry jump operator `amp · |to⟩⟨from|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpOp {
    pub channel: Channel,
    pub amp: f64,
    pub to: usize,
    pub from: usize,
}

impl JumpOp {
    pub fn matrix(&self) -> Mat6 {
        let mut m = Mat6::zeros();
        m[(self.to, self.from)] = c(self.amp);
        m
    }

    /// Rate of the channel, i.e. the diagonal entry of L†L.
    pub fn rate(&self) -> f64 {
        self.amp * self.amp
    }
}

/// Hamiltonian and noise operators of one node for a fixed cavity offset δω.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub params: NodeParams,
    pub delta_omega: f64,
    pub stark: f64,
    pub jumps: [JumpOp; 6],
    diag: [f64; 6],
}

pub fn build_operators(p: &NodeParams, delta_omega: f64) -> Result<OperatorSet> {
    p.validate()?;
    let ds = stark_shift(p)?.abs();
    let dc1 = p.deltac1 + delta_omega;
    let dc2 = p.deltac2 + delta_omega;
    let e1 = dc1 - p.delta1 - ds;
    let e2 = dc2 - p.delta1 - ds;
    let diag = [0.0, -(p.delta1 + ds), e1, e2, e1, e2];
    let jump = |channel, gamma: f64, to, from| JumpOp { channel, amp: (2.0 * gamma).sqrt(), to, from };
    let jumps = [
        jump(Channel::Sp, p.gamma_sp, S0, P0),
        jump(Channel::Ss, p.gamma_ss, S0, S0),
        jump(Channel::Dp, p.gamma_dp, D0, P0),
        jump(Channel::DpPrime, p.gamma_dprime_p, DP0, P0),
        jump(Channel::CavityV, p.kappa, D0, D1),
        jump(Channel::CavityH, p.kappa, DP0, DP1),
    ];
    Ok(OperatorSet { params: p.clone(), delta_omega, stark: ds, jumps, diag })
}

impl OperatorSet {
    /// Diagonal (detuning) part of the Hamiltonian.
    pub fn diagonal(&self) -> [f64; 6] {
        self.diag
    }

    /// S0↔P0 drive amplitude ⟨S|H|P⟩ = (Ω1 + Ω2 e^{iωt})/2.
    pub fn drive(&self, t: f64) -> C64 {
        let p = &self.params;
        (c(p.omega1) + C64::from_polar(p.omega2, p.beat() * t)) * 0.5
    }

    /// Full six-level Hamiltonian H_t = H_t^C + H_E (units of rad/s).
    pub fn hamiltonian_at(&self, t: f64) -> Mat6 {
        let mut h = Mat6::zeros();
        for (i, d) in self.diag.iter().enumerate() {
            h[(i, i)] = c(*d);
        }
        let w = self.drive(t);
        h[(S0, P0)] = w;
        h[(P0, S0)] = w.conj();
        let p = &self.params;
        h[(D1, P0)] = c(p.g1);
        h[(P0, D1)] = c(p.g1);
        h[(DP1, P0)] = c(p.g2);
        h[(P0, DP1)] = c(p.g2);
        h
    }

    pub fn noise_ops(&self) -> Vec<(Channel, Mat6)> {
        self.jumps.iter().map(|j| (j.channel, j.matrix())).collect()
    }

    /// Emitting-manifold Hamiltonian split as `H0 + e^{iωt} Hp + e^{-iωt} Hp†`,
    /// with `drive_on = false` removing both laser tones.
    pub fn emitting_parts(&self, drive_on: bool) -> (Mat4, Mat4) {
        let p = &self.params;
        let mut h0 = Mat4::zeros();
        for i in 0..4 {
            h0[(i, i)] = c(self.diag[i]);
        }
        h0[(D1, P0)] = c(p.g1);
        h0[(P0, D1)] = c(p.g1);
        h0[(DP1, P0)] = c(p.g2);
        h0[(P0, DP1)] = c(p.g2);
        let mut hp = Mat4::zeros();
        if drive_on {
            h0[(S0, P0)] = c(0.5 * p.omega1);
            h0[(P0, S0)] = c(0.5 * p.omega1);
            hp[(S0, P0)] = c(0.5 * p.omega2);
        }
        (h0, hp)
    }

    /// Diagonal of Σ L†L restricted to the emitting manifold.
    pub fn emitting_loss_diag(&self) -> [f64; 4] {
        let mut k = [0.0; 4];
        for j in &self.jumps {
            if j.from < 4 {
                k[j.from] += j.rate();
            }
        }
        k
    }

    /// Phase rate of the emission amplitude frame for the V and H photon,
    /// `Δc + δω − Δ1' − |δs|`.
    pub fn frame_rates(&self) -> (f64, f64) {
        (self.diag[D1], self.diag[DP1])
    }
}

/// State on the six-level basis, pure or mixed.
#[derive(Clone, Debug, PartialEq)]
pub enum IonCavityState {
    Pure(Vec6),
    Mixed(Mat6),
}

impl IonCavityState {
    pub fn ground() -> Self {
        let mut v = Vec6::zeros();
        v[S0] = c(1.0);
        IonCavityState::Pure(v)
    }

    pub fn density(&self) -> Mat6 {
        match self {
            IonCavityState::Pure(v) => v * v.adjoint(),
            IonCavityState::Mixed(m) => *m,
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            IonCavityState::Pure(v) => v.norm_squared(),
            IonCavityState::Mixed(m) => m.trace().re,
        }
    }

    pub fn population(&self, i: usize) -> f64 {
        match self {
            IonCavityState::Pure(v) => v[i].norm_sqr(),
            IonCavityState::Mixed(m) => m[(i, i)].re,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            IonCavityState::Pure(v) => {
                if v.norm_squared() > 1.0 + 1e-10 {
                    return Err(Error::Consistency("pure state norm exceeds 1".into()));
                }
            }
            IonCavityState::Mixed(m) => {
                let herm = (m - m.adjoint()).camax();
                if herm > 1e-10 {
                    return Err(Error::Consistency(format!("state not Hermitian ({herm:.2e})")));
                }
                if m.trace().re > 1.0 + 1e-10 {
                    return Err(Error::Consistency("trace exceeds 1".into()));
                }
                let eig = m.symmetric_eigenvalues();
                if eig.iter().any(|&e| e < -1e-10) {
                    return Err(Error::Consistency("negative eigenvalue".into()));
                }
            }
        }
        Ok(())
    }
}

/// How the table detunings are to be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetuningConvention {
    /// Values are the calibrated detunings Δ1', Δ2'.
    #[default]
    Primed,
    /// Values are the bare detunings Δ1, Δ2.
    Unprimed,
}

/// Node description in table units (MHz, not multiplied by 2π).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    #[serde(default)]
    pub name: String,
    pub omega1_mhz: f64,
    pub omega2_mhz: f64,
    pub g_mhz: f64,
    #[serde(default = "unit_weights")]
    pub g_weights: [f64; 2],
    pub delta1_mhz: f64,
    pub delta2_mhz: f64,
    #[serde(default)]
    pub detuning_convention: DetuningConvention,
    /// Cavity detunings; when absent the cavity is placed on the Stark-shifted
    /// Raman resonance of each tone.
    #[serde(default)]
    pub deltac1_mhz: Option<f64>,
    #[serde(default)]
    pub deltac2_mhz: Option<f64>,
    pub kappa_mhz: f64,
    pub gamma_sp_mhz: f64,
    pub gamma_dp_total_mhz: f64,
    #[serde(default = "half")]
    pub dp_fraction: f64,
    pub gamma_ss_mhz: f64,
    pub gamma_clj_mhz: f64,
    pub eta: f64,
}

fn unit_weights() -> [f64; 2] {
    [1.0, 1.0]
}

fn half() -> f64 {
    0.5
}

impl NodeSpec {
    pub fn to_params(&self) -> Result<NodeParams> {
        if !(0.0..=1.0).contains(&self.dp_fraction) {
            return Err(Error::InvalidParameter("dp_fraction must lie in [0, 1]".into()));
        }
        let o1 = self.omega1_mhz * MHZ;
        let o2 = self.omega2_mhz * MHZ;
        let (d1, d2) = match self.detuning_convention {
            DetuningConvention::Primed => (self.delta1_mhz * MHZ, self.delta2_mhz * MHZ),
            DetuningConvention::Unprimed => {
                // Solve Δ' + |δs(Δ')| = Δ by fixed-point iteration.
                let (b1, b2) = (self.delta1_mhz * MHZ, self.delta2_mhz * MHZ);
                let (mut d1, mut d2) = (b1, b2);
                for _ in 0..50 {
                    let ds = stark_from(o1, o2, d1, d2)?.abs();
                    d1 = b1 - ds;
                    d2 = b2 - ds;
                }
                (d1, d2)
            }
        };
        let ds = stark_from(o1, o2, d1, d2)?.abs();
        // Light shift of S from both tones at their full detunings.
        let es = o1 * o1 / (4.0 * (d1 + ds)) + o2 * o2 / (4.0 * (d2 + ds));
        let deltac1 = self.deltac1_mhz.map(|v| v * MHZ).unwrap_or(d1 + ds + es);
        let deltac2 = self.deltac2_mhz.map(|v| v * MHZ).unwrap_or(d2 + ds + es);
        let (g1, g2) = couplings_from_weights(self.g_mhz * MHZ, self.g_weights[0], self.g_weights[1]);
        let dp = self.gamma_dp_total_mhz * MHZ;
        let p = NodeParams {
            omega1: o1,
            omega2: o2,
            g1,
            g2,
            delta1: d1,
            delta2: d2,
            deltac1,
            deltac2,
            kappa: self.kappa_mhz * MHZ,
            gamma_sp: self.gamma_sp_mhz * MHZ,
            gamma_dp: dp * self.dp_fraction,
            gamma_dprime_p: dp * (1.0 - self.dp_fraction),
            gamma_ss: self.gamma_ss_mhz * MHZ,
            gamma_clj: self.gamma_clj_mhz * MHZ,
            eta: self.eta,
        };
        p.validate()?;
        Ok(p)
    }
}

const NODE_A_JSON: &str = include_str!("../presets/nodeA.json");
const NODE_B_JSON: &str = include_str!("../presets/nodeB.json");
/// JSON schema documenting the node description format.
pub const NODE_SCHEMA_JSON: &str = include_str!("../presets/schema.json");

pub fn preset(name: &str) -> Result<NodeSpec> {
    let text = match name {
        "nodeA" | "A" | "a" => NODE_A_JSON,
        "nodeB" | "B" | "b" => NODE_B_JSON,
        _ => return Err(Error::UnknownPreset(name.to_string())),
    };
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn preset_params(name: &str) -> Result<NodeParams> {
    preset(name)?.to_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample() -> NodeParams {
        preset_params("nodeA").unwrap()
    }

    #[test]
    fn stark_zero_drive() {
        let p = NodeParams { omega1: 0.0, omega2: 0.0, ..sample() };
        assert_eq!(stark_shift(&p).unwrap(), 0.0);
    }

    #[test]
    fn stark_symmetric_drive() {
        let d = 2.0 * PI * 400e6;
        let o = 2.0 * PI * 30e6;
        let p = NodeParams { omega1: o, omega2: o, delta1: d, delta2: d, ..sample() };
        assert_relative_eq!(stark_shift(&p).unwrap(), o * o / (2.0 * d), max_relative = 1e-14);
    }

    #[test]
    fn stark_node_a() {
        let ds = stark_shift(&sample()).unwrap() / MHZ;
        let oracle = 43.8f64.powi(2) / (4.0 * 412.8206) + 30.9f64.powi(2) / (4.0 * 419.8574);
        assert_relative_eq!(ds, oracle, max_relative = 1e-12);
        assert!((ds - 1.730).abs() < 1e-3);
    }

    #[test]
    fn stark_zero_detuning_is_error() {
        let p = NodeParams { delta1: 0.0, ..sample() };
        assert!(matches!(stark_shift(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn stark_sign_flip_invariant() {
        let p = sample();
        let q = NodeParams { omega1: -p.omega1, omega2: -p.omega2, ..p.clone() };
        assert_eq!(stark_shift(&p).unwrap(), stark_shift(&q).unwrap());
    }

    #[test]
    fn zero_couplings_give_diagonal_hamiltonian() {
        let p = NodeParams { omega1: 0.0, omega2: 0.0, g1: 0.0, g2: 0.0, ..sample() };
        let ops = build_operators(&p, 0.0).unwrap();
        for &t in &[0.0, 1.3e-7, 2.2e-5] {
            let h = ops.hamiltonian_at(t);
            for i in 0..6 {
                for j in 0..6 {
                    if i != j {
                        assert_eq!(h[(i, j)], c(0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn beat_period_node_a() {
        let p = sample();
        let period = 2.0 * PI / p.beat();
        assert!((period * 1e6 - 0.1421).abs() < 1e-4);
        let ops = build_operators(&p, 0.0).unwrap();
        let a = ops.drive(3.3e-6);
        let b = ops.drive(3.3e-6 + period);
        assert!((a - b).norm() < 1e-6 * a.norm());
    }

    #[test]
    fn cavity_jump_ops() {
        let p = sample();
        let ops = build_operators(&p, 0.0).unwrap();
        for (ch, m) in ops.noise_ops() {
            assert_eq!(m.iter().filter(|z| z.norm() > 0.0).count() <= 1, true);
            if ch == Channel::CavityV || ch == Channel::CavityH {
                let k = m.adjoint() * m;
                let idx = if ch == Channel::CavityV { D1 } else { DP1 };
                for i in 0..6 {
                    for j in 0..6 {
                        let want = if i == idx && j == idx { 2.0 * p.kappa } else { 0.0 };
                        assert_relative_eq!(k[(i, j)].re, want, max_relative = 1e-14);
                        assert_eq!(k[(i, j)].im, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn unprimed_convention_reproduces_bare_detuning() {
        let mut spec = preset("nodeA").unwrap();
        spec.detuning_convention = DetuningConvention::Unprimed;
        let p = spec.to_params().unwrap();
        let ds = stark_shift(&p).unwrap().abs();
        assert_relative_eq!((p.delta1 + ds) / MHZ, spec.delta1_mhz, max_relative = 1e-12);
        assert_relative_eq!((p.delta2 + ds) / MHZ, spec.delta2_mhz, max_relative = 1e-12);
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("nodeC"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn validation_rejects_bad_eta() {
        let p = NodeParams { eta: 1.5, ..sample() };
        assert!(p.validate().is_err());
        let p = NodeParams { kappa: -1.0, ..sample() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn ground_state_valid() {
        let s = IonCavityState::ground();
        s.validate().unwrap();
        assert_eq!(s.trace(), 1.0);
        IonCavityState::Mixed(s.density()).validate().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn hamiltonian_hermitian(t in 0.0f64..6e-5, dw in -1e6f64..1e6) {
                let ops = build_operators(&sample(), dw).unwrap();
                let h = ops.hamiltonian_at(t);
                let scale = h.camax();
                prop_assert!((h - h.adjoint()).camax() <= 1e-12 * scale);
            }
        }
    }
}
