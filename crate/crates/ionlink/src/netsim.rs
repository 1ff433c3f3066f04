//! Two-node protocol simulation: TTL handshake, photon-generation loop,
//! stochastic detector clicks, and the HOM analysis of click records.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pbsm::{
    pol_index, CoincidenceRates, Detector, DetectorTable, NodeKernels, Polarization, Port, TwoNodeModel, PARALLEL_PAIRS,
    PSI_MINUS_PAIRS, PSI_PLUS_PAIRS,
};

/// 50 mHz on a 10 MHz reference.
pub const DEFAULT_CLOCK_SKEW: f64 = 5e-9;
pub const MAX_SEQUENCE_LENGTH: f64 = 11.9e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HandshakeConfig {
    pub latency_ab: f64,
    pub latency_ba: f64,
    pub processing_a: f64,
    pub processing_b: f64,
    pub clock_skew: f64,
    pub timeout: f64,
}

impl Default for HandshakeConfig {
    /// Installed link: ~1 µs one-way latency and 2 µs per reaction, ~10 µs total.
    fn default() -> Self {
        HandshakeConfig {
            latency_ab: 1e-6,
            latency_ba: 1e-6,
            processing_a: 2e-6,
            processing_b: 2e-6,
            clock_skew: DEFAULT_CLOCK_SKEW,
            timeout: 100e-6,
        }
    }
}

impl HandshakeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("latency_ab", self.latency_ab),
            ("latency_ba", self.latency_ba),
            ("processing_a", self.processing_a),
            ("processing_b", self.processing_b),
            ("clock_skew", self.clock_skew),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {x} must be finite and >= 0")));
            }
        }
        if !(self.timeout > 2.0 * (self.latency_ab + self.latency_ba)) {
            return Err(Error::InvalidParameter("timeout must exceed two round trips".into()));
        }
        Ok(())
    }

    /// Accumulated timing offset between the nodes after `duration`.
    pub fn clock_offset(&self, duration: f64) -> f64 {
        self.clock_skew * duration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Node {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandshakeEvent {
    pub step: usize,
    pub sender: Node,
    pub level_high: bool,
    pub t_sent: f64,
    pub t_received: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandshakeResult {
    pub events: Vec<HandshakeEvent>,
    /// Step 1 transmission to step 4 receipt.
    pub duration: f64,
    /// Loop start times of A and B. B waits one latency so both start together.
    pub loop_start: (f64, f64),
}

/// The four TTL transitions up to the first one not received before the timeout.
pub fn handshake_events(cfg: &HandshakeConfig) -> Vec<HandshakeEvent> {
    let plan = [(Node::A, true), (Node::B, true), (Node::A, false), (Node::B, false)];
    let mut events = Vec::with_capacity(4);
    let mut t = 0.0;
    for (i, &(sender, level_high)) in plan.iter().enumerate() {
        let (latency, processing) = match sender {
            Node::A => (cfg.latency_ab, cfg.processing_a),
            Node::B => (cfg.latency_ba, cfg.processing_b),
        };
        let t_sent = if i == 0 { 0.0 } else { t + processing };
        let t_received = t_sent + latency;
        if t_received > cfg.timeout {
            break;
        }
        events.push(HandshakeEvent { step: i + 1, sender, level_high, t_sent, t_received });
        t = t_received;
    }
    events
}

pub fn run_handshake(cfg: &HandshakeConfig) -> Result<HandshakeResult> {
    cfg.validate()?;
    let events = handshake_events(cfg);
    if events.len() < 4 {
        return Err(Error::HandshakeTimeout { t: cfg.timeout, last_step: events.len() });
    }
    let last = events[3];
    Ok(HandshakeResult { events, duration: last.t_received, loop_start: (last.t_received, last.t_sent + cfg.latency_ba) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePhases {
    pub cooling: f64,
    pub pumping: f64,
    pub raman: f64,
}

impl NodePhases {
    pub fn total(&self) -> f64 {
        self.cooling + self.pumping + self.raman
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub initial_cooling: f64,
    pub node_a: NodePhases,
    /// Node B's wait times fill the remainder of the iteration.
    pub node_b: NodePhases,
    pub iteration: f64,
    pub max_iterations: usize,
    pub detection_window: (f64, f64),
    pub background_window: (f64, f64),
    /// Click records cover `[0, record_length]` from the start of the Raman pulse.
    pub record_length: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            initial_cooling: 1.52e-3,
            node_a: NodePhases { cooling: 63e-6, pumping: 280e-6, raman: 50e-6 },
            node_b: NodePhases { cooling: 60e-6, pumping: 60e-6, raman: 50e-6 },
            iteration: 420e-6,
            max_iterations: 20,
            detection_window: crate::pbsm::DETECTION_WINDOW,
            background_window: crate::pbsm::BACKGROUND_WINDOW,
            record_length: 100e-6,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, ph) in [("node_a", self.node_a), ("node_b", self.node_b)] {
            if [ph.cooling, ph.pumping, ph.raman].iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::InvalidParameter(format!("{name}: negative phase duration")));
            }
            if ph.total() > self.iteration {
                return Err(Error::InvalidParameter(format!("{name}: phases exceed the iteration length")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be positive".into()));
        }
        let (d0, d1) = self.detection_window;
        let (b0, b1) = self.background_window;
        if !(0.0 <= d0 && d0 < d1 && b0 < b1 && b1 <= self.record_length) {
            return Err(Error::InvalidParameter("windows must be ordered and lie inside the record".into()));
        }
        if d0 < b1 && b0 < d1 {
            return Err(Error::InvalidParameter("detection and background windows overlap".into()));
        }
        Ok(())
    }

    /// Node B wait time padding its phases to the iteration length.
    pub fn node_b_wait(&self) -> f64 {
        self.iteration - self.node_b.total()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Photon,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub attempt: u64,
    pub detector: Detector,
    /// Seconds from the start of the Raman pulse.
    pub t: f64,
    pub origin: Option<Origin>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    /// A heralding coincidence ends the loop.
    Herald,
    /// Detections never end the loop.
    Calibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub first_attempt: u64,
    pub iterations: usize,
    pub heralded: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub n_attempts: u64,
    pub blocks: Vec<Block>,
    /// Attempts with a heralding coincidence in the detection window.
    pub heralds: Vec<u64>,
}

/// Per-node emission sampler over the kernel grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct EmissionSampler {
    pub t0: f64,
    pub h: f64,
    /// `[V, H]` total emission probabilities.
    pub p: [f64; 2],
    cdf: [Vec<f64>; 2],
}

impl EmissionSampler {
    /// From emission densities per polarization on cells of width `h`.
    pub fn new(t0: f64, h: f64, envelope_v: &[f64], envelope_h: &[f64]) -> Result<Self> {
        let cdf = |e: &[f64]| -> Result<Vec<f64>> {
            let mut acc = 0.0;
            e.iter()
                .map(|&x| {
                    if !(x >= 0.0) {
                        return Err(Error::InvalidParameter(format!("negative emission density {x}")));
                    }
                    acc += x * h;
                    Ok(acc)
                })
                .collect()
        };
        let (cv, ch) = (cdf(envelope_v)?, cdf(envelope_h)?);
        let p = [cv.last().copied().unwrap_or(0.0), ch.last().copied().unwrap_or(0.0)];
        if p[0] + p[1] > 1.0 + 1e-9 {
            return Err(Error::Consistency(format!("emission probability {} exceeds 1", p[0] + p[1])));
        }
        Ok(EmissionSampler { t0, h, p, cdf: [cv, ch] })
    }

    pub fn from_kernels(k: &NodeKernels) -> Result<Self> {
        let (v, h) = k.envelopes();
        let g = k.grid();
        Self::new(g.t0, g.h, &v, &h)
    }

    /// `(polarization index, cell)` of an emitted photon, if any.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
        let u: f64 = rng.random();
        let pol = if u < self.p[0] {
            0
        } else if u < self.p[0] + self.p[1] {
            1
        } else {
            return None;
        };
        let x = rng.random::<f64>() * self.p[pol];
        let cdf = &self.cdf[pol];
        Some((pol, cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)))
    }

    fn time_in(&self, cell: usize, rng: &mut ChaCha8Rng) -> f64 {
        self.t0 + (cell as f64 + rng.random::<f64>()) * self.h
    }
}

/// Port statistics of two photons of equal polarization emitted in cells `(x, y)` by A and B.
#[derive(Clone, Debug, PartialEq)]
struct Interference {
    /// Probability of opposite outputs.
    opposite: DMatrix<f64>,
    /// Probability that A's photon takes the `u` output given opposite outputs.
    a_to_u: DMatrix<f64>,
}

impl Interference {
    fn new(det: &DMatrix<f64>, env_a: &[f64], env_b: &[f64]) -> Self {
        let n = env_a.len();
        let mut opposite = DMatrix::from_element(n, n, 0.5);
        let mut a_to_u = DMatrix::from_element(n, n, 0.5);
        for y in 0..n {
            for x in 0..n {
                let emitted = env_a[x] * env_b[y] + env_a[y] * env_b[x];
                let opp = det[(x, y)] + det[(y, x)];
                if emitted > 0.0 {
                    opposite[(x, y)] = (opp / emitted).clamp(0.0, 1.0);
                }
                if opp > 0.0 {
                    a_to_u[(x, y)] = det[(x, y)] / opp;
                }
            }
        }
        Interference { opposite, a_to_u }
    }
}

/// Everything needed to draw the clicks of one attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickModel {
    pub nodes: [EmissionSampler; 2],
    /// Detection efficiency `[node][detector]` of a photon reaching that detector.
    pub efficiency: [[f64; 4]; 2],
    pub background_rate: [f64; 4],
    pub record_length: f64,
    interference: Option<[Interference; 2]>,
}

impl ClickModel {
    /// Photons that never interfere (distinguishable emitters).
    pub fn distinguishable(nodes: [EmissionSampler; 2], efficiency: [[f64; 4]; 2], background_rate: [f64; 4], record_length: f64) -> Result<Self> {
        if efficiency.iter().flatten().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidParameter("detection efficiencies must lie in [0, 1]".into()));
        }
        if background_rate.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::InvalidParameter("background rates must be >= 0".into()));
        }
        Ok(ClickModel { nodes, efficiency, background_rate, record_length, interference: None })
    }

    /// Clicks following the two-photon interference of `model`, with
    /// efficiencies `a_k b_r` and the table background rates.
    pub fn from_model(model: &TwoNodeModel, table: &DetectorTable, eff: &NodeEfficiencies, record_length: f64) -> Result<Self> {
        let nodes = [EmissionSampler::from_kernels(&model.node_a)?, EmissionSampler::from_kernels(&model.node_b)?];
        let rates = Detector::ALL.map(|d| table.row(d).background_rate);
        let mut m = Self::distinguishable(nodes, eff.matrix(), rates, record_length)?;
        m.interference = Some(interference_tables(&model.rates, &model.node_a, &model.node_b));
        Ok(m)
    }

    fn draw(&self, attempt: u64, rng: &mut ChaCha8Rng, poisson: &[Option<Poisson<f64>>; 4], out: &mut Vec<ClickEvent>) {
        let first = out.len();
        let a = self.nodes[0].sample(rng);
        let b = self.nodes[1].sample(rng);
        let mut photon = |node: usize, port: Port, pol: usize, t: f64, rng: &mut ChaCha8Rng| {
            let d = Detector::at(port, if pol == 0 { Polarization::V } else { Polarization::H });
            if rng.random::<f64>() < self.efficiency[node][d.index()] {
                out.push(ClickEvent { attempt, detector: d, t, origin: Some(Origin::Photon) });
            }
        };
        let random_port = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { Port::U } else { Port::R };
        match (a, b, &self.interference) {
            (Some((pa, xa)), Some((pb, xb)), Some(tables)) if pa == pb => {
                let tab = &tables[pa];
                let (ta, tb) = (self.nodes[0].time_in(xa, rng), self.nodes[1].time_in(xb, rng));
                let (port_a, port_b) = if rng.random::<f64>() < tab.opposite[(xa, xb)] {
                    if rng.random::<f64>() < tab.a_to_u[(xa, xb)] {
                        (Port::U, Port::R)
                    } else {
                        (Port::R, Port::U)
                    }
                } else {
                    let p = random_port(rng);
                    (p, p)
                };
                photon(0, port_a, pa, ta, rng);
                photon(1, port_b, pb, tb, rng);
            }
            _ => {
                for (k, s) in [a, b].into_iter().enumerate() {
                    if let Some((pol, cell)) = s {
                        let t = self.nodes[k].time_in(cell, rng);
                        let port = random_port(rng);
                        photon(k, port, pol, t, rng);
                    }
                }
            }
        }
        for d in Detector::ALL {
            if let Some(dist) = &poisson[d.index()] {
                let n = dist.sample(rng) as usize;
                for _ in 0..n {
                    let t = rng.random::<f64>() * self.record_length;
                    out.push(ClickEvent { attempt, detector: d, t, origin: Some(Origin::Background) });
                }
            }
        }
        out[first..].sort_by(|x, y| x.t.total_cmp(&y.t));
    }
}

fn interference_tables(rates: &CoincidenceRates, a: &NodeKernels, b: &NodeKernels) -> [Interference; 2] {
    let (av, ah) = a.envelopes();
    let (bv, bh) = b.envelopes();
    [Interference::new(&rates.det_vv, &av, &bv), Interference::new(&rates.det_hh, &ah, &bh)]
}

/// Rank-one detection efficiencies `ε^k_r = a_k b_r`. The detector shape `b`
/// is the log-space fit to the calibration table; each `a_k` reproduces the
/// node's summed in-window detection probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEfficiencies {
    pub a: [f64; 2],
    pub b: [f64; 4],
}

impl NodeEfficiencies {
    pub fn fit(table: &DetectorTable, window_emission: [[f64; 2]; 2]) -> Result<Self> {
        let eps = table.efficiencies(window_emission)?;
        let (_, b) = DetectorTable::efficiency_factors(&eps)?;
        let mut a = [0.0; 2];
        for (k, ak) in a.iter_mut().enumerate() {
            let measured: f64 = Detector::ALL.iter().map(|&d| table.p_det(k, d)).sum();
            let unit: f64 = Detector::ALL
                .iter()
                .map(|&d| 0.5 * window_emission[k][pol_index(d.polarization())] * b[d.index()])
                .sum();
            *ak = measured / unit;
            if !(*ak <= 1.0) {
                return Err(Error::Consistency(format!("node {k} needs detection efficiency {ak} > 1")));
            }
        }
        Ok(NodeEfficiencies { a, b })
    }

    pub fn matrix(&self) -> [[f64; 4]; 2] {
        [self.b.map(|x| self.a[0] * x), self.b.map(|x| self.a[1] * x)]
    }

    /// Modeled in-window detection probabilities `[node][detector]`.
    pub fn detection_probabilities(&self, window_emission: [[f64; 2]; 2]) -> [[f64; 4]; 2] {
        let m = self.matrix();
        let mut out = [[0.0; 4]; 2];
        for k in 0..2 {
            for d in Detector::ALL {
                out[k][d.index()] = 0.5 * window_emission[k][pol_index(d.polarization())] * m[k][d.index()];
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub n_attempts: u64,
    pub seed: u64,
    pub mode: LoopMode,
    /// Attempts per independently seeded chunk; each chunk starts a new block.
    pub chunk: u64,
}

impl SimOptions {
    pub fn new(n_attempts: u64, seed: u64, mode: LoopMode) -> Self {
        SimOptions { n_attempts, seed, mode, chunk: 1 << 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Simulation {
    pub clicks: Vec<ClickEvent>,
    pub log: AttemptLog,
}

pub fn herald_pairs() -> impl Iterator<Item = (Detector, Detector)> {
    PSI_PLUS_PAIRS.into_iter().chain(PSI_MINUS_PAIRS)
}

/// First click time per detector inside `window`, for clicks of one attempt.
fn first_in_window(clicks: &[ClickEvent], window: (f64, f64)) -> [Option<f64>; 4] {
    let mut first = [None; 4];
    for c in clicks {
        if c.t >= window.0 && c.t <= window.1 {
            let slot = &mut first[c.detector.index()];
            if slot.map_or(true, |t| c.t < t) {
                *slot = Some(c.t);
            }
        }
    }
    first
}

fn is_herald(first: &[Option<f64>; 4]) -> bool {
    herald_pairs().any(|(x, y)| first[x.index()].is_some() && first[y.index()].is_some())
}

pub fn simulate_attempts(seq: &SequenceConfig, model: &ClickModel, opts: &SimOptions) -> Result<Simulation> {
    seq.validate()?;
    if opts.chunk == 0 {
        return Err(Error::InvalidParameter("chunk size must be positive".into()));
    }
    let poisson = model.background_rate.map(|r| {
        let mean = r * model.record_length;
        if mean > 0.0 {
            Poisson::new(mean).ok()
        } else {
            None
        }
    });
    let n_chunks = opts.n_attempts.div_ceil(opts.chunk);
    let parts: Vec<Simulation> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(ci);
            let start = ci * opts.chunk;
            let end = (start + opts.chunk).min(opts.n_attempts);
            let mut sim = Simulation::default();
            let mut block: Option<Block> = None;
            for attempt in start..end {
                let b = block.get_or_insert(Block { first_attempt: attempt, iterations: 0, heralded: false });
                let first = sim.clicks.len();
                model.draw(attempt, &mut rng, &poisson, &mut sim.clicks);
                b.iterations += 1;
                let herald = is_herald(&first_in_window(&sim.clicks[first..], seq.detection_window));
                if herald {
                    sim.log.heralds.push(attempt);
                }
                let done = (herald && opts.mode == LoopMode::Herald) || b.iterations == seq.max_iterations;
                if done {
                    b.heralded = herald || b.heralded;
                    sim.log.blocks.push(*b);
                    block = None;
                } else if herald {
                    b.heralded = true;
                }
            }
            if let Some(b) = block {
                sim.log.blocks.push(b);
            }
            sim.log.n_attempts = end - start;
            sim
        })
        .collect();
    let mut out = Simulation::default();
    for p in parts {
        out.clicks.extend(p.clicks);
        out.log.blocks.extend(p.log.blocks);
        out.log.heralds.extend(p.log.heralds);
        out.log.n_attempts += p.log.n_attempts;
    }
    Ok(out)
}

/// Heralding coincidences per attempt, recomputed from a click record.
pub fn count_heralds(clicks: &[ClickEvent], window: (f64, f64)) -> Result<u64> {
    let mut n = 0;
    for group in attempt_groups(clicks)? {
        if is_herald(&first_in_window(group, window)) {
            n += 1;
        }
    }
    Ok(n)
}

fn attempt_groups(clicks: &[ClickEvent]) -> Result<Vec<&[ClickEvent]>> {
    if clicks.windows(2).any(|w| w[1].attempt < w[0].attempt) {
        return Err(Error::InvalidParameter("clicks must be sorted by attempt".into()));
    }
    Ok(clicks.chunk_by(|x, y| x.attempt == y.attempt).collect())
}

/// Wall-clock cost of the sequence, per block and per herald.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WallClock {
    pub initial_cooling: f64,
    pub handshake: f64,
    pub iteration: f64,
    /// Basis rotations and state detection after a herald.
    pub measurement: f64,
    /// Fixed cost per sequence run not covered by the other terms.
    pub sequence_overhead: f64,
}

impl Default for WallClock {
    fn default() -> Self {
        let seq = SequenceConfig::default();
        let handshake = run_handshake(&HandshakeConfig::default()).map(|h| h.duration).unwrap_or(10e-6);
        Self::from_max_sequence(&seq, handshake, MAX_SEQUENCE_LENGTH)
    }
}

impl WallClock {
    /// Node B's π and π/2 pulses (the longer node) plus 1.5 ms fluorescence detection.
    pub const MEASUREMENT: f64 = 11.1e-6 + 7.81e-6 + 1.5e-3;

    /// Attributes whatever the longest sequence (a herald on the last
    /// iteration) leaves unexplained to a fixed per-run overhead.
    pub fn from_max_sequence(seq: &SequenceConfig, handshake: f64, max_length: f64) -> Self {
        let known = seq.initial_cooling + handshake + seq.max_iterations as f64 * seq.iteration + Self::MEASUREMENT;
        WallClock {
            initial_cooling: seq.initial_cooling,
            handshake,
            iteration: seq.iteration,
            measurement: Self::MEASUREMENT,
            sequence_overhead: (max_length - known).max(0.0),
        }
    }

    pub fn block_time(&self, b: &Block) -> f64 {
        self.initial_cooling
            + self.handshake
            + self.sequence_overhead
            + b.iterations as f64 * self.iteration
            + if b.heralded { self.measurement } else { 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessMetrics {
    pub coincidences: u64,
    pub success_probability: f64,
    pub wall_clock: f64,
    pub rate: f64,
}

pub fn success_metrics(log: &AttemptLog, clock: &WallClock) -> SuccessMetrics {
    let coincidences = log.heralds.len() as u64;
    let wall_clock: f64 = log.blocks.iter().map(|b| clock.block_time(b)).sum();
    let ratio = |x: f64, y: f64| if y > 0.0 { x / y } else { 0.0 };
    SuccessMetrics {
        coincidences,
        success_probability: ratio(coincidences as f64, log.n_attempts as f64),
        wall_clock,
        rate: ratio(coincidences as f64, wall_clock),
    }
}

/// Binned coincidence histograms over `τ = t_u − t_r`, bin `k` centred on `kδ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomHistogram {
    pub delta: f64,
    pub k: Vec<i64>,
    pub raw_parallel: Vec<f64>,
    pub raw_perp: Vec<f64>,
    /// Expected coincidences involving a background click.
    pub accidental_parallel: Vec<f64>,
    pub accidental_perp: Vec<f64>,
    /// Background-subtracted and efficiency-corrected.
    pub n_parallel: Vec<f64>,
    pub n_perp: Vec<f64>,
    /// Poisson variances of the corrected bins.
    pub var_parallel: Vec<f64>,
    pub var_perp: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomPoint {
    pub t: f64,
    /// `|τ| ≤ t_eff` is the region covered by the summed bins.
    pub t_eff: f64,
    pub v: Option<f64>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomAnalysis {
    pub histogram: HomHistogram,
    pub points: Vec<HomPoint>,
}

/// Half-width `(⌊(T − δ/2)/δ⌋ + ½)δ` of the bins with `|kδ| ≤ T − δ/2`.
pub fn effective_window(t: f64, delta: f64) -> Option<f64> {
    let r = t - delta / 2.0;
    if r < -1e-12 * delta {
        return None;
    }
    Some(((r / delta + 1e-9).floor() + 0.5) * delta)
}

/// Length of `{s ∈ [w0, w1] : s ∈ [a, b]}`.
fn overlap(w0: f64, w1: f64, a: f64, b: f64) -> f64 {
    (w1.min(b) - w0.max(a)).max(0.0)
}

/// Area of `{(t1, t2) ∈ [w0, w1]² : t1 − t2 ∈ [a, b]}`.
fn band_area(w0: f64, w1: f64, a: f64, b: f64) -> f64 {
    let l = w1 - w0;
    // Measure of differences ≤ x for two points in a square of side l.
    let cum = |x: f64| {
        if x <= -l {
            0.0
        } else if x <= 0.0 {
            (l + x).powi(2) / 2.0
        } else if x < l {
            l * l - (l - x).powi(2) / 2.0
        } else {
            l * l
        }
    };
    cum(b) - cum(a)
}

/// `V(T)` from click records. Clicks must be grouped by attempt; only the
/// first click per detector inside the detection window is used.
pub fn hom_analysis(
    clicks: &[ClickEvent],
    n_attempts: u64,
    table: &DetectorTable,
    detector_efficiency: &[f64; 4],
    delta: f64,
    t_list: &[f64],
) -> Result<HomAnalysis> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("bin width must be positive".into()));
    }
    if detector_efficiency.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidParameter("detector efficiencies must be positive".into()));
    }
    let w = table.window;
    let len = w.1 - w.0;
    let k_max = (len / delta).ceil() as i64;
    let nb = (2 * k_max + 1) as usize;
    let bin = |tau: f64| ((tau / delta).round() as i64 + k_max) as usize;
    let perp = PSI_MINUS_PAIRS;
    let parallel = PARALLEL_PAIRS;

    let mut raw = [vec![0.0; nb], vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]];
    let mut singles: [Vec<f64>; 4] = Default::default();
    for group in attempt_groups(clicks)? {
        let first = first_in_window(group, w);
        for d in Detector::ALL {
            if let Some(t) = first[d.index()] {
                singles[d.index()].push(t);
            }
        }
        for (i, &(u, r)) in parallel.iter().chain(perp.iter()).enumerate() {
            if let (Some(tu), Some(tr)) = (first[u.index()], first[r.index()]) {
                raw[i][bin(tu - tr)] += 1.0;
            }
        }
    }

    let k: Vec<i64> = (-k_max..=k_max).collect();
    let rate = |d: Detector| table.row(d).background_rate;
    let accidental = |u: Detector, r: Detector| -> Vec<f64> {
        k.iter()
            .map(|&kk| {
                let (a, b) = ((kk as f64 - 0.5) * delta, (kk as f64 + 0.5) * delta);
                let with_bg_r: f64 = singles[u.index()].iter().map(|&tu| overlap(w.0, w.1, tu - b, tu - a)).sum();
                let with_bg_u: f64 = singles[r.index()].iter().map(|&tr| overlap(w.0, w.1, tr + a, tr + b)).sum();
                rate(r) * with_bg_r + rate(u) * with_bg_u - n_attempts as f64 * rate(u) * rate(r) * band_area(w.0, w.1, a, b)
            })
            .collect()
    };

    let mut hist = HomHistogram {
        delta,
        k: k.clone(),
        raw_parallel: vec![0.0; nb],
        raw_perp: vec![0.0; nb],
        accidental_parallel: vec![0.0; nb],
        accidental_perp: vec![0.0; nb],
        n_parallel: vec![0.0; nb],
        n_perp: vec![0.0; nb],
        var_parallel: vec![0.0; nb],
        var_perp: vec![0.0; nb],
    };
    for (i, &(u, r)) in parallel.iter().chain(perp.iter()).enumerate() {
        let acc = accidental(u, r);
        let eff = detector_efficiency[u.index()] * detector_efficiency[r.index()];
        let is_par = i < parallel.len();
        for j in 0..nb {
            let (rw, ac, n, var) = if is_par {
                (&mut hist.raw_parallel, &mut hist.accidental_parallel, &mut hist.n_parallel, &mut hist.var_parallel)
            } else {
                (&mut hist.raw_perp, &mut hist.accidental_perp, &mut hist.n_perp, &mut hist.var_perp)
            };
            rw[j] += raw[i][j];
            ac[j] += acc[j];
            n[j] += (raw[i][j] - acc[j]) / eff;
            var[j] += raw[i][j] / (eff * eff);
        }
    }

    let points = t_list
        .iter()
        .map(|&t| {
            let Some(t_eff) = effective_window(t, delta) else {
                return HomPoint { t, t_eff: 0.0, v: None, sigma: None };
            };
            let reach = t - delta / 2.0 + 1e-9 * delta;
            let sel = |v: &[f64]| -> f64 { k.iter().zip(v).filter(|(kk, _)| (**kk as f64 * delta).abs() <= reach).map(|(_, x)| x).sum() };
            let (p, q) = (sel(&hist.n_parallel), sel(&hist.n_perp));
            let (vp, vq) = (sel(&hist.var_parallel), sel(&hist.var_perp));
            if !(q > 0.0) {
                return HomPoint { t, t_eff, v: None, sigma: None };
            }
            let sigma = ((vp / (q * q)) + (p * p * vq / q.powi(4))).sqrt();
            HomPoint { t, t_eff, v: Some(1.0 - p / q), sigma: Some(sigma) }
        })
        .collect();
    Ok(HomAnalysis { histogram: hist, points })
}

/// CSV click record. The `origin` column is written only when every click carries one.
pub fn write_clicks_csv(clicks: &[ClickEvent], header: &str) -> String {
    let with_origin = clicks.iter().all(|c| c.origin.is_some());
    let mut s = String::new();
    if !header.is_empty() {
        s.push_str(header);
        s.push('\n');
    }
    s.push_str(if with_origin { "attempt,detector,t_us,origin\n" } else { "attempt,detector,t_us\n" });
    for c in clicks {
        let _ = write!(s, "{},{},{:.6}", c.attempt, c.detector.label(), c.t * 1e6);
        if let (true, Some(o)) = (with_origin, c.origin) {
            s.push_str(match o {
                Origin::Photon => ",photon",
                Origin::Background => ",background",
            });
        }
        s.push('\n');
    }
    s
}

/// Parses a click record; `#` lines are comments, the origin column is optional.
pub fn read_clicks_csv(text: &str) -> Result<Vec<ClickEvent>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty click record".into()))?.split(',').map(str::trim).collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(ia), Some(id), Some(it)) = (col("attempt"), col("detector"), col("t_us")) else {
        return Err(Error::Config("click record needs attempt, detector and t_us columns".into()));
    };
    let io = col("origin");
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |what: &str| Error::Config(format!("click record line {}: bad {what}", n + 2));
            let get = |i: usize| f.get(i).copied().ok_or_else(|| bad("column count"));
            let origin = match io {
                None => None,
                Some(i) => Some(match get(i)? {
                    "photon" => Origin::Photon,
                    "background" => Origin::Background,
                    _ => return Err(bad("origin")),
                }),
            };
            Ok(ClickEvent {
                attempt: get(ia)?.parse().map_err(|_| bad("attempt"))?,
                detector: Detector::from_label(get(id)?).ok_or_else(|| bad("detector"))?,
                t: get(it)?.parse::<f64>().map_err(|_| bad("t_us"))? * 1e-6,
                origin,
            })
        })
        .collect()
}
