use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ionlink::dynamics::{averaged_envelopes, Schedule};
use ionlink::empirical::{model_fidelity_curve, model_state, FidelityInputs};
use ionlink::hilbert::{preset, NodeParams, NodeSpec};
use ionlink::netsim::{
    hom_analysis, read_clicks_csv, run_handshake, simulate_attempts, success_metrics, write_clicks_csv, ClickModel,
    HandshakeConfig, LoopMode, NodeEfficiencies, SequenceConfig, SimOptions, WallClock, MAX_SEQUENCE_LENGTH,
};
use ionlink::pbsm::{default_t_sweep, DetectorTable, ModelSettings, TwoNodeModel, VisibilityMode};
use ionlink::tomography::{mle_reconstruct, resample_uncertainty, BellSign, CountsRecord, FidelityEstimate};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_PRESET: u8 = 4;

#[derive(Parser)]
#[command(name = "ionlink", version, about = "Two-node trapped-ion network simulator")]
struct Cli {
    /// Run configuration (JSON). Defaults apply to every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict `envelope` to one node preset (nodeA or nodeB).
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Jitter-averaged photon envelopes of each node.
    Envelope,
    /// V(T) for the full, no-technical-noise and pure models.
    Visibility,
    /// Model fidelities F±(T).
    FidelityModel,
    /// Maximum-likelihood tomography with resampled fidelity uncertainty.
    Tomography {
        /// Counts record (JSON map from settings such as "XZ" to four outcome counts).
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Simulate attempts and emit the click record.
    Simulate {
        #[arg(long)]
        attempts: Option<u64>,
        /// Keep looping after heralds.
        #[arg(long)]
        calibration: bool,
    },
    /// HOM histograms and V(T) from a click record.
    Analyze {
        #[arg(long)]
        clicks: PathBuf,
        /// Number of attempts the record covers.
        #[arg(long)]
        attempts: Option<u64>,
        /// Destination of the V(T) table; appended to the main output when omitted.
        #[arg(long)]
        vis_out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeRef {
    Preset(String),
    Spec(Box<NodeSpec>),
}

impl NodeRef {
    fn params(&self) -> Result<NodeParams, CliError> {
        let spec = match self {
            NodeRef::Preset(name) => preset(name)?,
            NodeRef::Spec(s) => (**s).clone(),
        };
        Ok(spec.to_params()?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TomographyConfig {
    sign: BellSign,
    /// Shots per basis setting for synthetic counts.
    shots: u64,
    resamples: usize,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        TomographyConfig { sign: BellSign::Plus, shots: 500, resamples: 200 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    node_a: NodeRef,
    node_b: NodeRef,
    model: ModelSettings,
    detectors: DetectorTable,
    sequence: SequenceConfig,
    handshake: HandshakeConfig,
    t_sweep_us: Vec<f64>,
    f_ip: (f64, f64),
    n_attempts: u64,
    envelope_step_ns: f64,
    hom_bin_us: f64,
    tomography: TomographyConfig,
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            node_a: NodeRef::Preset("nodeA".into()),
            node_b: NodeRef::Preset("nodeB".into()),
            model: ModelSettings::default(),
            detectors: DetectorTable::default(),
            sequence: SequenceConfig::default(),
            handshake: HandshakeConfig::default(),
            t_sweep_us: default_t_sweep().iter().map(|t| t * 1e6).collect(),
            f_ip: (0.938, 0.956),
            n_attempts: 1_000_000,
            envelope_step_ns: 50.0,
            hom_bin_us: 0.5,
            tomography: TomographyConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    fn t_sweep(&self) -> Vec<f64> {
        self.t_sweep_us.iter().map(|t| t * 1e-6).collect()
    }

    fn check(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::config(m));
        if self.t_sweep_us.iter().any(|t| !(*t > 0.0)) {
            return bad("t_sweep_us entries must be positive");
        }
        if !(self.envelope_step_ns > 0.0) || !(self.hom_bin_us > 0.0) {
            return bad("envelope_step_ns and hom_bin_us must be positive");
        }
        self.detectors.validate()?;
        self.sequence.validate()?;
        self.handshake.validate()?;
        Ok(())
    }

    fn hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn two_node_model(&self, mode: VisibilityMode) -> Result<TwoNodeModel, CliError> {
        let (a, b) = (self.node_a.params()?, self.node_b.params()?);
        Ok(TwoNodeModel::build(&a, &b, mode, &self.model, self.detectors.window)?)
    }
}

#[derive(Debug)]
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, msg: msg.into() }
    }
}

impl From<ionlink::Error> for CliError {
    fn from(e: ionlink::Error) -> Self {
        let code = match e {
            ionlink::Error::UnknownPreset(_) => EXIT_PRESET,
            ionlink::Error::Config(_) | ionlink::Error::InvalidParameter(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        CliError { code, msg: e.to_string() }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError { code: EXIT_FAILURE, msg: format!("{}: {e}", path.display()) }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // Resolve presets up front so a missing one fails before any work.
    cfg.node_a.params()?;
    cfg.node_b.params()?;
    cfg.check()?;
    Ok(cfg)
}

struct Output {
    header: String,
}

impl Output {
    fn write(&self, path: Option<&Path>, body: &str) -> Result<(), CliError> {
        emit(path, &format!("{}\n{body}", self.header))
    }
}

/// JSON artifacts record the hash and seed as fields instead of a comment line.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| io_error(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn envelope(cfg: &RunConfig, only: Option<&str>) -> Result<String, CliError> {
    let nodes: Vec<(&str, NodeParams)> = match only {
        Some(name) => vec![(name, preset(name)?.to_params()?)],
        None => vec![("A", cfg.node_a.params()?), ("B", cfg.node_b.params()?)],
    };
    let mut s = String::from("node,t_us,p_v_per_us,p_h_per_us\n");
    for (label, p) in nodes {
        let sched = Schedule::new(&p, cfg.model.t_end, cfg.model.dt, cfg.model.pulse_end)?;
        let env = averaged_envelopes(&p, &sched, &cfg.model.ensemble(&p)?)?;
        let stride = ((cfg.envelope_step_ns * 1e-9 / env.grid.dt).round() as usize).max(1);
        for i in (0..env.p_v.len()).step_by(stride) {
            let _ = writeln!(s, "{label},{:.4},{:.6e},{:.6e}", env.grid.time(i) * 1e6, env.p_v[i] * 1e-6, env.p_h[i] * 1e-6);
        }
    }
    Ok(s)
}

fn visibility(cfg: &RunConfig) -> Result<String, CliError> {
    let ts = cfg.t_sweep();
    let curves = VisibilityMode::ALL
        .iter()
        .map(|&m| Ok(cfg.two_node_model(m)?.visibility(&ts)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut s = String::from("t_us,v_full,v_no_technical,v_pure\n");
    for (i, t) in ts.iter().enumerate() {
        let _ = writeln!(s, "{:.3},{:.6},{:.6},{:.6}", t * 1e6, curves[0][i], curves[1][i], curves[2][i]);
    }
    Ok(s)
}

fn fidelity_model(cfg: &RunConfig) -> Result<String, CliError> {
    let ts = cfg.t_sweep();
    let model = cfg.two_node_model(VisibilityMode::Full)?;
    let v = model.visibility(&ts)?;
    let frac: Vec<f64> = ts.iter().map(|&t| model.orthogonal_band_fraction(t)).collect();
    let inputs = FidelityInputs::from_table(&cfg.detectors, cfg.f_ip)?;
    let curve = model_fidelity_curve(&inputs, &ts, &v, Some(&frac))?;
    let mut s = String::from("t_us,v,f_plus,f_minus,f_plus_no_dephasing,f_minus_no_dephasing\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{:.3},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.t * 1e6,
            p.v,
            p.f_plus_full,
            p.f_minus_full,
            p.f_plus_nodephase,
            p.f_minus_nodephase
        );
    }
    Ok(s)
}

#[derive(Serialize)]
struct TomographyReport {
    config_hash: String,
    seed: u64,
    sign: BellSign,
    synthetic: bool,
    counts: CountsRecord,
    rho_re: Vec<Vec<f64>>,
    rho_im: Vec<Vec<f64>>,
    fidelity: FidelityEstimate,
}

fn tomography(cfg: &RunConfig, counts_path: Option<&Path>) -> Result<String, CliError> {
    let tc = &cfg.tomography;
    let (counts, synthetic) = match counts_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            let c: CountsRecord = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            (c, false)
        }
        None => {
            // Background and readout noise only; no model visibility is needed.
            let inputs = FidelityInputs::from_table(&cfg.detectors, cfg.f_ip)?;
            let budget = match tc.sign {
                BellSign::Plus => inputs.budget_plus,
                BellSign::Minus => inputs.budget_minus,
            };
            let rho = model_state(&budget, None, cfg.f_ip, tc.sign, 0.0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (CountsRecord::sample(&rho, tc.shots, &mut rng), true)
        }
    };
    let rho = mle_reconstruct(&counts)?;
    let (fidelity, _) = resample_uncertainty(&counts, tc.sign, None, tc.resamples, cfg.seed)?;
    let part = |f: fn(&ionlink::hilbert::C64) -> f64| (0..4).map(|i| (0..4).map(|j| f(&rho[(i, j)])).collect()).collect();
    let report = TomographyReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        sign: tc.sign, synthetic, counts, rho_re: part(|z| z.re), rho_im: part(|z| z.im), fidelity };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError { code: EXIT_FAILURE, msg: e.to_string() })?;
    Ok(json + "\n")
}

fn simulate(cfg: &RunConfig, attempts: Option<u64>, calibration: bool) -> Result<String, CliError> {
    let model = cfg.two_node_model(VisibilityMode::Full)?;
    let eff = NodeEfficiencies::fit(&cfg.detectors, model.window_emission())?;
    let clicks = ClickModel::from_model(&model, &cfg.detectors, &eff, cfg.sequence.record_length)?;
    let mode = if calibration { LoopMode::Calibration } else { LoopMode::Herald };
    let opts = SimOptions::new(attempts.unwrap_or(cfg.n_attempts), cfg.seed, mode);
    let sim = simulate_attempts(&cfg.sequence, &clicks, &opts)?;
    let handshake = run_handshake(&cfg.handshake)?.duration;
    let clock = WallClock::from_max_sequence(&cfg.sequence, handshake, MAX_SEQUENCE_LENGTH);
    let m = success_metrics(&sim.log, &clock);
    eprintln!(
        "attempts {}  coincidences {}  success probability {:.3e}  rate {:.3}/s",
        sim.log.n_attempts, m.coincidences, m.success_probability, m.rate
    );
    let b = eff.b.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(";");
    Ok(write_clicks_csv(&sim.clicks, &format!("# attempts={} detector_efficiency={b}", sim.log.n_attempts)))
}

/// Reads `key=value` pairs from the comment lines of a click record.
fn record_metadata<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .flat_map(|l| l.trim_start_matches('#').split_whitespace())
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn analyze(cfg: &RunConfig, path: &Path, attempts: Option<u64>) -> Result<(String, String), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let clicks = read_clicks_csv(&text)?;
    let n_attempts = attempts
        .or_else(|| record_metadata(&text, "attempts").and_then(|s| s.parse().ok()))
        .unwrap_or_else(|| clicks.last().map_or(0, |c| c.attempt + 1));
    let eff = match record_metadata(&text, "detector_efficiency") {
        Some(s) => {
            let v: Vec<f64> = s.split(';').filter_map(|x| x.parse().ok()).collect();
            <[f64; 4]>::try_from(v).map_err(|_| CliError::config("click record: bad detector_efficiency"))?
        }
        None => {
            let model = cfg.two_node_model(VisibilityMode::Full)?;
            NodeEfficiencies::fit(&cfg.detectors, model.window_emission())?.b
        }
    };
    let ts = cfg.t_sweep();
    let r = hom_analysis(&clicks, n_attempts, &cfg.detectors, &eff, cfg.hom_bin_us * 1e-6, &ts)?;
    let h = &r.histogram;
    let mut hist = String::from("tau_us,raw_parallel,raw_perp,accidental_parallel,accidental_perp,n_parallel,n_perp\n");
    for (i, k) in h.k.iter().enumerate() {
        let _ = writeln!(
            hist,
            "{:.3},{},{},{:.4},{:.4},{:.4},{:.4}",
            *k as f64 * h.delta * 1e6,
            h.raw_parallel[i],
            h.raw_perp[i],
            h.accidental_parallel[i],
            h.accidental_perp[i],
            h.n_parallel[i],
            h.n_perp[i]
        );
    }
    let fmt = |x: Option<f64>| x.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    let mut vis = String::from("t_us,t_eff_us,v,sigma\n");
    for p in &r.points {
        let _ = writeln!(vis, "{:.3},{:.3},{},{}", p.t * 1e6, p.t_eff * 1e6, fmt(p.v), fmt(p.sigma));
    }
    Ok((hist, vis))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = Output { header: format!("# config_hash={} seed={}", cfg.hash(), cfg.seed) };
    let dest = cli.out.as_deref();
    match &cli.command {
        Command::Envelope => out.write(dest, &envelope(&cfg, cli.preset.as_deref())?),
        Command::Visibility => out.write(dest, &visibility(&cfg)?),
        Command::FidelityModel => out.write(dest, &fidelity_model(&cfg)?),
        Command::Tomography { counts } => emit(dest, &tomography(&cfg, counts.as_deref())?),
        Command::Simulate { attempts, calibration } => out.write(dest, &simulate(&cfg, *attempts, *calibration)?),
        Command::Analyze { clicks, attempts, vis_out } => {
            let (hist, vis) = analyze(&cfg, clicks, *attempts)?;
            match vis_out {
                Some(p) => {
                    out.write(dest, &hist)?;
                    out.write(Some(p), &vis)
                }
                None => out.write(dest, &format!("{hist}\n{vis}")),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
