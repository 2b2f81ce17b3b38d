//! Command-line pipelines. Every subcommand reads files, writes files into
//! one output directory, and stamps each output with a provenance header.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{Carrier, DynamicsParams, Drive, FieldTrace};
use crate::error::{Error, Result};
use crate::inference::{extract_speedup_with, fit_mle, foil_thickness_grid, FitOptions, FitProblem, ForwardModel, DEFAULT_BUDGET};
use crate::layered_medium::{load_stack, LayerStack};
use crate::mode_solver::{solve_modes, ResonantMode};
use crate::observables::{
    collective_field, divergence_average, hyperfine_intensity, poissonize, DivergenceModel, Gate, HyperfineModel,
    LineSummation, TimeTrace,
};
use crate::units::{deg_to_rad, fe57_gamma, mdeg_to_rad, rad_to_deg, REPETITION_PERIOD_NS};
use crate::dynamics::analytic::frequency_shift;

/// Directory searched for stack files that are not found as given.
pub const FIXTURES_ENV: &str = "WGEXCITON_FIXTURES";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "wgexciton", version, about = "Nuclear exciton dynamics in planar x-ray waveguides")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Resonant modes of a layer stack.
    Modes(ModesArgs),
    /// Front-coupling traces over a length scan.
    Fc(FcArgs),
    /// Grazing-incidence traces and initial decay rates over an angle scan.
    Gi(GiArgs),
    /// Poisson maximum-likelihood fit of a counts CSV.
    Fit(FitArgs),
    /// Initial decay rate of a trace over a time window.
    Speedup(SpeedupArgs),
}

/// Options shared by all subcommands.
#[derive(Args, Debug, Clone, Default)]
pub struct RunIo {
    /// Output directory, created if missing.
    #[arg(long, default_value = "wgexciton-out")]
    pub out: PathBuf,
    /// Read every other option from this TOML file (as written to
    /// `config.toml` by a previous run); other flags are ignored.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesArgs {
    /// Stack TOML file; looked up in the fixture directory if not found.
    #[arg(long, default_value = "gi.toml")]
    pub stack: String,
    #[arg(long, default_value_t = 4)]
    pub max_modes: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub io: RunIo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Summation {
    Collective,
    Incoherent,
}

impl From<Summation> for LineSummation {
    fn from(s: Summation) -> Self {
        match s {
            Summation::Collective => LineSummation::Collective,
            Summation::Incoherent => LineSummation::Incoherent,
        }
    }
}

/// Hyperfine options shared by `fc` and `gi`.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct HyperfineArgs {
    /// Gaussian FWHM of the line energies, in units of γ.
    #[arg(long)]
    pub broadening_gamma: Option<f64>,
    /// Quadrupole doublet separation, in units of γ.
    #[arg(long)]
    pub splitting_gamma: Option<f64>,
    /// Gauss–Hermite nodes per doublet component (odd).
    #[arg(long, default_value_t = 9)]
    pub n_lines: usize,
    #[arg(long, value_enum, default_value_t = Summation::Collective)]
    pub summation: Summation,
}

impl HyperfineArgs {
    fn model(&self, default: HyperfineModel) -> Result<HyperfineModel> {
        let m = HyperfineModel::new(
            self.broadening_gamma.unwrap_or(default.broadening_fwhm),
            self.splitting_gamma.unwrap_or(default.quad_splitting),
            self.n_lines,
        )?;
        Ok(m.with_summation(self.summation.into()))
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcArgs {
    #[arg(long, default_value = "fc.toml")]
    pub stack: String,
    /// 1-based mode number.
    #[arg(long, default_value_t = 1)]
    pub mode: usize,
    /// Lengths as `a,b,c` or `start:stop:count` (mm).
    #[arg(long, default_value = "2")]
    pub length_mm: String,
    #[arg(long, default_value_t = 0.5)]
    pub tstep_ns: f64,
    #[arg(long, default_value_t = REPETITION_PERIOD_NS)]
    pub t_max_ns: f64,
    /// Replaces the computed coupling coefficient (real).
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub pulse_area: f64,
    #[command(flatten)]
    pub hyperfine: HyperfineArgs,
    /// Without hyperfine structure (overrides the broadening and splitting).
    #[arg(long)]
    pub bare: bool,
    /// Sum all coupled modes coherently, weighted by u_m(z₀).
    #[arg(long)]
    pub multi_mode: bool,
    /// Detector gate `t_min,t_max` (ns).
    #[arg(long, default_value = "13,192")]
    pub gate_ns: String,
    /// Expected total counts per trace; enables Poisson sampling.
    #[arg(long)]
    pub counts: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub io: RunIo,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GiArgs {
    #[arg(long, default_value = "gi.toml")]
    pub stack: String,
    #[arg(long, default_value_t = 3)]
    pub mode: usize,
    /// Incidence angles as `a,b,c` or `start:stop:count` (deg); defaults to
    /// the mode angle.
    #[arg(long)]
    pub theta_deg: Option<String>,
    #[arg(long, default_value_t = 5.0)]
    pub length_mm: f64,
    #[arg(long, default_value_t = 0.25)]
    pub tstep_ns: f64,
    #[arg(long, default_value_t = REPETITION_PERIOD_NS)]
    pub t_max_ns: f64,
    #[arg(long, default_value_t = 0.01)]
    pub pulse_area: f64,
    #[command(flatten)]
    pub hyperfine: HyperfineArgs,
    #[arg(long)]
    pub bare: bool,
    /// Full width of the uniform angular spread (mdeg).
    #[arg(long, default_value_t = 0.0)]
    pub divergence_mdeg: f64,
    #[arg(long, default_value_t = 21)]
    pub n_angles: usize,
    /// Rate-extraction window `t_min,t_max` (ns).
    #[arg(long, default_value = "13,30")]
    pub window_ns: String,
    #[arg(long, default_value = "13,192")]
    pub gate_ns: String,
    #[command(flatten)]
    #[serde(skip)]
    pub io: RunIo,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitArgs {
    /// Trace CSV with columns t_ns,counts.
    #[arg(long, default_value = "trace.csv")]
    pub input: PathBuf,
    /// exp_decay, gi_decay or fc_foil.
    #[arg(long, default_value = "fc_foil")]
    pub model: String,
    /// Initial parameters, comma separated; model defaults when omitted.
    #[arg(long)]
    pub init: Option<String>,
    /// Bounds as `lo:hi,lo:hi,...`; model defaults when omitted.
    #[arg(long)]
    pub bounds: Option<String>,
    /// Replaces the gate recorded in the CSV (`t_min,t_max` ns).
    #[arg(long)]
    pub gate_ns: Option<String>,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    pub max_evals: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid tried before the simplex: `index:start:stop:count`.
    #[arg(long)]
    pub prescan: Option<String>,
    #[command(flatten)]
    #[serde(skip)]
    pub io: RunIo,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedupArgs {
    #[arg(long, default_value = "trace.csv")]
    pub input: PathBuf,
    #[arg(long, default_value = "13,30")]
    pub window_ns: String,
    #[command(flatten)]
    #[serde(skip)]
    pub io: RunIo,
}

/// Parses arguments, runs, and maps the outcome to an exit code:
/// 0 success, 1 invalid input, 2 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

/// Runs one subcommand and returns the human-readable summary.
pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Modes(a) => {
            let io = a.io.clone();
            cmd_modes(&load_config(a, &io)?, &io.out)
        }
        Command::Fc(a) => {
            let io = a.io.clone();
            cmd_fc(&load_config(a, &io)?, &io.out)
        }
        Command::Gi(a) => {
            let io = a.io.clone();
            cmd_gi(&load_config(a, &io)?, &io.out)
        }
        Command::Fit(a) => {
            let io = a.io.clone();
            cmd_fit(&load_config(a, &io)?, &io.out)
        }
        Command::Speedup(a) => {
            let io = a.io.clone();
            cmd_speedup(&load_config(a, &io)?, &io.out)
        }
    }
}

fn load_config<A: DeserializeOwned>(args: A, io: &RunIo) -> Result<A> {
    match &io.config {
        None => Ok(args),
        Some(path) => {
            let text = read_text(path)?;
            toml::from_str(&text).map_err(|e| Error::Parse {
                context: path.display().to_string(),
                message: e.to_string(),
            })
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// The default fixture directory: `$WGEXCITON_FIXTURES`, else the one
/// shipped with the crate.
pub fn fixture_dir() -> PathBuf {
    std::env::var_os(FIXTURES_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures"))
}

/// `name` as given if it exists, else relative to the fixture directory.
pub fn resolve_stack(name: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Ok(direct);
    }
    let fixture = fixture_dir().join(name);
    if direct.is_relative() && fixture.is_file() {
        return Ok(fixture);
    }
    Err(Error::Io {
        path: direct,
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such stack file"),
    })
}

/// Resolved arguments plus the file contents they refer to.
struct Provenance {
    command: &'static str,
    hash: String,
    seed: Option<u64>,
}

impl Provenance {
    fn new<A: Serialize>(command: &'static str, args: &A, inputs: &[&str], seed: Option<u64>) -> Self {
        let config = toml::to_string(args).expect("arguments serialize");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(config.as_bytes());
        for text in inputs {
            h.update(text.as_bytes());
        }
        let hash = h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        Provenance { command, hash, seed }
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("wgexciton_version".to_string(), VERSION.to_string()),
            ("command".to_string(), self.command.to_string()),
            ("config_sha256".to_string(), self.hash.clone()),
        ];
        if let Some(seed) = self.seed {
            v.push(("seed".to_string(), seed.to_string()));
        }
        v
    }

    fn header(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
    }
}

fn prepare_out<A: Serialize>(out: &Path, args: &A) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_text(&out.join("config.toml"), &toml::to_string(args).expect("arguments serialize"))
}

/// `a,b,c` or `start:stop:count`.
pub fn parse_scan(field: &str, spec: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::validation(field, format!("{m}: `{spec}`"));
    let values = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:stop:count"));
        }
        let a: f64 = parts[0].trim().parse().map_err(|_| bad("bad start"))?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad("bad stop"))?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad("bad count"))?;
        match n {
            0 => return Err(bad("count must be >= 1")),
            1 => vec![a],
            _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
        }
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(bad("scan must be nonempty and finite"));
    }
    Ok(values)
}

fn parse_pair(field: &str, spec: &str) -> Result<(f64, f64)> {
    let v = parse_scan(field, spec)?;
    match v.as_slice() {
        [a, b] if spec.contains(',') => Ok((*a, *b)),
        _ => Err(Error::validation(field, format!("expected `a,b`, got `{spec}`"))),
    }
}

fn time_grid(step: f64, t_max: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::validation("tstep_ns", "must be > 0"));
    }
    if !(t_max > 0.0 && t_max <= REPETITION_PERIOD_NS) {
        return Err(Error::validation(
            "t_max_ns",
            format!("must lie in (0, {REPETITION_PERIOD_NS}] ns"),
        ));
    }
    let n = (t_max / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

fn select_mode(stack: &LayerStack, index: usize) -> Result<(Vec<ResonantMode>, usize)> {
    if index == 0 {
        return Err(Error::validation("mode", "mode numbers start at 1"));
    }
    let modes = solve_modes(stack, index.max(4))?;
    let pos = modes.iter().position(|m| m.index == index).ok_or_else(|| {
        Error::validation("mode", format!("the stack supports only {} modes", modes.len()))
    })?;
    Ok((modes, pos))
}

fn fmt_g(v: f64) -> String {
    format!("{v:.6e}")
}

pub fn cmd_modes(args: &ModesArgs, out: &Path) -> Result<String> {
    if args.max_modes == 0 {
        return Err(Error::validation("max_modes", "must be >= 1"));
    }
    let path = resolve_stack(&args.stack)?;
    let text = read_text(&path)?;
    let stack = load_stack(&path)?;
    let modes = solve_modes(&stack, args.max_modes)?;
    let prov = Provenance::new("modes", args, &[&text], None);
    prepare_out(out, args)?;
    let mut csv = prov.header();
    csv.push_str("mode,theta_m_deg,one_minus_re_nu,im_nu,lambda_m_mm,zeta_re,zeta_im\n");
    let mut summary = format!("{:>4} {:>10} {:>12} {:>12} {:>10} {:>12}\n", "m", "theta(deg)", "1-Re nu", "Im nu", "Lambda(mm)", "zeta");
    for m in &modes {
        let zeta = m.zeta.unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{:.6},{},{},{},{},{}",
            m.index,
            rad_to_deg(m.theta_m),
            fmt_g(m.one_minus_re_nu()),
            fmt_g(m.nu.im),
            fmt_g(m.lambda_m * 1e-6),
            fmt_g(zeta.re),
            fmt_g(zeta.im)
        );
        let _ = writeln!(
            summary,
            "{:>4} {:>10.4} {:>12.3e} {:>12.3e} {:>10.3} {:>12.3e}",
            m.index,
            rad_to_deg(m.theta_m),
            m.one_minus_re_nu(),
            m.nu.im,
            m.lambda_m * 1e-6,
            zeta.re
        );
    }
    write_text(&out.join("modes.csv"), &csv)?;
    Ok(summary)
}

/// Coherent sum over all coupled modes with amplitudes u_m(z₀) scaled to
/// unit total weight. Times are delays after the exit arrival of each mode.
fn multi_mode_field(
    modes: &[ResonantMode],
    stack: &LayerStack,
    length: f64,
    zeta_override: Option<f64>,
    drive: &Drive,
    hf: &HyperfineModel,
    tau: &[f64],
) -> Result<Vec<f64>> {
    let res = stack
        .resonant()
        .ok_or_else(|| Error::validation("stack", "no resonant film"))?;
    let coupled: Vec<&ResonantMode> = modes
        .iter()
        .filter(|m| m.zeta.is_some_and(|z| z.norm() > 0.0) || zeta_override.is_some())
        .collect();
    if coupled.is_empty() {
        return Err(Error::NoModeFound);
    }
    let amps: Vec<Complex64> = coupled.iter().map(|m| m.field_at(res.z0)).collect();
    let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
    let mut total = vec![Complex64::new(0.0, 0.0); tau.len()];
    for (m, a) in coupled.iter().zip(&amps) {
        let params = mode_params(m, stack, length, zeta_override)?;
        let b = field_on_delays(&params, drive, hf, tau)?;
        for (t, v) in total.iter_mut().zip(&b.b) {
            *t += v * (a / norm);
        }
    }
    Ok(total.iter().map(|v| v.norm_sqr()).collect())
}

fn mode_params(mode: &ResonantMode, stack: &LayerStack, length: f64, zeta_override: Option<f64>) -> Result<DynamicsParams> {
    let res = stack
        .resonant()
        .ok_or_else(|| Error::validation("stack", "no resonant film"))?;
    let mut mode = mode.clone();
    if let Some(z) = zeta_override {
        mode.zeta = Some(Complex64::new(z, 0.0));
    }
    DynamicsParams::from_mode(&mode, res, length)
}

/// Front-coupling field sampled at delays τ after the exit arrival.
fn field_on_delays(params: &DynamicsParams, drive: &Drive, hf: &HyperfineModel, tau: &[f64]) -> Result<FieldTrace> {
    let delay = Carrier::for_drive(params, drive).delay(0.0);
    let lab: Vec<f64> = tau.iter().map(|t| t + delay).collect();
    let mut f = collective_field(params, drive, hf, &lab)?;
    f.t = tau.to_vec();
    Ok(f)
}

pub fn cmd_fc(args: &FcArgs, out: &Path) -> Result<String> {
    let lengths = parse_scan("length_mm", &args.length_mm)?;
    if lengths.iter().any(|l| *l <= 0.0) {
        return Err(Error::validation("length_mm", "lengths must be > 0"));
    }
    let tau = time_grid(args.tstep_ns, args.t_max_ns)?;
    let (g0, g1) = parse_pair("gate_ns", &args.gate_ns)?;
    let gate = Gate::new(g0, g1)?;
    let hf = if args.bare {
        HyperfineModel::none()
    } else {
        args.hyperfine.model(HyperfineModel::fc_fixture())?
    };
    if args.multi_mode && hf.summation == LineSummation::Incoherent {
        return Err(Error::validation("summation", "multi-mode runs need collective summation"));
    }
    let path = resolve_stack(&args.stack)?;
    let text = read_text(&path)?;
    let stack = load_stack(&path)?;
    let (modes, pos) = select_mode(&stack, args.mode)?;
    let drive = Drive::front_coupling(Complex64::new(args.pulse_area, 0.0))?;
    let prov = Provenance::new("fc", args, &[&text], args.counts.map(|_| args.seed));
    prepare_out(out, args)?;

    let mut summary = String::new();
    for (i, &l_mm) in lengths.iter().enumerate() {
        let length = l_mm * 1e6;
        let params = mode_params(&modes[pos], &stack, length, args.zeta)?;
        let intensity = if args.multi_mode {
            multi_mode_field(&modes, &stack, length, args.zeta, &drive, &hf, &tau)?
        } else {
            let delay = Carrier::for_drive(&params, &drive).delay(0.0);
            let lab: Vec<f64> = tau.iter().map(|t| t + delay).collect();
            hyperfine_intensity(&params, &drive, &hf, &lab)?
        };
        let mut trace = TimeTrace::new(tau.clone(), intensity)?.with_gate(gate);
        trace.metadata = prov.pairs();
        trace = trace
            .with_meta("mode", args.mode)
            .with_meta("length_mm", l_mm)
            .with_meta("zeta", params.zeta.re)
            .with_meta("optical_depth", params.optical_depth().re)
            .with_meta("broadening_gamma", hf.broadening_fwhm)
            .with_meta("splitting_gamma", hf.quad_splitting)
            .with_meta("multi_mode", args.multi_mode)
            .with_meta("time_origin", "exit arrival");
        if let Some(total) = args.counts {
            trace = poissonize(&trace, total, args.seed.wrapping_add(i as u64))?;
        }
        let name = format!("fc_L{l_mm:.4}mm.csv");
        trace.write_csv(&out.join(&name))?;
        let _ = writeln!(
            summary,
            "L = {l_mm:.4} mm  zeta L/Lambda_res = {:.1}  -> {name}",
            params.optical_depth().re
        );
    }
    Ok(summary)
}

pub fn cmd_gi(args: &GiArgs, out: &Path) -> Result<String> {
    let t = time_grid(args.tstep_ns, args.t_max_ns)?;
    let window = parse_pair("window_ns", &args.window_ns)?;
    let (g0, g1) = parse_pair("gate_ns", &args.gate_ns)?;
    let gate = Gate::new(g0, g1)?;
    if !(args.length_mm > 0.0) {
        return Err(Error::validation("length_mm", "must be > 0"));
    }
    let hf = if args.bare {
        HyperfineModel::none()
    } else {
        args.hyperfine.model(HyperfineModel::gi_fixture())?
    };
    let divergence = if args.divergence_mdeg > 0.0 {
        DivergenceModel::new(mdeg_to_rad(args.divergence_mdeg), args.n_angles)?
    } else if args.divergence_mdeg == 0.0 {
        DivergenceModel::none()
    } else {
        return Err(Error::validation("divergence_mdeg", "must be >= 0"));
    };
    let path = resolve_stack(&args.stack)?;
    let text = read_text(&path)?;
    let stack = load_stack(&path)?;
    let (modes, pos) = select_mode(&stack, args.mode)?;
    let params = mode_params(&modes[pos], &stack, args.length_mm * 1e6, None)?;
    let thetas = match &args.theta_deg {
        Some(spec) => parse_scan("theta_deg", spec)?,
        None => vec![rad_to_deg(modes[pos].theta_m)],
    };
    let prov = Provenance::new("gi", args, &[&text], None);
    prepare_out(out, args)?;

    let area = Complex64::new(args.pulse_area, 0.0);
    let gamma = params.gamma;
    let mut curve = prov.header();
    curve.push_str("theta_deg,rate_gamma,simple_rate_gamma\n");
    let mut summary = String::new();
    for &deg in &thetas {
        let theta = deg_to_rad(deg);
        let intensity = divergence_average(
            |th| hyperfine_intensity(&params, &Drive::grazing(area, th)?, &hf, &t),
            &divergence,
            theta,
        )?;
        let mut trace = TimeTrace::new(t.clone(), intensity)?.with_gate(gate);
        trace.metadata = prov.pairs();
        trace = trace
            .with_meta("mode", args.mode)
            .with_meta("theta_deg", deg)
            .with_meta("broadening_gamma", hf.broadening_fwhm)
            .with_meta("splitting_gamma", hf.quad_splitting)
            .with_meta("divergence_mdeg", args.divergence_mdeg);
        trace.write_csv(&out.join(format!("gi_theta{deg:.5}deg.csv")))?;
        let rate = extract_speedup_with(&trace, window, gamma)?.rate;
        let simple = 1.0 + 2.0 * frequency_shift(&params, theta)?.im / gamma;
        let _ = writeln!(curve, "{deg:.6},{},{}", fmt_g(rate), fmt_g(simple));
        let _ = writeln!(summary, "theta = {deg:.5} deg  rate = {rate:.3} gamma  (simple model {simple:.3})");
    }
    write_text(&out.join("speedup.csv"), &curve)?;
    Ok(summary)
}

fn parse_list(field: &str, spec: &str) -> Result<Vec<f64>> {
    if spec.contains(':') {
        return Err(Error::validation(field, "expected a comma-separated list"));
    }
    parse_scan(field, spec)
}

fn parse_bounds(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(',')
        .map(|item| {
            let (a, b) = item
                .split_once(':')
                .ok_or_else(|| Error::validation("bounds", format!("expected lo:hi, got `{item}`")))?;
            let parse = |s: &str| -> Result<f64> {
                match s.trim() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    v => v
                        .parse()
                        .map_err(|_| Error::validation("bounds", format!("bad number `{v}`"))),
                }
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub fn cmd_fit(args: &FitArgs, out: &Path) -> Result<String> {
    let text = read_text(&args.input)?;
    let mut data = TimeTrace::from_csv_str(&text)?;
    if data.counts.is_none() {
        return Err(Error::validation("input", "fit needs a counts column"));
    }
    if let Some(g) = &args.gate_ns {
        let (a, b) = parse_pair("gate_ns", g)?;
        data.gate = Gate::new(a, b)?;
    }
    let model = ForwardModel::from_name(&args.model, data.gate.t_min)?;
    let init = match &args.init {
        Some(s) => parse_list("init", s)?,
        None => model.default_init(&data),
    };
    let prescan = match &args.prescan {
        Some(s) => {
            let (idx, rest) = s
                .split_once(':')
                .ok_or_else(|| Error::validation("prescan", "expected index:start:stop:count"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| Error::validation("prescan", "bad parameter index"))?;
            Some((idx, parse_scan("prescan", rest)?))
        }
        None if matches!(model, ForwardModel::FcFoil { .. }) && args.init.is_none() => {
            Some((1, foil_thickness_grid()))
        }
        None => None,
    };
    let options = FitOptions {
        restarts: args.restarts,
        max_evals: args.max_evals,
        seed: args.seed,
        prescan,
        ..FitOptions::default()
    };
    let mut problem = FitProblem::new(model, data, init).with_options(options);
    if let Some(b) = &args.bounds {
        problem = problem.with_bounds(parse_bounds(b)?);
    }
    let res = fit_mle(&problem)?;
    let prov = Provenance::new("fit", args, &[&text], Some(args.seed));
    prepare_out(out, args)?;

    let mut report = prov.header();
    let _ = writeln!(report, "model = {}", res.model);
    let _ = writeln!(report, "converged = {}", res.converged);
    let _ = writeln!(report, "n_eval = {}", res.n_eval);
    let _ = writeln!(report, "n_bins = {}", res.n_bins);
    let _ = writeln!(report, "gate_ns = {},{}", problem.data.gate.t_min, problem.data.gate.t_max);
    let _ = writeln!(report, "nll = {:.10e}", res.nll);
    let _ = writeln!(report, "init_nll = {:.10e}", res.init_nll);
    let se = res.std_errors();
    for (i, name) in res.param_names.iter().enumerate() {
        let _ = writeln!(report, "p.{name} = {:.10e}", res.p_hat[i]);
        if let Some(se) = &se {
            let _ = writeln!(report, "se.{name} = {:.4e}", se[i]);
        }
    }
    write_text(&out.join("fit_report.txt"), &report)?;

    let mut summary = format!(
        "{} fit on {} bins: nll = {:.4}, {} evaluations, {}\n",
        res.model,
        res.n_bins,
        res.nll,
        res.n_eval,
        if res.converged { "converged" } else { "NOT converged" }
    );
    for (i, name) in res.param_names.iter().enumerate() {
        match &se {
            Some(se) => {
                let _ = writeln!(summary, "  {name:>11} = {:.6} +/- {:.2e}", res.p_hat[i], se[i]);
            }
            None => {
                let _ = writeln!(summary, "  {name:>11} = {:.6}", res.p_hat[i]);
            }
        }
    }
    Ok(summary)
}

pub fn cmd_speedup(args: &SpeedupArgs, out: &Path) -> Result<String> {
    let text = read_text(&args.input)?;
    let data = TimeTrace::from_csv_str(&text)?;
    let window = parse_pair("window_ns", &args.window_ns)?;
    let fit = extract_speedup_with(&data, window, fe57_gamma())?;
    let prov = Provenance::new("speedup", args, &[&text], None);
    prepare_out(out, args)?;
    let mut report = prov.header();
    let _ = writeln!(report, "window_ns = {},{}", window.0, window.1);
    let _ = writeln!(report, "n_bins = {}", fit.n_bins);
    let _ = writeln!(report, "rate_gamma = {:.10e}", fit.rate);
    let _ = writeln!(report, "amplitude = {:.10e}", fit.amplitude);
    let _ = writeln!(report, "nll = {:.10e}", fit.nll);
    write_text(&out.join("speedup_report.txt"), &report)?;
    Ok(format!(
        "initial decay rate over {}-{} ns: {:.4} gamma ({} bins)\n",
        window.0, window.1, fit.rate, fit.n_bins
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_syntax() {
        assert_eq!(parse_scan("x", "1,2.5").unwrap(), vec![1.0, 2.5]);
        assert_eq!(parse_scan("x", "0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_scan("x", "4:9:1").unwrap(), vec![4.0]);
        assert!(parse_scan("x", "0:1").is_err());
        assert!(parse_scan("x", "a").is_err());
        assert!(parse_pair("gate", "13").is_err());
        assert_eq!(parse_pair("gate", "13,30").unwrap(), (13.0, 30.0));
    }

    #[test]
    fn bounds_syntax() {
        assert_eq!(parse_bounds("0:inf,1:2").unwrap(), vec![(0.0, f64::INFINITY), (1.0, 2.0)]);
        assert!(parse_bounds("0-1").is_err());
    }

    #[test]
    fn time_grid_limits() {
        assert_eq!(time_grid(0.5, 2.0).unwrap(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(time_grid(0.5, 300.0).is_err());
        assert!(time_grid(0.0, 100.0).is_err());
    }

    #[test]
    fn provenance_ignores_output_directory() {
        let a = Cli::try_parse_from(["wgexciton", "modes", "--out", "a"]).unwrap();
        let b = Cli::try_parse_from(["wgexciton", "modes", "--out", "b"]).unwrap();
        let (Command::Modes(a), Command::Modes(b)) = (a.command, b.command) else {
            panic!()
        };
        assert_eq!(Provenance::new("modes", &a, &[], None).hash, Provenance::new("modes", &b, &[], None).hash);
        let c = Cli::try_parse_from(["wgexciton", "modes", "--max-modes", "2"]).unwrap();
        let Command::Modes(c) = c.command else { panic!() };
        assert_ne!(Provenance::new("modes", &a, &[], None).hash, Provenance::new("modes", &c, &[], None).hash);
    }

    #[test]
    fn config_round_trip() {
        let cli = Cli::try_parse_from(["wgexciton", "fc", "--length-mm", "0.1:2:8", "--counts", "1e5"]).unwrap();
        let Command::Fc(a) = cli.command else { panic!() };
        let text = toml::to_string(&a).unwrap();
        let b: FcArgs = toml::from_str(&text).unwrap();
        assert_eq!(toml::to_string(&b).unwrap(), text);
        assert_eq!(b.length_mm, "0.1:2:8");
        assert_eq!(b.counts, Some(1e5));
    }
}
