//! `tcpssm` command-line driver.
//!
//! Exit codes: 0 ok, 2 input error, 3 numeric error, 4 instability, 5 verification failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    angle_frequency, bin_frequency, dft, dominant_bin, flop_report, horizon, impulse_response, log_envelope_slope,
    memory_horizon, to_pgm, FlopModel, GroupSelection, TransferFunction,
};
use crate::denominator::{expand_poles, factor_max_modulus};
use crate::error::{Error, Result};
use crate::modulation::{compute_scales, modulate, ModulationMode};
use crate::pole_bank::{base_factors, certify_schur};
use crate::scan::{forward_multi_route, OperatorConfig, OperatorParams, Precision, ScanRoute};
use crate::sequence::TokenSequence;
use crate::tensor_io::{read_tensor, write_tensor, Rng};
use crate::verify::{run_suite, VerifyOptions, REPORT_SCHEMA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_UNSTABLE: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

/// Slack on the `1 - ε` bound when certifying.
pub const CERTIFY_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "tcpssm", version, about = "Token-conditioned pole state-space operator")]
pub struct Cli {
    /// Cap on worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the operator over a `.tcpt` token tensor.
    Scan(ScanArgs),
    /// Check that every denominator's poles lie inside the stability margin.
    Certify(CertifyArgs),
    /// Impulse and frequency response of one group's base denominator.
    Impulse(ImpulseArgs),
    /// Dominant-pole memory maps over an H×W feature map.
    Memmap(MemmapArgs),
    /// Per-token FLOP model against a diagonal selective scan.
    Flops(FlopsArgs),
    /// Run the property suite and print a pass/fail matrix.
    Verify(VerifyArgs),
    /// Write freshly initialized operator parameters.
    GenParams(GenParamsArgs),
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Operator parameters: one operator object or an array of layers.
    #[arg(long)]
    pub params: PathBuf,
    /// Layer to use when the parameter file holds several.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[command(flatten)]
    pub params: ParamsArgs,
    /// `[B, M, E]` or `[B, H, W, E]` tensor.
    #[arg(long)]
    pub input: PathBuf,
    /// Output `.tcpt` path.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated routes: fwd, bwd, colfwd, colbwd.
    #[arg(long, default_value = "fwd")]
    pub routes: String,
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub params: ParamsArgs,
    /// Sample tokens; their modulated denominators are certified too.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImpulseArgs {
    #[command(flatten)]
    pub params: ParamsArgs,
    #[arg(long, default_value_t = 0)]
    pub group: usize,
    #[arg(long, default_value_t = 1024)]
    pub len: usize,
    /// Output directory for `impulse.csv` and `impulse.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MemmapArgs {
    #[command(flatten)]
    pub params: ParamsArgs,
    /// `[H, W, E]` feature map.
    #[arg(long)]
    pub input: PathBuf,
    /// Group index or `all`.
    #[arg(long, default_value = "all")]
    pub group: GroupSelection,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub r: u64,
    #[arg(long)]
    pub r_f: u64,
    /// Baseline state size.
    #[arg(long, default_value_t = 16)]
    pub n_state: u64,
    #[arg(long, default_value_t = 1)]
    pub channels: u64,
    #[arg(long, default_value_t = 1)]
    pub len: u64,
    #[arg(long, default_value_t = 1)]
    pub routes: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `f32` checks the single-precision kernel against the oracle at 1e-4.
    #[arg(long, default_value = "f64")]
    pub precision: Precision,
    /// Override the pole-bank margin inside the stability fuzz.
    #[arg(long)]
    pub mutate_epsilon: Option<f64>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    /// Documented initialization: pole spread, zero heads, silent numerator, D = 1.
    Identity,
    /// Every parameter drawn at random.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Shared,
    Group,
}

#[derive(Debug, Args)]
pub struct GenParamsArgs {
    #[arg(long)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
    #[arg(long, default_value_t = 2)]
    pub real_poles: usize,
    #[arg(long, default_value_t = 1)]
    pub complex_pairs: usize,
    #[arg(long, default_value_t = 4)]
    pub r_f: usize,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Group)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = InitKind::Identity)]
    pub init: InitKind,
    /// Number of layers; more than one writes a JSON array.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A command either fails with an error or finishes with an exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(cli.command))),
        None => dispatch(cli.command),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Scan(a) => cmd_scan(&a),
        Command::Certify(a) => cmd_certify(&a),
        Command::Impulse(a) => cmd_impulse(&a),
        Command::Memmap(a) => cmd_memmap(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::GenParams(a) => cmd_gen_params(&a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{} does not exist", path.display())));
    }
    Ok(())
}

/// Loads one operator from a file holding either an operator object or an array of them.
pub fn load_layer(path: &Path, layer: usize) -> Result<OperatorParams> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let value: Value = serde_json::from_str(&text)?;
    let (v, limit) = match value {
        Value::Array(mut layers) => {
            let n = layers.len();
            if layer >= n {
                return Err(Error::IndexOutOfRange { index: layer, limit: n });
            }
            (layers.swap_remove(layer), n)
        }
        v => (v, 1),
    };
    if layer >= limit {
        return Err(Error::IndexOutOfRange { index: layer, limit });
    }
    let p = OperatorParams::from_json(&v.to_string())?;
    for w in p.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(p)
}

fn load_params(a: &ParamsArgs) -> Result<OperatorParams> {
    load_layer(&a.params, a.layer)
}

fn load_tokens(path: &Path) -> Result<TokenSequence> {
    require_file(path)?;
    TokenSequence::from_tensor(&read_tensor(path)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

pub fn cmd_scan(a: &ScanArgs) -> Result<i32> {
    let p = load_params(&a.params)?;
    let x = load_tokens(&a.input)?;
    let routes = ScanRoute::parse_list(&a.routes, x.len, x.grid)?;
    let o = forward_multi_route(&x, &p, &routes, a.precision)?;
    let t = match x.grid {
        Some((h, w)) => o.to_tensor().reshape(vec![o.batch, h, w, o.channels])?,
        None => o.to_tensor(),
    };
    write_tensor(&a.out, &t)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct CertifyReport {
    schema: &'static str,
    layer: usize,
    epsilon: f64,
    bound: f64,
    tolerance: f64,
    base_max_modulus: Vec<f64>,
    modulated_checked: usize,
    modulated_max_modulus: Option<f64>,
    violations: Vec<String>,
    certified: bool,
}

pub fn cmd_certify(a: &CertifyArgs) -> Result<i32> {
    let p = load_params(&a.params)?;
    let bank = p.bank()?;
    let base = certify_schur(&bank, CERTIFY_TOL)?;
    let mut violations: Vec<String> = base
        .max_modulus
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > base.bound + CERTIFY_TOL)
        .map(|(g, m)| format!("base group {g}: {m}"))
        .collect();
    let mut checked = 0;
    let mut modulated_max = None;
    if let Some(path) = &a.input {
        let x = load_tokens(path)?;
        let scales = compute_scales(&x, &p.heads, p.config.groups)?;
        let poles = modulate(&bank, &scales, p.heads.clamp_radius)?;
        let mut worst = 0.0f64;
        for b in 0..x.batch {
            for t in 0..x.len {
                for g in 0..p.config.groups {
                    let m = factor_max_modulus(&poles.factors(b, t, g))?;
                    worst = worst.max(m);
                    checked += 1;
                    if m > base.bound + CERTIFY_TOL {
                        violations.push(format!("batch {b} token {t} group {g}: {m}"));
                    }
                }
            }
        }
        modulated_max = Some(worst);
    }
    let report = CertifyReport {
        schema: REPORT_SCHEMA,
        layer: a.params.layer,
        epsilon: bank.epsilon(),
        bound: base.bound,
        tolerance: CERTIFY_TOL,
        base_max_modulus: base.max_modulus.clone(),
        modulated_checked: checked,
        modulated_max_modulus: modulated_max,
        certified: violations.is_empty(),
        violations,
    };
    let base_worst = report.base_max_modulus.iter().copied().fold(0.0, f64::max);
    println!(
        "{} layer {}: base max |pole| {base_worst:.12} (bound {:.12}), {} modulated denominators{}",
        if report.certified { "CERTIFIED" } else { "UNSTABLE" },
        report.layer,
        report.bound,
        checked,
        modulated_max.map(|m| format!(", max |pole| {m:.12}")).unwrap_or_default()
    );
    for v in &report.violations {
        println!("  violation: {v}");
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(if report.certified { EXIT_OK } else { EXIT_UNSTABLE })
}

pub fn cmd_impulse(a: &ImpulseArgs) -> Result<i32> {
    let p = load_params(&a.params)?;
    if a.len < 2 {
        return Err(Error::Config("--len must be at least 2".into()));
    }
    if a.group >= p.config.groups {
        return Err(Error::IndexOutOfRange {
            index: a.group,
            limit: p.config.groups,
        });
    }
    let bank = p.bank()?;
    let factors = base_factors(&bank, a.group)?;
    let q = expand_poles(&factors)?[1..].to_vec();
    let tf = TransferFunction::all_pole(q.clone());
    let rho_max = tf.certify()?;
    let h = impulse_response(&tf, a.len);
    let spectrum = dft(&h);
    let bin = dominant_bin(&h);
    let slope = log_envelope_slope(&h, a.len);
    let dominant_angle = factors
        .iter()
        .filter(|f| (f.modulus() - rho_max).abs() <= 1e-12)
        .map(|f| match f {
            crate::pole_bank::Factor::Complex { theta, .. } => *theta,
            _ => 0.0,
        })
        .fold(0.0, f64::max);

    create_dir(&a.out)?;
    let mut csv = String::from("k,h,spectrum_magnitude\n");
    for (k, v) in h.iter().enumerate() {
        csv.push_str(&format!("{k},{v},{}\n", spectrum[k].norm()));
    }
    fs::write(a.out.join("impulse.csv"), csv)?;
    let report = json!({
        "schema": REPORT_SCHEMA,
        "layer": a.params.layer,
        "group": a.group,
        "len": a.len,
        "q": q,
        "rho_max": rho_max,
        "tau": horizon(rho_max),
        "log_envelope_slope": slope,
        "ln_rho_max": rho_max.ln(),
        "dominant_bin": bin,
        "dominant_frequency": bin_frequency(bin, a.len),
        "dominant_pole_frequency": angle_frequency(dominant_angle),
    });
    write_json(&a.out.join("impulse.json"), &report)?;
    println!(
        "group {}: rho_max {rho_max:.6}, envelope slope {}, dominant bin {bin} ({:.6} cycles/sample)",
        a.group,
        slope.map(|s| format!("{s:.6}")).unwrap_or_else(|| "n/a".into()),
        bin_frequency(bin, a.len)
    );
    Ok(EXIT_OK)
}

pub fn cmd_memmap(a: &MemmapArgs) -> Result<i32> {
    let p = load_params(&a.params)?;
    require_file(&a.input)?;
    let x = TokenSequence::from_feature_map(&read_tensor(&a.input)?)?;
    let (h, w) = x.grid.expect("feature maps carry their grid");
    let bank = p.bank()?;
    let scales = compute_scales(&x, &p.heads, p.config.groups)?;
    let poles = modulate(&bank, &scales, p.heads.clamp_radius)?;
    let map = memory_horizon(&poles, 0, (h, w), a.group, a.params.layer)?;
    let markers = map.markers();

    create_dir(&a.out)?;
    let tag = match a.group {
        GroupSelection::All => format!("layer{}_all", a.params.layer),
        GroupSelection::Group(g) => format!("layer{}_g{g}", a.params.layer),
    };
    fs::write(a.out.join(format!("{tag}.csv")), map.to_csv())?;
    let mut ranges = serde_json::Map::new();
    for (name, field) in [("tau", &map.tau), ("osc", &map.osc), ("rho_max", &map.rho_max)] {
        let (img, lo, hi) = to_pgm(field, w, h);
        fs::write(a.out.join(format!("{tag}_{name}.pgm")), img)?;
        ranges.insert(name.into(), json!({ "min": lo, "max": hi }));
    }
    let rc = |t: usize| json!({ "token": t, "row": t / w, "col": t % w });
    let report = json!({
        "schema": REPORT_SCHEMA,
        "layer": a.params.layer,
        "group": a.group,
        "height": h,
        "width": w,
        "ranges": ranges,
        "markers": { "T1": rc(markers.t1), "T2": rc(markers.t2), "T3": rc(markers.t3) },
    });
    write_json(&a.out.join(format!("{tag}.json")), &report)?;
    println!(
        "{tag}: T1 (longest memory) {}, T2 (fastest decay) {}, T3 (strongest oscillation) {}",
        markers.t1, markers.t2, markers.t3
    );
    Ok(EXIT_OK)
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<i32> {
    let rep = flop_report(FlopModel {
        r: a.r,
        r_f: a.r_f,
        n_state: a.n_state,
        channels: a.channels,
        len: a.len,
        routes: a.routes,
    })?;
    println!(
        "per token and channel: operator {} (2r + 3r_f), baseline {} (7N, excludes {})",
        rep.tcp_per_token_channel, rep.baseline_per_token_channel, rep.baseline_excludes
    );
    println!(
        "totals (MAC = 1): {} vs {}; (MAC = 2): {} vs {}; reduction {:.1}%",
        rep.tcp_total_mac1,
        rep.baseline_total_mac1,
        rep.tcp_total_mac2,
        rep.baseline_total_mac2,
        100.0 * rep.reduction
    );
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Wrapped<'a> {
            schema: &'static str,
            #[serde(flatten)]
            report: &'a crate::analysis::FlopReport,
        }
        write_json(
            out,
            &Wrapped {
                schema: REPORT_SCHEMA,
                report: &rep,
            },
        )?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let report = run_suite(&VerifyOptions {
        seed: a.seed,
        precision: a.precision,
        mutate_epsilon: a.mutate_epsilon,
    });
    for c in &report.checks {
        println!("{}", c.line());
    }
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if report.all_passed {
        println!("all {} checks passed", report.checks.len());
        Ok(EXIT_OK)
    } else {
        let failing = report.failing().join(", ");
        println!("failing: {failing}");
        eprintln!("verification failed: {failing}");
        Ok(EXIT_VERIFY)
    }
}

pub fn cmd_gen_params(a: &GenParamsArgs) -> Result<i32> {
    let config = OperatorConfig {
        channels: a.channels,
        groups: a.groups,
        real_poles: a.real_poles,
        complex_pairs: a.complex_pairs,
        r_f: a.r_f,
        epsilon: a.epsilon,
    };
    let mode = match a.mode {
        ModeArg::Shared => ModulationMode::Shared,
        ModeArg::Group => ModulationMode::GroupSpecific,
    };
    if a.layers == 0 {
        return Err(Error::Config("--layers must be positive".into()));
    }
    let root = Rng::new(a.seed);
    let mut layers = Vec::with_capacity(a.layers);
    for l in 0..a.layers {
        let mut rng = root.split(l as u64);
        let p = match a.init {
            InitKind::Identity => OperatorParams::init(config, mode, &mut rng)?,
            InitKind::Random => OperatorParams::random(config, mode, &mut rng)?,
        };
        layers.push(p);
    }
    if layers.len() == 1 {
        layers[0].save(&a.out)?;
    } else {
        let values: Vec<Value> = layers
            .iter()
            .map(|p| serde_json::from_str(&p.to_json()))
            .collect::<std::result::Result<_, _>>()?;
        write_json(&a.out, &values)?;
    }
    Ok(EXIT_OK)
}
