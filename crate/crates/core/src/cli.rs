//! Batch front end.
//!
//! Every subcommand reads the same [`Params`] block, either from flags or
//! from the `params` object of a [`RunManifest`], and writes its artifacts
//! plus a `summary.json` into one output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corrector::{
    correct, nondegeneracy_diag, remainder_order, Closure, CorrectorOptions, RightInverse, Scheme, DEFAULT_DELTA,
    DEFAULT_MAX_ITER, DEFAULT_REL_TOL,
};
use crate::delaunay::{linear_frequency, orbit_residual, solve_orbit, DelaunayOrbit, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::gauges::{derive_constants, CylField, Dimension};
use crate::gluing::{build_approximate, decay_study, defect, ApproxSolution, EndData, GluingConfig, GridSpec};
use crate::jacobi::{generators, indicial_roots, spectra_csv, GeneratorKind, Growth};

pub const DEFAULT_N: usize = 5;
pub const DEFAULT_M: usize = 2;
pub const DEFAULT_POINTS_PER_PERIOD: usize = 64;

/// Inclusive range of angular modes, written `a..b`, `a..=b` or `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModeRange {
    pub lo: usize,
    pub hi: usize,
}

impl ModeRange {
    pub fn modes(&self) -> Vec<usize> {
        (self.lo..=self.hi).collect()
    }
}

impl FromStr for ModeRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("bad mode label `{x}` in `{s}`"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?),
            None => {
                let k = parse(s)?;
                (k, k)
            }
        };
        if lo > hi {
            return Err(format!("empty mode range `{s}`"));
        }
        Ok(Self { lo, hi })
    }
}

impl TryFrom<String> for ModeRange {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<ModeRange> for String {
    fn from(r: ModeRange) -> String {
        r.to_string()
    }
}

impl fmt::Display for ModeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(x) => vec![x],
        OneOrMany::Many(v) => v,
    })
}

/// Parameters shared by all subcommands; each command reads what it needs.
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Params {
    /// Dimension.
    #[arg(long)]
    #[serde(default)]
    pub n: Option<usize>,
    /// Necksize; `sweep` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    #[serde(default, deserialize_with = "one_or_many")]
    pub eps: Vec<f64>,
    /// Number of neck periods on each side of the cut.
    #[arg(long)]
    #[serde(default)]
    pub m: Option<usize>,
    /// Weight exponent.
    #[arg(long)]
    #[serde(default)]
    pub delta: Option<f64>,
    /// Grid points per neck period.
    #[arg(long = "grid-per-period")]
    #[serde(default)]
    pub grid_per_period: Option<usize>,
    /// Angular modes, e.g. `0..2`.
    #[arg(long)]
    #[serde(default)]
    pub modes: Option<ModeRange>,
    #[arg(long, value_enum)]
    #[serde(default)]
    pub scheme: Option<Scheme>,
    /// Relative tolerance of the corrector.
    #[arg(long)]
    #[serde(default)]
    pub tol: Option<f64>,
    /// Gluing configuration file.
    #[arg(long)]
    #[serde(default)]
    pub config: Option<PathBuf>,
    /// Also fit the defect decay over m = 1..5 (`glue`).
    #[arg(long)]
    #[serde(default)]
    pub decay: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Constants,
    Orbit,
    Sweep,
    Indicial,
    Jacobi,
    Glue,
    Correct,
    Diagnose,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Constants => "constants",
            CommandKind::Orbit => "orbit",
            CommandKind::Sweep => "sweep",
            CommandKind::Indicial => "indicial",
            CommandKind::Jacobi => "jacobi",
            CommandKind::Glue => "glue",
            CommandKind::Correct => "correct",
            CommandKind::Diagnose => "diagnose",
        }
    }
}

/// Where artifacts go: a directory, with optional per-artifact overrides
/// keyed by artifact name (`summary`, `field`, `trace`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub dir: PathBuf,
    #[serde(default)]
    pub files: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: CommandKind,
    #[serde(default)]
    pub params: Params,
    pub outputs: Outputs,
    #[serde(default)]
    pub seed: u64,
}

impl RunManifest {
    /// Parse and schema-check; errors carry the path of the offending key.
    pub fn from_json(s: &str) -> Result<Self> {
        parse_json(s, "manifest")
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(s);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{what} at `{path}`: {}", e.inner()))
    })
}

/// One file produced by a command.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: &'static str,
    pub file: &'static str,
    pub contents: String,
}

/// Artifacts and summary of one run. `failure` is set when the command
/// produced diagnostics but did not meet its goal.
#[derive(Debug)]
pub struct Outcome {
    pub summary: Value,
    pub artifacts: Vec<Artifact>,
    pub failure: Option<Error>,
}

impl Outcome {
    fn ok(summary: Value, artifacts: Vec<Artifact>) -> Self {
        Self { summary, artifacts, failure: None }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Invocation {
    #[command(flatten)]
    pub params: Params,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed for random probes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Parser)]
#[command(name = "qglue", version, about = "Delaunay necks, Jacobi fields and gluing of constant Q-curvature ends")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Gauge constants for a dimension.
    Constants(Invocation),
    /// Periodic orbit of one necksize.
    Orbit(Invocation),
    /// Orbits and spectra over several necksizes.
    Sweep(Invocation),
    /// Floquet exponents of the Jacobi modes.
    Indicial(Invocation),
    /// Explicit Jacobi fields and their checks.
    Jacobi(Invocation),
    /// Approximate glued solution and its defect.
    Glue(Invocation),
    /// Fixed-point correction of the glued solution.
    Correct(Invocation),
    /// Right inverse, remainder and nondegeneracy diagnostics.
    Diagnose(Invocation),
    /// Execute a JSON run manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Parse arguments, execute, write artifacts; returns the exit code.
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
    let (kind, params, outputs, seed) = match cli.command {
        CliCommand::Run { manifest } => match load_manifest(&manifest) {
            Ok(m) => (m.command, m.params, m.outputs, m.seed),
            Err(e) => return report(&e, None),
        },
        CliCommand::Constants(i) => invocation(CommandKind::Constants, i),
        CliCommand::Orbit(i) => invocation(CommandKind::Orbit, i),
        CliCommand::Sweep(i) => invocation(CommandKind::Sweep, i),
        CliCommand::Indicial(i) => invocation(CommandKind::Indicial, i),
        CliCommand::Jacobi(i) => invocation(CommandKind::Jacobi, i),
        CliCommand::Glue(i) => invocation(CommandKind::Glue, i),
        CliCommand::Correct(i) => invocation(CommandKind::Correct, i),
        CliCommand::Diagnose(i) => invocation(CommandKind::Diagnose, i),
    };
    let outcome = match execute(kind, &params, seed) {
        Ok(o) => o,
        Err(e) => return report(&e, Some(&outputs)),
    };
    if let Err(e) = write_outcome(&outcome, &outputs) {
        return report(&e, None);
    }
    println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
    match &outcome.failure {
        Some(e) => report(e, Some(&outputs)),
        None => 0,
    }
}

fn invocation(kind: CommandKind, i: Invocation) -> (CommandKind, Params, Outputs, u64) {
    (kind, i.params, Outputs { dir: i.out, files: BTreeMap::new() }, i.seed)
}

/// Read a manifest; relative paths inside it are resolved against its directory.
pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut m = RunManifest::from_json(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut m.outputs.dir);
    m.outputs.files.values_mut().for_each(resolve);
    if let Some(c) = m.params.config.as_mut() {
        resolve(c);
    }
    Ok(m)
}

fn report(e: &Error, outputs: Option<&Outputs>) -> i32 {
    let code = e.exit_code();
    eprintln!("qglue: {e}");
    if let Some(out) = outputs {
        let body = json!({ "error": e.to_string(), "exitCode": code });
        let _ = std::fs::create_dir_all(&out.dir)
            .and_then(|_| std::fs::write(out.dir.join("error.json"), pretty(&body)));
    }
    code
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).unwrap_or_default();
    s.push('\n');
    s
}

/// Write every artifact and `summary.json`.
pub fn write_outcome(outcome: &Outcome, outputs: &Outputs) -> Result<()> {
    let known: Vec<&str> = outcome.artifacts.iter().map(|a| a.name).chain(["summary"]).collect();
    if let Some(bad) = outputs.files.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("outputs.files: unknown artifact `{bad}` (known: {})", known.join(", "))));
    }
    std::fs::create_dir_all(&outputs.dir)?;
    let summary = Artifact { name: "summary", file: "summary.json", contents: pretty(&outcome.summary) };
    for a in outcome.artifacts.iter().chain(std::iter::once(&summary)) {
        let path = outputs.files.get(a.name).cloned().unwrap_or_else(|| outputs.dir.join(a.file));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, &a.contents)?;
    }
    Ok(())
}

/// Run one command without touching the file system.
pub fn execute(kind: CommandKind, p: &Params, seed: u64) -> Result<Outcome> {
    let mut outcome = match kind {
        CommandKind::Constants => constants(p),
        CommandKind::Orbit => orbit(p),
        CommandKind::Sweep => sweep(p),
        CommandKind::Indicial => indicial(p),
        CommandKind::Jacobi => jacobi(p),
        CommandKind::Glue => glue(p),
        CommandKind::Correct => correct_cmd(p),
        CommandKind::Diagnose => diagnose(p, seed),
    }?;
    if let Value::Object(map) = &mut outcome.summary {
        map.insert("command".into(), json!(kind.name()));
    }
    Ok(outcome)
}

fn dimension(p: &Params) -> Result<Dimension> {
    Dimension::new(p.n.unwrap_or(DEFAULT_N))
}

fn points_per_period(p: &Params) -> Result<usize> {
    let ppp = p.grid_per_period.unwrap_or(DEFAULT_POINTS_PER_PERIOD);
    if ppp < 8 {
        return Err(Error::Config("--grid-per-period must be at least 8".into()));
    }
    Ok(ppp)
}

fn single_eps(p: &Params) -> Result<f64> {
    match p.eps.as_slice() {
        [e] => Ok(*e),
        [] => Err(Error::Config("--eps is required".into())),
        _ => Err(Error::Config("this command takes a single --eps".into())),
    }
}

/// Values printed to four decimals round the upper end of the family
/// upwards; those within this distance above it are read as the constant
/// orbit.
pub const EPS_BAR_SLACK: f64 = 5e-5;

fn snap_eps(n: Dimension, eps: f64) -> f64 {
    let bar = derive_constants(n).eps_bar;
    if eps > bar && eps - bar <= EPS_BAR_SLACK {
        bar
    } else {
        eps
    }
}

fn orbit_for(p: &Params) -> Result<DelaunayOrbit> {
    let n = dimension(p)?;
    solve_orbit(n, snap_eps(n, single_eps(p)?), DEFAULT_TOL)
}

fn artifact(name: &'static str, file: &'static str, contents: String) -> Artifact {
    Artifact { name, file, contents }
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

fn constants(p: &Params) -> Result<Outcome> {
    let c = derive_constants(dimension(p)?);
    let mut summary = to_value(&c)?;
    summary["linearFrequency"] = json!(linear_frequency(&c));
    Ok(Outcome::ok(summary, vec![]))
}

fn orbit_summary(orbit: &DelaunayOrbit, ppp: usize) -> Result<Value> {
    Ok(json!({
        "n": orbit.n(),
        "eps": orbit.eps,
        "period": orbit.period,
        "hamiltonian": orbit.hamiltonian_value,
        "vDdot0": orbit.v_ddot0,
        "residualSup": orbit_residual(orbit, ppp)?,
        "hamiltonianDrift": orbit.hamiltonian_drift(),
        "periodicityDefect": orbit.periodicity_defect(),
    }))
}

fn orbit(p: &Params) -> Result<Outcome> {
    let ppp = points_per_period(p)?;
    let orbit = orbit_for(p)?;
    let summary = orbit_summary(&orbit, ppp)?;
    Ok(Outcome::ok(summary, vec![artifact("orbit", "orbit.json", orbit.to_json(ppp + 1)?)]))
}

fn sweep(p: &Params) -> Result<Outcome> {
    let n = dimension(p)?;
    let ppp = points_per_period(p)?;
    let eps = match p.eps.as_slice() {
        [] => vec![0.3, 0.5, 0.7, derive_constants(n).eps_bar],
        given => given.iter().map(|&e| snap_eps(n, e)).collect(),
    };
    let modes = p.modes.unwrap_or(ModeRange { lo: 0, hi: 2 }).modes();
    let rows = eps
        .par_iter()
        .map(|&e| {
            let orbit = solve_orbit(n, e, DEFAULT_TOL)?;
            Ok((orbit_summary(&orbit, ppp)?, indicial_roots(&orbit, &modes)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = String::from("eps,period,hamiltonian,residualSup,hamiltonianDrift,periodicityDefect\n");
    for (s, _) in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s["eps"], s["period"], s["hamiltonian"], s["residualSup"], s["hamiltonianDrift"], s["periodicityDefect"]
        ));
    }
    let spectra: Vec<_> = rows.iter().map(|(_, s)| s.clone()).collect();
    let summary = json!({
        "orbits": rows.iter().map(|(s, _)| s.clone()).collect::<Vec<_>>(),
        "spectra": to_value(&spectra)?,
    });
    Ok(Outcome::ok(
        summary,
        vec![artifact("orbits", "orbits.csv", table), artifact("spectra", "spectra.csv", spectra_csv(&spectra))],
    ))
}

fn indicial(p: &Params) -> Result<Outcome> {
    let orbit = orbit_for(p)?;
    let modes = p.modes.unwrap_or(ModeRange { lo: 0, hi: 2 }).modes();
    let spectrum = indicial_roots(&orbit, &modes)?;
    let summary = to_value(&spectrum)?;
    Ok(Outcome::ok(summary, vec![artifact("spectrum", "spectrum.json", spectrum.to_json()?)]))
}

fn jacobi(p: &Params) -> Result<Outcome> {
    let ppp = points_per_period(p)?;
    let orbit = orbit_for(p)?;
    let basis = generators(&orbit)?;
    let period = orbit.period;
    let mut fields = Vec::new();
    for kind in GeneratorKind::ALL {
        let growth = match kind.growth() {
            Growth::Decaying | Growth::Growing => Some(basis.measured_growth(kind, -2.0 * period, 4)?),
            _ => None,
        };
        fields.push(json!({
            "kind": kind.label(),
            "mode": kind.mode(),
            "residual": basis.residual(kind, basis.unit_window(kind), ppp)?,
            "growthRate": growth,
        }));
    }
    let periodicity = (0..ppp)
        .map(|i| {
            let t = period * i as f64 / ppp as f64;
            (basis.value(GeneratorKind::ZeroPlus, t + period) - basis.value(GeneratorKind::ZeroPlus, t)).abs()
        })
        .fold(0.0, f64::max);
    let mut table = String::from("t,v0+,v0-,v1+,v1-\n");
    for i in 0..=2 * ppp {
        let t = -period + period * i as f64 / ppp as f64;
        let vals: Vec<String> = GeneratorKind::ALL.iter().map(|k| basis.value(*k, t).to_string()).collect();
        table.push_str(&format!("{t},{}\n", vals.join(",")));
    }
    let summary = json!({
        "n": orbit.n(),
        "eps": orbit.eps,
        "period": period,
        "bPrime": basis.b_prime,
        "tPrime": basis.t_prime,
        "generators": fields,
        "zeroPlusPeriodicity": periodicity,
    });
    Ok(Outcome::ok(summary, vec![artifact("generators", "generators.csv", table)]))
}

/// The gluing configuration: from `--config`, else from the flags with
/// unperturbed ends.
pub fn gluing_config(p: &Params) -> Result<GluingConfig> {
    let cfg = match &p.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let cfg: GluingConfig = parse_json(&text, "config")?;
            if p.n.is_some_and(|n| n != cfg.n) || p.m.is_some_and(|m| m != cfg.m) || !p.eps.is_empty() {
                return Err(Error::Config("--n, --eps and --m conflict with --config".into()));
            }
            cfg
        }
        None => GluingConfig {
            n: p.n.unwrap_or(DEFAULT_N),
            eps: snap_eps(dimension(p)?, single_eps(p)?),
            m: p.m.unwrap_or(DEFAULT_M),
            r0: 1.0,
            end1: EndData::default(),
            end2: EndData::default(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn grid_spec(p: &Params) -> Result<GridSpec> {
    let lmax = match p.modes {
        Some(r) if r.lo != 0 => return Err(Error::Config("gluing modes must start at 0".into())),
        Some(r) => r.hi,
        None => 0,
    };
    Ok(GridSpec { points_per_period: points_per_period(p)?, lmax })
}

fn delta(p: &Params) -> f64 {
    p.delta.unwrap_or(DEFAULT_DELTA)
}

fn field_table(field: &CylField, extra: Option<(&str, &[f64])>) -> String {
    let mut header = vec!["s".to_string()];
    if let Some((name, _)) = extra {
        header.push(name.to_string());
    }
    header.extend(field.modes.iter().map(|m| format!("l{}", m.l)));
    let mut out = header.join(",") + "\n";
    for i in 0..field.n_t {
        let mut row = vec![field.t_at(i).to_string()];
        if let Some((_, col)) = extra {
            row.push(col[i].to_string());
        }
        row.extend(field.modes.iter().map(|m| m.samples[i].to_string()));
        out.push_str(&(row.join(",") + "\n"));
    }
    out
}

fn neck_summary(approx: &ApproxSolution) -> Value {
    json!({
        "n": approx.config.n,
        "eps": approx.config.eps,
        "m": approx.config.m,
        "period": approx.period(),
        "nT": approx.n_t(),
        "spacing": approx.spacing(),
        "lmax": approx.lmax(),
    })
}

fn glue(p: &Params) -> Result<Outcome> {
    let cfg = gluing_config(p)?;
    let grid = grid_spec(p)?;
    let delta = delta(p);
    let approx = build_approximate(&cfg, &grid)?;
    let d = defect(&approx, delta)?;
    let mut summary = neck_summary(&approx);
    summary["delta"] = json!(delta);
    summary["defectSup"] = json!(d.sup);
    summary["defectWeighted"] = json!(d.weighted);
    summary["defectOutsideBand"] = json!(d.outside_band);
    let mut artifacts = vec![
        artifact("field", "field.json", approx.field().to_json()?),
        artifact("defect", "defect.csv", field_table(&d.psi, Some(("chi", &approx.chi)))),
    ];
    if p.decay {
        let study = decay_study(&cfg, &[1, 2, 3, 4, 5], &grid, delta)?;
        summary["decay"] = to_value(&study)?;
        artifacts.push(artifact("decay", "decay.csv", study.to_csv()));
    }
    Ok(Outcome::ok(summary, artifacts))
}

fn corrector_options(p: &Params) -> Result<CorrectorOptions> {
    let opts = CorrectorOptions {
        delta: delta(p),
        scheme: p.scheme.unwrap_or(Scheme::Picard),
        tol: p.tol.unwrap_or(DEFAULT_REL_TOL),
        max_iter: DEFAULT_MAX_ITER,
    };
    if !(opts.tol > 0.0) {
        return Err(Error::Config("--tol must be positive".into()));
    }
    Ok(opts)
}

fn correct_cmd(p: &Params) -> Result<Outcome> {
    let cfg = gluing_config(p)?;
    let opts = corrector_options(p)?;
    let approx = build_approximate(&cfg, &grid_spec(p)?)?;
    let rep = correct(&approx, &opts)?;
    let max_ratio = rep.trace.iter().filter_map(|t| t.ratio).fold(None, |a: Option<f64>, r| Some(a.map_or(r, |a| a.max(r))));
    let mut summary = neck_summary(&approx);
    summary["scheme"] = to_value(&opts.scheme)?;
    summary["delta"] = json!(opts.delta);
    summary["tol"] = json!(opts.tol);
    summary["iterations"] = json!(rep.trace.len() - 1);
    summary["initialDefect"] = json!(rep.initial_defect);
    summary["finalDefect"] = json!(rep.final_defect);
    summary["fullFormResidual"] = json!(rep.full_form_residual);
    summary["maxRatio"] = json!(max_ratio);
    summary["converged"] = json!(rep.converged);
    summary["floorLimited"] = json!(rep.floor_limited);
    summary["correctionSup"] = json!(rep.correction.sup_norm());
    summary["alpha"] = to_value(&rep.alpha)?;
    summary["diagnostics"] = to_value(&rep.diagnostics)?;
    let artifacts = vec![
        artifact("field", "field.json", rep.field.to_json()?),
        artifact("trace", "trace.csv", rep.trace_csv()),
        artifact("diagnostics", "diagnostics.json", pretty(&to_value(&rep.diagnostics)?)),
    ];
    let failure = (!rep.converged).then(|| {
        Error::Numerical(format!("no convergence in {} iterations (defect {:e})", opts.max_iter, rep.final_defect))
    });
    Ok(Outcome { summary, artifacts, failure })
}

/// Smooth random sources: a few Gaussian bumps per mode inside the neck.
pub fn random_sources(proto: &CylField, count: usize, seed: u64) -> Result<Vec<CylField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (proto.t_min, proto.t_max);
    let inner = 0.1 * (hi - lo);
    (0..count)
        .map(|_| {
            let mut f = proto.zeros_like();
            for l in 0..=proto.lmax() {
                let bumps: Vec<(f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (rng.random_range(lo + inner..hi - inner), rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0))
                    })
                    .collect();
                let samples = (0..proto.n_t)
                    .map(|i| {
                        let s = proto.t_at(i);
                        bumps.iter().map(|(c, w, a)| a * (-((s - c) / w).powi(2)).exp()).sum()
                    })
                    .collect();
                f.set_mode(l, samples)?;
            }
            Ok(f)
        })
        .collect()
}

fn diagnose(p: &Params, seed: u64) -> Result<Outcome> {
    let cfg = gluing_config(p)?;
    let opts = corrector_options(p)?;
    let approx = build_approximate(&cfg, &grid_spec(p)?)?;
    let closure = Closure::new(&approx, opts.delta)?;
    let g = RightInverse::new(&approx, &closure, None)?;
    let probes = random_sources(&approx.w, 4, seed)?;
    let consistency = probes.iter().map(|f| g.consistency(f)).collect::<Result<Vec<_>>>()?;
    let g_norm = g.weighted_norm(opts.delta, approx.weight_scale())?;
    let order = remainder_order(&approx, &approx.base_field().scaled(0.1), &[1e-2, 1e-3, 1e-4])?;
    let rep = correct(&approx, &opts)?;
    let sigma_approx = nondegeneracy_diag(&approx, None, opts.delta)?;
    let mut summary = neck_summary(&approx);
    summary["delta"] = json!(opts.delta);
    summary["seed"] = json!(seed);
    summary["exponents"] = to_value(&closure.modes.iter().map(|m| &m.exponents).collect::<Vec<_>>())?;
    summary["rightInverseResidual"] = json!(consistency.iter().copied().fold(0.0, f64::max));
    summary["operatorNorm"] = json!(g_norm);
    summary["condEstimates"] = json!(g.cond_estimates());
    summary["remainderOrder"] = json!(order);
    summary["sigmaMinApproximate"] = json!(sigma_approx);
    summary["sigmaMin"] = json!(rep.diagnostics.sigma_min);
    summary["finalDefect"] = json!(rep.final_defect);
    summary["converged"] = json!(rep.converged);
    Ok(Outcome::ok(summary, vec![artifact("diagnostics", "diagnostics.json", pretty(&to_value(&rep.diagnostics)?))]))
}
