use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use lassb::data::{load_blocks, load_blocks_with_order, load_edges, BlockPartition, InteractionData};
use lassb::em::{e_step, fit, fit_from, EStepOptions, EmError, FitConfig, FitResult};
use lassb::inference::{
    bootstrap_ci, derived_measures, gof_envelope, BootstrapConfig, InferenceError, DEFAULT_CUTOFF_MAX,
};
use lassb::params::ParamSet;
use lassb::sampler::{sample_network, SimConfig};
use lassb::specfun::{Integrator, McSpec, QuadratureSpec};

const DEFAULT_SEED: u64 = 20_190_501;

#[derive(Parser, Debug)]
#[command(name = "lassb", version, about = "Fit, simulate and check latent arc strength blockmodels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit by EM; writes params.json and trace.csv.
    Fit(Common),
    /// Simulate networks over the observed dyads; writes edges_<k>.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of networks.
        #[arg(long, default_value_t = 1)]
        reps: u64,
    },
    /// Fit, then form parametric bootstrap intervals; writes ci.csv.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 300)]
        bootstrap_reps: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Simulation envelopes for degree, asymmetry and triangle statistics;
    /// writes gof.csv.
    Gof {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        gof_reps: usize,
        #[arg(long, default_value_t = DEFAULT_CUTOFF_MAX)]
        cutoff_max: u64,
    },
    /// Recovered dyad quantities and block measures; writes dyads.csv and
    /// blocks.csv.
    Derive(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `src,dst,count` CSV.
    #[arg(long)]
    edges: PathBuf,
    /// `node,block` CSV.
    #[arg(long)]
    blocks: PathBuf,
    /// Comma-separated block labels, reference block first.
    #[arg(long, value_delimiter = ',')]
    block_order: Option<Vec<String>>,
    /// Parameters: a params.json from `fit`, or a bare parameter object.
    /// Required by simulate, gof and derive; a starting value for fit and
    /// bootstrap.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads; outputs do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Fallback::Quad)]
    fallback: Fallback,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Fallback {
    Quad,
    Mc,
}

/// Exit status and a short machine-readable kind.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn input(message: impl ToString) -> Self {
        Self { code: 2, kind: "input", message: message.to_string() }
    }

    fn convergence(message: impl ToString) -> Self {
        Self { code: 3, kind: "convergence", message: message.to_string() }
    }

    fn internal(message: impl ToString) -> Self {
        Self { code: 4, kind: "internal", message: message.to_string() }
    }
}

impl From<EmError> for Failure {
    fn from(e: EmError) -> Self {
        if e.is_internal() {
            Failure::internal(e)
        } else {
            Failure::input(e)
        }
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Fit(e) => e.into(),
            InferenceError::NotConverged | InferenceError::TooManyFailures { .. } => Failure::convergence(e),
            InferenceError::Io(_) => Failure::input(e),
            InferenceError::Sample(_) | InferenceError::Param(_) | InferenceError::Csv(_) => Failure::internal(e),
            InferenceError::InvalidConfig(_) | InferenceError::Length { .. } => Failure::input(e),
        }
    }
}

/// Loaded inputs plus the header stamped on every output.
struct Ctx {
    common: Common,
    data: InteractionData,
    params: Option<ParamSet>,
    header: Header,
}

struct Header {
    command: &'static str,
    seed: u64,
    hash: String,
}

impl Header {
    fn line(&self) -> String {
        format!("lassb {} command={} seed={} config={}", env!("CARGO_PKG_VERSION"), self.command, self.seed, self.hash)
    }

    fn json(&self) -> serde_json::Value {
        serde_json::json!({
            "tool": "lassb",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.hash,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))
}

/// Hash of the settings that affect results and of the input file contents.
/// Paths, `--out` and `--threads` are left out so that reruns elsewhere or on
/// more threads carry the same header.
fn config_hash(command: &'static str, c: &Common, extra: &[(&str, String)]) -> Result<String, Failure> {
    let mut h = Sha256::new();
    let mut field = |k: &str, v: &[u8]| {
        h.update(k.as_bytes());
        h.update((v.len() as u64).to_le_bytes());
        h.update(v);
    };
    field("command", command.as_bytes());
    field("edges", &read_file(&c.edges)?);
    field("blocks", &read_file(&c.blocks)?);
    if let Some(p) = &c.params {
        field("params", &read_file(p)?);
    }
    field("block_order", c.block_order.as_ref().map(|o| o.join(",")).unwrap_or_default().as_bytes());
    field("epsilon", &c.epsilon.to_le_bytes());
    field("tol", &c.tol.to_le_bytes());
    field("max_iter", &(c.max_iter as u64).to_le_bytes());
    field("seed", &c.seed.to_le_bytes());
    field("fallback", format!("{:?}", c.fallback).as_bytes());
    for (k, v) in extra {
        field(k, v.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

fn load_params(path: &Path) -> Result<ParamSet, Failure> {
    let text = read_file(path)?;
    let mut v: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if let Some(inner) = v.get_mut("params") {
        v = inner.take();
    }
    ParamSet::from_json(v).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load(command: &'static str, common: Common, extra: &[(&str, String)], need_params: bool) -> Result<Ctx, Failure> {
    let blocks: BlockPartition = match &common.block_order {
        Some(order) => load_blocks_with_order(&common.blocks, order),
        None => load_blocks(&common.blocks),
    }
    .map_err(Failure::input)?;
    let data = load_edges(&common.edges, Arc::new(blocks)).map_err(Failure::input)?;
    let params = common.params.as_deref().map(load_params).transpose()?;
    if need_params && params.is_none() {
        return Err(Failure::input(format!("{command} needs --params")));
    }
    if let Some(p) = &params {
        if p.num_blocks() != data.num_blocks() {
            return Err(Failure::input(format!(
                "params have {} blocks, data have {}",
                p.num_blocks(),
                data.num_blocks()
            )));
        }
    }
    let hash = config_hash(command, &common, extra)?;
    Ok(Ctx { data, params, header: Header { command, seed: common.seed, hash }, common })
}

impl Ctx {
    fn estep_options(&self) -> EStepOptions {
        let fallback = match self.common.fallback {
            Fallback::Quad => Integrator::Quadrature(QuadratureSpec::default()),
            Fallback::Mc => Integrator::MonteCarlo(McSpec { seed: self.common.seed, ..McSpec::default() }),
        };
        EStepOptions { fallback, ..EStepOptions::default() }
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            epsilon: self.common.epsilon,
            tol: self.common.tol,
            max_iter: self.common.max_iter,
            estep: self.estep_options(),
            ..FitConfig::default()
        }
    }

    fn fit(&self) -> Result<FitResult, Failure> {
        let cfg = self.fit_config();
        Ok(match &self.params {
            Some(start) => fit_from(&self.data, start.clone(), Vec::new(), &cfg)?,
            None => fit(&self.data, &cfg)?,
        })
    }

    /// Creates `name` under `--out` and writes the header line.
    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        std::fs::create_dir_all(&self.common.out)
            .map_err(|e| Failure::input(format!("cannot create {}: {e}", self.common.out.display())))?;
        let path = self.common.out.join(name);
        let file = File::create(&path).map_err(|e| Failure::input(format!("cannot create {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        if !name.ends_with(".json") {
            writeln!(w, "# {}", self.header.line()).map_err(io_failure)?;
        }
        Ok(w)
    }
}

fn io_failure(e: impl ToString) -> Failure {
    Failure::input(format!("write failed: {}", e.to_string()))
}

fn finish(mut w: BufWriter<File>) -> Result<(), Failure> {
    w.flush().map_err(io_failure)
}

fn write_fit(ctx: &Ctx, f: &FitResult) -> Result<(), Failure> {
    let mut json = f.to_json();
    json["header"] = ctx.header.json();
    let mut w = ctx.create("params.json")?;
    serde_json::to_writer_pretty(&mut w, &json).map_err(io_failure)?;
    writeln!(w).map_err(io_failure)?;
    finish(w)?;

    let mut w = ctx.create("trace.csv")?;
    writeln!(w, "step,loglik").map_err(io_failure)?;
    for (k, ll) in f.loglik_trace.iter().enumerate() {
        writeln!(w, "{k},{ll:e}").map_err(io_failure)?;
    }
    finish(w)
}

fn not_converged(f: &FitResult) -> Failure {
    Failure::convergence(format!("EM did not converge in {} M-steps", f.iterations))
}

fn run_fit(ctx: Ctx) -> Result<(), Failure> {
    let f = ctx.fit()?;
    write_fit(&ctx, &f)?;
    if !f.converged {
        return Err(not_converged(&f));
    }
    Ok(())
}

fn run_simulate(ctx: Ctx, reps: u64) -> Result<(), Failure> {
    let p = ctx.params.as_ref().expect("checked on load");
    let width = reps.saturating_sub(1).to_string().len();
    for k in 0..reps {
        let net = sample_network(&ctx.data, p, SimConfig::new(ctx.common.seed, k)).map_err(Failure::internal)?;
        let mut w = ctx.create(&format!("edges_{k:0width$}.csv"))?;
        net.write_edges(&mut w).map_err(io_failure)?;
        finish(w)?;
    }
    Ok(())
}

fn run_bootstrap(ctx: Ctx, reps: usize, level: f64) -> Result<(), Failure> {
    let cfg = BootstrapConfig { reps, level, seed: ctx.common.seed, fit: ctx.fit_config() };
    cfg.validate()?;
    let f = ctx.fit()?;
    if !f.converged {
        return Err(not_converged(&f));
    }
    let result = bootstrap_ci(&ctx.data, &f, &cfg)?;
    let mut w = ctx.create("ci.csv")?;
    result.write_csv(&mut w)?;
    finish(w)?;
    if result.failures > 0 {
        eprintln!("{} of {} replicates dropped", result.failures, result.reps);
    }
    Ok(())
}

fn run_gof(ctx: Ctx, reps: usize, cutoff_max: u64) -> Result<(), Failure> {
    let p = ctx.params.as_ref().expect("checked on load");
    let report = gof_envelope(&ctx.data, p, reps, ctx.common.seed, cutoff_max)?;
    let mut w = ctx.create("gof.csv")?;
    report.write_csv(&mut w)?;
    finish(w)
}

fn run_derive(ctx: Ctx) -> Result<(), Failure> {
    let p = ctx.params.as_ref().expect("checked on load");
    let st = e_step(&ctx.data, p, &ctx.estep_options())?;
    let d = derived_measures(&ctx.data, p, &st)?;
    let mut w = csv::Writer::from_writer(ctx.create("dyads.csv")?);
    for row in &d.dyads {
        w.serialize(row).map_err(io_failure)?;
    }
    finish(w.into_inner().map_err(io_failure)?)?;

    let mut w = csv::Writer::from_writer(ctx.create("blocks.csv")?);
    for m in d.table.measures() {
        w.serialize(m).map_err(io_failure)?;
    }
    finish(w.into_inner().map_err(io_failure)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = match &cli.command {
        Command::Fit(c) | Command::Derive(c) => c.threads,
        Command::Simulate { common, .. } | Command::Bootstrap { common, .. } | Command::Gof { common, .. } => {
            common.threads
        }
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::internal)?;
    }
    match cli.command {
        Command::Fit(c) => run_fit(load("fit", c, &[], false)?),
        Command::Simulate { common, reps } => {
            run_simulate(load("simulate", common, &[("reps", reps.to_string())], true)?, reps)
        }
        Command::Bootstrap { common, bootstrap_reps, level } => {
            let extra = [("bootstrap_reps", bootstrap_reps.to_string()), ("level", level.to_string())];
            run_bootstrap(load("bootstrap", common, &extra, false)?, bootstrap_reps, level)
        }
        Command::Gof { common, gof_reps, cutoff_max } => {
            let extra = [("gof_reps", gof_reps.to_string()), ("cutoff_max", cutoff_max.to_string())];
            run_gof(load("gof", common, &extra, true)?, gof_reps, cutoff_max)
        }
        Command::Derive(c) => run_derive(load("derive", c, &[], true)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::json!({ "error": f.kind, "code": f.code, "message": f.message }));
            ExitCode::from(f.code)
        }
    }
}
