use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use cmi_core::design::Design;
use cmi_core::experiment::{
    coverage_experiment, histogram_csv, length_experiment, scaled_histogram, subsample_seed, ExperimentConfig,
    Method, TestPoint,
};
use cmi_core::model::{read_interval_csv_path, ColumnRoles, IntervalMeanModel, IntervalMedianModel, MomentModel};
use cmi_core::plugin::{plugin_test, PluginConfig};
use cmi_core::pretest::{run_pretest, PretestConfig};
use cmi_core::resampling::RatePlan;
use cmi_core::sim::{simulate_z, ContactPointParams, ZSimConfig};
use cmi_core::{Aggregator, Dataset, KsEngine};

#[derive(Parser)]
#[command(name = "cmi", version, about = "Inference for conditional moment inequalities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test one parameter value.
    Test(TestArgs),
    /// Invert tests over a grid of parameter values.
    Region(RegionArgs),
    /// Coverage and interval-length study on a simulated design.
    Montecarlo(MonteCarloArgs),
    /// Draw from the simulated limit law.
    SimulateZ(SimulateZArgs),
    /// Contact-set estimation and Hessian pre-test.
    Pretest(PretestArgs),
    /// Scaled statistics at a design's boundary, binned.
    Hist(HistArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Mean,
    Median,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TestMethod {
    Estimated,
    Conservative,
    Plugin,
}

impl From<TestMethod> for Method {
    fn from(m: TestMethod) -> Self {
        match m {
            TestMethod::Estimated => Method::Estimated,
            TestMethod::Conservative => Method::Conservative,
            TestMethod::Plugin => Method::Plugin,
        }
    }
}

#[derive(clap::Args)]
struct DataArgs {
    /// Headed CSV with conditioning columns and interval endpoints.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "mean")]
    model: ModelKind,
    /// Conditioning columns.
    #[arg(long, value_delimiter = ',', default_value = "x")]
    x: Vec<String>,
    #[arg(long, default_value = "wl")]
    wl: String,
    #[arg(long, default_value = "wh")]
    wh: String,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<(Dataset, Box<dyn MomentModel>)> {
        let roles = ColumnRoles { x: self.x.clone(), wl: self.wl.clone(), wh: self.wh.clone() };
        let data = read_interval_csv_path(&self.data, &roles)
            .with_context(|| format!("reading {}", self.data.display()))?;
        let model: Box<dyn MomentModel> = match self.model {
            ModelKind::Mean => Box::new(IntervalMeanModel::default()),
            ModelKind::Median => Box::new(IntervalMedianModel::default()),
        };
        Ok((data, model))
    }
}

#[derive(clap::Args)]
struct TuningArgs {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "estimated")]
    method: TestMethod,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subsample draws per block size.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    /// Limit-law draws for the plug-in method.
    #[arg(long, default_value_t = 2000)]
    sims: usize,
}

impl TuningArgs {
    fn config(&self) -> ExperimentConfig {
        let rate_plan = RatePlan { draws: self.draws, ..RatePlan::default() };
        ExperimentConfig {
            rate_plan: rate_plan.clone(),
            plugin: PluginConfig {
                rate_plan,
                zsim: ZSimConfig { n_sims: self.sims, ..ZSimConfig::default() },
                ..PluginConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }
}

#[derive(clap::Args)]
struct TestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Parameter vector, intercept first.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    theta: Vec<f64>,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RegionArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `lo:hi:mesh`, one per free parameter in index order.
    #[arg(long, required = true, allow_hyphen_values = true)]
    grid: Vec<String>,
    /// `k=v` pins parameter `k` (0-based) to `v`.
    #[arg(long, allow_hyphen_values = true)]
    fix: Vec<String>,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MonteCarloArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    design: u32,
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "estimated,conservative,infeasible")]
    methods: Vec<String>,
    /// Also invert the tests and report excess lengths.
    #[arg(long)]
    lengths: bool,
    #[arg(long, default_value_t = 500)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SimulateZArgs {
    /// JSON with `points` (contact-point parameters), `d_y` and an
    /// optional `config`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct PretestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    theta: Vec<f64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct HistArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    design: u32,
    #[arg(long)]
    beta: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 30)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct ZParams {
    points: Vec<ContactPointParams>,
    d_y: usize,
    #[serde(default)]
    config: ZSimConfig,
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn check_arity(model: &dyn MomentModel, data: &Dataset, theta: &[f64]) -> anyhow::Result<()> {
    let k = model.n_params(data.d());
    if theta.len() != k {
        bail!(cmi_core::Error::ParameterArity { expected: k, got: theta.len() });
    }
    Ok(())
}

fn run_test(args: &TestArgs) -> anyhow::Result<()> {
    let (data, model) = args.data.load()?;
    check_arity(model.as_ref(), &data, &args.theta)?;
    let t = &args.tuning;
    let cfg = t.config();
    let s = Aggregator::default();
    let json = match t.method {
        TestMethod::Plugin => {
            let out = plugin_test(model.as_ref(), &data, &args.theta, &s, t.alpha, &cfg.plugin, t.seed)?;
            serde_json::json!({ "theta": args.theta, "alpha": t.alpha, "method": "plugin", "seed": t.seed, "outcome": out })
        }
        m => {
            let engine = KsEngine::new(data.x());
            let point = TestPoint::new(model.as_ref(), &data, &engine, &args.theta, s)?;
            let seed = subsample_seed(t.seed);
            let out = if m == TestMethod::Estimated {
                point.sample.adaptive_test(t.alpha, &cfg.rate_plan, seed)?
            } else {
                point.sample.conservative_test(t.alpha, &cfg.rate_plan, seed)?
            };
            serde_json::json!({
                "theta": args.theta,
                "alpha": t.alpha,
                "method": Method::from(m),
                "seed": t.seed,
                "rate_plan": cfg.rate_plan,
                "outcome": out,
            })
        }
    };
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&json)? + "\n"))
}

fn parse_grid(s: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!(cmi_core::Error::Input(format!("grid {s:?} is not lo:hi:mesh")));
    }
    let v = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| cmi_core::Error::Input(format!("grid {s:?} has a non-numeric part")))?;
    if v.iter().any(|x| !x.is_finite()) || v[2] <= 0.0 || v[1] < v[0] {
        bail!(cmi_core::Error::Input(format!("grid {s:?} needs lo <= hi and mesh > 0")));
    }
    Ok((v[0], v[1], v[2]))
}

fn parse_fix(s: &str) -> anyhow::Result<(usize, f64)> {
    let bad = || cmi_core::Error::Input(format!("--fix {s:?} is not k=v"));
    let (k, v) = s.split_once('=').ok_or_else(bad)?;
    Ok((k.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
}

fn run_region(args: &RegionArgs) -> anyhow::Result<()> {
    let (data, model) = args.data.load()?;
    let k = model.n_params(data.d());
    let mut fixed: Vec<Option<f64>> = vec![None; k];
    for f in &args.fix {
        let (i, v) = parse_fix(f)?;
        if i >= k {
            bail!(cmi_core::Error::Input(format!("--fix index {i} but the model has {k} parameters")));
        }
        fixed[i] = Some(v);
    }
    let free: Vec<usize> = (0..k).filter(|&i| fixed[i].is_none()).collect();
    if free.len() != args.grid.len() {
        bail!(cmi_core::Error::Input(format!(
            "{} free parameters but {} --grid values",
            free.len(),
            args.grid.len()
        )));
    }
    let axes: Vec<Vec<f64>> = args
        .grid
        .iter()
        .map(|g| {
            let (lo, hi, mesh) = parse_grid(g)?;
            let m = ((hi - lo) / mesh + 1e-9).floor() as usize;
            Ok((0..=m).map(|i| lo + i as f64 * mesh).collect())
        })
        .collect::<anyhow::Result<_>>()?;
    let t = &args.tuning;
    let cfg = t.config();
    let engine = KsEngine::new(data.x());
    let mut csv = (0..k).map(|i| format!("theta{i}")).collect::<Vec<_>>().join(",");
    csv.push_str(",reject,statistic,critical_value\n");
    let total: usize = axes.iter().map(Vec::len).product();
    for code in 0..total {
        let mut theta: Vec<f64> = fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
        let mut c = code;
        for (a, &i) in free.iter().enumerate().rev() {
            theta[i] = axes[a][c % axes[a].len()];
            c /= axes[a].len();
        }
        let point = TestPoint::new(model.as_ref(), &data, &engine, &theta, cfg.aggregator)?;
        let d = point.decide(t.method.into(), t.alpha, &cfg, 0.5, t.seed)?;
        let cells: Vec<String> = theta.iter().map(f64::to_string).collect();
        csv.push_str(&format!("{},{},{},{}\n", cells.join(","), d.reject, d.statistic, d.critical_value));
    }
    emit(args.out.as_deref(), &csv)
}

fn run_montecarlo(args: &MonteCarloArgs) -> anyhow::Result<()> {
    let design = Design::from_index(args.design)?;
    let methods = args.methods.iter().map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>, _>>()?;
    let cfg = ExperimentConfig { rate_plan: RatePlan { draws: args.draws, ..RatePlan::default() }, ..ExperimentConfig::default() };
    let mut report = coverage_experiment(design, &args.n, &methods, &args.alpha, args.reps, args.seed, &cfg)?;
    if args.lengths {
        let l = length_experiment(design, &args.n, &methods, &args.alpha, args.reps, args.seed, &cfg)?;
        report.lengths = l.lengths;
        report.wall_time_secs += l.wall_time_secs;
    }
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn run_simulate_z(args: &SimulateZArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.params).with_context(|| format!("reading {}", args.params.display()))?;
    let mut p: ZParams = serde_json::from_str(&text).map_err(cmi_core::Error::from)?;
    if let Some(seed) = args.seed {
        p.config.seed = seed;
    }
    if let Some(sims) = args.sims {
        p.config.n_sims = sims;
    }
    let z = simulate_z(&p.points, p.d_y, &p.config)?;
    for w in &z.warnings {
        eprintln!("warning: {w}");
    }
    let mut csv = (0..p.d_y).map(|j| format!("z{j}")).collect::<Vec<_>>().join(",");
    csv.push('\n');
    for i in 0..z.samples.rows() {
        let row: Vec<String> = z.samples.row(i).iter().map(f64::to_string).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    emit(args.out.as_deref(), &csv)
}

fn run_pretest_cmd(args: &PretestArgs) -> anyhow::Result<()> {
    let (data, model) = args.data.load()?;
    check_arity(model.as_ref(), &data, &args.theta)?;
    let cfg = PretestConfig { bandwidth: args.bandwidth, ..PretestConfig::default() };
    let report = run_pretest(model.as_ref(), &data, &args.theta, &cfg)?;
    let json = serde_json::json!({ "theta": args.theta, "passes": report.passes(), "config": cfg, "report": report });
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&json)? + "\n"))
}

fn run_hist(args: &HistArgs) -> anyhow::Result<()> {
    let design = Design::from_index(args.design)?;
    let h = scaled_histogram(design, &args.n, args.beta, args.reps, args.seed, args.bins)?;
    emit(args.out.as_deref(), &histogram_csv(&h))
}

/// 2 for bad input, 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use cmi_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::SingularFit { .. } => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Test(a) => run_test(a),
        Command::Region(a) => run_region(a),
        Command::Montecarlo(a) => run_montecarlo(a),
        Command::SimulateZ(a) => run_simulate_z(a),
        Command::Pretest(a) => run_pretest_cmd(a),
        Command::Hist(a) => run_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_fix_parsing() {
        assert_eq!(parse_grid("-1:1:0.5").unwrap(), (-1.0, 1.0, 0.5));
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1").is_err());
        assert_eq!(parse_fix("1=0.25").unwrap(), (1, 0.25));
        assert!(parse_fix("a=1").is_err());
    }

    #[test]
    fn input_errors_map_to_two() {
        let e = anyhow::anyhow!(cmi_core::Error::Input("x".into()));
        assert_eq!(exit_code(&e), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
