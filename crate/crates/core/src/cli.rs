//! Command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::calibrate::{cross_validate, default_lambda_grid, CvOptions};
use crate::calibrate::{CalibrationConfig, KlSign, Penalty, SolverOptions};
use crate::data::TwoSampleData;
use crate::error::{Error, Result};
use crate::estimators::{
    ComponentSeconds, EstimateResult, EstimationContext, EstimatorConfig, LambdaChoice, Method,
    VarianceMode, DEFAULT_LAMBDA_SCALE,
};
use crate::simulate::{
    draw_samples, gen_population, monte_carlo, summarize, write_records, MonteCarloOptions,
    PopulationSpec, Setup,
};

#[derive(Debug, Parser)]
#[command(name = "rkhs-calib", version, about = "RKHS calibration weights for non-probability samples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the population mean from two sample files.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study and write per-replicate records as CSV.
    Simulate(SimulateArgs),
    /// Select (λ1, λ2) by five-fold cross-validation.
    Cv(CvArgs),
    /// Time every method on simulated data.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KlSignArg {
    AsWritten,
    Reversed,
}

impl From<KlSignArg> for KlSign {
    fn from(s: KlSignArg) -> Self {
        match s {
            KlSignArg::AsWritten => KlSign::AsWritten,
            KlSignArg::Reversed => KlSign::Reversed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetupArg {
    Linear,
    Nonlinear,
}

impl From<SetupArg> for Setup {
    fn from(s: SetupArg) -> Self {
        match s {
            SetupArg::Linear => Setup::Linear,
            SetupArg::Nonlinear => Setup::Nonlinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PenaltyArg {
    Kl,
    L2,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// CSV with columns x1..xd and y.
    #[arg(long)]
    pub sample_a: PathBuf,
    /// CSV with columns x1..xd and pi_b.
    #[arg(long)]
    pub sample_b: PathBuf,
    /// Population size; defaults to the sum of 1/pi_b.
    #[arg(long)]
    pub pop_size: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TuningArgs {
    /// Number or `auto` (cross-validation).
    #[arg(long)]
    pub lambda1: Option<String>,
    /// Number or `auto` (cross-validation).
    #[arg(long)]
    pub lambda2: Option<String>,
    #[arg(long, default_value_t = CalibrationConfig::DEFAULT_XI1)]
    pub xi1: f64,
    #[arg(long, default_value_t = CalibrationConfig::DEFAULT_XI2)]
    pub xi2: f64,
    /// Extra upper bound C_N on the L2 (BSS) ratios.
    #[arg(long)]
    pub cap: Option<f64>,
    #[arg(long, value_enum, default_value_t = KlSignArg::AsWritten)]
    pub kl_sign: KlSignArg,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    #[arg(long, value_enum, default_value_t = SetupArg::Linear)]
    pub setup: SetupArg,
    #[arg(long, default_value_t = 5000)]
    pub n_pop: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub n_a: f64,
    #[arg(long, default_value_t = 100.0)]
    pub n_b: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Repeatable; defaults to every method.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// Bootstrap replicates for the calibration estimators' variance.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub tuning: TuningArgs,
    /// Bootstrap replicates for the HT_KL variance.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV of per-replicate records; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON per-method summary.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value_t = PenaltyArg::Kl)]
    pub penalty: PenaltyArg,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[command(flatten)]
    pub tuning: TuningArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_lambda(raw: Option<&str>, name: &str) -> Result<Option<Option<f64>>> {
    match raw {
        None => Ok(None),
        Some(s) if s.trim().eq_ignore_ascii_case("auto") => Ok(Some(None)),
        Some(s) => {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("--{name} must be a number or `auto`, got `{s}`")))?;
            Ok(Some(Some(v)))
        }
    }
}

impl TuningArgs {
    /// λ choice; unspecified values fall back to `default`.
    pub fn lambdas(&self, default: LambdaChoice) -> Result<LambdaChoice> {
        let l1 = parse_lambda(self.lambda1.as_deref(), "lambda1")?;
        let l2 = parse_lambda(self.lambda2.as_deref(), "lambda2")?;
        match (l1, l2) {
            (None, None) => Ok(default),
            (Some(None), None) | (None, Some(None)) | (Some(None), Some(None)) => Ok(LambdaChoice::Auto),
            (Some(Some(a)), Some(Some(b))) => Ok(LambdaChoice::Fixed { lambda1: a, lambda2: b }),
            _ => Err(Error::Config(
                "give both --lambda1 and --lambda2 as numbers, or use `auto`".into(),
            )),
        }
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions { max_iter: self.max_iter, tol: self.tol, ..Default::default() }
    }

    fn estimator_config(&self, default: LambdaChoice, seed: u64) -> Result<EstimatorConfig> {
        Ok(EstimatorConfig {
            lambdas: self.lambdas(default)?,
            kl_sign: self.kl_sign.into(),
            xi1: self.xi1,
            xi2: self.xi2,
            bss_cap: self.cap,
            solver: self.solver(),
            seed,
            ..Default::default()
        })
    }
}

fn parse_methods(raw: &[String]) -> Result<Vec<Method>> {
    if raw.is_empty() {
        return Ok(Method::ALL.to_vec());
    }
    let mut out = Vec::new();
    for r in raw {
        for part in r.split(',').filter(|p| !p.trim().is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    Ok(out)
}

fn parse_cell(value: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = value.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{value}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, column: column.to_string(), message: "value is not finite".into() });
    }
    Ok(v)
}

struct Table {
    covariates: Vec<String>,
    x: Vec<Vec<f64>>,
    last: Vec<f64>,
}

/// Reads covariate columns plus the named column; rows are numbered from 1
/// after the header.
fn read_table(path: &Path, target: &str, reference: Option<&[String]>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    let target_idx = names.iter().position(|h| h == target).ok_or_else(|| Error::Parse {
        row: 0,
        column: target.to_string(),
        message: format!("missing column in {}", path.display()),
    })?;
    let covariates: Vec<String> = match reference {
        Some(cols) => cols.to_vec(),
        None => names.iter().filter(|h| *h != target).cloned().collect(),
    };
    if covariates.is_empty() {
        return Err(Error::Parse { row: 0, column: "x1".into(), message: "no covariate columns".into() });
    }
    let mut cov_idx = Vec::with_capacity(covariates.len());
    for c in &covariates {
        let idx = names.iter().position(|h| h == c).ok_or_else(|| Error::Parse {
            row: 0,
            column: c.clone(),
            message: format!("missing column in {}", path.display()),
        })?;
        cov_idx.push(idx);
    }
    let mut x = Vec::new();
    let mut last = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let mut xr = Vec::with_capacity(cov_idx.len());
        for (c, &j) in covariates.iter().zip(&cov_idx) {
            xr.push(parse_cell(rec.get(j).unwrap_or(""), row, c)?);
        }
        x.push(xr);
        last.push(parse_cell(rec.get(target_idx).unwrap_or(""), row, target)?);
    }
    Ok(Table { covariates, x, last })
}

fn to_matrix(rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// Reads sample A (`x1..xd, y`) and sample B (`x1..xd, pi_b`).
pub fn load_two_sample(path_a: &Path, path_b: &Path, pop_size: Option<f64>) -> Result<TwoSampleData> {
    let a = read_table(path_a, "y", None)?;
    let b = read_table(path_b, "pi_b", Some(&a.covariates))?;
    for (k, &p) in b.last.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Parse {
                row: k + 1,
                column: "pi_b".into(),
                message: format!("inclusion probability {p} outside (0, 1]"),
            });
        }
    }
    let d = a.covariates.len();
    TwoSampleData::new(
        to_matrix(&a.x, d),
        DVector::from_vec(a.last),
        to_matrix(&b.x, d),
        DVector::from_iterator(b.last.len(), b.last.iter().map(|p| 1.0 / p)),
        pop_size,
    )
}

/// Writes the two samples in the format read by [`load_two_sample`].
pub fn write_two_sample(data: &TwoSampleData, path_a: &Path, path_b: &Path) -> Result<()> {
    let names: Vec<String> = (1..=data.dim()).map(|j| format!("x{j}")).collect();
    let mut wa = csv::Writer::from_path(path_a)?;
    wa.write_record(names.iter().map(String::as_str).chain(["y"]))?;
    for i in 0..data.n_a() {
        let mut rec: Vec<String> = (0..data.dim()).map(|j| data.x_a[(i, j)].to_string()).collect();
        rec.push(data.y_a[i].to_string());
        wa.write_record(&rec)?;
    }
    wa.flush()?;
    let mut wb = csv::Writer::from_path(path_b)?;
    wb.write_record(names.iter().map(String::as_str).chain(["pi_b"]))?;
    for i in 0..data.n_b() {
        let mut rec: Vec<String> = (0..data.dim()).map(|j| data.x_b[(i, j)].to_string()).collect();
        rec.push((1.0 / data.d_b[i]).to_string());
        wb.write_record(&rec)?;
    }
    wb.flush()?;
    Ok(())
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let data = load_two_sample(&args.input.sample_a, &args.input.sample_b, args.input.pop_size)?;
    let methods = parse_methods(&args.methods)?;
    let mut config = args.tuning.estimator_config(LambdaChoice::Auto, args.seed)?;
    config.level = args.level;
    config.variance = match args.bootstrap {
        Some(reps) => VarianceMode::Bootstrap { reps },
        None => VarianceMode::Plugin,
    };
    let ctx = EstimationContext::new(&data, config);
    let results: Vec<EstimateResult> = methods.iter().map(|&m| ctx.run(m)).collect::<Result<_>>()?;
    for r in &results {
        if let Some(d) = &r.diagnostics {
            log::info!("{}: {}", r.method, serde_json::to_string(d)?);
        }
    }
    write_json(&results, args.out.as_deref())
}

fn spec_from(sim: &SimArgs, seed: u64) -> Result<PopulationSpec> {
    PopulationSpec::new(sim.setup.into(), sim.n_pop, sim.n_a, sim.n_b, seed)
}

fn default_scaled() -> LambdaChoice {
    LambdaChoice::Scaled { c1: DEFAULT_LAMBDA_SCALE.0, c2: DEFAULT_LAMBDA_SCALE.1 }
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let options = MonteCarloOptions {
        spec: spec_from(&args.sim, args.seed)?,
        methods: parse_methods(&args.methods)?,
        reps: args.reps,
        bootstrap_reps: args.bootstrap,
        estimator: args.tuning.estimator_config(default_scaled(), args.seed)?,
    };
    let records = monte_carlo(&options)?;
    let mut w = output(args.out.as_deref())?;
    write_records(&records, &mut w)?;
    w.flush()?;
    if let Some(path) = &args.summary {
        write_json(&summarize(&records, &options.methods), Some(path))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CvReport {
    penalty: &'static str,
    lambda1: f64,
    lambda2: f64,
    seconds: f64,
    scores: Vec<CvScore>,
}

#[derive(Debug, Serialize)]
struct CvScore {
    lambda1: f64,
    lambda2: f64,
    score: f64,
}

fn run_cv(args: &CvArgs) -> Result<()> {
    let start = Instant::now();
    let data = load_two_sample(&args.input.sample_a, &args.input.sample_b, args.input.pop_size)?;
    let (penalty, name) = match args.penalty {
        PenaltyArg::Kl => (Penalty::Kl(args.tuning.kl_sign.into()), "kl"),
        PenaltyArg::L2 => (Penalty::L2, "l2"),
    };
    let mut options = CvOptions::new(penalty, args.seed);
    options.folds = args.folds;
    options.xi1 = args.tuning.xi1;
    options.xi2 = args.tuning.xi2;
    options.cap = if penalty == Penalty::L2 { args.tuning.cap } else { None };
    options.solver = args.tuning.solver();
    let grid = default_lambda_grid(data.n_b());
    let (g1, g2) = match args.tuning.lambdas(LambdaChoice::Auto)? {
        LambdaChoice::Fixed { lambda1, lambda2 } => (vec![lambda1], vec![lambda2]),
        _ => (grid.clone(), grid),
    };
    let sel = cross_validate(&data, &g1, &g2, &options)?;
    write_json(
        &CvReport {
            penalty: name,
            lambda1: sel.lambda1,
            lambda2: sel.lambda2,
            seconds: start.elapsed().as_secs_f64(),
            scores: sel
                .scores
                .iter()
                .map(|&(lambda1, lambda2, score)| CvScore { lambda1, lambda2, score })
                .collect(),
        },
        args.out.as_deref(),
    )
}

#[derive(Debug, Serialize)]
struct BenchMethod {
    method: Method,
    mean_seconds: f64,
    failures: usize,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    setup: Setup,
    n_pop: usize,
    n_a0: f64,
    n_b0: f64,
    reps: usize,
    methods: Vec<BenchMethod>,
    mean_components: ComponentSeconds,
    /// Mean KL solve time over mean L2 solve time.
    kl_over_l2: Option<f64>,
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    if args.reps == 0 {
        return Err(Error::Config("bench needs at least one replicate".into()));
    }
    let methods = parse_methods(&args.methods)?;
    let mut config = args.tuning.estimator_config(default_scaled(), args.seed)?;
    config.variance = VarianceMode::Plugin;
    let mut seconds = vec![Vec::new(); methods.len()];
    let mut failures = vec![0; methods.len()];
    let mut comps = Vec::new();
    for rep in 0..args.reps {
        let seed = args.seed.wrapping_add(rep as u64);
        let pop = gen_population(&spec_from(&args.sim, seed)?)?;
        let data = draw_samples(&pop, seed)?;
        // every method gets a fresh context so no shared work is reused
        for (k, &m) in methods.iter().enumerate() {
            let ctx = EstimationContext::new(&data, EstimatorConfig { seed, ..config.clone() });
            match ctx.run(m) {
                Ok(r) => seconds[k].push(r.seconds),
                Err(e) => {
                    log::warn!("bench replicate {rep}: {m} failed: {e}");
                    failures[k] += 1;
                }
            }
            comps.push(ctx.component_seconds());
        }
    }
    let mean_components = ComponentSeconds {
        design: mean_opt(&comps.iter().map(|c| c.design).collect::<Vec<_>>()),
        kl_solve: mean_opt(&comps.iter().map(|c| c.kl_solve).collect::<Vec<_>>()),
        l2_solve: mean_opt(&comps.iter().map(|c| c.l2_solve).collect::<Vec<_>>()),
        outcome_model: mean_opt(&comps.iter().map(|c| c.outcome_model).collect::<Vec<_>>()),
    };
    let kl_over_l2 = match (mean_components.kl_solve, mean_components.l2_solve) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let report = BenchReport {
        setup: args.sim.setup.into(),
        n_pop: args.sim.n_pop,
        n_a0: args.sim.n_a,
        n_b0: args.sim.n_b,
        reps: args.reps,
        methods: methods
            .iter()
            .zip(seconds.iter().zip(&failures))
            .map(|(&method, (s, &failures))| BenchMethod {
                method,
                mean_seconds: if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 },
                failures,
            })
            .collect(),
        mean_components,
        kl_over_l2,
    };
    write_json(&report, args.out.as_deref())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(a) => run_estimate(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Cv(a) => run_cv(a),
        Command::Bench(a) => run_bench(a),
    }
}

/// Runs a parsed command: exit code 0 on success, 1 on input or
/// configuration errors, 2 on numerical failure.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
    }
}
