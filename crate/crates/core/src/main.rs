use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dr_cme::datagen::{write_csv, DgpFamily, DgpSpec, ZMode};
use dr_cme::experiments::{run_suite, summarize, write_suite_outputs, ExperimentConfig, Suite};
use dr_cme::matching::Caliper;
use dr_cme::cme::Regularizer;
use dr_cme::statistics::{DettArms, DettNormalization, DettPlugIn, StatisticKind};
use dr_cme::{par, Arm, Error};

/// Environment variable holding the worker count.
const THREADS_ENV: &str = "DRCME_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "dr-cme",
    version,
    about = "Doubly robust counterfactual mean embeddings and distributional treatment-effect tests",
    after_help = "Every flag can also be set in a TOML file passed with --config; flags override the file.\nThe worker count defaults to $DRCME_THREADS when set."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embedding error against a counterfactual oracle over a grid of n.
    FitConvergence(ConvergenceArgs),
    /// Rejection rates on the effect DGP over a grid of effect sizes.
    Power(PowerArgs),
    /// Rejection rates on a counterfactual CSV under null and observed worlds.
    Calibrate(CalibrateArgs),
    /// One permutation test on a CSV file or a simulated draw.
    Test(TestArgs),
    /// Write one DGP draw to CSV.
    Gen(GenArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for result CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides $DRCME_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Significance level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Write zero runtimes so reruns are byte-identical.
    #[arg(long)]
    no_runtime: bool,
}

#[derive(Args, Debug, Default)]
struct DgpFlags {
    /// a | b | effect
    #[arg(long)]
    dgp: Option<String>,
    /// Sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Effect size.
    #[arg(long)]
    beta: Option<f64>,
    /// one | bernoulli | uniform
    #[arg(long)]
    z_mode: Option<String>,
    /// Outcome noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Covariate scale shift of the randomised design.
    #[arg(long)]
    dgp_alpha: Option<f64>,
    /// Outcome noise scale of the randomised design.
    #[arg(long)]
    sigma_prime: Option<f64>,
    /// Treatment probability of the randomised design.
    #[arg(long)]
    treat_prob: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct TestFlags {
    /// Statistics, comma separated: date, dr-date, dett, dr-dett, baseline.
    #[arg(long, value_delimiter = ',')]
    stat: Vec<String>,
    /// Number of permuted statistics.
    #[arg(long)]
    m: Option<usize>,
    /// Number of non-identity train labellings.
    #[arg(long)]
    n_perms: Option<usize>,
    /// Fraction of matched sets in the train fold.
    #[arg(long)]
    ratio: Option<f64>,
    /// Caliper in logit units, `none`, or `<k>sd` for k standard deviations.
    #[arg(long)]
    caliper: Option<String>,
    #[arg(long)]
    controls_per_set: Option<usize>,
    /// Kernel ridge regulariser (default: mean Gram diagonal / sqrt(n_t)).
    #[arg(long)]
    lambda: Option<f64>,
    /// weighted | self | cme
    #[arg(long)]
    dett_plug_in: Option<String>,
    /// Counterfactual arm of the DETT statistics: treated | control.
    #[arg(long)]
    dett_target: Option<String>,
    /// Propensity clipping threshold.
    #[arg(long)]
    clip_delta: Option<f64>,
    /// Ridge penalty of the mean baseline's outcome regressions.
    #[arg(long)]
    baseline_ridge: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct CsvFlags {
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    treatment: Option<String>,
    /// Outcome column(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    outcome: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    y0: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    y1: Vec<String>,
    /// True propensity column.
    #[arg(long)]
    propensity: Option<String>,
    /// Covariate columns (default: every unassigned column).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    /// Keep rows with extreme propensities.
    #[arg(long)]
    no_trim: bool,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    dgp: DgpFlags,
    #[command(flatten)]
    test: TestFlags,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n_grid: Vec<usize>,
    #[arg(long)]
    oracle_draws: Option<usize>,
}

#[derive(Args, Debug)]
struct PowerArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    dgp: DgpFlags,
    #[command(flatten)]
    test: TestFlags,
    /// Effect sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    beta_grid: Vec<f64>,
    /// Effect multiplier modes, comma separated.
    #[arg(long, value_delimiter = ',')]
    z_modes: Vec<String>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    csv: CsvFlags,
    #[command(flatten)]
    test: TestFlags,
    /// Fraction of rows drawn per replicate.
    #[arg(long)]
    subsample: Option<f64>,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    csv: CsvFlags,
    #[command(flatten)]
    dgp: DgpFlags,
    #[command(flatten)]
    test: TestFlags,
    /// text | json
    #[arg(long, default_value = "text")]
    format: String,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    dgp: DgpFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_base(path: &Option<PathBuf>, suite: Suite) -> Result<ExperimentConfig, Error> {
    let mut c = match path {
        Some(p) => ExperimentConfig::from_toml_file(p)?,
        None => ExperimentConfig::default(),
    };
    c.suite = suite;
    Ok(c)
}

fn apply_common(c: &mut ExperimentConfig, a: &Common) {
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = &a.out {
        c.output_dir = v.clone();
    }
    if let Some(v) = a.threads {
        c.threads = Some(v);
    }
    if let Some(v) = a.replicates {
        c.replicates = v;
    }
    if let Some(v) = a.alpha {
        c.alpha = v;
    }
    if a.no_runtime {
        c.record_runtime = false;
    }
}

fn parse_dgp(s: &str) -> Result<DgpFamily, Error> {
    DgpFamily::parse(s).ok_or_else(|| config_err(format!("unknown DGP `{s}` (expected a, b or effect)")))
}

fn parse_z(s: &str) -> Result<ZMode, Error> {
    ZMode::parse(s).ok_or_else(|| config_err(format!("unknown z mode `{s}` (expected one, bernoulli or uniform)")))
}

fn apply_dgp(c: &mut ExperimentConfig, a: &DgpFlags) -> Result<(), Error> {
    if let Some(v) = &a.dgp {
        c.dgp = parse_dgp(v)?;
    }
    if let Some(v) = a.n {
        c.n = v;
    }
    if let Some(v) = a.beta {
        c.params.beta = v;
    }
    if let Some(v) = &a.z_mode {
        c.params.z_mode = parse_z(v)?;
    }
    if let Some(v) = a.sigma {
        c.params.sigma = v;
    }
    if let Some(v) = a.dgp_alpha {
        c.params.alpha = v;
    }
    if let Some(v) = a.sigma_prime {
        c.params.sigma_prime = v;
    }
    if let Some(v) = a.treat_prob {
        c.params.treat_prob = v;
    }
    Ok(())
}

fn parse_arm(s: &str) -> Result<Arm, Error> {
    match s.to_ascii_lowercase().as_str() {
        "treated" | "1" => Ok(Arm::Treated),
        "control" | "0" => Ok(Arm::Control),
        _ => Err(config_err(format!("unknown arm `{s}` (expected treated or control)"))),
    }
}

fn apply_test(c: &mut ExperimentConfig, a: &TestFlags) -> Result<(), Error> {
    if !a.stat.is_empty() {
        c.statistics = a
            .stat
            .iter()
            .map(|s| StatisticKind::parse(s).ok_or_else(|| config_err(format!("unknown statistic `{s}`"))))
            .collect::<Result<_, _>>()?;
    }
    let t = &mut c.test;
    if let Some(v) = a.m {
        t.plan.m = v;
    }
    if let Some(v) = a.n_perms {
        t.plan.n_train_perms = v;
    }
    if let Some(v) = a.ratio {
        t.plan.train_ratio = v;
    }
    if let Some(v) = &a.caliper {
        t.caliper = if v == "none" {
            Caliper::None
        } else if let Some(k) = v.strip_suffix("sd") {
            Caliper::StdMultiple(k.parse().map_err(|_| config_err(format!("bad caliper `{v}`")))?)
        } else {
            Caliper::Fixed(v.parse().map_err(|_| config_err(format!("bad caliper `{v}`")))?)
        };
    }
    if let Some(v) = a.controls_per_set {
        t.controls_per_set = v;
    }
    if let Some(v) = a.lambda {
        t.model.lambda = Regularizer::Fixed(v);
    }
    if let Some(v) = &a.dett_plug_in {
        t.model.dett_plug_in = match v.as_str() {
            "weighted" | "count" => DettPlugIn::Weighted(DettNormalization::Count),
            "self" => DettPlugIn::Weighted(DettNormalization::SelfNormalized),
            "cme" => DettPlugIn::Cme,
            _ => return Err(config_err(format!("unknown DETT plug-in `{v}`"))),
        };
    }
    if let Some(v) = &a.dett_target {
        let target = parse_arm(v)?;
        t.model.dett_arms = DettArms {
            target,
            population: target.other(),
        };
    }
    if let Some(v) = a.clip_delta {
        t.model.logistic.clip_delta = v;
    }
    if let Some(v) = a.baseline_ridge {
        t.model.baseline_ridge = v;
    }
    Ok(())
}

fn apply_csv(c: &mut ExperimentConfig, a: &CsvFlags) {
    if let Some(v) = &a.csv {
        c.csv = Some(v.clone());
    }
    let s = &mut c.schema;
    if let Some(v) = &a.treatment {
        s.treatment = v.clone();
    }
    if !a.outcome.is_empty() {
        s.outcomes = a.outcome.clone();
    }
    if !a.y0.is_empty() {
        s.y0 = Some(a.y0.clone());
    }
    if !a.y1.is_empty() {
        s.y1 = Some(a.y1.clone());
    }
    if let Some(v) = &a.propensity {
        s.propensity = Some(v.clone());
    }
    if !a.covariates.is_empty() {
        s.covariates = Some(a.covariates.clone());
    }
    if !a.exclude.is_empty() {
        s.exclude = a.exclude.clone();
    }
    if a.no_trim {
        s.trim = None;
    }
}

fn init_threads(c: &ExperimentConfig) -> Result<(), Error> {
    let threads = match c.threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| config_err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(config_err("thread count must be positive"));
        }
        par::init_workers(t);
    }
    Ok(())
}

fn run_and_write(config: ExperimentConfig) -> Result<(), Error> {
    config.validate()?;
    init_threads(&config)?;
    let rows = run_suite(&config)?;
    let name = config.suite.name();
    let (results, summary) = write_suite_outputs(&rows, &config.output_dir, name)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "wrote {} rows to {}", rows.len(), results.display())?;
    writeln!(out, "wrote summary to {}", summary.display())?;
    for s in summarize(&rows) {
        match s.rejection_rate {
            Some(rate) => writeln!(
                out,
                "{:<22} {:<10} {:>8} rejection_rate={:.3} (se {:.3}, R={})",
                s.statistic,
                s.setting,
                s.grid_point,
                rate,
                s.rejection_std_error.unwrap_or(0.0),
                s.replicates
            )?,
            None => writeln!(
                out,
                "{:<22} {:<10} {:>8} median={:.5} mean={:.5} (se {:.5}, R={})",
                s.statistic, s.setting, s.grid_point, s.median, s.mean, s.std_error, s.replicates
            )?,
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::FitConvergence(a) => {
            let mut c = load_base(&a.common.config, Suite::FitConvergence)?;
            if a.common.config.is_none() {
                c.dgp = DgpFamily::DgpAConfounded;
                c.replicates = 10;
            }
            apply_common(&mut c, &a.common);
            apply_dgp(&mut c, &a.dgp)?;
            apply_test(&mut c, &a.test)?;
            if !a.n_grid.is_empty() {
                c.n_grid = a.n_grid;
            }
            if let Some(v) = a.oracle_draws {
                c.oracle_draws = v;
            }
            run_and_write(c)
        }
        Command::Power(a) => {
            let mut c = load_base(&a.common.config, Suite::PowerCurve)?;
            apply_common(&mut c, &a.common);
            apply_dgp(&mut c, &a.dgp)?;
            apply_test(&mut c, &a.test)?;
            if !a.beta_grid.is_empty() {
                c.beta_grid = a.beta_grid;
            }
            if !a.z_modes.is_empty() {
                c.z_modes = a.z_modes.iter().map(|s| parse_z(s)).collect::<Result<_, _>>()?;
            }
            run_and_write(c)
        }
        Command::Calibrate(a) => {
            let mut c = load_base(&a.common.config, Suite::Calibration)?;
            apply_common(&mut c, &a.common);
            apply_csv(&mut c, &a.csv);
            apply_test(&mut c, &a.test)?;
            if let Some(v) = a.subsample {
                c.subsample = v;
            }
            run_and_write(c)
        }
        Command::Test(a) => {
            let mut c = load_base(&a.common.config, Suite::SingleTest)?;
            apply_common(&mut c, &a.common);
            apply_csv(&mut c, &a.csv);
            apply_dgp(&mut c, &a.dgp)?;
            apply_test(&mut c, &a.test)?;
            if a.format != "text" && a.format != "json" {
                return Err(config_err(format!("unknown format `{}` (expected text or json)", a.format)));
            }
            c.validate()?;
            init_threads(&c)?;
            let outcome = dr_cme::experiments::run_single_test(&c)?;
            let mut out = std::io::stdout().lock();
            if a.format == "json" {
                serde_json::to_writer_pretty(&mut out, &outcome.results).map_err(std::io::Error::other)?;
                writeln!(out)?;
            } else {
                writeln!(out, "{}", outcome.matched.diagnostics())?;
                for r in &outcome.results {
                    let d = &r.diagnostics;
                    writeln!(
                        out,
                        "statistic={} value={:.6} p_value={:.6} m={} train_labellings={} bundles_fit={} n_train={} n_test={} rejected={}",
                        r.kind,
                        r.observed.mmd,
                        r.p_value,
                        d.m,
                        d.n_train_perms + 1,
                        d.bundles_fit,
                        d.n_train,
                        d.n_test,
                        r.p_value <= c.alpha
                    )?;
                }
            }
            Ok(())
        }
        Command::Gen(a) => {
            let mut c = load_base(&a.config, Suite::SingleTest)?;
            if a.config.is_none() {
                c.n = 100;
            }
            apply_dgp(&mut c, &a.dgp)?;
            if let Some(s) = a.seed {
                c.seed = s;
            }
            let ds = DgpSpec {
                family: c.dgp,
                n: c.n,
                params: c.params.clone(),
                seed: c.seed,
            }
            .generate()
            .map_err(|e| match e {
                Error::InvalidInput(m) => Error::Config(m),
                other => other,
            })?;
            match a.out {
                Some(path) => write_csv(&ds, path)?,
                None => dr_cme::datagen::write_csv_to_writer(&ds, std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}

fn is_broken_pipe(e: &Error) -> bool {
    let io = match e {
        Error::Io(e) => Some(e),
        Error::CsvParse(e) => match e.kind() {
            csv::ErrorKind::Io(e) => Some(e),
            _ => None,
        },
        _ => None,
    };
    io.is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}\n\nFor usage, run `dr-cme --help`.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
