//! Command-line pipeline for staggered-adoption matched designs.
//!
//! Stages: `validate` → `match` → `estimate` → `infer` → `test`, plus
//! `simulate`/`study` for synthetic benchmarking and `report` for table
//! rendering. Every artifact-producing stage also writes a
//! `<out>.manifest.json` recording config hash, seeds, and input digests;
//! identical inputs reproduce byte-identical outputs.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 panel
//! validation, 4 distance computation, 5 matching, 6 design assembly,
//! 7 estimation, 8 bootstrap, 9 hypothesis testing, 10 simulation,
//! 11 i/o or serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rtnm::balance::{balance_report, write_balance_csv};
use rtnm::bootstrap::{bootstrap_covariance, CovarianceEstimate};
use rtnm::design::{run_rtnm, NestedDesign, RtnmConfig};
use rtnm::distance::{DistanceSpec, Metric};
use rtnm::estimator::{estimate_att, write_att_csv, Adjustment, AttVector, GtIndex};
use rtnm::hypothesis::{build_hypothesis, wald_test, HypothesisKind};
use rtnm::manifest::RunManifest;
use rtnm::matcher::MatchBounds;
use rtnm::panel::{PanelDataset, PanelSchema, Period};
use rtnm::report::{render_table_text, write_table_csv};
use rtnm::sim::{generate_panel, run_study, write_study_csv, DgpConfig, StudyConfig};

#[derive(Parser)]
#[command(
    name = "rtnm",
    version,
    about = "Matched-design estimation for staggered-adoption panels",
    after_help = "Exit codes: 0 ok, 2 usage/config, 3 panel, 4 distance, 5 matching, \
                  6 design, 7 estimation, 8 bootstrap, 9 test, 10 simulation, 11 i/o."
)]
struct Cli {
    /// Cap the worker thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a long-format panel CSV against the staggered-adoption rules.
    Validate {
        #[arg(long)]
        input: PathBuf,
        /// JSON schema mapping logical roles to column names; inferred from
        /// the header when omitted.
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Build the nested matched design. Never reads outcome values: a schema
    /// mapping an outcome column is rejected.
    Match(MatchArgs),
    /// Estimate group-time effects on a matched design.
    Estimate(EstimateArgs),
    /// Block-bootstrap covariance of an estimated effect vector.
    Infer(InferArgs),
    /// Bootstrap homogeneity test; reads estimate/covariance artifacts only.
    Test(TestArgs),
    /// Generate a synthetic panel with a known truth table.
    Simulate {
        /// JSON generator config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output panel CSV.
        #[arg(long)]
        out: PathBuf,
        /// Output truth table CSV.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Repeated-simulation study: bias, coverage, and rejection rates.
    Study {
        /// JSON study config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the effect table as a cohort-by-period grid.
    Report {
        /// Estimate artifact (JSON).
        #[arg(long)]
        att: PathBuf,
        /// Covariance artifact (JSON), for standard errors.
        #[arg(long)]
        sigma: Option<PathBuf>,
        /// Output CSV grid.
        #[arg(long)]
        out: PathBuf,
        /// Optional plain-text grid file; always printed to stdout too.
        #[arg(long)]
        text: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    input: PathBuf,
    /// Schema without an outcome mapping; inferred (minus any `outcome`
    /// column) when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Analyzed cohorts: `1..4` or `1,2,3,4`.
    #[arg(long)]
    cohorts: String,
    #[arg(long, default_value = "rank")]
    metric: Metric,
    /// Covariance ridge; a metric-dependent default applies when omitted.
    #[arg(long)]
    ridge: Option<f64>,
    /// Minimum comparisons per treated unit.
    #[arg(long, default_value_t = 1)]
    min_ratio: u32,
    /// Maximum comparisons per treated unit.
    #[arg(long)]
    max_ratio: Option<u32>,
    /// Maximum stratum size; 0 disables the cap.
    #[arg(long, default_value_t = 10)]
    max_stratum_size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output design artifact (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional balance diagnostics CSV (needs covariates only).
    #[arg(long)]
    balance: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Design artifact from `match`.
    #[arg(long)]
    design: PathBuf,
    #[arg(long, default_value = "none")]
    adjust: Adjustment,
    /// Output estimate artifact (JSON, carries the block decomposition).
    #[arg(long)]
    out: PathBuf,
    /// Optional flat CSV of the estimates.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Estimate artifact from `estimate`.
    #[arg(long)]
    att: PathBuf,
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep replicate vectors in the artifact.
    #[arg(long)]
    keep_replicates: bool,
    /// Output covariance artifact (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional estimates-with-standard-errors CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    att: PathBuf,
    #[arg(long)]
    sigma: PathBuf,
    /// Constraint family: fixed-cohort, fixed-time, or fixed-lag.
    #[arg(long)]
    family: String,
    /// The fixed cohort, time, or lag value.
    #[arg(long)]
    value: Period,
    #[arg(long, default_value_t = 1000)]
    boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output test artifact (JSON).
    #[arg(long)]
    out: PathBuf,
}

struct CliError {
    code: i32,
    class: &'static str,
    message: String,
}

impl CliError {
    fn new(code: i32, class: &'static str, message: impl ToString) -> Self {
        CliError {
            code,
            class,
            message: message.to_string(),
        }
    }
}

macro_rules! error_class {
    ($ty:ty, $code:expr, $class:expr) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($code, $class, e)
            }
        }
    };
}
error_class!(rtnm::panel::PanelError, 3, "panel");
error_class!(rtnm::balance::BalanceError, 3, "panel");
error_class!(rtnm::distance::DistanceError, 4, "distance");
error_class!(rtnm::matcher::MatchError, 5, "matching");
error_class!(rtnm::design::DesignError, 6, "design");
error_class!(rtnm::estimator::EstimatorError, 7, "estimation");
error_class!(rtnm::bootstrap::BootstrapError, 8, "bootstrap");
error_class!(rtnm::hypothesis::HypothesisError, 9, "test");
error_class!(rtnm::sim::SimError, 10, "simulation");
error_class!(std::io::Error, 11, "io");
error_class!(serde_json::Error, 11, "io");

fn config_err(message: impl ToString) -> CliError {
    CliError::new(2, "config", message)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[config]: could not set thread pool size: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("error[{}]: {}", e.class, e.message);
        std::process::exit(e.code);
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Validate { input, schema } => cmd_validate(&input, schema.as_deref()),
        Cmd::Match(args) => cmd_match(args),
        Cmd::Estimate(args) => cmd_estimate(args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Test(args) => cmd_test(args),
        Cmd::Simulate {
            config,
            seed,
            out,
            truth,
        } => cmd_simulate(config.as_deref(), seed, &out, truth.as_deref()),
        Cmd::Study { config, out } => cmd_study(&config, &out),
        Cmd::Report {
            att,
            sigma,
            out,
            text,
        } => cmd_report(&att, sigma.as_deref(), &out, text.as_deref()),
    }
}

/// Reads a schema file, or infers one from the CSV header: `unit`, `period`,
/// optional `outcome` and `first_treated`/`treatment_flag`, everything else a
/// covariate. `with_outcome = false` drops any outcome mapping.
fn resolve_schema(
    schema_path: Option<&Path>,
    input: &Path,
    with_outcome: bool,
) -> Result<PanelSchema, CliError> {
    let mut schema = match schema_path {
        Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
        None => {
            let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(input)?));
            let headers = rdr
                .headers()
                .map_err(rtnm::panel::PanelError::from)?
                .clone();
            let known = ["unit", "period", "outcome", "first_treated", "treatment_flag"];
            let covariates: Vec<String> = headers
                .iter()
                .filter(|h| !known.contains(h))
                .map(str::to_string)
                .collect();
            PanelSchema {
                unit: "unit".into(),
                period: "period".into(),
                outcome: headers.iter().find(|h| *h == "outcome").map(str::to_string),
                first_treated: headers
                    .iter()
                    .find(|h| *h == "first_treated")
                    .map(str::to_string),
                treatment_flag: headers
                    .iter()
                    .find(|h| *h == "treatment_flag")
                    .map(str::to_string),
                covariates,
            }
        }
    };
    if !with_outcome {
        if schema_path.is_some() && schema.outcome.is_some() {
            return Err(config_err(
                "matching must not see outcomes: pass a schema without an `outcome` mapping",
            ));
        }
        schema.outcome = None;
    }
    Ok(schema)
}

fn load_panel(input: &Path, schema: &PanelSchema) -> Result<PanelDataset, CliError> {
    Ok(PanelDataset::load_csv(
        BufReader::new(File::open(input)?),
        schema,
    )?)
}

/// Parses `1..4` (inclusive) or a comma-separated list.
fn parse_cohorts(s: &str) -> Result<Vec<Period>, CliError> {
    let parse_one = |x: &str| {
        x.trim()
            .parse::<Period>()
            .map_err(|_| config_err(format!("bad cohort `{x}`")))
    };
    if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (parse_one(a)?, parse_one(b)?);
        if a > b {
            return Err(config_err(format!("empty cohort range `{s}`")));
        }
        Ok((a..=b).collect())
    } else {
        s.split(',').map(parse_one).collect()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn write_manifest(
    out: &Path,
    stage: &str,
    config: &impl serde::Serialize,
    seeds: Vec<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(stage, config, seeds);
    for p in inputs {
        manifest.add_input(p)?;
    }
    for p in outputs {
        manifest.add_output(p);
    }
    let path = manifest_path(out);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(manifest.to_json_string().as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn cmd_validate(input: &Path, schema_path: Option<&Path>) -> Result<(), CliError> {
    let schema = resolve_schema(schema_path, input, true)?;
    let data = load_panel(input, &schema)?;
    let mut cohort_counts: Vec<(String, usize)> = Vec::new();
    for t in 1..=data.t_max() {
        let n = data.cohort_units(t).len();
        if n > 0 {
            cohort_counts.push((t.to_string(), n));
        }
    }
    cohort_counts.push(("never".into(), data.n_never_treated()));
    println!(
        "ok: {} units, periods {}..={}, {} covariates",
        data.n_units(),
        data.t0(),
        data.t_max(),
        data.covariate_names().len()
    );
    for (g, n) in cohort_counts {
        println!("  cohort {g}: {n}");
    }
    Ok(())
}

fn cmd_match(args: MatchArgs) -> Result<(), CliError> {
    let schema = resolve_schema(args.schema.as_deref(), &args.input, false)?;
    let data = load_panel(&args.input, &schema)?;
    let config = RtnmConfig {
        cohorts: parse_cohorts(&args.cohorts)?,
        distance: DistanceSpec {
            metric: args.metric,
            ridge: args.ridge,
        },
        bounds: MatchBounds {
            min_ratio: args.min_ratio,
            max_ratio: args.max_ratio,
            max_stratum_size: match args.max_stratum_size {
                0 => None,
                n => Some(n),
            },
        },
        seed: args.seed,
    };
    let design = run_rtnm(&data, &config)?;
    write_json(&args.out, &design)?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(balance_out) = &args.balance {
        let report = balance_report(&data, &design)?;
        write_balance_csv(&report, BufWriter::new(File::create(balance_out)?))?;
        outputs.push(balance_out);
    }
    write_manifest(
        &args.out,
        "match",
        &config,
        vec![config.seed],
        &[&args.input],
        &outputs,
    )?;
    let outer = design.outermost_level();
    println!(
        "matched {} strata ({} outermost blocks)",
        design.strata.len(),
        design.levels[&outer].len()
    );
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let schema = resolve_schema(args.schema.as_deref(), &args.input, true)?;
    let data = load_panel(&args.input, &schema)?;
    let design: NestedDesign = read_json(&args.design)?;
    let index = GtIndex::all_cells(&design.config.cohorts, data.t_max());
    let att = estimate_att(&data, &design, &index, args.adjust)?;
    write_json(&args.out, &att)?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(csv_out) = &args.csv {
        write_att_csv(&att, None, BufWriter::new(File::create(csv_out)?))?;
        outputs.push(csv_out);
    }
    write_manifest(
        &args.out,
        "estimate",
        &serde_json::json!({"adjust": args.adjust, "design": design.config}),
        vec![design.config.seed],
        &[&args.input, &args.design],
        &outputs,
    )?;
    println!(
        "estimated {} cells over {} blocks ({} strata dropped)",
        att.index.k(),
        att.n_blocks(),
        att.n_strata_dropped.iter().sum::<usize>()
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    let att: AttVector = read_json(&args.att)?;
    let cov = bootstrap_covariance(&att, args.boot, args.seed, args.keep_replicates)?;
    write_json(&args.out, &cov)?;
    let mut outputs: Vec<&Path> = vec![&args.out];
    if let Some(csv_out) = &args.csv {
        let se = cov.standard_errors();
        write_att_csv(&att, Some(&se), BufWriter::new(File::create(csv_out)?))?;
        outputs.push(csv_out);
    }
    write_manifest(
        &args.out,
        "infer",
        &serde_json::json!({"boot": args.boot, "seed": args.seed}),
        vec![args.seed],
        &[&args.att],
        &outputs,
    )?;
    if cov.psd_repaired {
        eprintln!("warning: covariance needed an eigenvalue floor");
    }
    println!("bootstrap covariance over {} replicates", cov.b);
    Ok(())
}

fn cmd_test(args: TestArgs) -> Result<(), CliError> {
    let att: AttVector = read_json(&args.att)?;
    let cov: CovarianceEstimate = read_json(&args.sigma)?;
    let kind = match args.family.as_str() {
        "fixed-cohort" => HypothesisKind::FixedCohort(args.value),
        "fixed-time" => HypothesisKind::FixedTime(args.value),
        "fixed-lag" => HypothesisKind::FixedLag(args.value),
        other => {
            return Err(config_err(format!(
                "unknown family `{other}`; expected fixed-cohort, fixed-time, or fixed-lag"
            )))
        }
    };
    let spec = build_hypothesis(&att.index, kind)?;
    let result = wald_test(&att, &cov, &spec, args.boot, args.seed)?;
    write_json(&args.out, &result)?;
    write_manifest(
        &args.out,
        "test",
        &serde_json::json!({"family": args.family, "value": args.value, "boot": args.boot}),
        vec![args.seed],
        &[&args.att, &args.sigma],
        &[&args.out],
    )?;
    println!(
        "{}: W = {:.4} (q = {}), p = {:.4}",
        result.description, result.w_obs, result.q, result.p_value
    );
    Ok(())
}

fn cmd_simulate(
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    truth_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut config: DgpConfig = match config_path {
        Some(p) => read_json(p)?,
        None => DgpConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let sim = generate_panel(&config)?;
    sim.data.write_csv(BufWriter::new(File::create(out)?))?;
    let mut outputs: Vec<&Path> = vec![out];
    if let Some(truth_path) = truth_out {
        write_att_csv(&sim.truth, None, BufWriter::new(File::create(truth_path)?))?;
        outputs.push(truth_path);
    }
    let inputs: Vec<&Path> = config_path.into_iter().collect();
    write_manifest(out, "simulate", &config, vec![config.seed], &inputs, &outputs)?;
    println!(
        "simulated {} units over periods {}..={}",
        config.n_units, config.t0, config.t_max
    );
    Ok(())
}

fn cmd_study(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: StudyConfig = read_json(config_path)?;
    let summary = run_study(&config)?;
    write_study_csv(&summary, BufWriter::new(File::create(out)?))?;
    write_manifest(
        out,
        "study",
        &config,
        vec![config.dgp.seed],
        &[config_path],
        &[out],
    )?;
    println!(
        "study over {} replicates ({} failed){}",
        summary.n_reps,
        summary.n_failed,
        match summary.rejection_rate {
            Some(r) => format!(", rejection rate {r:.3}"),
            None => String::new(),
        }
    );
    Ok(())
}

fn cmd_report(
    att_path: &Path,
    sigma_path: Option<&Path>,
    out: &Path,
    text_out: Option<&Path>,
) -> Result<(), CliError> {
    let att: AttVector = read_json(att_path)?;
    let se = match sigma_path {
        Some(p) => {
            let cov: CovarianceEstimate = read_json(p)?;
            if cov.index != att.index {
                return Err(config_err(
                    "estimate and covariance artifacts cover different cells",
                ));
            }
            Some(cov.standard_errors())
        }
        None => None,
    };
    write_table_csv(&att, se.as_deref(), BufWriter::new(File::create(out)?))?;
    let text = render_table_text(&att, se.as_deref());
    print!("{text}");
    let mut outputs: Vec<&Path> = vec![out];
    if let Some(tp) = text_out {
        let mut w = BufWriter::new(File::create(tp)?);
        w.write_all(text.as_bytes())?;
        w.flush()?;
        outputs.push(tp);
    }
    let mut inputs: Vec<&Path> = vec![att_path];
    inputs.extend(sigma_path);
    write_manifest(
        out,
        "report",
        &serde_json::json!({"with_se": sigma_path.is_some()}),
        vec![],
        &inputs,
        &outputs,
    )?;
    Ok(())
}
