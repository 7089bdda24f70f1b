//! `sae`: CSV-driven command line for robust empirical Bayes small area
//! estimation.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 malformed input, 3 numeric
//! failure (non-convergence beyond policy).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::json;

use sae_core::inference::GridError;
use sae_core::rng::replication_seed;
use sae_core::{
    analyze, generate_replication, run_fixed_gamma_study, run_monte_carlo, select_gamma,
    validate_dataset, Analysis, AreaDataset, GammaFit, GammaGrid, ScenarioId, SimError,
    SimReport, SimScenario, SolverConfig, WeightsMode,
};

const EXIT_IO: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn io(msg: impl Into<String>) -> Self {
        Self { code: EXIT_IO, message: msg.into() }
    }
    fn input(msg: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: msg.into() }
    }
    fn numeric(msg: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: msg.into() }
    }
}

#[derive(Parser)]
#[command(
    name = "sae",
    version,
    about = "Robust empirical Bayes small area estimation under the area-level model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a CSV of direct estimates: fits, gamma selection, and
    /// per-area intervals for the EB, GD, and DR methods.
    Analyze(AnalyzeArgs),
    /// Monte Carlo simulation study over the built-in scenarios.
    Simulate(SimulateArgs),
    /// Run only the gamma-selection sweep on a CSV.
    SelectGamma(SelectArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv or json.
    #[arg(long)]
    format: Option<String>,
    /// Worker threads (falls back to SAE_THREADS, then machine parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Gamma grid: default, app, coarse, or a comma-separated ascending list starting at 0.
    #[arg(long)]
    grid: Option<String>,
    /// Selection criterion weights: unit or inv-d.
    #[arg(long)]
    weights: Option<String>,
    /// Two-sided non-coverage level of the intervals.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Input CSV with header area_id,y,D,x1,...,xp.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SelectArgs {
    /// Input CSV with header area_id,y,D,x1,...,xp.
    #[arg(long)]
    input: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario: i, ii, iii, iv, or v.
    #[arg(long)]
    scenario: Option<String>,
    /// True random-effect variance A.
    #[arg(long = "A")]
    a: Option<f64>,
    /// Number of areas.
    #[arg(long)]
    m: Option<usize>,
    /// Number of replications.
    #[arg(long = "R")]
    r: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed gamma: skip selection and fit this gamma in every replication.
    #[arg(long)]
    gamma: Option<f64>,
    /// Emit MSE rows shaped like the per-scenario slice of Table 1.
    #[arg(long)]
    table1: bool,
    /// Emit CP/AL rows shaped like the per-scenario slice of Table 2.
    #[arg(long)]
    table2: bool,
    /// Fixed-gamma CP/AL rows over {0, 0.1, 0.2, 0.3}.
    #[arg(long = "tableS1")]
    table_s1: bool,
    /// Write one generated dataset (and the latent truth) instead of
    /// running the study.
    #[arg(long)]
    dump_data: bool,
    #[command(flatten)]
    common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::SelectGamma(args) => cmd_select_gamma(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

// ---------------------------------------------------------------------------
// configuration plumbing

fn load_config(path: Option<&Path>) -> Result<HashMap<String, String>, CliError> {
    let mut map = HashMap::new();
    let Some(path) = path else { return Ok(map) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::input(format!(
                "config {} line {}: expected key=value",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Flag value if given, else the config-file entry, else the default.
fn resolve<T: FromStr + Clone>(
    flag: &Option<T>,
    cfg: &HashMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    match cfg.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| CliError::input(format!("config key `{key}`: cannot parse `{raw}`"))),
        None => Ok(default),
    }
}

fn resolve_opt<T: FromStr + Clone>(
    flag: &Option<T>,
    cfg: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>, CliError> {
    if let Some(v) = flag {
        return Ok(Some(v.clone()));
    }
    match cfg.get(key) {
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| CliError::input(format!("config key `{key}`: cannot parse `{raw}`"))),
        None => Ok(None),
    }
}

struct CommonSettings {
    out: PathBuf,
    json: bool,
    grid: GammaGrid,
    alpha: f64,
}

fn resolve_common(common: &CommonArgs) -> Result<(CommonSettings, HashMap<String, String>), CliError> {
    let cfg = load_config(common.config.as_deref())?;
    let out = resolve(&common.out, &cfg, "out", PathBuf::from("."))?;
    let format = resolve(&common.format, &cfg, "format", "csv".to_string())?;
    let json = match format.as_str() {
        "csv" => false,
        "json" => true,
        other => return Err(CliError::input(format!("unknown format `{other}`"))),
    };
    let weights = resolve(&common.weights, &cfg, "weights", "unit".to_string())?;
    let weights = match weights.as_str() {
        "unit" => WeightsMode::Unit,
        "inv-d" => WeightsMode::InvD,
        other => return Err(CliError::input(format!("unknown weights mode `{other}`"))),
    };
    let grid_spec = resolve(&common.grid, &cfg, "grid", "default".to_string())?;
    let grid = parse_grid(&grid_spec, weights)?;
    let alpha = resolve(&common.alpha, &cfg, "alpha", 0.05)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CliError::input(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let threads = match resolve_opt(&common.threads, &cfg, "threads")? {
        Some(n) => Some(n),
        None => match std::env::var("SAE_THREADS") {
            Ok(raw) => Some(raw.parse().map_err(|_| {
                CliError::input(format!("SAE_THREADS: cannot parse `{raw}`"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::input("threads must be at least 1"));
        }
        // Ignore the error from a second initialization (e.g. in-process reuse).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", out.display())))?;
    Ok((CommonSettings { out, json, grid, alpha }, cfg))
}

fn parse_grid(spec: &str, weights: WeightsMode) -> Result<GammaGrid, CliError> {
    let grid_err = |e: GridError| CliError::input(format!("invalid gamma grid: {e}"));
    match spec {
        "default" => Ok(GammaGrid::default_grid(weights)),
        "app" => Ok(GammaGrid::app_grid(weights)),
        "coarse" => Ok(GammaGrid::coarse_grid(weights)),
        list => {
            let mut values = Vec::new();
            for part in list.split(',') {
                let v: f64 = part.trim().parse().map_err(|_| {
                    CliError::input(format!("invalid gamma grid entry `{part}`"))
                })?;
                values.push(v);
            }
            GammaGrid::new(values, weights).map_err(grid_err)
        }
    }
}

// ---------------------------------------------------------------------------
// CSV input

fn read_dataset(path: &Path) -> Result<AreaDataset, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "area_id" || cols[1] != "y" || cols[2] != "D" {
        return Err(CliError::input(format!(
            "{}: header must be area_id,y,D,x1,...,xp (got `{}`)",
            path.display(),
            cols.join(",")
        )));
    }
    for (j, name) in cols[3..].iter().enumerate() {
        let expect = format!("x{}", j + 1);
        if *name != expect {
            return Err(CliError::input(format!(
                "{}: covariate column {} must be named `{expect}`, got `{name}`",
                path.display(),
                j + 4
            )));
        }
    }
    let p = cols.len() - 3;
    let mut area_id = Vec::new();
    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 2; // 1-based, after the header
        let record =
            record.map_err(|e| CliError::input(format!("{} row {row}: {e}", path.display())))?;
        if record.len() != cols.len() {
            return Err(CliError::input(format!(
                "{} row {row}: expected {} fields, got {}",
                path.display(),
                cols.len(),
                record.len()
            )));
        }
        let cell = |j: usize| -> Result<f64, CliError> {
            record[j].parse().map_err(|_| {
                CliError::input(format!(
                    "{} row {row}, column `{}`: cannot parse `{}` as a number",
                    path.display(),
                    cols[j],
                    &record[j]
                ))
            })
        };
        area_id.push(record[0].to_string());
        y.push(cell(1)?);
        d.push(cell(2)?);
        for j in 0..p {
            xs.push(cell(3 + j)?);
        }
    }
    let m = y.len();
    let x = DMatrix::from_fn(m, p, |i, j| xs[i * p + j]);
    validate_dataset(AreaDataset::new(area_id, y, d, x))
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// output helpers

/// 17 significant digits: round-trips f64 bit-exactly.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::io(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

fn selection_csv(grid: &GammaGrid, criterion: &[f64], fits: &[GammaFit]) -> String {
    let mut s = String::from("gamma,criterion,converged\n");
    for (k, &g) in grid.values().iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", num(g), num(criterion[k]), fits[k].converged);
    }
    s
}

fn selection_json(gamma_op: f64, grid: &GammaGrid, criterion: &[f64], fits: &[GammaFit]) -> serde_json::Value {
    json!({
        "gamma_op": gamma_op,
        "grid": grid.values(),
        "criterion": criterion,
        "converged": fits.iter().map(|f| f.converged).collect::<Vec<_>>(),
    })
}

fn fit_json(fit: &GammaFit) -> serde_json::Value {
    json!({
        "gamma": fit.gamma,
        "beta": fit.params.beta.iter().copied().collect::<Vec<f64>>(),
        "a": fit.params.a,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "final_grad_norm": fit.final_grad_norm,
        "objective_value": fit.objective_value,
        "a_floored": fit.a_floored,
    })
}

fn check_convergence(analysis: &Analysis) -> Result<(), CliError> {
    if !analysis.ml_fit.converged {
        return Err(CliError::numeric(
            "maximum likelihood fit did not converge".to_string(),
        ));
    }
    if !analysis.gd_fit.converged {
        return Err(CliError::numeric(format!(
            "fit at the selected gamma = {} did not converge",
            analysis.gd_fit.gamma
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// commands

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let (settings, cfg) = resolve_common(&args.common)?;
    let input = resolve_opt(&args.input, &cfg, "input")?
        .ok_or_else(|| CliError::input("--input is required"))?;
    let data = read_dataset(&input)?;
    let config = SolverConfig::default();
    let analysis = analyze(&data, &settings.grid, settings.alpha, &config);
    check_convergence(&analysis)?;

    if settings.json {
        let areas: Vec<serde_json::Value> = (0..data.m())
            .map(|i| {
                json!({
                    "area_id": data.area_id[i],
                    "y": data.y[i],
                    "D": data.d[i],
                    "eb": analysis.eb[i],
                    "gd": analysis.gd[i],
                    "dr": analysis.dr[i],
                })
            })
            .collect();
        write_json(
            &settings.out.join("analysis.json"),
            &json!({
                "alpha": settings.alpha,
                "selection": selection_json(
                    analysis.selection.gamma_op,
                    &settings.grid,
                    &analysis.selection.criterion,
                    &analysis.selection.fits,
                ),
                "ml_fit": fit_json(&analysis.ml_fit),
                "gd_fit": fit_json(&analysis.gd_fit),
                "areas": areas,
            }),
        )?;
    } else {
        let mut areas = String::from(
            "area_id,y,D,eb_theta,eb_s2,eb_lower,eb_upper,\
             gd_theta,gd_s2,gd_lower,gd_upper,gd_s2_floored,\
             dr_theta,dr_lower,dr_upper\n",
        );
        for i in 0..data.m() {
            let (eb, gd, dr) = (&analysis.eb[i], &analysis.gd[i], &analysis.dr[i]);
            let _ = writeln!(
                areas,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                data.area_id[i],
                num(data.y[i]),
                num(data.d[i]),
                num(eb.theta_hat),
                num(eb.s2),
                num(eb.lower),
                num(eb.upper),
                num(gd.theta_hat),
                num(gd.s2),
                num(gd.lower),
                num(gd.upper),
                gd.s2_floored,
                num(dr.theta_hat),
                num(dr.lower),
                num(dr.upper),
            );
        }
        write_file(&settings.out.join("areas.csv"), &areas)?;
        write_file(
            &settings.out.join("selection.csv"),
            &selection_csv(&settings.grid, &analysis.selection.criterion, &analysis.selection.fits),
        )?;
        let p = data.p();
        let mut params = String::from("method,gamma");
        for j in 1..=p {
            let _ = write!(params, ",beta{j}");
        }
        params.push_str(",A,converged,a_floored\n");
        for (label, fit) in [("EB", &analysis.ml_fit), ("GD", &analysis.gd_fit)] {
            let _ = write!(params, "{label},{}", num(fit.gamma));
            for j in 0..p {
                let _ = write!(params, ",{}", num(fit.params.beta[j]));
            }
            let _ = writeln!(params, ",{},{},{}", num(fit.params.a), fit.converged, fit.a_floored);
        }
        write_file(&settings.out.join("parameters.csv"), &params)?;
    }
    println!("gamma_op = {}", num(analysis.selection.gamma_op));
    Ok(())
}

fn cmd_select_gamma(args: SelectArgs) -> Result<(), CliError> {
    let (settings, cfg) = resolve_common(&args.common)?;
    let input = resolve_opt(&args.input, &cfg, "input")?
        .ok_or_else(|| CliError::input("--input is required"))?;
    let data = read_dataset(&input)?;
    let config = SolverConfig::default();
    let selection = select_gamma(&data, &settings.grid, &config);
    if !selection.fits.iter().any(|f| f.converged) {
        return Err(CliError::numeric("no grid point converged".to_string()));
    }
    if settings.json {
        write_json(
            &settings.out.join("selection.json"),
            &selection_json(selection.gamma_op, &settings.grid, &selection.criterion, &selection.fits),
        )?;
    } else {
        write_file(
            &settings.out.join("selection.csv"),
            &selection_csv(&settings.grid, &selection.criterion, &selection.fits),
        )?;
        write_file(
            &settings.out.join("selected.csv"),
            &format!("gamma_op\n{}\n", num(selection.gamma_op)),
        )?;
    }
    println!("gamma_op = {}", num(selection.gamma_op));
    Ok(())
}

fn parse_scenario(raw: &str) -> Result<ScenarioId, CliError> {
    match raw {
        "i" => Ok(ScenarioId::I),
        "ii" => Ok(ScenarioId::II),
        "iii" => Ok(ScenarioId::III),
        "iv" => Ok(ScenarioId::IV),
        "v" => Ok(ScenarioId::V),
        other => Err(CliError::input(format!(
            "unknown scenario `{other}` (expected i, ii, iii, iv, or v)"
        ))),
    }
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::TooManyFailures { .. } => CliError::numeric(e.to_string()),
        _ => CliError::input(e.to_string()),
    }
}

fn report_csv(reports: &[&SimReport]) -> String {
    let mut s = String::from(
        "scenario,A,m,R,seed,alpha,\
         eb_mse,eb_cp,eb_al,gd_mse,gd_cp,gd_al,dr_mse,dr_cp,dr_al,\
         gamma_mean,gamma_median,gamma_zero_fraction,n_nonconverged,n_redraws\n",
    );
    for rep in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            rep.scenario,
            num(rep.a),
            rep.m,
            rep.n_replications,
            rep.base_seed,
            num(rep.alpha),
            num(rep.eb.mse),
            num(rep.eb.cp),
            num(rep.eb.al),
            num(rep.gd.mse),
            num(rep.gd.cp),
            num(rep.gd.al),
            num(rep.dr.mse),
            num(rep.dr.cp),
            num(rep.dr.al),
            num(rep.gamma_mean),
            num(rep.gamma_median),
            num(rep.gamma_zero_fraction),
            rep.n_nonconverged,
            rep.n_redraws,
        );
    }
    s
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (settings, cfg) = resolve_common(&args.common)?;
    let scenario_raw = resolve_opt(&args.scenario, &cfg, "scenario")?
        .ok_or_else(|| CliError::input("--scenario is required"))?;
    let id = parse_scenario(&scenario_raw)?;
    let a = resolve(&args.a, &cfg, "A", 1.0)?;
    let mut scenario = SimScenario::preset(id, a);
    if let Some(m) = resolve_opt(&args.m, &cfg, "m")? {
        scenario.m = m;
    }
    scenario.validate().map_err(sim_error)?;
    let r = resolve(&args.r, &cfg, "R", 2000)?;
    let seed = resolve(&args.seed, &cfg, "seed", 1)?;
    let config = SolverConfig::default();

    if args.dump_data {
        let repl = generate_replication(&scenario, replication_seed(seed, 0));
        let mut data = String::from("area_id,y,D,x1,x2,x3\n");
        let mut truth = String::from("area_id,theta\n");
        for i in 0..scenario.m {
            let x = repl.data.x_row(i);
            let _ = writeln!(
                data,
                "{},{},{},{},{},{}",
                repl.data.area_id[i],
                num(repl.data.y[i]),
                num(repl.data.d[i]),
                num(x[0]),
                num(x[1]),
                num(x[2]),
            );
            let _ = writeln!(truth, "{},{}", repl.data.area_id[i], num(repl.theta_true[i]));
        }
        write_file(&settings.out.join("data.csv"), &data)?;
        write_file(&settings.out.join("truth.csv"), &truth)?;
        return Ok(());
    }

    if args.table_s1 {
        let gammas = [0.0, 0.1, 0.2, 0.3];
        let reports =
            run_fixed_gamma_study(&scenario, &gammas, r, settings.alpha, seed, &config)
                .map_err(sim_error)?;
        if settings.json {
            write_json(&settings.out.join("tableS1.json"), &json!(reports))?;
        } else {
            let mut s = String::from("gamma,cp,al\n");
            for (k, rep) in reports.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", num(gammas[k]), num(rep.gd.cp), num(rep.gd.al));
            }
            write_file(&settings.out.join("tableS1.csv"), &s)?;
        }
        return Ok(());
    }

    let report = if let Some(gamma) = resolve_opt(&args.gamma, &cfg, "gamma")? {
        run_fixed_gamma_study(&scenario, &[gamma], r, settings.alpha, seed, &config)
            .map_err(sim_error)?
            .remove(0)
    } else {
        run_monte_carlo(&scenario, r, &settings.grid, settings.alpha, seed, &config)
            .map_err(sim_error)?
    };

    if settings.json {
        write_json(&settings.out.join("report.json"), &json!(report))?;
    } else {
        write_file(&settings.out.join("report.csv"), &report_csv(&[&report]))?;
    }
    if args.table1 {
        let mut s = String::from("scenario,A,method,mse\n");
        for (label, stats) in [("EB", &report.eb), ("GD", &report.gd), ("DR", &report.dr)] {
            let _ = writeln!(s, "{},{},{label},{}", report.scenario, num(report.a), num(stats.mse));
        }
        write_file(&settings.out.join("table1.csv"), &s)?;
    }
    if args.table2 {
        let mut s = String::from("scenario,A,method,cp,al\n");
        for (label, stats) in [("EB", &report.eb), ("GD", &report.gd), ("DR", &report.dr)] {
            let _ = writeln!(
                s,
                "{},{},{label},{},{}",
                report.scenario,
                num(report.a),
                num(stats.cp),
                num(stats.al)
            );
        }
        write_file(&settings.out.join("table2.csv"), &s)?;
    }
    Ok(())
}
