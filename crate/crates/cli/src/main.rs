//! Command-line front end: dataset generation, feature selection, and
//! benchmark sweeps with machine-readable outputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dtem::crt::PvalueRule;
use dtem::dataset::{
    generate_synthetic, load_csv, save_csv, Manifest, Scenario, ScenarioKind,
};
use dtem::propensity::{fit_propensity, ipw_weights, TrainConfig};
use dtem::rng::{derive_seed, derive_seed_indexed};
use dtem::selection::{select, SamplerPolicy, SelectConfig, StatMode};
use dtem::wcmmd::{importance, Bandwidths, ImportanceConfig, Mode};

#[derive(Parser)]
#[command(
    name = "dtem",
    about = "Distributional treatment effect modifier discovery",
    version
)]
struct Cli {
    /// Worker threads for replicate-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset (CSV plus provenance manifest).
    Gen(GenArgs),
    /// Run the feature selection pipeline on a CSV dataset.
    Select(SelectArgs),
    /// Sweep scenarios and sample sizes, reporting TPR/FPR and phase times.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// LinMean, NonlinMean, LinVar, NonlinVar, LinCovar, or NonlinCovar.
    #[arg(long)]
    scenario: ScenarioKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; the manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Scenario::DEFAULT_D)]
    d: usize,
    #[arg(long, default_value_t = Scenario::DEFAULT_MU)]
    mu: f64,
    #[arg(long, default_value_t = Scenario::DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Args)]
struct SelectArgs {
    /// Input CSV with tagged header columns (name:kind).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Resampled datasets per feature.
    #[arg(long, default_value_t = 100)]
    b: usize,
    /// Random Fourier feature dimension.
    #[arg(long, default_value_t = 1000)]
    r: usize,
    /// rff or exact.
    #[arg(long, default_value = "rff")]
    mode: StatMode,
    /// conditional or naive.
    #[arg(long, default_value = "conditional")]
    sampler: SamplerPolicy,
    /// paper (plain fraction) or plus-one.
    #[arg(long, default_value = "paper")]
    pvalue: PvalueRule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Propensity training epochs.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Refit the propensity model inside every replicate.
    #[arg(long, default_value_t = false)]
    refit_propensity: bool,
    /// Write the full result (p-values, curves, null draws) as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Write the flat per-feature summary as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated scenario list.
    #[arg(long, value_delimiter = ',', default_value = "LinMean,NonlinMean,LinVar,NonlinVar")]
    scenarios: Vec<ScenarioKind>,
    /// Comma-separated ascending sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "500,750,1000,1250,1500,1750,2000")]
    n_grid: Vec<usize>,
    /// Repetitions per cell (desk-scale default).
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Use 50 repetitions per cell.
    #[arg(long, default_value_t = false)]
    paper_scale: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    b: usize,
    #[arg(long, default_value_t = 1000)]
    r: usize,
    /// Comma-separated statistic modes to sweep (rff, exact).
    #[arg(long, value_delimiter = ',', default_value = "rff")]
    modes: Vec<StatMode>,
    #[arg(long, default_value = "conditional")]
    sampler: SamplerPolicy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Aggregate CSV path; raw per-repetition rows land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Skip cells already present in the raw CSV.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Time propensity and importance phases only; skip the CRT and
    /// selection (no TPR/FPR columns).
    #[arg(long, default_value_t = false)]
    phases_only: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Select(args) => cmd_select(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let scenario = Scenario {
        kind: args.scenario,
        d: args.d,
        mu: args.mu,
        sigma: args.sigma,
    };
    let dataset = generate_synthetic(&scenario, args.n, args.seed)?;
    save_csv(&dataset, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    let manifest = Manifest {
        scenario: args.scenario.to_string(),
        n: args.n,
        d: args.d,
        seed: args.seed,
        mu: args.mu,
        sigma: args.sigma,
    };
    let mpath = manifest_path(&args.out);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", mpath.display()))?;
    println!(
        "wrote {} ({} rows, {} features) and {}",
        args.out.display(),
        dataset.n(),
        dataset.d(),
        mpath.display()
    );
    Ok(())
}

fn cmd_select(args: SelectArgs) -> anyhow::Result<()> {
    let dataset =
        load_csv(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let config = SelectConfig {
        alpha: args.alpha,
        b: args.b,
        r: args.r,
        mode: args.mode,
        sampler: args.sampler,
        pvalue_rule: args.pvalue,
        seed: args.seed,
        train: TrainConfig {
            epochs: args.epochs,
            ..TrainConfig::default()
        },
        refit_propensity: args.refit_propensity,
        ..SelectConfig::default()
    };
    let result = select(&dataset, &config)?;

    println!("feature          importance      p_raw   p_adj  selected");
    for m in 0..result.d() {
        let imp = result.importances[m]
            .as_ref()
            .map(|r| format!("{:.6e}", r.importance))
            .unwrap_or_else(|| "failed".into());
        println!(
            "{:<16} {:>12} {:>8.3} {:>7.3}  {}",
            result.feature_names[m],
            imp,
            result.raw_p[m],
            result.adjusted_p[m],
            if result.selected.contains(&m) { "*" } else { "" }
        );
    }
    let names = result.selected_names();
    if names.is_empty() {
        println!("selected: (none)");
    } else {
        println!("selected: {}", names.join(", "));
    }
    for (m, failure) in result.failures.iter().enumerate() {
        if let Some(msg) = failure {
            println!("untested {}: {msg}", result.feature_names[m]);
        }
    }

    if let Some(path) = &args.out_json {
        result
            .write_json(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.out_csv {
        result
            .write_csv(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct RawRow {
    scenario: String,
    n: usize,
    mode: String,
    rep: usize,
    tpr: Option<f64>,
    fpr: Option<f64>,
    selected: Option<usize>,
    propensity_s: f64,
    importance_s: f64,
    crt_s: f64,
}

const RAW_HEADER: [&str; 10] = [
    "scenario",
    "n",
    "mode",
    "rep",
    "tpr",
    "fpr",
    "selected",
    "propensity_s",
    "importance_s",
    "crt_s",
];

fn raw_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("bench");
    out.with_file_name(format!("{stem}_raw.csv"))
}

fn read_raw(path: &Path) -> anyhow::Result<Vec<RawRow>> {
    let mut rows = Vec::new();
    if !path.exists() {
        return Ok(rows);
    }
    let mut reader = csv::Reader::from_path(path)?;
    for record in reader.records() {
        let record = record?;
        let parse_opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        rows.push(RawRow {
            scenario: record[0].to_string(),
            n: record[1].parse()?,
            mode: record[2].to_string(),
            rep: record[3].parse()?,
            tpr: parse_opt(&record[4]),
            fpr: parse_opt(&record[5]),
            selected: if record[6].is_empty() {
                None
            } else {
                Some(record[6].parse()?)
            },
            propensity_s: record[7].parse()?,
            importance_s: record[8].parse()?,
            crt_s: record[9].parse()?,
        });
    }
    Ok(rows)
}

fn write_raw(path: &Path, rows: &[RawRow]) -> anyhow::Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(RAW_HEADER)?;
    for row in rows {
        writer.write_record([
            row.scenario.clone(),
            row.n.to_string(),
            row.mode.clone(),
            row.rep.to_string(),
            row.tpr.map(|v| v.to_string()).unwrap_or_default(),
            row.fpr.map(|v| v.to_string()).unwrap_or_default(),
            row.selected.map(|v| v.to_string()).unwrap_or_default(),
            row.propensity_s.to_string(),
            row.importance_s.to_string(),
            row.crt_s.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn mode_name(mode: StatMode) -> &'static str {
    match mode {
        StatMode::Rff => "rff",
        StatMode::Exact => "exact",
    }
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    if args.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        bail!("--n-grid must be strictly ascending");
    }
    let reps = if args.paper_scale { 50 } else { args.reps };
    if reps == 0 {
        bail!("--reps must be at least 1");
    }
    let raw_file = raw_path(&args.out);
    let mut rows = if args.resume {
        read_raw(&raw_file)?
    } else {
        Vec::new()
    };
    let done: BTreeSet<(String, usize, String, usize)> = rows
        .iter()
        .map(|r| (r.scenario.clone(), r.n, r.mode.clone(), r.rep))
        .collect();

    for &kind in &args.scenarios {
        let scenario = Scenario::new(kind);
        let true_set = scenario.true_modifiers();
        for &n in &args.n_grid {
            for &mode in &args.modes {
                for rep in 0..reps {
                    let key = (
                        kind.to_string(),
                        n,
                        mode_name(mode).to_string(),
                        rep,
                    );
                    if done.contains(&key) {
                        continue;
                    }
                    let cell = format!("{kind}:{n}:{}", mode_name(mode));
                    let cell_seed = derive_seed_indexed(args.seed, &cell, rep as u64);
                    let dataset =
                        generate_synthetic(&scenario, n, derive_seed(cell_seed, "data"))?;
                    let row = if args.phases_only {
                        let t = Instant::now();
                        let train = TrainConfig {
                            epochs: args.epochs,
                            seed: derive_seed(cell_seed, "propensity"),
                            ..TrainConfig::default()
                        };
                        let model = fit_propensity(&dataset, &train)?;
                        let ipw = ipw_weights(&model, &dataset)?;
                        let propensity_s = t.elapsed().as_secs_f64();

                        let t = Instant::now();
                        let bandwidths = Bandwidths::from_dataset(&dataset, 2000)?;
                        let imp_mode = match mode {
                            StatMode::Exact => Mode::Exact,
                            StatMode::Rff => Mode::Rff(dtem::kernels::make_rff(
                                bandwidths.h_y,
                                args.r,
                                derive_seed(cell_seed, "rff"),
                            )?),
                        };
                        let cfg = ImportanceConfig::new(imp_mode, bandwidths);
                        for m in 0..dataset.d() {
                            importance(&dataset, m, &ipw, &cfg)?;
                        }
                        let importance_s = t.elapsed().as_secs_f64();
                        RawRow {
                            scenario: kind.to_string(),
                            n,
                            mode: mode_name(mode).to_string(),
                            rep,
                            tpr: None,
                            fpr: None,
                            selected: None,
                            propensity_s,
                            importance_s,
                            crt_s: 0.0,
                        }
                    } else {
                        let config = SelectConfig {
                            alpha: args.alpha,
                            b: args.b,
                            r: args.r,
                            mode,
                            sampler: args.sampler,
                            seed: derive_seed(cell_seed, "select"),
                            train: TrainConfig {
                                epochs: args.epochs,
                                ..TrainConfig::default()
                            },
                            ..SelectConfig::default()
                        };
                        match select(&dataset, &config) {
                            Ok(result) => {
                                let (tpr, fpr) = result.tpr_fpr(&true_set)?;
                                RawRow {
                                    scenario: kind.to_string(),
                                    n,
                                    mode: mode_name(mode).to_string(),
                                    rep,
                                    tpr: Some(tpr),
                                    fpr: Some(fpr),
                                    selected: Some(result.selected.len()),
                                    propensity_s: result.timings.propensity_s,
                                    importance_s: result.timings.importance_s,
                                    crt_s: result.timings.crt_s,
                                }
                            }
                            Err(e) => {
                                // record the failed cell and keep sweeping
                                log::error!("cell {cell} rep {rep} failed: {e}");
                                RawRow {
                                    scenario: kind.to_string(),
                                    n,
                                    mode: mode_name(mode).to_string(),
                                    rep,
                                    tpr: None,
                                    fpr: None,
                                    selected: None,
                                    propensity_s: 0.0,
                                    importance_s: 0.0,
                                    crt_s: 0.0,
                                }
                            }
                        }
                    };
                    println!(
                        "{} n={} mode={} rep={} tpr={} fpr={} times={:.2}/{:.2}/{:.2}s",
                        kind,
                        n,
                        mode_name(mode),
                        rep,
                        row.tpr.map(|v| format!("{v:.2}")).unwrap_or_default(),
                        row.fpr.map(|v| format!("{v:.2}")).unwrap_or_default(),
                        row.propensity_s,
                        row.importance_s,
                        row.crt_s
                    );
                    rows.push(row);
                    write_raw(&raw_file, &rows)?;
                }
            }
        }
    }

    write_aggregate(&args.out, &rows)?;
    println!(
        "wrote {} and {} ({} raw rows)",
        args.out.display(),
        raw_file.display(),
        rows.len()
    );
    Ok(())
}

fn write_aggregate(path: &Path, rows: &[RawRow]) -> anyhow::Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "scenario",
        "n",
        "mode",
        "reps",
        "tpr_mean",
        "tpr_std",
        "fpr_mean",
        "fpr_std",
        "propensity_s_mean",
        "importance_s_mean",
        "crt_s_mean",
    ])?;
    let mut cells: Vec<(String, usize, String)> = rows
        .iter()
        .map(|r| (r.scenario.clone(), r.n, r.mode.clone()))
        .collect();
    cells.sort();
    cells.dedup();
    for (scenario, n, mode) in cells {
        let cell: Vec<&RawRow> = rows
            .iter()
            .filter(|r| r.scenario == scenario && r.n == n && r.mode == mode)
            .collect();
        let tprs: Vec<f64> = cell.iter().filter_map(|r| r.tpr).collect();
        let fprs: Vec<f64> = cell.iter().filter_map(|r| r.fpr).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let std = |v: &[f64]| {
            if v.len() < 2 {
                0.0
            } else {
                let m = mean(v);
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            }
        };
        let fmt_opt = |v: &[f64], f: &dyn Fn(&[f64]) -> f64| {
            if v.is_empty() {
                String::new()
            } else {
                f(v).to_string()
            }
        };
        writer.write_record([
            scenario.clone(),
            n.to_string(),
            mode.clone(),
            cell.len().to_string(),
            fmt_opt(&tprs, &mean),
            fmt_opt(&tprs, &std),
            fmt_opt(&fprs, &mean),
            fmt_opt(&fprs, &std),
            mean(&cell.iter().map(|r| r.propensity_s).collect::<Vec<_>>()).to_string(),
            mean(&cell.iter().map(|r| r.importance_s).collect::<Vec<_>>()).to_string(),
            mean(&cell.iter().map(|r| r.crt_s).collect::<Vec<_>>()).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
