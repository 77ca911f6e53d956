//! `subsel`: data selection from activation dumps.

mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use subsel_core::bench::{cx_bound_trial, scaling_bench, tau_sweep};
use subsel_core::dump::{validate_dump_with_cap, DEFAULT_ERROR_CAP};
use subsel_core::fsutil::{write_atomic, write_json_atomic};
use subsel_core::repr::{build_matrix, ReprMatrix, REPR_HEADER_FILE, REPR_IDS_FILE, REPR_PAYLOAD_FILE};
use subsel_core::select::{run_selection, Budget, SelectConfig, SelectionMode, SelectionResult};
use subsel_core::svd::SvdMethod;
use subsel_core::synth::{gen_planted_matrix, gen_synthetic_dump, PlantedSpec, SynthDumpSpec};

use manifest::Run;

#[derive(Parser)]
#[command(name = "subsel", version, about = "Training-free data selection from activation dumps")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SUBSEL_WORKERS")]
    workers: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dump directory and print a report.
    Validate {
        dump: PathBuf,
        /// Errors to list before summarizing.
        #[arg(long, default_value_t = DEFAULT_ERROR_CAP)]
        max_errors: usize,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Also write validation.json and a run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the representation matrix from a dump.
    Reprs {
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attention-mass threshold.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Select samples from a representation matrix.
    Select {
        /// Directory holding repr.json, repr.f64 and repr.ids.
        reprs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Dump to representations to selection in one run.
    Pipeline {
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Generate synthetic inputs.
    Synth {
        #[command(subcommand)]
        kind: SynthKind,
    },
    /// Time the selection stage over growing planted matrices.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Ascending row counts.
        #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 100_000, 1_000_000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Check the relative-error bound of leverage selection on planted matrices.
    Verify {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Share of total energy held by the noise.
        #[arg(long, default_value_t = 0.1)]
        residual: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Exit with status 1 when fewer trials than this share pass.
        #[arg(long, default_value_t = 0.95)]
        min_pass_rate: f64,
        #[command(flatten)]
        select: SelectArgs,
    },
    /// Rerun the pipeline over several attention-mass thresholds.
    TauSweep {
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.85, 0.9, 0.95, 1.0])]
        taus: Vec<f64>,
        #[command(flatten)]
        select: SelectArgs,
    },
}

#[derive(Subcommand)]
enum SynthKind {
    /// Write a synthetic activation dump.
    Dump {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 6)]
        latent_rank: usize,
        /// Visual tokens per sample as MIN:MAX.
        #[arg(long, default_value = "8:64", value_parser = parse_range)]
        n_v: (usize, usize),
        /// Instruction tokens per sample as MIN:MAX.
        #[arg(long, default_value = "1:16", value_parser = parse_range)]
        n_u: (usize, usize),
        #[arg(long, default_value_t = 1000)]
        shard_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a planted low-rank matrix as representation files.
    Planted {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Planted singular values, descending.
        #[arg(long, value_delimiter = ',', required = true)]
        spectrum: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        residual: f64,
        /// Constant added to every entry.
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TopLeverage,
    LeverageSample,
}

#[derive(Clone, Copy, ValueEnum)]
enum SvdArg {
    Randomized,
    Dense,
}

/// Selection flags. Unset flags fall back to `--config`, then to defaults.
#[derive(Args)]
struct SelectArgs {
    /// JSON selection config, or a run manifest whose `config` is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Count (100000), share of the pool (16%) or auto.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    energy_threshold: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip column centering.
    #[arg(long)]
    no_center: bool,
    #[arg(long, value_enum)]
    svd: Option<SvdArg>,
    #[arg(long)]
    oversampling: Option<usize>,
    #[arg(long)]
    power_iters: Option<usize>,
}

/// Bad flags or config; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    Usage(message.into()).into()
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected MIN:MAX, got {s:?}"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn load_config(path: &Path) -> Result<SelectConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))
}

impl SelectArgs {
    fn resolve(&self, tau: Option<f64>) -> Result<SelectConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => SelectConfig::default(),
        };
        if let Some(tau) = tau {
            cfg.tau = tau;
        }
        if let Some(b) = &self.budget {
            cfg.budget = b.parse::<Budget>()?;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::TopLeverage => SelectionMode::TopLeverage,
                ModeArg::LeverageSample => SelectionMode::LeverageSample,
            };
        }
        if let Some(s) = self.svd {
            cfg.svd = match s {
                SvdArg::Randomized => SvdMethod::Randomized,
                SvdArg::Dense => SvdMethod::Dense,
            };
        }
        cfg.energy_threshold = self.energy_threshold.unwrap_or(cfg.energy_threshold);
        cfg.epsilon = self.epsilon.unwrap_or(cfg.epsilon);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.oversampling = self.oversampling.unwrap_or(cfg.oversampling);
        cfg.power_iters = self.power_iters.unwrap_or(cfg.power_iters);
        if self.no_center {
            cfg.center = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn config_value(cfg: &SelectConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn repr_outputs(dir: &Path) -> Vec<PathBuf> {
    [REPR_HEADER_FILE, REPR_PAYLOAD_FILE, REPR_IDS_FILE].iter().map(|f| dir.join(f)).collect()
}

fn record_selection(run: &mut Run, result: &SelectionResult, cfg: &SelectConfig, out: &Path) -> Result<()> {
    run.outputs.extend(result.write(out, cfg)?);
    run.seed = Some(cfg.seed);
    run.k_used = Some(result.k_used);
    run.energy_ratio = result.energy_ratio;
    println!(
        "selected {} of {} samples (k = {}, energy {:.4})",
        result.selected.len(),
        result.ids.len(),
        result.k_used,
        result.energy_ratio.unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Writes `name.json`, `name.txt` and `name.csv` into `out`.
fn write_report<T: serde::Serialize>(out: &Path, name: &str, report: &T, text: &str, csv: &str, run: &mut Run) -> Result<()> {
    let json = out.join(format!("{name}.json"));
    write_json_atomic(&json, report)?;
    let txt = out.join(format!("{name}.txt"));
    write_atomic(&txt, text.as_bytes())?;
    let csv_path = out.join(format!("{name}.csv"));
    write_atomic(&csv_path, csv.as_bytes())?;
    run.outputs.extend([json, txt, csv_path]);
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { dump, max_errors, json, out } => {
            let mut run = Run::start("validate");
            let report = validate_dump_with_cap(&dump, max_errors)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
            if let Some(out) = out {
                create_out(&out)?;
                let path = out.join("validation.json");
                write_json_atomic(&path, &report)?;
                run.inputs.push(dump);
                run.outputs.push(path);
                run.finish(&out)?;
            }
            Ok(if report.is_ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Reprs { dump, out, tau, config } => {
            let mut run = Run::start("reprs");
            let mut cfg = match &config {
                Some(path) => load_config(path)?,
                None => SelectConfig::default(),
            };
            cfg.tau = tau.unwrap_or(cfg.tau);
            cfg.validate()?;
            create_out(&out)?;
            let built = build_matrix(&dump, cfg.tau)?;
            built.matrix.save(&out, Some(cfg.tau), &built.skipped)?;
            println!(
                "{} representations of dimension {} ({} skipped, mean retained ratio {:.4})",
                built.matrix.nrows(),
                built.matrix.ncols(),
                built.skipped.len(),
                built.mean_retained_ratio()
            );
            run.config = serde_json::json!({ "tau": cfg.tau });
            run.inputs.push(dump);
            run.outputs = repr_outputs(&out);
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Select { reprs, out, select } => {
            let mut run = Run::start("select");
            let cfg = select.resolve(None)?;
            let (matrix, _) = ReprMatrix::load(&reprs)?;
            create_out(&out)?;
            let result = run_selection(&matrix, &cfg)?;
            run.config = config_value(&cfg);
            run.inputs.push(reprs);
            record_selection(&mut run, &result, &cfg, &out)?;
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline { dump, out, tau, select } => {
            let mut run = Run::start("pipeline");
            let cfg = select.resolve(tau)?;
            create_out(&out)?;
            let built = build_matrix(&dump, cfg.tau)?;
            if !built.skipped.is_empty() {
                log::warn!("{} samples skipped", built.skipped.len());
            }
            built.matrix.save(&out, Some(cfg.tau), &built.skipped)?;
            let result = run_selection(&built.matrix, &cfg)?;
            run.config = config_value(&cfg);
            run.inputs.push(dump);
            run.outputs = repr_outputs(&out);
            record_selection(&mut run, &result, &cfg, &out)?;
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { kind: SynthKind::Dump { out, samples, hidden_dim, latent_rank, n_v, n_u, shard_size, seed } } => {
            let mut run = Run::start("synth-dump");
            let spec = SynthDumpSpec {
                num_samples: samples,
                n_v,
                n_u,
                hidden_dim,
                latent_rank,
                shard_size,
                seed,
            };
            spec.validate()?;
            let manifest = gen_synthetic_dump(&spec, &out)?;
            println!("wrote {} samples in {} shards to {}", manifest.num_samples, manifest.shards.len(), out.display());
            run.config = serde_json::to_value(&spec)?;
            run.seed = Some(seed);
            run.outputs = manifest.shards.iter().map(|s| out.join(s)).collect();
            run.outputs.push(out.join(subsel_core::dump::MANIFEST_FILE));
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { kind: SynthKind::Planted { out, rows, dim, spectrum, residual, offset, seed } } => {
            let mut run = Run::start("synth-planted");
            if !(0.0..1.0).contains(&residual) {
                return Err(usage(format!("residual must lie in [0, 1), got {residual}")));
            }
            let mut spec = PlantedSpec::with_residual_fraction(rows, dim, spectrum, residual, seed);
            if offset != 0.0 {
                spec.mean_offset = vec![offset; dim];
            }
            spec.validate()?;
            create_out(&out)?;
            let planted = gen_planted_matrix(&spec)?;
            planted.matrix.save(&out, None, &[])?;
            println!("wrote a {rows} x {dim} planted matrix of rank {} to {}", spec.true_rank, out.display());
            run.config = serde_json::to_value(&spec)?;
            run.seed = Some(seed);
            run.outputs = repr_outputs(&out);
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { out, sizes, dim, repetitions, select } => {
            let mut run = Run::start("bench");
            let cfg = select.resolve(None)?;
            create_out(&out)?;
            let report = scaling_bench(&sizes, dim, repetitions, &cfg)?;
            run.config = config_value(&cfg);
            run.seed = Some(cfg.seed);
            write_report(&out, "scaling", &report, &report.to_text(), &report.to_csv(), &mut run)?;
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { out, rows, dim, rank, residual, trials, min_pass_rate, select } => {
            let mut run = Run::start("verify");
            let mut cfg = select.resolve(None)?;
            if select.mode.is_none() && select.config.is_none() {
                cfg.mode = SelectionMode::LeverageSample;
            }
            if select.budget.is_none() && select.config.is_none() {
                cfg.budget = Budget::Auto;
            }
            if rank == 0 || !(0.0..1.0).contains(&residual) {
                return Err(usage("rank must be positive and residual must lie in [0, 1)"));
            }
            // geometric decay keeps the planted components well separated
            let spectrum: Vec<f64> = (0..rank).map(|j| 40.0 * 0.9f64.powi(j as i32)).collect();
            let spec = PlantedSpec::with_residual_fraction(rows, dim, spectrum, residual, cfg.seed);
            create_out(&out)?;
            let report = cx_bound_trial(&spec, &cfg, trials)?;
            run.config = config_value(&cfg);
            run.seed = Some(cfg.seed);
            write_report(&out, "verify", &report, &report.to_text(), &report.to_csv(), &mut run)?;
            run.finish(&out)?;
            if report.pass_rate < min_pass_rate {
                eprintln!("error: pass rate {:.4} below {min_pass_rate}", report.pass_rate);
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::TauSweep { dump, out, taus, select } => {
            let mut run = Run::start("tau-sweep");
            let cfg = select.resolve(None)?;
            create_out(&out)?;
            let report = tau_sweep(&dump, &taus, &cfg)?;
            run.config = config_value(&cfg);
            run.seed = Some(cfg.seed);
            run.inputs.push(dump);
            write_report(&out, "tau_sweep", &report, &report.to_text(), &report.to_csv(), &mut run)?;
            run.finish(&out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Usage>() || e.downcast_ref::<subsel_core::Error>().is_some_and(subsel_core::Error::is_usage)
    })
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) || !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {}", one_line(&e.to_string()));
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", one_line(&format!("{err:#}")));
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}
