use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bitrank::evaluator::wire::serve;
use bitrank::evaluator::{Evaluator, ExternalEvaluator, HostOptions, SyntheticModel, SyntheticParams};
use bitrank::evolve::MutationOperator;
use bitrank::pilot::pilot_study;
use bitrank::pipeline::{run, Preset, RunSpec};
use bitrank::profiling::{fit_seed_to_budget, sensitivity_profile};
use bitrank::report::{emit_reports, read_pareto, read_summary, Summary, PROFILE_CSV};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bitrank",
    version,
    about = "Per-layer bit-width and adapter-rank search under a memory budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layer sensitivity profile and the budget-fitted seed configuration.
    Profile(RunArgs),
    /// Full search; writes the report directory.
    Search(RunArgs),
    /// Prints the headline numbers of a report directory.
    Report {
        dir: PathBuf,
        /// Print summary.json verbatim.
        #[arg(long)]
        json: bool,
    },
    /// Four-configuration shallow/deep study on the synthetic landscape.
    Pilot {
        #[arg(long, default_value_t = 8)]
        layers: usize,
    },
    /// Serves a synthetic model over stdin/stdout.
    #[command(hide = true)]
    ServeSynthetic {
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Appendix,
    MainText,
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    Proximity,
    Resample,
}

#[derive(Args)]
struct RunArgs {
    /// RunSpec JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    space_bits: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    space_ranks: Option<Vec<u32>>,
    #[arg(long, conflicts_with = "budget_avg_bits")]
    budget_bytes: Option<u64>,
    #[arg(long)]
    budget_avg_bits: Option<f64>,
    /// Geometry document (JSON) replacing the evaluator's.
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    gens: Option<usize>,
    #[arg(long)]
    offspring: Option<usize>,
    #[arg(long, value_enum)]
    mutation: Option<MutationArg>,
    #[arg(long)]
    bo_iters: Option<usize>,
    #[arg(long)]
    proxy_steps: Option<u32>,
    #[arg(long, env = "QR_SEED")]
    seed: Option<u64>,
    /// External evaluator command line, split shell-style.
    #[arg(long, conflicts_with = "synthetic")]
    evaluator_cmd: Option<String>,
    /// Use the built-in synthetic evaluator (the default).
    #[arg(long)]
    synthetic: bool,
    /// Layer count of the synthetic model.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    skip_phase1: bool,
    #[arg(long)]
    skip_phase2: bool,
    #[arg(long)]
    skip_phase3: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Serialize evaluations so results are reproducible bit for bit.
    #[arg(long)]
    deterministic: bool,
    /// Concurrent evaluations (external evaluator connections).
    #[arg(long)]
    parallel: Option<usize>,
    /// Skip the exhaustive uniform-configuration baseline.
    #[arg(long)]
    no_uniform_baseline: bool,
}

impl RunArgs {
    fn spec(&self) -> anyhow::Result<RunSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                RunSpec::from_json_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunSpec::default(),
        };
        if let Some(v) = &self.space_bits {
            spec.space_bits = v.clone();
        }
        if let Some(v) = &self.space_ranks {
            spec.space_ranks = v.clone();
        }
        if self.budget_bytes.is_some() || self.budget_avg_bits.is_some() {
            spec.budget_bytes = self.budget_bytes;
            spec.budget_avg_bits = self.budget_avg_bits;
        }
        if self.geometry.is_some() {
            spec.geometry = self.geometry.clone();
        }
        if let Some(p) = self.preset {
            spec.preset = match p {
                PresetArg::Appendix => Preset::Appendix,
                PresetArg::MainText => Preset::MainText,
            };
        }
        spec.pop = self.pop.or(spec.pop);
        spec.gens = self.gens.or(spec.gens);
        spec.offspring = self.offspring.or(spec.offspring);
        if let Some(m) = self.mutation {
            spec.mutation = Some(match m {
                MutationArg::Proximity => MutationOperator::Proximity,
                MutationArg::Resample => MutationOperator::Resample,
            });
        }
        spec.bo_iters = self.bo_iters.unwrap_or(spec.bo_iters);
        spec.proxy_steps = self.proxy_steps.unwrap_or(spec.proxy_steps);
        // clap resolves --seed over QR_SEED; both beat the file
        spec.seed = self.seed.unwrap_or(spec.seed);
        if self.evaluator_cmd.is_some() {
            spec.evaluator_cmd = self.evaluator_cmd.clone();
        }
        if self.synthetic {
            spec.evaluator_cmd = None;
        }
        if let Some(l) = self.layers {
            spec.synthetic.layers = l;
        }
        spec.skip_phase1 |= self.skip_phase1;
        spec.skip_phase2 |= self.skip_phase2;
        spec.skip_phase3 |= self.skip_phase3;
        if self.out.is_some() {
            spec.out = self.out.clone();
        }
        spec.deterministic |= self.deterministic;
        spec.parallel = self.parallel.unwrap_or(spec.parallel);
        spec.uniform_baseline &= !self.no_uniform_baseline;
        spec.space()?;
        spec.evolve_params().validate()?;
        Ok(spec)
    }
}

fn evaluator(spec: &RunSpec) -> anyhow::Result<Box<dyn Evaluator>> {
    Ok(match &spec.evaluator_cmd {
        Some(cmd) => {
            let argv = shell_words::split(cmd).context("splitting --evaluator-cmd")?;
            if argv.is_empty() {
                bail!("--evaluator-cmd is empty");
            }
            let options = HostOptions {
                connections: spec.effective_parallel(),
                ..HostOptions::default()
            };
            Box::new(ExternalEvaluator::spawn(&argv, options).with_context(|| format!("starting `{cmd}`"))?)
        }
        None => Box::new(SyntheticModel::new(spec.synthetic.clone())?),
    })
}

fn out_dir(spec: &RunSpec) -> PathBuf {
    spec.out.clone().unwrap_or_else(|| PathBuf::from("report"))
}

fn profile(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let spec = args.spec()?;
    let ev = evaluator(&spec)?;
    let space = spec.space()?;
    let meta = ev.meta();
    let calib = spec.calib_size.unwrap_or(meta.calib_size);
    let profile = sensitivity_profile(ev.as_ref(), &space, calib, spec.effective_parallel())?;
    let budget = spec.budget(&space, &meta.geometry)?;
    let seed = fit_seed_to_budget(&profile, &space, &meta.geometry, budget)?;
    let csv = profile.to_csv()?;
    if let Some(dir) = &spec.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(PROFILE_CSV), &csv)?;
    }
    print!("{}", String::from_utf8_lossy(&csv));
    println!("budget_bytes {budget}");
    println!("seed {seed}");
    Ok(ExitCode::SUCCESS)
}

fn search(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let spec = args.spec()?;
    let ev = evaluator(&spec)?;
    let report = run(&spec, ev.as_ref())?;
    let dir = out_dir(&spec);
    emit_reports(&report, &dir)?;
    print_summary(&Summary::from_report(&report), &dir);
    for e in &report.errors {
        log::error!("{e}");
    }
    Ok(if report.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn print_summary(s: &Summary, dir: &Path) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    println!("report      {}", dir.display());
    println!("status      {}", if s.ok { "ok" } else { "failed" });
    println!("phases      {}", s.phases.join(", "));
    println!("budget      {} bytes", s.budget_bytes);
    println!("best        {}", fmt(s.best_performance));
    if let (Some(m), Some(b), Some(r)) = (s.best_memory_bytes, s.best_average_bit, s.best_average_rank) {
        println!("  memory    {m} bytes, avg bit {b:.3}, avg rank {r:.3}");
    }
    println!("seed        {}", fmt(s.seed_performance));
    println!("uniform     {}", fmt(s.uniform_best_performance));
    println!("pareto      {} configs", s.pareto_size);
    println!("evaluations {} ({} failed)", s.evaluations, s.failed_evaluations);
    println!(
        "pearson r   {} (reference {})",
        fmt(s.pearson_bits_vs_sensitivity),
        s.reference_pearson_r
    );
    for w in &s.warnings {
        println!("warning     {w}");
    }
    for e in &s.errors {
        println!("error       {e}");
    }
}

fn report(dir: &Path, json: bool) -> anyhow::Result<ExitCode> {
    let summary = read_summary(dir)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print_summary(&summary, dir);
        for row in read_pareto(dir)? {
            println!("  {:.6} {:>12} {}", row.perf, row.memory_bytes, row.config);
        }
    }
    Ok(if summary.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn pilot(layers: usize) -> anyhow::Result<ExitCode> {
    let m = SyntheticModel::new(SyntheticParams {
        layers,
        ..SyntheticParams::default()
    })?;
    let study = pilot_study(&m)?;
    for row in &study.rows {
        println!(
            "{} {:.6} {:>10} {}",
            row.name, row.performance, row.memory_bytes, row.config
        );
    }
    let holds = study.ordering_holds(0.01);
    println!(
        "B > D > C > A: {} (margins {})",
        if holds { "holds" } else { "violated" },
        study
            .margins()
            .iter()
            .map(|m| format!("{m:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(if holds {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn serve_synthetic(layers: usize, seed: u64, noise: f64) -> anyhow::Result<ExitCode> {
    let m = SyntheticModel::new(SyntheticParams {
        layers,
        seed,
        noise_scale: noise,
        ..SyntheticParams::default()
    })?;
    serve(&m, io::stdin().lock(), BufWriter::new(io::stdout().lock()))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile(args) => profile(args),
        Command::Search(args) => search(args),
        Command::Report { dir, json } => report(dir, *json),
        Command::Pilot { layers } => pilot(*layers),
        Command::ServeSynthetic { layers, seed, noise } => serve_synthetic(*layers, *seed, *noise),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
