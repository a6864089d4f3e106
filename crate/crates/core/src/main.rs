use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cocodc_sim::harness::{
    emit, parse_override, run_experiment, summarize, ExperimentConfig, OutputFormat, RunRecord,
};
use cocodc_sim::protocol::Method;
use cocodc_sim::{Error, Result};

#[derive(Parser)]
#[command(name = "cocodc-sim", version, about = "Cross-region training protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every listed method and seed of one experiment
    Run(Common),
    /// Run all three methods side by side and report medians
    Compare(Common),
    /// Run the cartesian product of the `[sweep]` table
    Sweep(Common),
    /// Check the config and exit
    Validate(Common),
}

#[derive(Args)]
struct Common {
    config: PathBuf,
    /// Override a config key, e.g. `--set lambda=0.25` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (defaults to the config's `output`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Skip writing per-run CSV curves
    #[arg(long)]
    no_curves: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(seeds) = &self.seeds {
            overrides.push((
                "seeds".into(),
                toml::Value::Array(seeds.iter().map(|&s| toml::Value::Integer(s as i64)).collect()),
            ));
        }
        ExperimentConfig::load(&self.config, &overrides)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output))
    }

    fn formats(&self) -> Vec<OutputFormat> {
        if self.no_curves {
            vec![OutputFormat::Json]
        } else {
            vec![OutputFormat::Csv, OutputFormat::Json]
        }
    }
}

fn fmt_opt(v: Option<f64>, precision: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.precision$}"))
}

fn report(label: &str, records: &[RunRecord]) {
    if !label.is_empty() {
        println!("## {label}");
    }
    println!(
        "{:<18} {:>5} {:>7} {:>12} {:>11} {:>11} {:>14}  syncs/fragment",
        "method", "runs", "reached", "med_steps", "med_loss", "med_ppl", "med_seconds"
    );
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    for m in methods {
        let s = summarize(records, m);
        println!(
            "{:<18} {:>5} {:>7} {:>12} {:>11} {:>11} {:>14}  {:?}",
            m.name(),
            s.runs,
            s.reached_threshold,
            fmt_opt(s.median_steps_to_threshold, 1),
            fmt_opt(s.median_final_loss, 5),
            fmt_opt(s.median_final_ppl, 4),
            fmt_opt(s.median_virtual_seconds, 1),
            s.total_sync_counts,
        );
    }
    for r in records.iter().filter(|r| r.failed) {
        eprintln!(
            "run {} seed {} failed: {}",
            r.method,
            r.seed,
            r.failure.as_deref().unwrap_or("unknown")
        );
    }
}

fn execute(label: &str, cfg: &ExperimentConfig, dir: &Path, formats: &[OutputFormat]) -> Result<bool> {
    let records = run_experiment(cfg)?;
    emit(dir, label, cfg, &records, formats)?;
    report(label, &records);
    Ok(records.iter().all(|r| !r.failed))
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Validate(args) => {
            let cfg = args.load()?;
            for (label, c) in cfg.expand_sweep()? {
                for &m in &c.methods {
                    let sim = c.sim_config(m, c.seeds[0]);
                    let task = cocodc_sim::tasks::make_task(
                        &c.task_config(c.seeds[0]),
                        c.workers,
                        sim.protocol.effective().fragments,
                    )?;
                    cocodc_sim::protocol::Simulation::new(sim, &task)?;
                }
                if !label.is_empty() {
                    println!("ok: {label}");
                }
            }
            println!("config ok");
            Ok(true)
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            execute("", &cfg, &args.out_dir(&cfg), &args.formats())
        }
        Command::Compare(args) => {
            let mut cfg = args.load()?;
            if cfg.methods.len() < 2 {
                cfg.methods = Method::ALL.to_vec();
            }
            execute("", &cfg, &args.out_dir(&cfg), &args.formats())
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            if cfg.sweep.is_empty() {
                return Err(Error::config("sweep", "no `[sweep]` table in config"));
            }
            let root = args.out_dir(&cfg);
            let mut ok = true;
            for (label, c) in cfg.expand_sweep()? {
                let dir = root.join(label.replace(['/', '\\'], "_"));
                ok &= execute(&label, &c, &dir, &args.formats())?;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
