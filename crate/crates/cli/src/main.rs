use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use priorsr::constraints::{catalog, check, ConstraintSet, DataStats};
use priorsr::datagen::{add_noise, make_dataset, save_csv, subsample, NoiseSpec, SystemId, SystemSpec};
use priorsr::pipeline::{evaluate_splits, Engine, RunConfig};
use priorsr::pool::Pool;
use priorsr::{parse, Params, MAX_PARAMS};

#[derive(Parser)]
#[command(name = "priorsr", version, about = "Prior-guided symbolic regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a search from a TOML config.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        system: Option<SystemId>,
        #[arg(long)]
        max_samples: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the best candidate of a checkpoint on the validation splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        system: Option<SystemId>,
    },
    /// Write a system's synthetic dataset as CSV.
    GenData {
        #[arg(long)]
        system: SystemId,
        #[arg(long)]
        out: PathBuf,
        /// Standard deviation of Gaussian noise added to training inputs.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Seed for noise and subsampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of training rows to keep.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Check one expression against a system's constraints.
    Check {
        #[arg(long)]
        system: SystemId,
        #[arg(long, allow_hyphen_values = true)]
        expr: String,
        /// Comma-separated parameter values p0,p1,...
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        params: String,
        /// Constraint catalog JSON to use instead of the built-in one.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Print a system's constraint catalog as JSON.
    Catalog {
        #[arg(long)]
        system: SystemId,
    },
    /// List the insights stored in a checkpoint.
    Insights {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn parse_params(s: &str) -> Result<Params> {
    let mut p = [0.0; MAX_PARAMS];
    for (i, v) in s.split(',').filter(|v| !v.trim().is_empty()).enumerate() {
        if i >= MAX_PARAMS {
            bail!("at most {MAX_PARAMS} parameters");
        }
        p[i] = v.trim().parse().with_context(|| format!("bad parameter {v:?}"))?;
    }
    Ok(p)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Run { config, seed, system, max_samples, output, resume } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = system {
                cfg.system = s;
            }
            if let Some(n) = max_samples {
                cfg.max_sample_num = n;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            let mut engine = match resume {
                Some(ck) => {
                    let gen = Engine::new(cfg.clone())?.into_generator();
                    Engine::resume(cfg, gen, &ck)?
                }
                None => Engine::new(cfg)?,
            };
            let report = engine.run()?;
            print!("{}", report.to_toml());
        }
        Cmd::Eval { checkpoint, config, system } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = system {
                cfg.system = s;
            }
            let pool = Pool::load(&checkpoint)?;
            let best = pool.best_valid().or_else(|| pool.best()).context("checkpoint holds no candidates")?;
            let data = cfg.dataset()?;
            let (id, ood) = evaluate_splits(&best.expr, &best.params, &data);
            println!("expr = {}", best.expr.serialize());
            println!("valid = {}", best.valid);
            println!("nmse_id = {id:e}");
            println!("nmse_ood = {ood:e}");
        }
        Cmd::GenData { system, out, noise, seed, fraction } => {
            let mut d = make_dataset(&SystemSpec::default_for(system))?;
            if noise > 0.0 {
                d = add_noise(&d, NoiseSpec { sigma: noise, seed })?;
            }
            if fraction < 1.0 {
                d = subsample(&d, fraction, seed)?;
            }
            save_csv(&d, &out)?;
            println!("wrote {} rows to {}", d.len(), out.display());
        }
        Cmd::Check { system, expr, params, catalog: file } => {
            let e = parse(&expr)?;
            let p = parse_params(&params)?;
            let cs = match file {
                Some(f) => {
                    let text = std::fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
                    ConstraintSet::from_json(&text)?
                }
                None => catalog(system),
            };
            let data = make_dataset(&SystemSpec::default_for(system))?;
            let report = check(&e, &p, &cs, &DataStats::from_dataset(&data))?;
            for o in &report.per_check {
                let m = o.measured.map_or("non-finite".to_string(), |m| format!("{m:e}"));
                println!(
                    "{:<5} {:<28} measured {m} threshold {:e}",
                    if o.passed { "pass" } else { "FAIL" },
                    o.name,
                    o.threshold
                );
            }
            println!("valid = {}", report.valid);
            if let Some(r) = report.failure_reason {
                println!("reason = {r}");
            }
        }
        Cmd::Catalog { system } => println!("{}", catalog(system).to_json()),
        Cmd::Insights { checkpoint } => {
            let pool = Pool::load(&checkpoint)?;
            for i in &pool.insights {
                println!("[{}] island {} {:?} at {}: {}", i.id, i.island, i.kind, i.created_at, i.text);
            }
        }
    }
    Ok(())
}
