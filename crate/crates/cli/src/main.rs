use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssdwm::bench::{bench_scaling, TrackingAlloc};
use ssdwm::config::{parse_sampler, RunConfig, SeqMode};
use ssdwm::train::{train_agent, train_gridworld};
use ssdwm::verify::{run_all, Faults};

#[global_allocator]
static ALLOC: TrackingAlloc = TrackingAlloc;

#[derive(Parser)]
#[command(name = "ssdwm", version, about = "SSD world model: grid-world training, agent training, scaling benchmark, self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["dfs", "uniform"])]
    sampler: Option<String>,
    #[arg(long, global = true, value_parser = ["recurrent", "chunked", "quadratic", "gru"])]
    mode: Option<String>,
    /// Output directory; defaults to `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Token-mode sequence training on grid-world trajectories.
    TrainGridworld,
    /// Full collect / world-model / imagination loop on the pixel grid world.
    TrainAgent,
    /// Per-step time and peak memory against sequence length for each mode.
    BenchScaling,
    /// Run every self-check and exit nonzero on any failure.
    Verify {
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Skip forcing unit decays in the linear-attention check.
    LinearAttention,
}

fn load_config(c: &Common) -> ssdwm::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = &c.sampler {
        cfg.sampler = parse_sampler(s)?;
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(c: &Common, default: &str, cfg: &RunConfig) -> ssdwm::Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| Path::new("runs").join(default));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.cfg"), cfg.to_text())?;
    Ok(dir)
}

fn run(cli: Cli) -> ssdwm::Result<bool> {
    let c = &cli.common;
    match cli.command {
        Command::TrainGridworld => {
            let cfg = load_config(c)?;
            let out = prepare_out(c, "gridworld", &cfg)?;
            let r = train_gridworld(&cfg, Some(&out))?;
            println!("config {} mode {}", cfg.hash(), cfg.mode.name());
            println!("{} steps in {:.1}s", r.steps, r.seconds);
            for (name, e) in [("initial", r.initial), ("final", r.final_errors)] {
                println!("{name}: E_g {:.2}%  E_l {:.2}%  combined {:.2}%", e.geometric, e.logic, e.combined());
            }
            println!("metrics in {}", out.display());
        }
        Command::TrainAgent => {
            let cfg = load_config(c)?;
            let out = prepare_out(c, "agent", &cfg)?;
            let r = train_agent(&cfg, Some(&out))?;
            println!("config {} sampler {}", cfg.hash(), ssdwm::config::sampler_name(cfg.sampler));
            println!("{} env steps, {} updates in {:.1}s", r.env_steps, r.updates, r.seconds);
            for (step, ret) in &r.history {
                println!("step {step:>6}: greedy return {ret:.3}");
            }
            println!("random return {:.3}, final return {:.3} ({:.2}x)", r.random_return, r.final_return, r.final_return / r.random_return);
            println!("counters: world {} behaviour {} consistent {}", r.world_count_total, r.behaviour_count_total, r.counters_consistent);
            println!("metrics in {}", out.display());
        }
        Command::BenchScaling => {
            let cfg = load_config(c)?;
            let out = prepare_out(c, "bench", &cfg)?;
            let modes = match &c.mode {
                Some(_) => vec![cfg.mode],
                None => SeqMode::ALL.to_vec(),
            };
            if !TrackingAlloc::active() {
                eprintln!("warning: allocation tracking inactive, peak memory reads as zero");
            }
            let r = bench_scaling(&cfg, &modes, Some(&out))?;
            print!("{}", r.summary());
            println!("{:.1}s; metrics in {}", r.seconds, out.display());
        }
        Command::Verify { inject_fault } => {
            let faults = Faults { skip_unit_decay: matches!(inject_fault, Some(Fault::LinearAttention)) };
            let results = run_all(faults);
            for r in &results {
                println!("{} {:<26} {:>8.3}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
