use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use isto_cli::commands::{self, exit_code};
use isto_cli::config::format_sequence;
use isto_cli::RunConfig;

#[derive(Parser)]
#[command(name = "isto", version, about = "Switched-system optimal control on the Double Tank benchmark")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Minimum uptime in seconds (0 disables it)
    #[arg(long, global = true)]
    min_uptime: Option<f64>,
    /// Nodes of the relaxed transcription
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Intervals per STO stage (default: about 300 over each sequence)
    #[arg(long, global = true)]
    stage_nodes: Option<usize>,
    /// Initial stage sequence, e.g. 11,01,10,00
    #[arg(long, global = true)]
    sequence: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Evaluate on one thread
    #[arg(long, global = true)]
    sequential: bool,
    /// Extra key=value settings, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the relaxed problem
    Relax,
    /// Project a relaxed control grid onto binary values and simulate it
    Round {
        /// Relaxed grid CSV (default: <out-dir>/relaxed_grid.csv)
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Trajectory supplying c2 (default: <out-dir>/relaxed_trajectory.csv)
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Run the iterative switching time optimization
    Isto,
    /// Re-simulate a trajectory or control grid CSV
    Simulate {
        input: PathBuf,
        /// c2 for grid inputs, which carry no continuous column
        #[arg(long, default_value_t = 0.0)]
        c2: f64,
    },
    /// Run every route and write a comparison with a plot script
    Compare,
}

fn build_config(c: &Common) -> isto::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_kv_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| isto::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = c.min_uptime {
        cfg.min_uptime = v;
    }
    if let Some(v) = c.nodes {
        cfg.nodes = v;
    }
    if let Some(v) = c.stage_nodes {
        cfg.stage_nodes = Some(v);
    }
    if let Some(s) = &c.sequence {
        cfg.set("sequence", s)?;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.sequential |= c.sequential;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> isto::Result<()> {
    let cfg = build_config(&cli.common)?;
    match &cli.command {
        Command::Relax => {
            let r = commands::relax(&cfg)?;
            println!(
                "relaxed objective {:.6} ({} nodes, {} iterations, {:.2} s)",
                r.objective, r.nodes, r.iterations, r.wall_time
            );
        }
        Command::Round { grid, trajectory } => {
            let r = commands::round(&cfg, grid.as_deref(), trajectory.as_deref())?;
            println!(
                "eta {:.6} (optimal: {}), simulated cost {:.4}, max |x2 - r| {:.4}",
                r.cia.eta,
                r.cia.optimal,
                r.cia.simulated_cost.unwrap_or(f64::NAN),
                r.max_tracking_error
            );
        }
        Command::Isto => {
            let s = commands::isto(&cfg, cfg.min_uptime, "isto").map_err(|f| {
                for rec in &f.records {
                    eprintln!("{}", rec.summary_line());
                }
                f.error
            })?;
            println!(
                "final sequence {} after {} iterations, cost {:.6}, w {:?}",
                s.final_sequence, s.iterations, s.cost, s.solution.w
            );
        }
        Command::Simulate { input, c2 } => {
            let t = commands::simulate_file(&cfg, input, *c2)?;
            println!("simulated cost {:.6}", t.total_cost());
        }
        Command::Compare => {
            let r = commands::compare(&cfg)?;
            print!("{}", commands::compare_table(&r));
            println!("initial sequence {}", format_sequence(&cfg.sequence.stages));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
