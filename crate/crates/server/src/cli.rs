use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use webrl_core::latency::{
    report, simulate, trace_ndjson, Distribution, MessageSizes, NetworkModel, ProtocolVariant,
    Report, VariantKind,
};
use webrl_core::persistence::export_log;
use webrl_core::stage::{validate_definition, ExperimentDefinition};

use crate::config::ServerConfig;
use crate::transport;

#[derive(Debug, Parser)]
#[command(
    name = "webrl",
    version,
    about = "Serve environment-based experiments over WebSockets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the server until interrupted.
    Serve {
        /// Server config file; `WEBRL_*` variables override it.
        #[arg(long, env = "WEBRL_CONFIG")]
        config: Option<PathBuf>,
    },
    /// Check an experiment definition and list every problem.
    Validate { experiment: PathBuf },
    /// Write the dataset for one experiment from a record log.
    Export {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        experiment_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare speculative and naive round trips in a simulated network.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantChoice {
    Speculative,
    Naive,
    Both,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub variant: VariantChoice,
    /// Round-trip time: `100`, `uniform:50,150`, `lognormal:4,0.5` or `exponential:80`.
    #[arg(long, default_value = "100", value_parser = parse_distribution)]
    pub rtt: Distribution,
    /// Size of the action set.
    #[arg(long, default_value_t = 5)]
    pub actions: u32,
    #[arg(long, default_value_t = 1000)]
    pub steps: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// NDJSON trace output; omitted means no trace file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Server time per reply.
    #[arg(long, default_value_t = 5.0)]
    pub compute_ms: f64,
    /// Time between a frame rendering and the next keypress.
    #[arg(long, default_value = "exponential:500", value_parser = parse_distribution)]
    pub think: Distribution,
    /// Probability that a message is lost and retransmitted.
    #[arg(long, default_value_t = 0.0)]
    pub loss: f64,
    #[arg(long, default_value_t = 0.0)]
    pub serialization_ms_per_kb: f64,
    /// Reply size budget for the crossover line.
    #[arg(long, default_value_t = 1500)]
    pub budget_bytes: u64,
    /// Also write the summary as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_distribution(s: &str) -> Result<Distribution, String> {
    Distribution::parse(s).map_err(|e| e.to_string())
}

/// Runs the requested simulations and writes the optional files.
pub fn run_simulate(args: &SimulateArgs) -> anyhow::Result<Report> {
    let kinds: &[VariantKind] = match args.variant {
        VariantChoice::Speculative => &[VariantKind::Speculative],
        VariantChoice::Naive => &[VariantKind::Naive],
        VariantChoice::Both => &[VariantKind::Speculative, VariantKind::Naive],
    };
    let mut net = NetworkModel::fixed(0.0);
    net.rtt = args.rtt.clone();
    net.loss = args.loss;
    net.serialization_ms_per_kb = args.serialization_ms_per_kb;
    let sizes = MessageSizes::gridnav_default();
    let mut traces = Vec::new();
    for &kind in kinds {
        let variant = ProtocolVariant {
            kind,
            action_count: args.actions,
            compute_ms: args.compute_ms,
            think: args.think.clone(),
        };
        traces.push(simulate(&variant, &net, &sizes, args.steps, args.seed)?);
    }
    if let Some(path) = &args.out {
        let body: String = traces.iter().map(trace_ndjson).collect();
        std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    let rep = report(&traces, &sizes, args.budget_bytes);
    if let Some(path) = &args.csv {
        std::fs::write(path, rep.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(rep)
}

pub async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve { config } => {
            let mut cfg = ServerConfig::load(config.as_deref())?;
            cfg.apply_env(std::env::vars())?;
            let exp = transport::load_experiment(&cfg.experiment)
                .with_context(|| format!("loading {}", cfg.experiment.display()))?;
            let running = transport::start(&cfg, exp).await?;
            println!("listening on {}", running.addr);
            tokio::signal::ctrl_c().await?;
            tracing::info!("shutting down");
            let stats = running.shutdown().await?;
            tracing::info!(
                written = stats.written,
                dead_lettered = stats.dead_lettered,
                "save queue drained"
            );
            Ok(())
        }
        Command::Validate { experiment } => {
            let def = ExperimentDefinition::load(&experiment)?;
            let issues = validate_definition(&def);
            if issues.is_empty() {
                if def.conditions.is_empty() {
                    println!("{}: ok, {} stages", experiment.display(), def.stages.len());
                } else {
                    println!(
                        "{}: ok, {} conditions",
                        experiment.display(),
                        def.conditions.len()
                    );
                }
                return Ok(());
            }
            for i in &issues {
                println!("{i}");
            }
            bail!("{} issue(s) in {}", issues.len(), experiment.display())
        }
        Command::Export {
            log,
            experiment_id,
            out,
        } => {
            let m = export_log(&log, &experiment_id, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Simulate(args) => {
            let rep = run_simulate(&args)?;
            print!("{}", rep.to_table());
            Ok(())
        }
    }
}
