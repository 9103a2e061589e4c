use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use fedhub::bench::{self, Transport, TABLE_MODELS};
use fedhub::config::load_config;
use fedhub::distributed::{run_client, run_server, ClientArgs, RetryPolicy};
use fedhub::runs::write_run_dir;
use fedhub::sim::run_simulation;
use fedhub::Error;
use fedhub_core::compression::CodecConfig;
use log::{error, info};

#[derive(Parser)]
#[command(name = "fedhub", version, about = "Federated learning experiments: simulation, socket runs and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Role {
    Server,
    Client,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment on the virtual clock.
    Simulate {
        /// Server YAML (server_configs, client_configs, topology, sim).
        #[arg(long)]
        config: PathBuf,
        /// Per-client YAML files, in client order.
        #[arg(long = "client")]
        clients: Vec<PathBuf>,
        /// Run directory for metrics, utilization and the config snapshot.
        #[arg(long, default_value = "runs/sim")]
        out: PathBuf,
    },
    /// Wall-clock run over TCP.
    Run {
        #[arg(long, value_enum)]
        role: Role,
        /// Server YAML for the server role, the client's own YAML otherwise.
        #[arg(long)]
        config: PathBuf,
        /// Server role: per-client files (optional, only for validation).
        #[arg(long = "client")]
        clients: Vec<PathBuf>,
        #[arg(long, default_value = "runs/server")]
        out: PathBuf,
        /// Server role: give up after this many seconds.
        #[arg(long, default_value_t = 3600.0)]
        timeout: f64,
        /// Client role: server address, overriding comm_configs.server_address.
        #[arg(long)]
        server: Option<String>,
        /// Client role: position used for data partitioning.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Client role: token or env:NAME. Falls back to $FEDHUB_TOKEN, then the file.
        #[arg(long)]
        token: Option<String>,
        #[arg(long, default_value_t = 5)]
        retries: u32,
        #[arg(long, default_value_t = 500)]
        retry_delay_ms: u64,
    },
    /// Round-trip time of one update per transport and size.
    BenchComm {
        /// Parameter counts.
        #[arg(long, value_delimiter = ',', default_value = "1000,1200000,11170000")]
        sizes: Vec<usize>,
        #[arg(long = "transport", value_enum, default_values_t = [Transport::Inline, Transport::MemoryRef, Transport::FsRef])]
        transports: Vec<Transport>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compression ratio and speed on Gaussian-initialized reference models.
    BenchCompress {
        /// Model names from the reference table; all when omitted.
        #[arg(long = "model")]
        models: Vec<String>,
        /// Relative error bounds.
        #[arg(long, value_delimiter = ',', default_value = "0.01")]
        eb: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encoded size of the reference models.
    BenchSize {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-client utilization recomputed from a run directory's gantt.csv.
    ReportUtilization {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Parse and validate configuration files, then print the resolved config.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "client")]
        clients: Vec<PathBuf>,
    },
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn std::io::Write>, Error> {
    Ok(match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate { config, clients, out } => {
            let cfg = load_config(&config, &clients)?;
            let res = run_simulation(&cfg)?;
            write_run_dir(&out, &cfg.snapshot(), &res.records, Some(&res.utilization))?;
            info!("{} aggregations, {:.3} virtual seconds", res.aggregations, res.end_seconds);
            for c in &res.utilization.clients {
                println!("{}\tutilization {:.4}", c.client, c.utilization);
            }
            if let Some(acc) = res.last("server", "val_accuracy") {
                println!("final val_accuracy {acc:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Run { role: Role::Server, config, clients, out, timeout, .. } => {
            let cfg = load_config(&config, &clients)?;
            let run = run_server(&cfg, Duration::from_secs_f64(timeout))?;
            write_run_dir(&out, &cfg.snapshot(), &run.records, None)?;
            println!("{} aggregations, wrote {}", run.aggregations, out.display());
        }
        Command::Run { role: Role::Client, config, server, index, token, retries, retry_delay_ms, .. } => {
            let args = ClientArgs {
                server,
                config,
                index,
                token,
                retry: RetryPolicy { attempts: retries, delay: Duration::from_millis(retry_delay_ms) },
            };
            let rounds = run_client(&args)?;
            println!("{rounds} local rounds");
        }
        Command::BenchComm { sizes, transports, trials, out } => {
            let rows = bench::bench_comm(&sizes, &transports, trials)?;
            bench::write_rows(&rows, &mut output(&out)?)?;
        }
        Command::BenchCompress { models, eb, seed, out } => {
            let chosen: Vec<(&str, usize)> = if models.is_empty() {
                TABLE_MODELS.to_vec()
            } else {
                models
                    .iter()
                    .map(|m| {
                        TABLE_MODELS
                            .iter()
                            .copied()
                            .find(|(n, _)| n == m)
                            .ok_or_else(|| Error::Invalid(format!("unknown model `{m}`")))
                    })
                    .collect::<Result<_, _>>()?
            };
            let codecs: Vec<CodecConfig> =
                eb.iter().map(|&e| CodecConfig { eb_rel: e, ..CodecConfig::default() }).collect();
            let rows = bench::bench_compress(&chosen, &codecs, seed)?;
            bench::write_rows(&rows, &mut output(&out)?)?;
        }
        Command::BenchSize { out } => {
            let rows = bench::size_table(TABLE_MODELS)?;
            bench::write_rows(&rows, &mut output(&out)?)?;
        }
        Command::ReportUtilization { run_dir } => {
            let report = bench::report_utilization(&run_dir)?;
            bench::write_rows(&report.clients, &mut std::io::stdout())?;
        }
        Command::ValidateConfig { config, clients } => {
            let cfg = load_config(&config, &clients)?;
            print!("{}", cfg.snapshot());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Unauthenticated => 3,
                Error::ConnectionRefused(_) => 4,
                _ => 1,
            })
        }
    }
}
