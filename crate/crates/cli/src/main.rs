mod client;
mod commands;
mod serve;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Plan, simulate and run a strangler-fig migration of a modelled monolith.
#[derive(Debug, Parser)]
#[command(name = "stranglerkit", version)]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// Seed for synthetic data. The flag wins over the environment.
    #[arg(long, global = true, env = "STRANGLERKIT_SEED", default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coupling scores and extraction ranking of the model's contexts.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        /// Count each dependency once instead of by call weight.
        #[arg(long)]
        unweighted: bool,
        /// Also propose context labels from the call graph.
        #[arg(long)]
        infer: bool,
    },
    /// Check a model (and optionally a trace) against the model rules.
    Validate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate the migration plan for one context.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: String,
        /// Traffic shift schedule, strictly increasing, ending at 100.
        #[arg(long, value_delimiter = ',', default_values_t = [10u8, 50, 100])]
        schedule: Vec<u8>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Apply plan steps, journaling each so it can be rolled back.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Step ids to apply in order.
        #[arg(long, required = true, value_delimiter = ',')]
        step: Vec<u32>,
        /// Migration state file. Defaults to `<model>.state.json`.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Source change log (JSON lines). Synthesized from the seed if absent.
        #[arg(long)]
        changelog: Option<PathBuf>,
        /// Write the resulting model here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Undo the most recently applied step.
    Rollback {
        #[arg(long)]
        state: PathBuf,
        /// Refuse unless this is the last applied step.
        #[arg(long)]
        step: Option<u32>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Replay a trace, optionally step by step through a plan.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Leave the replica stale at cutover.
        #[arg(long)]
        stale_cutover: bool,
        #[arg(long, default_value_t = 1)]
        replicas: usize,
    },
    /// Database decomposition.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
    /// Run the routing gateway.
    Gateway {
        #[command(subcommand)]
        command: GatewayCommand,
    },
    /// Talk to a running gateway's registry.
    Registry {
        #[command(subcommand)]
        command: RegistryCommand,
    },
    /// Echo server used as a stand-in upstream.
    #[command(hide = true)]
    StubUpstream {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        name: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum DbCommand {
    /// Replication state of every replica database.
    SyncStatus {
        #[arg(long)]
        model: PathBuf,
    },
    /// Drain the change log into the context's replica and cut over.
    Cutover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        context: String,
        #[arg(long)]
        changelog: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// List cross-database accesses and constraints.
    Verify {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum GatewayCommand {
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub listen: SocketAddr,
    /// Serve admin and registry endpoints here instead of on `--listen`.
    #[arg(long)]
    pub admin_listen: Option<SocketAddr>,
    /// Length of one time unit.
    #[arg(long, default_value_t = 100)]
    pub time_unit_ms: u64,
    #[arg(long, default_value_t = 5)]
    pub failure_threshold: u32,
    /// In time units.
    #[arg(long, default_value_t = 30)]
    pub cooldown: u64,
    /// In time units.
    #[arg(long, default_value_t = 2)]
    pub call_timeout: u64,
    #[arg(long, default_value_t = 1024)]
    pub cache_capacity: usize,
    /// In time units.
    #[arg(long, default_value_t = 10)]
    pub heartbeat_interval: u64,
    #[arg(long, default_value_t = 3)]
    pub missed_beats: u64,
    /// Require `Authorization: Bearer <token>` on proxied requests.
    #[arg(long)]
    pub token: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum RegistryCommand {
    Register {
        #[arg(long)]
        admin: String,
        #[arg(long)]
        service: String,
        #[arg(long)]
        instance: String,
        #[arg(long)]
        address: String,
    },
    Deregister {
        #[arg(long)]
        admin: String,
        #[arg(long)]
        service: String,
        #[arg(long)]
        instance: String,
    },
    Heartbeat {
        #[arg(long)]
        admin: String,
        #[arg(long)]
        service: String,
        #[arg(long)]
        instance: String,
    },
    List {
        #[arg(long)]
        admin: String,
        #[arg(long)]
        service: String,
    },
}

/// Bad invocation or unreadable input: exit 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Result of a subcommand that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    Findings,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Findings) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
