use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Learns energy-saving habits from smart-home event logs and recommends
/// forgotten actions.
///
/// Settings resolve as flag, then `--config` file, then built-in default.
#[derive(Debug, Parser)]
#[command(name = "ecohabit", version)]
pub struct Cli {
    /// Key-value settings file (`key = value` per line, `#` comments).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print reports as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Log filter written to stderr, e.g. `info` or `ecohabit_service=debug`.
    #[arg(long, global = true, value_name = "FILTER")]
    pub log: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load an event log into the store.
    Ingest(IngestArgs),
    /// Mine relevant patterns from stored events.
    Mine(MineArgs),
    /// Derive or inspect association rules.
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Run stored events through the matcher and write recommendations.
    Replay(ReplayArgs),
    /// Serve the HTTP API. Reads store, ruledb, token and the rest from
    /// `--config`.
    Serve(ServeArgs),
    /// Inspect feedback collected by the service.
    #[command(subcommand)]
    Feedback(FeedbackCommand),
    /// Start a new feedback phase: drop excluded rules, refit, re-threshold.
    Adapt(AdaptArgs),
    /// Compare mining algorithms on a synthetic log.
    Bench(BenchArgs),
    /// Generate a seeded synthetic deployment with ground truth.
    Simulate(SimulateArgs),
    /// Score recommendations against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// `jsonl` (default) or `csv`.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// Reject events of homes or zones missing from this topology file.
    #[arg(long, value_name = "FILE")]
    pub topology: Option<PathBuf>,
    /// Drop events before this instant (RFC 3339).
    #[arg(long)]
    pub min_date: Option<String>,
    #[arg(long)]
    pub max_date: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct MiningFlags {
    /// Fraction in (0, 1].
    #[arg(long)]
    pub min_support: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Largest allowed gap between consecutive pattern events, e.g. `600s`.
    #[arg(long)]
    pub max_gap: Option<String>,
    /// `events` or `days`.
    #[arg(long)]
    pub support_base: Option<String>,
    /// Count only non-overlapping occurrences.
    #[arg(long)]
    pub no_overlap: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// A home id, or `all`.
    #[arg(long, default_value = "all")]
    pub home: String,
    #[command(flatten)]
    pub mining: MiningFlags,
    /// `growth`, `levelwise` or `oracle`.
    #[arg(long)]
    pub algo: Option<String>,
    /// Patterns file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Build scored rules from a patterns file.
    Derive(DeriveArgs),
    /// Print rules in rank order.
    List(ListArgs),
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub patterns: PathBuf,
    /// Rule file to write.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Keep the pattern's other actions in each rule's condition.
    #[arg(long)]
    pub keep_other_actions: bool,
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
    /// `active`, `below_threshold`, `excluded_by_feedback` or `excluded_by_policy`.
    #[arg(long)]
    pub state: Option<String>,
    #[arg(long)]
    pub home: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct MatcherFlags {
    /// How long a matched condition waits for the action, e.g. `5m`.
    #[arg(long)]
    pub action_wait: Option<String>,
    #[arg(long)]
    pub max_gap: Option<String>,
    /// Minimum time between two recommendations of one rule.
    #[arg(long)]
    pub cooldown: Option<String>,
    /// Accept condition events in any order.
    #[arg(long)]
    pub order_insensitive: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
    /// A home id, or `all`.
    #[arg(long, default_value = "all")]
    pub home: String,
    /// Topology file giving device and room names.
    #[arg(long, value_name = "FILE")]
    pub topology: Option<PathBuf>,
    #[command(flatten)]
    pub matcher: MatcherFlags,
    /// Recommendations file to write, one JSON record per line.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on, e.g. `127.0.0.1:8080`; overrides `listen`.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum FeedbackCommand {
    /// Rule census with per-rule feedback counters.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub rules: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// Directory holding the service's recommendations and verdicts.
    #[arg(long, value_name = "DIR")]
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Service store; its feedback history drives exclusion and the fit.
    #[arg(long, value_name = "DIR")]
    pub store: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub state_dir: Option<PathBuf>,
    /// Refit the priority weights on the collected feedback.
    #[arg(long)]
    pub fit: bool,
    /// New priority threshold, or `none`. Keeps the current one if omitted.
    #[arg(long)]
    pub threshold: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated algorithms, at least two.
    #[arg(long, default_value = "growth,levelwise,oracle")]
    pub algos: String,
    #[arg(long, default_value_t = 20_000)]
    pub events: usize,
    /// Distinct event identities.
    #[arg(long, default_value_t = 40)]
    pub alphabet: u32,
    /// Mean time between events.
    #[arg(long, default_value = "4m")]
    pub mean_gap: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Timed runs per algorithm; the fastest is reported.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[command(flatten)]
    pub mining: MiningFlags,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub homes: Option<usize>,
    /// Test period length in days.
    #[arg(long)]
    pub days: Option<u32>,
    #[arg(long)]
    pub train_days: Option<u32>,
    /// Probability that a routine's action is forgotten in the test period.
    #[arg(long)]
    pub forget: Option<f64>,
    /// Unrelated events per hour.
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Directory to write; receives train, test, truth, topology and routines.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub recs: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,
    /// How far a recommendation may be from a forgotten instance.
    #[arg(long, default_value = "15m")]
    pub window: String,
}
