//! The `fwctl` command surface. Each verb parses its flags, calls into the
//! library and formats the result.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bench::{
    emit_report, estimate_energy, format_mbps, parse_bench_config, run_model_sweep, run_native_bench_trials,
    BenchConfig, BenchError, BenchMode, BenchPath, BenchReport, PlatformProfile,
};
use crate::engine::{Disposition, Engine, SharedEngine, TraceStep};
use crate::net::{LinkPreset, Packet, PacketError};
use crate::ruleset::{parse_rule, parse_ruleset, serialize_ruleset, Policy, Ruleset, RulesetError, Table};
use crate::sync::{
    read_message, write_message, Agent, AgentConfig, PolicyMessage, PolicyServer, ServerState, SyncError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fwctl", version, about = "Userspace firewall control tool")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate an image, printing a summary
    Load(LoadArgs),
    /// Write an image in canonical form (an empty ruleset if no input)
    Save(SaveArgs),
    /// Append a `-A CHAIN ...` rule to an image in place
    Append(AppendArgs),
    /// Remove every rule of a chain in place
    Flush(FlushArgs),
    /// Set the policy of a built-in chain in place
    Policy(PolicyArgs),
    /// Run packets through an engine loaded with an image
    Eval(EvalArgs),
    /// Like eval, also printing every rule and policy decision
    Trace(EvalArgs),
    /// Throughput against rule count, modelled or measured
    Bench(BenchArgs),
    /// Daily and annual running cost of a device
    Energy(EnergyArgs),
    /// Run the policy server
    Serve(ServeArgs),
    /// Run an edge agent that keeps a local engine in sync
    Agent(AgentArgs),
    /// Summarise a group from a server data directory
    Fleet(FleetArgs),
    /// Publish an image to a group on a running server
    Publish(PublishArgs),
}

#[derive(Debug, Args)]
pub struct LoadArgs {
    #[arg(long)]
    pub ruleset: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaveArgs {
    #[arg(long)]
    pub ruleset: Option<PathBuf>,
    /// Output file; standard output if omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the version recorded in the image
    #[arg(long)]
    pub version: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AppendArgs {
    #[arg(long)]
    pub ruleset: PathBuf,
    /// Full rule line, e.g. `-A INPUT -p tcp --dport 22 -j ACCEPT`
    #[arg(long, allow_hyphen_values = true)]
    pub rule: String,
    /// Create the rule's chain as a user chain in this table if missing
    #[arg(long, value_parser = parse_table)]
    pub new_chain: Option<Table>,
}

#[derive(Debug, Args)]
pub struct FlushArgs {
    #[arg(long)]
    pub ruleset: PathBuf,
    #[arg(long)]
    pub chain: String,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    #[arg(long)]
    pub ruleset: PathBuf,
    #[arg(long)]
    pub chain: String,
    #[arg(long, value_parser = parse_policy)]
    pub policy: Policy,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Image to load; an empty all-ACCEPT ruleset if omitted
    #[arg(long)]
    pub ruleset: Option<PathBuf>,
    /// Packet literal; repeat to send several through the same engine
    #[arg(long, required = true)]
    pub packet: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `model` (default) or `native`
    #[arg(long)]
    pub mode: Option<BenchMode>,
    #[arg(long)]
    pub platform: Option<String>,
    /// Comma-separated, ascending rule counts
    #[arg(long, value_delimiter = ',')]
    pub rules: Option<Vec<u64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub total_bytes: Option<u64>,
    #[arg(long)]
    pub path: Option<BenchPath>,
    /// key=value file; flags given on the command line win
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub csv: bool,
    /// Append the alternative-network link presets to the output
    #[arg(long)]
    pub presets: bool,
    /// Replace measured figures with NA so output is reproducible
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[arg(long)]
    pub watts: f64,
    /// Price per kWh
    #[arg(long)]
    pub tariff: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub listen: String,
    #[arg(long)]
    pub data_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AgentArgs {
    #[arg(long)]
    pub server: String,
    #[arg(long)]
    pub group: String,
    #[arg(long)]
    pub agent_id: String,
    #[arg(long, default_value_t = 60.0)]
    pub poll_secs: f64,
    #[arg(long, default_value_t = 60.0)]
    pub stats_secs: f64,
    #[arg(long, default_value = "host")]
    pub platform: String,
    /// Sync and report once, then exit
    #[arg(long)]
    pub once: bool,
}

#[derive(Debug, Args)]
pub struct FleetArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub group: String,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    #[arg(long)]
    pub server: String,
    #[arg(long)]
    pub group: String,
    #[arg(long)]
    pub ruleset: PathBuf,
}

fn parse_table(s: &str) -> Result<Table, String> {
    match s {
        "filter" => Ok(Table::Filter),
        "nat" => Ok(Table::Nat),
        other => Err(format!("unknown table `{other}` (filter|nat)")),
    }
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.to_ascii_uppercase().parse().map_err(|p| format!("unknown policy `{p}` (ACCEPT|DROP)"))
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Ruleset(#[from] RulesetError),
    #[error("rule: {0}")]
    Rule(#[from] crate::ruleset::SyntaxError),
    #[error("packet: {0}")]
    Packet(#[from] PacketError),
    #[error("{0}")]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Sync(#[from] SyncError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn load_ruleset(path: &Path) -> Result<Ruleset, CliError> {
    Ok(parse_ruleset(&read_file(path)?)?)
}

fn update_in_place(path: &Path, f: impl FnOnce(Ruleset) -> Result<Ruleset, CliError>) -> Result<Ruleset, CliError> {
    let rs = f(load_ruleset(path)?)?;
    write_file(path, &serialize_ruleset(&rs))?;
    Ok(rs)
}

/// Parses `argv` (program name first) and runs the verb. Returns the
/// process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return EXIT_OK;
                }
                _ => EXIT_USAGE,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Load(a) => {
            let rs = load_ruleset(&a.ruleset)?;
            writeln!(out, "OK version={} rules={} sha256={}", rs.version(), rs.rule_count(), rs.checksum())?;
            for table in [Table::Filter, Table::Nat] {
                for c in rs.chains(table) {
                    let policy = c.policy.map_or("-", |p| p.name());
                    writeln!(out, "{}:{} {} rules={}", table.name(), c.name, policy, c.rules.len())?;
                }
            }
        }
        Command::Save(a) => {
            let mut rs = match &a.ruleset {
                Some(p) => load_ruleset(p)?,
                None => Ruleset::new(),
            };
            if let Some(v) = a.version {
                rs = rs.with_version(v);
            }
            let text = serialize_ruleset(&rs);
            match &a.out {
                Some(p) => write_file(p, &text)?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::Append(a) => {
            let line = parse_rule(&a.rule)?;
            let rs = update_in_place(&a.ruleset, |rs| {
                let rs = match a.new_chain {
                    Some(t) if rs.chain(&line.chain).is_none() => rs.add_user_chain(t, &line.chain)?,
                    _ => rs,
                };
                Ok(rs.append_rule(&line.chain, line.rule.clone())?)
            })?;
            let n = rs.chain(&line.chain).map_or(0, |c| c.rules.len());
            writeln!(out, "appended {}[{}]", line.chain, n - 1)?;
        }
        Command::Flush(a) => {
            update_in_place(&a.ruleset, |rs| Ok(rs.flush_chain(&a.chain)?))?;
            writeln!(out, "flushed {}", a.chain)?;
        }
        Command::Policy(a) => {
            update_in_place(&a.ruleset, |rs| Ok(rs.set_policy(&a.chain, a.policy)?))?;
            writeln!(out, "policy {} {}", a.chain, a.policy.name())?;
        }
        Command::Eval(a) => eval(&a, false, out)?,
        Command::Trace(a) => eval(&a, true, out)?,
        Command::Bench(a) => bench(a, out)?,
        Command::Energy(a) => {
            let e = estimate_energy(a.watts, a.tariff)?;
            if a.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&e)?)?;
            } else {
                writeln!(out, "watts={}", e.watts)?;
                writeln!(out, "tariff_per_kwh={}", e.tariff_per_kwh)?;
                writeln!(out, "daily_wh={}", trim_float(e.daily_wh()))?;
                writeln!(out, "daily_kwh={}", trim_float(e.daily_kwh))?;
                writeln!(out, "daily_cost={}", trim_float(e.daily_cost))?;
                writeln!(out, "annual_cost={}", trim_float(e.annual_cost))?;
                writeln!(out, "daily_cost_rounded={:.2}", e.daily_cost)?;
                writeln!(out, "annual_cost_rounded={:.2}", e.annual_cost)?;
            }
        }
        Command::Serve(a) => {
            let server = PolicyServer::open(&a.data_dir)?;
            let handle = server.spawn(a.listen.as_str())?;
            writeln!(out, "listening on {}", handle.local_addr())?;
            out.flush()?;
            handle.join();
        }
        Command::Agent(a) => agent(a, out)?,
        Command::Fleet(a) => {
            let state = ServerState::load(&a.data_dir)?;
            let g = state.groups.get(&a.group).ok_or_else(|| SyncError::GroupNotFound(a.group.clone()))?;
            let f = crate::sync::FleetSummary::of(g);
            if a.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&f)?)?;
            } else {
                writeln!(
                    out,
                    "group={} current_version={} agents={} version_skew={}",
                    f.group_id,
                    f.current_version,
                    f.agents.len(),
                    f.version_skew
                )?;
                for ag in &f.agents {
                    let (p, b) = ag.stats.as_ref().map_or((0, 0), |s| (s.packets_total, s.bytes_total));
                    writeln!(
                        out,
                        "agent={} platform={} applied_version={} last_seen={} packets={} bytes={}",
                        ag.agent_id, ag.platform, ag.applied_version, ag.last_seen, p, b
                    )?;
                }
                writeln!(
                    out,
                    "total packets={} bytes={} conns={}",
                    f.total_packets, f.total_bytes, f.total_conns
                )?;
            }
        }
        Command::Publish(a) => {
            let text = read_file(&a.ruleset)?;
            parse_ruleset(&text)?;
            let stream = TcpStream::connect(a.server.as_str()).map_err(SyncError::from)?;
            stream.set_read_timeout(Some(Duration::from_secs(30)))?;
            let mut writer = stream.try_clone()?;
            let mut reader = BufReader::new(stream);
            write_message(&mut writer, &PolicyMessage::ruleset(Some(&a.group), 0, &text))?;
            match read_message(&mut reader)? {
                PolicyMessage::Ack { version: Some(v), .. } => writeln!(out, "published group={} version={v}", a.group)?,
                PolicyMessage::Error { code, text, .. } => return Err(SyncError::Remote { code, text }.into()),
                other => {
                    return Err(SyncError::Unexpected { sent: "RULESET", got: other.kind() }.into());
                }
            }
        }
    }
    Ok(())
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.10}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn format_disposition(d: &Disposition) -> String {
    let mut s = format!("{} rules_traversed={}", d.outcome.name(), d.rules_traversed);
    for e in &d.events {
        let _ = write!(s, "\n  event {} {}", e.kind.name(), e.detail);
    }
    s
}

fn eval(a: &EvalArgs, trace: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let rs = match &a.ruleset {
        Some(p) => load_ruleset(p)?,
        None => Ruleset::new(),
    };
    let mut engine = Engine::new(rs).map_err(RulesetError::from)?;
    for literal in &a.packet {
        let p = Packet::from_literal(literal)?;
        let d = if trace {
            let (d, steps) = engine.trace_packet(&p);
            for step in steps {
                match step {
                    TraceStep::Rule { chain, index, matched, text } => {
                        let mark = if matched { "match" } else { "skip" };
                        writeln!(out, "  {chain}[{index}] {mark}  {text}")?;
                    }
                    TraceStep::Policy { chain, policy } => writeln!(out, "  {chain} policy {}", policy.name())?,
                }
            }
            d
        } else {
            engine.process_packet(&p)
        };
        writeln!(out, "{}", format_disposition(&d))?;
        if d.final_packet != p {
            writeln!(out, "  final {}", d.final_packet)?;
        }
    }
    Ok(())
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => parse_bench_config(&read_file(p)?)?,
        None => BenchConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(name) = &a.platform {
        cfg.profile = PlatformProfile::preset(name)
            .ok_or_else(|| CliError::Usage(format!("unknown platform `{name}` (rpi|cubieboard)")))?;
    }
    if let Some(r) = a.rules {
        cfg.rule_counts = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(b) = a.total_bytes {
        cfg.stream.total_bytes = b;
    }
    if let Some(p) = a.path {
        cfg.stream.path = p;
    }

    let mut report: BenchReport = match cfg.mode {
        BenchMode::Model => run_model_sweep(&cfg.profile, &cfg.rule_counts)?,
        BenchMode::Native => {
            let mut engine = Engine::new(Ruleset::new()).map_err(RulesetError::from)?;
            run_native_bench_trials(&mut engine, &cfg.stream, &cfg.rule_counts, cfg.seed, cfg.trials)?
        }
    };
    if a.no_timing && report.mode == BenchMode::Native {
        for p in &mut report.points {
            p.throughput_mbps = f64::NAN;
            if let Some(audit) = &mut p.audit {
                audit.trials_mbps.clear();
            }
        }
        report.wall_time = Duration::ZERO;
    }
    let presets = a.presets.then_some(&LinkPreset::ALL[..]);
    if a.csv {
        out.write_all(emit_report(&report, presets).as_bytes())?;
        return Ok(());
    }
    writeln!(out, "mode={} platform={}", report.mode.name(), report.platform)?;
    for p in &report.points {
        write!(out, "n_rules={} throughput_mbps={}", p.n_rules, format_mbps(p.throughput_mbps))?;
        if let Some(audit) = &p.audit {
            write!(out, " rules_traversed={} ruleset_sha256={}", audit.rules_traversed, audit.ruleset_sha256)?;
        }
        writeln!(out)?;
    }
    if report.mode == BenchMode::Native {
        write!(out, "packets_processed={}", report.packets_processed)?;
        if !a.no_timing {
            write!(out, " wall_time_s={:.3}", report.wall_time.as_secs_f64())?;
        }
        writeln!(out)?;
    }
    for preset in presets.unwrap_or(&[]) {
        writeln!(out, "preset {} {} Mbps", preset.name(), preset.bandwidth_text())?;
    }
    Ok(())
}

fn agent(a: AgentArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let secs = |v: f64, what: &str| {
        if v.is_finite() && v > 0.0 {
            Ok(Duration::from_secs_f64(v))
        } else {
            Err(CliError::Usage(format!("--{what} must be positive")))
        }
    };
    let mut cfg = AgentConfig::new(&a.agent_id, &a.group, &a.server);
    cfg.poll_interval = secs(a.poll_secs, "poll-secs")?;
    cfg.stats_interval = secs(a.stats_secs, "stats-secs")?;
    cfg.platform = a.platform;
    let engine = SharedEngine::new(Engine::new(Ruleset::new()).map_err(RulesetError::from)?);
    let mut agent = Agent::new(cfg);
    if a.once {
        let outcome = agent.sync(&engine)?;
        agent.report_stats(&engine)?;
        writeln!(out, "{outcome:?} applied_version={}", agent.applied_version())?;
        return Ok(());
    }
    let stop = AtomicBool::new(false);
    agent.run(&engine, &stop);
    Ok(())
}
