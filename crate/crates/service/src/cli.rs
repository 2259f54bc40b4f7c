//! `acp` command line.
//!
//! Exit codes: 0 success, 1 failed check (vector, experiment or ledger
//! verification), 2 usage error, 3 runtime error.

use crate::{router, AppState};
use acp_admission::conformance::{bundled_suite, load_suite, run_suite};
use acp_admission::contract::UpdateOrdering;
use acp_admission::harness::{
    emit_reports, run_experiment, Exp4Case, Exp7Scenario, ExperimentId, ExperimentParams, LoadParams, ReportFormat,
};
use acp_admission::ledger::{read_ndjson, verify_chain, verify_chain_against_head, ChainHead, SigningKey, Verdict, VerifyingKey};
use acp_admission::policy::{default_policy, EngineVersion, PolicyConfig};
use acp_admission::store::InMemoryStore;
use anyhow::Context;
use clap::{Args, CommandFactory, Parser, Subcommand};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

pub const EXIT_FAIL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ERROR: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "acp", version, about = "Stateful admission control: scoring, conformance vectors, experiments, ledger tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run sequence vectors from a file or directory, or the bundled suite.
    RunVectors {
        /// Vector file, directory of `*.json` files, or `bundled`.
        path: String,
        /// Stop each vector at its first mismatching step.
        #[arg(long)]
        strict: bool,
        /// Base policy file (defaults to the built-in policy).
        #[arg(long, env = "ACP_POLICY_FILE")]
        policy: Option<PathBuf>,
        /// Write the JSON suite report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment and print a summary per case.
    RunExperiment(ExperimentArgs),
    /// Verify an NDJSON ledger file.
    VerifyLedger {
        file: PathBuf,
        /// Hex-encoded Ed25519 public key; when given every signature is checked.
        #[arg(long)]
        pubkey: Option<String>,
        /// Expected number of events, to detect tail truncation (needs --head-hash).
        #[arg(long, requires = "head_hash")]
        head_len: Option<usize>,
        /// Expected hash of the last event.
        #[arg(long, requires = "head_len")]
        head_hash: Option<String>,
    },
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Print the hash of a policy file.
    HashPolicy { file: PathBuf },
    /// Write a new Ed25519 signing key (hex seed) and print its public key.
    Keygen { out: PathBuf },
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// EXP1, EXP2, EXP3B, EXP4, EXP5, EXP6 or EXP7.
    pub id: ExperimentId,
    /// EXP1: number of requests.
    #[arg(long, default_value_t = 500)]
    pub total: usize,
    /// EXP2: agent counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10, 100])]
    pub agents: Vec<usize>,
    /// EXP2: requests per agent.
    #[arg(long, default_value_t = 10)]
    pub per_agent: usize,
    /// EXP3B: injected per-call delays in microseconds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 250, 1000, 5000])]
    pub delays_us: Vec<u64>,
    /// EXP3B: worker threads.
    #[arg(long, default_value_t = 10)]
    pub workers: usize,
    /// EXP3B: timed requests per worker and delay.
    #[arg(long, default_value_t = 100)]
    pub requests_per_worker: usize,
    /// EXP3B: untimed warm-up requests.
    #[arg(long, default_value_t = 1000)]
    pub warmup: usize,
    /// EXP4: BASELINE, SEQUENTIAL, CONCURRENT or NEAR_IDENTICAL (default: all).
    #[arg(long)]
    pub case: Option<Exp4Case>,
    /// EXP4 CONCURRENT: let workers race instead of serializing each request.
    #[arg(long)]
    pub parallel: bool,
    /// EXP6/EXP7: RISK_2_0 or RISK_3_0 (default: both).
    #[arg(long)]
    pub engine_version: Option<EngineVersion>,
    /// EXP7: CLEAN, MIXING or SAME_CONTEXT_BURST (default: all).
    #[arg(long)]
    pub scenario: Option<Exp7Scenario>,
    /// EXP6: number of priming requests.
    #[arg(long, default_value_t = 11)]
    pub primes: usize,
    /// Write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: ReportFormat,
}

impl ExperimentArgs {
    fn params(&self) -> ExperimentParams {
        ExperimentParams {
            total: self.total,
            agents: self.agents.clone(),
            per_agent: self.per_agent,
            delays_us: self.delays_us.clone(),
            load: LoadParams { workers: self.workers, requests_per_worker: self.requests_per_worker, warmup: self.warmup },
            case: self.case,
            parallel: self.parallel,
            version: self.engine_version,
            scenario: self.scenario,
            primes: self.primes,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Policy file (JSON).
    #[arg(long, env = "ACP_POLICY_FILE")]
    pub policy: Option<PathBuf>,
    /// EVALUATE_THEN_UPDATE or UPDATE_THEN_EVALUATE.
    #[arg(long, default_value = "EVALUATE_THEN_UPDATE")]
    pub ordering: UpdateOrdering,
    /// Overrides the policy's engine version.
    #[arg(long)]
    pub engine_version: Option<EngineVersion>,
    /// NDJSON ledger file; loaded if present, appended to otherwise.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// File holding a hex Ed25519 seed; events are signed when given.
    #[arg(long)]
    pub signing_key: Option<PathBuf>,
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            if !rendered.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

/// Runs a parsed command. `Ok(false)` means a check ran and failed.
pub fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::RunVectors { path, strict, policy, out } => run_vectors(&path, strict, policy.as_deref(), out.as_deref()),
        Command::RunExperiment(args) => run_experiment_cmd(&args),
        Command::VerifyLedger { file, pubkey, head_len, head_hash } => {
            let head = head_len.zip(head_hash).map(|(len, hash)| ChainHead { len, hash });
            verify_ledger(&file, pubkey.as_deref(), head.as_ref())
        }
        Command::Serve(args) => serve(args).map(|()| true),
        Command::HashPolicy { file } => {
            let p = PolicyConfig::load(&file).with_context(|| format!("loading {}", file.display()))?;
            println!("{}", p.policy_hash());
            Ok(true)
        }
        Command::Keygen { out } => {
            let key = SigningKey::generate(&mut rand::rngs::OsRng);
            std::fs::write(&out, hex::encode(key.to_bytes()) + "\n").with_context(|| format!("writing {}", out.display()))?;
            println!("{}", hex::encode(key.verifying_key().to_bytes()));
            Ok(true)
        }
    }
}

fn load_policy(path: Option<&Path>) -> anyhow::Result<PolicyConfig> {
    match path {
        Some(p) => PolicyConfig::load(p).with_context(|| format!("loading policy {}", p.display())),
        None => Ok(default_policy()),
    }
}

fn run_vectors(path: &str, strict: bool, policy: Option<&Path>, out: Option<&Path>) -> anyhow::Result<bool> {
    let policy = load_policy(policy)?;
    let suite = if path == "bundled" { bundled_suite() } else { load_suite(path)? };
    let report = run_suite(&suite, &policy, strict)?;
    for r in &report.reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} ({} steps)", r.vector_id, r.steps.len());
        for s in r.steps.iter().filter(|s| !s.pass) {
            println!(
                "  step {}: got {} rs={}, expected {} rs={}",
                s.index,
                s.decision,
                s.risk_score,
                s.expected.decision,
                s.expected.risk_score.map_or("-".to_string(), |v| v.to_string())
            );
        }
    }
    println!("{}", report.summary());
    if let Some(out) = out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(report.all_passed())
}

fn run_experiment_cmd(args: &ExperimentArgs) -> anyhow::Result<bool> {
    let reports = run_experiment(args.id, &args.params())?;
    for r in &reports {
        let [a, e, d, c] = r.counts();
        let mut line = format!(
            "{} {}: approved={a} escalated={e} denied={d} cooldown={c}",
            r.experiment_id, r.scenario
        );
        for (k, v) in &r.milestones {
            line += &format!(" {k}={v}");
        }
        for p in &r.sweep {
            line += &format!(
                "\n  delay={}us throughput={:.0} rps mean_latency={:.1}us",
                p.delay_us, p.throughput_rps, p.mean_latency_us
            );
        }
        if let Some(f) = &r.fast_path {
            line += &format!(
                "\n  fast path: reads {} vs {}, mean {:.0} ns vs {:.0} ns",
                f.cooldown_reads, f.full_reads, f.cooldown_mean_ns, f.full_mean_ns
            );
        }
        println!("{line} {}", if r.pass { "PASS" } else { "FAIL" });
    }
    if let Some(out) = &args.out {
        emit_reports(&reports, out, args.format).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(reports.iter().all(|r| r.pass))
}

fn parse_pubkey(hex_key: &str) -> anyhow::Result<VerifyingKey> {
    let bytes: [u8; 32] = hex::decode(hex_key.trim())
        .context("public key is not hex")?
        .try_into()
        .map_err(|_| anyhow::anyhow!("public key must be 32 bytes"))?;
    Ok(VerifyingKey::from_bytes(&bytes)?)
}

fn verify_ledger(file: &Path, pubkey: Option<&str>, head: Option<&ChainHead>) -> anyhow::Result<bool> {
    let key = pubkey.map(parse_pubkey).transpose()?;
    let f = std::fs::File::open(file).with_context(|| format!("opening {}", file.display()))?;
    let events = read_ndjson(BufReader::new(f))?;
    let verdict = match head {
        Some(h) => verify_chain_against_head(&events, key.as_ref(), h),
        None => verify_chain(&events, key.as_ref()),
    };
    match verdict {
        Verdict::Ok => {
            println!("ok: {} events verified{}", events.len(), if key.is_some() { " (signatures checked)" } else { "" });
            Ok(true)
        }
        Verdict::Broken { broken_at, reason } => {
            println!("broken_at={broken_at}: {reason}");
            Ok(false)
        }
    }
}

fn read_signing_key(path: &Path) -> anyhow::Result<SigningKey> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let seed: [u8; 32] = hex::decode(text.trim())
        .context("signing key is not hex")?
        .try_into()
        .map_err(|_| anyhow::anyhow!("signing key must be a 32-byte seed"))?;
    Ok(SigningKey::from_bytes(&seed))
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter(
        tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
    ).init();
    let mut policy = load_policy(args.policy.as_deref())?;
    if let Some(v) = args.engine_version {
        policy = policy.with_engine_version(v);
    }
    let mut state = AppState::new(policy, Arc::new(InMemoryStore::new()), args.ordering);
    if let Some(k) = &args.signing_key {
        state = state.with_signing_key(read_signing_key(k)?);
    }
    if let Some(l) = &args.ledger {
        state = state.with_ledger_file(l)?;
    }
    let addr = format!("{}:{}", args.host, args.port);
    tracing::info!(
        %addr,
        policy_hash = state.policy().policy_hash(),
        engine_version = %state.policy().engine_version,
        "starting"
    );
    let app = router(Arc::new(state));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}
