use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use certgate_core::boundary::{measures, GeneratorSpec, Mode};
use certgate_core::certifier::{
    certify_with_ledger, commit_memory, inspect_certificate, Certificate, CertifierConfig, MacKey, Verdict,
    MAC_KEY_ENV,
};
use certgate_core::executor::{execute, Environment, ExecuteError};
use certgate_core::ledger::{recertify, verify_file, DirTraceStore, EntryDraft, Ledger, LedgerRecord};
use certgate_core::memory::MemoryState;
use certgate_core::policy::{lint_policy, parse_policy, PolicySystem};
use certgate_core::scenario::{run_all, run_scenario};
use certgate_core::trace::{canonical_hash, parse_trace, ProposedTrace};

/// Key used by `scenario run` when none is configured. Scenario reports never
/// contain MACs, so the choice does not affect their output.
const SCENARIO_FALLBACK_KEY: &[u8] = b"certgate-scenario-key";

#[derive(Parser)]
#[command(name = "certgate", version, about = "Certify, execute and audit agent traces against layered policies")]
struct Cli {
    /// Config file (TOML or JSON) with `certifier`, `ledger` and `traces` entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the generator seed for `eval`
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify a proposed trace; exit 0 certified, 10 escalate, 20 rejected
    Certify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// Proof memory file; read if present, rewritten after a certified trace
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Certifier config (TOML or JSON), overriding the `certifier` table of --config
        #[arg(long)]
        certifier: Option<PathBuf>,
        /// Append the verdict to this ledger
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Write the certificate here when certified
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a certified trace in a scripted environment; exit 0/30/31/32, or 40 when refused
    Execute {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        cert: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
        /// Environment JSON: {tool_behaviors, deviation_injections, clock}
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Check a certificate against a disclosed trace; exit 1 if any check fails
    Audit {
        #[arg(long)]
        cert: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Re-evaluate ledger entries under a new policy and record the results
    Recertify {
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
        /// Entry to recertify; every certified entry when omitted
        #[arg(long)]
        seq: Option<u64>,
        /// Directory of stored traces (`<hash>.json`)
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        tick: Option<u64>,
    },
    /// Boundary measures for a generator, certifier and oracle policy
    Eval {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        certifier: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
        /// `sample:<n>`, `exact` or `exact:<max universe>`; defaults to the generator's mode
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Run a named scenario, or all of them
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    Ledger {
        #[command(subcommand)]
        action: LedgerAction,
    },
}

#[derive(Subcommand)]
enum ScenarioAction {
    /// Exit 1 if any check fails
    Run { name: String },
    List,
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Validate a policy file and report monitor determinism
    Lint { file: PathBuf },
}

#[derive(Subcommand)]
enum LedgerAction {
    /// Verify the hash chain of a ledger file
    Verify { file: PathBuf },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppConfig {
    certifier: Option<Value>,
    ledger: Option<PathBuf>,
    traces: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// TOML unless the file name ends in `.json`.
fn read_structured(path: &Path) -> Result<Value> {
    let text = String::from_utf8(read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => serde_json::from_value(read_structured(p)?).with_context(|| format!("config {}", p.display())),
    }
}

fn env_key() -> Option<String> {
    std::env::var(MAC_KEY_ENV).ok().filter(|k| !k.trim().is_empty())
}

fn certifier_config(app: &AppConfig, file: Option<&Path>) -> Result<CertifierConfig> {
    let mut raw = match file {
        Some(p) => read_structured(p)?,
        None => app
            .certifier
            .clone()
            .ok_or_else(|| anyhow!("no certifier configured: pass --certifier or add a `certifier` table to --config"))?,
    };
    let obj = raw
        .as_object_mut()
        .ok_or_else(|| anyhow!("certifier config must be a table"))?;
    if let Some(k) = env_key() {
        obj.insert("mac_key".into(), Value::String(k));
    }
    if !obj.contains_key("mac_key") {
        bail!("no MAC key: set {MAC_KEY_ENV} or `mac_key` in the certifier config");
    }
    serde_json::from_value(raw).context("invalid certifier config")
}

fn mac_key(app: &AppConfig) -> Result<MacKey> {
    let hex = env_key()
        .or_else(|| {
            app.certifier
                .as_ref()
                .and_then(|c| c.get("mac_key"))
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .ok_or_else(|| anyhow!("no MAC key: set {MAC_KEY_ENV} or `certifier.mac_key` in --config"))?;
    MacKey::from_hex(&hex).map_err(|_| anyhow!("MAC key is not valid non-empty hex"))
}

fn load_trace(path: &Path) -> Result<ProposedTrace> {
    parse_trace(&read(path)?).with_context(|| format!("trace {}", path.display()))
}

fn load_policy(path: &Path) -> Result<PolicySystem> {
    parse_policy(&read(path)?).with_context(|| format!("policy {}", path.display()))
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

fn traces_dir(app: &AppConfig, explicit: Option<PathBuf>, ledger: &Path) -> PathBuf {
    explicit
        .or_else(|| app.traces.clone())
        .unwrap_or_else(|| ledger.with_extension("traces"))
}

fn parse_mode(s: &str) -> Result<Mode> {
    let (kind, n) = s.split_once(':').unwrap_or((s, ""));
    match (kind, n) {
        ("exact", "") => Ok(Mode::Enumerate(1_000_000)),
        ("exact", n) => Ok(Mode::Enumerate(n.parse().context("exact:<max>")?)),
        ("sample", n) => Ok(Mode::Sample(n.parse().context("sample:<n>")?)),
        _ => bail!("mode must be `sample:<n>`, `exact` or `exact:<max>`"),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let app = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Certify {
            trace,
            policy,
            memory,
            certifier,
            ledger,
            out,
        } => {
            let trace = load_trace(&trace)?;
            let policy = load_policy(&policy)?;
            let cfg = certifier_config(&app, certifier.as_deref())?;
            let state = match &memory {
                Some(p) if p.exists() => {
                    serde_json::from_slice(&read(p)?).with_context(|| format!("memory {}", p.display()))?
                }
                _ => MemoryState::new(&policy),
            };
            let ledger_path = ledger.or_else(|| app.ledger.clone());
            let mut ledger = ledger_path.as_ref().map(Ledger::open).transpose()?;
            let verdict = certify_with_ledger(&trace, &policy, &state, ledger.as_ref(), &cfg)?;
            print_json(&verdict)?;
            if let (Some(l), Some(path)) = (ledger.as_mut(), &ledger_path) {
                let reasons = verdict.reasons().iter().map(|r| r.to_string()).collect();
                let record = match &verdict {
                    Verdict::Certified { certificate } => LedgerRecord::Certified {
                        certificate: certificate.clone(),
                    },
                    Verdict::Rejected { .. } => LedgerRecord::Rejected { reasons },
                    Verdict::Escalate { required_tier, .. } => LedgerRecord::Escalated {
                        reasons,
                        required_tier: *required_tier,
                    },
                };
                let tick = trace.events.last().map_or(0, |e| e.tick);
                l.append(EntryDraft::new(canonical_hash(&trace), record, &policy, tick))?;
                DirTraceStore::new(traces_dir(&app, None, path)).put(&trace)?;
            }
            if let Some(cert) = verdict.certificate() {
                if let Some(out) = out {
                    fs::write(&out, cert.to_pretty_json()).with_context(|| format!("writing {}", out.display()))?;
                }
                if let Some(p) = &memory {
                    let next = commit_memory(&trace, &policy, &state)?;
                    fs::write(p, next.to_pretty_json()).with_context(|| format!("writing {}", p.display()))?;
                }
            }
            Ok(ExitCode::from(verdict.exit_code() as u8))
        }
        Command::Execute {
            trace,
            cert,
            policy,
            env,
            ledger,
        } => {
            let trace = load_trace(&trace)?;
            let policy = load_policy(&policy)?;
            let key = mac_key(&app)?;
            let cert: Option<Certificate> = cert
                .map(|p| serde_json::from_slice(&read(&p)?).with_context(|| format!("certificate {}", p.display())))
                .transpose()?;
            let mut env: Environment = match env {
                Some(p) => serde_json::from_slice(&read(&p)?).with_context(|| format!("environment {}", p.display()))?,
                None => Environment::default(),
            };
            let mut ledger = match ledger.or_else(|| app.ledger.clone()) {
                Some(p) => Ledger::open(p)?,
                None => Ledger::in_memory(),
            };
            match execute(&trace, cert.as_ref(), &policy, &key, &mut env, &mut ledger) {
                Ok(res) => {
                    print_json(&res)?;
                    Ok(ExitCode::from(res.exit_code() as u8))
                }
                Err(e @ (ExecuteError::NoCertificate { .. } | ExecuteError::StaleCertificate { .. })) => {
                    eprintln!("refused: {e}");
                    Ok(ExitCode::from(e.exit_code() as u8))
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Audit { cert, trace, policy } => {
            let cert: Certificate = serde_json::from_slice(&read(&cert)?).context("certificate")?;
            let trace = load_trace(&trace)?;
            let policy = load_policy(&policy)?;
            let check = inspect_certificate(&cert, &trace, &policy, &mac_key(&app)?);
            print_json(&check)?;
            Ok(if check.ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Recertify {
            ledger,
            policy,
            seq,
            traces,
            tick,
        } => {
            let path = ledger
                .or_else(|| app.ledger.clone())
                .ok_or_else(|| anyhow!("no ledger: pass --ledger or set `ledger` in --config"))?;
            let policy = load_policy(&policy)?;
            let mut ledger = Ledger::open(&path)?;
            let store = DirTraceStore::new(traces_dir(&app, traces, &path));
            let tick = tick.unwrap_or_else(|| ledger.entries().last().map_or(0, |e| e.recorded_tick));
            let targets: Vec<u64> = match seq {
                Some(s) => vec![s],
                None => ledger
                    .entries()
                    .iter()
                    .filter(|e| e.certificate().is_some())
                    .map(|e| e.seq)
                    .collect(),
            };
            let mut results = Vec::new();
            for s in targets {
                results.push(recertify(&mut ledger, s, &policy, &store, tick)?);
            }
            print_json(&results)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            generator,
            certifier,
            policy,
            mode,
            format,
        } => {
            let mut gen: GeneratorSpec = serde_json::from_value(read_structured(&generator)?).context("generator")?;
            if let Some(seed) = cli.seed {
                gen.seed = seed;
            }
            if let Some(m) = mode {
                gen.mode = parse_mode(&m)?;
            }
            let policy = load_policy(&policy)?;
            let cfg = certifier_config(&app, certifier.as_deref())?;
            let report = measures(&gen, &cfg, &policy)?;
            match format {
                Format::Json => emit(&format!("{}\n", report.to_json()))?,
                Format::Table => emit(&report.to_table())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Scenario { action } => match action {
            ScenarioAction::List => {
                emit(&format!("{}\n", certgate_core::scenario::SCENARIOS.join("\n")))?;
                Ok(ExitCode::SUCCESS)
            }
            ScenarioAction::Run { name } => {
                let key = mac_key(&app).unwrap_or_else(|_| MacKey::new(SCENARIO_FALLBACK_KEY.to_vec()));
                let reports = if name == "all" {
                    run_all(&key)?
                } else {
                    vec![run_scenario(&name, &key)?]
                };
                for r in &reports {
                    eprintln!("{} {}", if r.passed { "PASS" } else { "FAIL" }, r.name);
                }
                if reports.len() == 1 {
                    emit(&format!("{}\n", reports[0].to_json()))?;
                } else {
                    print_json(&reports)?;
                }
                let ok = reports.iter().all(|r| r.passed);
                Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
            }
        },
        Command::Policy {
            action: PolicyAction::Lint { file },
        } => {
            let report = lint_policy(&read(&file)?);
            print_json(&report)?;
            Ok(if report.ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Ledger {
            action: LedgerAction::Verify { file },
        } => {
            let report = verify_file(&file).with_context(|| format!("reading {}", file.display()))?;
            print_json(&report)?;
            Ok(if report.intact { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
