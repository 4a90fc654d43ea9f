use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use groupchat_core::backend::{ReplayBackend, ReplayMode, ReplayStats};
use groupchat_core::engine::Component;
use groupchat_core::eval::ablation::{render_table, run_ablation_grid, AblationGrid};
use groupchat_core::eval::alignment::{run_alignment_benchmark, DEFAULT_REPETITIONS};
use groupchat_core::eval::entropy::{run_entropy, tokenizer_by_id, Tokenizer};
use groupchat_core::eval::probes::run_probes;
use groupchat_core::stories::{load_preset, load_story, PRESETS};
use groupchat_core::{BackendDescriptor, ChatBackend, RunLog, RunOptions, Simulation, StoryConfig};
use groupchat_service::table::{render, row};
use groupchat_service::{api, RunManager};

type CliResult = Result<ExitCode, String>;

#[derive(Parser)]
#[command(name = "groupchat", version, about = "Staged multi-agent group-chat simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation to settlement and write its log.
    Run(RunArgs),
    /// Re-execute a logged run from its response cache and compare.
    Replay(ReplayArgs),
    /// Measurement suite.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Inspect runs persisted by the service.
    #[command(subcommand)]
    Runs(RunsCommand),
    /// List the bundled story presets, print one, or check a story file.
    Stories {
        /// Print this preset as JSON.
        #[arg(long)]
        show: Option<String>,
        /// Validate a story file and list every violation.
        #[arg(long, conflicts_with = "show")]
        check: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or StoryConfig file.
    #[arg(long)]
    story: String,
    /// Backend descriptor, e.g. scripted:demo or remote:URL,MODEL[,KEY_ENV].
    #[arg(long)]
    backend: BackendDescriptor,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    rounds: u32,
    /// Components to switch off, comma separated.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Component>,
    /// Group-chat sub-rounds per round.
    #[arg(long)]
    sub_rounds: Option<u32>,
    /// Abort on format exhaustion instead of skipping the turn.
    #[arg(long)]
    strict: bool,
    /// Full RunOptions as JSON; the flags above override it.
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Response cache directory. Defaults to the log path with `.cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Do not record responses.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    runlog: PathBuf,
    /// Response cache directory. Defaults to the log path with `.cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Replay against this backend instead of the cache.
    #[arg(long)]
    backend: Option<BackendDescriptor>,
    /// Write the re-executed log here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// 2-gram entropy of a run's dialogue.
    Entropy {
        #[arg(long)]
        runlog: PathBuf,
        #[arg(long, default_value = "ws")]
        tokenizer: String,
    },
    /// Alignment benchmark under an adversarial overlay.
    Align {
        #[arg(long)]
        story: String,
        #[arg(long)]
        backend: BackendDescriptor,
        #[arg(long)]
        observed: String,
        #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
        reps: u32,
        #[arg(long, default_value_t = 3)]
        rounds: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Format-compliance and echo probes.
    Probe {
        #[arg(long)]
        backend: BackendDescriptor,
        #[arg(long, default_value_t = 20)]
        trials: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Entropy under each ablation, per backend.
    Ablate {
        #[arg(long)]
        story: String,
        /// AblationGrid JSON. Backends may be shorthand strings.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "ws")]
        tokenizer: String,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, default_value = "runs")]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum RunsCommand {
    /// Runs found in a data directory.
    List {
        #[arg(long, default_value = "runs")]
        data_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,groupchat_service=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Replay(a) => replay(a),
        Command::Eval(e) => eval(e),
        Command::Serve(a) => serve(a),
        Command::Runs(RunsCommand::List { data_dir }) => runs_list(&data_dir),
        Command::Stories { show, check } => stories(show, check),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn story(name: &str) -> Result<StoryConfig, String> {
    load_story(name).map_err(|e| e.to_string())
}

fn build(d: &BackendDescriptor) -> Result<Arc<dyn ChatBackend>, String> {
    d.build().map_err(|e| format!("backend {d}: {e}"))
}

fn cache_for(log: &Path) -> PathBuf {
    let mut name = log.as_os_str().to_owned();
    name.push(".cache");
    PathBuf::from(name)
}

fn write_log(path: &Path, log: &RunLog) -> Result<(), String> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    std::fs::write(path, log.to_jsonl()).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(a: RunArgs) -> CliResult {
    let story = story(&a.story)?;
    let mut opts = match &a.options {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => RunOptions::default(),
    };
    opts.rounds = a.rounds;
    opts.ablate.extend(a.ablate);
    opts.strict |= a.strict;
    if let Some(r) = a.sub_rounds {
        opts.group_sub_rounds = r;
    }
    let descriptor = if a.no_cache {
        a.backend
    } else {
        a.backend.recording_into(a.cache.clone().unwrap_or_else(|| cache_for(&a.out)))
    };
    let backend = build(&descriptor)?;
    let sim = Simulation::new(story, backend, opts, a.seed).map_err(|e| e.to_string())?;
    let outcome = sim.run().map_err(|e| e.to_string())?;
    write_log(&a.out, &outcome.log)?;

    let mut rows = vec![
        row(["story", outcome.log.story_id()]),
        row(["seed".to_string(), a.seed.to_string()]),
        row(["records".to_string(), outcome.log.len().to_string()]),
        row(["utterances".to_string(), outcome.log.utterances().len().to_string()]),
        row(["audit violations".to_string(), outcome.audit.violations.len().to_string()]),
    ];
    if let Some(s) = &outcome.settlement {
        let winner = s.vote_winner.as_ref().map_or("none".to_string(), |w| w.to_string());
        rows.push(row(["vote winner".to_string(), winner]));
        if let Some(p) = &s.predicate {
            rows.push(row([format!("{:?} predicate", p.kind).to_lowercase(), p.label.clone()]));
        }
        if let Some(f) = &s.fallback_winner {
            rows.push(row(["fallback winner".to_string(), f.to_string()]));
        }
    }
    rows.push(row(["log".to_string(), a.out.display().to_string()]));
    out(&render(&rows));
    Ok(if outcome.settlement.is_some() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn replay(a: ReplayArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.runlog).map_err(|e| format!("{}: {e}", a.runlog.display()))?;
    let original = RunLog::from_jsonl(&text).map_err(|e| e.to_string())?;
    let header = original.header.clone();
    let (backend, replay): (Arc<dyn ChatBackend>, Option<Arc<ReplayBackend>>) = match &a.backend {
        Some(d) => (build(d)?, None),
        None => {
            let dir = a.cache.clone().unwrap_or_else(|| cache_for(&a.runlog));
            let r = Arc::new(ReplayBackend::open(&dir, ReplayMode::Strict).map_err(|e| format!("{}: {e}", dir.display()))?);
            (r.clone(), Some(r))
        }
    };
    let sim = Simulation::new(header.story, backend, header.options, header.seed).map_err(|e| e.to_string())?;
    let outcome = sim.run().map_err(|e| e.to_string())?;
    if let Some(out) = &a.out {
        write_log(out, &outcome.log)?;
    }
    let stats = replay.map(|r| r.stats()).unwrap_or(ReplayStats::default());
    let fresh = outcome.log.to_jsonl();
    let canonical = original.to_jsonl();
    if fresh == canonical {
        out(&format!(
            "identical: {} records, {} cache hits, {} backend calls\n",
            outcome.log.len(),
            stats.hits,
            stats.inner_calls
        ));
        return Ok(if outcome.settlement.is_some() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    let (n, (want, got)) = canonical
        .lines()
        .zip(fresh.lines())
        .enumerate()
        .find(|(_, (a, b))| a != b)
        .map(|(i, p)| (i + 1, p))
        .unwrap_or((canonical.lines().count().min(fresh.lines().count()) + 1, ("<end>", "<end>")));
    out(&format!("differs at line {n}\n  logged:   {want}\n  replayed: {got}\n"));
    Ok(ExitCode::FAILURE)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn out(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush());
}

/// JSON on stdout for machines, the table on stderr for people.
fn emit<T: serde::Serialize>(value: &T, table: String) -> CliResult {
    eprint!("{table}");
    out(&format!("{}\n", serde_json::to_string_pretty(value).map_err(|e| e.to_string())?));
    Ok(ExitCode::SUCCESS)
}

fn tokenizer(id: &str) -> Result<Box<dyn Tokenizer>, String> {
    tokenizer_by_id(id).ok_or_else(|| format!("unknown tokenizer `{id}` (use ws or char)"))
}

fn eval(cmd: EvalCommand) -> CliResult {
    match cmd {
        EvalCommand::Entropy { runlog, tokenizer: tok } => {
            let text = std::fs::read_to_string(&runlog).map_err(|e| format!("{}: {e}", runlog.display()))?;
            let log = RunLog::from_jsonl(&text).map_err(|e| e.to_string())?;
            let r = run_entropy(&log, tokenizer(&tok)?.as_ref());
            let table = render(&[
                row(["run", "tokenizer", "utterances", "tokens", "bigrams", "distinct", "entropy (bits)"]),
                row([
                    format!("{}-{}", log.story_id(), log.seed()),
                    r.tokenizer.clone(),
                    r.utterance_count.to_string(),
                    r.token_count.to_string(),
                    r.bigram_count.to_string(),
                    r.distinct_bigram_count.to_string(),
                    format!("{:.3}", r.entropy_bits),
                ]),
            ]);
            emit(&r, table)
        }
        EvalCommand::Align { story: s, backend, observed, reps, rounds, seed } => {
            let story = story(&s)?;
            let opts = RunOptions { rounds, ..RunOptions::default() };
            let r = run_alignment_benchmark(&story, build(&backend)?, &observed.as_str().into(), reps, &opts, seed)
                .map_err(|e| e.to_string())?;
            let mut rows = vec![row(["metric", "value"])];
            for (i, pass) in r.t1_pass_per_round.iter().enumerate() {
                rows.push(row([format!("T1 round {}", i + 2), if *pass { "pass" } else { "fail" }.to_string()]));
            }
            rows.push(row(["T1 rate".to_string(), format!("{:.0}%", r.t1_rate * 100.0)]));
            rows.push(row(["T2".to_string(), format!("{:.2} ({}/{})", r.t2_negative_fraction, r.t2_negative, r.samples)]));
            emit(&r, render(&rows))
        }
        EvalCommand::Probe { backend, trials, seed } => {
            let r = run_probes(build(&backend)?.as_ref(), trials, seed);
            let mut rows = vec![row(["probe", "task", "passed", "total", "rate"])];
            for (kind, tasks) in [("compliance", &r.compliance), ("echo", &r.echo)] {
                for (task, t) in tasks {
                    rows.push(row([kind.to_string(), task.clone(), t.passed.to_string(), t.total.to_string(), format!("{:.2}", t.rate)]));
                }
            }
            rows.push(row(["network errors".to_string(), String::new(), String::new(), r.network_errors.to_string(), String::new()]));
            emit(&r, render(&rows))
        }
        EvalCommand::Ablate { story: s, grid, tokenizer: tok } => {
            let story = story(&s)?;
            let text = std::fs::read_to_string(&grid).map_err(|e| format!("{}: {e}", grid.display()))?;
            let grid = parse_grid(&text).map_err(|e| format!("{}: {e}", grid.display()))?;
            let cells = run_ablation_grid(&story, &grid, tokenizer(&tok)?.as_ref());
            let table = render_table(&cells);
            emit(&cells, table)
        }
    }
}

/// Accepts backends as shorthand strings as well as descriptor objects.
fn parse_grid(text: &str) -> Result<AblationGrid, String> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if let Some(backends) = value.get_mut("backends").and_then(|b| b.as_array_mut()) {
        for b in backends.iter_mut() {
            if let Some(s) = b.as_str() {
                let d: BackendDescriptor = s.parse()?;
                *b = serde_json::to_value(d).map_err(|e| e.to_string())?;
            }
        }
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn serve(a: ServeArgs) -> CliResult {
    let manager = Arc::new(RunManager::open(&a.data_dir).map_err(|e| e.to_string())?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.bind, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| format!("{addr}: {e}"))?;
        tracing::info!(%addr, data_dir = %a.data_dir.display(), "serving");
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        let app = api::router(manager.clone());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())?;
        manager.shutdown();
        Ok(ExitCode::SUCCESS)
    })
}

fn runs_list(data_dir: &Path) -> CliResult {
    let runs = RunManager::scan(data_dir).map_err(|e| e.to_string())?;
    let mut rows = vec![row(["id", "story", "seed", "status", "steps", "backend"])];
    for m in runs {
        rows.push(row([
            m.id,
            m.story_id,
            m.seed.to_string(),
            m.status.as_str().to_string(),
            format!("{}/{}", m.steps_done, m.options.rounds + 1),
            m.backend.to_string(),
        ]));
    }
    out(&render(&rows));
    Ok(ExitCode::SUCCESS)
}

fn stories(show: Option<String>, check: Option<PathBuf>) -> CliResult {
    if let Some(path) = check {
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(match groupchat_core::stories::parse_story(&text) {
            Ok(s) => {
                out(&format!("ok: {} ({} characters, {} camps)\n", s.id, s.characters.len(), s.camps.len()));
                ExitCode::SUCCESS
            }
            Err(groupchat_core::stories::StoryError::Invalid(violations)) => {
                for v in violations {
                    out(&format!("{v}\n"));
                }
                ExitCode::FAILURE
            }
            Err(e) => {
                out(&format!("{e}\n"));
                ExitCode::FAILURE
            }
        });
    }
    if let Some(name) = show {
        let s = load_preset(&name).map_err(|e| e.to_string())?;
        out(&format!("{}\n", serde_json::to_string_pretty(&s).map_err(|e| e.to_string())?));
        return Ok(ExitCode::SUCCESS);
    }
    let mut rows = vec![row(["preset", "title", "characters", "victory"])];
    for name in PRESETS {
        let s = load_preset(name).map_err(|e| e.to_string())?;
        rows.push(row([
            name.to_string(),
            s.title.clone(),
            s.characters.len().to_string(),
            format!("{:?}", s.victory.kind).to_lowercase(),
        ]));
    }
    out(&render(&rows));
    Ok(ExitCode::SUCCESS)
}
