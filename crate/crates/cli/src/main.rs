use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use coml_agent::api::ApiServer;
use coml_agent::{Agent, AgentConfig, AgentError, Connection};
use coml_cli::import::import_dir;
use coml_cli::script::{run_script, RunOptions, SessionScript};
use coml_cli::{agent_exit_code, exit, fixtures, run_exit_code};
use coml_core::domain::{IdGen, ImageBlob, ProjectId, Split};
use coml_core::telemetry::{
    retrain_stats, timeline_export, timeline_svg, to_ndjson, ActivityEvent, ActivityLog, Window,
};
use coml_core::training::Hyper;
use coml_sync::{Server, ServerConfig, SyncClient, Token, DEFAULT_MAX_BLOB_BYTES};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "coml", version, about = "Collaborative image-classifier building: server, agents and reports")]
struct Cli {
    /// Sync server address.
    #[arg(long, global = true, env = "COML_SERVER")]
    server: Option<String>,
    /// Project token from `new-project`.
    #[arg(long, global = true, env = "COML_TOKEN")]
    token: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Directory holding one device's agent state.
    #[arg(long, global = true, env = "COML_STATE_DIR")]
    state_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Training,
    Testing,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Training => Split::Training,
            SplitArg::Testing => Split::Testing,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the sync server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long, env = "COML_DATA_DIR", default_value = "coml-data")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_BLOB_BYTES)]
        max_blob_bytes: usize,
    },
    /// Create a project and print its id and token.
    NewProject { name: String },
    /// Join a project as a new device, or reconnect an existing state dir.
    Join {
        #[arg(long)]
        project: Option<ProjectId>,
        /// Serve the local API here until interrupted.
        #[arg(long)]
        api_listen: Option<String>,
    },
    /// Add every .ppm file in a directory under one label.
    Import {
        dir: PathBuf,
        #[arg(long)]
        label: String,
        #[arg(long, value_enum, default_value = "training")]
        split: SplitArg,
        /// Skip unreadable files instead of stopping.
        #[arg(long)]
        continue_on_error: bool,
    },
    /// Retrain this device's model.
    Train,
    /// Re-evaluate the current model on the test images.
    Eval {
        /// Dashboard page to list (25 per page).
        #[arg(long, default_value_t = 1)]
        page: usize,
    },
    /// Play a game headlessly.
    Game {
        /// Frames for each round, in filename order; defaults to a
        /// training image of each target.
        #[arg(long)]
        feed: Option<PathBuf>,
    },
    /// Project and device statistics, or retrain stats over activity logs.
    Stats {
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
    },
    /// Write this device's activity log as NDJSON.
    ExportLog {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render activity logs as a per-device timeline.
    TimelineSvg {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        start_ms: Option<u64>,
        #[arg(long)]
        end_ms: Option<u64>,
        /// Also write the timeline data as JSON.
        #[arg(long)]
        export_json: Option<PathBuf>,
    },
    /// Run a session script, or a bundled one with --fixture.
    Script {
        file: Option<PathBuf>,
        #[arg(long, conflicts_with = "file")]
        fixture: Option<String>,
        /// Where to write summary.json and telemetry.ndjson.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

struct Fail(i32, String);

impl From<AgentError> for Fail {
    fn from(e: AgentError) -> Self {
        Fail(agent_exit_code(&e), e.to_string())
    }
}

impl From<io::Error> for Fail {
    fn from(e: io::Error) -> Self {
        Fail(exit::DATA, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail(exit::SCRIPT, msg.into())
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
    } else {
        println!("{}", text());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(Fail(code, msg)) => {
            eprintln!("coml: {msg}");
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Fail> {
    match &cli.cmd {
        Cmd::Serve {
            listen,
            data_dir,
            max_blob_bytes,
        } => serve(listen, data_dir, *max_blob_bytes),
        Cmd::NewProject { name } => new_project(cli, name),
        Cmd::Join { project, api_listen } => join(cli, *project, api_listen.as_deref()),
        Cmd::Import {
            dir,
            label,
            split,
            continue_on_error,
        } => {
            let mut agent = open_agent(cli)?;
            let id = agent.ensure_label(label)?;
            let report = import_dir(&mut agent, dir, id, (*split).into(), *continue_on_error)
                .map_err(|e| {
                    let code = if e.is_connectivity() {
                        exit::CONNECTIVITY
                    } else {
                        exit::DATA
                    };
                    Fail(code, e.to_string())
                })?;
            close_agent(&mut agent)?;
            emit(cli.json, &report, || {
                let mut s = format!("imported {} image(s) as {label}", report.imported);
                for (p, why) in &report.failed {
                    s.push_str(&format!("\nskipped {}: {why}", p.display()));
                }
                s
            });
            Ok(())
        }
        Cmd::Train => {
            let mut agent = open_agent(cli)?;
            let out = agent.retrain(cli.seed.unwrap_or(0))?;
            close_agent(&mut agent)?;
            emit(cli.json, &out, || {
                let acc = out
                    .weighted_accuracy
                    .map(|a| format!("{a:.2}"))
                    .unwrap_or_else(|| "n/a".into());
                format!(
                    "model v{}: {} labels, {} training images, {}/{} test images correct, weighted accuracy {acc}",
                    out.model_version,
                    out.labels.len(),
                    out.train_samples,
                    out.correct,
                    out.test_samples
                )
            });
            Ok(())
        }
        Cmd::Eval { page } => {
            let mut agent = open_agent(cli)?;
            agent.evaluate()?;
            let dash = agent.dashboard(Split::Testing, *page);
            close_agent(&mut agent)?;
            emit(cli.json, &dash, || {
                let mut s = format!("testing page {}/{} ({} images)", dash.page, dash.pages, dash.total);
                for item in &dash.items {
                    let verdict = match &item.record {
                        Some(r) if r.correct => "ok ".to_string(),
                        Some(r) => format!("BAD (as {})", agent.label_name(r.predicted)),
                        None => "-- ".to_string(),
                    };
                    s.push_str(&format!("\n{} {:<16} {verdict}", item.sample_id.short(), item.label_name));
                }
                s
            });
            Ok(())
        }
        Cmd::Game { feed } => game(cli, feed.as_deref()),
        Cmd::Stats { logs } => stats(cli, logs),
        Cmd::ExportLog { out } => {
            let agent = open_agent_offline(cli)?;
            let text = agent.activity().to_ndjson();
            match out {
                Some(p) => fs::write(p, text)?,
                None => io::stdout().write_all(text.as_bytes())?,
            }
            Ok(())
        }
        Cmd::TimelineSvg {
            logs,
            out,
            start_ms,
            end_ms,
            export_json,
        } => {
            let events = read_logs(logs)?;
            let cover = Window::covering(&events).ok_or_else(|| Fail(exit::DATA, "no events".into()))?;
            let window = Window {
                start_ms: start_ms.unwrap_or(cover.start_ms),
                end_ms: end_ms.unwrap_or(cover.end_ms),
            };
            let timeline = timeline_export(&events, window).map_err(|e| Fail(exit::DATA, e.to_string()))?;
            if let Some(p) = export_json {
                fs::write(p, serde_json::to_vec_pretty(&timeline).expect("serializable"))?;
            }
            let svg = timeline_svg(&timeline);
            match out {
                Some(p) => fs::write(p, svg)?,
                None => io::stdout().write_all(svg.as_bytes())?,
            }
            Ok(())
        }
        Cmd::Script {
            file,
            fixture,
            out_dir,
        } => script(cli, file.as_deref(), fixture.as_deref(), out_dir.as_deref()),
    }
}

fn serve(listen: &str, data_dir: &Path, max_blob_bytes: usize) -> Result<(), Fail> {
    fs::create_dir_all(data_dir)?;
    let config = ServerConfig {
        max_blob_bytes,
        ..ServerConfig::new(listen, data_dir)
    };
    let server = Server::open(config).map_err(|e| Fail(exit::DATA, e.to_string()))?;
    let handle = server
        .spawn()
        .map_err(|e| Fail(exit::CONNECTIVITY, format!("cannot listen on {listen}: {e}")))?;
    // Scripts and tests read the bound address from this line.
    println!("listening on {}", handle.addr());
    io::stdout().flush()?;
    loop {
        std::thread::park();
    }
}

fn server_addr(cli: &Cli) -> Result<&str, Fail> {
    cli.server
        .as_deref()
        .ok_or_else(|| usage("--server (or COML_SERVER) is required"))
}

fn new_project(cli: &Cli, name: &str) -> Result<(), Fail> {
    let addr = server_addr(cli)?;
    let (project_id, token) = SyncClient::connect(addr)
        .and_then(|mut c| c.create_project(name))
        .map_err(|e| AgentError::from(e))?;
    #[derive(Serialize)]
    struct Created {
        project_id: ProjectId,
        token: Token,
    }
    let created = Created { project_id, token };
    emit(cli.json, &created, || {
        format!("project {}\ntoken {}", created.project_id, created.token)
    });
    Ok(())
}

fn state_dir(cli: &Cli) -> Result<&Path, Fail> {
    cli.state_dir
        .as_deref()
        .ok_or_else(|| usage("--state-dir (or COML_STATE_DIR) is required"))
}

fn token(cli: &Cli) -> Result<Token, Fail> {
    cli.token
        .as_deref()
        .ok_or_else(|| usage("--token (or COML_TOKEN) is required"))?
        .parse()
        .map_err(|e| usage(format!("bad token: {e}")))
}

fn join(cli: &Cli, project: Option<ProjectId>, api_listen: Option<&str>) -> Result<(), Fail> {
    let dir = state_dir(cli)?;
    let mut agent = if dir.join("agent.json").is_file() {
        let mut agent = Agent::open(dir, cli.seed, Hyper::default())?;
        match (&cli.server, &cli.token) {
            (Some(addr), Some(_)) => agent.connect(addr, token(cli)?)?,
            _ => agent.reconnect()?,
        }
        agent
    } else {
        let project = project.ok_or_else(|| usage("--project is required for a new device"))?;
        let device = match cli.seed {
            Some(s) => IdGen::seeded(s).device(),
            None => IdGen::from_entropy().device(),
        };
        let config = AgentConfig {
            seed: cli.seed,
            state_dir: Some(dir.to_path_buf()),
            ..AgentConfig::new(device)
        };
        let mut agent = Agent::new(project, config)?;
        agent.connect(server_addr(cli)?, token(cli)?)?;
        agent
    };
    agent.settle(Duration::from_secs(30))?;
    agent.save()?;
    let stats = agent.stats();
    match api_listen {
        None => {
            emit(cli.json, &stats, || {
                format!(
                    "device {} joined project {} at seq {}",
                    stats.device, stats.project, stats.applied_seq
                )
            });
            Ok(())
        }
        Some(listen) => {
            let api = ApiServer::spawn(Arc::new(Mutex::new(agent)), listen)
                .map_err(|e| Fail(exit::CONNECTIVITY, format!("cannot listen on {listen}: {e}")))?;
            println!("device {} serving local API on {}", stats.device, api.addr());
            io::stdout().flush()?;
            loop {
                std::thread::park();
            }
        }
    }
}

fn open_agent_offline(cli: &Cli) -> Result<Agent, Fail> {
    Ok(Agent::open(state_dir(cli)?, cli.seed, Hyper::default())?)
}

/// Opens the device state and catches up with the server when one is
/// known. Works offline if the server is unreachable.
fn open_agent(cli: &Cli) -> Result<Agent, Fail> {
    let mut agent = open_agent_offline(cli)?;
    if agent.remote().is_some() {
        match agent.reconnect().and_then(|_| agent.settle(Duration::from_secs(30))) {
            Ok(()) => {}
            Err(e) if e.is_connectivity() => log::warn!("working offline: {e}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(agent)
}

fn close_agent(agent: &mut Agent) -> Result<(), Fail> {
    if agent.connection() == Connection::Live {
        if let Err(e) = agent.settle(Duration::from_secs(30)) {
            log::warn!("could not confirm every op: {e}");
        }
    }
    agent.save()?;
    Ok(())
}

fn game(cli: &Cli, feed: Option<&Path>) -> Result<(), Fail> {
    let mut agent = open_agent(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let frames: Vec<ImageBlob> = match feed {
        Some(dir) => coml_cli::import::ppm_files(dir)?
            .iter()
            .map(|p| -> Result<ImageBlob, Fail> {
                let bytes = fs::read(p)?;
                ImageBlob::from_ppm(&bytes).map_err(|e| Fail(exit::DATA, format!("{}: {e}", p.display())))
            })
            .collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    let export = if feed.is_some() {
        agent.play_game(seed, frames)?
    } else {
        // Show a training image of each target.
        let mut target = Some(agent.game_start(seed)?);
        let mut n = 0usize;
        while let Some(t) = target {
            let pool: Vec<_> = agent
                .state()
                .live_samples()
                .filter(|s| s.label == t && s.split == Split::Training)
                .map(|s| s.blob)
                .collect();
            let frame = pool
                .get(n % pool.len().max(1))
                .and_then(|d| agent.image(d))
                .unwrap_or_else(|| ImageBlob::solid(8, 8, [0, 0, 0]).expect("8x8"));
            target = agent.game_round(&frame)?.next_target;
            n += 1;
        }
        agent.game_end()?.export()
    };
    close_agent(&mut agent)?;
    emit(cli.json, &export, || {
        let mut s = String::new();
        for (i, r) in export.rounds.iter().enumerate() {
            s.push_str(&format!(
                "round {:>2}: {:<16} {:>5.1}\n",
                i + 1,
                agent.label_name(r.target),
                r.score
            ));
        }
        s.push_str(&format!("total {:.1}  high score {:.1}", export.total_score, export.high_score));
        s
    });
    Ok(())
}

fn read_logs(paths: &[PathBuf]) -> Result<Vec<ActivityEvent>, Fail> {
    let mut events = Vec::new();
    for p in paths {
        let file = fs::File::open(p).map_err(|e| Fail(exit::DATA, format!("{}: {e}", p.display())))?;
        let log = ActivityLog::read_ndjson(io::BufReader::new(file))
            .map_err(|e| Fail(exit::DATA, format!("{}: {e}", p.display())))?;
        events.extend(log.events().iter().cloned());
    }
    events.sort_by_key(|e| (e.ts, e.device));
    Ok(events)
}

fn stats(cli: &Cli, logs: &[PathBuf]) -> Result<(), Fail> {
    if !logs.is_empty() {
        let events = read_logs(logs)?;
        let stats = retrain_stats(&events);
        emit(cli.json, &stats, || {
            let mut s = format!(
                "retrains per team: mean {:.1} (SD {:.1}), min {}, max {}; per device mean {:.1}",
                stats.mean, stats.sd, stats.min, stats.max, stats.device_mean
            );
            for (d, n) in &stats.per_device_totals {
                s.push_str(&format!("\n{} {n}", d.short()));
            }
            s
        });
        return Ok(());
    }
    let mut agent = open_agent(cli)?;
    close_agent(&mut agent)?;
    let stats = agent.stats();
    emit(cli.json, &stats, || {
        let mut s = format!(
            "project {} device {} ({:?}, seq {}, {} pending)\n",
            stats.project, stats.device, stats.connection, stats.applied_seq, stats.pending
        );
        for l in &stats.labels {
            s.push_str(&format!(
                "{:<20} train {:>4} ({:>5.1}%)  test {:>4} ({:>5.1}%)\n",
                l.name, l.train, l.train_pct, l.test, l.test_pct
            ));
        }
        let acc = stats
            .weighted_accuracy
            .map(|a| format!("{a:.2}"))
            .unwrap_or_else(|| "n/a".into());
        s.push_str(&format!(
            "model {}  weighted accuracy {acc}  high score {:.1}\ndigest {}",
            stats
                .model_version
                .map(|v| format!("v{v}"))
                .unwrap_or_else(|| "none".into()),
            stats.high_score,
            stats.digest
        ));
        s
    });
    Ok(())
}

fn script(cli: &Cli, file: Option<&Path>, fixture: Option<&str>, out_dir: Option<&Path>) -> Result<(), Fail> {
    let script = match (file, fixture) {
        (Some(path), _) => SessionScript::load(path).map_err(|e| Fail(exit::SCRIPT, e.to_string()))?,
        (None, Some(name)) => {
            let text = fixtures::by_name(name).ok_or_else(|| {
                usage(format!("unknown fixture {name:?}; bundled: {}", fixtures::NAMES.join(", ")))
            })?;
            SessionScript::parse(text, ".").map_err(|e| Fail(exit::SCRIPT, e.to_string()))?
        }
        (None, None) => return Err(usage("give a script file or --fixture")),
    };
    let opts = RunOptions {
        seed: cli.seed.unwrap_or(0),
        server: cli.server.clone(),
        hyper: Hyper::default(),
    };
    let out = run_script(&script, &opts).map_err(|e| Fail(run_exit_code(&e), e.to_string()))?;
    let summary = serde_json::to_string_pretty(&out.summary).expect("serializable");
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), &summary)?;
        fs::write(dir.join("telemetry.ndjson"), to_ndjson(&out.telemetry))?;
    }
    if cli.json {
        println!("{summary}");
    } else {
        let s = &out.summary;
        let acc = s
            .row
            .weighted_accuracy
            .map(|a| format!("{a:.2}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{} labels, {} training, {} testing, weighted accuracy {acc}",
            s.row.labels, s.row.training_images, s.row.testing_images
        );
        for (name, d) in &s.devices {
            println!(
                "{name:<8} retrains {:>3}  seq {:>5}  digest {}",
                d.retrains,
                d.applied_seq,
                &d.digest[..16]
            );
        }
        println!("converged: {}", s.converged);
    }
    Ok(())
}

