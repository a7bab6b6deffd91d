use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value as Json};

use edgrid_core::clock::{Clock, SystemClock};
use edgrid_core::marf::SampleSource;
use edgrid_core::store::{DemandStore, StoreConfig};
use edgrid_core::tiers::{Configuration, EvalStatus, Gmt, TierKind};
use edgrid_core::transport::{ta_serve, TaHandler};
use edgrid_gmt::api::{self, ErrorBody, EvaluationStarted, EvaluationView};
use edgrid_gmt::config::{daemon_settings, load_config};
use edgrid_gmt::demo::run_demo;
use edgrid_gmt::network::{load_network, NetworkDocument};

const USAGE: u8 = 1;
const FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "edgrid", version, about = "Demand-driven evaluation grid manager")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Server {
    /// Base URL of a running daemon.
    #[arg(long, global = true, env = "EDGRID_SERVER", default_value = "http://127.0.0.1:8080")]
    server: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the manager daemon and its HTTP API.
    Serve {
        /// Configuration file; EDGRID_CONFIG takes precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<SocketAddr>,
    },
    Node {
        #[command(subcommand)]
        action: NodeCmd,
        #[command(flatten)]
        server: Server,
    },
    Tier {
        #[command(subcommand)]
        action: TierCmd,
        #[command(flatten)]
        server: Server,
    },
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
        #[command(flatten)]
        server: Server,
    },
    Net {
        #[command(subcommand)]
        action: NetCmd,
        #[command(flatten)]
        server: Server,
    },
    /// Speaker identification on an in-process two-node grid.
    Demo {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// A standalone store tier with a write-ahead log, served over TCP.
    Dst {
        #[arg(long)]
        wal: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: SocketAddr,
        #[arg(long, default_value = "edgrid-instance-secret")]
        secret: String,
        #[arg(long, default_value_t = 30_000)]
        lease_ms: u64,
    },
}

#[derive(Subcommand)]
enum NodeCmd {
    Register {
        #[arg(long)]
        name: String,
        #[arg(long)]
        address: String,
        #[arg(long)]
        color: String,
        #[arg(long, default_value = "instance-1")]
        instance: String,
    },
    Start { id: String },
    Stop { id: String },
}

#[derive(Subcommand)]
enum TierCmd {
    Alloc {
        #[arg(long)]
        node: String,
        #[arg(long)]
        kind: TierKind,
        #[arg(long, default_value_t = 1)]
        count: u32,
        /// Tier setting as key=value; may be repeated.
        #[arg(long = "set", value_parser = key_value)]
        settings: Vec<(String, String)>,
    },
    Dealloc { id: String },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Classify a sample against synthetic training tones.
    Run {
        #[arg(long)]
        dgt: String,
        #[arg(long, conflicts_with = "sine", required_unless_present = "sine")]
        wav: Option<PathBuf>,
        /// Frequency in Hz of a noisy test tone.
        #[arg(long)]
        sine: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 120)]
        timeout_secs: u64,
    },
    Stop { id: String },
}

#[derive(Subcommand)]
enum NetCmd {
    Save { file: PathBuf },
    Load { file: PathBuf },
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("`{s}` is not key=value"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("edgrid: {message}");
            ExitCode::from(FAILURE)
        }
    }
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::Serve { config, bind } => serve(config, bind),
        Command::Node { action, server } => {
            let http = Http::new(server.server)?;
            let reg: Json = match action {
                NodeCmd::Register {
                    name,
                    address,
                    color,
                    instance,
                } => http.send(
                    "POST",
                    "/v1/nodes",
                    Some(json!({"node_name": name, "address": address, "color": color, "instance_id": instance})),
                )?,
                NodeCmd::Start { id } => http.send("POST", &format!("/v1/nodes/{id}/start"), None)?,
                NodeCmd::Stop { id } => http.send("POST", &format!("/v1/nodes/{id}/stop"), None)?,
            };
            println!("{} {}", reg["node_id"].as_str().unwrap_or("?"), reg["status"].as_str().unwrap_or("?"));
            Ok(())
        }
        Command::Tier { action, server } => {
            let http = Http::new(server.server)?;
            match action {
                TierCmd::Alloc {
                    node,
                    kind,
                    count,
                    settings,
                } => {
                    let config = Configuration::from_pairs(settings).map_err(|e| e.to_string())?;
                    let reg: Json = http.send(
                        "POST",
                        "/v1/tiers",
                        Some(json!({"node_id": node, "kind": kind, "instance_count": count, "config": config})),
                    )?;
                    println!("{} {}", reg["tier_id"].as_str().unwrap_or("?"), reg["state"].as_str().unwrap_or("?"));
                }
                TierCmd::Dealloc { id } => {
                    http.send::<Json>("DELETE", &format!("/v1/tiers/{id}"), None)?;
                    println!("{id} deallocated");
                }
            }
            Ok(())
        }
        Command::Eval { action, server } => {
            let http = Http::new(server.server)?;
            match action {
                EvalCmd::Run {
                    dgt,
                    wav,
                    sine,
                    seed,
                    instances,
                    timeout_secs,
                } => eval_run(&http, &dgt, wav, sine, seed, instances, Duration::from_secs(timeout_secs)),
                EvalCmd::Stop { id } => {
                    let reply: Json = http.send("DELETE", &format!("/v1/evaluations/{id}"), None)?;
                    println!("{id} cancelled={}", reply["cancelled"]);
                    Ok(())
                }
            }
        }
        Command::Net { action, server } => {
            let http = Http::new(server.server)?;
            match action {
                NetCmd::Save { file } => {
                    let text = http.text("/v1/network")?;
                    std::fs::write(&file, text).map_err(|e| format!("{}: {e}", file.display()))?;
                    println!("saved {}", file.display());
                }
                NetCmd::Load { file } => {
                    let text = std::fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
                    let doc = NetworkDocument::parse(&text).map_err(|e| e.to_string())?;
                    let body = serde_json::to_value(&doc).map_err(|e| e.to_string())?;
                    http.send::<Json>("PUT", "/v1/network", Some(body))?;
                    println!("loaded {} nodes, {} tiers", doc.nodes.len(), doc.tiers.len());
                }
            }
            Ok(())
        }
        Command::Demo { seed, instances } => {
            let report = run_demo(seed, instances).map_err(|e| e.to_string())?;
            for c in &report.cases {
                let best = c.grid.best().map_or("none".to_string(), |b| b.to_string());
                let mark = if c.correct() { "ok" } else { "WRONG" };
                println!("subject {} ({} Hz) -> {} {}", c.subject, c.freq, best, mark);
            }
            println!("{}/{} correct", report.correct(), report.cases.len());
            if !report.consistent() {
                return Err("grid and in-process rankings differ".into());
            }
            if report.correct() != report.cases.len() {
                return Err("misclassified subjects".into());
            }
            Ok(())
        }
        Command::Dst {
            wal,
            listen,
            secret,
            lease_ms,
        } => dst(wal, listen, secret, lease_ms),
    }
}

fn serve(config: Option<PathBuf>, bind: Option<SocketAddr>) -> Result<(), String> {
    let path = std::env::var_os("EDGRID_CONFIG")
        .map(PathBuf::from)
        .or(config)
        .ok_or("serve needs --config or EDGRID_CONFIG")?;
    let cfg = load_config(&path).map_err(|e| e.to_string())?;
    let settings = daemon_settings(&cfg).map_err(|e| e.to_string())?;
    let bind = bind.or(settings.bind).unwrap_or_else(|| "127.0.0.1:8080".parse().expect("literal"));
    let period = Duration::from_millis(settings.options.heartbeat.interval_ms);
    let gmt = Gmt::new(settings.options);
    if let Some(net) = settings.network {
        let text = std::fs::read_to_string(&net).map_err(|e| format!("{}: {e}", net.display()))?;
        let doc = NetworkDocument::parse(&text).map_err(|e| e.to_string())?;
        load_network(&gmt, &doc).map_err(|e| e.to_string())?;
    }
    let _autonomic = gmt.spawn_autonomic(period);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let result = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| format!("bind {bind}: {e}"))?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        println!("listening {addr}");
        let _ = std::io::stdout().flush();
        api::serve(gmt.clone(), listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
    });
    gmt.shutdown();
    result
}

fn dst(wal: PathBuf, listen: SocketAddr, secret: String, lease_ms: u64) -> Result<(), String> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let cfg = StoreConfig {
        wal_path: Some(wal),
        default_lease_ms: lease_ms,
        ..StoreConfig::default()
    };
    let store = Arc::new(DemandStore::open(&cfg, clock.clone()).map_err(|e| e.to_string())?);
    let listener = std::net::TcpListener::bind(listen).map_err(|e| format!("bind {listen}: {e}"))?;
    let handler = TaHandler::new(store.clone(), secret.into_bytes());
    let server = ta_serve(listener, Arc::new(handler)).map_err(|e| e.to_string())?;
    println!("listening {}", server.addr());
    let _ = std::io::stdout().flush();
    let tick = Duration::from_millis((lease_ms / 4).clamp(5, 1000));
    loop {
        std::thread::sleep(tick);
        if let Err(e) = store.expire_leases(clock.now_millis()) {
            return Err(e.to_string());
        }
    }
}

fn eval_run(
    http: &Http,
    dgt: &str,
    wav: Option<PathBuf>,
    sine: Option<f64>,
    seed: u64,
    instances: usize,
    timeout: Duration,
) -> Result<(), String> {
    let mut marf = json!({"seed": seed, "instances": instances});
    match (wav, sine) {
        (Some(path), _) => {
            let sample = SampleSource::WavFile(path).to_value().map_err(|e| e.to_string())?;
            marf["sample"] = serde_json::to_value(sample).map_err(|e| e.to_string())?;
        }
        (None, Some(hz)) => marf["sine_hz"] = json!(hz),
        (None, None) => return Err("give --wav or --sine".into()),
    }
    let started: EvaluationStarted = http.send("POST", "/v1/evaluations", Some(json!({"dgt_id": dgt, "marf": marf})))?;
    let deadline = Instant::now() + timeout;
    let view = loop {
        let view: EvaluationView = http.send("GET", &format!("/v1/evaluations/{}", started.eval_id), None)?;
        if view.record.status != EvalStatus::Running {
            break view;
        }
        if Instant::now() > deadline {
            return Err(format!("{} still running after {timeout:?}", started.eval_id));
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    match view.record.status {
        EvalStatus::Completed => {
            println!("{} completed", started.eval_id);
            for r in view.ranking.unwrap_or_default() {
                println!("{},{}", r.subject, r.distance);
            }
            Ok(())
        }
        status => Err(format!(
            "{} {status:?}: {}",
            started.eval_id,
            view.record.error.unwrap_or_default()
        )),
    }
}

struct Http {
    base: String,
    client: reqwest::blocking::Client,
}

impl Http {
    fn new(base: String) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            client,
        })
    }

    fn send<T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<Json>) -> Result<T, String> {
        let url = format!("{}{path}", self.base);
        let method = reqwest::Method::from_bytes(method.as_bytes()).map_err(|e| e.to_string())?;
        let mut req = self.client.request(method, &url);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().map_err(|e| format!("{url}: {e}"))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(match serde_json::from_str::<ErrorBody>(&text) {
                Ok(e) => format!("{} {}: {}", status.as_u16(), e.code, e.message),
                Err(_) => format!("{} {text}", status.as_u16()),
            });
        }
        let text = if text.is_empty() { "null" } else { &text };
        serde_json::from_str(text).map_err(|e| format!("bad reply from {url}: {e}"))
    }

    fn text(&self, path: &str) -> Result<String, String> {
        let url = format!("{}{path}", self.base);
        let resp = self.client.get(&url).send().map_err(|e| format!("{url}: {e}"))?;
        if !resp.status().is_success() {
            return Err(format!("{url}: {}", resp.status()));
        }
        resp.text().map_err(|e| e.to_string())
    }
}
