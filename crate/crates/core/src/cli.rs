//! `mukctl`: a thin client over the admin API.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::bench::{self, BenchConfig};

pub const ADMIN_ENV: &str = "MUK_ADMIN";
pub const TESTMOD_ENV: &str = "MUK_TESTMOD";

pub const EXIT_OK: i32 = 0;
pub const EXIT_API: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug, Clone, PartialEq)]
#[command(name = "mukctl", about = "Operate a running muk kernel")]
pub struct Cli {
    /// Admin address, host:port.
    #[arg(long, env = ADMIN_ENV, default_value = "127.0.0.1:8081")]
    pub admin: String,
    /// Print only JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Register a module from a descriptor file, or deploy a new version of
    /// an existing one.
    Deploy {
        module_id: Option<String>,
        version: Option<String>,
        artifact_ref: Option<String>,
        #[arg(long, short = 'f', conflicts_with_all = ["module_id", "version", "artifact_ref"])]
        descriptor: Option<PathBuf>,
    },
    /// Modules and instances.
    Status { module_id: Option<String> },
    Scale { module_id: String, replicas: u32 },
    Rollback { module_id: String },
    Trace { request_id: String },
    /// mapek, baseline or off; prints the current mode when omitted.
    MapekMode { mode: Option<String> },
    /// crash-loop, leak:<bytes>, slow:<factor>, error-rate:<p> or clear.
    InjectFault {
        module_id: String,
        fault: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Bench {
        /// Boot a private kernel instead of using the one at --admin.
        #[arg(long)]
        standalone: bool,
        #[arg(long, default_value_t = 1000)]
        requests: usize,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        /// Directory for the raw latency files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Edge address of the target kernel (ignored with --standalone).
        #[arg(long, default_value = "127.0.0.1:8080")]
        edge: SocketAddr,
        /// Path to the muk-testmod binary.
        #[arg(long, env = TESTMOD_ENV)]
        testmod: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

#[derive(Debug)]
pub struct ApiFailure {
    pub status: Option<u16>,
    pub body: Value,
}

impl std::fmt::Display for ApiFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.status {
            Some(s) => write!(f, "HTTP {s}: {}", self.body),
            None => write!(f, "{}", self.body),
        }
    }
}

pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(admin: &str) -> Self {
        let base = if admin.starts_with("http://") || admin.starts_with("https://") {
            admin.trim_end_matches('/').to_string()
        } else {
            format!("http://{admin}")
        };
        Self {
            base,
            http: reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(60))
                .build()
                .expect("http client"),
        }
    }

    pub fn call(&self, method: reqwest::Method, path: &str, body: Option<Value>) -> Result<Value, ApiFailure> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().map_err(|e| ApiFailure {
            status: None,
            body: json!({"error": "Unreachable", "message": e.to_string()}),
        })?;
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        if status.is_success() {
            Ok(body)
        } else {
            Err(ApiFailure {
                status: Some(status.as_u16()),
                body,
            })
        }
    }

    pub fn get(&self, path: &str) -> Result<Value, ApiFailure> {
        self.call(reqwest::Method::GET, path, None)
    }

    pub fn post(&self, path: &str, body: Value) -> Result<Value, ApiFailure> {
        self.call(reqwest::Method::POST, path, Some(body))
    }
}

fn s(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

/// One row per instance; modules without instances get a single row.
pub fn status_table(modules: &[Value]) -> String {
    let mut out = format!(
        "{:<20} {:<10} {:<11} {:<28} {:<10} {:>6}\n",
        "module", "version", "paradigm", "instance", "state", "active"
    );
    for m in modules {
        let d = &m["descriptor"];
        let instances = m["instances"].as_array().cloned().unwrap_or_default();
        let row = |inst: Option<&Value>| {
            format!(
                "{:<20} {:<10} {:<11} {:<28} {:<10} {:>6}\n",
                s(&d["module_id"]),
                s(&d["version"]),
                s(&d["paradigm"]),
                inst.map(|i| s(&i["instance_id"])).unwrap_or_else(|| "-".into()),
                inst.map(|i| s(&i["state"])).unwrap_or_else(|| "-".into()),
                inst.map(|i| s(&i["active_requests"])).unwrap_or_else(|| "-".into()),
            )
        };
        if instances.is_empty() {
            out.push_str(&row(None));
        }
        for i in &instances {
            out.push_str(&row(Some(i)));
        }
    }
    out
}

fn testmod_path(explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::current_exe()
            .ok()
            .and_then(|p| p.parent().map(|d| d.join("muk-testmod")))
            .unwrap_or_else(|| PathBuf::from("muk-testmod"))
    })
}

fn emit(out: &mut dyn Write, json_only: bool, v: &Value, table: Option<String>) {
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).unwrap_or_default());
    if !json_only {
        if let Some(t) = table {
            let _ = write!(out, "{t}");
        }
    }
}

/// Runs a parsed command; returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let client = Client::new(&cli.admin);
    let res: Result<(Value, Option<String>), ApiFailure> = match cli.command {
        Command::Deploy {
            descriptor: Some(path),
            ..
        } => match std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<Value>(&t).map_err(|e| e.to_string()))
        {
            Ok(desc) => client.post("/admin/modules", desc).map(|v| (v, None)),
            Err(e) => {
                let _ = writeln!(err, "mukctl: {}: {e}", path.display());
                return EXIT_USAGE;
            }
        },
        Command::Deploy {
            module_id: Some(id),
            version: Some(version),
            artifact_ref: Some(artifact_ref),
            ..
        } => client
            .post(
                &format!("/admin/modules/{id}/deploy"),
                json!({"version": version, "artifact_ref": artifact_ref}),
            )
            .map(|v| (v, None)),
        Command::Deploy { .. } => {
            let _ = writeln!(err, "mukctl deploy: give <module_id> <version> <artifact_ref> or --descriptor <file>");
            return EXIT_USAGE;
        }
        Command::Status { module_id: Some(id) } => client.get(&format!("/admin/modules/{id}")).map(|v| {
            let t = status_table(std::slice::from_ref(&v));
            (v, Some(t))
        }),
        Command::Status { module_id: None } => client.get("/admin/modules").map(|v| {
            let t = status_table(v.as_array().map(Vec::as_slice).unwrap_or(&[]));
            (v, Some(t))
        }),
        Command::Scale { module_id, replicas } => client
            .post(&format!("/admin/modules/{module_id}/scale"), json!({"replicas": replicas}))
            .map(|v| (v, None)),
        Command::Rollback { module_id } => client
            .post(&format!("/admin/modules/{module_id}/rollback"), json!({}))
            .map(|v| (v, None)),
        Command::Trace { request_id } => client.get(&format!("/admin/trace/{request_id}")).map(|v| {
            let mut t = String::new();
            for e in v["events"].as_array().into_iter().flatten() {
                t.push_str(&format!(
                    "{:>15} {:<12} {}{}\n",
                    s(&e["at"]),
                    s(&e["component"]),
                    s(&e["event"]),
                    if e["error"] == json!(true) { "  [error]" } else { "" }
                ));
            }
            (v, Some(t))
        }),
        Command::MapekMode { mode: Some(m) } => client.post("/admin/mapek/mode", json!({"mode": m})).map(|v| (v, None)),
        Command::MapekMode { mode: None } => client.get("/admin/mapek/mode").map(|v| (v, None)),
        Command::InjectFault { module_id, fault, seed } => client
            .post(&format!("/admin/modules/{module_id}/fault"), json!({"spec": fault, "seed": seed}))
            .map(|v| (v, None)),
        Command::Bench {
            standalone,
            requests,
            warmup,
            out: out_dir,
            edge,
            testmod,
            seed,
        } => {
            let cfg = BenchConfig {
                requests,
                warmup,
                out_dir: Some(out_dir),
                seed,
                ..BenchConfig::default()
            };
            let testmod = testmod_path(testmod);
            return run_bench(&client, standalone, edge, &testmod.to_string_lossy(), cfg, cli.json, out, err);
        }
    };
    match res {
        Ok((v, table)) => {
            emit(out, cli.json, &v, table);
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "mukctl: {e}");
            EXIT_API
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    client: &Client,
    standalone: bool,
    edge: SocketAddr,
    testmod: &str,
    cfg: BenchConfig,
    json_only: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let result = if standalone {
        let rt = match tokio::runtime::Runtime::new() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = writeln!(err, "mukctl: runtime: {e}");
                return EXIT_API;
            }
        };
        rt.block_on(bench::run_standalone(testmod, cfg))
    } else {
        let mut registered = Vec::new();
        let mut setup = Ok(());
        for d in bench::descriptors(testmod) {
            let id = d.module_id.clone();
            match client.post("/admin/modules", serde_json::to_value(&d).unwrap_or_default()) {
                Ok(_) => registered.push(id),
                Err(e) => {
                    setup = Err(e);
                    break;
                }
            }
        }
        let r = match setup {
            Ok(()) => bench::measure_both(edge, &cfg),
            Err(e) => Err(bench::BenchError::Setup(e.to_string())),
        };
        for id in registered {
            let _ = client.call(reqwest::Method::DELETE, &format!("/admin/modules/{id}"), None);
        }
        r
    };
    match result {
        Ok(o) => {
            let v = serde_json::to_value(&o).unwrap_or_default();
            emit(out, json_only, &v, Some(bench::render_table(&o)));
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "mukctl: {e}");
            EXIT_API
        }
    }
}

/// Entry point used by the binary.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match parse(argv) {
        Ok(cli) => run(cli, out, err),
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
            code
        }
    }
}
