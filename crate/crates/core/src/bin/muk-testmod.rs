//! Fault-capable test module speaking the subprocess wire protocol on
//! stdin/stdout. Echoes request bodies, answers `/version`, honours heal
//! hooks and fault-control envelopes.

use std::io::{self, BufReader, BufWriter};
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use parking_lot::Mutex;

use muk::fault::{Fault, FaultCommand, FaultyService, CONTROL_DESTINATION};
use muk::handler::HandlerRequest;
use muk::isc::wire::{read_frame_blocking, write_frame_blocking};
use muk::isc::{Envelope, Kind};
use muk::subprocess::{HealBody, Hello, ProbeOkBody};

/// Delay between a crash-loop fault taking hold and the process dying.
const CRASH_DELAY: Duration = Duration::from_millis(300);

#[derive(Parser, Debug)]
#[command(name = "muk-testmod")]
struct Args {
    /// Exit with status 3 before the handshake.
    #[arg(long)]
    exit_immediately: bool,
    /// Ignore SIGTERM and stdin close.
    #[arg(long)]
    ignore_term: bool,
    /// Advertise no heal hooks.
    #[arg(long)]
    no_heals: bool,
    /// Refuse fault-control envelopes.
    #[arg(long)]
    no_control: bool,
    /// Never send Hello.
    #[arg(long)]
    no_hello: bool,
    #[arg(long, default_value_t = 4 * 1024 * 1024)]
    base_memory: u64,
}

type Out = Arc<Mutex<BufWriter<io::Stdout>>>;

fn send(out: &Out, env: &Envelope) {
    let mut w = out.lock();
    if write_frame_blocking(&mut *w, env).is_err() {
        std::process::exit(0);
    }
}

fn crash_soon() {
    std::thread::spawn(|| {
        std::thread::sleep(CRASH_DELAY);
        eprintln!("crash-loop fault: exiting");
        std::process::exit(70);
    });
}

fn main() {
    let args = Args::parse();
    if args.exit_immediately {
        eprintln!("exiting before handshake");
        std::process::exit(3);
    }
    if args.ignore_term {
        // SAFETY: installs SIG_IGN for SIGTERM; no handler code runs.
        unsafe {
            libc::signal(libc::SIGTERM, libc::SIG_IGN);
        }
    }
    let module = std::env::var("MUK_MODULE").unwrap_or_else(|_| "testmod".into());
    let instance = std::env::var("MUK_INSTANCE").unwrap_or_else(|_| "testmod-0".into());
    let version = std::env::var("MUK_VERSION").unwrap_or_else(|_| "1.0.0".into());
    let svc = Arc::new(Mutex::new(FaultyService::new(version, args.base_memory)));
    if let Ok(raw) = std::env::var("MUK_FAULT") {
        match serde_json::from_str::<FaultCommand>(&raw) {
            Ok(cmd) => {
                if cmd.fault == Fault::CrashLoop {
                    crash_soon();
                }
                svc.lock().apply(&cmd);
            }
            Err(e) => eprintln!("ignoring MUK_FAULT: {e}"),
        }
    }

    let out: Out = Arc::new(Mutex::new(BufWriter::new(io::stdout())));
    if !args.no_hello {
        let hello = Hello {
            heals: if args.no_heals {
                Vec::new()
            } else {
                FaultyService::HOOKS.iter().map(|s| s.to_string()).collect()
            },
            control: !args.no_control,
        };
        let env = Envelope::new(Kind::Hello, &instance, "kernel", serde_json::to_vec(&hello).unwrap());
        send(&out, &env);
    }

    let mut stdin = BufReader::new(io::stdin());
    loop {
        let env = match read_frame_blocking(&mut stdin) {
            Ok(Some(env)) => env,
            Ok(None) | Err(_) => break,
        };
        match env.kind {
            Kind::Probe => {
                let r = svc.lock().probe();
                match r {
                    Ok(memory_bytes) => {
                        let body = serde_json::to_vec(&ProbeOkBody { memory_bytes }).unwrap();
                        send(&out, &env.respond(Kind::ProbeOk, body));
                    }
                    Err(e) => eprintln!("probe: {e}"),
                }
            }
            Kind::Heal => {
                let hook = env.body_json::<HealBody>().map(|b| b.hook).unwrap_or_default();
                let r = if args.no_heals {
                    Err("no heal hooks".to_string())
                } else {
                    svc.lock().heal(&hook)
                };
                let reply = match r {
                    Ok(()) => env.respond(Kind::HealOk, Vec::new()),
                    Err(e) => env.respond(Kind::HealFail, e.into_bytes()),
                };
                send(&out, &reply);
            }
            Kind::Request if env.destination == CONTROL_DESTINATION => {
                let body = if args.no_control {
                    serde_json::json!({"error": "no control hook"})
                } else {
                    match env.body_json::<FaultCommand>() {
                        Ok(cmd) => {
                            if cmd.fault == Fault::CrashLoop {
                                crash_soon();
                            }
                            svc.lock().apply(&cmd);
                            serde_json::json!({"ok": true})
                        }
                        Err(e) => serde_json::json!({"error": e.to_string()}),
                    }
                };
                send(&out, &env.reply(serde_json::to_vec(&body).unwrap()));
            }
            Kind::Request => {
                let req: HandlerRequest = match env.body_json() {
                    Ok(r) => r,
                    Err(_) => HandlerRequest::new("POST", "/", env.body.clone()),
                };
                let (resp, delay) = svc.lock().respond(&req);
                let body = serde_json::to_vec(&resp).unwrap();
                if delay.is_zero() {
                    send(&out, &env.reply(body));
                } else {
                    let out = out.clone();
                    std::thread::spawn(move || {
                        std::thread::sleep(delay);
                        send(&out, &env.reply(body));
                    });
                }
            }
            other => eprintln!("{module}: ignoring {other}"),
        }
    }
    if args.ignore_term {
        loop {
            std::thread::sleep(Duration::from_secs(3600));
        }
    }
}
