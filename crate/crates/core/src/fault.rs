//! Fault injection for the bundled test module.
//!
//! [`FaultyService`] is the behaviour behind both the `fault-echo` InProcess
//! handler and the `muk-testmod` subprocess artifact, so either paradigm can
//! be driven into the same scripted failure modes.

use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::handler::{HandlerRequest, HandlerResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Fault {
    /// The module dies shortly after every start.
    CrashLoop,
    /// Memory self-reports grow by `rate_bytes_per_cycle` at every probe.
    Leak { rate_bytes_per_cycle: u64 },
    /// Every request takes `factor` milliseconds longer.
    SlowDown { factor: f64 },
    /// Each request fails with a 500 with probability `p`.
    ErrorRate { p: f64 },
    /// Back to normal behaviour.
    Clear,
}

impl FromStr for Fault {
    type Err = String;

    /// `crash-loop`, `leak:<bytes>`, `slow:<factor>`, `error-rate:<p>`, `clear`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = |what: &str| -> Result<f64, String> {
            arg.parse::<f64>()
                .map_err(|_| format!("{name} needs a numeric {what}, got {arg:?}"))
        };
        match name {
            "crash-loop" => Ok(Fault::CrashLoop),
            "leak" => {
                let rate = parse_bytes(arg)?;
                Ok(Fault::Leak {
                    rate_bytes_per_cycle: rate,
                })
            }
            "slow" => {
                let factor = num("factor")?;
                if factor < 0.0 {
                    return Err("slow factor must be non-negative".into());
                }
                Ok(Fault::SlowDown { factor })
            }
            "error-rate" => {
                let p = num("probability")?;
                if !(0.0..=1.0).contains(&p) {
                    return Err("error-rate probability must be in [0, 1]".into());
                }
                Ok(Fault::ErrorRate { p })
            }
            "clear" => Ok(Fault::Clear),
            other => Err(format!("unknown fault {other:?}")),
        }
    }
}

/// Parses `1048576`, `512KiB`, `1MiB`, `2GiB`.
fn parse_bytes(s: &str) -> Result<u64, String> {
    let (digits, unit) = s
        .find(|c: char| !c.is_ascii_digit())
        .map(|i| s.split_at(i))
        .unwrap_or((s, ""));
    let n: u64 = digits.parse().map_err(|_| format!("bad byte count {s:?}"))?;
    let mult = match unit {
        "" | "B" => 1,
        "KiB" => 1 << 10,
        "MiB" => 1 << 20,
        "GiB" => 1 << 30,
        _ => return Err(format!("bad byte unit {unit:?}")),
    };
    Ok(n * mult)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultCommand {
    pub fault: Fault,
    #[serde(default)]
    pub seed: u64,
}

/// Destination name of control envelopes sent to the test module.
pub const CONTROL_DESTINATION: &str = "control";

#[derive(Debug)]
pub struct FaultyService {
    version: String,
    base_memory: u64,
    memory: u64,
    leak_rate: u64,
    slow_factor: f64,
    error_p: f64,
    crashed: bool,
    rng: ChaCha8Rng,
}

impl FaultyService {
    pub const DEFAULT_BASE_MEMORY: u64 = 8 * 1024 * 1024;
    pub const HOOKS: [&'static str; 2] = ["compact", "reset-state"];

    pub fn new(version: String, base_memory: u64) -> Self {
        Self {
            version,
            base_memory,
            memory: base_memory,
            leak_rate: 0,
            slow_factor: 0.0,
            error_p: 0.0,
            crashed: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn apply(&mut self, cmd: &FaultCommand) {
        self.rng = ChaCha8Rng::seed_from_u64(cmd.seed);
        match cmd.fault {
            Fault::CrashLoop => self.crashed = true,
            Fault::Leak {
                rate_bytes_per_cycle,
            } => self.leak_rate = rate_bytes_per_cycle,
            Fault::SlowDown { factor } => self.slow_factor = factor,
            Fault::ErrorRate { p } => self.error_p = p,
            Fault::Clear => {
                self.leak_rate = 0;
                self.slow_factor = 0.0;
                self.error_p = 0.0;
                self.crashed = false;
            }
        }
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    pub fn memory(&self) -> u64 {
        self.memory
    }

    /// One probe cycle: applies the leak and reports memory.
    pub fn probe(&mut self) -> Result<u64, String> {
        if self.crashed {
            return Err("crashed".into());
        }
        self.memory += self.leak_rate;
        Ok(self.memory)
    }

    pub fn heal(&mut self, hook: &str) -> Result<(), String> {
        match hook {
            "compact" => {
                self.memory = self.base_memory;
                self.leak_rate = 0;
                Ok(())
            }
            "reset-state" => {
                self.error_p = 0.0;
                self.slow_factor = 0.0;
                Ok(())
            }
            other => Err(format!("no heal hook {other:?}")),
        }
    }

    /// Computes the reply and how long to hold it.
    pub fn respond(&mut self, req: &HandlerRequest) -> (HandlerResponse, Duration) {
        let mut delay = Duration::from_secs_f64(self.slow_factor / 1000.0);
        if let Some(ms) = req.query_param("delay_ms").and_then(|v| v.parse::<u64>().ok()) {
            delay += Duration::from_millis(ms);
        }
        if self.crashed {
            return (HandlerResponse::new(503, "crashed"), delay);
        }
        if self.error_p > 0.0 && self.rng.gen::<f64>() < self.error_p {
            return (HandlerResponse::new(500, "injected error"), delay);
        }
        let resp = match req.path_only() {
            p if p.ends_with("/version") => HandlerResponse::ok(self.version.clone().into_bytes()),
            _ => HandlerResponse::ok(req.body.clone()),
        };
        (resp, delay)
    }
}
