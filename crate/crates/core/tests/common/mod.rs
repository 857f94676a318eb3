#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use muk::config::KernelConfig;
use muk::kernel::{boot_with, BootOptions, KernelHandle};
use muk::registry::ModuleDescriptor;

pub fn testmod() -> &'static str {
    env!("CARGO_BIN_EXE_muk-testmod")
}

pub fn testmod_with(args: &str) -> String {
    format!("{} {args}", testmod())
}

pub async fn boot_manual(cfg: KernelConfig) -> Arc<KernelHandle> {
    boot_with(cfg, BootOptions::manual()).await.expect("boot")
}

pub async fn boot_default() -> Arc<KernelHandle> {
    boot_manual(KernelConfig::ephemeral()).await
}

pub fn subprocess(id: &str, prefix: &str) -> ModuleDescriptor {
    ModuleDescriptor::subprocess(id, testmod(), prefix)
}

pub struct Http {
    pub client: reqwest::Client,
}

impl Default for Http {
    fn default() -> Self {
        Self {
            client: reqwest::Client::new(),
        }
    }
}

impl Http {
    pub async fn post(&self, addr: SocketAddr, path: &str, body: &str) -> (u16, String) {
        let r = self
            .client
            .post(format!("http://{addr}{path}"))
            .body(body.to_string())
            .send()
            .await
            .expect("send");
        let status = r.status().as_u16();
        (status, r.text().await.unwrap_or_default())
    }

    pub async fn get(&self, addr: SocketAddr, path: &str) -> (u16, String) {
        let r = self
            .client
            .get(format!("http://{addr}{path}"))
            .send()
            .await
            .expect("send");
        let status = r.status().as_u16();
        (status, r.text().await.unwrap_or_default())
    }

    pub async fn post_json(&self, addr: SocketAddr, path: &str, body: serde_json::Value) -> (u16, serde_json::Value) {
        let r = self
            .client
            .post(format!("http://{addr}{path}"))
            .json(&body)
            .send()
            .await
            .expect("send");
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(serde_json::Value::Null))
    }

    pub async fn get_json(&self, addr: SocketAddr, path: &str) -> (u16, serde_json::Value) {
        let r = self
            .client
            .get(format!("http://{addr}{path}"))
            .send()
            .await
            .expect("send");
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(serde_json::Value::Null))
    }
}

/// Is there still a process with this pid (and not a zombie)?
pub fn pid_alive(pid: u32) -> bool {
    match std::fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(s) => !s.split_whitespace().nth(2).is_some_and(|st| st == "Z"),
        Err(_) => false,
    }
}
