//! Module registry and route table.
//!
//! Readers take a shared lock or the lock-free route snapshot; every
//! mutation goes through the single write lock.

mod routes;
mod types;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize};
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use routes::{RouteEntry, RouteTable};
pub use types::*;

use crate::clock::EpochMs;
use crate::error::{KResult, KernelError};
use crate::fault::FaultCommand;
use crate::service::LiveInstance;

/// Per-module counters and locks that live outside the registry lock.
#[derive(Default)]
pub struct ModuleRuntime {
    /// Round-robin cursor.
    pub rr: AtomicUsize,
    pub inflight: AtomicU64,
    pub last_dispatch: AtomicU64,
    pub starts: AtomicU64,
    pub instance_seq: AtomicU64,
    pub restarts: Mutex<Vec<EpochMs>>,
    /// Serializes lifecycle mutations of this module.
    pub lane: tokio::sync::Mutex<()>,
    /// Single-flight latch for demand loading.
    pub load_latch: tokio::sync::Mutex<()>,
    /// Fault reapplied to every new instance until cleared.
    pub fault: Mutex<Option<FaultCommand>>,
}

impl ModuleRuntime {
    pub fn restarts_since(&self, from: EpochMs) -> usize {
        self.restarts.lock().iter().filter(|t| **t >= from).count()
    }

    pub fn restart_total(&self) -> usize {
        self.restarts.lock().len()
    }
}

pub struct ModuleEntry {
    pub desc: ModuleDescriptor,
    pub kernel_server: bool,
    pub instances: Vec<Arc<LiveInstance>>,
    pub deployments: Vec<Deployment>,
    pub rt: Arc<ModuleRuntime>,
}

impl ModuleEntry {
    pub fn active_deployment(&self) -> Option<&Deployment> {
        self.deployments.iter().rev().find(|d| d.status == DeploymentStatus::Active)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistedModule {
    pub descriptor: ModuleDescriptor,
    pub deployments: Vec<Deployment>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PersistedRegistry {
    pub modules: Vec<PersistedModule>,
}

#[derive(Default)]
pub struct Registry {
    modules: RwLock<BTreeMap<String, ModuleEntry>>,
    routes: ArcSwap<RouteTable>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry").field("modules", &self.module_ids()).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a module. Fails on a duplicate id or a `(method, prefix)` pair
    /// already owned by another module.
    pub fn insert(&self, desc: ModuleDescriptor, kernel_server: bool, deployed_at: EpochMs) -> KResult<Arc<ModuleRuntime>> {
        desc.validate().map_err(KernelError::InvalidDescriptor)?;
        let mut modules = self.modules.write();
        if modules.contains_key(&desc.module_id) {
            return Err(KernelError::DuplicateId(desc.module_id.clone()));
        }
        for rule in &desc.routes {
            let key = rule.key();
            if modules.values().any(|m| m.desc.routes.iter().any(|r| r.key() == key)) {
                return Err(KernelError::RouteCollision(format!("{} {}", key.0, key.1)));
            }
        }
        let rt = Arc::new(ModuleRuntime::default());
        let deployment = Deployment {
            module_id: desc.module_id.clone(),
            version: desc.version.clone(),
            artifact_ref: desc.artifact_ref.clone(),
            deployed_at,
            status: DeploymentStatus::Active,
        };
        modules.insert(
            desc.module_id.clone(),
            ModuleEntry {
                desc,
                kernel_server,
                instances: Vec::new(),
                deployments: vec![deployment],
                rt: rt.clone(),
            },
        );
        self.rebuild_routes(&modules);
        Ok(rt)
    }

    /// Restores a persisted module with its deployment history.
    pub fn restore(&self, m: PersistedModule) -> KResult<Arc<ModuleRuntime>> {
        let rt = self.insert(m.descriptor, false, 0)?;
        if !m.deployments.is_empty() {
            let id = m.deployments[0].module_id.clone();
            self.update(&id, |e| e.deployments = m.deployments.clone())?;
        }
        Ok(rt)
    }

    /// Drops the module's routes without removing the entry, so it can be
    /// drained before [`Registry::remove`].
    pub fn withdraw_routes(&self, module_id: &str) -> KResult<()> {
        let mut modules = self.modules.write();
        let e = modules
            .get_mut(module_id)
            .ok_or_else(|| KernelError::UnknownModule(module_id.to_string()))?;
        e.desc.routes.clear();
        self.rebuild_routes(&modules);
        Ok(())
    }

    pub fn remove(&self, module_id: &str) -> KResult<ModuleEntry> {
        let mut modules = self.modules.write();
        let e = modules
            .remove(module_id)
            .ok_or_else(|| KernelError::UnknownModule(module_id.to_string()))?;
        self.rebuild_routes(&modules);
        Ok(e)
    }

    fn rebuild_routes(&self, modules: &BTreeMap<String, ModuleEntry>) {
        let entries = modules
            .values()
            .flat_map(|m| {
                m.desc.routes.iter().map(|r| RouteEntry {
                    method: r.method.to_ascii_uppercase(),
                    prefix: r.path_prefix.clone(),
                    module_id: m.desc.module_id.clone(),
                    strategy: r.strategy,
                })
            })
            .collect();
        self.routes.store(Arc::new(RouteTable::new(entries)));
    }

    pub fn routes(&self) -> Arc<RouteTable> {
        self.routes.load_full()
    }

    pub fn contains(&self, module_id: &str) -> bool {
        self.modules.read().contains_key(module_id)
    }

    pub fn module_ids(&self) -> Vec<String> {
        self.modules.read().keys().cloned().collect()
    }

    /// Descriptor and instance snapshots; never exposes live state.
    pub fn lookup(&self, module_id: &str) -> KResult<(ModuleDescriptor, Vec<ServiceInstance>)> {
        let modules = self.modules.read();
        let e = modules
            .get(module_id)
            .ok_or_else(|| KernelError::UnknownModule(module_id.to_string()))?;
        Ok((e.desc.clone(), e.instances.iter().map(|i| i.snapshot()).collect()))
    }

    pub fn read<R>(&self, module_id: &str, f: impl FnOnce(&ModuleEntry) -> R) -> KResult<R> {
        let modules = self.modules.read();
        let e = modules
            .get(module_id)
            .ok_or_else(|| KernelError::UnknownModule(module_id.to_string()))?;
        Ok(f(e))
    }

    pub fn update<R>(&self, module_id: &str, f: impl FnOnce(&mut ModuleEntry) -> R) -> KResult<R> {
        let mut modules = self.modules.write();
        let e = modules
            .get_mut(module_id)
            .ok_or_else(|| KernelError::UnknownModule(module_id.to_string()))?;
        Ok(f(e))
    }

    pub fn for_each<F: FnMut(&ModuleEntry)>(&self, mut f: F) {
        for e in self.modules.read().values() {
            f(e);
        }
    }

    pub fn runtime(&self, module_id: &str) -> KResult<Arc<ModuleRuntime>> {
        self.read(module_id, |e| e.rt.clone())
    }

    pub fn instances(&self, module_id: &str) -> KResult<Vec<Arc<LiveInstance>>> {
        self.read(module_id, |e| e.instances.clone())
    }

    pub fn all_instances(&self) -> Vec<Arc<LiveInstance>> {
        self.modules
            .read()
            .values()
            .flat_map(|e| e.instances.iter().cloned())
            .collect()
    }

    pub fn find_instance(&self, instance_id: &str) -> KResult<Arc<LiveInstance>> {
        self.modules
            .read()
            .values()
            .flat_map(|e| e.instances.iter())
            .find(|i| i.instance_id == instance_id)
            .cloned()
            .ok_or_else(|| KernelError::UnknownInstance(instance_id.to_string()))
    }

    pub fn add_instance(&self, inst: Arc<LiveInstance>) -> KResult<()> {
        let id = inst.module_id.clone();
        self.update(&id, |e| e.instances.push(inst))
    }

    pub fn remove_instance(&self, module_id: &str, instance_id: &str) {
        let _ = self.update(module_id, |e| e.instances.retain(|i| i.instance_id != instance_id));
    }

    pub fn is_kernel_server(&self, module_id: &str) -> bool {
        self.read(module_id, |e| e.kernel_server).unwrap_or(false)
    }

    pub fn deployments(&self, module_id: &str) -> KResult<Vec<Deployment>> {
        self.read(module_id, |e| e.deployments.clone())
    }

    /// Application modules with their deployment history.
    pub fn export(&self) -> PersistedRegistry {
        PersistedRegistry {
            modules: self
                .modules
                .read()
                .values()
                .filter(|e| !e.kernel_server)
                .map(|e| PersistedModule {
                    descriptor: e.desc.clone(),
                    deployments: e.deployments.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(&self.export()).map_err(std::io::Error::other)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)
    }

    pub fn load_file(path: &Path) -> std::io::Result<PersistedRegistry> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(std::io::Error::other)
    }
}
