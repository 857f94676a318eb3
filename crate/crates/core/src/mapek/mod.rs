//! Monitor-Analyze-Plan-Execute loop over shared knowledge.
//!
//! Each cycle observes every running non-kernel instance, classifies
//! symptoms, ranks the applicable healing actions by past success and runs
//! at most one action per module. An applied action is watched for a grace
//! period; the verdict feeds the knowledge base.

pub mod analyze;
pub mod knowledge;
pub mod plan;
pub mod types;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use analyze::{analyze, ObservationWindow, Thresholds};
pub use knowledge::{KnowledgeBase, KnowledgeEntry};
pub use plan::{candidates, plan, PlanContext};
pub use types::*;

use crate::clock::{EpochMs, SharedClock};
use crate::error::KernelError;
use crate::isc::Bus;
use crate::monitor::{Level, Metric};
use crate::registry::InstanceState;
use crate::service::{LiveInstance, RecoveryMode, ServiceManager};

pub const TOPIC: &str = "mapek";
const HISTORY: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapekConfig {
    pub thresholds: Thresholds,
    /// Clean cycles after an action before it counts as Resolved.
    pub grace_cycles: u32,
    pub allow_restart: bool,
    /// Upper bound on how far back one observation looks.
    pub window_s: u64,
    pub knowledge_path: Option<PathBuf>,
}

impl Default for MapekConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            grace_cycles: 5,
            allow_restart: true,
            window_s: 120,
            knowledge_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MapekError {
    #[error("no data for {0}")]
    NoData(String),
    #[error("no viable action for {0}")]
    NoViableAction(String),
    #[error("action failed: {0}")]
    ActionFailed(String),
}

#[derive(Debug, Clone)]
struct Watch {
    plan_id: String,
    action: ActionKind,
    alternates: Vec<HealingAction>,
    clean_cycles: u32,
}

#[derive(Default)]
struct LoopState {
    cycle: u64,
    plan_seq: u64,
    watches: BTreeMap<(String, SymptomClass), Watch>,
    escalations: BTreeMap<(String, SymptomClass), Vec<HealingAction>>,
    last_action_at: BTreeMap<String, EpochMs>,
}

pub struct Mapek {
    services: Arc<ServiceManager>,
    clock: SharedClock,
    bus: Option<Bus>,
    cfg: MapekConfig,
    knowledge: Mutex<KnowledgeBase>,
    state: tokio::sync::Mutex<LoopState>,
    reports: Mutex<VecDeque<CycleReport>>,
    executed: Mutex<Vec<ExecutedAction>>,
}

impl std::fmt::Debug for Mapek {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mapek").field("cfg", &self.cfg).finish()
    }
}

impl Mapek {
    pub fn new(
        services: Arc<ServiceManager>,
        clock: SharedClock,
        bus: Option<Bus>,
        cfg: MapekConfig,
    ) -> std::io::Result<Arc<Self>> {
        let knowledge = match &cfg.knowledge_path {
            Some(p) => KnowledgeBase::open(p)?,
            None => KnowledgeBase::in_memory(),
        };
        Ok(Arc::new(Self {
            services,
            clock,
            bus,
            cfg,
            knowledge: Mutex::new(knowledge),
            state: tokio::sync::Mutex::new(LoopState::default()),
            reports: Mutex::new(VecDeque::new()),
            executed: Mutex::new(Vec::new()),
        }))
    }

    pub fn config(&self) -> &MapekConfig {
        &self.cfg
    }

    pub fn knowledge(&self) -> KnowledgeBase {
        self.knowledge.lock().clone()
    }

    pub fn seed_knowledge(&self, class: SymptomClass, action: &ActionKind, attempts: u64, successes: u64) {
        self.knowledge.lock().set(class, action, attempts, successes);
    }

    /// Most recent reports, oldest first.
    pub fn cycles(&self, last: usize) -> Vec<CycleReport> {
        let r = self.reports.lock();
        r.iter().skip(r.len().saturating_sub(last)).cloned().collect()
    }

    pub fn executed(&self) -> Vec<ExecutedAction> {
        self.executed.lock().clone()
    }

    // ---- Monitor ---------------------------------------------------------

    /// Collects what `inst` looked like since the last action on its module.
    pub fn observe(&self, inst: &LiveInstance, since: EpochMs, crash_window: bool) -> Result<ObservationWindow, MapekError> {
        let now = self.clock.now_ms();
        let mon = self.services.monitor();
        let from = since.max(now.saturating_sub(self.cfg.window_s * 1000));
        let quota = self
            .services
            .registry()
            .read(&inst.module_id, |e| e.desc.quota.max_memory_bytes)
            .map_err(|_| MapekError::NoData(inst.instance_id.clone()))?;

        let mut w = ObservationWindow {
            instance_id: inst.instance_id.clone(),
            module_id: inst.module_id.clone(),
            at: now,
            quota_bytes: quota,
            ..Default::default()
        };
        for s in mon.samples_where(|s| s.instance_id == inst.instance_id && s.at > from) {
            match s.metric {
                Metric::MemoryBytes => w.memory.push((s.at, s.value)),
                Metric::LatencyUs => w.latency_us.push(s.value),
                _ => {}
            }
        }
        w.baseline_latency_us = mon
            .first_samples(self.cfg.thresholds.latency_baseline_samples, |s| {
                s.module_id == inst.module_id && s.metric == Metric::LatencyUs
            })
            .into_iter()
            .map(|s| s.value)
            .collect();
        for io in mon.io_where(|r| r.instance_id == inst.instance_id && r.at > from) {
            w.requests += 1;
            if io.error {
                w.errors += 1;
                w.error_refs.push(format!("io:{}", io.request_id));
            }
        }
        for p in mon.probes_for(&inst.instance_id, usize::MAX) {
            if p.at > from {
                w.probes += 1;
            }
        }
        w.probe_failures = inst.consecutive_failures();
        if crash_window {
            let crash_from = since.max(now.saturating_sub(self.cfg.thresholds.crash_window_s * 1000));
            if let Ok(rt) = self.services.registry().runtime(&inst.module_id) {
                w.restarts = rt.restarts.lock().iter().copied().filter(|t| *t > crash_from).collect();
            }
        }
        if w.has_data() {
            Ok(w)
        } else {
            Err(MapekError::NoData(inst.instance_id.clone()))
        }
    }

    fn plan_context(&self, inst: &LiveInstance) -> PlanContext {
        let svc = &self.services;
        PlanContext {
            heal_hooks: inst.heal_hooks(),
            has_rollback: matches!(svc.rollback_target(&inst.module_id), Ok(Some(_))),
            replicas: svc.live_instances(&inst.module_id).map(|v| v.len() as u32).unwrap_or(0),
            max_replicas: svc.config().max_replicas,
            allow_restart: self.cfg.allow_restart,
        }
    }

    // ---- Execute ---------------------------------------------------------

    pub async fn execute(&self, action: &HealingAction, module_id: &str) -> Result<(), MapekError> {
        let svc = &self.services;
        let r: Result<(), KernelError> = match &action.kind {
            ActionKind::Restart => svc.restart_instance(&action.target).await.map(|_| ()),
            ActionKind::HealHook(hook) => svc.heal(&action.target, hook).await,
            ActionKind::RollbackVersion => svc.rollback(module_id).await.map(|_| ()),
            ActionKind::ScaleOut => match svc.live_instances(module_id) {
                Ok(live) => svc.scale(module_id, live.len() as u32 + 1).await,
                Err(e) => Err(e),
            },
            ActionKind::ReloadConfig => Err(KernelError::ActionFailed("ReloadConfig is not supported".into())),
        };
        r.map_err(|e| MapekError::ActionFailed(e.to_string()))
    }

    // ---- the loop --------------------------------------------------------

    pub async fn run_cycle(&self) -> CycleReport {
        let mut st = self.state.lock().await;
        st.cycle += 1;
        let now = self.clock.now_ms();
        let mode = self.services.mode();
        let mut report = CycleReport {
            cycle: st.cycle,
            at: now,
            mode: mode.as_str().to_string(),
            ..Default::default()
        };

        // Observe and analyze.
        let mut instances: Vec<Arc<LiveInstance>> = self
            .services
            .registry()
            .all_instances()
            .into_iter()
            .filter(|i| {
                matches!(i.state(), InstanceState::Ready | InstanceState::Degraded | InstanceState::Unhealthy)
                    && !self.services.registry().is_kernel_server(&i.module_id)
            })
            .collect();
        instances.sort_by(|a, b| (&a.module_id, &a.instance_id).cmp(&(&b.module_id, &b.instance_id)));
        let mut seen_module = BTreeSet::new();
        let mut per_instance: Vec<(Arc<LiveInstance>, Vec<Symptom>)> = Vec::new();
        for inst in instances {
            let since = st.last_action_at.get(&inst.module_id).copied().unwrap_or(0);
            // Restarts are a module fact; count them once per module.
            let first = seen_module.insert(inst.module_id.clone());
            match self.observe(&inst, since, first) {
                Ok(w) => {
                    let symptoms = analyze(&w, &self.cfg.thresholds);
                    report.symptoms.extend(symptoms.iter().cloned());
                    per_instance.push((inst, symptoms));
                }
                Err(MapekError::NoData(_)) => {}
                Err(e) => report.errors.push(e.to_string()),
            }
        }

        if mode != RecoveryMode::Mapek {
            self.finish(report.clone());
            return report;
        }

        // Judge watched actions.
        let present: BTreeSet<(String, SymptomClass)> = report
            .symptoms
            .iter()
            .map(|s| (s.module_id.clone(), s.class))
            .collect();
        let keys: Vec<_> = st.watches.keys().cloned().collect();
        for key in keys {
            let verdict = if present.contains(&key) {
                Some(Outcome::Unresolved)
            } else {
                let w = st.watches.get_mut(&key).expect("watch key");
                w.clean_cycles += 1;
                (w.clean_cycles >= self.cfg.grace_cycles).then_some(Outcome::Resolved)
            };
            if let Some(outcome) = verdict {
                let w = st.watches.remove(&key).expect("watch key");
                self.learn(key.1, &w.action, outcome, now, &mut report);
                if outcome == Outcome::Unresolved {
                    st.escalations.insert(key.clone(), w.alternates.clone());
                } else {
                    st.escalations.remove(&key);
                }
                report.outcomes.push(OutcomeRecord {
                    plan_id: w.plan_id,
                    module_id: key.0.clone(),
                    class: key.1,
                    action: w.action,
                    outcome,
                    cause: None,
                });
            }
        }

        // Plan and execute, one action per module.
        let mut acted: BTreeSet<String> = BTreeSet::new();
        for (inst, symptoms) in per_instance {
            if acted.contains(&inst.module_id) {
                continue;
            }
            let Some(symptom) = symptoms
                .into_iter()
                .find(|s| !st.watches.contains_key(&(s.module_id.clone(), s.class)))
            else {
                continue;
            };
            let key = (symptom.module_id.clone(), symptom.class);
            st.plan_seq += 1;
            let plan_id = format!("plan-{}", st.plan_seq);
            let ctx = self.plan_context(&inst);
            let plan = {
                let kb = self.knowledge.lock();
                match st.escalations.get(&key) {
                    Some(rest) => {
                        let allowed = candidates(symptom.class, &ctx);
                        let kinds = rest.iter().map(|a| a.kind.clone()).filter(|k| allowed.contains(k)).collect();
                        plan::plan_from(&symptom, kinds, &kb, plan_id, now)
                    }
                    None => plan(&symptom, &kb, &ctx, plan_id, now),
                }
            };
            let Some(plan) = plan else {
                st.escalations.remove(&key);
                report
                    .errors
                    .push(MapekError::NoViableAction(format!("{} on {}", symptom.class, symptom.instance_id)).to_string());
                continue;
            };
            st.escalations.remove(&key);
            acted.insert(inst.module_id.clone());
            report.plans.push(plan.clone());

            let result = self.execute(&plan.chosen, &inst.module_id).await;
            let done_at = self.clock.now_ms();
            st.last_action_at.insert(inst.module_id.clone(), done_at);
            self.executed.lock().push(ExecutedAction {
                cycle: st.cycle,
                at: done_at,
                module_id: inst.module_id.clone(),
                instance_id: inst.instance_id.clone(),
                class: symptom.class,
                action: plan.chosen.kind.clone(),
            });
            match result {
                Ok(()) => {
                    self.services.monitor().log(
                        done_at,
                        Level::Info,
                        "mapek",
                        format!("{}: {} on {} for {}", plan.plan_id, plan.chosen.kind, plan.chosen.target, symptom.class),
                        None,
                    );
                    st.watches.insert(
                        key,
                        Watch {
                            plan_id: plan.plan_id.clone(),
                            action: plan.chosen.kind.clone(),
                            alternates: plan.alternates.clone(),
                            clean_cycles: 0,
                        },
                    );
                }
                Err(e) => {
                    self.services.monitor().log(
                        done_at,
                        Level::Warn,
                        "mapek",
                        format!("{}: {} failed: {e}", plan.plan_id, plan.chosen.kind),
                        None,
                    );
                    self.learn(symptom.class, &plan.chosen.kind, Outcome::ActionFailed, done_at, &mut report);
                    st.escalations.insert(key.clone(), plan.alternates.clone());
                    report.outcomes.push(OutcomeRecord {
                        plan_id: plan.plan_id.clone(),
                        module_id: key.0,
                        class: key.1,
                        action: plan.chosen.kind.clone(),
                        outcome: Outcome::ActionFailed,
                        cause: Some(e.to_string()),
                    });
                }
            }
        }

        self.finish(report.clone());
        report
    }

    fn learn(&self, class: SymptomClass, action: &ActionKind, outcome: Outcome, at: EpochMs, report: &mut CycleReport) {
        if let Err(e) = self.knowledge.lock().learn(class, action, outcome, at) {
            report.errors.push(format!("knowledge not persisted: {e}"));
        }
    }

    fn finish(&self, report: CycleReport) {
        let level = if report.is_empty() { Level::Debug } else { Level::Info };
        self.services.monitor().log(
            report.at,
            level,
            "mapek",
            format!(
                "cycle {} ({}): {} symptoms, {} plans, {} outcomes",
                report.cycle,
                report.mode,
                report.symptoms.len(),
                report.plans.len(),
                report.outcomes.len()
            ),
            None,
        );
        if let Some(bus) = &self.bus {
            let _ = bus.publish_json(TOPIC, &report);
        }
        let mut r = self.reports.lock();
        r.push_back(report);
        while r.len() > HISTORY {
            r.pop_front();
        }
    }
}
