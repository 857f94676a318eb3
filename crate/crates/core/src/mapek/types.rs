use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::EpochMs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SymptomClass {
    CrashLoop,
    LatencyDegradation,
    MemoryLeak,
    OutputAnomaly,
}

impl SymptomClass {
    /// Larger acts first when an instance shows several symptoms.
    pub fn severity(self) -> u8 {
        match self {
            SymptomClass::CrashLoop => 4,
            SymptomClass::OutputAnomaly => 3,
            SymptomClass::MemoryLeak => 2,
            SymptomClass::LatencyDegradation => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SymptomClass::CrashLoop => "CrashLoop",
            SymptomClass::LatencyDegradation => "LatencyDegradation",
            SymptomClass::MemoryLeak => "MemoryLeak",
            SymptomClass::OutputAnomaly => "OutputAnomaly",
        }
    }
}

impl fmt::Display for SymptomClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Symptom {
    pub instance_id: String,
    pub module_id: String,
    pub class: SymptomClass,
    /// References into monitor data, e.g. `MemoryBytes@1700000000123=9437184`.
    pub evidence: Vec<String>,
    pub detected_at: EpochMs,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Restart,
    ReloadConfig,
    HealHook(String),
    RollbackVersion,
    ScaleOut,
}

impl ActionKind {
    /// Knowledge-base key fragment: `Restart`, `HealHook:compact`, ...
    pub fn key(&self) -> String {
        match self {
            ActionKind::Restart => "Restart".into(),
            ActionKind::ReloadConfig => "ReloadConfig".into(),
            ActionKind::HealHook(n) => format!("HealHook:{n}"),
            ActionKind::RollbackVersion => "RollbackVersion".into(),
            ActionKind::ScaleOut => "ScaleOut".into(),
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealingAction {
    pub kind: ActionKind,
    /// Instance id for Restart and HealHook, module id otherwise.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub plan_id: String,
    pub symptom: Symptom,
    pub chosen: HealingAction,
    pub alternates: Vec<HealingAction>,
    pub rationale: String,
    pub created_at: EpochMs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Resolved,
    Unresolved,
    ActionFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub plan_id: String,
    pub module_id: String,
    pub class: SymptomClass,
    pub action: ActionKind,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedAction {
    pub cycle: u64,
    pub at: EpochMs,
    pub module_id: String,
    pub instance_id: String,
    pub class: SymptomClass,
    pub action: ActionKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u64,
    pub at: EpochMs,
    pub mode: String,
    pub symptoms: Vec<Symptom>,
    pub plans: Vec<AdaptationPlan>,
    pub outcomes: Vec<OutcomeRecord>,
    pub errors: Vec<String>,
}

impl CycleReport {
    pub fn is_empty(&self) -> bool {
        self.symptoms.is_empty() && self.plans.is_empty() && self.outcomes.is_empty()
    }
}
