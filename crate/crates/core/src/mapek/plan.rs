use super::knowledge::KnowledgeBase;
use super::types::{ActionKind, AdaptationPlan, HealingAction, Symptom, SymptomClass};
use crate::clock::EpochMs;

/// Facts about the target that decide which actions apply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanContext {
    pub heal_hooks: Vec<String>,
    pub has_rollback: bool,
    pub replicas: u32,
    pub max_replicas: u32,
    pub allow_restart: bool,
}

/// Applicable actions for a symptom, in default preference order.
pub fn candidates(class: SymptomClass, ctx: &PlanContext) -> Vec<ActionKind> {
    let hook = |name: &str| {
        ctx.heal_hooks
            .iter()
            .any(|h| h == name)
            .then(|| ActionKind::HealHook(name.to_string()))
    };
    let restart = ctx.allow_restart.then_some(ActionKind::Restart);
    let rollback = ctx.has_rollback.then_some(ActionKind::RollbackVersion);
    let list = match class {
        SymptomClass::CrashLoop => vec![rollback.or(restart)],
        SymptomClass::MemoryLeak => vec![hook("compact"), restart],
        SymptomClass::LatencyDegradation => vec![(ctx.replicas < ctx.max_replicas).then_some(ActionKind::ScaleOut), restart],
        SymptomClass::OutputAnomaly => vec![hook("reset-state"), rollback, restart],
    };
    list.into_iter().flatten().collect()
}

pub fn target_for(kind: &ActionKind, s: &Symptom) -> String {
    match kind {
        ActionKind::Restart | ActionKind::HealHook(_) => s.instance_id.clone(),
        _ => s.module_id.clone(),
    }
}

/// Ranks `actions` by knowledge score; the sort is stable so equal scores
/// keep their given order.
pub fn rank(class: SymptomClass, actions: Vec<ActionKind>, kb: &KnowledgeBase) -> Vec<(ActionKind, f64)> {
    let mut scored: Vec<(ActionKind, f64)> = actions.into_iter().map(|a| {
        let s = kb.score(class, &a);
        (a, s)
    }).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    scored
}

/// Builds a plan from `actions` (already filtered) ranked against `kb`.
/// `None` when there is nothing to do.
pub fn plan_from(
    symptom: &Symptom,
    actions: Vec<ActionKind>,
    kb: &KnowledgeBase,
    plan_id: String,
    now: EpochMs,
) -> Option<AdaptationPlan> {
    let ranked = rank(symptom.class, actions, kb);
    let rationale = ranked
        .iter()
        .map(|(a, s)| format!("{}={:.3}", a.key(), s))
        .collect::<Vec<_>>()
        .join(", ");
    let mut it = ranked.into_iter().map(|(kind, _)| HealingAction {
        target: target_for(&kind, symptom),
        kind,
    });
    let chosen = it.next()?;
    Some(AdaptationPlan {
        plan_id,
        symptom: symptom.clone(),
        chosen,
        alternates: it.collect(),
        rationale: format!("{} scores: {rationale}", symptom.class),
        created_at: now,
    })
}

/// Plans from scratch: candidates for the class, ranked by knowledge.
pub fn plan(
    symptom: &Symptom,
    kb: &KnowledgeBase,
    ctx: &PlanContext,
    plan_id: String,
    now: EpochMs,
) -> Option<AdaptationPlan> {
    plan_from(symptom, candidates(symptom.class, ctx), kb, plan_id, now)
}
