//! Kernel background-task execution.
//!
//! Tasks are cooperative: a task body is a step function called repeatedly
//! until it reports completion. Between steps the executor checks the
//! task's quantum and its cancel flag, so a step is the unit of preemption.
//! One executor thread runs one body at a time. A separate clock thread
//! promotes timers and runs the stall reaper on each housekeeping tick; when
//! the reaper gives up on a body that never returns, the stuck executor is
//! abandoned and a fresh one takes over the queue.

mod queue;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use thiserror::Error;

pub use queue::ReadyQueue;

use crate::clock::{EpochMs, SharedClock};
use crate::isc::{Bus, Envelope};

pub const MAX_PRIORITY: u8 = 9;
/// Timer promotion granularity.
pub const TIMER_RESOLUTION: Duration = Duration::from_millis(10);
pub const DEFAULT_HOUSEKEEPING: Duration = Duration::from_millis(50);
/// Finished task records kept for inspection.
const FINISHED_RETENTION: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Trigger {
    Immediate,
    At(EpochMs),
    OnEvent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum TaskState {
    /// Waiting on a timer or an event trigger.
    Scheduled,
    Queued,
    Running,
    /// Back in the ready queue after using up a quantum.
    Yielded,
    Done,
    Failed,
    Reaped,
    Cancelled,
}

impl TaskState {
    pub fn is_finished(self) -> bool {
        matches!(
            self,
            TaskState::Done | TaskState::Failed | TaskState::Reaped | TaskState::Cancelled
        )
    }
}

/// What a task body reports after one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// More work remains; the executor may resume the body or switch tasks.
    Yield,
    Done,
    Fail(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QuantumOutcome {
    Completed,
    Yielded,
    Failed,
    Cancelled,
    /// The reaper gave up on the task while it ran.
    Reaped,
}

pub struct TaskContext {
    task_id: String,
    deadline: Instant,
    cancel: Arc<AtomicBool>,
    event: Option<Envelope>,
}

impl TaskContext {
    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    /// True once the quantum is used up or the task was cancelled.
    pub fn should_yield(&self) -> bool {
        self.is_cancelled() || Instant::now() >= self.deadline
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// The envelope that triggered an event-driven activation.
    pub fn event(&self) -> Option<&Envelope> {
        self.event.as_ref()
    }
}

pub type TaskBody = Box<dyn FnMut(&TaskContext) -> Step + Send>;

pub struct TaskSpec {
    pub task_id: String,
    pub priority: u8,
    pub quantum_ms: u64,
    pub max_runtime_ms: u64,
    pub trigger: Trigger,
    pub body: TaskBody,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, priority: u8, body: TaskBody) -> Self {
        Self {
            task_id: task_id.into(),
            priority,
            quantum_ms: 10,
            max_runtime_ms: 10_000,
            trigger: Trigger::Immediate,
            body,
        }
    }

    pub fn quantum(mut self, quantum_ms: u64) -> Self {
        self.quantum_ms = quantum_ms;
        self
    }

    pub fn max_runtime(mut self, max_runtime_ms: u64) -> Self {
        self.max_runtime_ms = max_runtime_ms;
        self
    }

    pub fn trigger(mut self, trigger: Trigger) -> Self {
        self.trigger = trigger;
        self
    }
}

/// Public snapshot of a task.
#[derive(Debug, Clone, Serialize)]
pub struct TaskInfo {
    pub task_id: String,
    pub priority: u8,
    pub state: TaskState,
    pub quantum_ms: u64,
    pub max_runtime_ms: u64,
    pub enqueue_seq: u64,
    pub trigger: Trigger,
    pub runtime_ms: u64,
    pub slices: u32,
    pub error: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("ready queue is empty")]
    Empty,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} already finished")]
    AlreadyDone(String),
    #[error("task {0} is not runnable in state {1:?}")]
    NotRunnable(String, TaskState),
    #[error("event triggers need a bus")]
    NoBus,
}

/// Hooks the kernel uses to route task failures and reaps to the monitor.
pub trait TaskObserver: Send + Sync {
    fn task_failed(&self, task_id: &str, error: &str);
    fn task_reaped(&self, task_id: &str, runtime_ms: u64);
}

/// Totals for the no-lost-tasks ledger.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Ledger {
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    pub reaped: u64,
    pub cancelled: u64,
    pub pending: u64,
}

impl Ledger {
    pub fn balances(&self) -> bool {
        self.submitted == self.completed + self.failed + self.reaped + self.cancelled + self.pending
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SchedulerView {
    pub ready: usize,
    pub timers: usize,
    pub event_triggers: usize,
    pub housekeeping_ticks: u64,
    pub ledger: Ledger,
    pub tasks: Vec<TaskInfo>,
}

struct TaskRecord {
    info: TaskInfo,
    body: Option<TaskBody>,
    cancel: Arc<AtomicBool>,
    runtime: Duration,
    slice_started: Option<Instant>,
    event: Option<Envelope>,
}

type SharedBody = Arc<Mutex<TaskBody>>;

struct EventTrigger {
    template: TaskInfo,
    body: SharedBody,
    activations: u64,
    stop: Arc<AtomicBool>,
}

#[derive(Default)]
struct State {
    tasks: HashMap<String, TaskRecord>,
    ready: ReadyQueue,
    timers: BTreeMap<(EpochMs, u64), String>,
    triggers: HashMap<String, EventTrigger>,
    finished: VecDeque<String>,
    next_seq: u64,
    running: Option<String>,
    ledger: Ledger,
}

impl State {
    fn seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn enqueue(&mut self, id: &str, state: TaskState) {
        let seq = self.seq();
        if let Some(rec) = self.tasks.get_mut(id) {
            rec.info.state = state;
            rec.info.enqueue_seq = seq;
            let prio = rec.info.priority;
            self.ready.push(prio, seq, id.to_string());
        }
    }

    fn finish(&mut self, id: &str, state: TaskState, error: Option<String>) {
        let Some(rec) = self.tasks.get_mut(id) else {
            return;
        };
        let was_pending = !rec.info.state.is_finished();
        rec.info.state = state;
        rec.info.error = error;
        rec.body = None;
        rec.slice_started = None;
        if !was_pending {
            return;
        }
        self.ledger.pending -= 1;
        match state {
            TaskState::Done => self.ledger.completed += 1,
            TaskState::Failed => self.ledger.failed += 1,
            TaskState::Reaped => self.ledger.reaped += 1,
            TaskState::Cancelled => self.ledger.cancelled += 1,
            _ => unreachable!("finish with non-terminal state"),
        }
        self.finished.push_back(id.to_string());
        while self.finished.len() > FINISHED_RETENTION {
            if let Some(old) = self.finished.pop_front() {
                self.tasks.remove(&old);
            }
        }
    }

    fn insert(&mut self, info: TaskInfo, body: Option<TaskBody>, event: Option<Envelope>) {
        self.ledger.submitted += 1;
        self.ledger.pending += 1;
        self.tasks.insert(
            info.task_id.clone(),
            TaskRecord {
                info,
                body,
                cancel: Arc::new(AtomicBool::new(false)),
                runtime: Duration::ZERO,
                slice_started: None,
                event,
            },
        );
    }
}

struct Inner {
    state: Mutex<State>,
    ready_cv: Condvar,
    clock: SharedClock,
    bus: Option<Bus>,
    observer: Mutex<Option<Arc<dyn TaskObserver>>>,
    shutdown: AtomicBool,
    executor_gen: AtomicU64,
    ticks: AtomicU64,
    housekeeping: Duration,
    started: AtomicBool,
}

/// Handle to the scheduler. Cheap to clone.
#[derive(Clone)]
pub struct Scheduler {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").finish_non_exhaustive()
    }
}

impl Scheduler {
    /// A scheduler with no background threads; callers drive `next`,
    /// `run_quantum`, `promote_timers` and `reap_stalled` themselves.
    pub fn manual(clock: SharedClock, bus: Option<Bus>) -> Self {
        Self::build(clock, bus, DEFAULT_HOUSEKEEPING)
    }

    fn build(clock: SharedClock, bus: Option<Bus>, housekeeping: Duration) -> Self {
        Self {
            inner: Arc::new(Inner {
                state: Mutex::new(State::default()),
                ready_cv: Condvar::new(),
                clock,
                bus,
                observer: Mutex::new(None),
                shutdown: AtomicBool::new(false),
                executor_gen: AtomicU64::new(0),
                ticks: AtomicU64::new(0),
                housekeeping,
                started: AtomicBool::new(false),
            }),
        }
    }

    /// Starts the executor and clock threads.
    pub fn start(clock: SharedClock, bus: Option<Bus>, housekeeping: Duration) -> Self {
        let s = Self::build(clock, bus, housekeeping);
        s.inner.started.store(true, Ordering::SeqCst);
        spawn_executor(&s.inner);
        let weak = Arc::downgrade(&s.inner);
        thread::Builder::new()
            .name("muk-sched-clock".into())
            .spawn(move || clock_loop(weak))
            .expect("spawn scheduler clock");
        s
    }

    pub fn set_observer(&self, observer: Arc<dyn TaskObserver>) {
        *self.inner.observer.lock() = Some(observer);
    }

    pub fn stop(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        let mut st = self.inner.state.lock();
        for t in st.triggers.values() {
            t.stop.store(true, Ordering::SeqCst);
        }
        st.triggers.clear();
        drop(st);
        self.inner.ready_cv.notify_all();
    }

    pub fn housekeeping_ticks(&self) -> u64 {
        self.inner.ticks.load(Ordering::SeqCst)
    }

    pub fn housekeeping_interval(&self) -> Duration {
        self.inner.housekeeping
    }

    pub fn submit(&self, spec: TaskSpec) -> Result<String, SchedError> {
        validate(&spec)?;
        let TaskSpec {
            task_id,
            priority,
            quantum_ms,
            max_runtime_ms,
            trigger,
            body,
        } = spec;
        let mut st = self.inner.state.lock();
        if st.tasks.contains_key(&task_id) || st.triggers.contains_key(&task_id) {
            return Err(SchedError::InvalidTask(format!("duplicate task id {task_id}")));
        }
        let info = TaskInfo {
            task_id: task_id.clone(),
            priority,
            state: TaskState::Scheduled,
            quantum_ms,
            max_runtime_ms,
            enqueue_seq: 0,
            trigger: trigger.clone(),
            runtime_ms: 0,
            slices: 0,
            error: None,
        };
        match trigger {
            Trigger::Immediate => {
                st.insert(info, Some(body), None);
                st.enqueue(&task_id, TaskState::Queued);
                drop(st);
                self.inner.ready_cv.notify_one();
            }
            Trigger::At(at) => {
                let seq = st.seq();
                st.insert(info, Some(body), None);
                if let Some(rec) = st.tasks.get_mut(&task_id) {
                    rec.info.enqueue_seq = seq;
                }
                st.timers.insert((at, seq), task_id.clone());
            }
            Trigger::OnEvent(topic) => {
                let bus = self.inner.bus.clone().ok_or(SchedError::NoBus)?;
                let stop = Arc::new(AtomicBool::new(false));
                let shared: SharedBody = Arc::new(Mutex::new(body));
                st.triggers.insert(
                    task_id.clone(),
                    EventTrigger {
                        template: info,
                        body: shared,
                        activations: 0,
                        stop: stop.clone(),
                    },
                );
                let sub = bus.subscribe(&topic, &format!("sched:{task_id}"));
                let weak = Arc::downgrade(&self.inner);
                let id = task_id.clone();
                thread::Builder::new()
                    .name(format!("muk-trigger-{task_id}"))
                    .spawn(move || loop {
                        if stop.load(Ordering::SeqCst) {
                            sub.unsubscribe();
                            return;
                        }
                        if let Some(env) = sub.recv_timeout(Duration::from_millis(50)) {
                            let Some(inner) = weak.upgrade() else { return };
                            activate(&inner, &id, env);
                        }
                    })
                    .expect("spawn trigger pump");
            }
        }
        Ok(task_id)
    }

    /// Runs `f` every `period` as a sequence of timer-triggered tasks.
    pub fn every<F>(&self, name: &str, priority: u8, period: Duration, max_runtime: Duration, f: F)
    where
        F: Fn() -> Step + Send + Sync + 'static,
    {
        let f: Arc<dyn Fn() -> Step + Send + Sync> = Arc::new(f);
        schedule_periodic(
            Arc::downgrade(&self.inner),
            name.to_string(),
            priority,
            period,
            max_runtime,
            f,
            0,
        );
    }

    /// Pops the most urgent ready task without running it.
    pub fn next(&self) -> Result<TaskInfo, SchedError> {
        let mut st = self.inner.state.lock();
        pop_ready(&mut st).map(|id| st.tasks[&id].info.clone())
    }

    /// Runs one quantum of `task_id`, which must have just been popped by
    /// [`Scheduler::next`].
    pub fn run_quantum(&self, task_id: &str) -> Result<QuantumOutcome, SchedError> {
        run_quantum(&self.inner, task_id)
    }

    /// Moves timer tasks whose time has come into the ready queue.
    pub fn promote_timers(&self) -> usize {
        promote_timers(&self.inner)
    }

    /// Reaps every running or yielded task past its runtime budget.
    pub fn reap_stalled(&self) -> Vec<String> {
        reap_stalled(&self.inner)
    }

    pub fn cancel(&self, task_id: &str) -> Result<(), SchedError> {
        let mut st = self.inner.state.lock();
        if let Some(t) = st.triggers.remove(task_id) {
            t.stop.store(true, Ordering::SeqCst);
            return Ok(());
        }
        let rec = st
            .tasks
            .get(task_id)
            .ok_or_else(|| SchedError::UnknownTask(task_id.to_string()))?;
        match rec.info.state {
            s if s.is_finished() => Err(SchedError::AlreadyDone(task_id.to_string())),
            TaskState::Running => {
                rec.cancel.store(true, Ordering::SeqCst);
                Ok(())
            }
            _ => {
                st.timers.retain(|_, id| id != task_id);
                st.finish(task_id, TaskState::Cancelled, None);
                Ok(())
            }
        }
    }

    pub fn task(&self, task_id: &str) -> Option<TaskInfo> {
        let st = self.inner.state.lock();
        st.tasks
            .get(task_id)
            .map(|r| with_runtime(r))
            .or_else(|| st.triggers.get(task_id).map(|t| t.template.clone()))
    }

    pub fn ledger(&self) -> Ledger {
        self.inner.state.lock().ledger.clone()
    }

    pub fn ready_len(&self) -> usize {
        let st = self.inner.state.lock();
        st.tasks
            .values()
            .filter(|r| matches!(r.info.state, TaskState::Queued | TaskState::Yielded))
            .count()
    }

    pub fn view(&self) -> SchedulerView {
        let st = self.inner.state.lock();
        let mut tasks: Vec<TaskInfo> = st.tasks.values().map(with_runtime).collect();
        tasks.extend(st.triggers.values().map(|t| t.template.clone()));
        tasks.sort_by_key(|t| t.enqueue_seq);
        SchedulerView {
            ready: st
                .tasks
                .values()
                .filter(|r| matches!(r.info.state, TaskState::Queued | TaskState::Yielded))
                .count(),
            timers: st.timers.len(),
            event_triggers: st.triggers.len(),
            housekeeping_ticks: self.housekeeping_ticks(),
            ledger: st.ledger.clone(),
            tasks,
        }
    }
}

fn with_runtime(r: &TaskRecord) -> TaskInfo {
    let mut info = r.info.clone();
    let live = r.slice_started.map(|s| s.elapsed()).unwrap_or_default();
    info.runtime_ms = (r.runtime + live).as_millis() as u64;
    info
}

fn validate(spec: &TaskSpec) -> Result<(), SchedError> {
    let bad = |m: String| Err(SchedError::InvalidTask(m));
    if spec.task_id.is_empty() {
        return bad("empty task id".into());
    }
    if spec.priority > MAX_PRIORITY {
        return bad(format!("priority {} above {MAX_PRIORITY}", spec.priority));
    }
    if spec.quantum_ms == 0 {
        return bad("quantum_ms must be positive".into());
    }
    if spec.quantum_ms > spec.max_runtime_ms {
        return bad("quantum_ms exceeds max_runtime_ms".into());
    }
    if let Trigger::OnEvent(topic) = &spec.trigger {
        if topic.is_empty() {
            return bad("empty trigger topic".into());
        }
    }
    Ok(())
}

fn activate(inner: &Arc<Inner>, trigger_id: &str, env: Envelope) {
    let mut st = inner.state.lock();
    let Some(t) = st.triggers.get_mut(trigger_id) else {
        return;
    };
    t.activations += 1;
    let mut info = t.template.clone();
    info.task_id = format!("{trigger_id}#{}", t.activations);
    let shared = t.body.clone();
    let body: TaskBody = Box::new(move |ctx| (shared.lock())(ctx));
    let id = info.task_id.clone();
    st.insert(info, Some(body), Some(env));
    st.enqueue(&id, TaskState::Queued);
    drop(st);
    inner.ready_cv.notify_one();
}

fn pop_ready(st: &mut State) -> Result<String, SchedError> {
    while let Some(key) = st.ready.pop() {
        let live = st
            .tasks
            .get(&key.task_id)
            .map(|r| {
                matches!(r.info.state, TaskState::Queued | TaskState::Yielded)
                    && r.info.enqueue_seq == key.seq
            })
            .unwrap_or(false);
        if live {
            return Ok(key.task_id);
        }
    }
    Err(SchedError::Empty)
}

fn run_quantum(inner: &Arc<Inner>, task_id: &str) -> Result<QuantumOutcome, SchedError> {
    let (mut body, ctx, quantum) = {
        let mut st = inner.state.lock();
        let rec = st
            .tasks
            .get_mut(task_id)
            .ok_or_else(|| SchedError::UnknownTask(task_id.to_string()))?;
        if !matches!(rec.info.state, TaskState::Queued | TaskState::Yielded) {
            return Err(SchedError::NotRunnable(task_id.to_string(), rec.info.state));
        }
        let body = rec
            .body
            .take()
            .ok_or_else(|| SchedError::NotRunnable(task_id.to_string(), rec.info.state))?;
        let quantum = Duration::from_millis(rec.info.quantum_ms);
        rec.info.state = TaskState::Running;
        rec.info.slices += 1;
        let now = Instant::now();
        rec.slice_started = Some(now);
        let ctx = TaskContext {
            task_id: task_id.to_string(),
            deadline: now + quantum,
            cancel: rec.cancel.clone(),
            event: rec.event.clone(),
        };
        st.running = Some(task_id.to_string());
        (body, ctx, quantum)
    };
    let started = Instant::now();
    let step = loop {
        if ctx.is_cancelled() {
            break None;
        }
        match body(&ctx) {
            Step::Yield if started.elapsed() < quantum => continue,
            other => break Some(other),
        }
    };

    let mut st = inner.state.lock();
    if st.running.as_deref() == Some(task_id) {
        st.running = None;
    }
    let Some(rec) = st.tasks.get_mut(task_id) else {
        return Ok(QuantumOutcome::Reaped);
    };
    if rec.info.state == TaskState::Reaped {
        return Ok(QuantumOutcome::Reaped);
    }
    rec.runtime += started.elapsed();
    rec.info.runtime_ms = rec.runtime.as_millis() as u64;
    rec.slice_started = None;
    let outcome = match step {
        None => {
            st.finish(task_id, TaskState::Cancelled, None);
            QuantumOutcome::Cancelled
        }
        Some(Step::Done) => {
            st.finish(task_id, TaskState::Done, None);
            QuantumOutcome::Completed
        }
        Some(Step::Fail(e)) => {
            st.finish(task_id, TaskState::Failed, Some(e.clone()));
            let observer = inner.observer.lock().clone();
            drop(st);
            if let Some(o) = observer {
                o.task_failed(task_id, &e);
            }
            return Ok(QuantumOutcome::Failed);
        }
        Some(Step::Yield) => {
            rec.body = Some(body);
            st.enqueue(task_id, TaskState::Yielded);
            drop(st);
            inner.ready_cv.notify_one();
            return Ok(QuantumOutcome::Yielded);
        }
    };
    Ok(outcome)
}

fn promote_timers(inner: &Arc<Inner>) -> usize {
    let now = inner.clock.now_ms();
    let mut st = inner.state.lock();
    let due: Vec<(EpochMs, u64)> = st.timers.range(..=(now, u64::MAX)).map(|(k, _)| *k).collect();
    let n = due.len();
    for key in due {
        if let Some(id) = st.timers.remove(&key) {
            st.enqueue(&id, TaskState::Queued);
        }
    }
    drop(st);
    if n > 0 {
        inner.ready_cv.notify_all();
    }
    n
}

fn reap_stalled(inner: &Arc<Inner>) -> Vec<String> {
    let mut reaped = Vec::new();
    let mut st = inner.state.lock();
    let over: Vec<(String, u64)> = st
        .tasks
        .values()
        .filter(|r| matches!(r.info.state, TaskState::Running | TaskState::Yielded))
        .filter_map(|r| {
            let live = r.slice_started.map(|s| s.elapsed()).unwrap_or_default();
            let total = r.runtime + live;
            (total > Duration::from_millis(r.info.max_runtime_ms))
                .then(|| (r.info.task_id.clone(), total.as_millis() as u64))
        })
        .collect();
    let mut stuck_executor = false;
    for (id, runtime_ms) in &over {
        if let Some(rec) = st.tasks.get_mut(id) {
            rec.cancel.store(true, Ordering::SeqCst);
            rec.info.runtime_ms = *runtime_ms;
        }
        if st.running.as_deref() == Some(id.as_str()) {
            st.running = None;
            stuck_executor = true;
        }
        st.finish(id, TaskState::Reaped, Some(format!("stalled after {runtime_ms} ms")));
        reaped.push(id.clone());
    }
    drop(st);
    if stuck_executor && inner.started.load(Ordering::SeqCst) {
        inner.executor_gen.fetch_add(1, Ordering::SeqCst);
        spawn_executor(inner);
    }
    if !over.is_empty() {
        if let Some(o) = inner.observer.lock().clone() {
            for (id, ms) in &over {
                o.task_reaped(id, *ms);
            }
        }
    }
    reaped
}

fn schedule_periodic(
    weak: Weak<Inner>,
    name: String,
    priority: u8,
    period: Duration,
    max_runtime: Duration,
    f: Arc<dyn Fn() -> Step + Send + Sync>,
    n: u64,
) {
    let Some(inner) = weak.upgrade() else { return };
    if inner.shutdown.load(Ordering::SeqCst) {
        return;
    }
    let at = inner.clock.now_ms() + period.as_millis() as u64;
    let next_weak = weak.clone();
    let next_name = name.clone();
    let body_f = f.clone();
    let body: TaskBody = Box::new(move |_ctx| {
        let step = body_f();
        schedule_periodic(
            next_weak.clone(),
            next_name.clone(),
            priority,
            period,
            max_runtime,
            body_f.clone(),
            n + 1,
        );
        step
    });
    let max_ms = max_runtime.as_millis().max(1) as u64;
    let spec = TaskSpec {
        task_id: format!("{name}#{n}"),
        priority,
        quantum_ms: max_ms,
        max_runtime_ms: max_ms,
        trigger: Trigger::At(at),
        body,
    };
    let _ = Scheduler { inner }.submit(spec);
}

fn spawn_executor(inner: &Arc<Inner>) {
    let gen = inner.executor_gen.load(Ordering::SeqCst);
    let weak = Arc::downgrade(inner);
    thread::Builder::new()
        .name(format!("muk-exec-{gen}"))
        .spawn(move || executor_loop(weak, gen))
        .expect("spawn executor");
}

fn executor_loop(weak: Weak<Inner>, gen: u64) {
    loop {
        let Some(inner) = weak.upgrade() else { return };
        if inner.shutdown.load(Ordering::SeqCst) || inner.executor_gen.load(Ordering::SeqCst) != gen {
            return;
        }
        let next = {
            let mut st = inner.state.lock();
            match pop_ready(&mut st) {
                Ok(id) => Some(id),
                Err(_) => {
                    inner
                        .ready_cv
                        .wait_for(&mut st, Duration::from_millis(100));
                    None
                }
            }
        };
        if let Some(id) = next {
            let _ = run_quantum(&inner, &id);
        }
    }
}

fn clock_loop(weak: Weak<Inner>) {
    let mut last_housekeeping = Instant::now();
    loop {
        thread::sleep(TIMER_RESOLUTION);
        let Some(inner) = weak.upgrade() else { return };
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        promote_timers(&inner);
        if last_housekeeping.elapsed() >= inner.housekeeping {
            last_housekeeping = Instant::now();
            reap_stalled(&inner);
            inner.ticks.fetch_add(1, Ordering::SeqCst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{self, ManualClock};
    use std::sync::atomic::AtomicU32;

    fn done() -> TaskBody {
        Box::new(|_| Step::Done)
    }

    fn manual() -> Scheduler {
        Scheduler::manual(clock::system(), None)
    }

    #[test]
    fn immediate_task_is_ready() {
        let s = manual();
        s.submit(TaskSpec::new("a", 3, done())).unwrap();
        assert_eq!(s.ready_len(), 1);
        assert_eq!(s.task("a").unwrap().state, TaskState::Queued);
    }

    #[test]
    fn highest_priority_first_then_fifo() {
        let s = manual();
        for (id, p) in [("p1", 1), ("p5a", 5), ("p3", 3), ("p5b", 5)] {
            s.submit(TaskSpec::new(id, p, done())).unwrap();
        }
        let order: Vec<String> = std::iter::from_fn(|| s.next().ok().map(|t| t.task_id)).collect();
        assert_eq!(order, ["p5a", "p5b", "p3", "p1"]);
        assert_eq!(s.next().unwrap_err(), SchedError::Empty);
    }

    #[test]
    fn invalid_tasks_rejected() {
        let s = manual();
        assert!(s.submit(TaskSpec::new("x", 10, done())).is_err());
        assert!(s
            .submit(TaskSpec::new("x", 1, done()).quantum(50).max_runtime(10))
            .is_err());
        s.submit(TaskSpec::new("x", 1, done())).unwrap();
        assert!(s.submit(TaskSpec::new("x", 1, done())).is_err());
        assert!(s
            .submit(TaskSpec::new("e", 1, done()).trigger(Trigger::OnEvent("t".into())))
            .is_err());
    }

    #[test]
    fn timer_task_ready_only_after_its_time() {
        let clock = ManualClock::new(1_000);
        let s = Scheduler::manual(clock.clone(), None);
        s.submit(TaskSpec::new("t", 1, done()).trigger(Trigger::At(1_050)))
            .unwrap();
        assert_eq!(s.promote_timers(), 0);
        assert_eq!(s.next().unwrap_err(), SchedError::Empty);
        clock.advance(49);
        assert_eq!(s.promote_timers(), 0);
        clock.advance(1);
        assert_eq!(s.promote_timers(), 1);
        assert_eq!(s.next().unwrap().task_id, "t");
    }

    #[test]
    fn short_task_completes() {
        let s = manual();
        s.submit(TaskSpec::new("a", 1, done())).unwrap();
        let t = s.next().unwrap();
        assert_eq!(s.run_quantum(&t.task_id).unwrap(), QuantumOutcome::Completed);
        assert_eq!(s.task("a").unwrap().state, TaskState::Done);
    }

    #[test]
    fn long_task_yields_behind_peers() {
        let s = manual();
        let resumptions = Arc::new(AtomicU32::new(0));
        let r = resumptions.clone();
        let mut slices_seen = 0u32;
        let mut last_ctx_task = String::new();
        // Works in 1 ms steps and needs 35 ms in total.
        let mut remaining = 35u32;
        let body: TaskBody = Box::new(move |ctx| {
            if last_ctx_task.is_empty() || ctx.should_yield() {
                slices_seen += 1;
                last_ctx_task = ctx.task_id().to_string();
            }
            thread::sleep(Duration::from_millis(1));
            remaining -= 1;
            if remaining == 0 {
                r.store(slices_seen, Ordering::SeqCst);
                Step::Done
            } else {
                Step::Yield
            }
        });
        s.submit(TaskSpec::new("long", 5, body).quantum(10).max_runtime(1000))
            .unwrap();
        s.submit(TaskSpec::new("peer", 5, done())).unwrap();
        let first = s.next().unwrap();
        assert_eq!(first.task_id, "long");
        assert_eq!(s.run_quantum("long").unwrap(), QuantumOutcome::Yielded);
        assert_eq!(s.task("long").unwrap().state, TaskState::Yielded);
        // The peer queued before the yield now runs first.
        assert_eq!(s.next().unwrap().task_id, "peer");
        s.run_quantum("peer").unwrap();
        let mut quanta = 1;
        loop {
            let t = s.next().unwrap();
            assert_eq!(t.task_id, "long");
            quanta += 1;
            if s.run_quantum("long").unwrap() == QuantumOutcome::Completed {
                break;
            }
        }
        assert!(quanta >= 3, "35 ms of work in 10 ms quanta took {quanta} slices");
        assert_eq!(s.task("long").unwrap().slices, quanta);
    }

    #[test]
    fn failing_task_is_reported() {
        struct Rec(Mutex<Vec<String>>);
        impl TaskObserver for Rec {
            fn task_failed(&self, id: &str, e: &str) {
                self.0.lock().push(format!("{id}:{e}"));
            }
            fn task_reaped(&self, _: &str, _: u64) {}
        }
        let s = manual();
        let rec = Arc::new(Rec(Mutex::new(Vec::new())));
        s.set_observer(rec.clone());
        s.submit(TaskSpec::new("bad", 1, Box::new(|_| Step::Fail("boom".into()))))
            .unwrap();
        s.next().unwrap();
        assert_eq!(s.run_quantum("bad").unwrap(), QuantumOutcome::Failed);
        let t = s.task("bad").unwrap();
        assert_eq!(t.state, TaskState::Failed);
        assert_eq!(t.error.as_deref(), Some("boom"));
        assert_eq!(rec.0.lock().as_slice(), ["bad:boom"]);
    }

    #[test]
    fn cancel_queued_and_done() {
        let s = manual();
        let ran = Arc::new(AtomicBool::new(false));
        let r = ran.clone();
        s.submit(TaskSpec::new(
            "q",
            1,
            Box::new(move |_| {
                r.store(true, Ordering::SeqCst);
                Step::Done
            }),
        ))
        .unwrap();
        s.cancel("q").unwrap();
        assert_eq!(s.next().unwrap_err(), SchedError::Empty);
        assert!(!ran.load(Ordering::SeqCst));
        assert_eq!(s.cancel("q"), Err(SchedError::AlreadyDone("q".into())));
        assert_eq!(s.cancel("nope"), Err(SchedError::UnknownTask("nope".into())));
        assert!(s.ledger().balances());
    }

    #[test]
    fn running_task_stops_at_next_yield_point() {
        let s = Scheduler::start(clock::system(), None, DEFAULT_HOUSEKEEPING);
        let steps = Arc::new(AtomicU32::new(0));
        let st = steps.clone();
        let body: TaskBody = Box::new(move |_| {
            st.fetch_add(1, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(5));
            Step::Yield
        });
        s.submit(TaskSpec::new("coop", 1, body).quantum(1000).max_runtime(60_000))
            .unwrap();
        while steps.load(Ordering::SeqCst) < 3 {
            thread::sleep(Duration::from_millis(2));
        }
        s.cancel("coop").unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while s.task("coop").unwrap().state != TaskState::Cancelled {
            assert!(Instant::now() < deadline, "task never stopped");
            thread::sleep(Duration::from_millis(2));
        }
        let at_cancel = steps.load(Ordering::SeqCst);
        thread::sleep(Duration::from_millis(30));
        assert_eq!(steps.load(Ordering::SeqCst), at_cancel);
        s.stop();
    }

    #[test]
    fn stalled_task_is_reaped_and_executor_replaced() {
        let s = Scheduler::start(clock::system(), None, Duration::from_millis(20));
        s.submit(TaskSpec::new(
            "stuck",
            5,
            Box::new(|_| {
                thread::sleep(Duration::from_secs(3));
                Step::Done
            }),
        )
        .quantum(100)
        .max_runtime(100))
        .unwrap();
        let started = Instant::now();
        while s.task("stuck").unwrap().state != TaskState::Reaped {
            assert!(started.elapsed() < Duration::from_secs(2));
            thread::sleep(Duration::from_millis(5));
        }
        assert!(started.elapsed() >= Duration::from_millis(100));
        // The replacement executor keeps serving the queue.
        s.submit(TaskSpec::new("after", 1, done())).unwrap();
        let deadline = Instant::now() + Duration::from_secs(1);
        while s.task("after").unwrap().state != TaskState::Done {
            assert!(Instant::now() < deadline);
            thread::sleep(Duration::from_millis(5));
        }
        s.stop();
    }

    #[test]
    fn healthy_task_under_limit_not_reaped() {
        let s = manual();
        s.submit(TaskSpec::new("ok", 1, done()).max_runtime(100)).unwrap();
        assert!(s.reap_stalled().is_empty());
    }

    #[test]
    fn event_trigger_enqueues_once_per_event() {
        let bus = Bus::default();
        let s = Scheduler::manual(clock::system(), Some(bus.clone()));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sn = seen.clone();
        s.submit(
            TaskSpec::new(
                "on-user",
                4,
                Box::new(move |ctx| {
                    sn.lock().push(ctx.event().map(|e| e.body.clone()).unwrap_or_default());
                    Step::Done
                }),
            )
            .trigger(Trigger::OnEvent("user.created".into())),
        )
        .unwrap();
        // Let the pump subscribe before publishing.
        thread::sleep(Duration::from_millis(20));
        bus.publish("user.created", b"u1".to_vec()).unwrap();
        bus.publish("user.created", b"u2".to_vec()).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        let mut ran = 0;
        while ran < 2 {
            assert!(Instant::now() < deadline);
            if let Ok(t) = s.next() {
                s.run_quantum(&t.task_id).unwrap();
                ran += 1;
            } else {
                thread::sleep(Duration::from_millis(5));
            }
        }
        assert_eq!(seen.lock().as_slice(), [b"u1".to_vec(), b"u2".to_vec()]);
        assert_eq!(s.next().unwrap_err(), SchedError::Empty);
        s.stop();
    }

    #[test]
    fn periodic_task_repeats() {
        let s = Scheduler::start(clock::system(), None, DEFAULT_HOUSEKEEPING);
        let n = Arc::new(AtomicU32::new(0));
        let c = n.clone();
        s.every("tick", 8, Duration::from_millis(20), Duration::from_secs(1), move || {
            c.fetch_add(1, Ordering::SeqCst);
            Step::Done
        });
        thread::sleep(Duration::from_millis(300));
        s.stop();
        assert!(n.load(Ordering::SeqCst) >= 3);
    }
}
