//! Mission lifecycle: runs a validated plan on the simulator action by
//! action, applies the recovery policy, and produces [`MissionRecord`]s.
//!
//! [`MissionDesk`] wraps a simulator in a long-lived worker thread that takes
//! one mission at a time and fans its frames out through [`MissionFeed`]s.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

use crate::ids::IdGen;
use crate::jsonl::JsonlLog;
use crate::nav_sim::{ActionOutcome, EventBody, Flow, RobotState, SimEvent, SimObserver, Simulator, TICK};
use crate::plan_schema::{ActionCommand, MovementPlan};

/// Experimental category a mission is counted under. Declaration order is
/// the report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    SingleRoomShort,
    MultiRoomShort,
    MultiRoomLong,
    CrossZone,
    #[default]
    Untagged,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 5] = [
        ScenarioTag::SingleRoomShort,
        ScenarioTag::MultiRoomShort,
        ScenarioTag::MultiRoomLong,
        ScenarioTag::CrossZone,
        ScenarioTag::Untagged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioTag::SingleRoomShort => "single_room_short",
            ScenarioTag::MultiRoomShort => "multi_room_short",
            ScenarioTag::MultiRoomLong => "multi_room_long",
            ScenarioTag::CrossZone => "cross_zone",
            ScenarioTag::Untagged => "untagged",
        }
    }

    /// Row label in the summary table.
    pub fn label(self) -> &'static str {
        match self {
            ScenarioTag::SingleRoomShort => "Short Dist. (Single-Room)",
            ScenarioTag::MultiRoomShort => "Short Dist. (Multi-Room)",
            ScenarioTag::MultiRoomLong => "Long Dist. (Multi-Room)",
            ScenarioTag::CrossZone => "Cross-Zone",
            ScenarioTag::Untagged => "Untagged",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == text)
    }
}

impl fmt::Display for ScenarioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum MissionPhase {
    Pending,
    Executing { action_index: usize },
    Completed,
    Failed { reason: String },
    Aborted,
}

impl MissionPhase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, MissionPhase::Completed | MissionPhase::Failed { .. } | MissionPhase::Aborted)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MissionPhase::Pending => "pending",
            MissionPhase::Executing { .. } => "executing",
            MissionPhase::Completed => "completed",
            MissionPhase::Failed { .. } => "failed",
            MissionPhase::Aborted => "aborted",
        }
    }

    /// The transition whitelist. Cancelling a mission before its first
    /// action goes straight from pending to aborted.
    pub fn can_transition_to(&self, next: &MissionPhase) -> bool {
        match (self, next) {
            (MissionPhase::Pending, MissionPhase::Executing { action_index: 0 }) => true,
            (MissionPhase::Pending, MissionPhase::Aborted) => true,
            (MissionPhase::Executing { action_index: i }, MissionPhase::Executing { action_index: j }) => *j == i + 1,
            (MissionPhase::Executing { .. }, next) => next.is_terminal(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryPolicy {
    #[default]
    AbortMission,
    /// Skip the failed action and continue; the mission still ends failed.
    SkipAction,
    RetryOnceThenAbort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionStatus {
    pub mission_id: String,
    #[serde(flatten)]
    pub phase: MissionPhase,
    pub started_at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<f64>,
    pub current_pose: RobotState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionRecord {
    pub mission_id: String,
    pub outcome_id: String,
    pub scenario_tag: ScenarioTag,
    pub actions: Vec<ActionCommand>,
    pub phase: MissionPhase,
    pub success: bool,
    pub started_at: f64,
    pub finished_at: f64,
    /// Simulated motion time, `finished_at - started_at`.
    pub duration: f64,
    /// Seconds the provider took to produce the plan.
    pub provider_latency: f64,
    pub end_to_end_duration: f64,
    pub events: Vec<SimEvent>,
}

/// Everything `run_mission` needs besides the simulator.
#[derive(Debug, Clone)]
pub struct MissionSpec {
    pub mission_id: String,
    pub outcome_id: String,
    pub scenario_tag: ScenarioTag,
    pub plan: MovementPlan,
    pub policy: RecoveryPolicy,
    pub provider_latency: f64,
}

/// Callbacks from a running mission. `should_abort` is polled before every
/// action and after every simulated tick.
pub trait MissionHooks {
    fn on_event(&mut self, _event: &SimEvent) {}
    fn on_status(&mut self, _status: &MissionStatus) {}
    fn should_abort(&mut self, _sim_time: f64) -> bool {
        false
    }
}

pub struct NoHooks;

impl MissionHooks for NoHooks {}

struct Bridge<'a> {
    hooks: &'a mut dyn MissionHooks,
    events: &'a mut Vec<SimEvent>,
}

impl SimObserver for Bridge<'_> {
    fn on_event(&mut self, event: &SimEvent) {
        self.hooks.on_event(event);
        self.events.push(event.clone());
    }

    fn on_tick(&mut self, sim_time: f64) -> Flow {
        if self.hooks.should_abort(sim_time) {
            Flow::Stop
        } else {
            Flow::Continue
        }
    }
}

/// Executes `spec.plan` from the simulator's current state. The simulator
/// keeps its final pose and clock afterwards.
pub fn run_mission(sim: &mut Simulator, spec: &MissionSpec, hooks: &mut dyn MissionHooks) -> MissionRecord {
    let started_at = sim.state().sim_time;
    let mut events = Vec::new();
    let mut status = MissionStatus {
        mission_id: spec.mission_id.clone(),
        phase: MissionPhase::Pending,
        started_at,
        finished_at: None,
        current_pose: sim.state(),
    };
    hooks.on_status(&status);

    let mut skipped = Vec::new();
    let mut terminal = None;
    for (index, action) in spec.plan.actions.iter().enumerate() {
        if hooks.should_abort(sim.state().sim_time) {
            terminal = Some(MissionPhase::Aborted);
            break;
        }
        status.phase = MissionPhase::Executing { action_index: index };
        status.current_pose = sim.state();
        hooks.on_status(&status);

        let mut retried = false;
        let outcome = loop {
            let outcome = sim.execute_action(action, &mut Bridge { hooks: &mut *hooks, events: &mut events });
            match outcome {
                ActionOutcome::Failed(_) if spec.policy == RecoveryPolicy::RetryOnceThenAbort && !retried => retried = true,
                other => break other,
            }
        };
        match outcome {
            ActionOutcome::Completed => {}
            ActionOutcome::Halted | ActionOutcome::Interrupted => {
                terminal = Some(MissionPhase::Aborted);
                break;
            }
            ActionOutcome::Failed(reason) => {
                if spec.policy == RecoveryPolicy::SkipAction {
                    skipped.push(index);
                } else {
                    terminal = Some(MissionPhase::Failed { reason: format!("action {index} ({action}): {reason}") });
                    break;
                }
            }
        }
    }

    let phase = terminal.unwrap_or_else(|| {
        if skipped.is_empty() {
            MissionPhase::Completed
        } else {
            MissionPhase::Failed { reason: format!("skipped actions {skipped:?}") }
        }
    });
    let finished_at = sim.state().sim_time;
    status.phase = phase.clone();
    status.finished_at = Some(finished_at);
    status.current_pose = sim.state();
    hooks.on_status(&status);

    let duration = finished_at - started_at;
    MissionRecord {
        mission_id: spec.mission_id.clone(),
        outcome_id: spec.outcome_id.clone(),
        scenario_tag: spec.scenario_tag,
        actions: spec.plan.actions.clone(),
        success: phase == MissionPhase::Completed,
        phase,
        started_at,
        finished_at,
        duration,
        provider_latency: spec.provider_latency,
        end_to_end_duration: spec.provider_latency + duration,
        events,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_tag: ScenarioTag,
    pub attempts: u32,
    pub successes: u32,
    /// Percent.
    pub success_rate: f64,
    /// Mean motion time over successful missions only.
    pub mean_duration: Option<f64>,
    /// Mean provider latency plus motion time over successful missions.
    pub mean_end_to_end: Option<f64>,
}

/// Groups records by tag, in tag order.
pub fn summarize(records: &[MissionRecord]) -> Vec<ScenarioSummary> {
    let mut groups: BTreeMap<ScenarioTag, Vec<&MissionRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(record.scenario_tag).or_default().push(record);
    }
    groups
        .into_iter()
        .map(|(tag, group)| {
            let ok: Vec<&&MissionRecord> = group.iter().filter(|r| r.success).collect();
            let mean = |f: fn(&MissionRecord) -> f64| {
                (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
            };
            ScenarioSummary {
                scenario_tag: tag,
                attempts: group.len() as u32,
                successes: ok.len() as u32,
                success_rate: 100.0 * ok.len() as f64 / group.len() as f64,
                mean_duration: mean(|r| r.duration),
                mean_end_to_end: mean(|r| r.end_to_end_duration),
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 7] = [
    "scenario_tag",
    "Scenario Category",
    "Avg. Duration(s)",
    "Success Rate(%)",
    "Total Attempts",
    "Successes",
    "Avg. End-to-End(s)",
];

fn seconds(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.2}")).unwrap_or_default()
}

/// Success rate without trailing zeros: `96`, `100`, `66.66666666666667`.
pub fn format_rate(rate: f64) -> String {
    format!("{rate}")
}

pub fn write_summary_csv<W: io::Write>(summaries: &[ScenarioSummary], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for s in summaries {
        writer.write_record([
            s.scenario_tag.as_str().to_owned(),
            s.scenario_tag.label().to_owned(),
            seconds(s.mean_duration),
            format_rate(s.success_rate),
            s.attempts.to_string(),
            s.successes.to_string(),
            seconds(s.mean_end_to_end),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn summary_csv_string(summaries: &[ScenarioSummary]) -> String {
    let mut buf = Vec::new();
    write_summary_csv(summaries, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// One frame of a mission's live feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "frame", content = "data", rename_all = "snake_case")]
pub enum Frame {
    Event(SimEvent),
    Status(MissionStatus),
}

/// Append-only frame history of one mission plus its latest status.
/// Readers never block the worker for longer than a vector copy.
pub struct MissionFeed {
    mission_id: String,
    outcome_id: String,
    scenario_tag: ScenarioTag,
    plan: MovementPlan,
    frames: Mutex<Vec<Frame>>,
    status: Mutex<MissionStatus>,
    finished: Condvar,
    version: watch::Sender<usize>,
    abort: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl MissionFeed {
    fn new(mission_id: String, outcome_id: String, scenario_tag: ScenarioTag, plan: MovementPlan, pose: RobotState) -> Self {
        let status = MissionStatus {
            mission_id: mission_id.clone(),
            phase: MissionPhase::Pending,
            started_at: pose.sim_time,
            finished_at: None,
            current_pose: pose,
        };
        MissionFeed {
            mission_id,
            outcome_id,
            scenario_tag,
            plan,
            frames: Mutex::new(vec![Frame::Status(status.clone())]),
            status: Mutex::new(status),
            finished: Condvar::new(),
            version: watch::Sender::new(1),
            abort: AtomicBool::new(false),
        }
    }

    pub fn mission_id(&self) -> &str {
        &self.mission_id
    }

    pub fn outcome_id(&self) -> &str {
        &self.outcome_id
    }

    pub fn scenario_tag(&self) -> ScenarioTag {
        self.scenario_tag
    }

    pub fn plan(&self) -> &MovementPlan {
        &self.plan
    }

    pub fn status(&self) -> MissionStatus {
        lock(&self.status).clone()
    }

    pub fn is_terminal(&self) -> bool {
        lock(&self.status).phase.is_terminal()
    }

    pub fn frame_count(&self) -> usize {
        lock(&self.frames).len()
    }

    /// Frames from index `from` on.
    pub fn frames_since(&self, from: usize) -> Vec<Frame> {
        let frames = lock(&self.frames);
        frames.get(from..).map(<[Frame]>::to_vec).unwrap_or_default()
    }

    /// Notified with the new frame count whenever a frame is appended.
    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.version.subscribe()
    }

    pub fn request_abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
    }

    fn abort_requested(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }

    /// Blocks until the mission is terminal or `timeout` passes.
    pub fn wait_terminal(&self, timeout: Duration) -> MissionStatus {
        let guard = lock(&self.status);
        let (guard, _) = self
            .finished
            .wait_timeout_while(guard, timeout, |s| !s.phase.is_terminal())
            .unwrap_or_else(|e| e.into_inner());
        guard.clone()
    }

    fn push(&self, frame: Frame) {
        let count = {
            let mut frames = lock(&self.frames);
            if let Frame::Status(status) = &frame {
                *lock(&self.status) = status.clone();
            }
            frames.push(frame);
            frames.len()
        };
        self.version.send_replace(count);
        self.finished.notify_all();
    }

    fn update_pose(&self, pose: RobotState) {
        lock(&self.status).current_pose = pose;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeskError {
    #[error("mission `{0}` is still executing")]
    Busy(String),
    #[error("unknown mission `{0}`")]
    UnknownMission(String),
    #[error("mission worker has stopped")]
    WorkerGone,
}

#[derive(Debug, Clone, Default)]
pub struct DeskConfig {
    pub policy: RecoveryPolicy,
    /// Simulated seconds per wall-clock second; 0 runs as fast as possible.
    pub pace: f64,
}

#[derive(Default)]
struct Registry {
    missions: HashMap<String, Arc<MissionFeed>>,
    active: Option<String>,
}

struct Job {
    feed: Arc<MissionFeed>,
    provider_latency: f64,
}

struct DeskShared {
    registry: Mutex<Registry>,
    records: Mutex<Vec<MissionRecord>>,
    log: Option<JsonlLog>,
}

/// Single-mission executor running on its own thread.
pub struct MissionDesk {
    shared: Arc<DeskShared>,
    jobs: Mutex<Option<mpsc::Sender<Job>>>,
    ids: IdGen,
    worker: Mutex<Option<JoinHandle<()>>>,
    robot: Arc<Mutex<RobotState>>,
}

impl MissionDesk {
    pub fn start(sim: Simulator, config: DeskConfig, log: Option<JsonlLog>) -> Self {
        let shared = Arc::new(DeskShared { registry: Mutex::default(), records: Mutex::default(), log });
        let robot = Arc::new(Mutex::new(sim.state()));
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = {
            let shared = shared.clone();
            let robot = robot.clone();
            thread::Builder::new()
                .name("mission-worker".into())
                .spawn(move || worker_loop(sim, config, shared, robot, rx))
                .expect("spawning mission worker")
        };
        MissionDesk {
            shared,
            jobs: Mutex::new(Some(tx)),
            ids: IdGen::new("m"),
            worker: Mutex::new(Some(worker)),
            robot,
        }
    }

    /// Queues a validated plan. Fails with `Busy` while another mission is
    /// pending or executing.
    pub fn submit(&self, plan: MovementPlan, outcome_id: &str, tag: ScenarioTag, provider_latency: f64) -> Result<Arc<MissionFeed>, DeskError> {
        let mut registry = lock(&self.shared.registry);
        if let Some(active) = &registry.active {
            return Err(DeskError::Busy(active.clone()));
        }
        let id = self.ids.next_id();
        let feed = Arc::new(MissionFeed::new(id.clone(), outcome_id.to_owned(), tag, plan, *lock(&self.robot)));
        let jobs = lock(&self.jobs);
        let sender = jobs.as_ref().ok_or(DeskError::WorkerGone)?;
        sender.send(Job { feed: feed.clone(), provider_latency }).map_err(|_| DeskError::WorkerGone)?;
        registry.missions.insert(id.clone(), feed.clone());
        registry.active = Some(id);
        Ok(feed)
    }

    pub fn feed(&self, mission_id: &str) -> Option<Arc<MissionFeed>> {
        lock(&self.shared.registry).missions.get(mission_id).cloned()
    }

    /// Known mission ids in submission order.
    pub fn mission_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = lock(&self.shared.registry).missions.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn active(&self) -> Option<String> {
        lock(&self.shared.registry).active.clone()
    }

    /// Requests an abort and waits for the mission to settle. Terminal
    /// missions are left unchanged.
    pub fn abort(&self, mission_id: &str) -> Result<MissionPhase, DeskError> {
        let feed = self.feed(mission_id).ok_or_else(|| DeskError::UnknownMission(mission_id.to_owned()))?;
        if feed.is_terminal() {
            return Ok(feed.status().phase);
        }
        feed.request_abort();
        Ok(feed.wait_terminal(Duration::from_secs(5)).phase)
    }

    pub fn records(&self) -> Vec<MissionRecord> {
        lock(&self.shared.records).clone()
    }

    pub fn robot_state(&self) -> RobotState {
        *lock(&self.robot)
    }

    /// Stops accepting missions and waits for the worker to finish the
    /// current one.
    pub fn shutdown(&self) {
        lock(&self.jobs).take();
        if let Some(handle) = lock(&self.worker).take() {
            let _ = handle.join();
        }
    }
}

impl Drop for MissionDesk {
    fn drop(&mut self) {
        if let Some(active) = self.active() {
            if let Some(feed) = self.feed(&active) {
                feed.request_abort();
            }
        }
        self.shutdown();
    }
}

struct FeedHooks<'a> {
    feed: &'a MissionFeed,
    robot: &'a Mutex<RobotState>,
    pace: f64,
    wall_start: Instant,
    sim_start: f64,
}

impl MissionHooks for FeedHooks<'_> {
    fn on_event(&mut self, event: &SimEvent) {
        if let EventBody::PoseUpdate { x, y, heading } = event.body {
            let mut pose = self.feed.status().current_pose;
            pose.x = x;
            pose.y = y;
            pose.heading = heading;
            pose.sim_time = event.sim_time;
            self.feed.update_pose(pose);
            *lock(self.robot) = pose;
        }
        self.feed.push(Frame::Event(event.clone()));
    }

    fn on_status(&mut self, status: &MissionStatus) {
        *lock(self.robot) = status.current_pose;
        // The terminal frame is published by the worker once the desk is free.
        if !status.phase.is_terminal() && status.phase != MissionPhase::Pending {
            self.feed.push(Frame::Status(status.clone()));
        }
    }

    fn should_abort(&mut self, sim_time: f64) -> bool {
        if self.pace > 0.0 {
            let due = self.wall_start + Duration::from_secs_f64(((sim_time - self.sim_start) / self.pace).max(0.0));
            let slice = Duration::from_secs_f64(TICK / 2.0);
            loop {
                if self.feed.abort_requested() {
                    return true;
                }
                let now = Instant::now();
                if now >= due {
                    break;
                }
                thread::sleep((due - now).min(slice));
            }
        }
        self.feed.abort_requested()
    }
}

fn worker_loop(mut sim: Simulator, config: DeskConfig, shared: Arc<DeskShared>, robot: Arc<Mutex<RobotState>>, jobs: mpsc::Receiver<Job>) {
    for job in jobs {
        let feed = job.feed;
        let spec = MissionSpec {
            mission_id: feed.mission_id.clone(),
            outcome_id: feed.outcome_id.clone(),
            scenario_tag: feed.scenario_tag,
            plan: feed.plan.clone(),
            policy: config.policy,
            provider_latency: job.provider_latency,
        };
        let mut hooks = FeedHooks { feed: &feed, robot: &robot, pace: config.pace, wall_start: Instant::now(), sim_start: sim.state().sim_time };
        let record = run_mission(&mut sim, &spec, &mut hooks);
        *lock(&robot) = sim.state();

        let terminal = MissionStatus {
            mission_id: record.mission_id.clone(),
            phase: record.phase.clone(),
            started_at: record.started_at,
            finished_at: Some(record.finished_at),
            current_pose: sim.state(),
        };
        if let Some(log) = &shared.log {
            if let Err(err) = log.append(&record) {
                tracing::warn!(path = %log.path().display(), %err, "could not append mission record");
            }
        }
        lock(&shared.records).push(record);
        {
            let mut registry = lock(&shared.registry);
            if registry.active.as_deref() == Some(feed.mission_id()) {
                registry.active = None;
            }
        }
        feed.push(Frame::Status(terminal));
    }
}
