//! Deterministic stand-in for the robot's navigation stack.
//!
//! Paths are planned with A* on the 8-connected occupancy grid (unit
//! orthogonal steps, √2 diagonals, no corner cutting, octile heuristic). Path
//! costs are kept exactly as `straight + diagonal·√2` integer pairs, so ties
//! and comparisons never depend on floating-point rounding.
//!
//! Execution advances in fixed 0.1 s ticks at a constant cruise speed,
//! independent of wall-clock time. Faults (blocked areas, failed arrivals)
//! are injected up front and replay identically for a given seed.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan_schema::ActionCommand;
use crate::waypoint_world::{neighbors, Cell, OccupancyGrid, Passable, Step, Waypoint, WaypointWorld};

/// Simulation step in seconds.
pub const TICK: f64 = 0.1;
pub const DEFAULT_CRUISE_SPEED: f64 = 0.8;

const EPS: f64 = 1e-9;

/// Exact path cost `straight + diagonal·√2`, in cells.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OctileCost {
    pub straight: u64,
    pub diagonal: u64,
}

impl OctileCost {
    pub const ZERO: OctileCost = OctileCost { straight: 0, diagonal: 0 };

    /// Shortest 8-connected distance between two cells on an empty grid.
    pub fn octile(a: Cell, b: Cell) -> Self {
        let dx = a.col.abs_diff(b.col) as u64;
        let dy = a.row.abs_diff(b.row) as u64;
        OctileCost { straight: dx.max(dy) - dx.min(dy), diagonal: dx.min(dy) }
    }

    pub fn value(self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * SQRT_2
    }

    fn step(self, step: Step) -> Self {
        match step {
            Step::Straight => OctileCost { straight: self.straight + 1, ..self },
            Step::Diagonal => OctileCost { diagonal: self.diagonal + 1, ..self },
        }
    }

    fn plus(self, other: OctileCost) -> Self {
        OctileCost { straight: self.straight + other.straight, diagonal: self.diagonal + other.diagonal }
    }
}

impl Ord for OctileCost {
    /// Compares `a1 + b1·√2` with `a2 + b2·√2` without floating point.
    fn cmp(&self, other: &Self) -> Ordering {
        let da = self.straight as i128 - other.straight as i128;
        let db = other.diagonal as i128 - self.diagonal as i128;
        // sign of da - db·√2
        match (da.signum(), db.signum()) {
            (0, 0) => Ordering::Equal,
            (a, b) if a >= 0 && b <= 0 => Ordering::Greater,
            (a, b) if a <= 0 && b >= 0 => Ordering::Less,
            (1, 1) => (da * da).cmp(&(2 * db * db)),
            _ => (2 * db * db).cmp(&(da * da)),
        }
    }
}

impl PartialOrd for OctileCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over any passable grid. Returns the cell path (start and goal
/// included) and its exact cost. Among equal-f entries the one with the
/// smaller heuristic, then the smaller row-major index, is expanded first.
pub fn astar<G: Passable + ?Sized>(grid: &G, start: Cell, goal: Cell) -> Option<(Vec<Cell>, OctileCost)> {
    if !grid.is_free(start) || !grid.is_free(goal) {
        return None;
    }
    let n = grid.width() * grid.height();
    let mut best: Vec<Option<OctileCost>> = vec![None; n];
    let mut parent: Vec<usize> = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();

    let start_idx = grid.index(start);
    let goal_idx = grid.index(goal);
    best[start_idx] = Some(OctileCost::ZERO);
    let h0 = OctileCost::octile(start, goal);
    open.push(Reverse((h0, h0, start_idx, start)));

    while let Some(Reverse((_, _, idx, cell))) = open.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        let g = best[idx].expect("queued cells have a cost");
        if idx == goal_idx {
            let mut path = vec![cell];
            let mut cursor = idx;
            while parent[cursor] != usize::MAX {
                cursor = parent[cursor];
                path.push(Cell { col: cursor % grid.width(), row: cursor / grid.width() });
            }
            path.reverse();
            return Some((path, g));
        }
        for (next, step) in neighbors(grid, cell) {
            let next_idx = grid.index(next);
            if closed[next_idx] {
                continue;
            }
            let candidate = g.step(step);
            if best[next_idx].is_none_or(|known| candidate < known) {
                best[next_idx] = Some(candidate);
                parent[next_idx] = idx;
                let h = OctileCost::octile(next, goal);
                open.push(Reverse((candidate.plus(h), h, next_idx, next)));
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPath {
    pub cells: Vec<Cell>,
    pub cost: OctileCost,
    /// Meters.
    pub length: f64,
    pub goal_waypoint: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("start ({x:.2}, {y:.2}) is outside the grid or on an occupied cell")]
    BadStart { x: f64, y: f64 },
    #[error("no path to `{0}`")]
    Unreachable(String),
}

/// Plans on the world's static grid.
pub fn plan_path(world: &WaypointWorld, start: (f64, f64), goal: &Waypoint) -> Result<PlannedPath, PlanError> {
    plan_on(world.grid(), world.grid(), start, goal)
}

fn plan_on<G: Passable + ?Sized>(grid: &G, geometry: &OccupancyGrid, start: (f64, f64), goal: &Waypoint) -> Result<PlannedPath, PlanError> {
    let start_cell = geometry
        .cell_of(start.0, start.1)
        .filter(|c| grid.is_free(*c))
        .ok_or(PlanError::BadStart { x: start.0, y: start.1 })?;
    let goal_cell = geometry.cell_of(goal.pose.x, goal.pose.y).ok_or_else(|| PlanError::Unreachable(goal.name.clone()))?;
    let (cells, cost) = astar(grid, start_cell, goal_cell).ok_or_else(|| PlanError::Unreachable(goal.name.clone()))?;
    Ok(PlannedPath { cells, cost, length: cost.value() * geometry.resolution(), goal_waypoint: goal.name.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    /// Radians, direction of travel.
    pub heading: f64,
    /// Cruise speed, m/s.
    pub speed: f64,
    pub sim_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    PathPlanned { waypoint: String, length: f64, cells: usize },
    PoseUpdate { x: f64, y: f64, heading: f64 },
    WaypointReached { waypoint: String },
    WaitStarted { duration: f64 },
    WaitFinished { duration: f64 },
    ExploreVisited { zone: String, waypoint: String },
    Halted { x: f64, y: f64 },
    PlanFailed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        waypoint: Option<String>,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub sim_time: f64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SimEvent {
    pub fn kind(&self) -> &'static str {
        match self.body {
            EventBody::PathPlanned { .. } => "path_planned",
            EventBody::PoseUpdate { .. } => "pose_update",
            EventBody::WaypointReached { .. } => "waypoint_reached",
            EventBody::WaitStarted { .. } => "wait_started",
            EventBody::WaitFinished { .. } => "wait_finished",
            EventBody::ExploreVisited { .. } => "explore_visited",
            EventBody::Halted { .. } => "halted",
            EventBody::PlanFailed { .. } => "plan_failed",
        }
    }
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:8.1}] {}", self.sim_time, self.kind())
    }
}

/// A fault to reproduce execution failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultSpec {
    /// Occupy every cell within `radius` meters of a waypoint once the
    /// simulation clock reaches `at_time`.
    BlockNear {
        waypoint: String,
        radius: f64,
        #[serde(default)]
        at_time: f64,
    },
    /// Each arrival (optionally only at `waypoint`) fails with `probability`,
    /// drawn from the simulator's seeded RNG.
    ArrivalFailure {
        probability: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        waypoint: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("fault names unknown waypoint `{0}`")]
    UnknownWaypoint(String),
    #[error("invalid fault: {0}")]
    InvalidFault(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Receives events as they happen. `on_tick` runs after every simulated
/// tick and may interrupt the running action.
pub trait SimObserver {
    fn on_event(&mut self, event: &SimEvent);

    fn on_tick(&mut self, _sim_time: f64) -> Flow {
        Flow::Continue
    }
}

impl SimObserver for Vec<SimEvent> {
    fn on_event(&mut self, event: &SimEvent) {
        self.push(event.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionOutcome {
    Completed,
    Failed(String),
    Halted,
    /// The observer asked to stop.
    Interrupted,
}

#[derive(Debug, Clone)]
struct PendingBlock {
    at_time: f64,
    cells: Vec<usize>,
}

/// Occupancy grid plus runtime blocks.
struct LiveGrid<'a> {
    base: &'a OccupancyGrid,
    blocked: &'a [bool],
}

impl Passable for LiveGrid<'_> {
    fn width(&self) -> usize {
        self.base.width()
    }
    fn height(&self) -> usize {
        self.base.height()
    }
    fn is_free(&self, cell: Cell) -> bool {
        self.base.is_free(cell) && !self.blocked[self.index(cell)]
    }
}

pub struct Simulator {
    world: Arc<WaypointWorld>,
    state: RobotState,
    faults: Vec<FaultSpec>,
    pending: Vec<PendingBlock>,
    blocked: Vec<bool>,
    rng: ChaCha8Rng,
}

impl Simulator {
    /// Robot at home, clock at zero, seed 0.
    pub fn new(world: Arc<WaypointWorld>, speed: f64) -> Self {
        let home = world.home().pose;
        let cells = world.grid().width() * world.grid().height();
        Simulator {
            state: RobotState { x: home.x, y: home.y, heading: home.yaw, speed, sim_time: 0.0 },
            world,
            faults: Vec::new(),
            pending: Vec::new(),
            blocked: vec![false; cells],
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn world(&self) -> &Arc<WaypointWorld> {
        &self.world
    }

    pub fn state(&self) -> RobotState {
        self.state
    }

    /// Places the robot; the position must be on a free cell.
    pub fn set_state(&mut self, state: RobotState) -> Result<(), PlanError> {
        match self.world.grid().cell_of(state.x, state.y) {
            Some(cell) if self.live().is_free(cell) => {
                self.state = state;
                Ok(())
            }
            _ => Err(PlanError::BadStart { x: state.x, y: state.y }),
        }
    }

    /// Back to home at time zero with all faults re-armed and the RNG
    /// reseeded.
    pub fn reset(&mut self, seed: u64) {
        let home = self.world.home().pose;
        self.state = RobotState { x: home.x, y: home.y, heading: home.yaw, speed: self.state.speed, sim_time: 0.0 };
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.blocked.iter_mut().for_each(|b| *b = false);
        self.pending.clear();
        for fault in self.faults.clone() {
            self.arm(&fault);
        }
    }

    pub fn faults(&self) -> &[FaultSpec] {
        &self.faults
    }

    pub fn inject_fault(&mut self, spec: FaultSpec) -> Result<(), SimError> {
        match &spec {
            FaultSpec::BlockNear { waypoint, radius, at_time } => {
                if self.world.waypoint(waypoint).is_none() {
                    return Err(SimError::UnknownWaypoint(waypoint.clone()));
                }
                if !(radius.is_finite() && *radius >= 0.0 && at_time.is_finite()) {
                    return Err(SimError::InvalidFault(format!("block radius {radius} / time {at_time}")));
                }
            }
            FaultSpec::ArrivalFailure { probability, waypoint } => {
                if !(0.0..=1.0).contains(probability) {
                    return Err(SimError::InvalidFault(format!("probability {probability} outside [0, 1]")));
                }
                if let Some(name) = waypoint {
                    if self.world.waypoint(name).is_none() {
                        return Err(SimError::UnknownWaypoint(name.clone()));
                    }
                }
            }
        }
        self.arm(&spec);
        self.faults.push(spec);
        Ok(())
    }

    fn arm(&mut self, spec: &FaultSpec) {
        if let FaultSpec::BlockNear { waypoint, radius, at_time } = spec {
            let grid = self.world.grid();
            let center = self.world.waypoint(waypoint).expect("validated").pose;
            let reach = (radius / grid.resolution()).ceil() as isize + 1;
            let Some(mid) = grid.cell_of(center.x, center.y) else { return };
            let mut cells = Vec::new();
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (Some(col), Some(row)) = (mid.col.checked_add_signed(dc), mid.row.checked_add_signed(dr)) else {
                        continue;
                    };
                    if col >= grid.width() || row >= grid.height() {
                        continue;
                    }
                    let cell = Cell { col, row };
                    let (cx, cy) = grid.center(cell);
                    if (cx - center.x).hypot(cy - center.y) <= radius + EPS {
                        cells.push(grid.index(cell));
                    }
                }
            }
            self.pending.push(PendingBlock { at_time: *at_time, cells });
            self.activate_due_blocks();
        }
    }

    fn activate_due_blocks(&mut self) {
        let now = self.state.sim_time;
        let robot = self.world.grid().cell_of(self.state.x, self.state.y).map(|c| self.world.grid().index(c));
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].at_time <= now + EPS {
                let block = self.pending.swap_remove(i);
                for idx in block.cells {
                    // Never block the robot's own cell.
                    if Some(idx) != robot {
                        self.blocked[idx] = true;
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    fn live(&self) -> LiveGrid<'_> {
        LiveGrid { base: self.world.grid(), blocked: &self.blocked }
    }

    /// True when the robot's current cell is free in the live grid.
    pub fn pose_is_free(&self) -> bool {
        self.world.grid().cell_of(self.state.x, self.state.y).is_some_and(|c| self.live().is_free(c))
    }

    pub fn is_free_at(&self, x: f64, y: f64) -> bool {
        self.world.grid().cell_of(x, y).is_some_and(|c| self.live().is_free(c))
    }

    /// Plans from the current pose on the live grid.
    pub fn plan_to(&self, goal: &Waypoint) -> Result<PlannedPath, PlanError> {
        plan_on(&self.live(), self.world.grid(), (self.state.x, self.state.y), goal)
    }

    pub fn execute_action(&mut self, action: &ActionCommand, observer: &mut dyn SimObserver) -> ActionOutcome {
        self.activate_due_blocks();
        match action {
            ActionCommand::Goto { waypoint } => self.goto(waypoint, observer, true),
            ActionCommand::Wait { duration } => self.wait(*duration, observer),
            ActionCommand::Explore { zone } => self.explore(zone, observer),
            ActionCommand::Halt {} => {
                self.emit(observer, EventBody::Halted { x: self.state.x, y: self.state.y });
                ActionOutcome::Halted
            }
        }
    }

    fn emit(&self, observer: &mut dyn SimObserver, body: EventBody) {
        observer.on_event(&SimEvent { sim_time: self.state.sim_time, body });
    }

    fn fail(&self, observer: &mut dyn SimObserver, waypoint: Option<&str>, reason: String) -> ActionOutcome {
        self.emit(observer, EventBody::PlanFailed { waypoint: waypoint.map(str::to_owned), reason: reason.clone() });
        ActionOutcome::Failed(reason)
    }

    fn goto(&mut self, name: &str, observer: &mut dyn SimObserver, report_arrival: bool) -> ActionOutcome {
        let Some(goal) = self.world.waypoint(name).cloned() else {
            return self.fail(observer, Some(name), format!("unknown waypoint `{name}`"));
        };
        let mut replans_left = 1;
        let mut path = match self.plan_to(&goal) {
            Ok(p) => p,
            Err(err) => return self.fail(observer, Some(name), err.to_string()),
        };

        'traverse: loop {
            self.emit(observer, EventBody::PathPlanned { waypoint: name.to_owned(), length: path.length, cells: path.cells.len() });
            let route = Route::new(self.world.grid(), (self.state.x, self.state.y), &path.cells);
            let step = self.state.speed * TICK;
            let t0 = self.state.sim_time;
            let mut ticks = 0u64;
            let mut travelled = 0.0;
            while travelled < route.total - EPS {
                if step <= 0.0 {
                    return self.fail(observer, Some(name), "cruise speed is zero".into());
                }
                self.activate_due_blocks();
                if route.blocked_ahead(&self.live(), travelled) {
                    if replans_left == 0 {
                        return self.fail(observer, Some(name), "path blocked after replanning".into());
                    }
                    replans_left -= 1;
                    match self.plan_to(&goal) {
                        Ok(p) => {
                            path = p;
                            continue 'traverse;
                        }
                        Err(err) => return self.fail(observer, Some(name), format!("replan failed: {err}")),
                    }
                }
                ticks += 1;
                travelled = (ticks as f64 * step).min(route.total);
                let (x, y, heading) = route.sample(travelled);
                self.state.x = x;
                self.state.y = y;
                self.state.heading = heading;
                self.state.sim_time = t0 + ticks as f64 * TICK;
                self.emit(observer, EventBody::PoseUpdate { x, y, heading });
                if observer.on_tick(self.state.sim_time) == Flow::Stop {
                    return ActionOutcome::Interrupted;
                }
            }
            break;
        }

        if self.arrival_fails(name) {
            return self.fail(observer, Some(name), "arrival failure".into());
        }
        if report_arrival {
            self.emit(observer, EventBody::WaypointReached { waypoint: name.to_owned() });
        }
        ActionOutcome::Completed
    }

    fn arrival_fails(&mut self, name: &str) -> bool {
        let mut failed = false;
        for fault in &self.faults {
            if let FaultSpec::ArrivalFailure { probability, waypoint } = fault {
                if waypoint.as_deref().is_none_or(|w| w == name) {
                    // Always draw, so the RNG stream does not depend on earlier outcomes.
                    failed |= self.rng.gen::<f64>() < *probability;
                }
            }
        }
        failed
    }

    fn wait(&mut self, duration: f64, observer: &mut dyn SimObserver) -> ActionOutcome {
        self.emit(observer, EventBody::WaitStarted { duration });
        let t0 = self.state.sim_time;
        let whole_ticks = ((duration + EPS) / TICK).floor() as u64;
        for k in 1..=whole_ticks {
            self.state.sim_time = t0 + k as f64 * TICK;
            self.activate_due_blocks();
            if observer.on_tick(self.state.sim_time) == Flow::Stop {
                return ActionOutcome::Interrupted;
            }
        }
        self.state.sim_time = t0 + duration;
        self.emit(observer, EventBody::WaitFinished { duration });
        ActionOutcome::Completed
    }

    fn explore(&mut self, zone: &str, observer: &mut dyn SimObserver) -> ActionOutcome {
        let Some(members) = self.world.zone(zone).map(|z| z.members.clone()) else {
            return self.fail(observer, None, format!("unknown zone `{zone}`"));
        };
        for member in members {
            match self.goto(&member, observer, false) {
                ActionOutcome::Completed => {
                    self.emit(observer, EventBody::ExploreVisited { zone: zone.to_owned(), waypoint: member });
                }
                other => return other,
            }
        }
        ActionOutcome::Completed
    }
}

/// Polyline through cell centres, starting at the robot's exact position.
struct Route {
    points: Vec<(f64, f64)>,
    /// `cell_at[i]` is the path cell that `points[i]` lies in.
    cells: Vec<Cell>,
    cumulative: Vec<f64>,
    total: f64,
}

impl Route {
    fn new(grid: &OccupancyGrid, start: (f64, f64), cells: &[Cell]) -> Self {
        let mut points = vec![start];
        let mut owners = vec![cells[0]];
        for (i, &cell) in cells.iter().enumerate() {
            let c = grid.center(cell);
            if i == 0 && (c.0 - start.0).abs() < EPS && (c.1 - start.1).abs() < EPS {
                continue;
            }
            points.push(c);
            owners.push(cell);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().expect("non-empty");
            cumulative.push(last + (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1));
        }
        let total = *cumulative.last().expect("non-empty");
        Route { points, cells: owners, cumulative, total }
    }

    fn segment(&self, distance: f64) -> usize {
        match self.cumulative.iter().position(|&c| c > distance + EPS) {
            Some(i) => i - 1,
            None => self.points.len().saturating_sub(2),
        }
    }

    fn sample(&self, distance: f64) -> (f64, f64, f64) {
        if self.points.len() == 1 {
            return (self.points[0].0, self.points[0].1, 0.0);
        }
        let i = self.segment(distance);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 { ((distance - self.cumulative[i]) / seg).clamp(0.0, 1.0) } else { 1.0 };
        let heading = (b.1 - a.1).atan2(b.0 - a.0);
        if distance >= self.total - EPS {
            let last = *self.points.last().expect("non-empty");
            return (last.0, last.1, heading);
        }
        (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t, heading)
    }

    fn blocked_ahead<G: Passable>(&self, grid: &G, travelled: f64) -> bool {
        let from = if self.points.len() == 1 { 0 } else { self.segment(travelled) + 1 };
        self.cells[from.min(self.cells.len() - 1)..].iter().any(|c| !grid.is_free(*c))
    }
}

/// Runs one action from `state` on a fresh simulator and returns the new
/// state with every event emitted.
pub fn execute_action(state: RobotState, action: &ActionCommand, world: Arc<WaypointWorld>) -> (RobotState, Vec<SimEvent>) {
    let mut sim = Simulator::new(world, state.speed);
    sim.state = state;
    let mut events = Vec::new();
    sim.execute_action(action, &mut events);
    (sim.state, events)
}
