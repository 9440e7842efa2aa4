//! The semantic map: named waypoints with global poses, zone groupings and an
//! occupancy grid for path planning.
//!
//! Worlds are loaded from a single JSON document (see `docs/map-format.md`)
//! and fully checked at load: names are canonical and unique, zones and
//! waypoints reference each other consistently, every waypoint sits on a free
//! cell, and every waypoint is reachable from home. A loaded world is
//! immutable.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan_schema::canonicalize;

pub const MAP_FORMAT: &str = "quadnav-map/1";

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("cannot read map file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("map syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("map integrity error in {entity}: {detail}")]
    Integrity { entity: String, detail: String },
}

fn integrity(entity: impl Into<String>, detail: impl Into<String>) -> WorldError {
    WorldError::Integrity { entity: entity.into(), detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub name: String,
    pub display_name: String,
    pub zone: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_id: Option<String>,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_id: Option<String>,
    pub members: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub x: f64,
    pub y: f64,
}

/// Grid section of the map file. Rows run from the bottom (`y = origin.y`)
/// upward; each row is run-length encoded as `<count><.|#>` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub origin: Origin,
    pub rows: Vec<String>,
}

/// The map file as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub format: String,
    pub name: String,
    #[serde(default = "default_frame")]
    pub frame: String,
    pub home: String,
    pub zones: Vec<Zone>,
    pub waypoints: Vec<Waypoint>,
    pub grid: GridDocument,
}

fn default_frame() -> String {
    "map".into()
}

/// Grid cell address: `col` along x, `row` along y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.col, self.row)
    }
}

/// Anything the planner can search over.
pub trait Passable {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn is_free(&self, cell: Cell) -> bool;

    fn index(&self, cell: Cell) -> usize {
        cell.row * self.width() + cell.col
    }
}

/// Orthogonal or diagonal grid step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Straight,
    Diagonal,
}

const MOVES: [(isize, isize); 8] = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)];

/// Free 8-connected neighbours of `cell`. A diagonal move is only allowed when
/// both orthogonal cells it passes between are free.
pub fn neighbors<G: Passable + ?Sized>(grid: &G, cell: Cell) -> impl Iterator<Item = (Cell, Step)> + '_ {
    let offset = move |dx: isize, dy: isize| -> Option<Cell> {
        let col = cell.col.checked_add_signed(dx)?;
        let row = cell.row.checked_add_signed(dy)?;
        (col < grid.width() && row < grid.height()).then_some(Cell { col, row })
    };
    MOVES.iter().filter_map(move |&(dx, dy)| {
        let next = offset(dx, dy)?;
        if !grid.is_free(next) {
            return None;
        }
        if dx != 0 && dy != 0 {
            let side_a = offset(dx, 0)?;
            let side_b = offset(0, dy)?;
            if !grid.is_free(side_a) || !grid.is_free(side_b) {
                return None;
            }
            Some((next, Step::Diagonal))
        } else {
            Some((next, Step::Straight))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    resolution: f64,
    width: usize,
    height: usize,
    origin: Origin,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// `occupied` is row-major from the bottom row.
    pub fn new(resolution: f64, width: usize, height: usize, origin: Origin, occupied: Vec<bool>) -> Result<Self, WorldError> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(integrity("grid", format!("resolution must be > 0, got {resolution}")));
        }
        if width == 0 || height == 0 {
            return Err(integrity("grid", "width and height must be positive"));
        }
        if occupied.len() != width * height {
            return Err(integrity("grid", format!("{} cells for a {width}x{height} grid", occupied.len())));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(integrity("grid", "origin must be finite"));
        }
        Ok(OccupancyGrid { resolution, width, height, origin, occupied })
    }

    fn from_document(doc: &GridDocument) -> Result<Self, WorldError> {
        if doc.rows.len() != doc.height {
            return Err(integrity("grid", format!("{} rows for height {}", doc.rows.len(), doc.height)));
        }
        let mut occupied = Vec::with_capacity(doc.width * doc.height);
        for (row, encoded) in doc.rows.iter().enumerate() {
            let before = occupied.len();
            decode_row(encoded, &mut occupied).map_err(|detail| integrity(format!("grid row {row}"), detail))?;
            if occupied.len() - before != doc.width {
                return Err(integrity(format!("grid row {row}"), format!("decodes to {} cells, expected {}", occupied.len() - before, doc.width)));
            }
        }
        OccupancyGrid::new(doc.resolution, doc.width, doc.height, doc.origin, occupied)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        let fx = ((x - self.origin.x) / self.resolution).floor();
        let fy = ((y - self.origin.y) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some(Cell { col: fx as usize, row: fy as usize })
    }

    pub fn center(&self, cell: Cell) -> (f64, f64) {
        (
            self.origin.x + (cell.col as f64 + 0.5) * self.resolution,
            self.origin.y + (cell.row as f64 + 0.5) * self.resolution,
        )
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell { col: index % self.width, row: index / self.width }
    }

    pub fn free_cell_count(&self) -> usize {
        self.occupied.iter().filter(|o| !**o).count()
    }
}

impl Passable for OccupancyGrid {
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn is_free(&self, cell: Cell) -> bool {
        cell.col < self.width && cell.row < self.height && !self.occupied[cell.row * self.width + cell.col]
    }
}

fn decode_row(encoded: &str, out: &mut Vec<bool>) -> Result<(), String> {
    let mut count = String::new();
    for ch in encoded.chars() {
        match ch {
            '0'..='9' => count.push(ch),
            '.' | '#' => {
                let n: usize = count.parse().map_err(|_| format!("run for `{ch}` has no count"))?;
                out.extend(std::iter::repeat_n(ch == '#', n));
                count.clear();
            }
            other => return Err(format!("unexpected character `{other}` (runs are <count>. or <count>#)")),
        }
    }
    if count.is_empty() {
        Ok(())
    } else {
        Err(format!("trailing count `{count}` without a cell marker"))
    }
}

/// Cells reachable from `start` under the planner's connectivity rule.
pub fn reachable_from<G: Passable + ?Sized>(grid: &G, start: Cell) -> Vec<bool> {
    let mut seen = vec![false; grid.width() * grid.height()];
    if !grid.is_free(start) {
        return seen;
    }
    let mut queue = VecDeque::from([start]);
    seen[grid.index(start)] = true;
    while let Some(cell) = queue.pop_front() {
        for (next, _) in neighbors(grid, cell) {
            let idx = grid.index(next);
            if !seen[idx] {
                seen[idx] = true;
                queue.push_back(next);
            }
        }
    }
    seen
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub name: String,
    pub display_name: String,
    pub zone: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no waypoint named `{name}`{}", suggestion.as_ref().map(|s| format!(" (nearest: `{s}`)")).unwrap_or_default())]
pub struct NotFound {
    pub name: String,
    pub suggestion: Option<String>,
}

#[derive(Debug, Clone)]
pub struct WaypointWorld {
    name: String,
    home: String,
    waypoints: BTreeMap<String, Waypoint>,
    zones: BTreeMap<String, Zone>,
    grid: OccupancyGrid,
    document: MapDocument,
}

/// Reads and validates a map file.
pub fn load_world(path: impl AsRef<Path>) -> Result<WaypointWorld, WorldError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io { path: path.to_owned(), source })?;
    WaypointWorld::from_json_str(&text)
}

impl WaypointWorld {
    pub fn from_json_str(text: &str) -> Result<Self, WorldError> {
        let doc: MapDocument = serde_json::from_str(text)
            .map_err(|e| WorldError::Syntax { line: e.line(), column: e.column(), message: e.to_string() })?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: MapDocument) -> Result<Self, WorldError> {
        if doc.format != MAP_FORMAT {
            return Err(integrity("format", format!("expected `{MAP_FORMAT}`, found `{}`", doc.format)));
        }
        let grid = OccupancyGrid::from_document(&doc.grid)?;
        if doc.waypoints.is_empty() {
            return Err(integrity("waypoints", "a world needs at least one waypoint (the home position)"));
        }

        let mut zones = BTreeMap::new();
        for zone in &doc.zones {
            check_name("zone", &zone.name)?;
            if zones.insert(zone.name.clone(), zone.clone()).is_some() {
                return Err(integrity(format!("zone `{}`", zone.name), "duplicate zone name"));
            }
        }

        let mut waypoints = BTreeMap::new();
        for wp in &doc.waypoints {
            let entity = format!("waypoint `{}`", wp.name);
            check_name("waypoint", &wp.name)?;
            let p = wp.pose;
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.yaw.is_finite()) {
                return Err(integrity(entity, "pose coordinates must be finite"));
            }
            let Some(cell) = grid.cell_of(p.x, p.y) else {
                return Err(integrity(entity, format!("({}, {}) lies outside the grid", p.x, p.y)));
            };
            if !grid.is_free(cell) {
                return Err(integrity(entity, format!("sits on occupied cell {cell}")));
            }
            match zones.get(&wp.zone) {
                None => return Err(integrity(entity, format!("zone `{}` does not exist", wp.zone))),
                Some(z) if !z.members.contains(&wp.name) => {
                    return Err(integrity(entity, format!("not listed as a member of zone `{}`", wp.zone)))
                }
                Some(_) => {}
            }
            if waypoints.insert(wp.name.clone(), wp.clone()).is_some() {
                return Err(integrity(entity, "duplicate waypoint name"));
            }
        }

        for zone in zones.values() {
            for member in &zone.members {
                match waypoints.get(member) {
                    None => return Err(integrity(format!("zone `{}`", zone.name), format!("member `{member}` is not a waypoint"))),
                    Some(wp) if wp.zone != zone.name => {
                        return Err(integrity(
                            format!("zone `{}`", zone.name),
                            format!("member `{member}` declares zone `{}`", wp.zone),
                        ))
                    }
                    Some(_) => {}
                }
            }
        }

        let Some(home) = waypoints.get(&doc.home) else {
            return Err(integrity("home", format!("home waypoint `{}` does not exist", doc.home)));
        };
        let home_cell = grid.cell_of(home.pose.x, home.pose.y).expect("checked above");
        let reach = reachable_from(&grid, home_cell);
        for wp in waypoints.values() {
            let cell = grid.cell_of(wp.pose.x, wp.pose.y).expect("checked above");
            if !reach[grid.index(cell)] {
                return Err(integrity(format!("waypoint `{}`", wp.name), "not reachable from home"));
            }
        }

        Ok(WaypointWorld { name: doc.name.clone(), home: doc.home.clone(), waypoints, zones, grid, document: doc })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn home(&self) -> &Waypoint {
        &self.waypoints[&self.home]
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn document(&self) -> &MapDocument {
        &self.document
    }

    /// Exact lookup by canonical name.
    pub fn waypoint(&self, name: &str) -> Option<&Waypoint> {
        self.waypoints.get(name)
    }

    pub fn zone(&self, name: &str) -> Option<&Zone> {
        self.zones.get(name)
    }

    pub fn waypoints(&self) -> impl Iterator<Item = &Waypoint> {
        self.waypoints.values()
    }

    pub fn zones(&self) -> impl Iterator<Item = &Zone> {
        self.zones.values()
    }

    /// Canonicalizes `name` then matches exactly.
    pub fn lookup(&self, name: &str) -> Result<&Waypoint, NotFound> {
        let canonical = canonicalize(name);
        self.waypoints.get(&canonical).ok_or_else(|| NotFound {
            suggestion: self.nearest_waypoint_name(&canonical),
            name: canonical,
        })
    }

    pub fn nearest_waypoint_name(&self, name: &str) -> Option<String> {
        nearest(name, self.waypoints.keys())
    }

    pub fn nearest_zone_name(&self, name: &str) -> Option<String> {
        nearest(name, self.zones.keys())
    }

    /// Sorted by name; stable for a given file.
    pub fn vocabulary(&self) -> Vec<VocabularyEntry> {
        self.waypoints
            .values()
            .map(|w| VocabularyEntry { name: w.name.clone(), display_name: w.display_name.clone(), zone: w.zone.clone() })
            .collect()
    }

    pub fn cell_of_waypoint(&self, wp: &Waypoint) -> Cell {
        self.grid.cell_of(wp.pose.x, wp.pose.y).expect("waypoints are inside the grid")
    }
}

/// Closest candidate by Levenshtein distance; ties go to the alphabetically
/// first name.
fn nearest<'a>(name: &str, candidates: impl Iterator<Item = &'a String>) -> Option<String> {
    let name = canonicalize(name);
    candidates.min_by_key(|c| (strsim::levenshtein(&name, c), c.as_str())).cloned()
}

fn check_name(kind: &str, name: &str) -> Result<(), WorldError> {
    if name.is_empty() || canonicalize(name) != name {
        return Err(integrity(format!("{kind} `{name}`"), "names must be non-empty, lowercase, with underscores instead of spaces"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_doc() -> MapDocument {
        MapDocument {
            format: MAP_FORMAT.into(),
            name: "tiny".into(),
            frame: "map".into(),
            home: "home".into(),
            zones: vec![Zone {
                name: "room".into(),
                display_name: "Room".into(),
                table_id: None,
                members: ["home".to_string()].into(),
            }],
            waypoints: vec![Waypoint {
                name: "home".into(),
                display_name: "Home".into(),
                zone: "room".into(),
                table_id: None,
                pose: Pose { x: 0.05, y: 0.05, z: 0.0, yaw: 0.0 },
            }],
            grid: GridDocument {
                resolution: 0.1,
                width: 5,
                height: 3,
                origin: Origin { x: 0.0, y: 0.0 },
                rows: vec!["5.".into(), "1.1#3.".into(), "5#".into()],
            },
        }
    }

    #[test]
    fn decodes_rle_rows() {
        let mut cells = Vec::new();
        decode_row("2#3.1#", &mut cells).unwrap();
        assert_eq!(cells, vec![true, true, false, false, false, true]);
        assert!(decode_row("#", &mut Vec::new()).is_err());
        assert!(decode_row("3.x", &mut Vec::new()).is_err());
        assert!(decode_row("3.4", &mut Vec::new()).is_err());
    }

    #[test]
    fn single_waypoint_world() {
        let world = WaypointWorld::from_document(tiny_doc()).unwrap();
        assert_eq!(world.vocabulary().len(), 1);
        assert_eq!(world.home().name, "home");
        assert!(!world.grid().is_free(Cell { col: 1, row: 1 }));
        assert!(world.grid().is_free(Cell { col: 4, row: 0 }));
    }

    #[test]
    fn rejects_waypoint_on_occupied_cell() {
        let mut doc = tiny_doc();
        doc.waypoints[0].pose.x = 0.15; // col 1
        doc.waypoints[0].pose.y = 0.25; // row 2 is a wall
        let err = WaypointWorld::from_document(doc).unwrap_err();
        assert!(matches!(&err, WorldError::Integrity { entity, .. } if entity.contains("home")), "{err}");
    }

    #[test]
    fn rejects_empty_world() {
        let mut doc = tiny_doc();
        doc.waypoints.clear();
        doc.zones[0].members.clear();
        assert!(matches!(WaypointWorld::from_document(doc), Err(WorldError::Integrity { .. })));
    }

    #[test]
    fn rejects_dangling_zone_member_and_duplicates() {
        let mut doc = tiny_doc();
        doc.zones[0].members.insert("ghost".into());
        let err = WaypointWorld::from_document(doc).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");

        let mut doc = tiny_doc();
        let dup = doc.waypoints[0].clone();
        doc.waypoints.push(dup);
        let err = WaypointWorld::from_document(doc).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn rejects_unreachable_waypoint() {
        let mut doc = tiny_doc();
        // Wall off the right side completely.
        doc.grid.rows = vec!["2.1#2.".into(), "2.1#2.".into(), "2.1#2.".into()];
        doc.waypoints.push(Waypoint {
            name: "island".into(),
            display_name: "Island".into(),
            zone: "room".into(),
            table_id: None,
            pose: Pose { x: 0.45, y: 0.05, z: 0.0, yaw: 0.0 },
        });
        doc.zones[0].members.insert("island".into());
        let err = WaypointWorld::from_document(doc).unwrap_err().to_string();
        assert!(err.contains("island") && err.contains("reachable"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line() {
        match WaypointWorld::from_json_str("{\n  \"format\": \n}") {
            Err(WorldError::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn no_corner_cutting() {
        // . #
        // # .   diagonal between the two free cells is blocked
        let grid = OccupancyGrid::new(1.0, 2, 2, Origin { x: 0.0, y: 0.0 }, vec![false, true, true, false]).unwrap();
        assert_eq!(neighbors(&grid, Cell { col: 0, row: 0 }).count(), 0);
        let open = OccupancyGrid::new(1.0, 2, 2, Origin { x: 0.0, y: 0.0 }, vec![false; 4]).unwrap();
        assert_eq!(neighbors(&open, Cell { col: 0, row: 0 }).count(), 3);
    }
}
