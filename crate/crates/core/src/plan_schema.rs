//! Movement-plan data model and the strict JSON action format.
//!
//! Model output is accepted in two wrappings, `{"response":{"actions":[...]}}`
//! and the bare `{"actions":[...]}`. Canonical output is always the bare form
//! with `command` before `parameters` and no insignificant whitespace.
//!
//! Parsing is all-or-nothing: any unknown command or bad parameter fails the
//! whole document, and every offending action is reported.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::waypoint_world::WaypointWorld;

/// One action primitive of a movement plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "parameters", rename_all = "snake_case")]
pub enum ActionCommand {
    /// Drive to a named waypoint.
    Goto { waypoint: String },
    /// Stand still for `duration` seconds.
    Wait { duration: f64 },
    /// Visit every waypoint of a zone.
    Explore { zone: String },
    /// Stop and end the mission.
    Halt {},
}

impl ActionCommand {
    pub fn goto(waypoint: impl Into<String>) -> Self {
        ActionCommand::Goto { waypoint: waypoint.into() }
    }

    pub fn command_name(&self) -> &'static str {
        match self {
            ActionCommand::Goto { .. } => "goto",
            ActionCommand::Wait { .. } => "wait",
            ActionCommand::Explore { .. } => "explore",
            ActionCommand::Halt {} => "halt",
        }
    }
}

impl fmt::Display for ActionCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionCommand::Goto { waypoint } => write!(f, "goto {waypoint}"),
            ActionCommand::Wait { duration } => write!(f, "wait {duration}s"),
            ActionCommand::Explore { zone } => write!(f, "explore {zone}"),
            ActionCommand::Halt {} => f.write_str("halt"),
        }
    }
}

/// An ordered list of actions together with the text it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementPlan {
    pub plan_id: String,
    pub source_text: String,
    pub raw_model_output: String,
    pub actions: Vec<ActionCommand>,
}

impl MovementPlan {
    pub fn from_actions(actions: Vec<ActionCommand>) -> Self {
        MovementPlan { plan_id: String::new(), source_text: String::new(), raw_model_output: String::new(), actions }
    }

    pub fn goto_targets(&self) -> impl Iterator<Item = &str> {
        self.actions.iter().filter_map(|a| match a {
            ActionCommand::Goto { waypoint } => Some(waypoint.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    MalformedJson,
    MissingActionsArray,
    UnknownCommand,
    BadParameter,
    UnknownWaypoint,
    UnknownZone,
    EmptyPlan,
}

impl DefectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefectKind::MalformedJson => "malformed_json",
            DefectKind::MissingActionsArray => "missing_actions_array",
            DefectKind::UnknownCommand => "unknown_command",
            DefectKind::BadParameter => "bad_parameter",
            DefectKind::UnknownWaypoint => "unknown_waypoint",
            DefectKind::UnknownZone => "unknown_zone",
            DefectKind::EmptyPlan => "empty_plan",
        }
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a defect was found: a specific action, or the document as a whole.
/// Serialized as the action index or the string `"document"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectLocation {
    Document,
    Action(usize),
}

impl Serialize for DefectLocation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            DefectLocation::Document => serializer.serialize_str("document"),
            DefectLocation::Action(i) => serializer.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for DefectLocation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Value::deserialize(deserializer)? {
            Value::String(s) if s == "document" => Ok(DefectLocation::Document),
            Value::Number(n) => n
                .as_u64()
                .map(|i| DefectLocation::Action(i as usize))
                .ok_or_else(|| serde::de::Error::custom("action index must be a non-negative integer")),
            other => Err(serde::de::Error::custom(format!("invalid defect location {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDefect {
    pub kind: DefectKind,
    pub location: DefectLocation,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

impl PlanDefect {
    pub fn document(kind: DefectKind, detail: impl Into<String>) -> Self {
        PlanDefect { kind, location: DefectLocation::Document, detail: detail.into(), suggestion: None }
    }

    pub fn at(index: usize, kind: DefectKind, detail: impl Into<String>) -> Self {
        PlanDefect { kind, location: DefectLocation::Action(index), detail: detail.into(), suggestion: None }
    }

    fn with_suggestion(mut self, suggestion: Option<String>) -> Self {
        self.suggestion = suggestion;
        self
    }
}

impl fmt::Display for PlanDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            DefectLocation::Document => write!(f, "{} (document): {}", self.kind, self.detail)?,
            DefectLocation::Action(i) => write!(f, "{} (action {i}): {}", self.kind, self.detail)?,
        }
        if let Some(s) = &self.suggestion {
            write!(f, "; did you mean `{s}`?")?;
        }
        Ok(())
    }
}

/// Lowercases, trims and joins whitespace runs with `_`.
pub fn canonicalize(name: &str) -> String {
    name.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join("_")
}

/// Parses model output into a plan. Ids and source text are left empty for
/// the caller to fill in.
pub fn parse_plan(json_text: &str) -> Result<MovementPlan, Vec<PlanDefect>> {
    let document = parse_document(json_text).ok_or_else(|| {
        vec![PlanDefect::document(DefectKind::MalformedJson, "no JSON object could be read from the model output")]
    })?;
    let items = find_actions(&document).map_err(|detail| vec![PlanDefect::document(DefectKind::MissingActionsArray, detail)])?;

    let mut actions = Vec::with_capacity(items.len());
    let mut defects = Vec::new();
    for (index, item) in items.iter().enumerate() {
        match parse_action(index, item) {
            Ok(action) => actions.push(action),
            Err(defect) => defects.push(defect),
        }
    }
    if !defects.is_empty() {
        return Err(defects);
    }
    Ok(MovementPlan {
        plan_id: String::new(),
        source_text: String::new(),
        raw_model_output: json_text.to_owned(),
        actions,
    })
}

fn parse_document(text: &str) -> Option<Value> {
    if let Ok(value) = serde_json::from_str::<Value>(text.trim()) {
        return Some(value);
    }
    extract_json_object(text).and_then(|slice| serde_json::from_str(slice).ok())
}

/// Returns the first balanced `{...}` span that is itself valid JSON,
/// scanning start positions left to right. Handles code fences and prose
/// around the object; string literals are skipped so braces inside them do
/// not count.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    for (start, _) in bytes.iter().enumerate().filter(|(_, b)| **b == b'{') {
        if let Some(end) = matching_brace(bytes, start) {
            let candidate = &text[start..=end];
            if serde_json::from_str::<Value>(candidate).is_ok() {
                return Some(candidate);
            }
        }
    }
    None
}

fn matching_brace(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (offset, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + offset);
                }
            }
            _ => {}
        }
    }
    None
}

fn find_actions(document: &Value) -> Result<&Vec<Value>, String> {
    let Some(root) = document.as_object() else {
        return Err("top-level JSON value is not an object".into());
    };
    let wrapped = root.get("response").and_then(Value::as_object).and_then(|r| r.get("actions"));
    match wrapped.or_else(|| root.get("actions")) {
        Some(Value::Array(items)) => Ok(items),
        Some(other) => Err(format!("`actions` must be an array, found {}", json_type(other))),
        None => Err("no `actions` array under `response` or at the top level".into()),
    }
}

fn parse_action(index: usize, item: &Value) -> Result<ActionCommand, PlanDefect> {
    let Some(obj) = item.as_object() else {
        return Err(PlanDefect::at(index, DefectKind::UnknownCommand, format!("action is a {}, not an object", json_type(item))));
    };
    let command = match obj.get("command") {
        Some(Value::String(s)) => s.as_str(),
        Some(other) => {
            return Err(PlanDefect::at(index, DefectKind::UnknownCommand, format!("`command` is a {}", json_type(other))))
        }
        None => return Err(PlanDefect::at(index, DefectKind::UnknownCommand, "missing `command`")),
    };
    let empty = Map::new();
    let params = match obj.get("parameters") {
        None | Some(Value::Null) => &empty,
        Some(Value::Object(map)) => map,
        Some(other) => {
            return Err(PlanDefect::at(index, DefectKind::BadParameter, format!("`parameters` is a {}", json_type(other))))
        }
    };
    match command {
        "goto" => name_param(index, params, "waypoint").map(|waypoint| ActionCommand::Goto { waypoint }),
        "explore" => name_param(index, params, "zone").map(|zone| ActionCommand::Explore { zone }),
        "wait" => match params.get("duration") {
            Some(Value::Number(n)) => match n.as_f64() {
                Some(d) if d.is_finite() && d >= 0.0 => Ok(ActionCommand::Wait { duration: d }),
                _ => Err(PlanDefect::at(index, DefectKind::BadParameter, format!("wait duration {n} must be finite and >= 0"))),
            },
            Some(other) => Err(PlanDefect::at(index, DefectKind::BadParameter, format!("wait duration is a {}", json_type(other)))),
            None => Err(PlanDefect::at(index, DefectKind::BadParameter, "wait requires `duration`")),
        },
        "halt" => Ok(ActionCommand::Halt {}),
        other => Err(PlanDefect::at(index, DefectKind::UnknownCommand, format!("`{other}` is not one of goto, wait, explore, halt"))),
    }
}

fn name_param(index: usize, params: &Map<String, Value>, key: &str) -> Result<String, PlanDefect> {
    match params.get(key) {
        Some(Value::String(raw)) => {
            let name = canonicalize(raw);
            if name.is_empty() {
                Err(PlanDefect::at(index, DefectKind::BadParameter, format!("`{key}` is blank")))
            } else {
                Ok(name)
            }
        }
        Some(other) => Err(PlanDefect::at(index, DefectKind::BadParameter, format!("`{key}` is a {}", json_type(other)))),
        None => Err(PlanDefect::at(index, DefectKind::BadParameter, format!("missing `{key}`"))),
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Checks every action against the map. All defects are reported, not just
/// the first.
pub fn validate_plan(plan: MovementPlan, world: &WaypointWorld) -> Result<MovementPlan, Vec<PlanDefect>> {
    let mut defects = Vec::new();
    if plan.actions.is_empty() {
        defects.push(PlanDefect::document(DefectKind::EmptyPlan, "the plan contains no actions"));
    }
    for (index, action) in plan.actions.iter().enumerate() {
        match action {
            ActionCommand::Goto { waypoint } if world.waypoint(waypoint).is_none() => defects.push(
                PlanDefect::at(index, DefectKind::UnknownWaypoint, format!("waypoint `{waypoint}` is not on the map"))
                    .with_suggestion(world.nearest_waypoint_name(waypoint)),
            ),
            ActionCommand::Explore { zone } if world.zone(zone).is_none() => defects.push(
                PlanDefect::at(index, DefectKind::UnknownZone, format!("zone `{zone}` is not on the map"))
                    .with_suggestion(world.nearest_zone_name(zone)),
            ),
            _ => {}
        }
    }
    if defects.is_empty() {
        Ok(plan)
    } else {
        Err(defects)
    }
}

#[derive(Serialize)]
struct Bare<'a> {
    actions: &'a [ActionCommand],
}

#[derive(Serialize)]
struct Wrapped<'a> {
    response: Bare<'a>,
}

/// Bare-form compact serialization.
pub fn canonical_serialize(plan: &MovementPlan) -> String {
    serialize_actions(&plan.actions)
}

pub fn serialize_actions(actions: &[ActionCommand]) -> String {
    serde_json::to_string(&Bare { actions }).expect("actions always serialize")
}

/// The `{"response":{"actions":[...]}}` form used in model output.
pub fn wrapped_serialize(actions: &[ActionCommand]) -> String {
    serde_json::to_string(&Wrapped { response: Bare { actions } }).expect("actions always serialize")
}
