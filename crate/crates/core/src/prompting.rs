//! System prompt assembly.
//!
//! The template is data (`fixtures/templates/planner_v1.json`): role
//! preamble, per-command docs, constraint rules, few-shot exemplars and the
//! output contract. Rendering adds the live waypoint and zone vocabulary so
//! the model only ever sees names that exist on the map. Rendering is
//! deterministic byte-for-byte.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan_schema::{parse_plan, validate_plan, PlanDefect};
use crate::waypoint_world::WaypointWorld;

const DEFAULT_TEMPLATE: &str = include_str!("../../../fixtures/templates/planner_v1.json");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("few-shot #{index} is not a valid plan for this map: {}", defects.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidExemplar { index: usize, defects: Vec<PlanDefect> },
    #[error("output contract must require the wrapped {{\"response\": {{\"actions\": [...]}}}} form")]
    WeakOutputContract,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("instruction is empty")]
    EmptyInstruction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimitiveDoc {
    pub command: String,
    pub usage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShot {
    pub instruction: String,
    pub expected_json: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub version: String,
    pub preamble: String,
    pub primitive_docs: Vec<PrimitiveDoc>,
    pub constraint_rules: Vec<String>,
    pub few_shots: Vec<FewShot>,
    pub output_contract: String,
}

impl PromptTemplate {
    /// Parses a template and checks it against `world`.
    pub fn from_json_str(text: &str, world: &WaypointWorld) -> Result<Self, TemplateError> {
        let template: PromptTemplate =
            serde_json::from_str(text).map_err(|e| TemplateError::Syntax { line: e.line(), message: e.to_string() })?;
        template.check(world)?;
        Ok(template)
    }

    pub fn load(path: impl AsRef<Path>, world: &WaypointWorld) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| TemplateError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text, world)
    }

    /// Every exemplar must itself pass parsing and map validation.
    pub fn check(&self, world: &WaypointWorld) -> Result<(), TemplateError> {
        let compact: String = self.output_contract.chars().filter(|c| !c.is_whitespace()).collect();
        if !compact.contains(r#"{"response":{"actions":"#) {
            return Err(TemplateError::WeakOutputContract);
        }
        for (index, shot) in self.few_shots.iter().enumerate() {
            parse_plan(&shot.expected_json)
                .and_then(|plan| validate_plan(plan, world))
                .map_err(|defects| TemplateError::InvalidExemplar { index, defects })?;
        }
        Ok(())
    }
}

/// The shipped planner template, checked against `world`.
pub fn default_template(world: &WaypointWorld) -> Result<PromptTemplate, TemplateError> {
    PromptTemplate::from_json_str(DEFAULT_TEMPLATE, world)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    /// Hex SHA-256 of `system_text`.
    pub template_hash: String,
}

pub fn build_prompt(template: &PromptTemplate, world: &WaypointWorld, instruction: &str) -> Result<PromptBundle, PromptError> {
    let instruction = instruction.trim();
    if instruction.is_empty() {
        return Err(PromptError::EmptyInstruction);
    }
    let system_text = render_system_text(template, world);
    let template_hash = hex::encode(Sha256::digest(system_text.as_bytes()));
    Ok(PromptBundle { system_text, user_text: instruction.to_owned(), template_hash })
}

pub fn render_system_text(template: &PromptTemplate, world: &WaypointWorld) -> String {
    let mut out = String::new();
    out.push_str(template.preamble.trim());
    out.push_str("\n\n## Action primitives\n");
    for doc in &template.primitive_docs {
        let _ = writeln!(out, "- {}: {}", doc.command, doc.usage);
    }

    out.push_str("\n## Constraints\n");
    for (i, rule) in template.constraint_rules.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, rule);
    }
    out.push_str("\nWaypoints (name | place | zone):\n");
    for entry in world.vocabulary() {
        let _ = writeln!(out, "- {} | {} | {}", entry.name, entry.display_name, entry.zone);
    }
    out.push_str("\nZones (name | place):\n");
    for zone in world.zones() {
        let _ = writeln!(out, "- {} | {}", zone.name, zone.display_name);
    }

    out.push_str("\n## Examples\n");
    for shot in &template.few_shots {
        let _ = write!(out, "\nUser: {}\nAssistant: {}\n", shot.instruction.trim(), shot.expected_json.trim());
    }

    out.push_str("\n## Output format\n");
    out.push_str(template.output_contract.trim());
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WaypointWorld {
        WaypointWorld::from_json_str(include_str!("../../../fixtures/maps/tower2_floor9.json")).unwrap()
    }

    #[test]
    fn default_template_is_sound() {
        let world = world();
        let t = default_template(&world).unwrap();
        assert!(t.few_shots.len() >= 3);
        assert!(t.few_shots[0].instruction.starts_with("Saya ingin mengambil barang di lemari lab, kemudian ingin menyoldernya"));
        let rules = t.constraint_rules.join("\n").to_lowercase();
        assert!(rules.contains("only waypoints from the list"));
        assert!(rules.contains("output json only, no prose"));
        assert!(rules.contains("preserve the user's stated visiting order"));
    }

    #[test]
    fn rejects_exemplar_with_unknown_waypoint() {
        let world = world();
        let mut t = default_template(&world).unwrap();
        t.few_shots.push(FewShot {
            instruction: "ke atlantis".into(),
            expected_json: r#"{"response":{"actions":[{"command":"goto","parameters":{"waypoint":"atlantis"}}]}}"#.into(),
        });
        let text = serde_json::to_string(&t).unwrap();
        match PromptTemplate::from_json_str(&text, &world) {
            Err(TemplateError::InvalidExemplar { index, .. }) => assert_eq!(index, t.few_shots.len() - 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_contract_without_wrapped_form() {
        let world = world();
        let mut t = default_template(&world).unwrap();
        t.output_contract = "Answer in JSON.".into();
        assert!(matches!(t.check(&world), Err(TemplateError::WeakOutputContract)));
    }

    #[test]
    fn sections_appear_in_order() {
        let world = world();
        let t = default_template(&world).unwrap();
        let bundle = build_prompt(&t, &world, "  Berhenti.  ").unwrap();
        assert_eq!(bundle.user_text, "Berhenti.");
        let s = &bundle.system_text;
        let positions: Vec<usize> = [t.preamble.as_str(), "## Action primitives", "## Constraints", "Waypoints (name", "## Examples", "## Output format"]
            .iter()
            .map(|needle| s.find(needle).unwrap_or_else(|| panic!("missing {needle}")))
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");
        assert_eq!(bundle.template_hash.len(), 64);
    }

    #[test]
    fn blank_instruction_rejected() {
        let world = world();
        let t = default_template(&world).unwrap();
        assert_eq!(build_prompt(&t, &world, "   ").unwrap_err(), PromptError::EmptyInstruction);
    }
}
