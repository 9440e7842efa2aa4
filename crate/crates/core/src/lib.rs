//! Language-grounded movement planning for a simulated quadruped.
//!
//! A natural-language instruction is turned into a system prompt
//! ([`prompting`]), sent to a chat model or the offline keyword grounder
//! ([`llm_provider`]), parsed and checked against the semantic map
//! ([`plan_schema`], [`waypoint_world`]) and, when valid, executed on a
//! deterministic kinematic simulator ([`nav_sim`]) by the mission state
//! machine ([`mission_exec`]). [`bench`] replays scenario suites through the
//! whole pipeline and renders per-category reports.

pub mod bench;
pub mod grounding;
pub mod ids;
pub mod jsonl;
pub mod llm_provider;
pub mod mission_exec;
pub mod nav_sim;
pub mod plan_schema;
pub mod prompting;
pub mod waypoint_world;
