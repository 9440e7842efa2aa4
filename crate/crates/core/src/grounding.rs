//! Instruction → prompt → provider → parse → validate.
//!
//! Grounding never returns an error: every failure becomes a
//! [`GroundingOutcome`] carrying a [`Rejection`] attributed to the stage that
//! produced it, so callers always have something to show and log. Outcomes
//! with any defect carry no plan.

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::ids::IdGen;
use crate::jsonl::JsonlLog;
use crate::llm_provider::{Provider, ProviderError};
use crate::plan_schema::{parse_plan, validate_plan, MovementPlan, PlanDefect};
use crate::prompting::{build_prompt, PromptBundle, PromptTemplate};
use crate::waypoint_world::WaypointWorld;

static FREE_IDS: IdGen = IdGen::new("g");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prompt,
    Provider,
    Parse,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderFailure {
    pub kind: String,
    pub detail: String,
    /// The model could not be reached, as opposed to answering unusably.
    pub unavailable: bool,
}

impl From<&ProviderError> for ProviderFailure {
    fn from(err: &ProviderError) -> Self {
        ProviderFailure { kind: err.kind().into(), detail: err.to_string(), unavailable: err.is_unavailable() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub stage: Stage,
    pub detail: String,
    #[serde(default)]
    pub defects: Vec<PlanDefect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_error: Option<ProviderFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutcome {
    pub outcome_id: String,
    pub instruction: String,
    /// Unix milliseconds.
    pub timestamp: u64,
    pub template_hash: String,
    pub provider_id: String,
    /// Seconds spent in the provider.
    pub provider_latency: f64,
    pub provider_attempts: u32,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<MovementPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
}

impl GroundingOutcome {
    pub fn is_success(&self) -> bool {
        self.plan.is_some()
    }

    pub fn defects(&self) -> &[PlanDefect] {
        self.rejection.as_ref().map(|r| r.defects.as_slice()).unwrap_or_default()
    }

    pub fn stage(&self) -> Option<Stage> {
        self.rejection.as_ref().map(|r| r.stage)
    }
}

const REPROMPT_ADDENDUM: &str = "Your previous output was invalid";

/// Reusable grounding pipeline with its own id sequence and optional
/// append-only outcome log.
pub struct Grounder {
    world: Arc<WaypointWorld>,
    template: Arc<PromptTemplate>,
    provider: Arc<dyn Provider>,
    ids: IdGen,
    log: Option<JsonlLog>,
    reprompt_on_invalid: bool,
}

impl Grounder {
    pub fn new(world: Arc<WaypointWorld>, template: Arc<PromptTemplate>, provider: Arc<dyn Provider>) -> Self {
        Grounder { world, template, provider, ids: IdGen::new("g"), log: None, reprompt_on_invalid: false }
    }

    pub fn with_log(mut self, log: JsonlLog) -> Self {
        self.log = Some(log);
        self
    }

    /// One extra provider call, with the defects appended to the
    /// instruction, when the first answer fails parsing or validation.
    pub fn with_reprompt(mut self, enabled: bool) -> Self {
        self.reprompt_on_invalid = enabled;
        self
    }

    pub fn world(&self) -> &Arc<WaypointWorld> {
        &self.world
    }

    pub fn template(&self) -> &Arc<PromptTemplate> {
        &self.template
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.provider
    }

    pub fn ground(&self, instruction: &str) -> GroundingOutcome {
        self.ground_with_id(instruction, self.ids.next_id())
    }

    pub fn ground_with_id(&self, instruction: &str, outcome_id: String) -> GroundingOutcome {
        let outcome = run_pipeline(
            instruction,
            &self.world,
            &self.template,
            self.provider.as_ref(),
            outcome_id,
            self.reprompt_on_invalid,
        );
        if let Some(log) = &self.log {
            if let Err(err) = log.append(&outcome) {
                tracing::warn!(path = %log.path().display(), %err, "could not append grounding outcome");
            }
        }
        outcome
    }
}

/// One-off grounding without a log; ids come from a process-wide sequence.
pub fn ground(instruction: &str, world: &WaypointWorld, template: &PromptTemplate, provider: &dyn Provider) -> GroundingOutcome {
    run_pipeline(instruction, world, template, provider, FREE_IDS.next_id(), false)
}

fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn run_pipeline(
    instruction: &str,
    world: &WaypointWorld,
    template: &PromptTemplate,
    provider: &dyn Provider,
    outcome_id: String,
    reprompt: bool,
) -> GroundingOutcome {
    let mut outcome = GroundingOutcome {
        outcome_id,
        instruction: instruction.to_owned(),
        timestamp: unix_millis(),
        template_hash: String::new(),
        provider_id: provider.id(),
        provider_latency: 0.0,
        provider_attempts: 0,
        raw_output: String::new(),
        plan: None,
        rejection: None,
    };

    let bundle = match build_prompt(template, world, instruction) {
        Ok(bundle) => bundle,
        Err(err) => {
            outcome.rejection = Some(Rejection { stage: Stage::Prompt, detail: err.to_string(), defects: Vec::new(), provider_error: None });
            return outcome;
        }
    };
    outcome.template_hash = bundle.template_hash.clone();

    let mut result = attempt(&bundle, world, provider, &mut outcome);
    if reprompt && matches!(&result, Err(r) if matches!(r.stage, Stage::Parse | Stage::Validate)) {
        let defects = result.as_ref().err().map(|r| r.defects.clone()).unwrap_or_default();
        let listing: Vec<String> = defects.iter().map(ToString::to_string).collect();
        let retry = PromptBundle {
            user_text: format!(
                "{}\n\n{REPROMPT_ADDENDUM}: {}. Answer again with JSON only.",
                bundle.user_text,
                listing.join("; ")
            ),
            ..bundle.clone()
        };
        result = attempt(&retry, world, provider, &mut outcome);
    }

    match result {
        Ok(mut plan) => {
            plan.plan_id = outcome.outcome_id.clone();
            plan.source_text = bundle.user_text;
            outcome.plan = Some(plan);
        }
        Err(rejection) => outcome.rejection = Some(rejection),
    }
    outcome
}

fn attempt(
    bundle: &PromptBundle,
    world: &WaypointWorld,
    provider: &dyn Provider,
    outcome: &mut GroundingOutcome,
) -> Result<MovementPlan, Rejection> {
    let completion = provider.complete(bundle).map_err(|err| Rejection {
        stage: Stage::Provider,
        detail: err.to_string(),
        defects: Vec::new(),
        provider_error: Some(ProviderFailure::from(&err)),
    })?;
    outcome.provider_latency += completion.latency;
    outcome.provider_attempts += completion.attempts;
    outcome.raw_output = completion.text;

    let plan = parse_plan(&outcome.raw_output).map_err(|defects| Rejection {
        stage: Stage::Parse,
        detail: format!("{} defect(s) while parsing model output", defects.len()),
        defects,
        provider_error: None,
    })?;
    validate_plan(plan, world).map_err(|defects| Rejection {
        stage: Stage::Validate,
        detail: format!("{} defect(s) against the map", defects.len()),
        defects,
        provider_error: None,
    })
}
