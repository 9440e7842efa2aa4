//! Scenario replay: runs instruction suites through grounding and the
//! simulator and renders per-category reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::{GroundingOutcome, Grounder};
use crate::ids::format_id;
use crate::jsonl;
use crate::llm_provider::{CompletionResult, Provider, ProviderError};
use crate::mission_exec::{
    format_rate, run_mission, summarize, summary_csv_string, MissionPhase, MissionRecord, MissionSpec, NoHooks,
    RecoveryPolicy, ScenarioSummary, ScenarioTag,
};
use crate::nav_sim::{FaultSpec, SimError, Simulator, DEFAULT_CRUISE_SPEED};
use crate::prompting::{PromptBundle, PromptTemplate};
use crate::waypoint_world::WaypointWorld;

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub instruction: String,
    pub scenario_tag: ScenarioTag,
    /// Repetition `i` runs with `seed + i`.
    pub seed: u64,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSuite {
    pub name: String,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cruise_speed: Option<f64>,
    #[serde(default)]
    pub policy: RecoveryPolicy,
    pub trials: Vec<TrialSpec>,
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot read suite {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("suite is not valid JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("trial {index} is untagged; suites must use one of the four scenario categories")]
    Untagged { index: usize },
    #[error("trial {index} has zero repetitions")]
    ZeroRepetitions { index: usize },
    #[error("cruise speed must be positive, got {0}")]
    BadSpeed(f64),
    #[error("trial {index}: {source}")]
    Fault { index: usize, source: SimError },
}

/// One concrete run after repetition expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedTrial {
    pub trial_index: usize,
    pub repetition: u32,
    pub instruction: String,
    pub scenario_tag: ScenarioTag,
    pub seed: u64,
    pub faults: Vec<FaultSpec>,
}

impl ScenarioSuite {
    pub fn from_json_str(text: &str) -> Result<Self, SuiteError> {
        let suite: ScenarioSuite = serde_json::from_str(text)?;
        suite.check()?;
        Ok(suite)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SuiteError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SuiteError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    fn check(&self) -> Result<(), SuiteError> {
        if let Some(speed) = self.cruise_speed {
            if !(speed.is_finite() && speed > 0.0) {
                return Err(SuiteError::BadSpeed(speed));
            }
        }
        for (index, trial) in self.trials.iter().enumerate() {
            if trial.scenario_tag == ScenarioTag::Untagged {
                return Err(SuiteError::Untagged { index });
            }
            if trial.repetitions == 0 {
                return Err(SuiteError::ZeroRepetitions { index });
            }
        }
        Ok(())
    }

    pub fn cruise_speed(&self) -> f64 {
        self.cruise_speed.unwrap_or(DEFAULT_CRUISE_SPEED)
    }

    pub fn expand(&self) -> Vec<ExpandedTrial> {
        self.trials
            .iter()
            .enumerate()
            .flat_map(|(trial_index, t)| {
                (0..t.repetitions).map(move |repetition| ExpandedTrial {
                    trial_index,
                    repetition,
                    instruction: t.instruction.clone(),
                    scenario_tag: t.scenario_tag,
                    seed: t.seed.wrapping_add(repetition as u64),
                    faults: t.faults.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite_name: String,
    pub cruise_speed: f64,
    pub outcomes: Vec<GroundingOutcome>,
    pub records: Vec<MissionRecord>,
    pub summaries: Vec<ScenarioSummary>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// One simulator per trial on the rayon pool; report order is unchanged.
    pub parallel: bool,
}

/// Runs every expanded trial on a fresh simulator reset to its seed. Trial
/// failures become records; only fixture problems are errors.
pub fn run_suite(
    suite: &ScenarioSuite,
    world: Arc<WaypointWorld>,
    template: Arc<PromptTemplate>,
    provider: Arc<dyn Provider>,
    options: RunOptions,
) -> Result<SuiteReport, SuiteError> {
    suite.check()?;
    let trials = suite.expand();
    // Reject bad faults before running anything.
    for trial in &trials {
        let mut sim = Simulator::new(world.clone(), suite.cruise_speed());
        for fault in &trial.faults {
            sim.inject_fault(fault.clone()).map_err(|source| SuiteError::Fault { index: trial.trial_index, source })?;
        }
    }

    let grounder = Grounder::new(world.clone(), template, provider);
    let run = |(n, trial): (usize, &ExpandedTrial)| run_trial(&grounder, &world, suite, n, trial);
    let results: Vec<(GroundingOutcome, MissionRecord)> = if options.parallel {
        trials.par_iter().enumerate().map(run).collect()
    } else {
        trials.iter().enumerate().map(run).collect()
    };

    let (outcomes, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let summaries = summarize(&records);
    Ok(SuiteReport { suite_name: suite.name.clone(), cruise_speed: suite.cruise_speed(), outcomes, records, summaries })
}

fn run_trial(grounder: &Grounder, world: &Arc<WaypointWorld>, suite: &ScenarioSuite, n: usize, trial: &ExpandedTrial) -> (GroundingOutcome, MissionRecord) {
    let outcome_id = format_id("g", n as u64 + 1);
    let mission_id = format_id("m", n as u64 + 1);
    let outcome = grounder.ground_with_id(&trial.instruction, outcome_id.clone());

    let Some(plan) = outcome.plan.clone() else {
        let rejection = outcome.rejection.as_ref().expect("outcomes without a plan carry a rejection");
        let record = MissionRecord {
            mission_id,
            outcome_id,
            scenario_tag: trial.scenario_tag,
            actions: Vec::new(),
            phase: MissionPhase::Failed { reason: format!("grounding rejected at {:?} stage: {}", rejection.stage, rejection.detail) },
            success: false,
            started_at: 0.0,
            finished_at: 0.0,
            duration: 0.0,
            provider_latency: outcome.provider_latency,
            end_to_end_duration: outcome.provider_latency,
            events: Vec::new(),
        };
        return (outcome, record);
    };

    let mut sim = Simulator::new(world.clone(), suite.cruise_speed());
    for fault in &trial.faults {
        sim.inject_fault(fault.clone()).expect("faults checked before the run");
    }
    sim.reset(trial.seed);
    let spec = MissionSpec {
        mission_id,
        outcome_id,
        scenario_tag: trial.scenario_tag,
        plan,
        policy: suite.policy,
        provider_latency: outcome.provider_latency,
    };
    let record = run_mission(&mut sim, &spec, &mut NoHooks);
    (outcome, record)
}

const COLUMNS: [&str; 4] = ["Scenario Category", "Avg. Duration(s)", "Success Rate(%)", "Total Attempts"];

/// Plain-text table: category, mean duration, success rate, attempts.
pub fn render_report(report: &SuiteReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Scenario suite: {}", report.suite_name);
    let _ = writeln!(
        out,
        "Durations are simulated motion time at {:.2} m/s cruise speed. Real-robot dynamics are not modeled, so only their ordering across categories is comparable with physical trials.",
        report.cruise_speed
    );
    let _ = writeln!(out, "Avg. Duration averages successful trials only.");
    let _ = writeln!(out);

    let rows: Vec<[String; 4]> = report
        .summaries
        .iter()
        .map(|s| {
            [
                s.scenario_tag.label().to_owned(),
                s.mean_duration.map(|d| format!("{d:.2}")).unwrap_or_else(|| "-".into()),
                format_rate(s.success_rate),
                s.attempts.to_string(),
            ]
        })
        .collect();
    let mut widths = COLUMNS.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: [&str; 4]| {
        format!(
            "| {:<w0$} | {:>w1$} | {:>w2$} | {:>w3$} |",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        )
    };
    let rule = format!("|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
    let _ = writeln!(out, "{rule}");
    let _ = writeln!(out, "{}", line(COLUMNS));
    let _ = writeln!(out, "{rule}");
    for row in &rows {
        let _ = writeln!(out, "{}", line([&row[0], &row[1], &row[2], &row[3]]));
    }
    let _ = writeln!(out, "{rule}");
    out
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Writes the record log, grounding outcomes, CSV summary and text table.
/// Everything except the outcome timestamps is a pure function of the
/// suite and fixtures.
pub fn write_report(report: &SuiteReport, dir: impl AsRef<Path>) -> io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RECORDS_FILE), to_jsonl(&report.records)?)?;
    fs::write(dir.join(OUTCOMES_FILE), to_jsonl(&report.outcomes)?)?;
    fs::write(dir.join(SUMMARY_FILE), summary_csv_string(&report.summaries))?;
    fs::write(dir.join(REPORT_FILE), render_report(report))?;
    Ok(())
}

fn to_jsonl<T: Serialize>(items: &[T]) -> io::Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

/// Replays model outputs captured in an outcome log, keyed by instruction.
pub struct RecordedProvider {
    outputs: HashMap<String, String>,
}

impl RecordedProvider {
    pub fn from_outcomes(outcomes: &[GroundingOutcome]) -> Self {
        let outputs = outcomes
            .iter()
            .filter(|o| o.provider_attempts > 0)
            .map(|o| (o.instruction.trim().to_owned(), o.raw_output.clone()))
            .collect();
        RecordedProvider { outputs }
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::from_outcomes(&jsonl::read_all::<GroundingOutcome>(path)?))
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl Provider for RecordedProvider {
    fn id(&self) -> String {
        "recorded".into()
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<CompletionResult, ProviderError> {
        let text = self
            .outputs
            .get(bundle.user_text.trim())
            .ok_or_else(|| ProviderError::BadResponse(format!("no recorded output for `{}`", bundle.user_text.trim())))?;
        Ok(CompletionResult { text: text.clone(), latency: 0.0, attempts: 1, provider_id: self.id() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_provider::MockProvider;
    use crate::prompting::default_template;

    fn fixtures() -> (Arc<WaypointWorld>, Arc<PromptTemplate>, Arc<dyn Provider>) {
        let world = Arc::new(WaypointWorld::from_json_str(include_str!("../../../fixtures/maps/tower2_floor9.json")).unwrap());
        let template = Arc::new(default_template(&world).unwrap());
        let provider: Arc<dyn Provider> = Arc::new(MockProvider::new(world.clone()));
        (world, template, provider)
    }

    #[test]
    fn expansion_derives_seeds() {
        let suite = ScenarioSuite::from_json_str(
            r#"{"name":"t","trials":[{"instruction":"ke pantry","scenario_tag":"cross_zone","seed":10,"repetitions":3}]}"#,
        )
        .unwrap();
        let seeds: Vec<u64> = suite.expand().iter().map(|t| t.seed).collect();
        assert_eq!(seeds, vec![10, 11, 12]);
    }

    #[test]
    fn untagged_trials_rejected() {
        let err = ScenarioSuite::from_json_str(r#"{"name":"t","trials":[{"instruction":"x","scenario_tag":"untagged","seed":1}]}"#);
        assert!(matches!(err, Err(SuiteError::Untagged { index: 0 })));
    }

    #[test]
    fn empty_suite_gives_empty_report() {
        let (world, template, provider) = fixtures();
        let suite = ScenarioSuite::from_json_str(r#"{"name":"empty","trials":[]}"#).unwrap();
        let report = run_suite(&suite, world, template, provider, RunOptions::default()).unwrap();
        assert!(report.records.is_empty() && report.summaries.is_empty());
        assert!(render_report(&report).contains("Scenario Category"));
    }

    #[test]
    fn grounding_failure_is_a_failed_record() {
        let (world, template, provider) = fixtures();
        let suite = ScenarioSuite::from_json_str(r#"{"name":"t","trials":[{"instruction":"xyzzy","scenario_tag":"single_room_short","seed":1}]}"#).unwrap();
        let report = run_suite(&suite, world, template, provider, RunOptions::default()).unwrap();
        assert!(!report.records[0].success);
        assert_eq!(report.summaries[0].success_rate, 0.0);
        assert_eq!(report.summaries[0].mean_duration, None);
    }

    #[test]
    fn unknown_fault_waypoint_is_a_fixture_error() {
        let (world, template, provider) = fixtures();
        let suite = ScenarioSuite::from_json_str(
            r#"{"name":"t","trials":[{"instruction":"ke pantry","scenario_tag":"cross_zone","seed":1,
                "faults":[{"kind":"arrival_failure","probability":0.5,"waypoint":"nowhere"}]}]}"#,
        )
        .unwrap();
        assert!(matches!(run_suite(&suite, world, template, provider, RunOptions::default()), Err(SuiteError::Fault { .. })));
    }

    #[test]
    fn recorded_provider_replays() {
        let (world, template, provider) = fixtures();
        let grounder = Grounder::new(world.clone(), template.clone(), provider);
        let first = grounder.ground("ambil kue di pantry");
        let recorded: Arc<dyn Provider> = Arc::new(RecordedProvider::from_outcomes(std::slice::from_ref(&first)));
        let again = Grounder::new(world, template, recorded).ground("ambil kue di pantry");
        assert_eq!(again.raw_output, first.raw_output);
        assert_eq!(again.plan.unwrap().actions, first.plan.unwrap().actions);
    }
}
