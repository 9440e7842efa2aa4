//! The shipped replica suite end to end.

use std::fs;
use std::sync::Arc;

use quadnav_core::bench::{run_suite, write_report, RunOptions, ScenarioSuite, RECORDS_FILE, REPORT_FILE, SUMMARY_FILE};
use quadnav_core::llm_provider::MockProvider;
use quadnav_core::mission_exec::ScenarioTag;
use quadnav_core::prompting::default_template;
use quadnav_core::waypoint_world::load_world;

const ROOT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");

fn run(parallel: bool) -> quadnav_core::bench::SuiteReport {
    let world = Arc::new(load_world(format!("{ROOT}/maps/tower2_floor9.json")).unwrap());
    let template = Arc::new(default_template(&world).unwrap());
    let suite = ScenarioSuite::load(format!("{ROOT}/suites/paper_replica.json")).unwrap();
    run_suite(&suite, world.clone(), template, Arc::new(MockProvider::new(world)), RunOptions { parallel }).unwrap()
}

#[test]
fn replica_rates_and_ordering() {
    let report = run(false);
    let rows: Vec<(ScenarioTag, u32, f64)> = report.summaries.iter().map(|s| (s.scenario_tag, s.attempts, s.success_rate)).collect();
    assert_eq!(
        rows,
        vec![
            (ScenarioTag::SingleRoomShort, 15, 100.0),
            (ScenarioTag::MultiRoomShort, 25, 96.0),
            (ScenarioTag::MultiRoomLong, 20, 90.0),
            (ScenarioTag::CrossZone, 20, 100.0),
        ]
    );
    let means: Vec<f64> = report.summaries.iter().map(|s| s.mean_duration.unwrap()).collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn sequential_and_parallel_reports_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_report(&run(false), a.path()).unwrap();
    write_report(&run(true), b.path()).unwrap();
    for file in [RECORDS_FILE, SUMMARY_FILE, REPORT_FILE] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}
