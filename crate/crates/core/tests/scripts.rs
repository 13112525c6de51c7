use std::time::Instant;

use it2i_core::config::ServiceConfig;
use it2i_core::eval::{bundled_scripts, run_all, run_script, Assertion, LlmMode, Script, ScriptTurn};
use it2i_core::router::GenerationKind;

fn script(name: &str) -> Script {
    bundled_scripts().into_iter().find(|s| s.name == name).unwrap()
}

#[tokio::test]
async fn every_bundled_script_passes() {
    let dir = tempfile::tempdir().unwrap();
    let suite = run_all(&bundled_scripts(), &ServiceConfig::default(), dir.path())
        .await
        .unwrap();
    let failures: Vec<String> = suite.scripts.iter().flat_map(|s| s.failures()).collect();
    assert!(failures.is_empty(), "{failures:#?}");
    assert_eq!((suite.passed, suite.total), (6, 6));
    assert_eq!(suite.coverage(), (6, 6));
}

#[tokio::test]
async fn hedgehog_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let report = run_script(&script("fig6_hedgehog"), &ServiceConfig::default(), dir.path())
        .await
        .unwrap();
    let elapsed = started.elapsed();
    assert!(report.passed, "{:#?}", report.failures());
    assert_eq!(
        report.generations(),
        vec![
            (1, GenerationKind::New, None),
            (2, GenerationKind::Edit, Some(1)),
            (3, GenerationKind::Edit, Some(2)),
            (4, GenerationKind::Edit, Some(3)),
            (5, GenerationKind::Edit, Some(4)),
        ]
    );
    let quiet_turn = &report.turns[3];
    assert!(quiet_turn.events.iter().all(|e| !e.name().starts_with("image")));
    assert!(elapsed.as_secs_f64() < 2.0, "took {elapsed:?}");
}

#[tokio::test]
async fn selection_redirects_the_next_edit() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_script(&script("selecting"), &ServiceConfig::default(), dir.path())
        .await
        .unwrap();
    assert!(report.passed, "{:#?}", report.failures());
    assert_eq!(report.generations()[2], (3, GenerationKind::Edit, Some(2)));
}

#[tokio::test]
async fn reports_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_all(&bundled_scripts(), &ServiceConfig::default(), a.path()).await.unwrap();
    let second = run_all(&bundled_scripts(), &ServiceConfig::default(), b.path()).await.unwrap();
    assert_eq!(
        serde_json::to_string(&first).unwrap(),
        serde_json::to_string(&second).unwrap()
    );
}

#[tokio::test]
async fn failing_assertions_name_their_turn() {
    let dir = tempfile::tempdir().unwrap();
    let script = Script {
        name: "negative".into(),
        covers: vec![],
        llm: LlmMode::Scripted {
            outputs: vec!["Just words, no pictures.".into()],
        },
        config: None,
        turns: vec![ScriptTurn {
            user_text: "draw a dog".into(),
            assertions: vec![Assertion::ExpectImages(1)],
        }],
    };
    let report = run_script(&script, &ServiceConfig::default(), dir.path()).await.unwrap();
    assert!(!report.passed);
    let failures = report.failures();
    assert_eq!(failures.len(), 1);
    assert!(failures[0].starts_with("negative: turn 1: ExpectImages(1)"), "{failures:?}");
}

#[tokio::test]
async fn script_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qa.json");
    std::fs::write(&path, serde_json::to_string_pretty(&script("qa_only")).unwrap()).unwrap();
    assert_eq!(Script::load(&path).unwrap(), script("qa_only"));
}
