mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::Duration;

use redteam_core::edit::mock::{MockCritic, MockCriticPolicy, MockEditor, MockOptions};
use redteam_core::edit::pipeline::{BatchSummary, SMALL_BATCH};
use redteam_core::edit::remote::{RemoteCritic, RemoteEditor};
use redteam_core::edit::zoom::CropRect;
use redteam_core::edit::{
    backends, build_factor_batch, read_observation_dir, run_edit_job, BatchConfig, Camera, EditJob, JobFailure,
    JobSettings, RetryPolicy, TemplateLibrary,
};

use common::{fixture, observations, png, snapshot, MiniServer, Reply};

fn config() -> BatchConfig {
    BatchConfig {
        overhead_prompt: "Change the color of the pink mat to red.".into(),
        wrist_prompt: "Change the color of the pink mat to red.".into(),
        short_instruction: "Change the color of the pink mat to red".into(),
        critic_template: "critic".into(),
        n_variants: 4,
        zoom: None,
        retry: RetryPolicy::immediate(3),
        max_in_flight: 3,
    }
}

#[test]
fn single_camera_retention_follows_the_mock_schedule() {
    let obs = observations(1000, &[Camera::Overhead]);
    let editor = MockEditor::new(5).with_accept_rate(0.85);
    let batch = build_factor_batch(&obs, "background", &config(), &editor, &MockCritic::default()).unwrap();

    let expected: Vec<&str> = obs
        .iter()
        .filter(|o| {
            editor
                .faithful_slot(&o.images[0].1.bytes, &config().overhead_prompt, 4)
                .is_some()
        })
        .map(|o| o.id.as_str())
        .collect();
    assert_eq!(batch.retained_observations(), expected);
    assert_eq!(batch.failed_count(), 0);
    assert_eq!(batch.discarded_count() + expected.len(), 1000);
    // binomial(1000, 0.85): sd ~ 0.0113
    assert!(
        (batch.retention_rate - 0.85).abs() < 0.045,
        "rate {}",
        batch.retention_rate
    );
    // the critic picks the faithful slot
    for r in &batch.retained {
        let slot = editor.faithful_slot(
            &obs[r.observation_id[3..].parse::<usize>().unwrap()].images[0].1.bytes,
            &config().overhead_prompt,
            4,
        );
        assert_eq!(Some(r.candidate_index), slot);
    }
}

#[test]
fn two_cameras_retain_roughly_the_product() {
    let obs = observations(400, &Camera::ALL);
    let editor = MockEditor::new(8).with_accept_rate(0.85);
    let batch = build_factor_batch(&obs, "background", &config(), &editor, &MockCritic::default()).unwrap();
    let rate = batch.retention_rate;
    assert!((rate - 0.7225).abs() < 0.09, "rate {rate}");
    for id in batch.retained_observations() {
        let views: Vec<Camera> = batch
            .retained
            .iter()
            .filter(|r| r.observation_id == id)
            .map(|r| r.camera)
            .collect();
        assert_eq!(views, Camera::ALL);
    }
}

#[test]
fn reject_all_discards_and_warns() {
    let obs = observations(5, &Camera::ALL);
    let critic = MockCritic::new(MockCriticPolicy::RejectAll);
    let batch = build_factor_batch(&obs, "person", &config(), &MockEditor::new(1), &critic).unwrap();
    assert_eq!(batch.discarded_count(), 5);
    assert!(batch.retained.is_empty());
    assert_eq!(batch.retention_rate, 0.0);
    assert!(batch.warnings[0].contains(&SMALL_BATCH.to_string()));
}

#[test]
fn malformed_mock_critic_is_a_failure() {
    let obs = observations(3, &[Camera::Wrist]);
    let critic = MockCritic::new(MockCriticPolicy::Malformed);
    let batch = build_factor_batch(&obs, "person", &config(), &MockEditor::new(1), &critic).unwrap();
    assert_eq!((batch.discarded_count(), batch.failed_count()), (0, 3));
    assert!(batch.failed[0].reason.contains("malformed critic response"));
}

#[test]
fn transport_errors_are_retried() {
    let edit_body = fixture("edit_response.json");
    let accept = fixture("critique_response_accept.json");
    // the first two /edit calls fail with 503
    let server = MiniServer::start(move |path, _, n| match (path, n) {
        ("/edit", 0 | 1) => Reply {
            status: 503,
            body: "busy".into(),
        },
        ("/edit", _) => Reply::ok(edit_body.clone()),
        _ => Reply::ok(accept.clone()),
    });
    let job = EditJob {
        observation_id: "o1".into(),
        camera: Camera::Overhead,
        image: png(1, 4),
        factor: "background".into(),
        full_prompt: "p".into(),
        short_instruction: "s".into(),
        n_variants: 4,
    };
    let settings = JobSettings {
        critic_template: "critic",
        retry: RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        },
        zoom: None,
    };
    let editor = RemoteEditor::new(&server.url).unwrap();
    let critic = RemoteCritic::new(&server.url).unwrap();
    let chosen = run_edit_job(&job, &editor, &critic, &settings).unwrap().unwrap();
    assert_eq!(chosen.candidate_index, 2);
    assert_eq!(server.count(), 4);
}

#[test]
fn exhausted_retries_fail_the_job() {
    let server = MiniServer::start(|_, _, _| Reply {
        status: 500,
        body: String::new(),
    });
    let job = EditJob {
        observation_id: "o1".into(),
        camera: Camera::Wrist,
        image: png(1, 4),
        factor: "f".into(),
        full_prompt: "p".into(),
        short_instruction: "s".into(),
        n_variants: 4,
    };
    let settings = JobSettings {
        critic_template: "critic",
        retry: RetryPolicy::immediate(2),
        zoom: None,
    };
    let err = run_edit_job(
        &job,
        &RemoteEditor::new(&server.url).unwrap(),
        &RemoteCritic::new(&server.url).unwrap(),
        &settings,
    )
    .unwrap_err();
    assert!(matches!(err, JobFailure::Editor(_)));
    assert_eq!(server.count(), 2);
}

#[test]
fn unreachable_service_is_a_failure() {
    let obs = observations(1, &[Camera::Overhead]);
    let mut cfg = config();
    cfg.retry = RetryPolicy::immediate(1);
    let editor = RemoteEditor::with_timeout("http://127.0.0.1:9", Duration::from_secs(2)).unwrap();
    let batch = build_factor_batch(&obs, "f", &cfg, &editor, &MockCritic::default()).unwrap();
    assert_eq!(batch.failed_count(), 1);
}

#[test]
fn wrong_candidate_count_is_malformed() {
    let body = fixture("edit_response.json");
    let server = MiniServer::start(move |_, _, _| Reply::ok(body.clone()));
    let obs = observations(1, &[Camera::Overhead]);
    let mut cfg = config();
    cfg.n_variants = 3;
    let batch = build_factor_batch(
        &obs,
        "f",
        &cfg,
        &RemoteEditor::new(&server.url).unwrap(),
        &MockCritic::default(),
    )
    .unwrap();
    assert_eq!(batch.failed_count(), 1);
    assert!(batch.failed[0].reason.contains("malformed edit response"));
}

#[test]
fn batch_directory_layout_and_zoom() {
    let obs = observations(4, &Camera::ALL);
    let mut cfg = config();
    cfg.zoom = Some(CropRect::default());
    let batch = build_factor_batch(&obs, "table_height", &cfg, &MockEditor::new(3), &MockCritic::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    batch.write_dir(dir.path()).unwrap();

    let summary: BatchSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("batch.json")).unwrap()).unwrap();
    assert_eq!(summary.retained_count, 4);
    assert_eq!(summary.retained[0].file, "images/obs000__overhead.png");
    assert_eq!(summary.retained[1].file, "images/obs000__wrist.png");
    for record in &summary.retained {
        let bytes = fs::read(dir.path().join(&record.file)).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (12, 12));
    }
    // rewriting replaces stale files
    let before = snapshot(dir.path());
    batch.write_dir(dir.path()).unwrap();
    assert_eq!(snapshot(dir.path()), before);

    // retained images read back as observations
    let again = read_observation_dir(&dir.path().join("images")).unwrap();
    assert_eq!(again.len(), 4);
    assert_eq!(again[0].id, "obs000");
    assert_eq!(again[0].images.iter().map(|i| i.0).collect::<Vec<_>>(), Camera::ALL);
}

#[test]
fn observation_dir_ignores_unrelated_files() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("b__wrist.png"), png(1, 3).bytes).unwrap();
    fs::write(dir.path().join("a__overhead.jpg"), b"jpeg").unwrap();
    fs::write(dir.path().join("a__side.png"), b"x").unwrap();
    fs::write(dir.path().join("notes.txt"), b"x").unwrap();
    let obs = read_observation_dir(dir.path()).unwrap();
    assert_eq!(obs.iter().map(|o| o.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    assert_eq!(obs[0].images[0].1.media_type, "image/jpeg");
}

#[test]
fn backends_from_urls() {
    let (editor, critic) = backends("mock:accept_rate=0", "mock:policy=accept_first", 1).unwrap();
    let obs = observations(2, &[Camera::Overhead]);
    let batch = build_factor_batch(&obs, "f", &config(), &editor, &critic).unwrap();
    assert_eq!(batch.retained_observations().len(), 2);
    assert!(backends("mock:nope=1", "mock:", 0).is_err());
    assert!(MockOptions::parse("http://localhost").is_none());
}

#[test]
fn builtin_templates_render() {
    let library = TemplateLibrary::builtin();
    let mut subs = BTreeMap::new();
    subs.insert("target color".to_string(), "blue".to_string());
    let full = library.render_full("background", Camera::Wrist, &subs).unwrap();
    assert!(full.contains("blue") && !full.contains("<target color>"));
    let short = library.render_short("background", &subs).unwrap();
    assert_eq!(short, "Change the color of the pink mat to blue");
    assert!(library.full_key("lighting", Camera::Overhead).unwrap() == "lighting_overhead");

    subs.insert("short edit instruction".into(), short);
    let critic = library.render("critic", &subs).unwrap();
    assert!(critic.contains("<Image 3>") && critic.contains("\"Change the color of the pink mat to blue\""));
    assert!(library.render("background", &BTreeMap::new()).is_err());
}
