use std::fs;

use redteam_core::synth::{reference_subset, run_ablation, sample_world, CellOutcome};
use redteam_core::{
    evaluate, generate_world, predict_all, rank_factors, run_ablation_manifest, select_worst, AblationGrid, Link,
    Manifest, ObservationSource, PredictOptions, SynthFactor, SynthWorldSpec,
};

fn small_world(seed: u64, shifts: &[f64]) -> SynthWorldSpec {
    SynthWorldSpec {
        dim: 64,
        n_nominal: 200,
        n_val: 200,
        factors: shifts
            .iter()
            .enumerate()
            .map(|(i, &shift)| SynthFactor {
                name: format!("f{i}"),
                shift,
                n_obs: 100,
            })
            .collect(),
        noise_scale: 0.1,
        seed,
        r_nom: 0.65,
        link: Link::default(),
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let spec = small_world(3, &[0.0, 0.5]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_world(&spec, a.path()).unwrap();
    generate_world(&spec, b.path()).unwrap();
    for file in [
        "manifest.json",
        "nominal.emb",
        "validation.emb",
        "factors/00_f0.emb",
        "factors/01_f1.emb",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let manifest = Manifest::from_path(a.path().join("manifest.json")).unwrap();
    let truth = manifest.measured_success.unwrap();
    assert_eq!(truth["f0"], 0.65);
    assert_eq!(truth["f1"], 0.65 * (-0.5f64).exp());
}

#[test]
fn unshifted_factors_are_exchangeable_with_nominal() {
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..50 {
        let world = sample_world(&small_world(seed, &[0.0, 0.0, 0.0])).unwrap();
        let report = redteam_core::predictor::predict_sets(
            &world.sets.nominal,
            &world.sets.validation,
            &world.sets.factors,
            5,
            0.65,
            ObservationSource::Edited,
        )
        .unwrap();
        for p in &report.predictions {
            total += p.anomaly_rate;
            count += 1;
        }
    }
    let mean = total / f64::from(count);
    assert!((mean - 0.35).abs() <= 0.05, "mean anomaly rate {mean}");
}

/// Adjacent shifts 3 noise scales apart must be ordered correctly in 95% of
/// seeds. The response to shift is quadratic, so the smallest steps are the
/// hardest; their anomaly rates differ by only a few percent, hence the large
/// factor sets.
#[test]
fn separated_shifts_are_ordered() {
    let n_pairs = 3;
    let seeds = 20;
    let mut agree = vec![0; n_pairs];
    for seed in 0..seeds {
        let mut spec = SynthWorldSpec::twelve_factor(100 + seed);
        spec.factors.truncate(n_pairs + 1);
        for f in &mut spec.factors {
            f.n_obs = 3000;
        }
        let world = sample_world(&spec).unwrap();
        let report = redteam_core::predictor::predict_sets(
            &world.sets.nominal,
            &world.sets.validation,
            &world.sets.factors,
            5,
            0.65,
            ObservationSource::Edited,
        )
        .unwrap();
        for (i, w) in report.predictions.windows(2).enumerate() {
            if w[0].predicted_success > w[1].predicted_success {
                agree[i] += 1;
            }
        }
    }
    for (i, &a) in agree.iter().enumerate() {
        assert!(f64::from(a) >= 0.95 * seeds as f64, "pair {i}: {a}/{seeds}");
    }
}

#[test]
fn one_cell_grid_matches_a_direct_run() {
    let spec = small_world(9, &[0.0, 0.4, 0.8, 1.6]);
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(&spec, dir.path()).unwrap();
    let manifest = Manifest::from_path(&world.manifest_path).unwrap();

    let grid = AblationGrid::new(vec![5], vec![spec.n_nominal]);
    let table = run_ablation_manifest(&manifest, &grid, 0).unwrap();
    let report = predict_all(&manifest, &PredictOptions::new(5)).unwrap();
    let direct = evaluate(&report, &world.ground_truth).unwrap();
    assert_eq!(
        table.cells[0].outcome,
        CellOutcome::Evaluated {
            spearman_rho: direct.spearman_rho,
            avg_prediction_error: direct.avg_prediction_error,
        }
    );
}

#[test]
fn ablation_is_reproducible() {
    let world = sample_world(&small_world(4, &[0.0, 0.6, 1.2])).unwrap();
    let grid = AblationGrid::new(vec![1, 3, 500], vec![50, 150]);
    let run = |seed| {
        run_ablation(
            &world.sets,
            &world.ground_truth,
            0.65,
            &grid,
            seed,
            ObservationSource::Edited,
        )
        .unwrap()
        .to_csv()
    };
    let csv = run(7);
    assert_eq!(csv, run(7));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(csv.matches("invalid,invalid").count(), 2);
    assert_ne!(reference_subset(200, 50, 7), reference_subset(200, 50, 8));
}

#[test]
fn all_zero_shifts_give_undefined_rank_correlation() {
    let world = sample_world(&small_world(1, &[0.0, 0.0])).unwrap();
    let grid = AblationGrid::new(vec![5], vec![100]);
    let table = run_ablation(
        &world.sets,
        &world.ground_truth,
        0.65,
        &grid,
        0,
        ObservationSource::Edited,
    )
    .unwrap();
    assert!(table.to_csv().lines().nth(1).unwrap().starts_with("5,100,undefined,"));
}

#[test]
fn real_observation_manifest_with_override() {
    let spec = small_world(12, &[0.0, 1.5, 3.0]);
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(&spec, dir.path()).unwrap();
    let mut manifest = Manifest::from_path(&world.manifest_path)
        .unwrap()
        .with_source(ObservationSource::Real);
    let path = dir.path().join("real.json");
    fs::write(&path, manifest.to_json()).unwrap();
    manifest = Manifest::from_path(&path).unwrap();
    assert_eq!(manifest.source, ObservationSource::Real);

    let report = predict_all(&manifest, &PredictOptions::new(5).with_r_nom(0.8)).unwrap();
    assert_eq!(report.calibration.r_nom, 0.8);
    assert!(report.predictions.iter().all(|p| p.source == ObservationSource::Real));
    let json = report.to_document().to_json();
    assert!(json.contains("\"source\": \"real\""));

    let worst = select_worst(&report, 1).unwrap();
    // f1 and f2 are both fully flagged; ties go to the lexicographically first
    assert_eq!(
        report.predictions[1].predicted_success,
        report.predictions[2].predicted_success
    );
    assert_eq!(worst, ["f1"]);
    assert_eq!(rank_factors(&report)[0].factor, "f1");
}
