use std::time::Instant;

use terrainseg::pipeline::{run_coarse_pipeline, stage_dir, PipelineConfig, Provenance};
use terrainseg::report::{build_report, write_report, ReportOptions};
use terrainseg::synthset::{generate, SynthConfig, SynthDomain};
use terrainseg::Error;

fn small_run(dir: &std::path::Path) -> PipelineConfig {
    let mut id = SynthConfig::new("id", 8, 56, SynthDomain::Id, 3);
    id.val_images = 4;
    generate(&id, &dir.join("id")).unwrap();
    let ood = SynthConfig::new("ood", 6, 56, SynthDomain::Ood, 4);
    generate(&ood, &dir.join("ood")).unwrap();
    let mut cfg = PipelineConfig::new("id/manifest.json".into(), Some("ood/manifest.json".into()));
    cfg.subset_size = Some(4);
    cfg.train.epochs = 2;
    cfg.train.crop = 56;
    cfg.train.batch_size = 4;
    cfg
}

#[test]
fn every_stage_leaves_hashed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    let run = dir.path().join("run");
    let t = Instant::now();
    let summary = run_coarse_pipeline(&cfg, dir.path(), &run).unwrap();
    eprintln!("pipeline: {:.1}s", t.elapsed().as_secs_f64());
    assert_eq!(summary.subset.len(), 4);
    assert!(summary.coarse_density > 0.0 && summary.coarse_density < 1.0);

    let prov = Provenance::read(&run).unwrap();
    assert!(prov.complete);
    assert_eq!(prov.failed, None);
    let names: Vec<_> = prov.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "coarsify",
            "select",
            "train_a",
            "train_b",
            "pseudolabel",
            "retrain",
            "evaluate"
        ]
    );
    for stage in &prov.stages {
        assert!(!stage.artifacts.is_empty(), "{} has no artifacts", stage.name);
        for a in &stage.artifacts {
            let sha = terrainseg::pipeline::file_sha256(&run.join(&a.path)).unwrap();
            assert_eq!(sha, a.sha256, "{}", a.path.display());
        }
    }
    // Each stage reads the configured manifests or files earlier stages made.
    let mut known = vec![
        std::path::absolute(dir.path().join("id/manifest.json")).unwrap(),
        std::path::absolute(dir.path().join("ood/manifest.json")).unwrap(),
    ];
    for stage in &prov.stages {
        for input in &stage.inputs {
            assert!(
                known.contains(input),
                "{} reads undeclared {}",
                stage.name,
                input.display()
            );
        }
        known.extend(stage.artifacts.iter().map(|a| run.join(&a.path)));
    }
    for f in ["model.safetensors", "history.csv", "train_config.toml"] {
        assert!(stage_dir(&run, "retrain").join(f).is_file());
    }

    // Report over the parent directory finds the run.
    let out = dir.path().join("report");
    let opts = ReportOptions::default();
    let (report, files) = write_report(&[dir.path().to_path_buf()], &out, &opts).unwrap();
    assert_eq!(report.runs.len(), 1);
    assert!(report.conclusive, "{:?}", report.gaps);
    assert_eq!(report.quality_rows().len(), 1);
    assert_eq!(report.strategy_rows().len(), 3);
    assert!(!files.is_empty());
    let tax = &report.runs[0].fusion.as_ref().unwrap().class_names;
    let manifest = terrainseg::dataio::read_manifest(&dir.path().join("id/manifest.json")).unwrap();
    assert_eq!(tax, manifest.taxonomy.names());
    let mut palette: Vec<[u8; 3]> = manifest.taxonomy.colors().iter().map(|c| c.0).collect();
    palette.push([0, 0, 0]);
    for f in files.iter().filter(|f| f.to_string_lossy().ends_with("_palette.png")) {
        let img = image::open(f).unwrap().to_rgb8();
        assert!(
            img.pixels().all(|p| palette.contains(&p.0)),
            "{} has off-palette colors",
            f.display()
        );
    }

    // A modified artifact is flagged.
    let hist = stage_dir(&run, "train_a").join("history.csv");
    std::fs::write(&hist, "tampered").unwrap();
    let r = build_report(&[run.clone()]).unwrap();
    assert!(!r.conclusive);
    assert!(r.gaps.iter().any(|g| g.what.contains("history.csv")));

    // Without the provenance record no conclusion is drawn.
    std::fs::remove_file(run.join("provenance.json")).unwrap();
    let r = build_report(&[run.clone()]).unwrap();
    assert!(!r.conclusive);
    assert!(r.to_text().starts_with("UNVERIFIED"));
}

#[test]
fn failing_stage_is_named_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path());
    // A learning rate this large diverges in the first training stage.
    cfg.train.learning_rate = 1e30;
    let run = dir.path().join("run");
    let err = run_coarse_pipeline(&cfg, dir.path(), &run).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, "train_a"),
        e => panic!("unexpected error {e}"),
    }
    assert!(!err.is_config());
    let prov = Provenance::read(&run).unwrap();
    assert_eq!(prov.failed.as_deref(), Some("train_a"));
    assert!(!prov.complete);
    assert!(prov.stage("coarsify").is_some());
}
