use std::path::PathBuf;

use tsnet::experiments::{
    emit_outputs, read_report, run_ablation, run_active_learning, run_antinoise, run_comparison, run_experiment, Arm,
    DataSource, ExperimentConfig, ExperimentKind, IndexKind, Region, HISTORY_FILE, METRICS_FILE, MODEL_FILE,
    PREDICTIONS_FILE,
};
use tsnet::training::{Checkpoint, Variant};

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn diabetes(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(
        kind,
        DataSource::Csv {
            path: data_dir().join("diabetes.csv"),
            schema: data_dir().join("diabetes.schema.json"),
        },
    );
    shrink(&mut cfg, 3);
    cfg
}

fn toy1d(kind: ExperimentKind, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(kind, DataSource::Toy1d);
    shrink(&mut cfg, epochs);
    cfg
}

fn shrink(cfg: &mut ExperimentConfig, epochs: usize) {
    cfg.train.epochs = epochs;
    cfg.train.mu_hidden = vec![8];
    cfg.train.sigma_hidden = vec![4];
    cfg.train.dpm.embed_dim = 4;
    cfg.train.dpm.hidden = 4;
}

#[test]
fn diabetes_comparison_reports_every_seed() {
    let cfg = diabetes(ExperimentKind::Compare);
    let mut run = run_comparison(&cfg).unwrap();
    let r = &run.report;
    assert!(r.failed_seeds.is_empty(), "{:?}", r.failed_seeds);
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.aggregates.len(), 1);
    let agg = &r.aggregates[0];
    assert_eq!(agg.seeds, cfg.seeds);
    let mses: Vec<f64> = r.rows.iter().map(|row| row.metrics.mse).collect();
    assert!((agg.mse.mean - mses.iter().sum::<f64>() / 3.0).abs() < 1e-9 * agg.mse.mean);
    // 442 rows at 6:2:2
    assert!(r.rows.iter().all(|row| row.n_eval == 88 && row.n_train == 266));
    assert!(r.rows.iter().all(|row| row.region.is_none()));

    let dir = tempfile::tempdir().unwrap();
    emit_outputs(dir.path(), &mut run.report, run.showcase.as_ref()).unwrap();
    for f in [METRICS_FILE, PREDICTIONS_FILE, HISTORY_FILE, MODEL_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(read_report(&dir.path().join(METRICS_FILE)).unwrap(), run.report);
    let preds = std::fs::read_to_string(dir.path().join(PREDICTIONS_FILE)).unwrap();
    let header = preds.lines().next().unwrap();
    assert!(header.starts_with("age,sex,bmi,") && header.ends_with(",mu_target,var_target,k_d"));
    assert_eq!(preds.lines().count(), 89);
    let ck = Checkpoint::load(&dir.path().join(MODEL_FILE)).unwrap();
    assert_eq!(ck.seed, cfg.seeds[0]);
}

#[test]
fn reports_are_bitwise_reproducible() {
    let cfg = toy1d(ExperimentKind::Toy1d, 3);
    let bytes = || {
        let mut run = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_outputs(dir.path(), &mut run.report, run.showcase.as_ref()).unwrap();
        [METRICS_FILE, PREDICTIONS_FILE]
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn report_does_not_echo_the_output_directory() {
    let mut cfg = toy1d(ExperimentKind::Toy1d, 1);
    cfg.seeds = vec![0];
    cfg.out_dir = Some(PathBuf::from("/somewhere/else"));
    let run = run_comparison(&cfg).unwrap();
    assert_eq!(run.report.config.out_dir, None);
    assert!(!serde_json::to_string(&run.report).unwrap().contains("/somewhere/else"));
}

#[test]
fn toy_regions_partition_the_grid() {
    let mut cfg = toy1d(ExperimentKind::Toy1d, 2);
    cfg.seeds = vec![5];
    let run = run_comparison(&cfg).unwrap();
    let n = |region| {
        run.report
            .rows
            .iter()
            .find(|r| r.region == Some(region))
            .map_or(0, |r| r.n_eval)
    };
    assert_eq!(n(Region::All), 300);
    assert_eq!(n(Region::In) + n(Region::Ext), 300);
    assert!(n(Region::In) > 0 && n(Region::Ext) > 0);
}

#[test]
fn ablation_covers_every_variant() {
    let mut cfg = toy1d(ExperimentKind::Ablate, 1);
    cfg.seeds = vec![0];
    let run = run_ablation(&cfg).unwrap();
    let all: Vec<Variant> = run
        .report
        .rows
        .iter()
        .filter(|r| r.region == Some(Region::All))
        .map(|r| r.variant)
        .collect();
    assert_eq!(all, Variant::ALL.to_vec());
    assert_eq!(run.report.rows.len(), 3 * Variant::ALL.len());
    assert_eq!(run.showcase.unwrap().train_config.variant, Variant::Full);

    let mut tabular = diabetes(ExperimentKind::Ablate);
    tabular.seeds = vec![0];
    assert!(run_ablation(&tabular).is_err());
}

#[test]
fn antinoise_index_is_relative_to_clean_training() {
    let mut cfg = diabetes(ExperimentKind::Antinoise);
    cfg.seeds = vec![0, 1];
    cfg.antinoise.rates = vec![0.0, 0.5, 1.0];
    let run = run_antinoise(&cfg).unwrap();
    assert_eq!(run.report.rows.len(), 6);
    let rpi = &run.report.indices[0];
    assert_eq!(rpi.index, IndexKind::Rpi);
    assert_eq!(rpi.points[0].value, Some(1.0));
    let base = rpi.points[0].mse;
    for p in &rpi.points {
        let agg = run.report.find_aggregate(|k| k.noise_rate == Some(p.at)).unwrap();
        assert_eq!(p.mse, agg.mse.mean);
        assert_eq!(p.value, Some(p.mse / base));
    }
}

#[test]
fn active_learning_grows_both_arms_equally() {
    let mut cfg = toy1d(ExperimentKind::Active, 2);
    cfg.seeds = vec![0, 1];
    let run = run_active_learning(&cfg).unwrap();
    let r = &run.report;
    assert!(r.failed_seeds.is_empty());
    let cycles = cfg.active.cycles;
    // 240 pool rows: 48 labeled up front, then ceil(0.1 * 192) = 20 per cycle
    for arm in [Arm::Uncertainty, Arm::Random] {
        for seed in &cfg.seeds {
            let sizes: Vec<usize> = r
                .rows
                .iter()
                .filter(|row| row.arm == Some(arm) && row.seed == *seed)
                .map(|row| row.n_train)
                .collect();
            assert_eq!(sizes, (0..=cycles).map(|c| 48 + 20 * c).collect::<Vec<_>>(), "{arm:?}");
        }
    }
    let cycle0 = |arm| r.find_aggregate(|k| k.arm == Some(arm) && k.cycle == Some(0)).unwrap().mse.mean;
    assert_eq!(cycle0(Arm::Uncertainty), cycle0(Arm::Random));
    for s in &r.indices {
        assert_eq!(s.index, IndexKind::Pir);
        assert_eq!(s.points[0].value, Some(0.0));
        let m0 = s.points[0].mse;
        for p in &s.points {
            assert_eq!(p.value, Some((m0 - p.mse) / m0));
        }
    }
    assert_eq!(r.indices.len(), 2);
}

#[test]
fn config_file_paths_resolve_next_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(data_dir().join("diabetes.csv"), dir.path().join("d.csv")).unwrap();
    std::fs::copy(data_dir().join("diabetes.schema.json"), dir.path().join("s.json")).unwrap();
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(
        &cfg_path,
        r#"{"experiment": "compare", "seeds": [4],
            "data": {"kind": "csv", "path": "d.csv", "schema": "s.json"},
            "train": {"epochs": 1, "mu_hidden": [4], "sigma_hidden": [4], "prior": {"mu": "auto"}}}"#,
    )
    .unwrap();
    let cfg = ExperimentConfig::from_json_file(&cfg_path).unwrap();
    let run = run_experiment(&cfg).unwrap();
    assert_eq!(run.report.completed_seeds(), vec![4]);
}
