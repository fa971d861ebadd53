//! Library-level pipelines: simulation → observables → reports.

use std::sync::Arc;

use kpzlab::dynamics::{sample_initial, simulate, stream_rng, InitialKind, SimParams, Trajectory};
use kpzlab::ensembles::{example_library, ModelChoice, ModelFunctionals};
use kpzlab::harness::{run_experiment, ExperimentConfig, ExperimentId, Report};
use kpzlab::observables::{gartner_field, height_field, jump_multiplicativity};

fn small(id: ExperimentId, sizes: Vec<usize>, replicas: usize, model: ModelChoice) -> ExperimentConfig {
    ExperimentConfig { sizes, replicas, model, ..ExperimentConfig::defaults(id) }
}

#[test]
fn residual_scaling_holds_for_every_library_model() {
    // The constant part of the flux must be renormalized away exactly;
    // otherwise the statistic grows like N for d ≡ c.
    for model in example_library() {
        let report = run_experiment(&small(ExperimentId::E2, vec![32, 128, 512], 10, model.clone())).unwrap();
        assert!(report.passed(), "{model:?}\n{}", report.summary());
    }
}

#[test]
fn binary_trajectory_round_trip_preserves_observables() {
    let model = Arc::new(ModelFunctionals::new(&ModelChoice::Wide { gamma: 0.3 }.functional()).unwrap());
    let init = sample_initial(&InitialKind::StationaryZeroSum, 64, &mut stream_rng(5, 0)).unwrap();
    let params = SimParams { model: model.clone(), t_end: 0.02, snapshot_dt: 1e-3, seed: 5, stream: 0, log_events: true };
    let traj = simulate(&params, init).unwrap();
    let mut buf = Vec::new();
    traj.write_binary(&mut buf).unwrap();
    let back = Trajectory::read_binary(buf.as_slice()).unwrap();
    assert_eq!(back.times, traj.times);
    assert_eq!(back.fluxes, traj.fluxes);
    assert_eq!(height_field(&back).unwrap().h, height_field(&traj).unwrap().h);
    let (a, b) = (gartner_field(&traj, &model).unwrap(), gartner_field(&back, &model).unwrap());
    assert_eq!(a.log_z, b.log_z);
    let (site, other) = jump_multiplicativity(&traj, &model).unwrap();
    assert!(site <= 1e-12 && other <= 1e-12, "{site} {other}");
}

#[test]
fn experiments_are_reproducible() {
    let run = |cfg: &ExperimentConfig| -> Report { run_experiment(cfg).unwrap() };
    let cfg = small(ExperimentId::E7, vec![32], 30, ModelChoice::NextNeighbor { beta: 0.5 });
    let (a, b) = (run(&cfg), run(&cfg));
    let values = |r: &Report| r.checks.iter().map(|c| c.value).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    let other = run(&ExperimentConfig { seed: cfg.seed + 1, ..cfg.clone() });
    assert_ne!(values(&a), values(&other));
}

#[test]
fn reports_survive_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        output: Some(dir.path().join("e4")),
        params: kpzlab::harness::ExperimentParams { lengths: vec![8, 16, 32], ..Default::default() },
        ..small(ExperimentId::E4, vec![64], 50, ModelChoice::NextNeighbor { beta: 0.5 })
    };
    let report = run_experiment(&cfg).unwrap();
    let back = Report::read(&dir.path().join("e4").join("report.json")).unwrap();
    assert_eq!(back.checks.len(), report.checks.len());
    assert_eq!(back.passed(), report.passed());
    assert_eq!(kpzlab::harness::collect_reports(dir.path()).unwrap().len(), 1);
}
