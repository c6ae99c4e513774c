use fedsel::data::{synth_generate, SynthParams};
use fedsel::metrics::{MetricSet, PredictionTrace};
use fedsel::sim::{
    draw_checkpoints, prepare, read_report, run_experiment, run_experiment_logged, serialize_report, sweep,
    train_period, Direction, PreparedData, ReportFormat, RunOptions, SweepGrid,
};
use fedsel::{ExperimentConfig, Strategy};

fn setup(devices: usize, steps: usize, heterogeneity: f64, seed: u64) -> (ExperimentConfig, PreparedData) {
    let params = SynthParams { devices, steps, d: 3, heterogeneity, seed, ..Default::default() };
    let ds = synth_generate(&params).unwrap();
    let cfg = ExperimentConfig { devices, d: 3, seed, checkpoints: 5, horizon: 100, s_interval: 100, ..Default::default() };
    let data = prepare(&ds.streams, cfg.train_fraction, false).unwrap();
    (cfg, data)
}

fn run(cfg: &ExperimentConfig, data: &PreparedData, strategies: &[Strategy]) -> fedsel::sim::ResultsReport {
    run_experiment(cfg, data, strategies, RunOptions::default()).unwrap()
}

#[test]
fn minimal_run_has_one_row() {
    let (mut cfg, data) = setup(1, 1500, 0.3, 1);
    cfg.checkpoints = 1;
    let r = run(&cfg, &data, &[Strategy::L]);
    assert_eq!(r.metrics.len(), 1);
    assert_eq!(r.metrics[&Strategy::L].len(), 1);
    assert_eq!(r.checkpoints.len(), 1);
}

#[test]
fn report_shape_and_aggregates() {
    let (cfg, data) = setup(4, 2000, 0.3, 2);
    let r = run(&cfg, &data, &Strategy::ALL);
    assert_eq!(r.strategies, Strategy::ALL.to_vec());
    for s in Strategy::ALL {
        let rows = &r.metrics[&s];
        assert_eq!(rows.len(), cfg.checkpoints);
        assert_eq!(r.aggregates[&s], MetricSet::mean(rows).unwrap());
    }
    let pos: Vec<usize> = r.checkpoints.iter().map(|c| c.position).collect();
    assert!(pos.windows(2).all(|w| w[1] - w[0] >= cfg.horizon), "{pos:?}");
    assert!(pos.iter().all(|&p| p + cfg.horizon <= data.test[0].len()));
    assert_eq!(r.diagnostics.asm_mean_alpha.len(), 4);
    assert_eq!(r.diagnostics.switch_counts.len(), 4);
    assert!(r.diagnostics.asm_mean_alpha.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn same_seed_same_report() {
    let (cfg, data) = setup(3, 2000, 0.3, 3);
    assert_eq!(run(&cfg, &data, &Strategy::ALL), run(&cfg, &data, &Strategy::ALL));
}

#[test]
fn checkpoints_do_not_touch_live_state() {
    let (cfg, data) = setup(3, 2000, 0.3, 4);
    let with = run_experiment(&cfg, &data, &Strategy::ALL, RunOptions { workers: Some(2), evaluate_checkpoints: true }).unwrap();
    let without =
        run_experiment(&cfg, &data, &Strategy::ALL, RunOptions { workers: Some(2), evaluate_checkpoints: false }).unwrap();
    assert!(without.checkpoints.is_empty());
    assert_eq!(with.diagnostics.live_trajectory_hash, without.diagnostics.live_trajectory_hash);
}

fn window_mae(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / pairs.len() as f64
}

#[test]
fn local_checkpoints_match_a_hand_rolled_prequential_loop() {
    let (cfg, data) = setup(3, 2500, 0.3, 5);
    let r = run(&cfg, &data, &[Strategy::L]);
    let training = train_period(&cfg, &data.train).unwrap();
    let mut per_device: Vec<Vec<(f64, f64)>> = Vec::new();
    for (init, stream) in training.devices.iter().zip(&data.test) {
        let mut m = init.trained_local.clone();
        let mut pairs = Vec::new();
        for s in &stream.samples {
            pairs.push((m.predict(&s.x).unwrap(), s.y));
            m.sgd_step_mut(s, cfg.eta, cfg.lambda).unwrap();
        }
        per_device.push(pairs);
    }
    for (c, row) in r.checkpoints.iter().zip(&r.metrics[&Strategy::L]) {
        let pooled: Vec<(f64, f64)> =
            per_device.iter().flat_map(|p| p[c.position..c.position + cfg.horizon].iter().copied()).collect();
        assert!((row.mae - window_mae(&pooled)).abs() < 1e-12, "checkpoint {}", c.index);
    }
}

#[test]
fn federated_model_is_frozen_between_epochs() {
    let (mut cfg, data) = setup(3, 2500, 0.3, 6);
    // no epoch falls inside the test region
    cfg.s_interval = 1_000_000;
    let r = run(&cfg, &data, &[Strategy::FM]);
    let global = train_period(&cfg, &data.train).unwrap().initial_global;
    for (c, row) in r.checkpoints.iter().zip(&r.metrics[&Strategy::FM]) {
        let mut trace = PredictionTrace::new();
        for stream in &data.test {
            for s in &stream.samples[c.position..c.position + cfg.horizon] {
                trace.push(global.predict(&s.x).unwrap(), s.y);
            }
        }
        assert_eq!(row.mae, fedsel::metrics::mae(&trace).unwrap());
    }
    assert!(r.diagnostics.communication[&Strategy::FM].is_empty());
}

#[test]
fn communication_accounting() {
    let (mut cfg, data) = setup(6, 2000, 0.3, 7);
    cfg.selection_fraction = 0.5;
    let (r, events) = run_experiment_logged(&cfg, &data, &Strategy::ALL, RunOptions::default()).unwrap();
    let test_len = data.test[0].len() as u64;
    let epochs = test_len / cfg.s_interval;
    for s in [Strategy::FM, Strategy::EFM, Strategy::LFM, Strategy::TOSM] {
        let comm = &r.diagnostics.communication[&s];
        assert_eq!(comm.len() as u64, epochs, "{s}");
        for e in comm {
            assert_eq!(e.selected, 3);
            assert_eq!(e.up, 3);
            let down = match s {
                Strategy::FM | Strategy::TOSM => 6,
                Strategy::EFM => 3,
                _ => 0,
            };
            assert_eq!(e.down, down, "{s}");
        }
        let ups = events.iter().filter(|ev| ev.strategy == s && ev.direction == Direction::Up).count();
        assert_eq!(ups as u64, 3 * epochs);
    }
    assert!(!r.diagnostics.communication.contains_key(&Strategy::L));
    assert!(!r.diagnostics.communication.contains_key(&Strategy::GM));
}

#[test]
fn pooling_beats_local_models_on_iid_data() {
    let mut gm = 0.0;
    let mut l = 0.0;
    for seed in 0..10 {
        let params = SynthParams { devices: 10, steps: 5000, d: 3, heterogeneity: 0.0, seed, ..Default::default() };
        let ds = synth_generate(&params).unwrap();
        let cfg = ExperimentConfig { devices: 10, d: 3, seed, checkpoints: 12, ..Default::default() };
        let data = prepare(&ds.streams, cfg.train_fraction, false).unwrap();
        let r = run(&cfg, &data, &[Strategy::GM, Strategy::L]);
        gm += r.aggregates[&Strategy::GM].mae;
        l += r.aggregates[&Strategy::L].mae;
    }
    assert!(gm <= l * 1.02, "GM {gm} L {l}");
}

#[test]
fn unit_sweep_equals_single_run() {
    let (cfg, data) = setup(3, 2000, 0.3, 8);
    let grid = SweepGrid { beta: Some(vec![cfg.beta]), ..Default::default() };
    let entries = sweep(&cfg, &grid, &data, &Strategy::ALL, RunOptions::default()).unwrap();
    assert_eq!(entries.len(), 1);
    let mut swept = entries[0].outcome.clone().unwrap();
    assert_eq!(swept.params["beta"], cfg.beta);
    swept.params.clear();
    assert_eq!(swept, run(&cfg, &data, &Strategy::ALL));
}

#[test]
fn sweep_entries_are_independent() {
    let (cfg, data) = setup(3, 2000, 0.3, 9);
    let big = SweepGrid { beta: Some(vec![0.1, 0.5, 0.9]), ..Default::default() };
    let small = SweepGrid { beta: Some(vec![0.1, 0.9]), ..Default::default() };
    let a = sweep(&cfg, &big, &data, &Strategy::ALL, RunOptions::default()).unwrap();
    let b = sweep(&cfg, &small, &data, &Strategy::ALL, RunOptions::default()).unwrap();
    assert_eq!(a[0].outcome.as_ref().unwrap(), b[0].outcome.as_ref().unwrap());
    assert_eq!(a[2].outcome.as_ref().unwrap(), b[1].outcome.as_ref().unwrap());
}

#[test]
fn sweep_failures_do_not_stop_siblings() {
    let (cfg, data) = setup(3, 2000, 0.3, 10);
    let grid = SweepGrid { beta: Some(vec![0.5, 1.5]), ..Default::default() };
    let entries = sweep(&cfg, &grid, &data, &Strategy::ALL, RunOptions::default()).unwrap();
    assert!(entries[0].outcome.is_ok());
    let err = entries[1].outcome.as_ref().unwrap_err();
    assert!(err.contains("beta=1.5"), "{err}");
    assert!(SweepGrid { beta: Some(vec![]), ..Default::default() }.expand(&cfg).is_err());
}

#[test]
fn beta_only_moves_tosm() {
    let (cfg, data) = setup(3, 2000, 0.3, 11);
    let a = run(&cfg, &data, &Strategy::ALL);
    let b = run(&ExperimentConfig { beta: 0.9, ..cfg.clone() }, &data, &Strategy::ALL);
    for s in Strategy::ALL {
        if s == Strategy::TOSM {
            assert_ne!(a.metrics[&s], b.metrics[&s]);
        } else {
            assert_eq!(a.metrics[&s], b.metrics[&s], "{s}");
        }
    }
}

#[test]
fn report_files_round_trip() {
    let (cfg, data) = setup(3, 2000, 0.3, 12);
    let r = run(&cfg, &data, &Strategy::ALL);
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    serialize_report(&r, ReportFormat::Json, &json).unwrap();
    assert_eq!(read_report(&json).unwrap(), r);

    let csv = dir.path().join("r.csv");
    serialize_report(&r, ReportFormat::Csv, &csv).unwrap();
    let rows = csv::Reader::from_path(&csv).unwrap().records().count();
    // mean_alpha, switch_count, and comm_up/comm_down for five federated strategies
    let diagnostics = 2 + 2 * 6;
    assert_eq!(rows, 8 * cfg.checkpoints * 4 + diagnostics);
}

#[test]
fn report_without_dual_models_has_empty_diagnostics() {
    let (cfg, data) = setup(2, 2000, 0.3, 13);
    let r = run(&cfg, &data, &[Strategy::L, Strategy::GM]);
    assert!(r.diagnostics.asm_mean_alpha.is_empty());
    assert!(r.diagnostics.switch_counts.is_empty());
    let text = serde_json::to_string(&r).unwrap();
    assert!(!text.contains("asm_mean_alpha"));
    assert_eq!(serde_json::from_str::<fedsel::sim::ResultsReport>(&text).unwrap(), r);
}

#[test]
fn checkpoint_drawing() {
    let a = draw_checkpoints(10_000, 24, 250, 7).unwrap();
    assert_eq!(a, draw_checkpoints(10_000, 24, 250, 7).unwrap());
    assert_ne!(a, draw_checkpoints(10_000, 24, 250, 8).unwrap());
    assert!(a.windows(2).all(|w| w[1] - w[0] >= 250));
    assert!(a.iter().all(|&p| p <= 10_000 - 250));
    assert!(draw_checkpoints(1000, 5, 250, 0).is_err());
    assert_eq!(draw_checkpoints(250, 1, 250, 0).unwrap(), vec![0]);
}

#[test]
fn mismatched_inputs_are_config_errors() {
    let (cfg, data) = setup(3, 2000, 0.3, 14);
    let wrong_k = ExperimentConfig { devices: 4, ..cfg.clone() };
    assert!(run_experiment(&wrong_k, &data, &Strategy::ALL, RunOptions::default()).unwrap_err().is_usage());
    let wrong_d = ExperimentConfig { d: 5, ..cfg.clone() };
    assert!(run_experiment(&wrong_d, &data, &Strategy::ALL, RunOptions::default()).unwrap_err().is_usage());
    assert!(run_experiment(&cfg, &data, &[], RunOptions::default()).is_err());
    let too_many = ExperimentConfig { checkpoints: 500, ..cfg };
    assert!(run_experiment(&too_many, &data, &Strategy::ALL, RunOptions::default()).is_err());
}

#[test]
fn divergence_names_device_and_step() {
    let (mut cfg, data) = setup(3, 2000, 0.3, 15);
    cfg.eta = 1e6;
    let err = run_experiment(&cfg, &data, &[Strategy::L], RunOptions::default()).unwrap_err();
    assert!(!err.is_usage());
    assert!(err.to_string().contains("device"), "{err}");
}
