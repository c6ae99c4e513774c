//! Experiment engine.
//!
//! A run has two phases. In the training period every device fits a local
//! model from scratch on its own training prefix; the first federated model
//! is the FedAvg of those models. The tail of the training period is scored
//! prequentially against a provisional federated model to build the TOSM
//! error distributions.
//!
//! The test period then steps every strategy over the same test streams.
//! Federation rounds are barriers; between them devices step independently
//! and may run on a worker pool. At seeded checkpoints a copy of each
//! strategy's state predicts the next `horizon` samples; the copy is thrown
//! away afterwards, so checkpoints never influence the live trajectory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{apply_normalization, fit_normalization, split, DeviceStream, NormalizationStats};
use crate::error::{Error, Result};
use crate::federation::{fedavg, mix_seed, ClientUpdate, EpochSchedule};
use crate::linmodel::{with_device, ModelParams};
use crate::metrics::{MetricSet, PredictionTrace};
use crate::strategies::{DeviceInit, DeviceState, Strategy, TrajectoryHash};
use crate::window::SlidingWindow;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const CHECKPOINT_STREAM: u64 = 0xC4EC_4901;
const SELECTION_STREAM: u64 = 0x005E_1EC7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// One model transmission between a device and the central location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommEvent {
    pub strategy: Strategy,
    pub t: u64,
    pub round: u64,
    pub device: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochComm {
    pub round: u64,
    pub t: u64,
    pub selected: usize,
    pub up: usize,
    pub down: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub index: usize,
    /// Offset into the test region.
    pub position: usize,
    /// Sample time of the first evaluated sample.
    pub t: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean alpha per device over the live test period (ASM).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub asm_mean_alpha: Vec<f64>,
    /// `(step, alpha averaged over devices)` (ASM).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha_trace: Vec<(u64, f64)>,
    /// Switches per device (TOSM).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub switch_counts: Vec<u64>,
    #[serde(default)]
    pub communication: BTreeMap<Strategy, Vec<EpochComm>>,
    /// MAE per device pooled over all checkpoints.
    #[serde(default)]
    pub per_device_mae: BTreeMap<Strategy, Vec<f64>>,
    /// Hash over live predictions and final models of every strategy.
    pub live_trajectory_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    /// Sweep tuple this report belongs to; empty for single runs.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub strategies: Vec<Strategy>,
    pub checkpoints: Vec<CheckpointInfo>,
    /// One entry per checkpoint, in checkpoint order.
    pub metrics: BTreeMap<Strategy, Vec<MetricSet>>,
    pub aggregates: BTreeMap<Strategy, MetricSet>,
    pub diagnostics: Diagnostics,
}

impl ResultsReport {
    /// Mean metrics of `strategy` over the checkpoints selected by `keep`.
    pub fn mean_over(&self, strategy: Strategy, keep: impl Fn(&CheckpointInfo) -> bool) -> Option<MetricSet> {
        let rows = self.metrics.get(&strategy)?;
        let picked: Vec<MetricSet> = self
            .checkpoints
            .iter()
            .zip(rows)
            .filter(|(c, _)| keep(c))
            .map(|(_, m)| *m)
            .collect();
        MetricSet::mean(&picked)
    }

    pub fn param_tag(&self) -> String {
        self.params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
    /// Disable to run the live trajectory only.
    pub evaluate_checkpoints: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: None,
            evaluate_checkpoints: true,
        }
    }
}

/// Train/test streams ready for [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Vec<DeviceStream>,
    pub test: Vec<DeviceStream>,
    pub normalization: Option<NormalizationStats>,
}

/// Optionally normalizes with statistics from the training prefix, then
/// splits every stream temporally.
pub fn prepare(streams: &[DeviceStream], train_fraction: f64, normalize: bool) -> Result<PreparedData> {
    let (streams, normalization) = if normalize {
        let stats = fit_normalization(streams, train_fraction)?;
        let normed = streams.iter().map(|s| apply_normalization(s, &stats)).collect::<Vec<_>>();
        (normed, Some(stats))
    } else {
        (streams.to_vec(), None)
    };
    let (train, test) = split(&streams, train_fraction)?;
    Ok(PreparedData { train, test, normalization })
}

// ---------------------------------------------------------------------------
// Training period
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub devices: Vec<DeviceInit>,
    pub initial_global: ModelParams,
    /// Central model trained on every device's raw training data.
    pub central: ModelParams,
}

pub fn train_period(cfg: &ExperimentConfig, train: &[DeviceStream]) -> Result<TrainingOutcome> {
    let d = cfg.d;
    struct Fit {
        local: ModelParams,
        cut: usize,
    }
    let fits = train
        .par_iter()
        .map(|stream| {
            let n = stream.len();
            let tail = ((cfg.cdf_fraction * n as f64) as usize).max(1);
            if n <= tail {
                return Err(Error::Training(format!(
                    "device {} has only {n} training samples",
                    stream.device_id
                )));
            }
            let cut = n - tail;
            let mut local = ModelParams::zeros(d);
            for _ in 0..cfg.train_passes {
                for s in &stream.samples[..cut] {
                    local
                        .sgd_step_mut(s, cfg.eta, cfg.lambda)
                        .map_err(|e| with_device(e, stream.device_id))?;
                }
            }
            Ok(Fit { local, cut })
        })
        .collect::<Result<Vec<_>>>()?;

    let provisional = fedavg(
        &fits
            .iter()
            .zip(train)
            .map(|(f, s)| ClientUpdate { device_id: s.device_id, params: f.local.clone(), n_k: f.cut })
            .collect::<Vec<_>>(),
    )?;

    let devices = fits
        .into_par_iter()
        .zip(train.par_iter())
        .map(|(fit, stream)| {
            let mut local = fit.local;
            let tail = &stream.samples[fit.cut..];
            let mut local_errors = Vec::with_capacity(tail.len());
            let mut federated_errors = Vec::with_capacity(tail.len());
            for s in tail {
                local_errors.push((s.y - local.predict(&s.x)?).abs());
                federated_errors.push((s.y - provisional.predict(&s.x)?).abs());
                local
                    .sgd_step_mut(s, cfg.eta, cfg.lambda)
                    .map_err(|e| with_device(e, stream.device_id))?;
            }
            let mut window = SlidingWindow::new(cfg.window_capacity);
            window.extend(stream.samples.iter().cloned());
            Ok(DeviceInit {
                device_id: stream.device_id,
                trained_local: local,
                initial_global: ModelParams::zeros(d),
                window,
                local_errors,
                federated_errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let initial_global = fedavg(
        &devices
            .iter()
            .map(|dev| ClientUpdate {
                device_id: dev.device_id,
                params: dev.trained_local.clone(),
                n_k: dev.window.len(),
            })
            .collect::<Vec<_>>(),
    )?;
    let devices = devices
        .into_iter()
        .map(|mut dev| {
            dev.initial_global = initial_global.clone();
            dev
        })
        .collect();

    let mut central = ModelParams::zeros(d);
    let longest = train.iter().map(DeviceStream::len).max().unwrap_or(0);
    for _ in 0..cfg.train_passes {
        for i in 0..longest {
            for stream in train {
                if let Some(s) = stream.samples.get(i) {
                    central
                        .sgd_step_mut(s, cfg.eta, cfg.lambda)
                        .map_err(|e| with_device(e, stream.device_id))?;
                }
            }
        }
    }

    Ok(TrainingOutcome { devices, initial_global, central })
}

// ---------------------------------------------------------------------------
// Fleet: all devices running one strategy
// ---------------------------------------------------------------------------

#[derive(Default)]
struct EpochLog {
    events: Vec<CommEvent>,
    epochs: Vec<EpochComm>,
}

#[derive(Debug, Clone)]
struct Fleet {
    strategy: Strategy,
    devices: Vec<DeviceState>,
    /// GM's shared model.
    central: Option<ModelParams>,
    /// The central location's current merged model.
    global: ModelParams,
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    schedule: EpochSchedule,
    test: &'a [DeviceStream],
}

impl Fleet {
    fn new(strategy: Strategy, training: &TrainingOutcome, cfg: &ExperimentConfig) -> Result<Self> {
        let devices = training
            .devices
            .iter()
            .map(|init| DeviceState::new(strategy, init, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            strategy,
            devices,
            central: (strategy == Strategy::GM).then(|| training.central.clone()),
            global: training.initial_global.clone(),
        })
    }

    /// Steps test indices `from..to`. Index `i` is step `i + 1`; a round
    /// runs after the step that lands on an epoch.
    fn advance(
        &mut self,
        ctx: &Context<'_>,
        from: usize,
        to: usize,
        mut traces: Option<&mut Vec<PredictionTrace>>,
        mut log: Option<&mut EpochLog>,
    ) -> Result<()> {
        if self.strategy == Strategy::GM {
            return self.advance_central(ctx, from, to, traces);
        }
        let s = ctx.schedule.s_interval as usize;
        let mut i = from;
        while i < to {
            // last index of the current inter-epoch segment
            let epoch_idx = (i / s + 1) * s - 1;
            let end = to.min(epoch_idx + 1);
            let run = |dev: &mut DeviceState, trace: Option<&mut PredictionTrace>| -> Result<()> {
                let stream = &ctx.test[dev.device_id].samples;
                let hi = end.min(stream.len());
                let lo = i.min(hi);
                let mut trace = trace;
                for sample in &stream[lo..hi] {
                    let pred = dev.step(sample, None, ctx.cfg)?;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.push(pred, sample.y);
                    }
                }
                Ok(())
            };
            match traces.as_deref_mut() {
                Some(tr) => self
                    .devices
                    .par_iter_mut()
                    .zip(tr.par_iter_mut())
                    .try_for_each(|(dev, t)| run(dev, Some(t)))?,
                None => self.devices.par_iter_mut().try_for_each(|dev| run(dev, None))?,
            }
            if end == epoch_idx + 1 && self.strategy.is_federated() {
                self.epoch(ctx, (epoch_idx + 1) as u64, log.as_deref_mut())?;
            }
            i = end;
        }
        Ok(())
    }

    fn advance_central(
        &mut self,
        ctx: &Context<'_>,
        from: usize,
        to: usize,
        mut traces: Option<&mut Vec<PredictionTrace>>,
    ) -> Result<()> {
        let mut central = self.central.take().expect("GM fleet owns a central model");
        for i in from..to {
            for dev in &mut self.devices {
                if let Some(sample) = ctx.test[dev.device_id].samples.get(i) {
                    let pred = dev.step(sample, Some(&central), ctx.cfg)?;
                    if let Some(tr) = traces.as_deref_mut() {
                        tr[dev.device_id].push(pred, sample.y);
                    }
                }
            }
            for dev in &self.devices {
                if let Some(sample) = ctx.test[dev.device_id].samples.get(i) {
                    central
                        .sgd_step_mut(sample, ctx.cfg.eta, ctx.cfg.lambda)
                        .map_err(|e| with_device(e, dev.device_id))?;
                }
            }
        }
        self.central = Some(central);
        Ok(())
    }

    fn epoch(&mut self, ctx: &Context<'_>, step: u64, log: Option<&mut EpochLog>) -> Result<()> {
        let round = ctx.schedule.round_of(step);
        let selected: BTreeSet<usize> = ctx.schedule.selected(self.devices.len(), round).into_iter().collect();
        let global = &self.global;
        let mut updates: Vec<ClientUpdate> = self
            .devices
            .par_iter_mut()
            .map(|dev| dev.epoch_contribute(selected.contains(&dev.device_id), global, ctx.cfg))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        updates.sort_by_key(|u| u.device_id);
        if updates.is_empty() {
            return Ok(());
        }
        self.global = fedavg(&updates)?;
        let merged = &self.global;
        let received: Vec<usize> = self
            .devices
            .iter_mut()
            .filter_map(|dev| dev.epoch_receive(merged, ctx.cfg).then_some(dev.device_id))
            .collect();

        if let Some(log) = log {
            // EFM devices download the global model when selected
            let down: Vec<usize> = if self.strategy == Strategy::EFM {
                updates.iter().map(|u| u.device_id).collect()
            } else {
                received
            };
            let strategy = self.strategy;
            let event = |device, direction| CommEvent { strategy, t: step, round, device, direction };
            log.events.extend(updates.iter().map(|u| event(u.device_id, Direction::Up)));
            log.events.extend(down.iter().map(|&k| event(k, Direction::Down)));
            log.epochs.push(EpochComm {
                round,
                t: step,
                selected: selected.len(),
                up: updates.len(),
                down: down.len(),
            });
        }
        Ok(())
    }

    fn trajectory_hash(&self, hash: &mut TrajectoryHash) {
        hash.write_u64(self.strategy as u64);
        for dev in &self.devices {
            hash.write_u64(dev.diagnostics.trajectory.finish());
            for w in dev.local_model.weights().iter().chain(dev.federated_model.weights()) {
                hash.write_f64(*w);
            }
        }
        if let Some(c) = &self.central {
            c.weights().iter().for_each(|w| hash.write_f64(*w));
        }
    }
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

/// Sorted checkpoint offsets into the test region, pairwise at least
/// `horizon` apart, each leaving `horizon` samples on every device.
pub fn draw_checkpoints(test_len: usize, count: usize, horizon: usize, seed: u64) -> Result<Vec<usize>> {
    if horizon == 0 || test_len < horizon || count.saturating_mul(horizon) > test_len {
        return Err(Error::Config(format!(
            "cannot place {count} checkpoints of horizon {horizon} in a test region of {test_len} samples"
        )));
    }
    // sorted draws from the slack, spread by one horizon each: every
    // separated placement is reachable and none is invalid
    let slack = test_len - count * horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, CHECKPOINT_STREAM));
    let mut chosen: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    chosen.sort_unstable();
    for (i, p) in chosen.iter_mut().enumerate() {
        *p += i * horizon;
    }
    Ok(chosen)
}

fn validate_inputs(cfg: &ExperimentConfig, data: &PreparedData, strategies: &[Strategy]) -> Result<()> {
    cfg.validate()?;
    if strategies.is_empty() {
        return Err(Error::Config("no strategies selected".into()));
    }
    if data.train.len() != cfg.devices || data.test.len() != cfg.devices {
        return Err(Error::Config(format!(
            "config declares K = {} devices but the data holds {} train / {} test streams",
            cfg.devices,
            data.train.len(),
            data.test.len()
        )));
    }
    for (i, (tr, te)) in data.train.iter().zip(&data.test).enumerate() {
        if tr.device_id != i || te.device_id != i {
            return Err(Error::Config(format!("stream {i} carries device id {}", tr.device_id)));
        }
        if te.is_empty() {
            return Err(Error::Config(format!("device {i} has an empty test stream")));
        }
        for s in tr.samples.iter().chain(&te.samples) {
            if s.x.len() != cfg.d {
                return Err(Error::DimensionMismatch { expected: cfg.d, got: s.x.len() });
            }
        }
    }
    Ok(())
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    strategies: &[Strategy],
    opts: RunOptions,
) -> Result<ResultsReport> {
    run_experiment_logged(cfg, data, strategies, opts).map(|(report, _)| report)
}

/// Like [`run_experiment`], also returning every model transmission.
pub fn run_experiment_logged(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    strategies: &[Strategy],
    opts: RunOptions,
) -> Result<(ResultsReport, Vec<CommEvent>)> {
    validate_inputs(cfg, data, strategies)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_inner(cfg, data, strategies, opts))
}

struct FleetResult {
    fleet: Fleet,
    checkpoint_traces: Vec<Vec<PredictionTrace>>,
    log: EpochLog,
}

fn run_inner(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    strategies: &[Strategy],
    opts: RunOptions,
) -> Result<(ResultsReport, Vec<CommEvent>)> {
    let mut strategies = strategies.to_vec();
    strategies.sort();
    strategies.dedup();

    let training = train_period(cfg, &data.train)?;
    let min_test = data.test.iter().map(DeviceStream::len).min().unwrap_or(0);
    let max_test = data.test.iter().map(DeviceStream::len).max().unwrap_or(0);
    let positions = if opts.evaluate_checkpoints {
        draw_checkpoints(min_test, cfg.checkpoints, cfg.horizon, cfg.seed)?
    } else {
        Vec::new()
    };
    let ctx = Context {
        cfg,
        schedule: EpochSchedule {
            s_interval: cfg.s_interval,
            selection_fraction: cfg.selection_fraction,
            rng_seed: mix_seed(cfg.seed, SELECTION_STREAM),
        },
        test: &data.test,
    };

    let results = strategies
        .par_iter()
        .map(|&strategy| -> Result<FleetResult> {
            let mut fleet = Fleet::new(strategy, &training, cfg)?;
            let mut log = EpochLog::default();
            let mut checkpoint_traces = Vec::with_capacity(positions.len());
            let mut cursor = 0;
            for &p in &positions {
                fleet.advance(&ctx, cursor, p, None, Some(&mut log))?;
                cursor = p;
                let mut probe = fleet.clone();
                let mut traces = vec![PredictionTrace::new(); fleet.devices.len()];
                probe.advance(&ctx, p, p + cfg.horizon, Some(&mut traces), None)?;
                checkpoint_traces.push(traces);
            }
            fleet.advance(&ctx, cursor, max_test, None, Some(&mut log))?;
            Ok(FleetResult { fleet, checkpoint_traces, log })
        })
        .collect::<Result<Vec<_>>>()?;

    let checkpoints: Vec<CheckpointInfo> = positions
        .iter()
        .enumerate()
        .map(|(index, &position)| CheckpointInfo {
            index,
            position,
            t: data.test[0].samples[position].t,
        })
        .collect();

    let mut metrics = BTreeMap::new();
    let mut aggregates = BTreeMap::new();
    let mut diagnostics = Diagnostics::default();
    let mut hash = TrajectoryHash::default();
    let mut events = Vec::new();
    for result in results {
        let strategy = result.fleet.strategy;
        let mut rows = Vec::with_capacity(result.checkpoint_traces.len());
        let mut per_device = vec![(0.0, 0usize); cfg.devices];
        for traces in &result.checkpoint_traces {
            let mut pooled = PredictionTrace::new();
            for (k, tr) in traces.iter().enumerate() {
                pooled.extend_from(tr);
                per_device[k].0 += tr.pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>();
                per_device[k].1 += tr.len();
            }
            rows.push(MetricSet::evaluate(&pooled, cfg.kl_bins)?);
        }
        if let Some(mean) = MetricSet::mean(&rows) {
            aggregates.insert(strategy, mean);
        }
        metrics.insert(strategy, rows);
        if !positions.is_empty() {
            diagnostics.per_device_mae.insert(
                strategy,
                per_device.iter().map(|(s, n)| if *n > 0 { s / *n as f64 } else { 0.0 }).collect(),
            );
        }
        if strategy.is_federated() {
            diagnostics.communication.insert(strategy, result.log.epochs);
        }
        events.extend(result.log.events);

        let devices = &result.fleet.devices;
        match strategy {
            Strategy::ASM => {
                diagnostics.asm_mean_alpha = devices.iter().map(|d| d.mean_alpha().unwrap_or(1.0)).collect();
                let mut by_step: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
                for dev in devices {
                    for &(step, alpha) in &dev.diagnostics.alpha_samples {
                        let e = by_step.entry(step).or_default();
                        e.0 += alpha;
                        e.1 += 1;
                    }
                }
                diagnostics.alpha_trace = by_step.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect();
            }
            Strategy::TOSM => {
                diagnostics.switch_counts = devices.iter().filter_map(DeviceState::switch_count).collect();
            }
            _ => {}
        }
        result.fleet.trajectory_hash(&mut hash);
    }
    diagnostics.live_trajectory_hash = format!("{:016x}", hash.finish());

    let report = ResultsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        params: BTreeMap::new(),
        strategies,
        checkpoints,
        metrics,
        aggregates,
        diagnostics,
    };
    Ok((report, events))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Parameter lists to sweep. A missing list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(rename = "U", default, skip_serializing_if = "Option::is_none")]
    pub reward_capacity: Option<Vec<usize>>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub window_capacity: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_interval: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
}

impl SweepGrid {
    /// Cartesian product in `U`, `M`, `s_interval`, `beta` order, each
    /// config tagged with its tuple.
    pub fn expand(&self, base: &ExperimentConfig) -> Result<Vec<(BTreeMap<String, f64>, ExperimentConfig)>> {
        fn list<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>> {
            match values {
                None => Ok(vec![base]),
                Some(v) if v.is_empty() => Err(Error::Config(format!("grid list '{name}' is empty"))),
                Some(v) => Ok(v.clone()),
            }
        }
        let us = list("U", &self.reward_capacity, base.reward_capacity)?;
        let ms = list("M", &self.window_capacity, base.window_capacity)?;
        let ss = list("s_interval", &self.s_interval, base.s_interval)?;
        let betas = list("beta", &self.beta, base.beta)?;
        let mut out = Vec::with_capacity(us.len() * ms.len() * ss.len() * betas.len());
        for &u in &us {
            for &m in &ms {
                for &s in &ss {
                    for &beta in &betas {
                        let cfg = ExperimentConfig {
                            reward_capacity: u,
                            window_capacity: m,
                            s_interval: s,
                            beta,
                            ..base.clone()
                        };
                        let tag = BTreeMap::from([
                            ("U".to_string(), u as f64),
                            ("M".to_string(), m as f64),
                            ("s_interval".to_string(), s as f64),
                            ("beta".to_string(), beta),
                        ]);
                        out.push((tag, cfg));
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct SweepEntry {
    pub params: BTreeMap<String, f64>,
    pub outcome: std::result::Result<ResultsReport, String>,
}

/// Runs every grid tuple with the shared master seed. A failing tuple is
/// recorded and does not stop the others.
pub fn sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    data: &PreparedData,
    strategies: &[Strategy],
    opts: RunOptions,
) -> Result<Vec<SweepEntry>> {
    let runs = grid.expand(base)?;
    Ok(runs
        .into_iter()
        .map(|(params, cfg)| {
            let outcome = run_experiment(&cfg, data, strategies, opts)
                .map(|mut r| {
                    r.params = params.clone();
                    r
                })
                .map_err(|e| {
                    let tag = params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
                    format!("[{tag}] {e}")
                });
            SweepEntry { params, outcome }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn diagnostics_rows(report: &ResultsReport) -> Vec<(Strategy, &'static str, f64)> {
    let mut rows = Vec::new();
    let d = &report.diagnostics;
    if !d.asm_mean_alpha.is_empty() {
        let mean = d.asm_mean_alpha.iter().sum::<f64>() / d.asm_mean_alpha.len() as f64;
        rows.push((Strategy::ASM, "mean_alpha", mean));
    }
    if !d.switch_counts.is_empty() {
        rows.push((Strategy::TOSM, "switch_count", d.switch_counts.iter().sum::<u64>() as f64));
    }
    for (strategy, epochs) in &d.communication {
        rows.push((*strategy, "comm_up", epochs.iter().map(|e| e.up).sum::<usize>() as f64));
        rows.push((*strategy, "comm_down", epochs.iter().map(|e| e.down).sum::<usize>() as f64));
    }
    rows
}

/// JSON holds the full report; CSV holds one
/// `strategy,checkpoint,metric,value,params` row per metric value, followed
/// by summary diagnostics rows with an empty checkpoint column.
pub fn serialize_report(report: &ResultsReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), report).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })
        }
        ReportFormat::Csv => {
            let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
            let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
            let tag = report.param_tag();
            w.write_record(["strategy", "checkpoint", "metric", "value", "params"]).map_err(csv_err)?;
            for (strategy, rows) in &report.metrics {
                for (i, m) in rows.iter().enumerate() {
                    for (name, value) in MetricSet::NAMES.iter().zip(m.values()) {
                        w.write_record([strategy.name(), &i.to_string(), name, &value.to_string(), &tag])
                            .map_err(csv_err)?;
                    }
                }
            }
            for (strategy, name, value) in diagnostics_rows(report) {
                w.write_record([strategy.name(), "", name, &value.to_string(), &tag]).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_report(path: &Path) -> Result<ResultsReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// One JSON object per line.
pub fn write_event_log(events: &[CommEvent], path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
