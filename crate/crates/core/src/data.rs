//! Stream ingestion, normalization, synthetic generation, drift injection and
//! train/test splitting.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::mix_seed;

/// One timestamped observation at an edge device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: u64,
    pub x: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceStream {
    pub device_id: usize,
    pub samples: Vec<Sample>,
}

impl DeviceStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }
}

/// Ground truth behind a synthetic dataset, kept so that drift can
/// regenerate targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Shared weights, bias first.
    pub w_global: Vec<f64>,
    /// Per-device perturbation `heterogeneity * u_k`.
    pub offsets: Vec<Vec<f64>>,
    /// Observation noise per device and sample.
    pub noise: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticTruth {
    pub fn device_weights(&self, device: usize, w_global: &[f64]) -> Vec<f64> {
        w_global
            .iter()
            .zip(&self.offsets[device])
            .map(|(g, u)| g + u)
            .collect()
    }
}

/// Device streams plus, for generated data, the truth they were drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub streams: Vec<DeviceStream>,
    pub truth: Option<SyntheticTruth>,
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Column mapping for CSV input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub device_col: String,
    pub time_col: String,
    pub target_col: String,
    pub feature_cols: Vec<String>,
}

impl CsvSchema {
    /// Layout written by [`write_csv`]: `device,t,x1..xd,y`.
    pub fn generated(d: usize) -> Self {
        Self {
            device_col: "device".into(),
            time_col: "t".into(),
            target_col: "y".into(),
            feature_cols: (1..=d).map(|i| format!("x{i}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub streams: Vec<DeviceStream>,
    /// Original device labels, indexed by `device_id`.
    pub device_labels: Vec<String>,
    /// Rows that could not be parsed.
    pub skipped_rows: usize,
    /// Rows dropped because a required value was empty.
    pub dropped_missing: usize,
}

/// Reads one stream per distinct device id, ordered by timestamp. Samples
/// get `t = 0, 1, ...` in timestamp order.
pub fn ingest_csv(path: &Path, schema: &CsvSchema, delimiter: u8) -> Result<Ingested> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let device_idx = column(&schema.device_col)?;
    let time_idx = column(&schema.time_col)?;
    let target_idx = column(&schema.target_col)?;
    let feature_idx = schema
        .feature_cols
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows: BTreeMap<String, Vec<(f64, Vec<f64>, f64)>> = BTreeMap::new();
    let (mut total, mut skipped, mut missing) = (0usize, 0usize, 0usize);
    for record in reader.records() {
        total += 1;
        let Ok(record) = record else {
            skipped += 1;
            continue;
        };
        if record.len() != headers.len() {
            skipped += 1;
            continue;
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let required = std::iter::once(device_idx)
            .chain([time_idx, target_idx])
            .chain(feature_idx.iter().copied());
        if required.clone().any(|i| field(i).is_empty()) {
            missing += 1;
            continue;
        }
        let parsed = (|| {
            let time: f64 = field(time_idx).parse().ok()?;
            let y: f64 = field(target_idx).parse().ok()?;
            let x = feature_idx
                .iter()
                .map(|&i| field(i).parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()?;
            (time.is_finite() && y.is_finite()).then_some((time, x, y))
        })();
        match parsed {
            Some(row) => rows.entry(field(device_idx).to_string()).or_default().push(row),
            None => skipped += 1,
        }
    }
    if total > 0 && skipped * 2 > total {
        return Err(Error::Schema(format!(
            "{}: {skipped} of {total} rows could not be parsed",
            path.display()
        )));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} unparseable rows", path.display());
    }
    if missing > 0 {
        log::warn!("{}: dropped {missing} rows with missing values", path.display());
    }

    let mut labels: Vec<String> = rows.keys().cloned().collect();
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap_or(0));
    }
    let streams = labels
        .iter()
        .enumerate()
        .map(|(device_id, label)| {
            let mut device_rows = rows.remove(label).unwrap_or_default();
            device_rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            let samples = device_rows
                .into_iter()
                .enumerate()
                .map(|(t, (_, x, y))| Sample { t: t as u64, x, y })
                .collect();
            DeviceStream { device_id, samples }
        })
        .collect();
    Ok(Ingested {
        streams,
        device_labels: labels,
        skipped_rows: skipped,
        dropped_missing: missing,
    })
}

/// Writes streams in the [`CsvSchema::generated`] layout.
pub fn write_csv(streams: &[DeviceStream], path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    let d = streams.iter().find_map(|s| s.dim()).unwrap_or(0);
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    let schema = CsvSchema::generated(d);
    let mut header = vec![schema.device_col.clone(), schema.time_col.clone()];
    header.extend(schema.feature_cols.iter().cloned());
    header.push(schema.target_col.clone());
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for stream in streams {
        for s in &stream.samples {
            write!(out, "{},{}", stream.device_id, s.t).map_err(io_err)?;
            for v in &s.x {
                write!(out, ",{v}").map_err(io_err)?;
            }
            writeln!(out, ",{}", s.y).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mu: f64,
    pub sigma: f64,
    /// Smallest and largest z-score seen in the training region.
    pub z_min: f64,
    pub z_max: f64,
}

impl DimStats {
    fn fit(values: &[f64], name: &str) -> Result<Self> {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sigma = var.sqrt();
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "{name} has zero variance in the training region"
            )));
        }
        let (mut z_min, mut z_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let z = (v - mu) / sigma;
            z_min = z_min.min(z);
            z_max = z_max.max(z);
        }
        Ok(Self { mu, sigma, z_min, z_max })
    }

    /// z-score, then min-max scaled into the unit interval and clamped.
    pub fn apply(&self, v: f64) -> f64 {
        let z = (v - self.mu) / self.sigma;
        ((z - self.z_min) / (self.z_max - self.z_min)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub features: Vec<DimStats>,
    pub target: DimStats,
}

fn train_len(len: usize, fraction: f64) -> usize {
    // the epsilon keeps products such as 0.158 * 1000 from rounding down
    ((fraction * len as f64) + 1e-9).floor() as usize
}

/// Population mean/std and z-score range from the pooled training prefixes.
pub fn fit_normalization(streams: &[DeviceStream], train_fraction: f64) -> Result<NormalizationStats> {
    let d = streams
        .iter()
        .find_map(|s| s.dim())
        .ok_or_else(|| Error::Config("no samples to normalize".into()))?;
    let mut columns = vec![Vec::new(); d + 1];
    for stream in streams {
        for s in &stream.samples[..train_len(stream.len(), train_fraction)] {
            if s.x.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: s.x.len() });
            }
            for (col, v) in columns.iter_mut().zip(&s.x) {
                col.push(*v);
            }
            columns[d].push(s.y);
        }
    }
    if columns[d].is_empty() {
        return Err(Error::Config("training region is empty".into()));
    }
    let features = (0..d)
        .map(|j| DimStats::fit(&columns[j], &format!("feature dimension {j}")))
        .collect::<Result<Vec<_>>>()?;
    let target = DimStats::fit(&columns[d], "target")?;
    Ok(NormalizationStats { features, target })
}

pub fn apply_normalization(stream: &DeviceStream, stats: &NormalizationStats) -> DeviceStream {
    let samples = stream
        .samples
        .iter()
        .map(|s| Sample {
            t: s.t,
            x: s.x.iter().zip(&stats.features).map(|(v, st)| st.apply(*v)).collect(),
            y: stats.target.apply(s.y),
        })
        .collect();
    DeviceStream {
        device_id: stream.device_id,
        samples,
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Per-device temporal split at `floor(fraction * len)`.
pub fn split(
    streams: &[DeviceStream],
    train_fraction: f64,
) -> Result<(Vec<DeviceStream>, Vec<DeviceStream>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie strictly inside (0,1), got {train_fraction}"
        )));
    }
    let mut train = Vec::with_capacity(streams.len());
    let mut test = Vec::with_capacity(streams.len());
    for stream in streams {
        let cut = train_len(stream.len(), train_fraction);
        if cut == 0 || cut == stream.len() {
            return Err(Error::Config(format!(
                "device {} has {} samples: split at {train_fraction} leaves one side empty",
                stream.device_id,
                stream.len()
            )));
        }
        let (a, b) = stream.samples.split_at(cut);
        train.push(DeviceStream { device_id: stream.device_id, samples: a.to_vec() });
        test.push(DeviceStream { device_id: stream.device_id, samples: b.to_vec() });
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    #[serde(rename = "K")]
    pub devices: usize,
    /// Samples per device.
    #[serde(rename = "T")]
    pub steps: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub heterogeneity: f64,
    pub seed: u64,
    /// Norm of the shared feature weights.
    pub signal_norm: f64,
    /// Lag-one autocorrelation of the feature process.
    pub feature_autocorr: f64,
    /// Stationary standard deviation of the feature process.
    pub feature_std: f64,
    /// Amplitude of the periodic feature component.
    pub seasonal_amplitude: f64,
    /// Period of the seasonal component, in steps.
    pub seasonal_period: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            devices: 10,
            steps: 5000,
            d: 8,
            noise_sigma: 0.02,
            heterogeneity: 0.3,
            seed: 0,
            signal_norm: 1.0,
            feature_autocorr: 0.95,
            feature_std: 0.12,
            seasonal_amplitude: 0.1,
            seasonal_period: 250.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("K", self.devices), ("T", self.steps), ("d", self.d)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.heterogeneity >= 0.0 && self.heterogeneity.is_finite()) {
            return Err(Error::Config("heterogeneity must be >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.feature_autocorr) {
            return Err(Error::Config("feature_autocorr must lie in [0,1)".into()));
        }
        if !(self.seasonal_period > 0.0) {
            return Err(Error::Config("seasonal_period must be positive".into()));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Unit vector in `R^(d+1)` orthogonal to `[1, 0.5, ..., 0.5]`, so adding it
/// to a weight vector leaves the prediction at the cube centre unchanged.
fn centred_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let c: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(0.5, d)).collect();
    let cc = c.iter().map(|a| a * a).sum::<f64>();
    loop {
        let v = unit_vector(rng, d + 1);
        let dot = v.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let p: Vec<f64> = v.iter().zip(&c).map(|(a, b)| a - dot / cc * b).collect();
        let norm = p.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return p.into_iter().map(|a| a / norm).collect();
        }
    }
}

fn linear(w: &[f64], x: &[f64]) -> f64 {
    w[0] + w[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

/// Bias that puts the prediction at the centre of the feature cube at 0.5.
fn centred_bias(features: &[f64]) -> f64 {
    0.5 - 0.5 * features.iter().sum::<f64>()
}

/// Generates `K` non-IID streams. Device `k` follows
/// `w_k = w_global + heterogeneity * u_k` with `u_k` a seeded unit vector
/// that keeps the device's mean target at 0.5;
/// features follow a per-device AR(1) process plus a seasonal component,
/// clamped to `[0,1]`; targets are `clamp(w_k . [1, x] + noise, 0, 1)`.
pub fn synth_generate(params: &SynthParams) -> Result<Dataset> {
    params.validate()?;
    let d = params.d;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, 0x5EED));
    let direction = unit_vector(&mut rng, d);
    let slopes: Vec<f64> = direction.iter().map(|v| v * params.signal_norm).collect();
    let mut w_global = vec![centred_bias(&slopes)];
    w_global.extend(slopes);

    let phi = params.feature_autocorr;
    let innovation = params.feature_std * (1.0 - phi * phi).sqrt();
    let noise_dist = Normal::new(0.0, params.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;

    let mut offsets = Vec::with_capacity(params.devices);
    let mut noise = Vec::with_capacity(params.devices);
    let mut streams = Vec::with_capacity(params.devices);
    for k in 0..params.devices {
        let mut dev_rng = ChaCha8Rng::seed_from_u64(mix_seed(params.seed, k as u64 + 1));
        let u = centred_unit_vector(&mut dev_rng, d);
        let offset: Vec<f64> = u.iter().map(|v| v * params.heterogeneity).collect();
        let w_k: Vec<f64> = w_global.iter().zip(&offset).map(|(g, o)| g + o).collect();
        let phases: Vec<f64> = (0..d).map(|_| dev_rng.random::<f64>() * 2.0 * PI).collect();
        let mut state: Vec<f64> = (0..d)
            .map(|_| params.feature_std * Distribution::<f64>::sample(&StandardNormal, &mut dev_rng))
            .collect();
        let mut dev_noise = Vec::with_capacity(params.steps);
        let mut samples = Vec::with_capacity(params.steps);
        for t in 0..params.steps {
            let season = 2.0 * PI * t as f64 / params.seasonal_period;
            let x: Vec<f64> = state
                .iter_mut()
                .zip(&phases)
                .map(|(s, ph)| {
                    let e: f64 = StandardNormal.sample(&mut dev_rng);
                    *s = phi * *s + innovation * e;
                    (0.5 + params.seasonal_amplitude * (season + ph).sin() + *s).clamp(0.0, 1.0)
                })
                .collect();
            let eps = noise_dist.sample(&mut dev_rng);
            let y = (linear(&w_k, &x) + eps).clamp(0.0, 1.0);
            dev_noise.push(eps);
            samples.push(Sample { t: t as u64, x, y });
        }
        offsets.push(offset);
        noise.push(dev_noise);
        streams.push(DeviceStream { device_id: k, samples });
    }
    Ok(Dataset {
        streams,
        truth: Some(SyntheticTruth {
            w_global,
            offsets,
            noise,
            seed: params.seed,
        }),
    })
}

// ---------------------------------------------------------------------------
// Drift
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    /// `y <- clamp(y + magnitude, 0, 1)`.
    TargetShift,
    /// Rotate the shared feature weights by `magnitude` degrees.
    CoefficientRotation,
}

impl std::str::FromStr for DriftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "target_shift" | "shift" => Ok(DriftKind::TargetShift),
            "coefficient_rotation" | "rotation" => Ok(DriftKind::CoefficientRotation),
            other => Err(Error::Config(format!("unknown drift kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// First affected sample time.
    pub at_t: u64,
    pub kind: DriftKind,
    pub magnitude: f64,
}

/// Rotates `v` by `degrees` inside the plane spanned by `v` itself and a
/// seeded direction orthogonal to it.
pub fn rotate_in_random_plane(v: &[f64], degrees: f64, seed: u64) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 || v.len() < 2 {
        return v.to_vec();
    }
    let a: Vec<f64> = v.iter().map(|x| x / norm).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = loop {
        let r = unit_vector(&mut rng, v.len());
        let proj: f64 = r.iter().zip(&a).map(|(p, q)| p * q).sum();
        let ortho: Vec<f64> = r.iter().zip(&a).map(|(p, q)| p - proj * q).collect();
        let n = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break ortho.into_iter().map(|x| x / n).collect::<Vec<f64>>();
        }
    };
    let theta = degrees.to_radians();
    a.iter()
        .zip(&b)
        .map(|(p, q)| norm * (theta.cos() * p + theta.sin() * q))
        .collect()
}

/// Applies a drift to every device for samples with `t >= at_t`.
///
/// Coefficient rotation needs the synthetic truth: the shared slopes are
/// rotated, the bias is re-centred so the mid-cube prediction stays at 0.5,
/// and targets are regenerated with the original noise.
pub fn inject_drift(data: &Dataset, spec: &DriftSpec) -> Result<Dataset> {
    let max_t = data
        .streams
        .iter()
        .filter_map(|s| s.samples.last().map(|x| x.t))
        .max()
        .ok_or_else(|| Error::Config("cannot inject drift into empty streams".into()))?;
    if spec.at_t > max_t {
        return Err(Error::Config(format!(
            "drift time {} lies beyond the last sample time {max_t}",
            spec.at_t
        )));
    }
    let mut out = data.clone();
    if spec.magnitude == 0.0 {
        return Ok(out);
    }
    match spec.kind {
        DriftKind::TargetShift => {
            for stream in &mut out.streams {
                for s in stream.samples.iter_mut().filter(|s| s.t >= spec.at_t) {
                    s.y = (s.y + spec.magnitude).clamp(0.0, 1.0);
                }
            }
        }
        DriftKind::CoefficientRotation => {
            let truth = data.truth.as_ref().ok_or_else(|| {
                Error::Unsupported("coefficient rotation requires synthetic data".into())
            })?;
            let slopes = rotate_in_random_plane(
                &truth.w_global[1..],
                spec.magnitude,
                mix_seed(truth.seed, 0xD21F7),
            );
            let mut rotated = vec![centred_bias(&slopes)];
            rotated.extend(slopes);
            for stream in &mut out.streams {
                let k = stream.device_id;
                let w_k = truth.device_weights(k, &rotated);
                for (i, s) in stream.samples.iter_mut().enumerate() {
                    if s.t >= spec.at_t {
                        s.y = (linear(&w_k, &s.x) + truth.noise[k][i]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}
