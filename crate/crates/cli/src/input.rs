//! Config file loading: an `ExperimentConfig` document with optional
//! `data`, `drift`, `grid` and `strategies` blocks.

use std::path::{Path, PathBuf};

use fedsel::data::{ingest_csv, inject_drift, synth_generate, CsvSchema, Dataset, DriftKind, DriftSpec, SynthParams};
use fedsel::sim::{prepare, PreparedData, SweepGrid};
use fedsel::{Error, ExperimentConfig, Result, Strategy};
use serde::Deserialize;
use serde_json::{Map, Value};

const SEED_ENV: &str = "FEDSEL_SEED";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CsvSource {
    path: PathBuf,
    schema: Option<CsvSchema>,
    #[serde(default = "default_delimiter")]
    delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataBlock {
    csv: Option<CsvSource>,
    synthetic: Option<Value>,
    /// Defaults to true for CSV input and false for synthetic data, which is
    /// generated on the unit scale.
    normalize: Option<bool>,
}

pub struct Loaded {
    pub cfg: ExperimentConfig,
    pub data: PreparedData,
    pub grid: Option<SweepGrid>,
    pub strategies: Vec<Strategy>,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn config_keys() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// `key=value`; the value is read as JSON when it parses, else as a string.
/// `grid.<list>` keys address the grid block.
fn apply_override(doc: &mut Map<String, Value>, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    match key.split_once('.') {
        Some(("grid", list)) => {
            let grid = doc
                .entry("grid")
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| config_error("grid block must be an object"))?;
            grid.insert(list.to_string(), value);
        }
        Some(_) => return Err(config_error(format!("unknown override key '{key}'"))),
        None => {
            if matches!(key, "data" | "drift" | "grid" | "strategies") {
                return Err(config_error(format!("override key '{key}' names a block, not a value")));
            }
            if !config_keys().iter().any(|k| k == key) {
                return Err(config_error(format!("unknown override key '{key}'")));
            }
            doc.insert(key.to_string(), value);
        }
    }
    Ok(())
}

pub fn parse_drift(spec: &str) -> Result<DriftSpec> {
    let (mut at, mut kind, mut mag) = (None, None, None);
    for part in spec.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| config_error(format!("--drift: '{part}' is not key=value")))?;
        let bad = |_| config_error(format!("--drift: bad value for '{k}'"));
        match k.trim() {
            "at" => at = Some(v.trim().parse::<u64>().map_err(|e| bad(e.to_string()))?),
            "kind" => kind = Some(v.trim().parse::<DriftKind>()?),
            "mag" => mag = Some(v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?),
            other => return Err(config_error(format!("--drift: unknown field '{other}'"))),
        }
    }
    Ok(DriftSpec {
        at_t: at.ok_or_else(|| config_error("--drift needs at=<t>"))?,
        kind: kind.ok_or_else(|| config_error("--drift needs kind=<kind>"))?,
        magnitude: mag.ok_or_else(|| config_error("--drift needs mag=<m>"))?,
    })
}

fn take<T: serde::de::DeserializeOwned>(doc: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    doc.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| config_error(format!("{key}: {e}"))))
        .transpose()
}

pub struct LoadOptions<'a> {
    pub overrides: &'a [String],
    pub strategies: Option<&'a str>,
    pub drift: Option<&'a str>,
}

pub fn load(path: &Path, opts: &LoadOptions<'_>) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut doc: Map<String, Value> = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;

    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| config_error(format!("{SEED_ENV} must be a non-negative integer, got '{seed}'")))?;
        doc.insert("seed".into(), seed.into());
    }
    for o in opts.overrides {
        apply_override(&mut doc, o)?;
    }

    let data_block: DataBlock = take(&mut doc, "data")?.unwrap_or_default();
    let mut drift: Option<DriftSpec> = take(&mut doc, "drift")?;
    let grid: Option<SweepGrid> = take(&mut doc, "grid")?;
    let listed: Option<Vec<Strategy>> = take(&mut doc, "strategies")?;
    let mut cfg: ExperimentConfig =
        serde_json::from_value(Value::Object(doc)).map_err(|e| config_error(format!("{}: {e}", path.display())))?;

    if let Some(spec) = opts.drift {
        drift = Some(parse_drift(spec)?);
    }
    let strategies = match (opts.strategies, listed) {
        (Some(list), _) => Strategy::parse_list(list)?,
        (None, Some(mut v)) => {
            v.sort();
            v.dedup();
            v
        }
        (None, None) => Strategy::ALL.to_vec(),
    };

    let base_dir = path.parent().unwrap_or(Path::new("."));
    let (dataset, normalize) = match (&data_block.csv, &data_block.synthetic) {
        (Some(_), Some(_)) => return Err(config_error("data block holds both csv and synthetic sources")),
        (Some(src), None) => {
            let file = if src.path.is_absolute() { src.path.clone() } else { base_dir.join(&src.path) };
            let schema = src.schema.clone().unwrap_or_else(|| CsvSchema::generated(cfg.d));
            let delimiter = u8::try_from(src.delimiter)
                .map_err(|_| config_error("csv delimiter must be a single ASCII character"))?;
            let ingested = ingest_csv(&file, &schema, delimiter)?;
            if cfg.devices != ingested.streams.len() {
                log::info!("K set to {} from {}", ingested.streams.len(), file.display());
                cfg.devices = ingested.streams.len();
            }
            cfg.d = schema.feature_cols.len();
            (Dataset { streams: ingested.streams, truth: None }, data_block.normalize.unwrap_or(true))
        }
        (None, synth) => {
            let mut params = match synth {
                Some(Value::Object(m)) => m.clone(),
                Some(_) => return Err(config_error("data.synthetic must be an object")),
                None => Map::new(),
            };
            params.entry("K").or_insert(cfg.devices.into());
            params.entry("d").or_insert(cfg.d.into());
            params.entry("seed").or_insert(cfg.seed.into());
            let params: SynthParams = serde_json::from_value(Value::Object(params))
                .map_err(|e| config_error(format!("data.synthetic: {e}")))?;
            cfg.devices = params.devices;
            cfg.d = params.d;
            (synth_generate(&params)?, data_block.normalize.unwrap_or(false))
        }
    };
    let dataset = match &drift {
        Some(spec) => inject_drift(&dataset, spec)?,
        None => dataset,
    };
    cfg.validate()?;
    let data = prepare(&dataset.streams, cfg.train_fraction, normalize)?;
    Ok(Loaded { cfg, data, grid, strategies })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_values() {
        let mut doc = Map::new();
        apply_override(&mut doc, "beta=0.7").unwrap();
        apply_override(&mut doc, "grid.beta=[0.1,0.9]").unwrap();
        assert_eq!(doc["beta"], Value::from(0.7));
        assert_eq!(doc["grid"]["beta"], serde_json::json!([0.1, 0.9]));
        assert!(apply_override(&mut doc, "gamma=1").is_err());
        assert!(apply_override(&mut doc, "beta").is_err());
    }

    #[test]
    fn drift_flag() {
        let d = parse_drift("at=100,kind=rotation,mag=60").unwrap();
        assert_eq!(d.at_t, 100);
        assert_eq!(d.kind, DriftKind::CoefficientRotation);
        assert_eq!(d.magnitude, 60.0);
        assert!(parse_drift("at=100,kind=rotation").is_err());
        assert!(parse_drift("at=x,kind=shift,mag=1").is_err());
    }
}
