//! `report`: comparison tables over one or more result reports.

use std::path::{Path, PathBuf};

use fedsel::metrics::MetricSet;
use fedsel::sim::{read_report, ResultsReport};
use fedsel::{Error, Result};

/// Parameters with a "metric vs parameter" table, and the file stem used.
const AXES: [(&str, &str); 3] = [("beta", "beta"), ("s_interval", "s_interval"), ("M", "m")];

pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.csv", self.name));
        let csv_err = |source| Error::Csv { path: path.clone(), source };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    }

    /// Whitespace separated with a `#` header line, as gnuplot reads it.
    fn write_dat(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.dat", self.name));
        let mut out = format!("# {}\n", self.header.join(" "));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|c| if c.is_empty() { "NaN".into() } else { c.replace(' ', "_") }).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    }
}

/// Expands directories to the `.json` files they contain.
pub fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Config("no report files given".into()));
    }
    Ok(files)
}

pub fn load_reports(files: &[PathBuf]) -> Result<Vec<ResultsReport>> {
    let reports = files.iter().map(|f| read_report(f)).collect::<Result<Vec<_>>>()?;
    let first = &reports[0];
    for (r, f) in reports.iter().zip(files).skip(1) {
        if r.schema_version != first.schema_version || r.strategies != first.strategies {
            return Err(Error::Schema(format!(
                "{} does not match {}: schema version or strategy set differ",
                f.display(),
                files[0].display()
            )));
        }
    }
    Ok(reports)
}

fn param_value(report: &ResultsReport, name: &str) -> f64 {
    report.params.get(name).copied().unwrap_or(match name {
        "beta" => report.config.beta,
        "s_interval" => report.config.s_interval as f64,
        "M" => report.config.window_capacity as f64,
        "U" => report.config.reward_capacity as f64,
        _ => f64::NAN,
    })
}

fn setting(report: &ResultsReport) -> String {
    let c = &report.config;
    format!("U={} M={} s_interval={} beta={}", c.reward_capacity, c.window_capacity, c.s_interval, c.beta)
}

/// Rows are metrics, columns strategies; each column holds the report with
/// the lowest mean MAE for that strategy.
pub fn best_settings(reports: &[ResultsReport]) -> Table {
    let strategies = &reports[0].strategies;
    let best: Vec<Option<(&ResultsReport, MetricSet)>> = strategies
        .iter()
        .map(|s| {
            reports
                .iter()
                .filter_map(|r| r.aggregates.get(s).map(|m| (r, *m)))
                .min_by(|a, b| a.1.mae.total_cmp(&b.1.mae))
        })
        .collect();
    let mut header = vec!["metric".to_string()];
    header.extend(strategies.iter().map(|s| s.name().to_string()));
    let mut rows: Vec<Vec<String>> = MetricSet::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut row = vec![name.to_string()];
            row.extend(best.iter().map(|b| b.map(|(_, m)| m.values()[i].to_string()).unwrap_or_default()));
            row
        })
        .collect();
    let mut row = vec!["setting".to_string()];
    row.extend(best.iter().map(|b| b.map(|(r, _)| setting(r)).unwrap_or_default()));
    rows.push(row);
    Table { name: "best_settings".into(), header, rows }
}

/// One row per distinct value of `param`; each cell is the mean over the
/// reports sharing that value.
pub fn metric_vs(reports: &[ResultsReport], param: &str, stem: &str) -> Table {
    let strategies = &reports[0].strategies;
    let mut values: Vec<f64> = reports.iter().map(|r| param_value(r, param)).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut header = vec![param.to_string()];
    for s in strategies {
        header.extend(MetricSet::NAMES.iter().map(|m| format!("{}_{m}", s.name())));
    }
    let groups = values.into_iter().map(|v| {
        let rs: Vec<&ResultsReport> = reports.iter().filter(|r| param_value(r, param) == v).collect();
        (v, rs)
    });
    let rows = groups
        .into_iter()
        .map(|(v, rs)| {
            let mut row = vec![v.to_string()];
            for s in strategies {
                let sets: Vec<MetricSet> = rs.iter().filter_map(|r| r.aggregates.get(s).copied()).collect();
                match MetricSet::mean(&sets) {
                    Some(m) => row.extend(m.values().iter().map(|x| x.to_string())),
                    None => row.extend(MetricSet::NAMES.iter().map(|_| String::new())),
                }
            }
            row
        })
        .collect();
    Table { name: format!("metric_vs_{stem}"), header, rows }
}

pub fn write_tables(reports: &[ResultsReport], out: &Path, gnuplot: bool) -> Result<Vec<PathBuf>> {
    let mut tables = vec![best_settings(reports)];
    tables.extend(AXES.iter().map(|(p, stem)| metric_vs(reports, p, stem)));
    let mut written = Vec::new();
    for t in &tables {
        written.push(t.write_csv(out)?);
        if gnuplot {
            written.push(t.write_dat(out)?);
        }
    }
    Ok(written)
}

pub fn print_summary(report: &ResultsReport) {
    println!("{:<6} {:>12} {:>12} {:>12} {:>12}", "model", "MAE", "RMSE", "SMAPE", "KL");
    for s in &report.strategies {
        match report.aggregates.get(s) {
            Some(m) => println!("{:<6} {:>12.6} {:>12.6} {:>12.4} {:>12.6}", s.name(), m.mae, m.rmse, m.smape, m.kl),
            None => println!("{:<6} {:>12} {:>12} {:>12} {:>12}", s.name(), "-", "-", "-", "-"),
        }
    }
}
