//! File formats: dataset CSV, trace CSV and JSON-lines traces.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{RoundTrace, SweepRow};
use crate::problems::LinearDataset;

/// Version of the trace, sweep and toy CSV layouts.
pub const TRACE_FORMAT_VERSION: u32 = 1;

pub const TRACE_HEADER: [&str; 4] = ["t", "delta", "loss", "bytes"];

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

/// Writes one worker's data: a `J,D_n` header line, `D_n` rows of features,
/// then a single row holding the `D_n` labels.
pub fn write_dataset(path: &Path, ds: &LinearDataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut put = |record: Vec<String>| w.write_record(record).map_err(|e| csv_error(path, e));
    put(vec![ds.dim().to_string(), ds.rows().to_string()])?;
    for i in 0..ds.rows() {
        put(ds.row(i).iter().map(f64::to_string).collect())?;
    }
    put(ds.labels().iter().map(f64::to_string).collect())?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LinearDataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let bad = |msg: String| Error::Input(format!("{}: {msg}", path.display()));
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let values = record
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad number {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    let header = rows.first().ok_or_else(|| bad("empty file".into()))?;
    if header.len() != 2 || header.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(bad("first line must be J,D_n".into()));
    }
    let (dim, count) = (header[0] as usize, header[1] as usize);
    if rows.len() != count + 2 {
        return Err(bad(format!(
            "expected {} lines after the header, found {}",
            count + 1,
            rows.len() - 1
        )));
    }
    let mut x = Vec::with_capacity(dim * count);
    for (i, row) in rows[1..=count].iter().enumerate() {
        if row.len() != dim {
            return Err(bad(format!(
                "feature row {i} has {} values, expected {dim}",
                row.len()
            )));
        }
        x.extend_from_slice(row);
    }
    let y = rows[count + 1].clone();
    if y.len() != count {
        return Err(bad(format!(
            "label row has {} values, expected {count}",
            y.len()
        )));
    }
    LinearDataset::new(dim, x, y)
}

/// File name of worker `n` inside a dataset directory.
pub fn dataset_file(dir: &Path, n: usize) -> PathBuf {
    dir.join(format!("worker_{n:03}.csv"))
}

pub fn write_datasets(dir: &Path, datasets: &[LinearDataset]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (n, ds) in datasets.iter().enumerate() {
        write_dataset(&dataset_file(dir, n), ds)?;
    }
    Ok(())
}

/// Reads `worker_000.csv`, `worker_001.csv`, ... until the first gap.
pub fn read_datasets(dir: &Path) -> Result<Vec<LinearDataset>> {
    let mut out = Vec::new();
    loop {
        let path = dataset_file(dir, out.len());
        if !path.exists() {
            break;
        }
        out.push(read_dataset(&path)?);
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "no worker_000.csv found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|d| d.to_string()).unwrap_or_default()
}

/// `t,delta,loss,bytes`; `delta` is empty when the problem has no known
/// optimum.
pub fn write_trace_csv(path: &Path, traces: &[RoundTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(TRACE_HEADER)
        .map_err(|e| csv_error(path, e))?;
    for tr in traces {
        w.write_record([
            tr.t.to_string(),
            format_opt(tr.delta),
            tr.loss.to_string(),
            tr.bytes_estimate.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per round, including per-worker payloads when recorded.
pub fn write_trace_jsonl(path: &Path, traces: &[RoundTrace]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for tr in traces {
        serde_json::to_writer(&mut w, tr)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `sparsifier,S,k,mean_delta`
pub fn write_sweep_csv(path: &Path, tables: &[(&str, Vec<SweepRow>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["sparsifier", "S", "k", "mean_delta"])
        .map_err(|e| csv_error(path, e))?;
    for (name, rows) in tables {
        for row in rows {
            w.write_record([
                name.to_string(),
                row.sparsity.to_string(),
                row.k.to_string(),
                row.mean_delta.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `t,<name>...` with one loss column per named run. Runs must have equal
/// length.
pub fn write_loss_table(path: &Path, runs: &[(&str, Vec<RoundTrace>)]) -> Result<()> {
    let rows = runs.first().map_or(0, |(_, r)| r.len());
    if runs.iter().any(|(_, r)| r.len() != rows) {
        return Err(Error::Input("loss table runs differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend(runs.iter().map(|(name, _)| name.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..rows {
        let mut record = vec![runs[0].1[i].t.to_string()];
        record.extend(runs.iter().map(|(_, r)| r[i].loss.to_string()));
        w.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}
