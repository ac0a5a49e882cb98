//! Dataset directory layout: `manifest.json` plus one CSV per transient
//! (header of channel names, one row per sample, 9 significant digits).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{channel_names, BreakLocation, ChannelStats, Dataset, Split, Transient, SAMPLES, TEMPLATE_VERSION};
use crate::error::{PaeError, Result};
use crate::numerics::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientRecord {
    pub id: String,
    pub break_location: BreakLocation,
    pub break_size_cm: f64,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub template_version: u32,
    pub seed: u64,
    pub count: usize,
    pub channel_names: Vec<String>,
    pub channel_stats: ChannelStats,
    pub transients: Vec<TransientRecord>,
}

/// Scientific notation with nine significant digits.
pub(crate) fn fmt9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Writes the dataset and returns the paths written, manifest last.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| PaeError::io(dir, e))?;
    let names = channel_names();
    let header = names.join(",");
    let mut written = Vec::with_capacity(dataset.len() + 1);
    let mut records = Vec::with_capacity(dataset.len());
    for (t, split) in dataset.transients.iter().zip(&dataset.split) {
        let file = format!("{}.csv", t.id);
        let path = dir.join(&file);
        let f = fs::File::create(&path).map_err(|e| PaeError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let mut body = String::with_capacity(SAMPLES * names.len() * 16);
        body.push_str(&header);
        body.push('\n');
        let (rows, cols) = (t.channels.rows(), t.channels.cols());
        for n in 0..cols {
            for c in 0..rows {
                if c > 0 {
                    body.push(',');
                }
                body.push_str(&fmt9(t.channels.get(c, n)));
            }
            body.push('\n');
        }
        w.write_all(body.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| PaeError::io(&path, e))?;
        written.push(path);
        records.push(TransientRecord {
            id: t.id.clone(),
            break_location: t.break_location,
            break_size_cm: t.break_size_cm,
            split: *split,
            file,
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        template_version: TEMPLATE_VERSION,
        seed: dataset.seed,
        count: dataset.len(),
        channel_names: names.iter().map(|s| s.to_string()).collect(),
        channel_stats: dataset.channel_stats.clone(),
        transients: records,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| PaeError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

fn read_csv(path: &Path, channels: usize) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| PaeError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| PaeError::format(path, "empty file"))?;
    if header.split(',').count() != channels {
        return Err(PaeError::format(path, format!("expected {channels} columns in header")));
    }
    let mut by_sample = Vec::new();
    for (ln, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| PaeError::format(path, format!("row {}: {e}", ln + 1)))?;
        if row.len() != channels {
            return Err(PaeError::format(path, format!("row {} has {} columns", ln + 1, row.len())));
        }
        by_sample.push(row);
    }
    let samples = by_sample.len();
    if samples == 0 {
        return Err(PaeError::format(path, "no data rows"));
    }
    let mut data = vec![0.0; channels * samples];
    for (n, row) in by_sample.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            data[c * samples + n] = v;
        }
    }
    Tensor::matrix(channels, samples, data)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| PaeError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PaeError::format(&path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(PaeError::format(
            &path,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let channels = manifest.channel_names.len();
    let mut transients = Vec::with_capacity(manifest.count);
    let mut split = Vec::with_capacity(manifest.count);
    for rec in &manifest.transients {
        let channels = read_csv(&dir.join(&rec.file), channels)?;
        transients.push(Transient {
            id: rec.id.clone(),
            channels,
            break_location: rec.break_location,
            break_size_cm: rec.break_size_cm,
        });
        split.push(rec.split);
    }
    Ok(Dataset {
        seed: manifest.seed,
        transients,
        split,
        channel_stats: manifest.channel_stats,
    })
}
