//! `metrics.csv`, `summary.json` and the optional trajectory dump.

use std::fs::File;
use std::path::Path;

use serde_json::{json, Map, Value};
use socm_core::metrics::MetricsRecord;
use socm_core::sim::TrajectoryBatch;

use crate::error::{LabError, Result};

/// Appends one row per evaluation; the header is written on creation.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(LabError::io(path))?;
        let mut inner = csv::Writer::from_writer(file);
        inner.write_record(MetricsRecord::COLUMNS)?;
        inner.flush().map_err(LabError::io(path))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.write_record(rec.fields())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| LabError::Csv(e.into()))
    }
}

/// A record as a JSON object keyed by column name; missing values are null.
pub fn record_json(rec: &MetricsRecord) -> Value {
    let mut m = Map::new();
    for (k, v) in MetricsRecord::COLUMNS.iter().zip(rec.fields()) {
        let value = if v.is_empty() {
            Value::Null
        } else if let Ok(i) = v.parse::<u64>() {
            json!(i)
        } else {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(|x| json!(x))
                .unwrap_or(Value::String(v))
        };
        m.insert((*k).to_string(), value);
    }
    Value::Object(m)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(LabError::io(path))
}

/// One row per path and time: `path,step,time,x0,...`.
pub fn dump_trajectories(path: &Path, traj: &TrajectoryBatch) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["path".to_string(), "step".into(), "time".into()];
    header.extend((0..traj.dim()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for i in 0..traj.batch_size() {
        for k in 0..=traj.steps() {
            let mut row = vec![i.to_string(), k.to_string(), format!("{:?}", traj.times[k])];
            row.extend(traj.state(i, k).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(LabError::io(path))
}
