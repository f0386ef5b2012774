use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub run: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub det: f64,
    pub lcmd: f64,
    pub tcld: f64,
    pub grad_norm: f64,
}

/// Collects step records in memory and optionally streams them as JSON
/// lines.
#[derive(Debug, Default)]
pub struct MetricsLog {
    sink: Option<(PathBuf, BufWriter<File>)>,
    pub records: Vec<StepRecord>,
    /// Emit an info log line every this many steps; 0 disables.
    pub log_every: usize,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            sink: Some((path.to_path_buf(), BufWriter::new(file))),
            records: Vec::new(),
            log_every: 50,
        })
    }

    pub fn record(&mut self, r: StepRecord) -> Result<()> {
        self.write_json(&r)?;
        if self.log_every > 0 && r.step % self.log_every == 0 {
            log::info!(
                "{} epoch {} step {}: loss {:.4} (det {:.4}, mem {:.4}, logit {:.4})",
                r.run,
                r.epoch,
                r.step,
                r.loss,
                r.det,
                r.lcmd,
                r.tcld
            );
        }
        self.records.push(r);
        Ok(())
    }

    /// Writes any serializable record as one line of the stream.
    pub fn write_json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    /// Total losses of one run, in step order.
    pub fn losses(&self, run: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.run == run).map(|r| r.loss).collect()
    }
}

/// Trailing moving average with window `w`.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    values
        .windows(w.min(values.len()).max(1))
        .map(|win| win.iter().sum::<f64>() / win.len() as f64)
        .collect()
}
