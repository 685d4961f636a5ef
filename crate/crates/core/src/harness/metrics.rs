//! Line-delimited JSON metric stream: a versioned header, then one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::TerminalCause;
use crate::error::{Error, Result};

pub const METRICS_VERSION: u32 = 1;
const METRICS_FORMAT: &str = "ays-metrics";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub format: String,
    pub version: u32,
    pub run: String,
    pub agent: String,
    pub reward: String,
    pub observability: String,
    pub seed: u64,
    pub config_digest: String,
}

impl MetricsHeader {
    pub fn new(run: &str, agent: &str, reward: &str, observability: &str, seed: u64, config_digest: &str) -> Self {
        Self {
            format: METRICS_FORMAT.to_string(),
            version: METRICS_VERSION,
            run: run.to_string(),
            agent: agent.to_string(),
            reward: reward.to_string(),
            observability: observability.to_string(),
            seed,
            config_digest: config_digest.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Episode {
        step: u64,
        episode: u64,
        #[serde(rename = "return")]
        episodic_return: f64,
        length: usize,
        cause: TerminalCause,
        /// Epsilon, or policy entropy for actor-critic agents.
        explore: f64,
    },
    Loss {
        step: u64,
        updates: u64,
        loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        entropy: Option<f64>,
    },
    Error {
        step: u64,
        message: String,
    },
}

impl MetricRecord {
    pub fn step(&self) -> u64 {
        match self {
            MetricRecord::Episode { step, .. } | MetricRecord::Loss { step, .. } | MetricRecord::Error { step, .. } => {
                *step
            }
        }
    }
}

/// Appends whole lines and flushes after each, so the file is valid at every instant.
#[derive(Debug)]
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            file,
            path: path.to_path_buf(),
        };
        w.write_line(&serde_json::to_string(header).expect("header serializes"))?;
        Ok(w)
    }

    /// Reopens an existing stream, dropping records after `step`.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let (header, records) = read_metrics(path)?;
        let mut w = Self::create(path, &header)?;
        for r in records.iter().filter(|r| r.step() <= step) {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        self.write_line(&serde_json::to_string(record).expect("record serializes"))
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        self.file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<(MetricsHeader, Vec<MetricRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let first = lines
        .next()
        .ok_or_else(|| malformed("empty metrics file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: MetricsHeader = serde_json::from_str(&first).map_err(|e| malformed(format!("header: {e}")))?;
    if header.format != METRICS_FORMAT || header.version != METRICS_VERSION {
        return Err(malformed(format!(
            "unsupported metrics format {} v{}",
            header.format, header.version
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| malformed(format!("line {}: {e}", i + 2)))?);
    }
    Ok((header, records))
}
