use std::path::{Path, PathBuf};

use isto::model::{DoubleTankParams, ProblemSpec};
use isto::seqopt::double_tank_initial_sequence;
use isto::sto::Sequence;
use isto::{Error, Result};

/// Everything a command needs. Built from defaults, then an optional
/// `key = value` file, then command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: DoubleTankParams,
    /// Nodes of the relaxed transcription.
    pub nodes: usize,
    /// Intervals per STO stage; `None` spreads about 300 over each sequence.
    pub stage_nodes: Option<usize>,
    /// Minimum uptime in seconds, 0 disables it.
    pub min_uptime: f64,
    pub sequence: Sequence,
    pub out_dir: PathBuf,
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: DoubleTankParams::default(),
            nodes: 300,
            stage_nodes: None,
            min_uptime: 0.5,
            sequence: double_tank_initial_sequence(),
            out_dir: PathBuf::from("out"),
            sequential: false,
        }
    }
}

impl RunConfig {
    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Parses `key = value` lines (`#` starts a comment). Keys are the
    /// Double Tank constants plus `nodes`, `stage_nodes`, `min_uptime`,
    /// `sequence` and `out_dir`.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.params.set(key, value)? {
            return Ok(());
        }
        let bad = |what: &str| Error::Config(format!("'{key}': cannot parse '{value}' as {what}"));
        match key {
            "nodes" => self.nodes = value.parse().map_err(|_| bad("a count"))?,
            "stage_nodes" => {
                self.stage_nodes = match value {
                    "" | "auto" => None,
                    v => Some(v.parse().map_err(|_| bad("a count"))?),
                }
            }
            "min_uptime" => self.min_uptime = value.parse().map_err(|_| bad("a number"))?,
            "sequence" => self.sequence = parse_sequence(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "sequential" => self.sequential = value.parse().map_err(|_| bad("true or false"))?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks every value; commands call this before any solve.
    pub fn validate(&self) -> Result<ProblemSpec> {
        self.params.validate()?;
        if self.nodes < 2 {
            return Err(Error::Config(format!("nodes must be at least 2, got {}", self.nodes)));
        }
        if self.stage_nodes == Some(0) {
            return Err(Error::Config("stage_nodes must be positive".into()));
        }
        if !self.min_uptime.is_finite() || self.min_uptime < 0.0 {
            return Err(Error::Config(format!("min_uptime must be a non-negative number, got {}", self.min_uptime)));
        }
        let spec = self.params.problem();
        self.sequence.validate(&spec)?;
        Ok(spec)
    }

    pub fn execution(&self) -> isto::Execution {
        if self.sequential {
            isto::Execution::Sequential
        } else {
            isto::Execution::default()
        }
    }
}

/// `11,01,10` or `1 1; 0 1; 1 0` style stage lists.
pub fn parse_sequence(text: &str) -> Result<Sequence> {
    let stages: Vec<Vec<f64>> = text
        .split([',', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|stage| {
            stage
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| match c {
                    '0' => Ok(0.0),
                    '1' => Ok(1.0),
                    _ => Err(Error::Config(format!("stage '{stage}' must consist of 0 and 1"))),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if stages.is_empty() {
        return Err(Error::Config("empty sequence".into()));
    }
    Ok(Sequence::new(stages))
}

pub fn format_sequence(seq: &[Vec<f64>]) -> String {
    seq.iter()
        .map(|s| s.iter().map(|&v| if v > 0.5 { '1' } else { '0' }).collect::<String>())
        .collect::<Vec<_>>()
        .join(",")
}
