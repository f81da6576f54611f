//! Comment header written at the top of every output file.

use sha2::{Digest, Sha256};

use crate::config::ExperimentSpec;
use crate::CmdError;

pub const TOOL: &str = concat!("fluxsense ", env!("CARGO_PKG_VERSION"));

const UNITS: &str = "rates 1/s (0.2 MHz = 0.2e6), detunings rad/s, times s, flux in flux quanta";

/// SHA-256 of `text` framed like a git blob object: `blob <len>\0<text>`.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub tool: String,
    pub seed: Option<u64>,
    pub hash: String,
    pub config: String,
    /// Extra `key: value` lines, e.g. the sensor a file belongs to.
    pub extra: Vec<(String, String)>,
}

impl Header {
    pub fn new(spec: &ExperimentSpec) -> Self {
        let config = spec.resolved_json();
        Header {
            tool: TOOL.to_string(),
            seed: spec.sweep.as_ref().map(|s| s.seed),
            hash: content_hash(&config),
            config,
            extra: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.extra.push((key.to_string(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = format!("# tool: {}\n", self.tool);
        match self.seed {
            Some(seed) => s.push_str(&format!("# seed: {seed}\n")),
            None => s.push_str("# seed: none\n"),
        }
        s.push_str(&format!("# config-sha256: {}\n", self.hash));
        s.push_str(&format!("# config: {}\n", self.config));
        s.push_str(&format!("# units: {UNITS}\n"));
        for (k, v) in &self.extra {
            s.push_str(&format!("# {k}: {v}\n"));
        }
        s
    }

    /// Parse the leading `#` lines of `text`.
    pub fn parse(text: &str) -> Result<Self, CmdError> {
        let mut tool = None;
        let mut seed = None;
        let mut hash = None;
        let mut config = None;
        let mut extra = Vec::new();
        for line in text.lines() {
            let Some(body) = line.strip_prefix("# ") else {
                break;
            };
            let Some((key, value)) = body.split_once(": ") else {
                continue;
            };
            match key {
                "tool" => tool = Some(value.to_string()),
                "seed" => {
                    seed = match value {
                        "none" => None,
                        v => Some(v.parse().map_err(|_| {
                            CmdError::Runtime(format!("bad seed in header: {v:?}"))
                        })?),
                    }
                }
                "config-sha256" => hash = Some(value.to_string()),
                "config" => config = Some(value.to_string()),
                "units" => {}
                _ => extra.push((key.to_string(), value.to_string())),
            }
        }
        let missing = |what: &str| CmdError::Runtime(format!("output header lacks {what}"));
        Ok(Header {
            tool: tool.ok_or_else(|| missing("tool"))?,
            seed,
            hash: hash.ok_or_else(|| missing("config-sha256"))?,
            config: config.ok_or_else(|| missing("config"))?,
            extra,
        })
    }

    pub fn spec(&self) -> Result<ExperimentSpec, CmdError> {
        if content_hash(&self.config) != self.hash {
            return Err(CmdError::Runtime(
                "header config does not match its hash".into(),
            ));
        }
        ExperimentSpec::from_json(&self.config, "output header")
    }
}
