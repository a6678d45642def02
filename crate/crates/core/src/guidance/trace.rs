use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub score: f64,
    pub grad_norm: f64,
}

impl TermRecord {
    pub fn new(score: f64, grad_norm: f64) -> Self {
        Self { score, grad_norm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub t: usize,
    pub terms: BTreeMap<String, TermRecord>,
}

/// Per-step guidance records of one sampling run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub steps: Vec<TraceStep>,
}

impl GuidanceTrace {
    pub fn push(&mut self, step: usize, t: usize, terms: impl IntoIterator<Item = (String, TermRecord)>) -> Result<()> {
        let terms: BTreeMap<_, _> = terms.into_iter().collect();
        if let Some((name, _)) = terms
            .iter()
            .find(|(_, r)| !(r.score.is_finite() && r.grad_norm.is_finite()))
        {
            return Err(Error::InvalidValue(format!("non-finite trace entry for `{name}` at step {step}")));
        }
        self.steps.push(TraceStep { step, t, terms });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean score and gradient norm per term over all steps.
    pub fn summary(&self) -> BTreeMap<String, TermRecord> {
        let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            for (name, r) in &s.terms {
                let e = acc.entry(name.clone()).or_default();
                e.0 += r.score;
                e.1 += r.grad_norm;
                e.2 += 1;
            }
        }
        acc.into_iter()
            .map(|(k, (s, g, n))| (k, TermRecord::new(s / n as f64, g / n as f64)))
            .collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let steps = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<TraceStep>, _>>()?;
        Ok(Self { steps })
    }
}
