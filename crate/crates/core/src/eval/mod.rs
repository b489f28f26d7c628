//! Retrieval, text-generation and VQA metrics plus a small report type.

pub mod nlg;
pub mod retrieval;
pub mod vqa;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use nlg::{bleu, corpus_nlg, meteor_simplified, metric_tokens, rouge, RougeVariant};
pub use retrieval::{map_at_k, recall_at_k, shared_label_relevance, RankedRetrieval};
pub use vqa::{vqa_accuracy, VqaLevel};

/// Named metric values (percentages unless the name says otherwise) and the
/// number of scored items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub values: BTreeMap<String, f64>,
    pub count: usize,
}

impl MetricReport {
    pub fn new(task: &str, count: usize) -> Self {
        Self {
            task: task.to_string(),
            values: BTreeMap::new(),
            count,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        self.values.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// Fails on an empty report or any non-finite value.
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Input(format!("{} report scored no items", self.task)));
        }
        let bad: Vec<&str> = self
            .values
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
            .collect();
        if !bad.is_empty() {
            return Err(Error::Input(format!("non-finite metrics in {}: {}", self.task, bad.join(", "))));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn table(&self) -> String {
        let width = self.values.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{} (n = {})", self.task, self.count);
        for (k, v) in &self.values {
            let _ = writeln!(s, "  {k:<width$}  {v:>8.2}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_rejects_nan_and_empty() {
        let mut r = MetricReport::new("retrieval", 3);
        r.insert("r@1", 50.0);
        r.validate().unwrap();
        assert!(r.table().contains("r@1"));
        r.insert("map@5", f64::NAN);
        assert!(r.validate().is_err());
        assert!(MetricReport::new("x", 0).validate().is_err());
    }
}
