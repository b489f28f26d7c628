use crate::error::{Error, Result};
use crate::synthdata::{MAJOR_REGIONS, MINOR_REGIONS, NOT_PRESENT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqaLevel {
    Major,
    Minor,
}

pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.trim_end_matches(['.', ',', '?', '!']).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Major-region part of a location answer: the answer without its leading
/// minor word. Answers without a known major region map to themselves.
pub fn major_part(answer: &str) -> String {
    let norm = normalize_answer(answer);
    for minor in MINOR_REGIONS {
        if let Some(rest) = norm.strip_prefix(minor).and_then(|r| r.strip_prefix(' ')) {
            if MAJOR_REGIONS.contains(&rest) {
                return rest.to_string();
            }
        }
    }
    norm
}

/// Exact-match accuracy (percentage) after normalisation. At the major
/// level both sides are reduced to their major region first; "not present"
/// is its own class at both levels.
pub fn vqa_accuracy(preds: &[String], golds: &[String], level: VqaLevel) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!("{} predictions for {} answers", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::Input("no VQA answers to score".into()));
    }
    let key = |s: &str| match level {
        VqaLevel::Minor => normalize_answer(s),
        VqaLevel::Major => major_part(s),
    };
    let correct = preds.iter().zip(golds).filter(|(p, g)| key(p) == key(g)).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

pub fn is_not_present(answer: &str) -> bool {
    normalize_answer(answer) == NOT_PRESENT
}
