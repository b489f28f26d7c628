//! Instruction template banks. Template files hold one template per line;
//! location questions use the `{abnormality}` placeholder.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{abnormality}";

pub const REPORT_TEMPLATES: [&str; 10] = [
    "Describe the findings in this volume.",
    "Write a report for this scan.",
    "Generate the report for this volume.",
    "What are the findings in this volume?",
    "Summarize the findings of this scan.",
    "Provide a findings report for this volume.",
    "Report the findings of this scan.",
    "Please write the report for this volume.",
    "List the findings seen in this scan.",
    "Give a report describing this volume.",
];

pub const VQA_TEMPLATES: [&str; 10] = [
    "Where is the {abnormality} lesion?",
    "Where is the {abnormality} lesion located?",
    "In which region is the {abnormality} lesion?",
    "Locate the {abnormality} lesion.",
    "Which region contains the {abnormality} lesion?",
    "Where can the {abnormality} lesion be found?",
    "Find the location of the {abnormality} lesion.",
    "What is the location of the {abnormality} lesion?",
    "Identify the region of the {abnormality} lesion.",
    "Where in this volume is the {abnormality} lesion?",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Report,
    Vqa,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    pub task: Task,
    pub templates: Vec<String>,
}

impl TemplateBank {
    pub fn builtin(task: Task) -> Self {
        let src: &[&str] = match task {
            Task::Report => &REPORT_TEMPLATES,
            Task::Vqa => &VQA_TEMPLATES,
        };
        Self {
            task,
            templates: src.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn load(path: &Path, task: Task) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let templates: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if templates.is_empty() {
            return Err(Error::format(path, "no templates"));
        }
        if task == Task::Vqa {
            if let Some(t) = templates.iter().find(|t| !t.contains(PLACEHOLDER)) {
                return Err(Error::format(path, format!("template without {PLACEHOLDER}: {t}")));
            }
        }
        Ok(Self { task, templates })
    }

    /// Uniform draw keyed by `(seed, sample, epoch)`.
    pub fn pick(&self, seed: u64, sample: usize, epoch: usize) -> &str {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((sample as u64) << 20) ^ (epoch as u64).rotate_left(44));
        &self.templates[rng.random_range(0..self.templates.len())]
    }

    /// The first template, used at evaluation time.
    pub fn canonical(&self) -> &str {
        &self.templates[0]
    }
}

pub fn fill(template: &str, abnormality: &str) -> String {
    template.replace(PLACEHOLDER, abnormality)
}
