//! Ablation grid over backends, agent structure and simulation structure.
//! Each cell runs the simulation and measures dialogue entropy.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::entropy::{bigram_entropy, Tokenizer};
use crate::backend::BackendDescriptor;
use crate::engine::{Component, RunOptions, Simulation};
use crate::model::StoryConfig;

/// One column of the grid: the set of components switched off.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub label: String,
    #[serde(default)]
    pub ablate: BTreeSet<Component>,
}

impl AblationSpec {
    pub fn baseline() -> Self {
        Self { label: "baseline".into(), ablate: BTreeSet::new() }
    }

    pub fn without(c: Component) -> Self {
        let mut label = c.as_str().to_string();
        label[..1].make_ascii_uppercase();
        Self { label: format!("w/o {label}"), ablate: BTreeSet::from([c]) }
    }
}

/// The table columns: baseline, then single removals.
pub fn default_columns() -> Vec<AblationSpec> {
    let mut cols = vec![AblationSpec::baseline()];
    cols.extend(
        [Component::Planning, Component::Memory, Component::Private, Component::Confidential, Component::Group]
            .into_iter()
            .map(AblationSpec::without),
    );
    cols
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub backends: Vec<BackendDescriptor>,
    #[serde(default = "default_columns")]
    pub columns: Vec<AblationSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub options: RunOptions,
}

fn default_seeds() -> Vec<u64> {
    vec![42]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub backend: String,
    pub label: String,
    pub ablate: BTreeSet<Component>,
    /// Mean entropy over the seeds that completed.
    pub entropy_bits: Option<f64>,
    pub delta_vs_baseline: Option<f64>,
    pub seeds: Vec<u64>,
    /// Hex digest of every prompt assembled, per seed.
    pub context_digests: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Job {
    backend: usize,
    column: usize,
    seed: u64,
}

type JobResult = Result<(f64, String), String>;

/// Runs every (backend, column, seed) job in parallel. Results are assembled
/// in grid order, so the output does not depend on scheduling.
pub fn run_ablation_grid(story: &StoryConfig, grid: &AblationGrid, tokenizer: &dyn Tokenizer) -> Vec<AblationCell> {
    let mut jobs = Vec::new();
    for b in 0..grid.backends.len() {
        for c in 0..grid.columns.len() {
            for &seed in &grid.seeds {
                jobs.push(Job { backend: b, column: c, seed });
            }
        }
    }
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| {
            let backend = grid.backends[job.backend].build().map_err(|e| e.to_string())?;
            let mut opts = grid.options.clone();
            opts.ablate.extend(grid.columns[job.column].ablate.iter().copied());
            let sim = Simulation::new(story.clone(), backend, opts, job.seed).map_err(|e| e.to_string())?;
            let outcome = sim.run().map_err(|e| e.to_string())?;
            let report = bigram_entropy(&outcome.log.utterances(), tokenizer);
            Ok((report.entropy_bits, outcome.context_digest))
        })
        .collect();

    let mut cells = Vec::new();
    let mut it = jobs.iter().zip(results);
    for (b, descriptor) in grid.backends.iter().enumerate() {
        let backend_id = descriptor.to_string();
        let mut row = Vec::new();
        for column in &grid.columns {
            let mut entropies = Vec::new();
            let mut digests = Vec::new();
            let mut errors = Vec::new();
            for _ in &grid.seeds {
                let (job, result) = it.next().expect("one result per job");
                debug_assert_eq!(job.backend, b);
                match result {
                    Ok((h, digest)) => {
                        entropies.push(h);
                        digests.push(digest);
                    }
                    Err(e) => errors.push(format!("seed {}: {e}", job.seed)),
                }
            }
            let entropy = (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64);
            row.push(AblationCell {
                backend: backend_id.clone(),
                label: column.label.clone(),
                ablate: column.ablate.clone(),
                entropy_bits: entropy,
                delta_vs_baseline: None,
                seeds: grid.seeds.clone(),
                context_digests: digests,
                error: (!errors.is_empty()).then(|| errors.join("; ")),
            });
        }
        let base = row.iter().find(|c| c.ablate.is_empty()).and_then(|c| c.entropy_bits);
        for cell in &mut row {
            cell.delta_vs_baseline = match (cell.entropy_bits, base) {
                (Some(h), Some(b)) => Some(h - b),
                _ => None,
            };
        }
        cells.extend(row);
    }
    cells
}

/// Aligned text table: one row per backend, one column per ablation, each
/// cell showing entropy and the delta against the baseline.
pub fn render_table(cells: &[AblationCell]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    let mut backends: Vec<&str> = Vec::new();
    for c in cells {
        if !labels.contains(&c.label.as_str()) {
            labels.push(&c.label);
        }
        if !backends.contains(&c.backend.as_str()) {
            backends.push(&c.backend);
        }
    }
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Backend".to_string()).chain(labels.iter().map(|l| l.to_string())).collect()];
    for b in &backends {
        let mut row = vec![b.to_string()];
        for l in &labels {
            let cell = cells.iter().find(|c| c.backend == *b && c.label == *l);
            row.push(match cell {
                Some(AblationCell { entropy_bits: Some(h), delta_vs_baseline: Some(d), ablate, .. }) if !ablate.is_empty() => {
                    format!("{h:.3} ({d:+.3})")
                }
                Some(AblationCell { entropy_bits: Some(h), .. }) => format!("{h:.3}"),
                Some(_) => "missing".into(),
                None => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_columns_match_the_table() {
        let labels: Vec<String> = default_columns().into_iter().map(|c| c.label).collect();
        assert_eq!(
            labels,
            ["baseline", "w/o Planning", "w/o Memory", "w/o Private", "w/o Confidential", "w/o Group"]
        );
    }

    #[test]
    fn table_shows_deltas() {
        let cell = |label: &str, ablate: &[Component], h: f64, d: f64| AblationCell {
            backend: "scripted:demo".into(),
            label: label.into(),
            ablate: ablate.iter().copied().collect(),
            entropy_bits: Some(h),
            delta_vs_baseline: Some(d),
            seeds: vec![1],
            context_digests: vec![],
            error: None,
        };
        let table = render_table(&[cell("baseline", &[], 7.0, 0.0), cell("w/o Memory", &[Component::Memory], 7.5, 0.5)]);
        assert!(table.contains("w/o Memory"));
        assert!(table.contains("7.500 (+0.500)"));
    }
}
