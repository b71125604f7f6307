//! Aggregation of raw per-repetition accuracy cells into the published
//! table layout: one CSV per (architecture, detector kind) with a
//! four-condition column group per task, K rows ascending and the full
//! feature set last; a second CSV carries the standard deviations.

use super::config::Task;
use crate::attacks::AttackKind;
use crate::detectors::ArchId;
use crate::error::Result;
use crate::rdfs::ReducedKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Evaluation condition of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoAttack,
    Attack(AttackKind),
}

impl Condition {
    /// Column order within a task group, mirroring the published tables.
    pub const ORDER: [Condition; 4] = [
        Condition::NoAttack,
        Condition::Attack(AttackKind::Pgd),
        Condition::Attack(AttackKind::Fgsm),
        Condition::Attack(AttackKind::Bfgs),
    ];

    pub fn column_name(self) -> &'static str {
        match self {
            Condition::NoAttack => "no_attk",
            Condition::Attack(AttackKind::Pgd) => "pgd",
            Condition::Attack(AttackKind::Fgsm) => "fgsm",
            Condition::Attack(AttackKind::Bfgs) => "bfgs",
        }
    }
}

/// One raw accuracy measurement: a single repetition of a single cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRow {
    pub task: Task,
    pub arch: ArchId,
    pub kind: ReducedKind,
    pub k: usize,
    /// True for the K = N row.
    pub full: bool,
    pub condition: Condition,
    pub rep: usize,
    /// Fraction in [0, 1].
    pub accuracy: f64,
    /// How many samples the accuracy was measured on.
    pub evaluated: usize,
}

/// One aggregated table cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: Task,
    pub arch: ArchId,
    pub kind: ReducedKind,
    /// "5", "10", ... or "N" for the full set.
    pub k_label: String,
    pub k: usize,
    pub full: bool,
    pub condition: Condition,
    pub mean_accuracy_pct: f64,
    pub std_accuracy_pct: f64,
    pub repetitions: usize,
}

/// Groups raw cells by (task, arch, kind, K, condition) and aggregates the
/// arithmetic mean and sample standard deviation, in percent.
pub fn aggregate_rows(cells: &[CellRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(Task, ArchId, ReducedKind, usize, bool, Condition), Vec<f64>> =
        BTreeMap::new();
    for c in cells {
        groups
            .entry((c.task, c.arch, c.kind, c.k, c.full, c.condition))
            .or_default()
            .push(c.accuracy);
    }
    groups
        .into_iter()
        .map(|((task, arch, kind, k, full, condition), mut accs)| {
            accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = accs.len();
            let mean = accs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            ReportRow {
                task,
                arch,
                kind,
                k_label: if full { "N".to_string() } else { k.to_string() },
                k,
                full,
                condition,
                mean_accuracy_pct: mean * 100.0,
                std_accuracy_pct: std * 100.0,
                repetitions: n,
            }
        })
        .collect()
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders one CSV per (arch, kind) pair present in the rows, mean and std
/// variants, plus a text summary. Missing cells render as empty fields and
/// are listed in the summary.
pub fn render_tables(rows: &[ReportRow]) -> (Vec<(String, String)>, String) {
    let mut pairs: Vec<(ArchId, ReducedKind)> = rows.iter().map(|r| (r.arch, r.kind)).collect();
    pairs.sort();
    pairs.dedup();

    let mut files = Vec::new();
    let mut summary = String::new();
    let _ = writeln!(summary, "accuracy tables (mean over repetitions, percent)");

    for (arch, kind) in pairs {
        let sub: Vec<&ReportRow> =
            rows.iter().filter(|r| r.arch == arch && r.kind == kind).collect();
        let mut tasks: Vec<Task> = Task::ALL.into_iter().filter(|t| sub.iter().any(|r| r.task == *t)).collect();
        if tasks.is_empty() {
            tasks = vec![];
        }
        let mut ks: Vec<(usize, bool)> = sub.iter().map(|r| (r.k, r.full)).collect();
        ks.sort_by_key(|&(k, full)| (full, k)); // full-set row last, like the published tables
        ks.dedup();

        let mut header = String::from("K");
        for t in &tasks {
            for c in Condition::ORDER {
                let _ = write!(header, ",{}_{}", t.name(), c.column_name());
            }
        }

        let lookup = |k: usize, full: bool, t: Task, c: Condition| -> Option<&ReportRow> {
            sub.iter().find(|r| r.k == k && r.full == full && r.task == t && r.condition == c).copied()
        };

        let mut missing = Vec::new();
        let render = |value: fn(&ReportRow) -> f64, missing: &mut Vec<String>| -> String {
            let mut csv = header.clone();
            csv.push('\n');
            for &(k, full) in &ks {
                let label = if full { "N".to_string() } else { k.to_string() };
                let mut line = label.clone();
                for t in &tasks {
                    for c in Condition::ORDER {
                        match lookup(k, full, *t, c) {
                            Some(r) => {
                                let _ = write!(line, ",{}", fmt_pct(value(r)));
                            }
                            None => {
                                line.push(',');
                                missing.push(format!(
                                    "{arch}/{kind}: K={label} {} {}",
                                    t.name(),
                                    c.column_name()
                                ));
                            }
                        }
                    }
                }
                csv.push_str(&line);
                csv.push('\n');
            }
            csv
        };

        let mean_csv = render(|r| r.mean_accuracy_pct, &mut missing);
        let mut scratch = Vec::new();
        let std_csv = render(|r| r.std_accuracy_pct, &mut scratch);
        let stem = format!("report_{arch}_{kind}");
        files.push((format!("{stem}_mean.csv"), mean_csv));
        files.push((format!("{stem}_std.csv"), std_csv));

        let reps = sub.iter().map(|r| r.repetitions).max().unwrap_or(0);
        let _ = writeln!(
            summary,
            "{arch}/{kind}: tasks [{}], K rows [{}], repetitions {reps}",
            tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(", "),
            ks.iter()
                .map(|&(k, full)| if full { "N".into() } else { k.to_string() })
                .collect::<Vec<_>>()
                .join(", "),
        );
        missing.sort();
        missing.dedup();
        for m in missing {
            let _ = writeln!(summary, "  missing cell: {m}");
        }
    }
    (files, summary)
}

/// Paths written by [`aggregate_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub tables: Vec<PathBuf>,
    pub summary: PathBuf,
}

/// Aggregates raw cells and writes the CSVs and summary under `dir`.
/// Re-running on the same rows is byte-identical.
pub fn aggregate_report(cells: &[CellRow], dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let rows = aggregate_rows(cells);
    let (files, summary) = render_tables(&rows);
    let mut table_paths = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        std::fs::write(&path, content)?;
        table_paths.push(path);
    }
    let summary_path = dir.join("summary.txt");
    std::fs::write(&summary_path, summary)?;
    Ok(ReportFiles { tables: table_paths, summary: summary_path })
}
