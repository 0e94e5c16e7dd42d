//! Result tables: per-episode CSV, JSON and a fixed-width text rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, MetaTestReport};
use crate::retrieval::{Cutoffs, EpisodeMetrics, Stat};

/// `(after - before) / before` on raw values; `None` when `before` is zero.
pub fn growth_rate(before: f64, after: f64) -> Option<f64> {
    (before != 0.0).then(|| (after - before) / before)
}

fn column_names(cutoffs: &Cutoffs) -> Vec<String> {
    let mut names = vec!["mAP".to_string()];
    names.extend(cutoffs.recall.iter().map(|k| format!("R@{k}")));
    names.extend(cutoffs.ndcg.iter().map(|k| format!("nDCG@{k}")));
    names.extend(cutoffs.mpd.iter().map(|k| format!("mPD@{k}")));
    names
}

/// Values of `m` in [`column_names`] order; metrics the episode lacks are `None`.
fn columns_of(m: &EpisodeMetrics, cutoffs: &Cutoffs) -> Vec<Option<f64>> {
    let mut v = vec![m.map];
    v.extend(cutoffs.recall.iter().map(|k| m.recall.get(k).copied()));
    v.extend(cutoffs.ndcg.iter().map(|k| m.ndcg.get(k).copied()));
    v.extend(cutoffs.mpd.iter().map(|k| m.mpd.get(k).copied()));
    v
}

fn column_stats(episodes: &[Vec<Option<f64>>], width: usize) -> Vec<Option<Stat>> {
    (0..width)
        .map(|c| {
            let vals: Vec<f64> = episodes.iter().filter_map(|e| e[c]).collect();
            (!vals.is_empty()).then(|| Stat::of(&vals))
        })
        .collect()
}

/// One (adapter, way, shot) row. Continuous runs have no `way`; their
/// `shot` is the labeled-pair budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub adapter: AdapterKind,
    pub way: Option<usize>,
    pub shot: usize,
    pub inner_steps: usize,
    pub before: Vec<Option<Stat>>,
    pub after: Vec<Option<Stat>>,
    /// Growth rate of the episode means, per column.
    pub growth: Vec<Option<f64>>,
    #[serde(skip)]
    pub episodes_before: Vec<Vec<Option<f64>>>,
    #[serde(skip)]
    pub episodes_after: Vec<Vec<Option<f64>>>,
}

impl ResultRow {
    pub fn new(
        adapter: AdapterKind,
        way: Option<usize>,
        shot: usize,
        inner_steps: usize,
        report: &MetaTestReport,
        cutoffs: &Cutoffs,
    ) -> Self {
        let width = column_names(cutoffs).len();
        let cols = |r: &crate::retrieval::RetrievalReport| -> Vec<Vec<Option<f64>>> {
            r.per_episode.iter().map(|m| columns_of(m, cutoffs)).collect()
        };
        let (episodes_before, episodes_after) = (cols(&report.before), cols(&report.after));
        let before = column_stats(&episodes_before, width);
        let after = column_stats(&episodes_after, width);
        let growth = before
            .iter()
            .zip(&after)
            .map(|(b, a)| match (b, a) {
                (Some(b), Some(a)) => growth_rate(b.mean, a.mean),
                _ => None,
            })
            .collect();
        Self {
            adapter,
            way,
            shot,
            inner_steps,
            before,
            after,
            growth,
            episodes_before,
            episodes_after,
        }
    }

    pub fn mean(&self, after: bool, column: usize) -> Option<f64> {
        let stats = if after { &self.after } else { &self.before };
        stats[column].map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl ResultTable {
    pub fn new(cutoffs: &Cutoffs) -> Self {
        Self {
            columns: column_names(cutoffs),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn row(&self, adapter: AdapterKind, shot: usize) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.adapter == adapter && r.shot == shot)
    }

    /// One line per episode and phase, then `mean` and `stderr` lines per row and phase.
    pub fn to_csv(&self) -> String {
        let mut out = format!("episode,adapter,way,shot,phase,{}\n", self.columns.join(","));
        let key = |r: &ResultRow| {
            format!(
                "{},{},{}",
                r.adapter.name(),
                r.way.map(|w| w.to_string()).unwrap_or_default(),
                r.shot
            )
        };
        for r in &self.rows {
            for (e, (b, a)) in r.episodes_before.iter().zip(&r.episodes_after).enumerate() {
                for (phase, vals) in [("before", b), ("after", a)] {
                    let cells: Vec<String> = vals.iter().map(|v| cell(*v)).collect();
                    let _ = writeln!(out, "{e},{},{phase},{}", key(r), cells.join(","));
                }
            }
        }
        for (label, pick) in [("mean", 0), ("stderr", 1)] {
            for r in &self.rows {
                for (phase, stats) in [("before", &r.before), ("after", &r.after)] {
                    let cells: Vec<String> = stats
                        .iter()
                        .map(|s| cell(s.map(|s| if pick == 0 { s.mean } else { s.std_err })))
                        .collect();
                    let _ = writeln!(out, "{label},{},{phase},{}", key(r), cells.join(","));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width table: `before -> after (growth%)` per column. Retrieval
    /// scores are shown in percent; mPD in label units.
    pub fn to_text(&self) -> String {
        let shown: Vec<usize> = (0..self.columns.len())
            .filter(|&c| self.rows.iter().any(|r| r.before[c].is_some()))
            .collect();
        let mut out = format!("{:<8}{:>5}{:>6}{:>7}", "adapter", "way", "shot", "steps");
        for &c in &shown {
            let _ = write!(out, "  {:>26}", self.columns[c]);
        }
        out.push('\n');
        for r in &self.rows {
            let way = r.way.map(|w| w.to_string()).unwrap_or_else(|| "-".into());
            let _ = write!(out, "{:<8}{way:>5}{:>6}{:>7}", r.adapter.name(), r.shot, r.inner_steps);
            for &c in &shown {
                let scale = if self.columns[c].starts_with("mPD") { 1.0 } else { 100.0 };
                let text = match (r.mean(false, c), r.mean(true, c)) {
                    (Some(b), Some(a)) => {
                        let g = r.growth[c].map(|g| format!("{:+.1}%", 100.0 * g)).unwrap_or_else(|| "n/a".into());
                        format!("{:.2} -> {:.2} ({g})", b * scale, a * scale)
                    }
                    _ => "-".into(),
                };
                let _ = write!(out, "  {text:>26}");
            }
            out.push('\n');
        }
        out
    }
}
