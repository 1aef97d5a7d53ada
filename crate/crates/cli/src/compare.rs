//! Side-by-side rendering of two evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rrlm::eval::EvalReport;
use rrlm::{Error, Result};

pub const REPORT_FILE: &str = "eval.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
    Tie,
}

#[derive(Clone, Copy, Debug)]
pub struct Metric {
    pub name: &'static str,
    pub lower_is_better: bool,
    pub get: fn(&EvalReport) -> f64,
}

pub const METRICS: [Metric; 4] = [
    Metric { name: "proxy_fad", lower_is_better: true, get: |r| r.proxy_fad },
    Metric { name: "proxy_kl", lower_is_better: true, get: |r| r.proxy_kl },
    Metric { name: "scene_acc", lower_is_better: false, get: |r| r.scene_accuracy },
    Metric { name: "scene_f1", lower_is_better: false, get: |r| r.scene_f1 },
];

#[derive(Clone, Debug)]
pub struct Comparison {
    pub labels: [String; 2],
    pub values: [[f64; 4]; 2],
    pub deltas: [f64; 4],
    pub winners: [Winner; 4],
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport, label_a: &str, label_b: &str) -> Comparison {
    let va = METRICS.map(|m| (m.get)(a));
    let vb = METRICS.map(|m| (m.get)(b));
    let mut deltas = [0.0; 4];
    let mut winners = [Winner::Tie; 4];
    for (i, m) in METRICS.iter().enumerate() {
        deltas[i] = vb[i] - va[i];
        winners[i] = if va[i] == vb[i] {
            Winner::Tie
        } else if (vb[i] < va[i]) == m.lower_is_better {
            Winner::B
        } else {
            Winner::A
        };
    }
    Comparison { labels: [label_a.into(), label_b.into()], values: [va, vb], deltas, winners }
}

impl Comparison {
    pub fn summary(&self) -> String {
        let pick = |w: Winner| METRICS.iter().zip(&self.winners).filter(|(_, &x)| x == w).map(|(m, _)| m.name).collect::<Vec<_>>();
        let (wins, losses, ties) = (pick(Winner::B), pick(Winner::A), pick(Winner::Tie));
        format!(
            "{} vs {}: {} wins {} [{}], loses {} [{}], ties {}",
            self.labels[1],
            self.labels[0],
            self.labels[1],
            wins.len(),
            wins.join(" "),
            losses.len(),
            losses.join(" "),
            ties.len()
        )
    }

    pub fn render(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max("delta".len());
        let mut out = String::new();
        write!(out, "{:<width$}", "method").unwrap();
        for m in &METRICS {
            let arrow = if m.lower_is_better { "↓" } else { "↑" };
            write!(out, "  {:>12}", format!("{} {arrow}", m.name)).unwrap();
        }
        out.push('\n');
        for (label, vals) in self.labels.iter().zip(&self.values) {
            write!(out, "{label:<width$}").unwrap();
            for v in vals {
                write!(out, "  {v:>12.6}").unwrap();
            }
            out.push('\n');
        }
        write!(out, "{:<width$}", "delta").unwrap();
        for d in &self.deltas {
            write!(out, "  {d:>+12.6}").unwrap();
        }
        out.push('\n');
        out.push_str(&self.summary());
        out.push('\n');
        out
    }
}

pub fn load_report(dir: &Path) -> Result<EvalReport> {
    let path = if dir.is_dir() { dir.join(REPORT_FILE) } else { dir.to_path_buf() };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Metric(format!("missing report {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
