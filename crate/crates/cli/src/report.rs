use std::fmt::Write as _;

use ensemserve_core::MatrixDocument;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct ScoreRow {
    pub label: String,
    /// Samples per second; 0 when infeasible.
    pub score: f64,
    /// Bench invocations spent producing this row.
    pub bench_calls: usize,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub inputs_digest: String,
    pub seed: u64,
    pub bench: String,
    pub matrices_evaluated: usize,
    pub best_matrix: Option<MatrixDocument>,
    pub scores: Vec<ScoreRow>,
    pub wall_time_s: f64,
    pub details: serde_json::Value,
}

impl RunReport {
    pub fn print(&self, json: bool) {
        if json {
            println!("{}", serde_json::to_string_pretty(self).expect("report serializes"));
        } else {
            print!("{}", self.render());
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command     {}", self.command);
        let _ = writeln!(out, "inputs      {}", &self.inputs_digest[..16.min(self.inputs_digest.len())]);
        let _ = writeln!(out, "seed        {}", self.seed);
        let _ = writeln!(out, "bench       {}", self.bench);
        let _ = writeln!(out, "evaluated   {} matrices", self.matrices_evaluated);
        if !self.scores.is_empty() {
            let w = self.scores.iter().map(|s| s.label.len()).max().unwrap_or(0);
            let _ = writeln!(out, "\n  {:<w$}  {:>12}  {:>6}", "", "samples/s", "calls");
            for s in &self.scores {
                let _ = writeln!(out, "  {:<w$}  {:>12.2}  {:>6}", s.label, s.score, s.bench_calls);
            }
        }
        if let Some(m) = &self.best_matrix {
            let _ = writeln!(out);
            out.push_str(&render_matrix(m));
        }
        let _ = writeln!(out, "\nwall time   {:.3} s", self.wall_time_s);
        out
    }
}

pub fn render_matrix(m: &MatrixDocument) -> String {
    let label_w = m.devices.iter().map(String::len).max().unwrap_or(0);
    let widths: Vec<usize> = m.models.iter().map(|n| n.len().max(4)).collect();
    let mut out = format!("{:label_w$}", "");
    for (name, w) in m.models.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    for (label, row) in m.devices.iter().zip(&m.entries) {
        let _ = write!(out, "{label:label_w$}");
        for (b, w) in row.iter().zip(&widths) {
            let cell = if *b == 0 { ".".to_string() } else { b.to_string() };
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}
