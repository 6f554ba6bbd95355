use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub gt_boxes: usize,
    pub detections: usize,
}

impl ClassRow {
    fn metrics(&self) -> [f64; 4] {
        [self.precision, self.recall, self.map50, self.map50_95]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub images: usize,
    pub gt_boxes: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub model: String,
    pub rows: Vec<ClassRow>,
    /// Unweighted mean of the rows whose class occurs in the ground truth.
    pub all: ClassRow,
    pub counts: EvalCounts,
    #[serde(default)]
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(condition: &str, model: &str, rows: Vec<ClassRow>, counts: EvalCounts) -> Self {
        let present: Vec<&ClassRow> = rows.iter().filter(|r| r.gt_boxes > 0).collect();
        let mean = |f: fn(&ClassRow) -> f64| {
            if present.is_empty() {
                0.0
            } else {
                present.iter().map(|r| f(r)).sum::<f64>() / present.len() as f64
            }
        };
        let all = ClassRow {
            class: "all".into(),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            map50: mean(|r| r.map50),
            map50_95: mean(|r| r.map50_95),
            gt_boxes: counts.gt_boxes,
            detections: counts.detections,
        };
        Self { condition: condition.into(), model: model.into(), rows, all, counts, config_hash: String::new() }
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn map50(&self) -> f64 {
        self.all.map50
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mark {
    Better,
    Worse,
    Tie,
}

impl Mark {
    pub fn of(baseline: f64, candidate: f64) -> Self {
        if candidate > baseline {
            Mark::Better
        } else if candidate < baseline {
            Mark::Worse
        } else {
            Mark::Tie
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Mark::Better => "better",
            Mark::Worse => "worse",
            Mark::Tie => "tie",
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Mark::Better => '+',
            Mark::Worse => '-',
            Mark::Tie => '=',
        }
    }
}

const METRICS: [&str; 4] = ["P", "R", "mAP@0.5", "mAP@0.5:0.95"];

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedReport {
    pub text: String,
    pub csv: String,
}

/// Side-by-side comparison of baseline and DiffYOLO reports, paired by
/// condition. Each metric cell is marked better, worse or tie from the
/// DiffYOLO point of view.
pub fn render_report(baseline: &[EvalReport], diffyolo: &[EvalReport]) -> Result<RenderedReport> {
    let mut pairs = Vec::with_capacity(baseline.len());
    for b in baseline {
        if baseline.iter().filter(|o| o.condition == b.condition).count() > 1 {
            return invalid(format!("condition `{}` appears twice among baseline reports", b.condition));
        }
        let Some(d) = diffyolo.iter().find(|d| d.condition == b.condition) else {
            return invalid(format!("baseline condition `{}` has no DiffYOLO counterpart", b.condition));
        };
        let names = |r: &EvalReport| r.rows.iter().map(|row| row.class.clone()).collect::<Vec<_>>();
        if names(b) != names(d) {
            return invalid(format!("condition `{}`: class taxonomies differ", b.condition));
        }
        pairs.push((b, d));
    }
    if let Some(extra) = diffyolo.iter().find(|d| !baseline.iter().any(|b| b.condition == d.condition)) {
        return invalid(format!("DiffYOLO condition `{}` has no baseline counterpart", extra.condition));
    }

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["condition", "class", "metric", "baseline", "diffyolo", "delta", "mark"])?;
    let mut text = String::new();
    for (b, d) in &pairs {
        let _ = writeln!(text, "condition: {}  (baseline vs diffyolo)", b.condition);
        let _ = write!(text, "{:<12}", "class");
        for m in METRICS {
            let _ = write!(text, " {m:>19} ");
        }
        let trimmed = text.trim_end_matches(' ').len();
        text.truncate(trimmed);
        text.push('\n');
        let rows = std::iter::once((&b.all, &d.all)).chain(b.rows.iter().zip(&d.rows));
        for (rb, rd) in rows {
            let _ = write!(text, "{:<12}", rb.class);
            for ((name, vb), vd) in METRICS.iter().zip(rb.metrics()).zip(rd.metrics()) {
                let mark = Mark::of(vb, vd);
                let _ = write!(text, " {:>7.3} {:>7.3} [{}] ", vb, vd, mark.symbol());
                csv.write_record([
                    b.condition.as_str(),
                    rb.class.as_str(),
                    name,
                    &format!("{vb:.4}"),
                    &format!("{vd:.4}"),
                    &format!("{:+.4}", vd - vb),
                    mark.word(),
                ])?;
            }
            let trimmed = text.trim_end_matches(' ').len();
            text.truncate(trimmed);
            text.push('\n');
        }
        text.push('\n');
    }
    let csv = String::from_utf8(csv.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
        .expect("csv writer emits utf-8");
    Ok(RenderedReport { text, csv })
}
