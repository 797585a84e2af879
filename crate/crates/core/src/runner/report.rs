//! Box-plot figures, the significance table and a winner-chain summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};
use crate::eval::stats::ALPHA;
use crate::eval::Metric;

use super::{AxisOutcome, ExperimentRecord, StudySummary, AXES_FILE, RECORDS_FILE, SUMMARY_FILE};

/// Files written by [`write_report`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub figures: Vec<PathBuf>,
    pub table_csv: PathBuf,
    pub table_md: PathBuf,
    pub summary_md: PathBuf,
}

/// One row of the significance table: a test on one axis, p per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub axis: String,
    pub test: String,
    pub groups: String,
    pub p: [Option<f64>; 4],
}

pub const TABLE_METRICS: [Metric; 4] = [
    Metric::BalancedAccuracy,
    Metric::F1,
    Metric::Precision,
    Metric::Recall,
];

pub fn table_rows(axes: &[AxisOutcome]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for ax in axes {
        let n = ax.tests.iter().map(|t| t.results.len()).max().unwrap_or(0);
        for i in 0..n {
            let first = ax.tests.iter().find_map(|t| t.results.get(i));
            let Some(first) = first else { continue };
            let mut p = [None; 4];
            for (k, m) in TABLE_METRICS.iter().enumerate() {
                p[k] = ax
                    .tests
                    .iter()
                    .find(|t| t.metric == *m)
                    .and_then(|t| t.results.get(i))
                    .map(|r| r.p_value);
            }
            rows.push(TableRow {
                axis: ax.axis.title().to_string(),
                test: first.test.name().to_string(),
                groups: first.groups.join(" vs "),
                p,
            });
        }
    }
    rows
}

pub fn format_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.1e}")
    } else {
        format!("{p:.4}")
    }
}

/// Markdown cell; significant values are bold.
pub fn p_cell(p: Option<f64>) -> String {
    match p {
        Some(p) if p < ALPHA => format!("**{}**", format_p(p)),
        Some(p) => format_p(p),
        None => "n/a".into(),
    }
}

pub fn table_markdown(rows: &[TableRow]) -> String {
    let mut s = String::from("| Axis | Test | Groups |");
    for m in TABLE_METRICS {
        let _ = write!(s, " {} |", m.name());
    }
    s.push_str("\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = write!(s, "| {} | {} | {} |", r.axis, r.test, r.groups);
        for p in r.p {
            let _ = write!(s, " {} |", p_cell(p));
        }
        s.push('\n');
    }
    if rows.is_empty() {
        s.push_str("\nNo axis had two or more complete options to compare.\n");
    }
    s
}

fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["axis".to_string(), "test".into(), "groups".into()];
    header.extend(TABLE_METRICS.iter().map(|m| m.name().to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.axis.clone(), r.test.clone(), r.groups.clone()];
        rec.extend(
            r.p.iter()
                .map(|p| p.map(|v| format!("{v}")).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Four panels (one per metric) of per-option box plots with fold points.
pub fn axis_svg(ax: &AxisOutcome) -> String {
    let (pw, ph, top, left, gap) = (260.0, 220.0, 40.0, 44.0, 30.0);
    let width = left + 4.0 * (pw + gap);
    let height = top + ph + 70.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{left}\" y=\"18\" font-size=\"14\">{}</text>",
        esc(ax.axis.title())
    );
    let n = ax.options.len().max(1) as f64;
    for (k, m) in TABLE_METRICS.iter().enumerate() {
        let x0 = left + k as f64 * (pw + gap);
        let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
        let _ = writeln!(
            s,
            "<rect x=\"{x0}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + pw / 2.0,
            top - 6.0,
            m.name()
        );
        for t in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{t:.1}</text>",
                x0 - 3.0,
                y(t) + 4.0
            );
        }
        let slot = pw / n;
        for (i, o) in ax.options.iter().enumerate() {
            let cx = x0 + slot * (i as f64 + 0.5);
            let winner = ax.winner.as_deref() == Some(o.option.as_str());
            let fill = if winner {
                "#4caf50"
            } else if o.complete {
                "#9ecae1"
            } else {
                "#dddddd"
            };
            if let Some(r) = &o.report {
                let mut v = r.values(*m);
                v.sort_by(f64::total_cmp);
                let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
                let bw = (slot * 0.5).min(40.0);
                let _ = writeln!(
                    s,
                    "<line x1=\"{cx}\" x2=\"{cx}\" y1=\"{}\" y2=\"{}\" stroke=\"#333\"/>",
                    y(v[0]),
                    y(v[v.len() - 1])
                );
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{}\" width=\"{bw}\" height=\"{}\" fill=\"{fill}\" stroke=\"#333\"/>",
                    cx - bw / 2.0,
                    y(q3),
                    (y(q1) - y(q3)).max(0.5)
                );
                let _ = writeln!(
                    s,
                    "<line x1=\"{}\" x2=\"{}\" y1=\"{}\" y2=\"{}\" stroke=\"#000\" stroke-width=\"2\"/>",
                    cx - bw / 2.0,
                    cx + bw / 2.0,
                    y(med),
                    y(med)
                );
                for (j, val) in r.values(*m).iter().enumerate() {
                    let jitter = (j as f64 - (v.len() as f64 - 1.0) / 2.0) * 3.0;
                    let _ = writeln!(
                        s,
                        "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#d62728\"/>",
                        cx + jitter,
                        y(*val)
                    );
                }
            }
            let label = if o.complete {
                esc(&o.option)
            } else {
                format!("{} (partial)", esc(&o.option))
            };
            let ly = top + ph + 14.0;
            let _ = writeln!(
                s,
                "<text x=\"{cx}\" y=\"{ly}\" text-anchor=\"end\" transform=\"rotate(-30 {cx} {ly})\">{label}</text>"
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn summary_markdown(
    axes: &[AxisOutcome],
    summary: Option<&StudySummary>,
    n_records: usize,
) -> String {
    let mut s = String::from("# Ablation summary\n\n");
    if axes.is_empty() {
        let _ = writeln!(s, "No axis has been evaluated yet ({n_records} records).");
        return s;
    }
    s.push_str("## Winner chain\n\n");
    for ax in axes {
        let _ = writeln!(
            s,
            "- {}: {}",
            ax.axis.title(),
            ax.winner.as_deref().unwrap_or("none (no complete option)")
        );
    }
    if let Some(sum) = summary {
        let _ = writeln!(s, "\nFinal pipeline: `{}`", sum.final_choices.key());
    } else {
        s.push_str("\nThe study has not finished; later axes are missing.\n");
    }
    for ax in axes {
        let _ = writeln!(s, "\n## {}\n", ax.axis.title());
        s.push_str(
            "| Option | Channels | Folds | Balanced Accuracy | F1-score | Precision | Recall |\n",
        );
        s.push_str("|---|---|---|---|---|---|---|\n");
        for o in &ax.options {
            let mark = if ax.winner.as_deref() == Some(o.option.as_str()) {
                " (selected)"
            } else {
                ""
            };
            match &o.report {
                Some(r) => {
                    let _ = writeln!(
                        s,
                        "| {}{mark} | {} | {}{} | {:.3} | {:.3} | {:.3} | {:.3} |",
                        o.option,
                        o.channels,
                        r.per_fold.len(),
                        if o.complete { "" } else { " (partial)" },
                        r.balanced_accuracy,
                        r.f1,
                        r.precision,
                        r.recall
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "| {} | {} | 0 | n/a | n/a | n/a | n/a |",
                        o.option, o.channels
                    );
                }
            }
        }
        for n in &ax.notes {
            let _ = writeln!(s, "\nNote: {n}");
        }
    }
    if let Some(sum) = summary.filter(|s| !s.explained.is_empty()) {
        s.push_str("\n## Explained test samples\n\n| Sample | Truth | Predicted | PD | SD | PR | CR | Dice |\n|---|---|---|---|---|---|---|---|\n");
        for r in &sum.explained {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                r.sample,
                r.truth.as_deref().unwrap_or("?"),
                r.predicted,
                r.p_pd,
                r.p_sd,
                r.p_pr,
                r.p_cr,
                r.cam_saliency_dice
                    .map_or("n/a".into(), |d| format!("{d:.3}"))
            );
        }
    }
    s
}

/// Write figures, table and summary under `out/report`.
pub fn write_report(
    out: &Path,
    records: &[ExperimentRecord],
    axes: &[AxisOutcome],
    summary: Option<&StudySummary>,
) -> Result<ReportFiles> {
    let dir = out.join("report");
    fs::create_dir_all(&dir).at(&dir)?;
    let mut files = ReportFiles::default();
    for ax in axes {
        let p = dir.join(format!("boxplot_{}.svg", ax.axis.key()));
        fs::write(&p, axis_svg(ax)).at(&p)?;
        files.figures.push(p);
    }
    let rows = table_rows(axes);
    files.table_csv = dir.join("significance.csv");
    write_table_csv(&files.table_csv, &rows)?;
    files.table_md = dir.join("significance.md");
    fs::write(&files.table_md, table_markdown(&rows)).at(&files.table_md)?;
    files.summary_md = dir.join("summary.md");
    fs::write(
        &files.summary_md,
        summary_markdown(axes, summary, records.len()),
    )
    .at(&files.summary_md)?;
    Ok(files)
}

/// Re-render the report from whatever a (possibly unfinished) study left on disk.
pub fn report_from_dir(out: &Path) -> Result<ReportFiles> {
    let records = super::RecordStore::open(&out.join(RECORDS_FILE))?.records;
    let axes: Vec<AxisOutcome> = match fs::read(out.join(AXES_FILE)) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(_) => Vec::new(),
    };
    let summary: Option<StudySummary> = match fs::read(out.join(SUMMARY_FILE)) {
        Ok(b) => Some(serde_json::from_slice(&b)?),
        Err(_) => None,
    };
    write_report(out, &records, &axes, summary.as_ref())
}
