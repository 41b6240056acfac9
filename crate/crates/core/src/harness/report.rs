//! CSV and SVG output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, LabeledSample, Strategy, SummaryRow, TrialRecord};
use crate::objectives::ObjectiveKind;

pub const TRIALS_CSV: &str = "trials.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const TRIAL_HEADER: &str = "trial_id,n_shots,objective,strategy,parse_ok,p1_watt,p2_watt,value,ratio_to_optimal";
pub const SUMMARY_HEADER: &str = "n_shots,objective,strategy,mean_value,mean_ratio,parse_failure_rate,n_trials";

/// One line of the trial CSV: a single strategy's result in a single trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial_id: usize,
    pub n_shots: usize,
    pub objective: ObjectiveKind,
    pub strategy: Strategy,
    pub parse_ok: bool,
    pub p1_watt: f64,
    pub p2_watt: f64,
    pub value: f64,
    pub ratio_to_optimal: f64,
}

impl TrialRow {
    pub fn from_record(rec: &TrialRecord) -> impl Iterator<Item = TrialRow> + '_ {
        Strategy::ALL.into_iter().map(move |s| {
            let o = rec.outcome(s);
            TrialRow {
                trial_id: rec.trial_id,
                n_shots: rec.n_shots,
                objective: rec.objective,
                strategy: s,
                parse_ok: rec.parse_ok,
                p1_watt: o.alloc.watts[0],
                p2_watt: o.alloc.watts[1],
                value: o.value,
                ratio_to_optimal: o.ratio,
            }
        })
    }
}

/// Means per `(N_S, objective, strategy)`. Groups appear in the order their
/// `(N_S, objective)` first shows up, strategies in [`Strategy::ALL`] order.
pub fn summarize(rows: &[TrialRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(usize, ObjectiveKind)> = Vec::new();
    for r in rows {
        if !groups.contains(&(r.n_shots, r.objective)) {
            groups.push((r.n_shots, r.objective));
        }
    }
    let mut out = Vec::new();
    for (n_shots, objective) in groups {
        for strategy in Strategy::ALL {
            let sel: Vec<&TrialRow> = rows
                .iter()
                .filter(|r| r.n_shots == n_shots && r.objective == objective && r.strategy == strategy)
                .collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            out.push(SummaryRow {
                n_shots,
                objective,
                strategy,
                mean_value: sel.iter().map(|r| r.value).sum::<f64>() / n,
                mean_ratio: sel.iter().map(|r| r.ratio_to_optimal).sum::<f64>() / n,
                parse_failure_rate: sel.iter().filter(|r| !r.parse_ok).count() as f64 / n,
                n_trials: sel.len(),
            });
        }
    }
    out
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| io_err(path, e))?;
    }
    let body = w.into_inner().map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::with_capacity(header.len() + 1 + body.len());
    bytes.extend_from_slice(header.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&body);
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes `trials.csv` and `summary.csv` into `out_dir`, creating it if needed.
pub fn write_csv(records: &[TrialRecord], summaries: &[SummaryRow], out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let rows: Vec<TrialRow> = records.iter().flat_map(TrialRow::from_record).collect();
    let trials = out_dir.join(TRIALS_CSV);
    write_rows(&trials, &rows, TRIAL_HEADER)?;
    let summary = out_dir.join(SUMMARY_CSV);
    write_summary_csv(summaries, &summary)?;
    Ok(vec![trials, summary])
}

pub fn write_summary_csv(summaries: &[SummaryRow], path: &Path) -> Result<(), HarnessError> {
    write_rows(path, summaries, SUMMARY_HEADER)
}

pub fn read_trial_csv(path: &Path) -> Result<Vec<TrialRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_owned).collect();
    if header.join(",") != TRIAL_HEADER {
        return Err(io_err(path, format!("unexpected header `{}`", header.join(","))));
    }
    reader.deserialize().map(|r| r.map_err(|e| io_err(path, e))).collect()
}

/// Labeled dataset as `h11,h12,h21,h22,p1_watt,p2_watt,value`.
pub fn write_dataset_csv(samples: &[LabeledSample], path: &Path) -> Result<(), HarnessError> {
    #[derive(Serialize)]
    struct Row {
        h11: f64,
        h12: f64,
        h21: f64,
        h22: f64,
        p1_watt: f64,
        p2_watt: f64,
        value: f64,
    }
    let rows: Vec<Row> = samples
        .iter()
        .map(|s| {
            let [h11, h12, h21, h22] = s.gains.flat();
            Row { h11, h12, h21, h22, p1_watt: s.alloc.watts[0], p2_watt: s.alloc.watts[1], value: s.value }
        })
        .collect();
    write_rows(path, &rows, "h11,h12,h21,h22,p1_watt,p2_watt,value")
}

/// One `summary_<objective>.svg` per objective present in `summaries`.
pub fn write_plots(summaries: &[SummaryRow], out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let objectives: BTreeSet<&str> = summaries.iter().map(|s| s.objective.as_str()).collect();
    let mut written = Vec::new();
    for obj in objectives {
        let kind: ObjectiveKind = obj.parse().expect("known objective");
        let path = out_dir.join(format!("summary_{obj}.svg"));
        fs::write(&path, render_svg(summaries, kind)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn color(s: Strategy) -> &'static str {
    match s {
        Strategy::Prop1 => "#1f77b4",
        Strategy::Prop2 => "#d62728",
        Strategy::Optimal => "#2ca02c",
        Strategy::Binary => "#ff7f0e",
        Strategy::Random => "#7f7f7f",
    }
}

/// Line chart of mean objective value against `N_S`, one polyline per
/// strategy.
pub fn render_svg(summaries: &[SummaryRow], objective: ObjectiveKind) -> String {
    let rows: Vec<&SummaryRow> = summaries.iter().filter(|s| s.objective == objective).collect();
    let xs: BTreeSet<usize> = rows.iter().map(|r| r.n_shots).collect();
    let (x_min, x_max) = match (xs.first(), xs.last()) {
        (Some(&a), Some(&b)) => (a as f64, b as f64),
        _ => (0.0, 1.0),
    };
    let y_max = rows.iter().map(|r| r.mean_value).fold(0.0, f64::max);
    let y_top = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| {
        if x_max > x_min {
            LEFT + (x - x_min) / (x_max - x_min) * plot_w
        } else {
            LEFT + plot_w / 2.0
        }
    };
    let py = |y: f64| TOP + plot_h - y / y_top * plot_h;
    let (title, unit) = match objective {
        ObjectiveKind::SumSe => ("Sum spectral efficiency", "bits/s/Hz"),
        ObjectiveKind::SumEe => ("Sum energy efficiency", "bits/s/Hz/W"),
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{title} vs. N_S</text>"#, LEFT + plot_w / 2.0);
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/></g>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h,
        TOP + plot_h
    );
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            px(x as f64),
            TOP + plot_h + 16.0
        );
    }
    for k in 0..=4 {
        let y = y_top * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#, LEFT - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Number of in-context examples</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Mean value ({unit})</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    let mut legend_row = 0;
    for strategy in Strategy::ALL {
        let mut pts: Vec<&SummaryRow> = rows.iter().copied().filter(|r| r.strategy == strategy).collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by_key(|r| r.n_shots);
        let c = color(strategy);
        let points: Vec<String> =
            pts.iter().map(|r| format!("{:.2},{:.2}", px(r.n_shots as f64), py(r.mean_value))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-strategy="{}" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            strategy.as_str(),
            points.join(" ")
        );
        for r in &pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                px(r.n_shots as f64),
                py(r.mean_value)
            );
        }
        let ly = TOP + 10.0 + 18.0 * legend_row as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            strategy.as_str()
        );
        legend_row += 1;
    }
    s.push_str("</svg>\n");
    s
}
