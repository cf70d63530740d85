//! Report rows, CSV persistence, grouped means and a static summary page.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nas::CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub defense: String,
    pub budget: u32,
    pub attacker: usize,
    pub eta: f64,
    pub arch_id: String,
    pub arch: String,
    pub trial: usize,
    pub seed: u64,
    pub ler_to_label: Option<f64>,
    pub ler_to_target: Option<f64>,
    pub proxy_acc_extracted: Option<f64>,
    pub proxy_acc_victim: Option<f64>,
    pub proxy_acc_target: Option<f64>,
    pub decoded: String,
    pub flag: String,
    pub config_checksum: String,
}

pub const FLAG_OK: &str = "ok";
pub const FLAG_UNCALIBRATED: &str = "calibration_not_converged";
pub const FLAG_INVALID_DECODE: &str = "invalid_decode";
pub const FLAG_INFEASIBLE_DECODE: &str = "infeasible_decode";

pub fn to_csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::InvalidParam(e.to_string()))?;
    }
    if rows.is_empty() {
        return Ok(String::new());
    }
    let bytes = w.into_inner().map_err(|e| CoreError::InvalidParam(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?).map_err(|e| CoreError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CoreError::io(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| CoreError::io(path, e))
}

/// Key of one aggregated cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub experiment: String,
    pub defense: String,
    pub budget: u32,
    pub attacker: usize,
    /// η in thousandths, so the key orders and hashes exactly.
    pub eta_milli: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub defense: String,
    pub budget: u32,
    pub attacker: usize,
    pub eta: f64,
    pub rows: usize,
    pub mean_ler_to_label: Option<f64>,
    pub mean_ler_to_target: Option<f64>,
    /// Over rows that carry a victim accuracy. A decode that cannot be
    /// built on the proxy task leaves the attacker with no model and counts
    /// as chance accuracy.
    pub mean_proxy_acc_extracted: Option<f64>,
    pub mean_proxy_acc_victim: Option<f64>,
    /// Rows whose decode could not be built.
    pub null_proxy_acc: usize,
    pub flagged: usize,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Column means per (experiment, defense, budget, attacker, η); nulls are
/// skipped and counted.
pub fn summarize(rows: &[ReportRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<GroupKey, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = GroupKey {
            experiment: r.experiment.clone(),
            defense: r.defense.clone(),
            budget: r.budget,
            attacker: r.attacker,
            eta_milli: (r.eta * 1000.0).round() as i64,
        };
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let col = |f: fn(&ReportRow) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let chance = 1.0 / CLASSES as f64;
            let acc: Vec<f64> = rs.iter().filter(|r| r.proxy_acc_victim.is_some()).map(|r| r.proxy_acc_extracted.unwrap_or(chance)).collect();
            Summary {
                eta: k.eta_milli as f64 / 1000.0,
                rows: rs.len(),
                mean_ler_to_label: mean(&col(|r| r.ler_to_label)),
                mean_ler_to_target: mean(&col(|r| r.ler_to_target)),
                mean_proxy_acc_extracted: mean(&acc),
                mean_proxy_acc_victim: mean(&col(|r| r.proxy_acc_victim)),
                null_proxy_acc: rs.iter().filter(|r| r.proxy_acc_extracted.is_none() && r.proxy_acc_victim.is_some()).count(),
                flagged: rs.iter().filter(|r| r.flag != FLAG_OK).count(),
                experiment: k.experiment,
                defense: k.defense,
                budget: k.budget,
                attacker: k.attacker,
            }
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"];

/// Grouped bar chart: one group per x label, one bar per series.
pub fn bar_chart_svg(title: &str, x_labels: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (w, h, left, bottom, top) = (720.0, 360.0, 60.0, 60.0, 40.0);
    let plot_w = w - left - 20.0;
    let plot_h = h - bottom - top;
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().flatten())
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-9)
        * 1.1;
    let mut s = String::new();
    let _ = write!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<rect width="{w}" height="{h}" fill="white"/><text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let y0 = top + plot_h;
    let _ = write!(s, r#"<line x1="{left}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{y0}" stroke="black"/>"#, left + plot_w);
    for i in 0..=4 {
        let v = ymax * f64::from(i) / 4.0;
        let y = y0 - plot_h * f64::from(i) / 4.0;
        let _ = write!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    let groups = x_labels.len().max(1) as f64;
    let gw = plot_w / groups;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (gi, label) in x_labels.iter().enumerate() {
        let gx = left + gw * gi as f64;
        let _ = write!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + gw / 2.0, y0 + 16.0, escape(label));
        for (si, (_, vals)) in series.iter().enumerate() {
            if let Some(Some(v)) = vals.get(gi) {
                let bh = plot_h * v / ymax;
                let _ = write!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    gx + gw * 0.1 + bw * si as f64,
                    y0 - bh,
                    bw,
                    bh,
                    PALETTE[si % PALETTE.len()]
                );
            }
        }
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let x = left + 110.0 * si as f64;
        let _ = write!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#, h - 22.0, PALETTE[si % PALETTE.len()], x + 14.0, h - 13.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"))
}

/// Writes `summary.csv`, one SVG chart per (experiment, attacker, η) and an
/// `index.html` that embeds them. Returns the files written.
pub fn render_report(rows: &[ReportRow], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let summary = summarize(rows);
    let mut written = Vec::new();

    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &summary {
        w.serialize(s).map_err(|e| CoreError::InvalidParam(e.to_string()))?;
    }
    let p = dir.join("summary.csv");
    let bytes = w.into_inner().map_err(|e| CoreError::InvalidParam(e.to_string()))?;
    std::fs::write(&p, bytes).map_err(|e| CoreError::io(&p, e))?;
    written.push(p);

    let mut panels: BTreeMap<(String, usize, i64), Vec<&Summary>> = BTreeMap::new();
    for s in &summary {
        panels.entry((s.experiment.clone(), s.attacker, (s.eta * 1000.0).round() as i64)).or_default().push(s);
    }
    let mut html = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Experiment report</title></head><body>\n<h1>Experiment report</h1>\n");
    for ((exp, attacker, eta), cells) in &panels {
        let mut budgets: Vec<u32> = cells.iter().map(|c| c.budget).collect();
        budgets.sort_unstable();
        budgets.dedup();
        let mut defenses: Vec<String> = cells.iter().map(|c| c.defense.clone()).collect();
        defenses.sort();
        defenses.dedup();
        let labels: Vec<String> = budgets.iter().map(|b| format!("budget {b}")).collect();
        for (metric, get) in [
            ("LER to label", (|c: &Summary| c.mean_ler_to_label) as fn(&Summary) -> Option<f64>),
            ("LER to target", |c: &Summary| c.mean_ler_to_target),
        ] {
            let series: Vec<(String, Vec<Option<f64>>)> = defenses
                .iter()
                .map(|d| {
                    let v = budgets
                        .iter()
                        .map(|b| cells.iter().find(|c| &c.defense == d && c.budget == *b).and_then(|c| get(c)))
                        .collect();
                    (d.clone(), v)
                })
                .collect();
            if series.iter().all(|(_, v)| v.iter().all(Option::is_none)) {
                continue;
            }
            let title = format!("{exp}: {metric}, attacker {attacker}, eta {:.2}", *eta as f64 / 1000.0);
            let name = format!("{exp}_a{attacker}_eta{eta}_{}.svg", metric.replace(' ', "_").to_lowercase());
            let p = dir.join(&name);
            std::fs::write(&p, bar_chart_svg(&title, &labels, &series)).map_err(|e| CoreError::io(&p, e))?;
            let _ = writeln!(html, "<h2>{}</h2>\n<img src=\"{name}\" alt=\"{}\">", escape(&title), escape(&title));
            written.push(p);
        }
    }
    html.push_str("<h2>Means</h2>\n<table border=\"1\" cellpadding=\"3\">\n<tr><th>experiment</th><th>defense</th><th>budget</th><th>attacker</th><th>eta</th><th>rows</th><th>LER to label</th><th>LER to target</th><th>proxy acc extracted</th><th>proxy acc victim</th><th>flagged</th></tr>\n");
    for s in &summary {
        let _ = writeln!(
            html,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{:.2}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            escape(&s.experiment),
            escape(&s.defense),
            s.budget,
            s.attacker,
            s.eta,
            s.rows,
            fmt_opt(s.mean_ler_to_label),
            fmt_opt(s.mean_ler_to_target),
            fmt_opt(s.mean_proxy_acc_extracted),
            fmt_opt(s.mean_proxy_acc_victim),
            s.flagged
        );
    }
    html.push_str("</table>\n</body></html>\n");
    let p = dir.join("index.html");
    std::fs::write(&p, html).map_err(|e| CoreError::io(&p, e))?;
    written.push(p);
    Ok(written)
}
