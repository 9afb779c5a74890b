use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};

pub const SUMMARY_HEADER: &str = "model,tau,accuracy,latency_ms,throughput,avg_depth,retention_pct,flops_norm";

/// One operating point of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub model: String,
    /// Exit threshold; `None` for non-adaptive baselines.
    pub tau: Option<f64>,
    /// Percent.
    pub accuracy: f64,
    pub latency_ms: f64,
    /// Examples per second.
    pub throughput: f64,
    pub avg_depth: f64,
    pub retention_pct: f64,
    pub flops_norm: f64,
}

impl FrontierRow {
    /// The row as it appears in the summary CSV.
    pub fn rounded(&self) -> FrontierRow {
        let r = |v: f64, digits: i32| {
            let s = 10f64.powi(digits);
            (v * s).round() / s
        };
        FrontierRow {
            model: self.model.clone(),
            tau: self.tau.map(|t| r(t, 2)),
            accuracy: r(self.accuracy, 2),
            latency_ms: r(self.latency_ms, 2),
            throughput: r(self.throughput, 2),
            avg_depth: r(self.avg_depth, 2),
            retention_pct: r(self.retention_pct, 2),
            flops_norm: r(self.flops_norm, 4),
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> EatError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => EatError::io(path, io),
        other => EatError::invalid(format!("{}: {other:?}", path.display())),
    }
}

pub fn summary_csv_string(rows: &[FrontierRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(EatError::invalid("no rows to write"));
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let to_err = |e: csv::Error| EatError::invalid(e.to_string());
    w.write_record(SUMMARY_HEADER.split(',')).map_err(to_err)?;
    for row in rows {
        w.write_record([
            row.model.clone(),
            row.tau.map(|t| format!("{t:.2}")).unwrap_or_default(),
            format!("{:.2}", row.accuracy),
            format!("{:.2}", row.latency_ms),
            format!("{:.2}", row.throughput),
            format!("{:.2}", row.avg_depth),
            format!("{:.2}", row.retention_pct),
            format!("{:.4}", row.flops_norm),
        ])
        .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| EatError::invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EatError::invalid(e.to_string()))
}

pub fn emit_summary_csv(rows: &[FrontierRow], path: &Path) -> Result<()> {
    let text = summary_csv_string(rows)?;
    fs::write(path, text).map_err(|e| EatError::io(path, e))
}

pub fn parse_summary_csv(path: &Path) -> Result<Vec<FrontierRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != SUMMARY_HEADER {
        return Err(EatError::invalid(format!("unexpected header {:?}", header.join(","))));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Latency (x) against accuracy (y) scatter, one colour per model, each
/// adaptive point labelled with its threshold.
pub fn frontier_svg(rows: &[FrontierRow]) -> Result<String> {
    if rows.len() < 2 {
        return Err(EatError::invalid("a frontier plot needs at least two rows"));
    }
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(1e-3 * hi.abs().max(1.0));
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(rows.iter().map(|r| r.latency_ms).collect());
    let (y0, y1) = span(rows.iter().map(|r| r.accuracy).collect());
    let sx = |v: f64| margin + (v - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut series: BTreeMap<&str, Vec<&FrontierRow>> = BTreeMap::new();
    for r in rows {
        series.entry(r.model.as_str()).or_default().push(r);
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g class="axes" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}" stroke="black">"#
    );
    let (left, right, top, bottom) = (margin, w - margin, margin, h - margin);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/>"#);
    let _ = writeln!(s, "</g>");
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{fx:.2}</text>"#, sx(fx), bottom + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{fy:.1}</text>"#, left - 6.0, sy(fy) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">latency (ms, batch 1)</text>"#,
        w / 2.0,
        h - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">accuracy (%)</text>"#,
        h / 2.0,
        h / 2.0
    );

    for (i, (name, points)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let name = escape(name);
        let _ = writeln!(s, r#"<g class="series" data-model="{name}" fill="{colour}">"#);
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.latency_ms.total_cmp(&b.latency_ms));
        if sorted.len() > 1 {
            let path: Vec<String> = sorted.iter().map(|r| format!("{:.2},{:.2}", sx(r.latency_ms), sy(r.accuracy))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}"/>"#, path.join(" "));
        }
        for r in points {
            let (cx, cy) = (sx(r.latency_ms), sy(r.accuracy));
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{cx:.2}" cy="{cy:.2}" r="4" data-latency="{}" data-accuracy="{}"/>"#,
                r.latency_ms, r.accuracy
            );
            if let Some(t) = r.tau {
                let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">τ={t:.2}</text>"#, cx + 6.0, cy - 6.0);
            }
        }
        let _ = writeln!(s, "</g>");
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{ly:.1}" r="4" fill="{colour}"/>"#, right - 110.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{name}</text>"#, right - 100.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_frontier_plot(rows: &[FrontierRow], path: &Path) -> Result<()> {
    let svg = frontier_svg(rows)?;
    fs::write(path, svg).map_err(|e| EatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<FrontierRow> {
        let mut out: Vec<FrontierRow> = [0.8, 0.85, 0.9, 0.95]
            .iter()
            .enumerate()
            .map(|(i, &t)| FrontierRow {
                model: "eat".into(),
                tau: Some(t),
                accuracy: 71.234 + i as f64,
                latency_ms: 0.4567 + 0.05 * i as f64,
                throughput: 2100.0 - 10.0 * i as f64,
                avg_depth: 4.5 + 0.3 * i as f64,
                retention_pct: 80.123,
                flops_norm: 0.456789,
            })
            .collect();
        out.push(FrontierRow {
            model: "eat-no-exit".into(),
            tau: None,
            accuracy: 74.0,
            latency_ms: 0.9,
            throughput: 1100.0,
            avg_depth: 6.0,
            retention_pct: 63.0,
            flops_norm: 0.71,
        });
        out
    }

    #[test]
    fn csv_round_trip_at_stated_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        emit_summary_csv(&rows(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("{SUMMARY_HEADER}\n")));
        assert!(!text.contains('\r'));
        assert!(text.lines().all(|l| l.split(',').count() == 8));
        assert!(text.lines().last().unwrap().starts_with("eat-no-exit,,"));
        let back = parse_summary_csv(&path).unwrap();
        let want: Vec<FrontierRow> = rows().iter().map(FrontierRow::rounded).collect();
        assert_eq!(back, want);
    }

    #[test]
    fn plot_is_well_formed_and_covers_points() {
        let svg = frontier_svg(&rows()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let points: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("point"))
            .collect();
        assert_eq!(points.len(), rows().len());
        let axes = doc.descendants().find(|n| n.attribute("class") == Some("axes")).unwrap();
        let attr = |k: &str| axes.attribute(k).unwrap().parse::<f64>().unwrap();
        for p in points {
            let lat: f64 = p.attribute("data-latency").unwrap().parse().unwrap();
            let acc: f64 = p.attribute("data-accuracy").unwrap().parse().unwrap();
            assert!(attr("data-x-min") <= lat && lat <= attr("data-x-max"));
            assert!(attr("data-y-min") <= acc && acc <= attr("data-y-max"));
        }
        let series = doc.descendants().filter(|n| n.attribute("class") == Some("series")).count();
        assert_eq!(series, 2);
        assert!(frontier_svg(&rows()[..1]).is_err());
    }
}
