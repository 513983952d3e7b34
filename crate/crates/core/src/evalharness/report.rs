use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{format_bp, EvalError, EvalReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    /// Tab-aligned table with summary sections.
    Text,
    /// Comma-separated cells, summary as leading `#` lines.
    Csv,
}

/// Hex SHA-256 of a canonical configuration text.
pub fn config_hash(canonical: &str) -> String {
    Sha256::digest(canonical.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

const COLUMNS: [&str; 8] = ["scenario", "model", "known", "identity", "accuracy", "psr", "hits", "total"];

fn rows(report: &EvalReport) -> Vec<[String; 8]> {
    let mut out = Vec::new();
    for s in &report.scenarios {
        for c in &s.cells {
            out.push([
                s.label.clone(),
                c.model_id.clone(),
                if c.known { "known" } else { "unknown" }.to_string(),
                c.identity.clone().unwrap_or_else(|| "*".into()),
                format_bp(c.accuracy_bp()),
                format_bp(c.psr_bp()),
                c.hits.to_string(),
                c.total.to_string(),
            ]);
        }
    }
    out
}

fn summary(report: &EvalReport) -> Vec<String> {
    let mut out = vec![format!("config_hash={}", report.config_hash)];
    for s in &report.scenarios {
        for (name, sel) in [("all", None), ("known", Some(true)), ("unknown", Some(false))] {
            if s.totals().any(|c| sel.is_none_or(|k| c.known == k)) {
                let (m, sd) = s.psr_stats(sel);
                out.push(format!("psr_{name}[{}]={m:.2}±{sd:.2}", s.label));
            }
        }
    }
    if let Some(st) = &report.ssim {
        out.push(format!(
            "ssim mean={:.4} min={:.4} std={:.4} n={}",
            st.mean, st.min, st.std, st.count
        ));
    }
    if let Some(sat) = &report.saturation {
        out.push(format!(
            "saturation pixels={}/{} images={}",
            sat.pixels, sat.crop_pixels, sat.images
        ));
    }
    for g in &report.gates {
        out.push(format!(
            "gate {} {} ({})",
            g.name,
            if g.passed { "pass" } else { "FAIL" },
            g.detail
        ));
    }
    out
}

/// Deterministic rendering; the runtime is left out.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            let _ = writeln!(out, "# {}", report.title);
            for line in summary(report) {
                let _ = writeln!(out, "# {line}");
            }
            let body = rows(report);
            let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
            for r in &body {
                for (w, cell) in widths.iter_mut().zip(r) {
                    *w = (*w).max(cell.chars().count());
                }
            }
            let line = |cells: Vec<&str>| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let _ = writeln!(out, "{}", line(COLUMNS.to_vec()));
            for r in &body {
                let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "# {}", report.title);
            for line in summary(report) {
                let _ = writeln!(out, "# {line}");
            }
            let _ = writeln!(out, "{}", COLUMNS.join(","));
            for r in rows(report) {
                let _ = writeln!(out, "{}", r.join(","));
            }
        }
    }
    out
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    fs::write(path, render_report(report, format)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
