//! `report`: merge per-(book, model) reports and agreement outputs into CSV
//! tables and one SVG bar chart per book.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use bookmem::agreement::{correlation_csv, correlation_matrix};
use bookmem::coverage::ReportSummary;
use bookmem::jsonl;

use crate::commands::{file_id, write_text, AgreeOutput};

pub fn run(report_paths: &[PathBuf], agree_paths: &[PathBuf], out_dir: &Path) -> Result<()> {
    let reports = load_reports(report_paths)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    write_text(&out_dir.join("metrics.csv"), &metrics_csv(&reports))?;

    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in &reports {
        scores.entry(r.model_id.clone()).or_default().insert(r.book_id.clone(), r.bmc);
    }
    let models: Vec<String> = scores.keys().cloned().collect();
    let corr = correlation_matrix(&scores);
    write_text(&out_dir.join("correlations.csv"), &correlation_csv(&corr))?;
    let lookup = |a: &str, b: &str, pick: &dyn Fn(&bookmem::agreement::CorrelationEntry) -> Option<f64>| {
        if a == b {
            return Some(1.0);
        }
        corr.iter()
            .find(|e| (e.model_a == a && e.model_b == b) || (e.model_a == b && e.model_b == a))
            .and_then(pick)
    };
    write_text(
        &out_dir.join("pearson_matrix.csv"),
        &wide_matrix(&models, |a, b| lookup(a, b, &|e| e.pearson)),
    )?;
    write_text(
        &out_dir.join("spearman_matrix.csv"),
        &wide_matrix(&models, |a, b| lookup(a, b, &|e| e.spearman)),
    )?;

    if !agree_paths.is_empty() {
        let mut outputs = Vec::new();
        for p in agree_paths {
            outputs.push(jsonl::read_json::<AgreeOutput>(p)?);
        }
        outputs.sort_by(|a, b| a.book_id.cmp(&b.book_id));
        write_agreement(&outputs, out_dir)?;
    }

    let mut by_book: BTreeMap<&str, Vec<&ReportSummary>> = BTreeMap::new();
    for r in &reports {
        by_book.entry(&r.book_id).or_default().push(r);
    }
    for (book, rows) in &by_book {
        write_text(&out_dir.join(format!("{}.svg", file_id(book))), &bar_chart(book, rows))?;
    }
    eprintln!("{} reports, {} books -> {}", reports.len(), by_book.len(), out_dir.display());
    Ok(())
}

fn load_reports(paths: &[PathBuf]) -> Result<Vec<ReportSummary>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(p).with_context(|| format!("listing {}", p.display()))? {
                let path = entry?.path();
                if path.to_string_lossy().ends_with(".report.json") {
                    found.push(path);
                }
            }
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut reports = Vec::new();
    let mut seen = BTreeSet::new();
    for f in &files {
        let r: ReportSummary = jsonl::read_json(f)?;
        if !seen.insert((r.book_id.clone(), r.model_id.clone())) {
            return Err(bookmem::Error::InvalidInput(format!(
                "{}: second report for book {:?} and model {:?}",
                f.display(),
                r.book_id,
                r.model_id
            ))
            .into());
        }
        reports.push(r);
    }
    reports.sort_by(|a, b| (&a.book_id, &a.model_id).cmp(&(&b.book_id, &b.model_id)));
    Ok(reports)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn metrics_csv(reports: &[ReportSummary]) -> String {
    let mut out = String::from(
        "book_id,model_id,bmc,longest_block_words,longest_regurgitated_words,n_spans_over_threshold\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{},{}",
            r.book_id, r.model_id, r.bmc, r.longest_block_words, r.longest_regurgitated_words, r.n_spans_over_threshold
        );
    }
    out
}

fn wide_matrix(models: &[String], cell: impl Fn(&str, &str) -> Option<f64>) -> String {
    let mut out = String::from("model");
    for m in models {
        let _ = write!(out, ",{m}");
    }
    out.push('\n');
    for a in models {
        out.push_str(a);
        for b in models {
            let _ = write!(out, ",{}", fmt_opt(cell(a, b)));
        }
        out.push('\n');
    }
    out
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn write_agreement(outputs: &[AgreeOutput], out_dir: &Path) -> Result<()> {
    let mut long = String::from(
        "book_id,model_a,model_b,jaccard,shuffled_baseline,self_agreement_a,self_agreement_b,normalized_overlap\n",
    );
    let mut jac: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut norm: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut selfs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut models = BTreeSet::new();
    for o in outputs {
        for m in &o.models {
            models.insert(m.model_id.clone());
            if let Some(s) = m.self_agreement {
                selfs.entry(m.model_id.clone()).or_default().push(s.mean_jaccard);
            }
        }
        for p in &o.pairs {
            let _ = writeln!(
                long,
                "{},{},{},{:.6},{:.6},{},{},{}",
                p.book_id,
                p.model_a,
                p.model_b,
                p.jaccard,
                p.shuffled_baseline_mean,
                fmt_opt(p.self_agreement_a),
                fmt_opt(p.self_agreement_b),
                fmt_opt(p.normalized_overlap)
            );
            let key = (p.model_a.clone().min(p.model_b.clone()), p.model_a.clone().max(p.model_b.clone()));
            jac.entry(key.clone()).or_default().push(p.jaccard);
            if let Some(n) = p.normalized_overlap {
                norm.entry(key).or_default().push(n);
            }
        }
    }
    write_text(&out_dir.join("jaccard.csv"), &long)?;
    let models: Vec<String> = models.into_iter().collect();
    let pair = |a: &str, b: &str| (a.min(b).to_string(), a.max(b).to_string());
    write_text(
        &out_dir.join("jaccard_matrix.csv"),
        &wide_matrix(&models, |a, b| {
            if a == b {
                selfs.get(a).and_then(|v| mean(v))
            } else {
                jac.get(&pair(a, b)).and_then(|v| mean(v))
            }
        }),
    )?;
    write_text(
        &out_dir.join("normalized_overlap_matrix.csv"),
        &wide_matrix(&models, |a, b| {
            if a == b {
                selfs.get(a).map(|_| 1.0)
            } else {
                norm.get(&pair(a, b)).and_then(|v| mean(v))
            }
        }),
    )
}

const PALETTE: [&str; 6] = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Four panels (bmc, longest block, longest regurgitated span, long-span
/// count), one bar per model, each panel scaled to its own maximum.
fn bar_chart(book: &str, rows: &[&ReportSummary]) -> String {
    type Metric = Box<dyn Fn(&ReportSummary) -> f64>;
    let panels: [(&str, Metric, bool); 4] = [
        ("bmc@k (%)", Box::new(|r| r.bmc * 100.0), true),
        ("longest block (words)", Box::new(|r| r.longest_block_words as f64), false),
        ("longest regurgitated (words)", Box::new(|r| r.longest_regurgitated_words as f64), false),
        ("spans over threshold", Box::new(|r| r.n_spans_over_threshold as f64), false),
    ];
    let (panel_w, panel_h, top, plot_h) = (240.0, 300.0, 50.0, 180.0);
    let width = panel_w * panels.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{panel_h}" viewBox="0 0 {width} {panel_h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        xml_escape(book)
    );
    for (pi, (title, value, percent)) in panels.iter().enumerate() {
        let x0 = pi as f64 * panel_w;
        let values: Vec<f64> = rows.iter().map(|r| value(r)).collect();
        let max = if *percent {
            100.0
        } else {
            values.iter().copied().fold(0.0, f64::max).max(1.0)
        };
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + panel_w / 2.0,
            top - 10.0,
            title
        );
        let base = top + plot_h;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{base}" x2="{:.1}" y2="{base}" stroke="black"/>"#,
            x0 + 20.0,
            x0 + panel_w - 20.0
        );
        let slot = (panel_w - 40.0) / values.len().max(1) as f64;
        for (i, (v, r)) in values.iter().zip(rows).enumerate() {
            let h = plot_h * v / max;
            let x = x0 + 20.0 + slot * i as f64 + slot * 0.15;
            let label = if *percent { format!("{v:.1}") } else { format!("{v:.0}") };
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                base - h,
                slot * 0.7,
                PALETTE[i % PALETTE.len()]
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
                x + slot * 0.35,
                base - h - 4.0
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" transform="rotate(-40 {:.1} {:.1})">{}</text>"#,
                x + slot * 0.35,
                base + 14.0,
                x + slot * 0.35,
                base + 14.0,
                xml_escape(&r.model_id)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
