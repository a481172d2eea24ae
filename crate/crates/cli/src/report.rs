//! Text and SVG summaries of a finished run.

use std::fmt::Write;

use alforge_core::engine::RunReport;

pub const TABLE_COLUMNS: [&str; 8] = ["iteration", "tp", "fn", "fp", "tpr", "precision", "f_score", "mean_iou"];

/// One row per iteration, eight columns, rates to two decimals.
pub fn metrics_table(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>9} {:>6} {:>6} {:>6} {:>6} {:>9} {:>7} {:>8}",
        TABLE_COLUMNS[0],
        TABLE_COLUMNS[1],
        TABLE_COLUMNS[2],
        TABLE_COLUMNS[3],
        TABLE_COLUMNS[4],
        TABLE_COLUMNS[5],
        TABLE_COLUMNS[6],
        TABLE_COLUMNS[7]
    );
    for r in &report.iterations {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:>9} {:>6} {:>6} {:>6} {:>6.2} {:>9.2} {:>7.2} {:>8.2}",
            m.iteration, m.tp, m.fn_, m.fp, m.tpr, m.precision, m.f_score, m.mean_iou
        );
    }
    s
}

/// Training-set growth per iteration.
pub fn training_table(report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>9} {:>8} {:>8} {:>8} {:>10} {:>9} {:>9}",
        "iteration", "reviewed", "added", "images", "boxes", "shortfall", "loss"
    );
    for r in &report.iterations {
        let loss = r.train_loss.map(|l| format!("{l:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>9} {:>8} {:>8} {:>8} {:>10} {:>9} {:>9}",
            r.iteration, r.reviewed, r.added_images, r.cumulative_images, r.cumulative_annotations, r.shortfall, loss
        );
    }
    s
}

fn series(report: &RunReport) -> [(&'static str, Vec<Option<f64>>); 3] {
    let it = &report.iterations;
    [
        ("f_score", it.iter().map(|r| Some(r.metrics.f_score)).collect()),
        ("mean_iou", it.iter().map(|r| Some(r.metrics.mean_iou)).collect()),
        ("loss", it.iter().map(|r| r.train_loss).collect()),
    ]
}

/// Horizontal bar per iteration for F-score, mean IoU and the loss proxy.
pub fn trend_text(report: &RunReport) -> String {
    const WIDTH: usize = 40;
    let mut s = String::new();
    for (name, values) in series(report) {
        let _ = writeln!(s, "{name}");
        for (r, v) in report.iterations.iter().zip(values) {
            match v {
                Some(v) => {
                    let n = (v.clamp(0.0, 1.0) * WIDTH as f64).round() as usize;
                    let _ = writeln!(s, "  {:>3} |{:<WIDTH$}| {v:.3}", r.iteration, "#".repeat(n));
                }
                None => {
                    let _ = writeln!(s, "  {:>3} |{:<WIDTH$}| -", r.iteration, "");
                }
            }
        }
    }
    s
}

/// Line chart of the three trends on a shared [0, 1] axis.
pub fn trend_svg(report: &RunReport) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let n = report.iterations.len().max(2);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"##
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#fff"/>"##);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="#ddd"/><text x="{2}" y="{3}" text-anchor="end">{v:.2}</text>"##,
            y(v),
            w - pad,
            pad - 6.0,
            y(v) + 4.0
        );
    }
    for (i, r) in report.iterations.iter().enumerate() {
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="middle">{}</text>"##,
            x(i),
            h - pad + 18.0,
            r.iteration
        );
    }
    let colors = ["#1f77b4", "#2ca02c", "#d62728"];
    for (k, (name, values)) in series(report).into_iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", x(i), y(v))))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"##,
            pts.join(" "),
            colors[k]
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" fill="{}">{name}</text>"##,
            w - pad - 70.0,
            pad + 16.0 * k as f64,
            colors[k]
        );
    }
    s.push_str("</svg>\n");
    s
}
