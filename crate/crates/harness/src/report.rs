//! Markdown summaries and SVG loss plots over a directory of result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::results::{aggregate, read_preamble, read_results, write_atomic, Group};

/// Result CSVs in `dir`, sorted by name. Sidecars and training curves are skipped.
pub fn result_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if !name.ends_with(".csv") || name.ends_with(".timings.csv") {
            continue;
        }
        match read_preamble(&path) {
            Ok((command, _)) if command == "tta" || command == "ablate" => files.push(path),
            _ => {}
        }
    }
    files.sort();
    Ok(files)
}

fn pct(s: crate::results::Stat) -> String {
    format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
}

pub fn markdown(title: &str, groups: &[Group]) -> String {
    let mut out = format!("## {title}\n\n");
    out.push_str("| method | condition | subset | adapt_phi | corruption | seeds | acc before (%) | acc after (%) | delta (pts) |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for g in groups {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            g.method,
            g.condition,
            g.subset,
            g.adapt_phi,
            g.corruption,
            g.seeds,
            pct(g.acc_before),
            pct(g.acc_after),
            pct(g.delta)
        );
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of each group's mean loss per adaptation step. Groups without
/// a trajectory are left out; `None` if nothing is left to draw.
pub fn loss_plot(title: &str, groups: &[Group]) -> Option<String> {
    let series: Vec<&Group> = groups.iter().filter(|g| !g.mean_loss_trajectory.is_empty()).collect();
    if series.is_empty() {
        return None;
    }
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 70.0, 230.0, 40.0, 50.0);
    let steps = series.iter().map(|g| g.mean_loss_trajectory.len()).max().unwrap_or(1);
    let values = series.iter().flat_map(|g| g.mean_loss_trajectory.iter().copied());
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |s: usize| left + if steps > 1 { pw * s as f64 / (steps - 1) as f64 } else { pw / 2.0 };
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{left}\" y=\"24\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(
        svg,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for s in 0..steps {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            x(s),
            top + ph + 18.0,
            s + 1
        );
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.4}</text>",
            left - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">adaptation step</text>",
        left + pw / 2.0,
        h - 10.0
    );
    for (i, g) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = g
            .mean_loss_trajectory
            .iter()
            .enumerate()
            .map(|(s, &v)| format!("{:.1},{:.1}", x(s), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            w - right + 12.0,
            w - right + 32.0
        );
        let label = format!("{} / {}{}", g.method, g.condition, if g.adapt_phi { " +phi" } else { "" });
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            w - right + 38.0,
            ly + 4.0,
            escape(&label)
        );
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Summarises every result file in `dir` into `out`: `report.md` plus one
/// `<stem>_loss.svg` per file that has loss trajectories. Returns the markdown.
pub fn report(dir: &Path, out: &Path) -> Result<String> {
    let files = result_files(dir)?;
    let mut md = String::from("# Results\n\n");
    let mut any = false;
    for file in &files {
        let rows = read_results(file)?;
        if rows.is_empty() {
            continue;
        }
        any = true;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
        let groups = aggregate(&rows);
        md.push_str(&markdown(stem, &groups));
        if let Some(svg) = loss_plot(&format!("{stem}: mean loss per step"), &groups) {
            let name = format!("{stem}_loss.svg");
            write_atomic(&out.join(&name), svg.as_bytes())?;
            let _ = writeln!(md, "\n![{stem} loss]({name})");
        }
        md.push('\n');
    }
    if !any {
        return Err(HarnessError::NoResults(dir.to_path_buf()));
    }
    write_atomic(&out.join("report.md"), md.as_bytes())?;
    Ok(md)
}
