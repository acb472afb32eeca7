//! Static SVG plots of run outputs: diagnostic time series and ensemble
//! spaghetti snapshots. Charts are written directly as SVG polylines so
//! runs stay viewable without any plotting toolchain.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 25.0;
const MARGIN_T: f64 = 45.0;
const MARGIN_B: f64 = 55.0;

/// One polyline; series with an empty label stay out of the legend.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub width: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Series {
    pub fn new(label: &str, color: &str, width: f64, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        Self {
            label: label.to_string(),
            color: color.to_string(),
            width,
            xs,
            ys,
        }
    }
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| span / s <= n as f64 + 0.5)
        .unwrap_or(mag * 10.0);
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = start;
    while t <= hi + 1e-9 * span {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 10000.0 || a < 0.001 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render a line chart to an SVG file.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> io::Result<()> {
    let finite = |v: &&f64| v.is_finite();
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in series {
        for &x in s.xs.iter().filter(finite) {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
        }
        for &y in s.ys.iter().filter(finite) {
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
    }
    if !x_lo.is_finite() || !y_lo.is_finite() {
        x_lo = 0.0;
        x_hi = 1.0;
        y_lo = 0.0;
        y_hi = 1.0;
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let pad = 0.04 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);

    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        title
    );

    for t in nice_ticks(x_lo, x_hi, 8) {
        let x = px(t);
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            MARGIN_T,
            HEIGHT - MARGIN_B
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = py(t);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            MARGIN_L,
            WIDTH - MARGIN_R
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{}</text>",
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        MARGIN_L,
        MARGIN_T,
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        x_label
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        y_label
    );

    for s in series {
        let mut points = String::new();
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            if x.is_finite() && y.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
            }
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" \
             stroke-opacity=\"{}\"/>",
            points.trim_end(),
            s.color,
            s.width,
            if s.label.is_empty() { 0.35 } else { 1.0 }
        );
    }

    let mut ly = MARGIN_T + 16.0;
    for s in series.iter().filter(|s| !s.label.is_empty()) {
        let lx = WIDTH - MARGIN_R - 150.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2.5\"/>",
            ly - 4.0,
            lx + 26.0,
            ly - 4.0,
            s.color
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            lx + 32.0,
            s.label
        );
        ly += 18.0;
    }
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg)
}

fn parse_csv(path: &Path) -> io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut columns = vec![Vec::new(); header.len()];
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        for (k, cell) in line.split(',').enumerate() {
            if k < columns.len() {
                columns[k].push(cell.parse::<f64>().unwrap_or(f64::NAN));
            }
        }
    }
    Ok((header, columns))
}

/// Regenerate the standard plots from a run directory's CSV tables:
/// the EMRE/RB/RES time series and one spaghetti chart per snapshot.
pub fn render_run_dir(dir: &Path) -> io::Result<()> {
    let diag = dir.join("diagnostics.csv");
    if diag.exists() {
        let (_, cols) = parse_csv(&diag)?;
        if cols.len() >= 4 && !cols[0].is_empty() {
            let steps = cols[0].clone();
            let series = vec![
                Series::new("EMRE", "#d62728", 1.8, steps.clone(), cols[1].clone()),
                Series::new("RB", "#1f77b4", 1.8, steps.clone(), cols[2].clone()),
                Series::new("RES", "#2ca02c", 1.8, steps, cols[3].clone()),
            ];
            line_chart(
                &dir.join("diagnostics.svg"),
                "Ensemble statistics per assimilation step",
                "assimilation step",
                "relative statistic",
                &series,
            )?;
        }
    }

    let snapshots = dir.join("snapshots");
    if snapshots.is_dir() {
        let mut entries: Vec<_> = fs::read_dir(&snapshots)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
            .collect();
        entries.sort();
        for csv_path in entries {
            let (header, cols) = parse_csv(&csv_path)?;
            if cols.len() < 3 || cols[0].is_empty() {
                continue;
            }
            let xs = cols[0].clone();
            let mut series = Vec::new();
            for k in 3..cols.len() {
                series.push(Series::new("", "#e6b422", 0.8, xs.clone(), cols[k].clone()));
            }
            series.push(Series::new(
                "ensemble mean",
                "#333333",
                1.6,
                xs.clone(),
                cols[2].clone(),
            ));
            series.push(Series::new("truth", "#1f77b4", 2.2, xs, cols[1].clone()));
            let stem = csv_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("snapshot");
            let step = stem.trim_start_matches("step_").trim_start_matches('0');
            let step = if step.is_empty() { "0" } else { step };
            let _ = header;
            line_chart(
                &snapshots.join(format!("{stem}.svg")),
                &format!("Ensemble and truth at assimilation step {step}"),
                "x",
                "velocity u",
                &series,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_writes_valid_svg_with_legend_and_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x / 5.0).sin()).collect();
        line_chart(
            &path,
            "demo",
            "x",
            "y",
            &[Series::new("wave", "#d62728", 1.5, xs, ys)],
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.contains("wave"));
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn render_run_dir_builds_plots_from_csv_tables() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("diagnostics.csv"),
            "step,emre,rb,res,ess_pre,n_temper\n0,0.5,0.1,0.4,150,0\n1,0.45,0.12,0.38,120,3\n",
        )
        .unwrap();
        let snaps = dir.path().join("snapshots");
        fs::create_dir(&snaps).unwrap();
        fs::write(
            snaps.join("step_00001.csv"),
            "x,truth,mean,p000,p001\n0.0,1.0,1.1,1.2,0.9\n0.4,1.1,1.15,1.3,1.0\n",
        )
        .unwrap();
        render_run_dir(dir.path()).unwrap();
        assert!(dir.path().join("diagnostics.svg").exists());
        assert!(snaps.join("step_00001.svg").exists());
    }

    #[test]
    fn empty_series_do_not_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.svg");
        line_chart(&path, "empty", "x", "y", &[]).unwrap();
        assert!(path.exists());
    }
}
