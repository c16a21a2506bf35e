//! Minimal SVG scatter/line plots with a log-scaled x axis. Output is
//! deterministic (no timestamps, fixed float formatting) and each plot gets
//! a machine-readable sidecar JSON describing its series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotMeta {
    pub x_label: String,
    pub y_label: String,
    pub x_log: bool,
    pub series: Vec<SeriesMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub name: String,
    pub color: String,
    pub n_points: usize,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 150.0;
const MT: f64 = 24.0;
const MB: f64 = 48.0;

/// Writes an SVG scatter plot (points joined per series, x on a log scale)
/// plus a `<path>.meta.json` sidecar; returns the metadata.
pub fn scatter_log_x(
    series: &[(String, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
    path: &Path,
) -> Result<PlotMeta> {
    if series.is_empty() || series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::invalid("plot needs at least one point"));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (_, pts) in series {
        for &(x, y) in pts {
            if !x.is_finite() || !y.is_finite() || x <= 0.0 {
                return Err(Error::invalid(format!(
                    "log-x plot needs finite points with x > 0, got ({x}, {y})"
                )));
            }
            xs.push(x.log10());
            ys.push(y);
        }
    }
    let (x0, x1) = padded_range(&xs, 0.05);
    let (y0, y1) = padded_range(&ys, 0.08);
    let px = |x: f64| ML + (x.log10() - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));

    // Log-decade ticks (with halfway 3x minor ticks).
    let lo_dec = x0.floor() as i64;
    let hi_dec = x1.ceil() as i64;
    for dec in lo_dec..=hi_dec {
        for mult in [1.0f64, 3.0] {
            let x = mult * 10f64.powi(dec as i32);
            let lx = x.log10();
            if lx < x0 || lx > x1 {
                continue;
            }
            let sx = ML + (lx - x0) / (x1 - x0) * (W - ML - MR);
            svg.push_str(&format!(
                "<line x1=\"{sx:.1}\" y1=\"{}\" x2=\"{sx:.1}\" y2=\"{}\" stroke=\"#ccc\"/>\n",
                MT,
                H - MB
            ));
            svg.push_str(&format!(
                "<text x=\"{sx:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#333\">{}</text>\n",
                H - MB + 16.0,
                format_tick(x)
            ));
        }
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let sy = py(y);
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{sy:.1}\" x2=\"{}\" y2=\"{sy:.1}\" stroke=\"#eee\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\" fill=\"#333\">{y:.3}</text>\n",
            ML - 6.0,
            sy + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#111\">{x_label}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#111\" transform=\"rotate(-90 14 {:.1})\">{y_label}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0
    ));

    let mut meta_series = Vec::new();
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        if sorted.len() > 1 {
            let path_d: Vec<String> = sorted
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| {
                    format!("{}{:.1},{:.1}", if i == 0 { "M" } else { "L" }, px(x), py(y))
                })
                .collect();
            svg.push_str(&format!(
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" opacity=\"0.7\"/>\n",
                path_d.join(" ")
            ));
        }
        for &(x, y) in &sorted {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.5\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        // Legend entry.
        let ly = MT + 16.0 + 18.0 * si as f64;
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{ly:.1}\" r=\"4\" fill=\"{color}\"/>\n",
            W - MR + 14.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#111\">{name}</text>\n",
            W - MR + 24.0,
            ly + 4.0
        ));
        meta_series.push(SeriesMeta {
            name: name.clone(),
            color: color.to_string(),
            n_points: pts.len(),
        });
    }
    svg.push_str("</svg>\n");

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &svg)?;
    let meta = PlotMeta {
        x_label: x_label.to_string(),
        y_label: y_label.to_string(),
        x_log: true,
        series: meta_series,
    };
    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::invalid(format!("plot metadata: {e}")))?;
    std::fs::write(meta_path, json)?;
    Ok(meta)
}

pub fn sidecar_path(plot_path: &Path) -> std::path::PathBuf {
    let mut s = plot_path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

fn padded_range(values: &[f64], frac: f64) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    (lo - frac * span, hi + frac * span)
}

fn format_tick(x: f64) -> String {
    if x >= 1000.0 {
        format!("{:.0}k", x / 1000.0)
    } else if x >= 1.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_and_sidecar_with_one_series_per_family() {
        let dir = std::env::temp_dir().join("ratebench_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("curve.svg");
        let series = vec![
            ("gaussian".to_string(), vec![(600.0, 1.4), (2400.0, 1.2), (9000.0, 1.0)]),
            ("vq".to_string(), vec![(640.0, 1.5), (2560.0, 1.3)]),
        ];
        let meta = scatter_log_x(&series, "bitrate (bits/s)", "mel distance", &path).unwrap();
        assert_eq!(meta.series.len(), 2);
        assert_eq!(meta.series[0].name, "gaussian");
        assert_eq!(meta.series[1].n_points, 2);
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.len() > 500);
        assert!(svg.contains("</svg>"));
        let sidecar: PlotMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(sidecar.series.len(), 2);
        assert!(sidecar.x_log);
    }

    #[test]
    fn rejects_empty_and_nonpositive_x() {
        let dir = std::env::temp_dir().join("ratebench_plot_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.svg");
        assert!(scatter_log_x(&[], "x", "y", &path).is_err());
        let series = vec![("a".to_string(), vec![(0.0, 1.0)])];
        assert!(scatter_log_x(&series, "x", "y", &path).is_err());
    }
}
