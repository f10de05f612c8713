//! Minimal SVG line plots for ablation tables.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One polyline per series over a shared categorical x axis.
pub fn svg_line_plot(
    title: &str,
    x_labels: &[String],
    series: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    if x_labels.is_empty() || series.is_empty() {
        return Err(Error::Config("plot: nothing to draw".into()));
    }
    for (name, ys) in series {
        if ys.len() != x_labels.len() {
            return Err(Error::Config(format!(
                "plot: series {name:?} has {} points for {} labels",
                ys.len(),
                x_labels.len()
            )));
        }
    }
    let (w, h) = (680.0f64, 420.0f64);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 70.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (_, ys) in series {
        for &y in ys {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !(ymin.is_finite() && ymax.is_finite()) {
        return Err(Error::Numeric("plot: non-finite values".into()));
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let pad = 0.06 * (ymax - ymin);
    let (ymin, ymax) = (ymin - pad, ymax + pad);

    let xs: Vec<f64> = (0..x_labels.len())
        .map(|i| {
            if x_labels.len() == 1 {
                ml + pw / 2.0
            } else {
                ml + pw * i as f64 / (x_labels.len() - 1) as f64
            }
        })
        .collect();
    let ymap = |y: f64| mt + ph * (1.0 - (y - ymin) / (ymax - ymin));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{title}</text>\n",
        w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph, mt + ph, ml + pw, mt + ph
    ));
    // y ticks
    for i in 0..=4 {
        let y = ymin + (ymax - ymin) * i as f64 / 4.0;
        let py = ymap(y);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{ml}\" y2=\"{py}\" stroke=\"black\"/>\n<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{y:.3}</text>\n",
            ml - 5.0, ml - 8.0, py + 4.0
        ));
    }
    // x labels
    for (x, label) in xs.iter().zip(x_labels) {
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-35 {x} {})\">{label}</text>\n",
            mt + ph + 16.0,
            mt + ph + 16.0
        ));
    }
    // series
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| format!("{x:.2},{:.2}", ymap(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for (x, y) in xs.iter().zip(ys) {
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                ymap(*y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            ml + pw - 130.0,
            mt + 16.0 + 16.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        svg_line_plot(
            "alpha sweep",
            &["0".into(), "0.5".into(), "1".into()],
            &[("ego top-1".into(), vec![0.2, 0.6, 0.5])],
            &path,
        )
        .unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
    }

    #[test]
    fn rejects_mismatched_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let err = svg_line_plot(
            "bad",
            &["a".into()],
            &[("s".into(), vec![1.0, 2.0])],
            &path,
        );
        assert!(err.is_err());
    }
}
