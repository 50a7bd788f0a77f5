//! Minimal SVG emission for run reports: line charts and histograms built
//! as plain strings, no plotting dependency.

use crate::metrics::Histogram;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(width: f64, height: f64, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let (x_min, mut x_max) = x_range;
        let (y_min, mut y_max) = y_range;
        if x_max <= x_min {
            x_max = x_min + 1.0;
        }
        if y_max <= y_min {
            y_max = y_min + 1.0;
        }
        Self {
            height,
            left: 62.0,
            right: width - 16.0,
            top: 34.0,
            bottom: height - 46.0,
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.x_min) / (self.x_max - self.x_min) * (self.right - self.left)
    }

    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.y_min) / (self.y_max - self.y_min) * (self.bottom - self.top)
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn push_header(out: &mut String, width: f64, height: f64, title: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        width / 2.0,
        escape(title)
    ));
}

fn push_axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    out.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = f.left,
        r = f.right,
        t = f.top,
        b = f.bottom
    ));
    for i in 0..=4 {
        let fx = f.x_min + (f.x_max - f.x_min) * i as f64 / 4.0;
        let px = f.x(fx);
        out.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{b}\" x2=\"{px}\" y2=\"{b2}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{ty}\" text-anchor=\"middle\">{}</text>\n",
            fmt_tick(fx),
            b = f.bottom,
            b2 = f.bottom + 5.0,
            ty = f.bottom + 18.0,
        ));
        let fy = f.y_min + (f.y_max - f.y_min) * i as f64 / 4.0;
        let py = f.y(fy);
        out.push_str(&format!(
            "<line x1=\"{l2}\" y1=\"{py}\" x2=\"{l}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{}</text>\n",
            fmt_tick(fy),
            l = f.left,
            l2 = f.left - 5.0,
            tx = f.left - 8.0,
            ty = py + 4.0,
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        (f.left + f.right) / 2.0,
        f.height - 10.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        (f.top + f.bottom) / 2.0,
        (f.top + f.bottom) / 2.0,
        escape(y_label)
    ));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render named series as polylines with axes and a legend.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    width: u32,
    height: u32,
) -> String {
    let (width, height) = (width as f64, height as f64);
    let points = series.iter().flat_map(|s| s.points.iter());
    let x_min = points.clone().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.clone().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let y_min = points.clone().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = points.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let frame = if x_min.is_finite() {
        Frame::new(width, height, (x_min, x_max), (y_min.min(0.0), y_max))
    } else {
        Frame::new(width, height, (0.0, 1.0), (0.0, 1.0))
    };

    let mut out = String::new();
    push_header(&mut out, width, height, title);
    push_axes(&mut out, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = frame.top + 14.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{x1}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\">{}</text>\n",
            escape(&s.label),
            x1 = frame.right - 120.0,
            x2 = frame.right - 100.0,
            tx = frame.right - 94.0,
            ty = ly + 4.0,
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Render a histogram as bars; bins below zero are drawn red, the rest blue,
/// and the below-zero fraction is printed on the chart.
pub fn histogram_chart(title: &str, x_label: &str, hist: &Histogram, width: u32, height: u32) -> String {
    let (width, height) = (width as f64, height as f64);
    let x_min = hist.bins.first().map_or(0.0, |b| b.0);
    let x_max = hist.bins.last().map_or(1.0, |b| b.0 + hist.bin_width);
    let y_max = hist.bins.iter().map(|b| b.1).max().unwrap_or(1) as f64;
    let frame = Frame::new(width, height, (x_min, x_max), (0.0, y_max));

    let mut out = String::new();
    push_header(&mut out, width, height, title);
    push_axes(&mut out, &frame, x_label, "count");
    for &(lo, count) in &hist.bins {
        let color = if lo < 0.0 { "#d62728" } else { "#1f77b4" };
        let x = frame.x(lo);
        let w = frame.x(lo + hist.bin_width) - x;
        let y = frame.y(count as f64);
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" \
             stroke=\"white\" stroke-width=\"0.5\"/>\n",
            x,
            y,
            w.max(0.5),
            frame.y(0.0) - y,
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\">below zero: {:.1}%</text>\n",
        frame.left + 6.0,
        frame.top + 12.0,
        hist.negative_fraction * 100.0
    ));
    out.push_str("</svg>\n");
    out
}
