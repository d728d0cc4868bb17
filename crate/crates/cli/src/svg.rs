//! Minimal hand-written SVG: axes, polylines, bars. Output depends only on the inputs.

use std::fmt::Write;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { label: label.into(), points }
    }
}

/// One panel: line series, optional horizontal reference lines.
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub hlines: Vec<(f64, String)>,
}

impl Panel {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Panel {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            hlines: Vec::new(),
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts = self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        for &(h, _) in &self.hlines {
            if h.is_finite() {
                y0 = y0.min(h);
                y1 = y1.max(h);
            }
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        let dy = 0.05 * (y1 - y0);
        (x0, x1, y0 - dy, y1 + dy)
    }

    fn draw(&self, out: &mut String, ox: f64, oy: f64, w: f64, h: f64) {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = w - MARGIN_L - MARGIN_R;
        let ph = h - MARGIN_T - MARGIN_B;
        let sx = |x: f64| ox + MARGIN_L + pw * (x - x0) / (x1 - x0);
        let sy = |y: f64| oy + MARGIN_T + ph * (1.0 - (y - y0) / (y1 - y0));
        let (left, top, bottom) = (ox + MARGIN_L, oy + MARGIN_T, oy + MARGIN_T + ph);
        let _ = writeln!(
            out,
            r#"<rect x="{left:.2}" y="{top:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#,
            left + pw / 2.0,
            oy + 18.0,
            esc(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            left + pw / 2.0,
            oy + h - 6.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            ox + 14.0,
            top + ph / 2.0,
            ox + 14.0,
            top + ph / 2.0,
            esc(&self.y_label)
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
                sx(xv),
                bottom + 14.0,
                tick(xv)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                left - 4.0,
                sy(yv) + 3.0,
                tick(yv)
            );
        }
        for (h, label) in &self.hlines {
            if h.is_finite() {
                let _ = writeln!(
                    out,
                    r#"<line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
                    sy(*h),
                    left + pw,
                    sy(*h)
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10" fill="gray">{}</text>"#,
                    left + pw - 4.0,
                    sy(*h) - 3.0,
                    esc(label)
                );
            }
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let mut d = String::new();
            let mut pen = false;
            for &(x, y) in &s.points {
                if !(x.is_finite() && y.is_finite()) {
                    pen = false;
                    continue;
                }
                let _ = write!(d, "{}{:.2} {:.2} ", if pen { 'L' } else { 'M' }, sx(x), sy(y));
                pen = true;
            }
            let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
            let ly = top + 14.0 + 14.0 * k as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
                left + 8.0,
                left + 24.0
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
                left + 28.0,
                ly + 4.0,
                esc(&s.label)
            );
        }
    }
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(w: f64, h: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    s
}

/// Panels stacked vertically.
pub fn line_plot(panels: &[Panel], width: f64, panel_height: f64) -> String {
    let mut s = open(width, panel_height * panels.len() as f64);
    for (i, p) in panels.iter().enumerate() {
        p.draw(&mut s, 0.0, panel_height * i as f64, width, panel_height);
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bars: one group per category, one bar per named set.
pub fn bar_chart(title: &str, categories: usize, sets: &[(String, Vec<f64>)], width: f64, height: f64) -> String {
    let mut s = open(width, height);
    let ymax = sets.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.05 } else { 1.0 };
    let pw = width - MARGIN_L - MARGIN_R;
    let ph = height - MARGIN_T - MARGIN_B;
    let (left, top, bottom) = (MARGIN_L, MARGIN_T, MARGIN_T + ph);
    let _ = writeln!(
        s,
        r#"<rect x="{left:.2}" y="{top:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">eigenvector index</text>"#,
        left + pw / 2.0,
        height - 6.0
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let y = bottom - ph * v / ymax;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            y + 3.0,
            tick(v)
        );
    }
    let group = pw / categories.max(1) as f64;
    let bar = 0.8 * group / sets.len().max(1) as f64;
    for c in 0..categories {
        let gx = left + group * c as f64 + 0.1 * group;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            gx + 0.4 * group,
            bottom + 14.0,
            c + 1
        );
        for (k, (_, vals)) in sets.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(0.0);
            let v = if v.is_finite() { v.max(0.0) } else { 0.0 };
            let bh = ph * v / ymax;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{}"/>"#,
                gx + bar * k as f64,
                bottom - bh,
                bar,
                COLORS[k % COLORS.len()]
            );
        }
    }
    for (k, (label, _)) in sets.iter().enumerate() {
        let ly = top + 14.0 + 14.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="12" height="8" fill="{}"/>"#,
            left + pw - 150.0,
            ly - 7.0,
            COLORS[k % COLORS.len()]
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" font-size="11">{}</text>"#, left + pw - 134.0, esc(label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let mk = || {
            let mut p = Panel::new("kta", "step", "KTA");
            p.series.push(Series::new("a<b", vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)]));
            p.hlines.push((2.0, "2/eta".into()));
            line_plot(&[p], 600.0, 300.0)
        };
        let a = mk();
        assert_eq!(a, mk());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("a&lt;b"));
        assert_eq!(a.matches("<path").count(), 1);
        let b = bar_chart("bars", 3, &[("x".into(), vec![0.5, 0.3, 0.2])], 600.0, 300.0);
        assert_eq!(b.matches("<rect").count(), 2 + 3 + 1);
    }

    #[test]
    fn empty_panel_still_renders() {
        let s = line_plot(&[Panel::new("", "", "")], 100.0, 100.0);
        assert!(s.contains("</svg>"));
    }
}
