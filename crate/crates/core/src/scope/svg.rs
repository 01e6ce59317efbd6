use std::fmt::Write;

use crate::shottree::Signal;

pub const PANEL_W: u32 = 240;
pub const PANEL_H: u32 = 160;
const MARGIN: f64 = 8.0;
const LABEL_H: f64 = 14.0;

/// Columns for `k` panels: `ceil(sqrt(k))`.
pub fn grid_columns(k: usize) -> usize {
    let mut c = (k as f64).sqrt() as usize;
    while c * c < k {
        c += 1;
    }
    c.max(1)
}

pub fn grid_dims(k: usize) -> (usize, usize) {
    let cols = grid_columns(k);
    (cols, k.div_ceil(cols))
}

pub struct PanelData<'a> {
    pub label: String,
    pub signal: &'a Signal,
    pub y_range: Option<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(title: &str, panels: &[PanelData<'_>]) -> String {
    let (cols, rows) = grid_dims(panels.len());
    let w = cols as u32 * PANEL_W;
    let h = rows as u32 * PANEL_H;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(out, "<title>{}</title>", esc(title));
    for (i, p) in panels.iter().enumerate() {
        let x0 = (i % cols) as f64 * PANEL_W as f64;
        let y0 = (i / cols) as f64 * PANEL_H as f64;
        let _ = writeln!(out, r#"<g class="panel" transform="translate({x0} {y0})">"#);
        let _ = writeln!(
            out,
            r##"<rect x="0.5" y="0.5" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            PANEL_W - 1,
            PANEL_H - 1
        );
        let _ = writeln!(out, r#"<text x="{MARGIN}" y="{}">{}</text>"#, LABEL_H - 2.0, esc(&p.label));
        if let Some(points) = polyline(p) {
            let _ = writeln!(out, r##"<polyline fill="none" stroke="#1f5fa8" points="{points}"/>"##);
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

fn polyline(p: &PanelData<'_>) -> Option<String> {
    let s = p.signal;
    if s.samples.is_empty() {
        return None;
    }
    let times = s.timebase.times();
    let (t_min, t_max) = (times[0] as f64, *times.last().expect("non-empty") as f64);
    let (y_min, y_max) = p.y_range.unwrap_or_else(|| {
        s.samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    });
    let plot_w = PANEL_W as f64 - 2.0 * MARGIN;
    let plot_h = PANEL_H as f64 - 2.0 * MARGIN - LABEL_H;
    let sx = if t_max > t_min { plot_w / (t_max - t_min) } else { 0.0 };
    let sy = if y_max > y_min { plot_h / (y_max - y_min) } else { 0.0 };
    let mut pts = String::new();
    for (t, v) in times.iter().zip(&s.samples) {
        let x = MARGIN + (*t as f64 - t_min) * sx;
        let y = if sy == 0.0 {
            MARGIN + LABEL_H + plot_h / 2.0
        } else {
            MARGIN + LABEL_H + plot_h - (v.clamp(y_min, y_max) - y_min) * sy
        };
        let _ = write!(pts, "{x:.2},{y:.2} ");
    }
    pts.pop();
    Some(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_ceil_sqrt() {
        let oracle = |k: usize| (k as f64).sqrt().ceil() as usize;
        for k in 1..=64 {
            assert_eq!(grid_columns(k), oracle(k), "k={k}");
        }
        assert_eq!(grid_dims(64), (8, 8));
        assert_eq!(grid_dims(5), (3, 2));
        assert_eq!(grid_dims(1), (1, 1));
    }

    #[test]
    fn renders_one_group_per_panel() {
        let sig = Signal::uniform(0, 1000, vec![0.0, 1.0, 0.5], "V").unwrap();
        let flat = Signal::uniform(0, 1000, vec![2.0; 4], "V").unwrap();
        let panels = [
            PanelData {
                label: "A<B".into(),
                signal: &sig,
                y_range: None,
            },
            PanelData {
                label: "flat".into(),
                signal: &flat,
                y_range: Some((0.0, 1.0)),
            },
        ];
        let svg = render("t", &panels);
        assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
        assert!(svg.contains("A&lt;B"));
        assert!(svg.contains(r#"width="480" height="160""#));
    }
}
