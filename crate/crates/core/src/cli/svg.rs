//! Minimal static SVG line plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Plot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_y: bool,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi - lo < 1e-300 {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

impl Plot<'_> {
    pub fn render(&self) -> String {
        let ty = |y: f64| if self.log_y { y.log10() } else { y };
        let pts = || {
            self.series
                .iter()
                .flat_map(|(_, p)| p.iter())
                .filter(|(x, y)| x.is_finite() && ty(*y).is_finite())
        };
        let (x0, x1) = range(pts().map(|p| p.0)).unwrap_or((0.0, 1.0));
        let (y0, y1) = range(pts().map(|p| ty(p.1))).unwrap_or((0.0, 1.0));
        let sx = |x: f64| PAD_L + (x - x0) / (x1 - x0) * (W - PAD_L - PAD_R);
        let sy = |y: f64| H - PAD_B - (ty(y) - y0) / (y1 - y0) * (H - PAD_T - PAD_B);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (PAD_L + W - PAD_R) / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{PAD_L},{PAD_T} V{} H{}" fill="none" stroke="black"/>"#,
            H - PAD_B,
            W - PAD_R
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let px = PAD_L + f * (W - PAD_L - PAD_R);
            let py = H - PAD_B - f * (H - PAD_T - PAD_B);
            let ylab = if self.log_y {
                format!("1e{yv:.1}")
            } else {
                format!("{yv:.3}")
            };
            let _ = writeln!(
                s,
                r#"<text x="{px}" y="{}" text-anchor="middle">{xv:.3}</text><text x="{}" y="{}" text-anchor="end">{ylab}</text>"#,
                H - PAD_B + 16.0,
                PAD_L - 6.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (PAD_L + W - PAD_R) / 2.0,
            H - 10.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(self.y_label)
        );
        for (k, (name, points)) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let ok: Vec<&(f64, f64)> = points
                .iter()
                .filter(|(x, y)| x.is_finite() && ty(*y).is_finite())
                .collect();
            if ok.len() > 1 {
                let d: Vec<String> = ok
                    .iter()
                    .enumerate()
                    .map(|(i, (x, y))| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(*x), sy(*y)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    d.join(" ")
                );
            }
            for (x, y) in &ok {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(*x),
                    sy(*y)
                );
            }
            let ly = PAD_T + 16.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                W - PAD_R + 10.0,
                ly,
                W - PAD_R + 24.0,
                ly + 9.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_series_and_skips_nonpositive_on_log_axis() {
        let p = Plot {
            title: "tail <R=1>",
            x_label: "n",
            y_label: "P",
            log_y: true,
            series: vec![("a".into(), vec![(0.0, 1.0), (1.0, 0.1), (2.0, 0.0)])],
        };
        let s = p.render();
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains("tail &lt;R=1&gt;"));
    }
}
