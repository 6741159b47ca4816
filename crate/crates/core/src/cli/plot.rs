//! Minimal SVG emitters for two-unit, one-factor blocks.

use std::fmt::Write as _;

use crate::criteria::Design;
use crate::information::Block;

const SIZE: f64 = 400.0;
const PAD: f64 = 40.0;

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn px(&self, v: f64) -> f64 {
        PAD + (v - self.lo) / (self.hi - self.lo) * SIZE
    }

    fn py(&self, v: f64) -> f64 {
        PAD + SIZE - (v - self.lo) / (self.hi - self.lo) * SIZE
    }

    fn open(&self, title: &str) -> String {
        let total = SIZE + 2.0 * PAD;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total}\" height=\"{total}\" viewBox=\"0 0 {total} {total}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", total / 2.0, escape(title));
        s
    }

    fn axes(&self, s: &mut String) {
        let _ = writeln!(s, "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"black\"/>");
        for (v, anchor) in [(self.lo, "start"), (self.hi, "end")] {
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"{anchor}\">{v}</text>", self.px(v), PAD + SIZE + 15.0);
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v}</text>", PAD - 4.0, self.py(v) + 4.0);
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn scalar_pair(b: &Block) -> Option<(f64, f64)> {
    match b.points() {
        [a, c] if a.coords().len() == 1 && c.coords().len() == 1 => Some((a.coords()[0], c.coords()[0])),
        _ => None,
    }
}

/// Support blocks as points `(x₁, x₂)`, marker area proportional to weight.
/// Returns `None` unless every block has two scalar units.
pub fn support_svg(design: &Design, lo: f64, hi: f64, title: &str) -> Option<String> {
    let pts: Vec<(f64, f64, f64)> = design
        .blocks()
        .iter()
        .zip(design.weights())
        .map(|(b, &w)| scalar_pair(b).map(|(x, y)| (x, y, w)))
        .collect::<Option<_>>()?;
    let f = Frame { lo, hi };
    let mut s = f.open(title);
    f.axes(&mut s);
    let _ = writeln!(
        s,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>",
        f.px(lo),
        f.py(lo),
        f.px(hi),
        f.py(hi)
    );
    for (x, y, w) in pts {
        let r = 4.0 + 30.0 * w.sqrt();
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r:.2}\" fill=\"#3465a4\" fill-opacity=\"0.5\" stroke=\"#204a87\"/>",
            f.px(x),
            f.py(y)
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{w:.3}</text>", f.px(x), f.py(y) - r - 2.0);
    }
    s.push_str("</svg>\n");
    Some(s)
}

fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (49.0 + u * (255.0 - 49.0), 54.0 + u * (255.0 - 54.0), 149.0 + u * (191.0 - 149.0))
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0 - u * (255.0 - 165.0), 255.0 - u * 255.0, 191.0 - u * (191.0 - 38.0))
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

/// Heat map of `d/s` on the grid `values × values`, mirrored across the diagonal.
pub fn sensitivity_svg(blocks: &[Block], d: &[f64], s_bound: f64, values: &[f64], title: &str) -> Option<String> {
    if values.len() < 2 {
        return None;
    }
    let index = |v: f64| values.iter().position(|x| (x - v).abs() <= 1e-9 * (1.0 + v.abs()));
    let n = values.len();
    let mut cells = vec![f64::NAN; n * n];
    for (b, &v) in blocks.iter().zip(d) {
        let (x, y) = scalar_pair(b)?;
        let (i, j) = (index(x)?, index(y)?);
        cells[i * n + j] = v / s_bound;
        cells[j * n + i] = v / s_bound;
    }
    let (lo, hi) = (values[0], values[n - 1]);
    let f = Frame { lo, hi };
    let step = SIZE / (n - 1) as f64;
    let mut s = f.open(title);
    for i in 0..n {
        for j in 0..n {
            let v = cells[i * n + j];
            if v.is_nan() {
                continue;
            }
            let fill = if v > 1.0 { "#000000".to_owned() } else { colour(v) };
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                f.px(values[i]) - step / 2.0,
                f.py(values[j]) - step / 2.0,
                step,
                step
            );
        }
    }
    f.axes(&mut s);
    s.push_str("</svg>\n");
    Some(s)
}
