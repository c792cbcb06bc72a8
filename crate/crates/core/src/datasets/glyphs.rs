//! Procedural digit-like glyphs: each class is a set of polylines in the unit
//! square, rendered with per-sample jitter in pose, stroke width and vertices.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Strokes for class `c` (0..10).
fn template(c: usize) -> Vec<Stroke> {
    match c {
        0 => vec![ellipse(0.5, 0.5, 0.22, 0.33, 16)],
        1 => vec![vec![(0.36, 0.3), (0.52, 0.15), (0.52, 0.85)]],
        2 => vec![vec![
            (0.3, 0.3),
            (0.4, 0.17),
            (0.6, 0.17),
            (0.7, 0.3),
            (0.65, 0.45),
            (0.3, 0.85),
            (0.72, 0.85),
        ]],
        3 => vec![vec![
            (0.3, 0.2),
            (0.66, 0.2),
            (0.48, 0.47),
            (0.68, 0.6),
            (0.62, 0.8),
            (0.45, 0.86),
            (0.28, 0.8),
        ]],
        4 => vec![vec![(0.62, 0.86), (0.62, 0.15), (0.27, 0.62), (0.76, 0.62)]],
        5 => vec![vec![
            (0.7, 0.17),
            (0.36, 0.17),
            (0.32, 0.47),
            (0.6, 0.45),
            (0.7, 0.62),
            (0.6, 0.82),
            (0.3, 0.82),
        ]],
        6 => vec![vec![
            (0.66, 0.16),
            (0.42, 0.33),
            (0.32, 0.6),
            (0.4, 0.83),
            (0.6, 0.83),
            (0.68, 0.65),
            (0.57, 0.5),
            (0.34, 0.56),
        ]],
        7 => vec![vec![(0.28, 0.17), (0.72, 0.17), (0.44, 0.86)]],
        8 => vec![ellipse(0.5, 0.32, 0.15, 0.15, 12), ellipse(0.5, 0.66, 0.19, 0.18, 12)],
        _ => vec![ellipse(0.48, 0.34, 0.17, 0.17, 12), vec![(0.65, 0.34), (0.6, 0.86)]],
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders one jittered glyph of class `class` into a `size x size` buffer.
pub(crate) fn render(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let angle = rng.gen_range(-10f64..10.0).to_radians();
    let zoom = rng.gen_range(0.85..1.1);
    let shift = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));
    let half_width = rng.gen_range(0.035..0.06);
    let (s, c) = angle.sin_cos();
    let strokes: Vec<Stroke> = template(class % 10)
        .into_iter()
        .map(|stroke| {
            stroke
                .into_iter()
                .map(|(x, y)| {
                    let (x, y) = (x + rng.gen_range(-0.025..0.025), y + rng.gen_range(-0.025..0.025));
                    let (dx, dy) = (x - 0.5, y - 0.5);
                    (
                        0.5 + zoom * (c * dx - s * dy) + shift.0,
                        0.5 + zoom * (s * dx + c * dy) + shift.1,
                    )
                })
                .collect()
        })
        .collect();
    let pixel = 1.0 / size as f64;
    let mut out = vec![0f32; size * size];
    for py in 0..size {
        for px in 0..size {
            let p = ((px as f64 + 0.5) * pixel, (py as f64 + 0.5) * pixel);
            let d = strokes
                .iter()
                .flat_map(|st| st.windows(2).map(move |w| seg_dist(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            // one-pixel linear ramp at the stroke edge
            out[py * size + px] = ((half_width - d) / pixel + 0.5).clamp(0.0, 1.0) as f32;
        }
    }
    out
}
