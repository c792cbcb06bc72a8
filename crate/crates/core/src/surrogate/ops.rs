//! Pixel-level image operations on a single `[C, H, W]` image in `[0, 1]`.

/// Borrowed view of one image.
pub struct Image<'a> {
    pub data: &'a mut [f32],
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Image<'_> {
    fn plane(&mut self, ch: usize) -> &mut [f32] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    pub fn clamp(&mut self) {
        for v in self.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

pub fn invert(img: &mut Image, strength: f64) {
    let s = strength as f32;
    for v in img.data.iter_mut() {
        *v = (1.0 - s) * *v + s * (1.0 - *v);
    }
}

pub fn solarize(img: &mut Image, threshold: f64) {
    let t = threshold as f32;
    for v in img.data.iter_mut() {
        if *v >= t {
            *v = 1.0 - *v;
        }
    }
}

pub fn brightness_shift(img: &mut Image, delta: f64) {
    let d = delta as f32;
    for v in img.data.iter_mut() {
        *v += d;
    }
    img.clamp();
}

/// Blends every channel towards the image's mean intensity.
pub fn contrast(img: &mut Image, factor: f64) {
    let n = img.data.len() as f64;
    let mean = (img.data.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
    let f = factor as f32;
    for v in img.data.iter_mut() {
        *v = mean + f * (*v - mean);
    }
    img.clamp();
}

/// Keeps the top `bits` bits of the 8-bit quantized value.
pub fn posterize(img: &mut Image, bits: f64) {
    let bits = bits.round().clamp(1.0, 8.0) as u32;
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    for v in img.data.iter_mut() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        *v = (q & mask) as f32 / 255.0;
    }
}

/// Per-channel histogram equalization over 256 bins, blended with the
/// original by `strength`.
pub fn equalize(img: &mut Image, strength: f64) {
    let s = strength as f32;
    for ch in 0..img.c {
        let plane = img.plane(ch);
        let mut hist = [0usize; 256];
        let bins: Vec<usize> = plane
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as usize)
            .collect();
        for &b in &bins {
            hist[b] += 1;
        }
        let total = plane.len();
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if total == cdf_min {
            continue;
        }
        let denom = (total - cdf_min) as f32;
        for (v, &b) in plane.iter_mut().zip(&bins) {
            let eq = (cdf[b].saturating_sub(cdf_min)) as f32 / denom;
            *v = (1.0 - s) * *v + s * eq;
        }
    }
}

fn convolve_separable(img: &mut Image, kernel: &[f32]) {
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (img.h as isize, img.w as isize);
    let mut tmp = vec![0f32; img.h * img.w];
    for ch in 0..img.c {
        let plane = img.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - r).clamp(0, w - 1);
                    acc += kv * plane[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - r).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
    }
}

/// Gaussian blur with edge-clamped borders.
pub fn gaussian_blur(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= s;
    }
    convolve_separable(img, &kernel);
    img.clamp();
}

/// Unsharp enhancement: `smooth + factor * (x - smooth)` with the 3x3
/// smoothing kernel `[1 1 1; 1 5 1; 1 1 1] / 13`. Factor 1 is the identity.
pub fn sharpen(img: &mut Image, factor: f64) {
    let f = factor as f32;
    let (h, w) = (img.h as isize, img.w as isize);
    for ch in 0..img.c {
        let plane = img.plane(ch);
        let src = plane.to_vec();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, h - 1);
                        let xx = (x + dx).clamp(0, w - 1);
                        let k = if dx == 0 && dy == 0 { 5.0 } else { 1.0 };
                        acc += k * src[(yy * w + xx) as usize];
                    }
                }
                let smooth = acc / 13.0;
                let i = (y * w + x) as usize;
                plane[i] = smooth + f * (src[i] - smooth);
            }
        }
    }
    img.clamp();
}

/// Zeroes a square of side `side` pixels whose center is `(cy, cx)`.
pub fn cutout(img: &mut Image, side: usize, cy: usize, cx: usize) {
    if side == 0 {
        return;
    }
    let half = side / 2;
    let y0 = cy.saturating_sub(half);
    let x0 = cx.saturating_sub(half);
    let y1 = (y0 + side).min(img.h);
    let x1 = (x0 + side).min(img.w);
    let (h, w) = (img.h, img.w);
    for ch in 0..img.c {
        let plane = &mut img.data[ch * h * w..(ch + 1) * h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                plane[y * w + x] = 0.0;
            }
        }
    }
}

/// Resamples the image through `src_of(x, y) -> (sx, sy)` (destination to
/// source pixel coordinates) with bilinear interpolation; samples outside the
/// image read as zero.
pub fn warp(img: &mut Image, src_of: impl Fn(f64, f64) -> (f64, f64)) {
    let (h, w) = (img.h, img.w);
    let mut out = vec![0f32; img.data.len()];
    let fetch = |plane: &[f32], x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src_of(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..img.c {
                let plane = &img.data[ch * h * w..(ch + 1) * h * w];
                let top = fetch(plane, x0, y0) * (1.0 - fx) + fetch(plane, x0 + 1, y0) * fx;
                let bot = fetch(plane, x0, y0 + 1) * (1.0 - fx) + fetch(plane, x0 + 1, y0 + 1) * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    img.data.copy_from_slice(&out);
    img.clamp();
}

fn center(img: &Image) -> (f64, f64) {
    ((img.w as f64 - 1.0) / 2.0, (img.h as f64 - 1.0) / 2.0)
}

pub fn rotate(img: &mut Image, degrees: f64) {
    if degrees == 0.0 {
        return;
    }
    let (cx, cy) = center(img);
    let (s, c) = degrees.to_radians().sin_cos();
    warp(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    });
}

/// Shifts by `(dx, dy)` pixels.
pub fn translate(img: &mut Image, dx: f64, dy: f64) {
    if dx == 0.0 && dy == 0.0 {
        return;
    }
    warp(img, |x, y| (x - dx, y - dy));
}

/// Horizontal shear by `degrees` about the image center row.
pub fn shear(img: &mut Image, degrees: f64) {
    if degrees == 0.0 {
        return;
    }
    let (_, cy) = center(img);
    let t = degrees.to_radians().tan();
    warp(img, |x, y| (x - t * (y - cy), y));
}

/// Zooms about the image center (`factor > 1` enlarges).
pub fn scale(img: &mut Image, factor: f64) {
    if factor == 1.0 {
        return;
    }
    let (cx, cy) = center(img);
    warp(img, |x, y| (cx + (x - cx) / factor, cy + (y - cy) / factor));
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns. RGB only.
pub fn hue_shift(img: &mut Image, shift: f64) {
    let n = img.h * img.w;
    let shift = shift as f32;
    for i in 0..n {
        let (r, g, b) = (img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        img.data[i] = r;
        img.data[n + i] = g;
        img.data[2 * n + i] = b;
    }
    img.clamp();
}

/// Scales brightness and saturation by `factor`. RGB only.
pub fn color_jitter(img: &mut Image, factor: f64) {
    let n = img.h * img.w;
    let f = factor as f32;
    for i in 0..n {
        let (r, g, b) = (img.data[i] * f, img.data[n + i] * f, img.data[2 * n + i] * f);
        let gray = 0.299 * r + 0.587 * g + 0.114 * b;
        img.data[i] = gray + f * (r - gray);
        img.data[n + i] = gray + f * (g - gray);
        img.data[2 * n + i] = gray + f * (b - gray);
    }
    img.clamp();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with<F: FnOnce(&mut Image)>(data: &[f32], c: usize, h: usize, w: usize, f: F) -> Vec<f32> {
        let mut buf = data.to_vec();
        let mut img = Image { data: &mut buf, c, h, w };
        f(&mut img);
        buf
    }

    #[test]
    fn point_ops() {
        let out = with(&[0.2], 1, 1, 1, |i| invert(i, 1.0));
        assert!((out[0] - 0.8).abs() < 1e-7);
        assert_eq!(with(&[0.3, 0.7], 1, 1, 2, |i| solarize(i, 0.5)), vec![0.3, 0.3]);
        let out = with(&[1.0, 0.4, 0.0], 1, 1, 3, |i| posterize(i, 1.0));
        assert_eq!(out, vec![128.0 / 255.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_magnitude_geometry_is_identity() {
        let src: Vec<f32> = (0..20).map(|i| i as f32 / 20.0).collect();
        assert_eq!(with(&src, 1, 4, 5, |i| rotate(i, 0.0)), src);
        assert_eq!(with(&src, 1, 4, 5, |i| translate(i, 0.0, 0.0)), src);
        assert_eq!(with(&src, 1, 4, 5, |i| scale(i, 1.0)), src);
        assert_eq!(with(&src, 1, 4, 5, |i| shear(i, 0.0)), src);
    }

    #[test]
    fn integer_translation_moves_pixels() {
        let src: Vec<f32> = (0..9).map(|i| i as f32 / 10.0).collect();
        let out = with(&src, 1, 3, 3, |i| translate(i, 1.0, 0.0));
        assert_eq!(out, vec![0.0, 0.0, 0.1, 0.0, 0.3, 0.4, 0.0, 0.6, 0.7]);
    }

    #[test]
    fn quarter_turn_rotation() {
        let src = [1.0, 0.0, 0.0, 0.0];
        let out = with(&src, 1, 2, 2, |i| rotate(i, 90.0));
        let hot: Vec<usize> = out.iter().enumerate().filter(|(_, v)| **v > 0.5).map(|(i, _)| i).collect();
        assert_eq!(hot.len(), 1);
        assert_ne!(hot[0], 0);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn equalize_spreads_a_two_level_image() {
        let out = with(&[0.4, 0.4, 0.6, 0.6], 1, 2, 2, |i| equalize(i, 1.0));
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0]);
        let flat = with(&[0.5; 4], 1, 2, 2, |i| equalize(i, 1.0));
        assert_eq!(flat, vec![0.5; 4]);
    }

    #[test]
    fn sharpen_factor_one_and_blur_preserve_constants() {
        let src = [0.25f32; 16];
        let out = with(&src, 1, 4, 4, |i| sharpen(i, 1.0));
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
        let out = with(&src, 1, 4, 4, |i| gaussian_blur(i, 1.0));
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn cutout_zeroes_a_square() {
        let out = with(&[1.0; 16], 1, 4, 4, |i| cutout(i, 2, 2, 2));
        assert_eq!(out.iter().filter(|v| **v == 0.0).count(), 4);
    }
}
