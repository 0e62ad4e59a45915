//! Pixel-level transforms on `H x W x 3` arrays with values in `[0, 1]`.

use ndarray::{s, Array3, Axis};

pub fn hflip(img: &Array3<f64>) -> Array3<f64> {
    img.slice(s![.., ..;-1, ..]).to_owned()
}

pub fn vflip(img: &Array3<f64>) -> Array3<f64> {
    img.slice(s![..;-1, .., ..]).to_owned()
}

/// Mirror an integer coordinate into `[0, n)` without repeating the edge
/// sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn sample_bilinear_reflect(img: &Array3<f64>, y: f64, x: f64, out: &mut [f64; 3]) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let ys = [reflect_index(y0, h), reflect_index(y0 + 1, h)];
    let xs = [reflect_index(x0, w), reflect_index(x0 + 1, w)];
    let wts = [
        (1.0 - fy) * (1.0 - fx),
        (1.0 - fy) * fx,
        fy * (1.0 - fx),
        fy * fx,
    ];
    *out = [0.0; 3];
    for (k, (yy, xx)) in [(ys[0], xs[0]), (ys[0], xs[1]), (ys[1], xs[0]), (ys[1], xs[1])]
        .into_iter()
        .enumerate()
    {
        for (c, o) in out.iter_mut().enumerate() {
            *o += wts[k] * img[[yy, xx, c]];
        }
    }
}

/// Rotates counterclockwise (as displayed) by `degrees` about the image
/// center with bilinear sampling and reflection padding.
pub fn rotate(img: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((h, w, 3));
    let mut px = [0.0; 3];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            sample_bilinear_reflect(img, sy, sx, &mut px);
            for c in 0..3 {
                out[[y, x, c]] = px[c];
            }
        }
    }
    out
}

/// Contrast scaling about the per-image mean followed by brightness scaling.
pub fn brightness_contrast(img: &Array3<f64>, brightness: f64, contrast: f64) -> Array3<f64> {
    let mean = img.mean().unwrap_or(0.0);
    img.mapv(|v| (((v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0))
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Hue rotation in degrees; saturation and value scaled by `1 + shift`.
pub fn hsv_shift(img: &Array3<f64>, hue_deg: f64, sat: f64, val: f64) -> Array3<f64> {
    let mut out = img.clone();
    for mut px in out.lanes_mut(Axis(2)) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(
            h + hue_deg,
            (s * (1.0 + sat)).clamp(0.0, 1.0),
            (v * (1.0 + val)).clamp(0.0, 1.0),
        );
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
    out
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflection borders.
pub fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut tmp = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for (j, kv) in k.iter().enumerate() {
                let xx = reflect_index(x as isize + j as isize - r, w);
                for c in 0..3 {
                    tmp[[y, x, c]] += kv * img[[y, xx, c]];
                }
            }
        }
    }
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let yy = reflect_index(y as isize + j as isize - r, h);
            for x in 0..w {
                for c in 0..3 {
                    out[[y, x, c]] += kv * tmp[[yy, x, c]];
                }
            }
        }
    }
    out
}

/// Axis-aligned rectangle `(top, left, height, width)`.
pub type Hole = (usize, usize, usize, usize);

/// Fills each hole with the per-channel image mean.
pub fn coarse_dropout(img: &Array3<f64>, holes: &[Hole]) -> Array3<f64> {
    let mean = img.mean_axis(Axis(0)).and_then(|m| m.mean_axis(Axis(0)));
    let mut out = img.clone();
    let Some(mean) = mean else { return out };
    let (h, w) = (img.shape()[0], img.shape()[1]);
    for &(top, left, hh, ww) in holes {
        let mut region = out.slice_mut(s![top.min(h)..(top + hh).min(h), left.min(w)..(left + ww).min(w), ..]);
        for mut px in region.lanes_mut(Axis(2)) {
            px.assign(&mean);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 5) % 11) as f64 / 10.0)
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn flips_are_involutions() {
        let img = pattern(5, 6);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        assert_eq!(hflip(&img)[[0, 0, 1]], img[[0, 5, 1]]);
    }

    #[test]
    fn rotation_by_zero_and_full_turn_is_identity() {
        let img = pattern(9, 7);
        let r0 = rotate(&img, 0.0);
        assert!((&r0 - &img).iter().all(|v| v.abs() < 1e-12));
        let r360 = rotate(&img, 360.0);
        assert!((&r360 - &img).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn quarter_turn_moves_right_edge_to_top() {
        let mut img = Array3::zeros((5, 5, 3));
        img[[2, 4, 0]] = 1.0;
        let r = rotate(&img, 90.0);
        assert!((r[[0, 2, 0]] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.6), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
        let img = pattern(3, 3);
        let same = hsv_shift(&img, 0.0, 0.0, 0.0);
        assert!((&same - &img).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_constant_images_and_mass() {
        let img = Array3::from_elem((8, 8, 3), 0.37);
        let b = gaussian_blur(&img, 1.3);
        assert!(b.iter().all(|v| (v - 0.37).abs() < 1e-12));
        let k = gaussian_kernel(0.8);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_fills_with_mean() {
        let img = pattern(6, 6);
        let mean_r = img.index_axis(Axis(2), 0).mean().unwrap();
        let out = coarse_dropout(&img, &[(1, 1, 2, 3)]);
        assert!((out[[2, 3, 0]] - mean_r).abs() < 1e-12);
        assert_eq!(out[[0, 0, 0]], img[[0, 0, 0]]);
        let clipped = coarse_dropout(&img, &[(5, 5, 10, 10)]);
        assert!((clipped[[5, 5, 0]] - mean_r).abs() < 1e-12);
    }
}
