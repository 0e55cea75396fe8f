//! Procedural rendering: a textured nuisance background plus one ring glyph
//! whose interior details encode the class.

use rand::Rng as _;

use crate::rng::Rng;

/// Supersampling grid per pixel axis for glyph antialiasing.
const SUPERSAMPLE: usize = 4;

/// Nominal glyph feature values and the spread between the extreme class
/// levels at subtlety 0.
const INNER_RATIO: (f64, f64) = (0.55, 0.40);
const NOTCH_DEPTH: (f64, f64) = (0.50, 0.80);
const BAR_THICKNESS: (f64, f64) = (0.12, 0.20);
const NOTCH_HALF_ANGLE: f64 = 0.38;

/// Class-defining glyph parameters, all flip invariant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlyphParams {
    /// Inner radius over outer radius.
    pub inner_ratio: f64,
    /// Depth of the top notch as a fraction of the ring thickness.
    pub notch_depth: f64,
    /// Thickness of the horizontal bar across the hole, relative to the
    /// outer radius. Zero means no bar.
    pub bar_thickness: f64,
}

impl GlyphParams {
    pub fn as_array(&self) -> [f64; 3] {
        [self.inner_ratio, self.notch_depth, self.bar_thickness]
    }
}

/// Levels per feature so that `levels^3 >= num_classes`.
pub fn levels_per_feature(num_classes: usize) -> usize {
    let mut l = 2;
    while l * l * l < num_classes {
        l += 1;
    }
    l
}

/// Class `c` is written in base `levels` and each digit picks one of
/// `levels` evenly spaced values for one feature. The spread shrinks
/// linearly to zero as subtlety goes to 1.
pub fn class_params(class: usize, num_classes: usize, subtlety: f64) -> GlyphParams {
    let l = levels_per_feature(num_classes);
    let scale = 1.0 - subtlety;
    let level = |feature: u32, (mid, spread): (f64, f64)| {
        let digit = (class / l.pow(feature)) % l;
        let pos = digit as f64 / (l - 1) as f64 - 0.5;
        mid + pos * spread * scale
    };
    GlyphParams {
        inner_ratio: level(0, INNER_RATIO),
        notch_depth: level(1, NOTCH_DEPTH),
        bar_thickness: level(2, BAR_THICKNESS).max(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Placement {
    /// Inclusive-exclusive pixel bounding box `(x0, y0, x1, y1)`.
    pub fn bbox(&self, size: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64| v.clamp(0.0, size as f64) as usize;
        (
            clip((self.cx - self.radius).floor()),
            clip((self.cy - self.radius).floor()),
            clip((self.cx + self.radius).ceil()),
            clip((self.cy + self.radius).ceil()),
        )
    }
}

fn glyph_contains(p: &GlyphParams, at: &Placement, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - at.cx, y - at.cy);
    let r = (dx * dx + dy * dy).sqrt();
    let r_out = at.radius;
    let r_in = r_out * p.inner_ratio;
    if r > r_out {
        return false;
    }
    if r < r_in {
        return dy.abs() < 0.5 * p.bar_thickness * r_out;
    }
    // Angle from the upward direction; the notch is symmetric about it.
    let up_angle = dx.atan2(-dy).abs();
    if up_angle < NOTCH_HALF_ANGLE && r > r_out - p.notch_depth * (r_out - r_in) {
        return false;
    }
    true
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Texture value in `[0, 1]` at every pixel.
fn texture(size: usize, rng: &mut Rng) -> Vec<f64> {
    let n = size as f64;
    let mut out = vec![0.0; size * size];
    match rng.random_range(0..4u32) {
        0 => {
            // Stripes.
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(0.08..0.3) * n;
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, s) = (angle.cos(), angle.sin());
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * c + y as f64 * s) / period * std::f64::consts::TAU + phase;
                    out[y * size + x] = 0.5 + 0.5 * t.sin();
                }
            }
        }
        1 => {
            // Checkerboard.
            let cell = rng.random_range(0.06..0.2) * n;
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            for y in 0..size {
                for x in 0..size {
                    let a = ((x as f64 + ox) / cell).floor() as i64;
                    let b = ((y as f64 + oy) / cell).floor() as i64;
                    out[y * size + x] = ((a + b).rem_euclid(2)) as f64;
                }
            }
        }
        2 => {
            // Smooth value noise on a coarse lattice.
            let g = rng.random_range(3..7usize);
            let lattice: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.random::<f64>()).collect();
            for y in 0..size {
                for x in 0..size {
                    let fx = x as f64 / n * g as f64;
                    let fy = y as f64 / n * g as f64;
                    let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                    let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                    let at = |i: usize, j: usize| lattice[j * (g + 1) + i];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    out[y * size + x] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        _ => {
            // Linear gradient.
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (c, s) = (angle.cos(), angle.sin());
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f64 / n - 0.5) * c + (y as f64 / n - 0.5) * s) / std::f64::consts::SQRT_2 + 0.5;
                    out[y * size + x] = u.clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Render one image as planar RGB `[3, size, size]` in
/// `[0, 1]`, returning the glyph placement.
pub fn render(params: &GlyphParams, size: usize, rng: &mut Rng) -> (Vec<f64>, Placement) {
    let tex = texture(size, rng);
    let hue_a: f64 = rng.random();
    let hue_b = hue_a + rng.random_range(-0.15..0.15);
    let bright: f64 = rng.random_range(0.25..0.75);
    let contrast = rng.random_range(0.04..0.12);
    let col_a = hsv_to_rgb(hue_a, rng.random_range(0.2..0.8), (bright + contrast).min(1.0));
    let col_b = hsv_to_rgb(hue_b, rng.random_range(0.2..0.8), (bright - contrast).max(0.0));

    let n = size as f64;
    let radius = rng.random_range(0.2..0.32) * n;
    let margin = radius + 1.0;
    let placement = Placement {
        cx: rng.random_range(margin..n - margin),
        cy: rng.random_range(margin..n - margin),
        radius,
    };
    // Glyph brightness contrasts with the background's mean level.
    let glyph_v = if bright > 0.5 {
        rng.random_range(0.0..0.15)
    } else {
        rng.random_range(0.85..1.0)
    };
    let glyph = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.6), glyph_v);

    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let (x0, y0, x1, y1) = placement.bbox(size);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let t = tex[y * size + x];
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = col_a[c] * t + col_b[c] * (1.0 - t);
            }
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let fx = x as f64 + (sx as f64 + 0.5) * step;
                        let fy = y as f64 + (sy as f64 + 0.5) * step;
                        if glyph_contains(params, &placement, fx, fy) {
                            hits += 1;
                        }
                    }
                }
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + glyph[c] * a;
                }
            }
            for c in 0..3 {
                img[c * plane + y * size + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    (img, placement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn class_params_distinct_until_full_subtlety() {
        for classes in [2, 4, 8, 9, 27] {
            let all: Vec<[f64; 3]> = (0..classes).map(|c| class_params(c, classes, 0.3).as_array()).collect();
            for i in 0..classes {
                for j in 0..i {
                    assert_ne!(all[i], all[j], "classes {i} and {j} of {classes}");
                }
            }
        }
        let a = class_params(0, 8, 1.0);
        let b = class_params(7, 8, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn glyph_features_are_mirror_symmetric() {
        let p = class_params(5, 8, 0.0);
        let at = Placement { cx: 32.0, cy: 32.0, radius: 15.0 };
        for i in 0..400 {
            let x = 17.0 + (i % 20) as f64 * 1.5;
            let y = 17.0 + (i / 20) as f64 * 1.5;
            assert_eq!(glyph_contains(&p, &at, x, y), glyph_contains(&p, &at, 64.0 - x, y));
        }
    }

    #[test]
    fn render_range_and_determinism() {
        let p = class_params(1, 4, 0.3);
        let (a, pa) = render(&p, 32, &mut stream(1, Stream::Dataset, &[0]));
        let (b, pb) = render(&p, 32, &mut stream(1, Stream::Dataset, &[0]));
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.len(), 3 * 32 * 32);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
