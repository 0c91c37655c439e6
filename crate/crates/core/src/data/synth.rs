//! Synthetic shape corpus: a few ellipses and rectangles of distinct classes
//! on a textured, noisy background, with exact masks.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::types::{Image, LabeledSample, MaskMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Semi-axes `a` (along the rotated x axis) and `b`, rotation in radians.
    Ellipse {
        cy: f64,
        cx: f64,
        a: f64,
        b: f64,
        angle: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        half_h: f64,
        half_w: f64,
    },
}

impl Shape {
    /// Membership of the point `(y, x)`, pixel centres sit at integer coordinates.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, a, b, angle } => {
                let (dy, dx) = (y - cy, x - cx);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Rect { cy, cx, half_h, half_w } => (y - cy).abs() <= half_h && (x - cx).abs() <= half_w,
        }
    }

    pub fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|i| self.contains((i / w) as f64, (i % w) as f64))
            .collect()
    }
}

/// Background intensity; its texture spans `BACKGROUND_LEVEL ± 0.08`.
pub const BACKGROUND_LEVEL: f32 = 0.5;

/// Mean intensity of class `c > 0` inside a shape. Levels sit on both sides
/// of the background so contrast changes about the mean keep every class
/// distinguishable.
pub fn class_level(c: usize, num_classes: usize) -> f32 {
    const LEVELS: [&[f32]; 3] = [&[0.85], &[0.15, 0.85], &[0.15, 0.75, 0.95]];
    LEVELS[num_classes - 2][c - 1]
}

fn random_shape(r: &mut rng::Rng, h: usize, w: usize) -> Shape {
    let side = h.min(w) as f64;
    let (lo, hi) = (side / 12.0, side / 4.0);
    let cy = r.random_range(0.2..0.8) * (h - 1) as f64;
    let cx = r.random_range(0.2..0.8) * (w - 1) as f64;
    if r.random_bool(0.5) {
        Shape::Ellipse {
            cy,
            cx,
            a: r.random_range(lo..hi),
            b: r.random_range(lo..hi),
            angle: r.random_range(0.0..std::f64::consts::PI),
        }
    } else {
        Shape::Rect {
            cy,
            cx,
            half_h: r.random_range(lo..hi),
            half_w: r.random_range(lo..hi),
        }
    }
}

/// One sample from its own stream; later shapes paint over earlier ones.
pub fn synthetic_sample(index: usize, (h, w): (usize, usize), num_classes: usize, seed: u64, noise_level: f64) -> LabeledSample {
    let mut r = rng::stream(seed, &[tag::SYNTH, index as u64]);
    let mut classes: Vec<usize> = (1..num_classes).collect();
    classes.shuffle(&mut r);
    let count = r.random_range(1..=classes.len().min(3));
    let mut labels = vec![0u8; h * w];
    for &class in &classes[..count] {
        let shape = random_shape(&mut r, h, w);
        for (l, inside) in labels.iter_mut().zip(shape.rasterize(h, w)) {
            if inside {
                *l = class as u8;
            }
        }
    }
    let (fy, fx) = (r.random_range(0.05..0.2), r.random_range(0.05..0.2));
    let (py, px) = (r.random_range(0.0..6.3), r.random_range(0.0..6.3));
    let noise = Normal::new(0.0, noise_level.max(0.0)).expect("finite sigma");
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let base = match labels[i] {
                0 => BACKGROUND_LEVEL + 0.08 * ((fy * y + py).sin() * (fx * x + px).sin()) as f32,
                c => class_level(c as usize, num_classes),
            };
            let n = if noise_level > 0.0 { noise.sample(&mut r) as f32 } else { 0.0 };
            base + n
        })
        .collect();
    let image = Image::from_clamped(h, w, 1, data).expect("positive dimensions");
    let mask = MaskMap::new(h, w, num_classes, labels).expect("classes below num_classes");
    LabeledSample::new(format!("synth_{index:05}"), image, mask).expect("shapes match")
}

/// `n` single-channel samples, deterministic in `seed`.
pub fn make_synthetic_corpus(
    n: usize,
    hw: (usize, usize),
    num_classes: usize,
    seed: u64,
    noise_level: f64,
) -> Result<Vec<LabeledSample>> {
    if !(2..=4).contains(&num_classes) {
        return Err(Error::Dataset(format!("synthetic corpus supports 2..=4 classes, got {num_classes}")));
    }
    if n == 0 || hw.0 < 8 || hw.1 < 8 {
        return Err(Error::Dataset("synthetic corpus needs n >= 1 and sides >= 8".into()));
    }
    if !(noise_level.is_finite() && noise_level >= 0.0) {
        return Err(Error::Dataset("noise_level must be finite and >= 0".into()));
    }
    Ok((0..n)
        .map(|i| synthetic_sample(i, hw, num_classes, seed, noise_level))
        .collect())
}
