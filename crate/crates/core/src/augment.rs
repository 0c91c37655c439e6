//! Weak geometric augmentation (rotation followed by elastic distortion),
//! applied with one coordinate map to both image and mask, and strong
//! photometric augmentation (sharpness, contrast, Gaussian blur) applied on
//! top of the weakly augmented image.

use rand::Rng as _;

use crate::config::{AugmentConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{check_pair, Image, MaskMap};

/// Parameters of one weak augmentation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomParams {
    pub rotation_deg: f64,
    height: usize,
    width: usize,
    /// Per-pixel displacement along y, then x.
    disp_y: Vec<f32>,
    disp_x: Vec<f32>,
}

impl GeomParams {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            height,
            width,
            disp_y: vec![0.0; height * width],
            disp_x: vec![0.0; height * width],
        }
    }

    /// Pure rotation without elastic distortion.
    pub fn rotation(height: usize, width: usize, rotation_deg: f64) -> Self {
        Self {
            rotation_deg,
            ..Self::identity(height, width)
        }
    }

    pub fn with_displacement(
        height: usize,
        width: usize,
        rotation_deg: f64,
        disp_y: Vec<f32>,
        disp_x: Vec<f32>,
    ) -> Result<Self> {
        if disp_y.len() != height * width || disp_x.len() != height * width {
            return Err(Error::ShapeMismatch("displacement field size".into()));
        }
        Ok(Self {
            rotation_deg,
            height,
            width,
            disp_y,
            disp_x,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn displacement(&self) -> (&[f32], &[f32]) {
        (&self.disp_y, &self.disp_x)
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.disp_y.iter().all(|d| *d == 0.0)
            && self.disp_x.iter().all(|d| *d == 0.0)
    }

    /// Source coordinate for every output pixel: the displaced location is
    /// mapped back through the inverse rotation about the image center.
    pub fn coord_map(&self) -> CoordMap {
        let (h, w) = (self.height, self.width);
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let mut src_y = Vec::with_capacity(h * w);
        let mut src_x = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let u = x as f64 + self.disp_x[i] as f64 - cx;
                let v = y as f64 + self.disp_y[i] as f64 - cy;
                src_x.push(cx + u * cos - v * sin);
                src_y.push(cy + u * sin + v * cos);
            }
        }
        CoordMap {
            height: h,
            width: w,
            src_y,
            src_x,
        }
    }
}

/// Output-to-source pixel coordinates shared by the image and mask warps.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordMap {
    pub height: usize,
    pub width: usize,
    pub src_y: Vec<f64>,
    pub src_x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

#[inline]
fn nearest_index(coord: f64, len: usize) -> Option<usize> {
    let r = coord.round();
    if r >= 0.0 && r <= (len - 1) as f64 {
        Some(r as usize)
    } else {
        None
    }
}

/// Resamples planar channels through `map`; out-of-bounds samples take `fill[c]`.
pub fn warp_channels(
    data: &[f32],
    channels: usize,
    map: &CoordMap,
    interp: Interp,
    fill: &[f32],
) -> Vec<f32> {
    let (h, w) = (map.height, map.width);
    let n = h * w;
    debug_assert_eq!(data.len(), n * channels);
    let mut out = vec![0.0f32; n * channels];
    for i in 0..n {
        let (sy, sx) = (map.src_y[i], map.src_x[i]);
        match interp {
            Interp::Nearest => match (nearest_index(sy, h), nearest_index(sx, w)) {
                (Some(yy), Some(xx)) => {
                    for c in 0..channels {
                        out[c * n + i] = data[c * n + yy * w + xx];
                    }
                }
                _ => {
                    for c in 0..channels {
                        out[c * n + i] = fill[c];
                    }
                }
            },
            Interp::Bilinear => {
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for c in 0..channels {
                    let mut acc = 0.0f64;
                    for &(ty, tx, wt) in &taps {
                        if wt == 0.0 {
                            continue;
                        }
                        let v = if ty >= 0.0 && ty < h as f64 && tx >= 0.0 && tx < w as f64 {
                            data[c * n + ty as usize * w + tx as usize]
                        } else {
                            fill[c]
                        };
                        acc += wt * v as f64;
                    }
                    out[c * n + i] = acc as f32;
                }
            }
        }
    }
    out
}

/// Warps a mask with nearest sampling; out-of-bounds pixels become class 0.
pub fn warp_mask(mask: &MaskMap, map: &CoordMap) -> MaskMap {
    let (h, w) = (map.height, map.width);
    let mut labels = vec![0u8; h * w];
    for (i, l) in labels.iter_mut().enumerate() {
        if let (Some(yy), Some(xx)) = (nearest_index(map.src_y[i], h), nearest_index(map.src_x[i], w)) {
            *l = mask.get(yy, xx);
        }
    }
    MaskMap::new(h, w, mask.num_classes(), labels).expect("warped labels stay in range")
}

fn uniform_in(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a rotation uniformly from the configured range and an elastic
/// displacement field: i.i.d. uniform(-1, 1) offsets, Gaussian-smoothed with
/// `elastic_sigma`, scaled by `elastic_alpha`.
pub fn sample_geom_params(cfg: &TrainConfig, rng: &mut Rng) -> GeomParams {
    sample_geom_params_for(&cfg.augment, cfg.resize_hw, rng)
}

pub fn sample_geom_params_for(aug: &AugmentConfig, (h, w): (usize, usize), rng: &mut Rng) -> GeomParams {
    let rotation_deg = uniform_in(rng, aug.rotation_range_deg);
    if aug.elastic_alpha == 0.0 {
        return GeomParams::rotation(h, w, rotation_deg);
    }
    let field = |rng: &mut Rng| -> Vec<f32> {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        gaussian_blur_plane(&raw, h, w, aug.elastic_sigma)
            .into_iter()
            .map(|v| (v * aug.elastic_alpha) as f32)
            .collect()
    };
    let disp_y = field(rng);
    let disp_x = field(rng);
    GeomParams {
        rotation_deg,
        height: h,
        width: w,
        disp_y,
        disp_x,
    }
}

/// Applies one geometric warp to the image (bilinear) and, when given, the
/// mask (nearest).
pub fn apply_weak(
    image: &Image,
    mask: Option<&MaskMap>,
    params: &GeomParams,
) -> Result<(Image, Option<MaskMap>)> {
    if let Some(m) = mask {
        check_pair(image, m)?;
    }
    if image.hw() != params.hw() {
        return Err(Error::ShapeMismatch(format!(
            "image is {:?}, geometric params are {:?}",
            image.hw(),
            params.hw()
        )));
    }
    if params.is_identity() {
        return Ok((image.clone(), mask.cloned()));
    }
    let map = params.coord_map();
    let fill = vec![0.0; image.channels()];
    let data = warp_channels(image.data(), image.channels(), &map, Interp::Bilinear, &fill);
    let warped = Image::from_clamped(image.height(), image.width(), image.channels(), data)?;
    Ok((warped, mask.map(|m| warp_mask(m, &map))))
}

/// Parameters of one strong augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoParams {
    pub sharpness_factor: f64,
    pub contrast_factor: f64,
    pub blur_sigma: f64,
}

impl PhotoParams {
    pub const IDENTITY: PhotoParams = PhotoParams {
        sharpness_factor: 1.0,
        contrast_factor: 1.0,
        blur_sigma: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

pub fn sample_photo_params(cfg: &TrainConfig, rng: &mut Rng) -> PhotoParams {
    sample_photo_params_for(&cfg.augment, rng)
}

pub fn sample_photo_params_for(aug: &AugmentConfig, rng: &mut Rng) -> PhotoParams {
    PhotoParams {
        sharpness_factor: uniform_in(rng, aug.sharpness_range),
        contrast_factor: uniform_in(rng, aug.contrast_range),
        blur_sigma: uniform_in(rng, aug.blur_sigma_range).max(0.0),
    }
}

/// Sharpness, then contrast, then Gaussian blur; each stage clipped to [0,1].
/// Purely photometric: no pixel changes location.
pub fn apply_strong(image: &Image, params: &PhotoParams) -> Image {
    if params.is_identity() {
        return image.clone();
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let n = h * w;
    let mut data: Vec<f64> = image.data().iter().map(|v| *v as f64).collect();

    if params.sharpness_factor != 1.0 {
        for c in 0..ch {
            adjust_sharpness(&mut data[c * n..(c + 1) * n], h, w, params.sharpness_factor);
        }
    }
    if params.contrast_factor != 1.0 {
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let f = params.contrast_factor;
        for v in data.iter_mut() {
            *v = (mean + f * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if params.blur_sigma > 0.0 {
        for c in 0..ch {
            let blurred = gaussian_blur_plane(&data[c * n..(c + 1) * n], h, w, params.blur_sigma);
            for (d, b) in data[c * n..(c + 1) * n].iter_mut().zip(blurred) {
                *d = b.clamp(0.0, 1.0);
            }
        }
    }
    Image::from_clamped(h, w, ch, data.into_iter().map(|v| v as f32).collect())
        .expect("shape unchanged")
}

/// Blends each interior pixel with a 3x3 smoothing of its neighborhood
/// (center weight 5, others 1); border pixels are left as is.
fn adjust_sharpness(plane: &mut [f64], h: usize, w: usize, factor: f64) {
    if h < 3 || w < 3 {
        return;
    }
    let src = plane.to_vec();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += src[(y + dy - 1) * w + (x + dx - 1)];
                }
            }
            let center = src[y * w + x];
            let smooth = (acc + 4.0 * center) / 13.0;
            plane[y * w + x] = (smooth + factor * (center - smooth)).clamp(0.0, 1.0);
        }
    }
}

/// Normalized sampled Gaussian, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, len: usize| v.clamp(0, len as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = clamp(x as i64 + j as i64 - r, w);
                acc += kv * plane[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = clamp(y as i64 + j as i64 - r, h);
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Encodes a mask as a one-hot float image, one channel per class.
pub fn mask_to_one_hot_image(mask: &MaskMap) -> Image {
    let data = mask.one_hot().into_iter().map(|v| v as f32).collect();
    Image::new(mask.height(), mask.width(), mask.num_classes(), data).expect("one-hot in range")
}
