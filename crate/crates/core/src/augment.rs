//! Stochastic image augmentations on `H x W x C` buffers in `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Random resized crop back to the input size.
    Crop {
        scale: (f64, f64),
        ratio: (f64, f64),
    },
    HorizontalFlip {
        p: f64,
    },
    /// Brightness, contrast and saturation factors drawn from
    /// `[1 - s, 1 + s]`, hue shift from `[-hue, hue]`.
    ColorJitter {
        p: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale {
        p: f64,
    },
    /// Rotation (degrees), shift (pixels), shear (fraction) and zoom (fraction), each symmetric.
    Affine {
        rotate: f64,
        shift: f64,
        shear: f64,
        zoom: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub transforms: Vec<Transform>,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn flip_only(p: f64) -> Self {
        Self {
            transforms: vec![Transform::HorizontalFlip { p }],
        }
    }

    /// Crop, flip, color jitter and grayscale for natural images.
    pub fn contrastive() -> Self {
        Self {
            transforms: vec![
                Transform::Crop {
                    scale: (0.2, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::ColorJitter {
                    p: 0.8,
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.1,
                },
                Transform::Grayscale { p: 0.2 },
            ],
        }
    }

    /// Weaker variant keeping generations clean.
    pub fn contrastive_mild() -> Self {
        Self {
            transforms: vec![
                Transform::Crop {
                    scale: (0.75, 1.0),
                    ratio: (4.0 / 5.0, 5.0 / 4.0),
                },
                Transform::HorizontalFlip { p: 0.5 },
                Transform::ColorJitter {
                    p: 0.8,
                    brightness: 0.2,
                    contrast: 0.2,
                    saturation: 0.2,
                    hue: 0.0,
                },
            ],
        }
    }

    /// Small affine perturbations for scarce handwriting data.
    pub fn handwriting() -> Self {
        Self {
            transforms: vec![Transform::Affine {
                rotate: 10.0,
                shift: 2.0,
                shear: 0.01,
                zoom: 0.1,
            }],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "flip" => Some(Self::flip_only(0.5)),
            "contrastive" => Some(Self::contrastive()),
            "contrastive_mild" => Some(Self::contrastive_mild()),
            "handwriting" => Some(Self::handwriting()),
            _ => None,
        }
    }

    /// One draw of the policy.
    pub fn apply<R: Rng>(&self, x: &[f32], shape: &[usize], rng: &mut R) -> Result<Vec<f32>, DataError> {
        let [h, w, c] = image_dims(shape)?;
        let mut img = Image {
            h,
            w,
            c,
            px: x.to_vec(),
        };
        for t in &self.transforms {
            img = t.apply(img, rng);
        }
        img.px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(img.px)
    }
}

fn image_dims(shape: &[usize]) -> Result<[usize; 3], DataError> {
    match shape {
        &[h, w, c] => Ok([h, w, c]),
        _ => Err(DataError::NotAnImage(shape.to_vec())),
    }
}

/// Two independent draws of `policy`.
pub fn augment_pair<R: Rng>(
    x: &[f32],
    shape: &[usize],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<f32>), DataError> {
    Ok((policy.apply(x, shape, rng)?, policy.apply(x, shape, rng)?))
}

#[derive(Debug, Clone)]
struct Image {
    h: usize,
    w: usize,
    c: usize,
    px: Vec<f32>,
}

impl Image {
    fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.px[(y * self.w + x) * self.c + ch]
    }

    /// Bilinear sample at continuous pixel coordinates; zero outside.
    fn sample(&self, y: f64, x: f64, ch: usize) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
        let get = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= self.h as f64 || xx >= self.w as f64 {
                0.0
            } else {
                self.at(yy as usize, xx as usize, ch)
            }
        };
        let a = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1.0) * fx;
        let b = get(y0 + 1.0, x0) * (1.0 - fx) + get(y0 + 1.0, x0 + 1.0) * fx;
        a * (1.0 - fy) + b * fy
    }

    fn gray(&self, y: usize, x: usize) -> f32 {
        if self.c < 3 {
            return self.at(y, x, 0);
        }
        0.299 * self.at(y, x, 0) + 0.587 * self.at(y, x, 1) + 0.114 * self.at(y, x, 2)
    }

    fn map(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> Image {
        let mut px = vec![0.0; self.px.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let (sy, sx) = f(y as f64, x as f64);
                for ch in 0..self.c {
                    px[(y * self.w + x) * self.c + ch] = self.sample(sy, sx, ch);
                }
            }
        }
        Image { px, ..*self }
    }
}

fn blend(img: &mut Image, target: impl Fn(&Image, usize, usize, usize) -> f32, factor: f32) {
    let src = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            for ch in 0..img.c {
                let t = target(&src, y, x, ch);
                let v = &mut img.px[(y * img.w + x) * img.c + ch];
                *v = (t + factor * (*v - t)).clamp(0.0, 1.0);
            }
        }
    }
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
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

impl Transform {
    fn apply<R: Rng>(&self, img: Image, rng: &mut R) -> Image {
        match *self {
            Transform::Crop { scale, ratio } => {
                let (h, w) = (img.h as f64, img.w as f64);
                let mut window = (0.0, 0.0, h, w);
                for _ in 0..10 {
                    let area = h * w * rng.gen_range(scale.0..=scale.1);
                    let r = rng.gen_range(ratio.0.ln()..=ratio.1.ln()).exp();
                    let cw = (area * r).sqrt().round();
                    let ch = (area / r).sqrt().round();
                    if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
                        let top = rng.gen_range(0.0..=h - ch).floor();
                        let left = rng.gen_range(0.0..=w - cw).floor();
                        window = (top, left, ch, cw);
                        break;
                    }
                }
                let (top, left, ch, cw) = window;
                img.map(|y, x| (top + (y + 0.5) * ch / h - 0.5, left + (x + 0.5) * cw / w - 0.5))
            }
            Transform::HorizontalFlip { p } => {
                if rng.gen::<f64>() < p {
                    let w = img.w as f64;
                    img.map(|y, x| (y, w - 1.0 - x))
                } else {
                    img
                }
            }
            Transform::ColorJitter {
                p,
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                let mut img = img;
                if rng.gen::<f64>() >= p {
                    return img;
                }
                let mut factor = |s: f64| {
                    if s > 0.0 {
                        rng.gen_range(1.0 - s..=1.0 + s) as f32
                    } else {
                        1.0
                    }
                };
                let (fb, fc, fs) = (factor(brightness), factor(contrast), factor(saturation));
                let dh = if hue > 0.0 {
                    rng.gen_range(-hue..=hue) as f32
                } else {
                    0.0
                };
                blend(&mut img, |_, _, _, _| 0.0, fb);
                let mut mean = 0.0;
                for y in 0..img.h {
                    for x in 0..img.w {
                        mean += img.gray(y, x);
                    }
                }
                let mean = mean / (img.h * img.w) as f32;
                blend(&mut img, |_, _, _, _| mean, fc);
                if img.c >= 3 {
                    blend(&mut img, |s, y, x, _| s.gray(y, x), fs);
                    if dh != 0.0 {
                        for px in img.px.chunks_exact_mut(img.c) {
                            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                            let (r, g, b) = hsv_to_rgb(h + dh, s, v);
                            px[0] = r;
                            px[1] = g;
                            px[2] = b;
                        }
                    }
                }
                img
            }
            Transform::Grayscale { p } => {
                if rng.gen::<f64>() >= p || img.c < 3 {
                    return img;
                }
                let mut out = img.clone();
                for y in 0..img.h {
                    for x in 0..img.w {
                        let g = img.gray(y, x);
                        for ch in 0..img.c {
                            out.px[(y * img.w + x) * img.c + ch] = g;
                        }
                    }
                }
                out
            }
            Transform::Affine {
                rotate,
                shift,
                shear,
                zoom,
            } => {
                let mut sym = |s: f64| if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 };
                let angle = sym(rotate).to_radians();
                let (ty, tx) = (sym(shift), sym(shift));
                let sh = sym(shear);
                let z = 1.0 + sym(zoom);
                let (cy, cx) = ((img.h as f64 - 1.0) / 2.0, (img.w as f64 - 1.0) / 2.0);
                let (sin, cos) = angle.sin_cos();
                // inverse map from output to source coordinates
                img.map(|y, x| {
                    let (dy, dx) = (y - cy - ty, x - cx - tx);
                    let (dy, dx) = (dy / z, dx / z);
                    let dx = dx - sh * dy;
                    (cy + sin * dx + cos * dy, cx + cos * dx - sin * dy)
                })
            }
        }
    }
}
