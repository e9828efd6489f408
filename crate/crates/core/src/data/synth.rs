//! Deterministic synthetic tracking sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::XywhBox;
use crate::data::darken::{darken, DarkenParams};
use crate::data::image::{Frame, Image};
use crate::error::{Error, Result};

pub const TAG_LOW_LIGHT: &str = "low-ambient-intensity";
pub const TAG_SCALE_VARIATION: &str = "scale-variation";
pub const TAG_FAST_MOTION: &str = "fast-motion";

/// Known attribute tags, in report order.
pub const KNOWN_ATTRIBUTES: [&str; 3] = [TAG_LOW_LIGHT, TAG_SCALE_VARIATION, TAG_FAST_MOTION];

const MIN_SCALE: f64 = 0.75;
const MAX_SCALE: f64 = 1.33;
const VELOCITY_DAMPING: f64 = 0.8;

/// SplitMix64 finalizer; derives independent stream seeds from `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub shape: ObjectShape,
    /// Object size at scale 1, pixels.
    pub object_w: f64,
    pub object_h: f64,
    pub texture_seed: u64,
    pub background_seed: u64,
    /// Per-frame velocity noise, pixels.
    pub velocity_sigma: f64,
    /// Per-frame log-scale noise.
    pub scale_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub groundtruth: Vec<XywhBox>,
    pub attributes: Vec<String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_attribute(&self, tag: &str) -> bool {
        self.attributes.iter().any(|a| a == tag)
    }
}

struct Texture {
    base: [f64; 3],
    stripe: [f64; 3],
    freq: f64,
    angle: f64,
}

impl Texture {
    fn sample(rng: &mut impl Rng) -> Self {
        let vivid = |rng: &mut dyn rand::RngCore| {
            let mut c = [0.0; 3];
            let hi = rng.random_range(0..3);
            for (k, v) in c.iter_mut().enumerate() {
                *v = if k == hi {
                    rng.random_range(0.75..1.0)
                } else {
                    rng.random_range(0.0..0.45)
                };
            }
            c
        };
        Self {
            base: vivid(rng),
            stripe: vivid(rng),
            freq: rng.random_range(1.5..3.5),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Color at object-local coordinates `u, v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        let t = (u * self.angle.cos() + v * self.angle.sin()) * self.freq;
        if t.rem_euclid(1.0) < 0.5 {
            self.base
        } else {
            self.stripe
        }
    }
}

fn background(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const GRID: usize = 6;
    let coarse: Vec<[f64; 3]> = (0..(GRID + 1) * (GRID + 1))
        .map(|_| {
            let l = rng.random_range(0.2..0.7);
            [0, 1, 2].map(|_| (l + rng.random_range(-0.12..0.12f64)).clamp(0.0, 1.0))
        })
        .collect();
    let mut img = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        let gy = y as f64 / height as f64 * GRID as f64;
        let (iy, ty) = (gy.floor() as usize, gy.fract());
        for x in 0..width {
            let gx = x as f64 / width as f64 * GRID as f64;
            let (ix, tx) = (gx.floor() as usize, gx.fract());
            let at = |i: usize, j: usize| coarse[j * (GRID + 1) + i];
            let mut px = [0.0; 3];
            for c in 0..3 {
                let top = at(ix, iy)[c] * (1.0 - tx) + at(ix + 1, iy)[c] * tx;
                let bottom = at(ix, iy + 1)[c] * (1.0 - tx) + at(ix + 1, iy + 1)[c] * tx;
                px[c] = top * (1.0 - ty) + bottom * ty;
            }
            let grain: f64 = rng.random_range(-0.04..0.04);
            img.set_pixel(x, y, px.map(|v| (v + grain).clamp(0.0, 1.0)));
        }
    }
    // muted clutter patches
    let patches = rng.random_range(3..7);
    for _ in 0..patches {
        let pw = rng.random_range(4..(width / 6).max(5));
        let ph = rng.random_range(4..(height / 6).max(5));
        let px0 = rng.random_range(0..width - pw);
        let py0 = rng.random_range(0..height - ph);
        let l = rng.random_range(0.25..0.6);
        let color = [0, 1, 2].map(|_| (l + rng.random_range(-0.08..0.08f64)).clamp(0.0, 1.0));
        for y in py0..py0 + ph {
            for x in px0..px0 + pw {
                img.set_pixel(x, y, color);
            }
        }
    }
    img
}

/// Object state for one frame: center and scale factor.
#[derive(Clone, Copy, Debug)]
struct State {
    cx: f64,
    cy: f64,
    scale: f64,
}

/// Reflects `c` so that `[c - half, c + half]` stays within `[1, limit - 1]`.
fn reflect(c: &mut f64, v: &mut f64, half: f64, limit: f64) {
    let lo = 1.0 + half;
    let hi = limit - 1.0 - half;
    if *c < lo {
        *c = 2.0 * lo - *c;
        *v = -*v;
    } else if *c > hi {
        *c = 2.0 * hi - *c;
        *v = -*v;
    }
    *c = c.clamp(lo, hi);
}

/// Renders a deterministic sequence with exact groundtruth.
pub fn synth_scene(cfg: &SceneConfig) -> Result<(Vec<Image>, Vec<XywhBox>)> {
    if cfg.frames < 2 {
        return Err(Error::Config(format!("need at least 2 frames, got {}", cfg.frames)));
    }
    if !(cfg.object_w > 0.0 && cfg.object_h > 0.0) {
        return Err(Error::Config("object size must be positive".into()));
    }
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    if cfg.object_w * MAX_SCALE + 2.0 >= fw || cfg.object_h * MAX_SCALE + 2.0 >= fh {
        return Err(Error::Config(format!(
            "object {}x{} does not fit in a {}x{} frame",
            cfg.object_w, cfg.object_h, cfg.width, cfg.height
        )));
    }
    let bg = background(cfg.width, cfg.height, cfg.background_seed);
    let texture = Texture::sample(&mut ChaCha8Rng::seed_from_u64(cfg.texture_seed));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let half_w = 0.5 * cfg.object_w * MAX_SCALE;
    let half_h = 0.5 * cfg.object_h * MAX_SCALE;
    let mut state = State {
        cx: rng.random_range(1.0 + half_w..fw - 1.0 - half_w),
        cy: rng.random_range(1.0 + half_h..fh - 1.0 - half_h),
        scale: 1.0,
    };
    let mut v = (0.0, 0.0);
    let vel_noise = (cfg.velocity_sigma > 0.0).then(|| Normal::new(0.0, cfg.velocity_sigma).unwrap());
    let scale_noise = (cfg.scale_sigma > 0.0).then(|| Normal::new(0.0, cfg.scale_sigma).unwrap());

    let mut images = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            if let Some(n) = &vel_noise {
                v.0 = VELOCITY_DAMPING * v.0 + n.sample(&mut rng);
                v.1 = VELOCITY_DAMPING * v.1 + n.sample(&mut rng);
            }
            if let Some(n) = &scale_noise {
                state.scale = (state.scale * n.sample(&mut rng).exp()).clamp(MIN_SCALE, MAX_SCALE);
            }
            state.cx += v.0;
            state.cy += v.1;
        }
        let w = cfg.object_w * state.scale;
        let h = cfg.object_h * state.scale;
        reflect(&mut state.cx, &mut v.0, 0.5 * w, fw);
        reflect(&mut state.cy, &mut v.1, 0.5 * h, fh);

        let gt = XywhBox::from_center(state.cx, state.cy, w, h);
        let mut img = bg.clone();
        let x_lo = gt.x.floor().max(0.0) as usize;
        let x_hi = ((gt.x + w).ceil() as usize).min(cfg.width);
        let y_lo = gt.y.floor().max(0.0) as usize;
        let y_hi = ((gt.y + h).ceil() as usize).min(cfg.height);
        for y in y_lo..y_hi {
            let vv = (y as f64 + 0.5 - gt.y) / h;
            if !(0.0..=1.0).contains(&vv) {
                continue;
            }
            for x in x_lo..x_hi {
                let u = (x as f64 + 0.5 - gt.x) / w;
                if !(0.0..=1.0).contains(&u) {
                    continue;
                }
                let inside = match cfg.shape {
                    ObjectShape::Rectangle => true,
                    ObjectShape::Ellipse => (2.0 * u - 1.0).powi(2) + (2.0 * vv - 1.0).powi(2) <= 1.0,
                };
                if inside {
                    img.set_pixel(x, y, texture.at(u, vv));
                }
            }
        }
        images.push(img);
        boxes.push(gt);
    }
    Ok((images, boxes))
}

/// Parameters for a whole synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    pub seed: u64,
    pub night: bool,
    pub width: usize,
    pub height: usize,
}

impl DatasetSpec {
    pub fn new(sequences: usize, frames: usize, seed: u64, night: bool) -> Self {
        Self {
            sequences,
            frames,
            seed,
            night,
            width: 128,
            height: 128,
        }
    }
}

/// Scene configuration of sequence `index`; identical for day and night variants.
pub fn scene_for(spec: &DatasetSpec, index: usize) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let side = spec.width.min(spec.height) as f64;
    let base = rng.random_range(0.09..0.16) * side;
    let aspect: f64 = rng.random_range(0.7..1.4);
    SceneConfig {
        width: spec.width,
        height: spec.height,
        frames: spec.frames,
        shape: if rng.random_bool(0.5) {
            ObjectShape::Rectangle
        } else {
            ObjectShape::Ellipse
        },
        object_w: base * aspect.sqrt(),
        object_h: base / aspect.sqrt(),
        texture_seed: rng.random(),
        background_seed: rng.random(),
        velocity_sigma: rng.random_range(0.3..1.5),
        scale_sigma: rng.random_range(0.0..0.03),
        seed: rng.random(),
    }
}

/// Darkening parameters of sequence `index` in a night dataset.
pub fn darken_for(spec: &DatasetSpec, index: usize) -> DarkenParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed ^ 0x6e69_6768_74, index as u64));
    DarkenParams::sample(&mut rng)
}

fn motion_attributes(boxes: &[XywhBox]) -> Vec<String> {
    let mut tags = Vec::new();
    let areas: Vec<f64> = boxes.iter().map(|b| (b.w * b.h).sqrt()).collect();
    let (lo, hi) = areas
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    if hi / lo > 1.2 {
        tags.push(TAG_SCALE_VARIATION.to_string());
    }
    let fast = boxes.windows(2).any(|w| {
        let (ax, ay) = w[0].center();
        let (bx, by) = w[1].center();
        (ax - bx).hypot(ay - by) > 0.2 * w[0].w.min(w[0].h)
    });
    if fast {
        tags.push(TAG_FAST_MOTION.to_string());
    }
    tags
}

/// Builds sequence `index` of `spec`.
pub fn generate_sequence(spec: &DatasetSpec, index: usize) -> Result<Sequence> {
    let scene = scene_for(spec, index);
    let (images, groundtruth) = synth_scene(&scene)?;
    let mut attributes = motion_attributes(&groundtruth);
    let frames = if spec.night {
        attributes.insert(0, TAG_LOW_LIGHT.to_string());
        let params = darken_for(spec, index);
        images
            .iter()
            .enumerate()
            .map(|(t, img)| {
                let p = DarkenParams {
                    seed: derive_seed(params.seed, t as u64),
                    ..params
                };
                darken(img, &p).map(|d| d.to_frame())
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        images.iter().map(Image::to_frame).collect()
    };
    Ok(Sequence {
        name: format!("seq{index:03}"),
        frames,
        groundtruth,
        attributes,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sequence>> {
    (0..spec.sequences).map(|i| generate_sequence(spec, i)).collect()
}
