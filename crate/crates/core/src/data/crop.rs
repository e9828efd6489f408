//! Template / search region cropping for training pairs and tracking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, CoordFrame, XywhBox};
use crate::data::image::Image;
use crate::data::synth::Sequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub template_size: usize,
    pub search_size: usize,
    /// Template crop side as a multiple of `max(w, h)`.
    pub template_context: f64,
    /// Search crop side as a multiple of `max(w, h)`.
    pub search_context: f64,
    /// Uniform center shift bound, as a fraction of the search crop side.
    pub center_jitter: f64,
    pub scale_jitter: (f64, f64),
}

impl CropConfig {
    pub fn new(template_size: usize, search_size: usize) -> Self {
        Self {
            template_size,
            search_size,
            template_context: 2.0,
            search_context: 4.0,
            center_jitter: 0.125,
            scale_jitter: (0.8, 1.2),
        }
    }

    pub fn without_jitter(mut self) -> Self {
        self.center_jitter = 0.0;
        self.scale_jitter = (1.0, 1.0);
        self
    }
}

/// Square search window in full-frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl SearchWindow {
    /// Expresses a pixel box in normalized window coordinates.
    pub fn normalize(&self, b: &XywhBox) -> BBox {
        let x0 = self.cx - 0.5 * self.side;
        let y0 = self.cy - 0.5 * self.side;
        BBox::new(
            (b.x - x0) / self.side,
            (b.y - y0) / self.side,
            (b.x + b.w - x0) / self.side,
            (b.y + b.h - y0) / self.side,
            CoordFrame::Normalized,
        )
    }

    /// Maps a normalized box back to full-frame pixels.
    pub fn denormalize(&self, b: &BBox) -> BBox {
        let x0 = self.cx - 0.5 * self.side;
        let y0 = self.cy - 0.5 * self.side;
        BBox {
            x1: x0 + b.x1 * self.side,
            y1: y0 + b.y1 * self.side,
            x2: x0 + b.x2 * self.side,
            y2: y0 + b.y2 * self.side,
            frame: CoordFrame::Pixel,
            raw: b.raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub template: Image,
    pub search: Image,
    /// Groundtruth in normalized search-region coordinates.
    pub gt: BBox,
    pub window: SearchWindow,
}

fn check_box(b: &XywhBox) -> Result<()> {
    if !b.is_valid() {
        return Err(Error::Data(format!("degenerate groundtruth box {b:?}")));
    }
    Ok(())
}

/// Template crop of `template_context * max(w, h)` around `b`.
pub fn crop_template(frame: &Image, b: &XywhBox, cfg: &CropConfig) -> Result<Image> {
    check_box(b)?;
    let (cx, cy) = b.center();
    let side = cfg.template_context * b.w.max(b.h);
    Ok(frame.crop_square(cx, cy, side, cfg.template_size, frame.channel_mean()))
}

pub fn crop_search(frame: &Image, window: &SearchWindow, cfg: &CropConfig) -> Image {
    frame.crop_square(window.cx, window.cy, window.side, cfg.search_size, frame.channel_mean())
}

/// Builds a (template, search, normalized gt) triple from two frames of `seq`.
/// With `rng = None` no jitter is applied.
pub fn sample_pair<R: Rng + ?Sized>(
    seq: &Sequence,
    template_idx: usize,
    search_idx: usize,
    cfg: &CropConfig,
    rng: Option<&mut R>,
) -> Result<TrainingPair> {
    let n = seq.len();
    if template_idx >= n || search_idx >= n {
        return Err(Error::Data(format!(
            "frame index out of range for sequence `{}` of {n} frames",
            seq.name
        )));
    }
    let tb = seq.groundtruth[template_idx];
    let sb = seq.groundtruth[search_idx];
    check_box(&tb)?;
    check_box(&sb)?;

    let template = crop_template(&seq.frames[template_idx].to_image(), &tb, cfg)?;

    let (mut cx, mut cy) = sb.center();
    let mut side = cfg.search_context * sb.w.max(sb.h);
    if let Some(rng) = rng {
        let (lo, hi) = cfg.scale_jitter;
        if hi > lo {
            side *= rng.random_range(lo..hi);
        }
        if cfg.center_jitter > 0.0 {
            let j = cfg.center_jitter * side;
            cx += rng.random_range(-j..j);
            cy += rng.random_range(-j..j);
        }
    }
    let window = SearchWindow { cx, cy, side };
    let search = crop_search(&seq.frames[search_idx].to_image(), &window, cfg);
    Ok(TrainingPair {
        template,
        search,
        gt: window.normalize(&sb),
        window,
    })
}
