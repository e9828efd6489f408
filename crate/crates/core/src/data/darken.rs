//! Night-domain surrogate: gamma, brightness scale, desaturation and sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarkenParams {
    pub gamma: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub desaturation: f64,
    pub seed: u64,
}

impl DarkenParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            brightness: 1.0,
            noise_sigma: 0.0,
            desaturation: 0.0,
            seed: 0,
        }
    }

    /// Draws parameters from the nighttime ranges: gamma in `[2, 4]`,
    /// brightness in `[0.1, 0.4]`, noise sigma in `[0.01, 0.05]`,
    /// desaturation in `[0, 0.5]`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            gamma: rng.random_range(2.0..=4.0),
            brightness: rng.random_range(0.1..=0.4),
            noise_sigma: rng.random_range(0.01..=0.05),
            desaturation: rng.random_range(0.0..=0.5),
            seed: rng.random(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(Error::Config(format!("darkening gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.brightness > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("brightness must be > 0 and noise sigma >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.desaturation) {
            return Err(Error::Config("desaturation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `clip(brightness * desat(in)^gamma + noise)` per channel.
pub fn darken(img: &Image, params: &DarkenParams) -> Result<Image> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).expect("positive sigma"))
    } else {
        None
    };
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let luma = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            let desat = if params.desaturation > 0.0 {
                (1.0 - params.desaturation) * *v + params.desaturation * luma
            } else {
                *v
            };
            let mut d = params.brightness * desat.powf(params.gamma);
            if let Some(n) = &noise {
                d += n.sample(&mut rng);
            }
            *v = d.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
