//! Foundation training and prompt tuning.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::crop::{sample_pair, CropConfig, TrainingPair};
use crate::data::synth::{derive_seed, Sequence};
use crate::error::{Error, Result};
use crate::model::{AblationProfile, BackboneConfig, Tracker};
use crate::objective::LossWeights;
use crate::params::GradMap;
use crate::tensor::{AdamWConfig, AdamWState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Foundation,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// First epoch (0-based) trained at the decayed rate.
    pub decay_epoch: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub profile: AblationProfile,
    /// Largest template/search frame distance within a pair.
    pub max_frame_gap: usize,
    pub center_jitter: f64,
    pub scale_jitter: (f64, f64),
}

/// Decay at 80% of the schedule, matching 48 of 60.
pub fn default_decay_epoch(epochs: usize) -> usize {
    (epochs as f64 * 0.8).round() as usize
}

impl TrainConfig {
    pub fn foundation_default() -> Self {
        Self {
            stage: Stage::Foundation,
            epochs: 30,
            pairs_per_epoch: 1024,
            batch_size: 8,
            lr: 1e-3,
            lr_decay_factor: 10.0,
            decay_epoch: default_decay_epoch(30),
            weight_decay: 1e-4,
            clip_norm: 1.0,
            loss: LossWeights::default(),
            seed: 0,
            profile: AblationProfile::BASE,
            max_frame_gap: 10,
            center_jitter: 0.125,
            scale_jitter: (0.8, 1.2),
        }
    }

    pub fn prompt_default(profile: AblationProfile) -> Self {
        Self {
            stage: Stage::Prompt,
            epochs: 60,
            pairs_per_epoch: 256,
            batch_size: 16,
            lr: 4e-4,
            decay_epoch: default_decay_epoch(60),
            profile,
            ..Self::foundation_default()
        }
    }

    /// Sets the epoch count and moves the decay point to 80% of it.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.decay_epoch = default_decay_epoch(epochs);
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr
        } else {
            self.lr / self.lr_decay_factor
        }
    }

    pub fn crop(&self, model: &BackboneConfig) -> CropConfig {
        CropConfig {
            center_jitter: self.center_jitter,
            scale_jitter: self.scale_jitter,
            ..CropConfig::new(model.template_size, model.search_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return bad("batch_size and pairs_per_epoch must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor >= 1.0) {
            return bad("lr must be positive and lr_decay_factor at least 1");
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("clip_norm must be positive and weight_decay non-negative");
        }
        let (lo, hi) = self.scale_jitter;
        if !(lo > 0.0 && hi >= lo) || !(0.0..0.5).contains(&self.center_jitter) {
            return bad("scale_jitter must be a positive range and center_jitter in [0, 0.5)");
        }
        self.profile.validate()?;
        match self.stage {
            Stage::Foundation if self.profile != AblationProfile::BASE => {
                bad("foundation training uses the base profile")
            }
            Stage::Prompt if !self.profile.enable_dcp => {
                bad("the base profile has no trainable prompt parameters")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub tracker: Tracker,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Draws one pair: a random sequence, a random template frame and a search
/// frame at most `max_frame_gap` away.
pub fn draw_pair<R: Rng>(data: &[Sequence], cfg: &TrainConfig, crop: &CropConfig, rng: &mut R) -> Result<TrainingPair> {
    let seq = &data[rng.random_range(0..data.len())];
    let n = seq.len();
    let t = rng.random_range(0..n);
    let lo = t.saturating_sub(cfg.max_frame_gap);
    let hi = (t + cfg.max_frame_gap).min(n - 1);
    let s = rng.random_range(lo..=hi);
    sample_pair(seq, t, s, crop, Some(rng))
}

/// Jitter-free pairs drawn from `seed`, for loss measurements.
pub fn fixed_pairs(data: &[Sequence], cfg: &TrainConfig, model: &BackboneConfig, count: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    check_data(data)?;
    let crop = cfg.crop(model).without_jitter();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| draw_pair(data, cfg, &crop, &mut rng)).collect()
}

pub fn mean_loss(tracker: &Tracker, pairs: &[TrainingPair], weights: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        total += tracker.loss(&p.template, &p.search, &p.gt, weights)?.total;
    }
    Ok(total / pairs.len().max(1) as f64)
}

fn check_data(data: &[Sequence]) -> Result<()> {
    if data.is_empty() || data.iter().any(|s| s.len() < 2) {
        return Err(Error::Data("training needs at least one sequence of two or more frames".into()));
    }
    Ok(())
}

/// Runs the optimizer over every trainable parameter of `tracker`.
pub fn train(mut tracker: Tracker, data: &[Sequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data)?;
    let crop = cfg.crop(&tracker.config);
    let mut opt = AdamWState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64));
        let mut remaining = cfg.pairs_per_epoch;
        let mut loss_sum = 0.0;
        let mut step = 0;
        while remaining > 0 {
            let b = remaining.min(cfg.batch_size);
            remaining -= b;
            let mut grads = GradMap::new();
            for _ in 0..b {
                let pair = draw_pair(data, cfg, &crop, &mut rng)?;
                let (loss, g) = tracker
                    .loss_and_grads(&pair.template, &pair.search, &pair.gt, cfg.loss)
                    .map_err(|e| Error::Training {
                        epoch,
                        step,
                        message: e.to_string(),
                    })?;
                if !loss.total.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        step,
                        message: "non-finite loss".into(),
                    });
                }
                loss_sum += loss.total;
                grads.merge(&g);
            }
            grads.scale(1.0 / b as f64);
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut tracker.params, &grads, lr)?;
            step += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / cfg.pairs_per_epoch as f64,
            lr,
        });
    }
    Ok(TrainOutcome {
        tracker,
        log,
        steps: opt.step_count(),
    })
}

/// Trains a freshly initialized foundation model.
pub fn train_foundation(model: &BackboneConfig, data: &[Sequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Foundation {
        return Err(Error::Config("train_foundation needs a foundation-stage config".into()));
    }
    let tracker = Tracker::foundation(model.clone(), derive_seed(cfg.seed, 0))?;
    train(tracker, data, cfg)
}

/// Attaches zero-start prompts for `cfg.profile` to `base`, freezes the
/// backbone and head, and trains only the prompts. Any change to a frozen
/// value is reported as a freeze violation.
pub fn prompt_tune(base: &Tracker, data: &[Sequence], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Prompt {
        return Err(Error::Config("prompt_tune needs a prompt-stage config".into()));
    }
    cfg.validate()?;
    let mut tracker = base.clone().with_prompts(cfg.profile, derive_seed(cfg.seed, 0))?;
    tracker.params.set_frozen_where(|p| p.tag.is_foundation());
    let outcome = train(tracker, data, cfg)?;
    for (before, after) in base.params.iter().zip(outcome.tracker.params.iter()) {
        let same = before.name == after.name
            && before
                .value
                .data()
                .iter()
                .zip(after.value.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FreezeViolation {
                name: before.name.clone(),
            });
        }
    }
    Ok(outcome)
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,mean_loss,lr\n");
    for e in log {
        text.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.lr));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, DatasetSpec};

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::prompt_default(AblationProfile::FULL);
        assert_eq!(cfg.decay_epoch, 48);
        assert_eq!(cfg.lr_at(47), 4e-4);
        assert_eq!(cfg.lr_at(48), 4e-4 / 10.0);
        assert_eq!(cfg.clone().with_epochs(10).decay_epoch, 8);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig::prompt_default(AblationProfile::BASE).validate().is_err());
        let mut c = TrainConfig::foundation_default();
        c.profile = AblationProfile::FULL;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::foundation_default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn tiny_setup() -> (BackboneConfig, Vec<Sequence>) {
        let mut spec = DatasetSpec::new(2, 8, 3, false);
        spec.width = 64;
        spec.height = 64;
        (BackboneConfig::tiny(), generate_dataset(&spec).unwrap())
    }

    fn quick(stage: Stage, epochs: usize) -> TrainConfig {
        let base = match stage {
            Stage::Foundation => TrainConfig::foundation_default(),
            Stage::Prompt => TrainConfig::prompt_default(AblationProfile::FULL),
        };
        TrainConfig {
            pairs_per_epoch: 16,
            batch_size: 8,
            lr: 3e-3,
            ..base.with_epochs(epochs)
        }
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let (model, data) = tiny_setup();
        let out = train_foundation(&model, &data, &quick(Stage::Foundation, 0)).unwrap();
        assert_eq!(out.tracker, Tracker::foundation(model, derive_seed(0, 0)).unwrap());
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let (model, data) = tiny_setup();
        let cfg = quick(Stage::Foundation, 2);
        let a = train_foundation(&model, &data, &cfg).unwrap();
        let b = train_foundation(&model, &data, &cfg).unwrap();
        assert_eq!(a.tracker, b.tracker);
        assert_eq!(a.log, b.log);
        assert_eq!(a.steps, 4);
    }

    #[test]
    fn prompt_tuning_touches_only_prompts() {
        let (model, data) = tiny_setup();
        let base = train_foundation(&model, &data, &quick(Stage::Foundation, 1)).unwrap().tracker;
        let out = prompt_tune(&base, &data, &quick(Stage::Prompt, 2)).unwrap();
        let init = base.clone().with_prompts(AblationProfile::FULL, derive_seed(0, 0)).unwrap();
        let mut changed = 0;
        for (a, b) in init.params.iter().zip(out.tracker.params.iter()) {
            if a.tag.is_foundation() {
                assert!(b.frozen);
                assert_eq!(a.value, b.value);
            } else if a.value != b.value {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn zero_prompt_steps_keep_base_output() {
        let (model, data) = tiny_setup();
        let base = Tracker::foundation(model, 5).unwrap();
        let out = prompt_tune(&base, &data, &quick(Stage::Prompt, 0)).unwrap();
        let pairs = fixed_pairs(&data, &quick(Stage::Prompt, 0), &base.config, 3, 1).unwrap();
        for p in &pairs {
            assert_eq!(base.predict(&p.template, &p.search).unwrap(), out.tracker.predict(&p.template, &p.search).unwrap());
        }
    }

    #[test]
    fn base_profile_cannot_be_tuned() {
        let (model, data) = tiny_setup();
        let base = Tracker::foundation(model, 5).unwrap();
        let cfg = TrainConfig {
            profile: AblationProfile::BASE,
            ..quick(Stage::Prompt, 1)
        };
        assert!(matches!(prompt_tune(&base, &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_log_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_epoch_log(&p, &[EpochLog { epoch: 0, mean_loss: 1.5, lr: 0.001 }]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,mean_loss,lr\n0,1.5,0.001\n");
    }
}
