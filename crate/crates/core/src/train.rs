//! Training samples, random-crop augmentation and the two-phase schedule.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, write_checkpoint, AdamConfig, AdamState, Tape, Tensor};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::groundtruth::{compute_gt, ErrorImage, GroundTruthConfig};
use crate::network::{FeatureSelection, InputNorm, Model, ModelOptions, NETWORK_STRIDE};
use crate::raster::FeatureImageSet;

/// Camera-mesh features of one view with the reference error as target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: FeatureImageSet,
    pub target: ErrorImage,
    pub frame: usize,
}

impl Sample {
    pub fn new(features: FeatureImageSet, target: ErrorImage, frame: usize) -> Result<Self> {
        if features.width() != target.width() || features.height() != target.height() {
            return Err(Error::Shape(format!(
                "features are {}x{}, target is {}x{}",
                features.width(),
                features.height(),
                target.width(),
                target.height()
            )));
        }
        if target
            .mask
            .data()
            .iter()
            .zip(features.mask.data())
            .any(|(&t, &f)| t && !f)
        {
            return Err(Error::Shape("target mask exceeds feature coverage".into()));
        }
        Ok(Self {
            features,
            target,
            frame,
        })
    }

    /// Sample with unit-scale ground truth from two renders of one view.
    pub fn from_renders(camera: FeatureImageSet, laser: &FeatureImageSet, frame: usize) -> Result<Self> {
        let target = compute_gt(&camera, laser, &GroundTruthConfig::default())?;
        Self::new(camera, target, frame)
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }

    pub fn height(&self) -> usize {
        self.features.height()
    }

    pub fn crop(&self, col0: usize, row0: usize, width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            features: self.features.crop(col0, row0, width, height)?,
            target: self.target.crop(col0, row0, width, height)?,
            frame: self.frame,
        })
    }

    /// Centred `width`×`height` window, as used for evaluation.
    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width() || height > self.height() {
            return Err(Error::Shape(format!(
                "cannot crop {}x{} to {width}x{height}",
                self.width(),
                self.height()
            )));
        }
        self.crop((self.width() - width) / 2, (self.height() - height) / 2, width, height)
    }

    /// Reference inverse depth recovered from the unit-scale target:
    /// `i_ref = i_cam - delta` on the target mask.
    pub fn reference_inverse_depth(&self) -> Vec<f64> {
        self.features
            .inverse_depth
            .data()
            .iter()
            .zip(self.target.delta.data())
            .zip(self.target.mask.data())
            .map(|((&ic, &d), &m)| if m { ic as f64 - d } else { 0.0 })
            .collect()
    }
}

/// Random `width`×`height` window of `sample`; returns the crop and its
/// `(row, col)` offset. The same offset applies to features and target.
pub fn augment_crop<R: Rng>(
    sample: &Sample,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<(Sample, (usize, usize))> {
    if width > sample.width() || height > sample.height() {
        return Err(Error::Shape(format!(
            "render {}x{} is smaller than crop {width}x{height}",
            sample.width(),
            sample.height()
        )));
    }
    let row = rng.random_range(0..=sample.height() - height);
    let col = rng.random_range(0..=sample.width() - width);
    Ok((sample.crop(col, row, width, height)?, (row, col)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1: Phase,
    pub phase2: Phase,
    pub fine_tune_epochs: usize,
    pub weight_decay: f64,
    pub crop_width: usize,
    pub crop_height: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            phase1: Phase {
                lr: 1e-4,
                epochs: 250,
            },
            phase2: Phase {
                lr: 1e-5,
                epochs: 50,
            },
            fine_tune_epochs: 50,
            weight_decay: 1e-6,
            crop_width: 96,
            crop_height: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reads the training keys from `cfg`, defaulting missing ones. Does not
    /// call [`KvConfig::finish`], so callers can share one file.
    pub fn from_kv(cfg: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let out = Self {
            batch_size: cfg.take_or("batch_size", d.batch_size)?,
            phase1: Phase {
                lr: cfg.take_or("phase1_lr", d.phase1.lr)?,
                epochs: cfg.take_or("phase1_epochs", d.phase1.epochs)?,
            },
            phase2: Phase {
                lr: cfg.take_or("phase2_lr", d.phase2.lr)?,
                epochs: cfg.take_or("phase2_epochs", d.phase2.epochs)?,
            },
            fine_tune_epochs: cfg.take_or("fine_tune_epochs", d.fine_tune_epochs)?,
            weight_decay: cfg.take_or("weight_decay", d.weight_decay)?,
            crop_width: cfg.take_or("crop_width", d.crop_width)?,
            crop_height: cfg.take_or("crop_height", d.crop_height)?,
            seed: cfg.take_or("seed", d.seed)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "batch_size = {}\nphase1_lr = {}\nphase1_epochs = {}\nphase2_lr = {}\nphase2_epochs = {}\n\
             fine_tune_epochs = {}\nweight_decay = {}\ncrop_width = {}\ncrop_height = {}\nseed = {}\n",
            self.batch_size,
            self.phase1.lr,
            self.phase1.epochs,
            self.phase2.lr,
            self.phase2.epochs,
            self.fine_tune_epochs,
            self.weight_decay,
            self.crop_width,
            self.crop_height,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !positive(self.phase1.lr) || !positive(self.phase2.lr) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::Config("weight_decay must lie in [0, 1)".into()));
        }
        if self.crop_width == 0 || self.crop_height == 0 || !self.crop_width.is_multiple_of(NETWORK_STRIDE) || !self.crop_height.is_multiple_of(NETWORK_STRIDE) {
            return Err(Error::Config("crop size must be a positive multiple of 32".into()));
        }
        Ok(())
    }

    /// Optimizer steps per epoch for `n` samples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,phase,mean_loss,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{},{:e},{:e}\n", e.epoch, e.phase, e.mean_loss, e.lr));
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,phase,lr,loss\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{},{:e},{:e}\n", s.step, s.epoch, s.phase, s.lr, s.loss));
        }
        out
    }
}

fn check_dataset(data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    let first = data.first().ok_or_else(|| Error::Empty("training set is empty".into()))?;
    if data
        .iter()
        .any(|s| s.width() != first.width() || s.height() != first.height())
    {
        return Err(Error::Shape("training samples differ in size".into()));
    }
    if cfg.crop_width > first.width() || cfg.crop_height > first.height() {
        return Err(Error::Config(format!(
            "crop {}x{} exceeds render size {}x{}",
            cfg.crop_width,
            cfg.crop_height,
            first.width(),
            first.height()
        )));
    }
    Ok(())
}

struct Trainer<'a> {
    model: Model<f32>,
    adam: AdamState<f32>,
    adam_cfg: AdamConfig,
    rng: ChaCha8Rng,
    cfg: &'a TrainConfig,
    log: TrainLog,
    step: u64,
    epoch: usize,
}

impl Trainer<'_> {
    fn run_epoch(&mut self, data: &[Sample], phase: u8, lr: f64) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut crops = Vec::with_capacity(chunk.len());
            for &i in chunk {
                crops.push(augment_crop(&data[i], self.cfg.crop_width, self.cfg.crop_height, &mut self.rng)?.0);
            }
            let sets: Vec<&FeatureImageSet> = crops.iter().map(|c| &c.features).collect();
            let input = self.model.assemble_input(&sets, &[])?;
            let mut target = Vec::with_capacity(input.len());
            let mut mask = Vec::with_capacity(input.len());
            for c in &crops {
                target.extend(c.target.delta.data().iter().map(|&d| d as f32));
                mask.extend_from_slice(c.target.mask.data());
            }
            if !mask.iter().any(|&m| m) {
                // nothing to learn from; keep the step count aligned anyway
                self.log.steps.push(StepRecord {
                    step: self.step,
                    epoch: self.epoch,
                    phase,
                    lr,
                    loss: 0.0,
                });
                self.step += 1;
                continue;
            }
            let grads = {
                let mut tape = Tape::new(self.model.params());
                let x = tape.input(input);
                let (y, _) = self.model.forward(&mut tape, x)?;
                let l = tape.berhu(y, &target, &mask)?;
                let loss = tape.value(l).data()[0] as f64;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at step {} (epoch {})",
                        self.step, self.epoch
                    )));
                }
                self.log.steps.push(StepRecord {
                    step: self.step,
                    epoch: self.epoch,
                    phase,
                    lr,
                    loss,
                });
                total += loss;
                batches += 1;
                tape.backward(l).into_param_grads(self.model.params())
            };
            adam_step(self.model.params_mut(), &grads, &mut self.adam, &self.adam_cfg, lr)?;
            self.step += 1;
        }
        self.log.epochs.push(EpochRecord {
            epoch: self.epoch,
            phase,
            mean_loss: if batches == 0 { 0.0 } else { total / batches as f64 },
            lr,
        });
        self.epoch += 1;
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model<f32>,
    pub log: TrainLog,
    /// Checkpoints written at the end of each phase.
    pub checkpoints: Vec<PathBuf>,
}

fn save_phase(model: &Model<f32>, dir: Option<&Path>, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = dir {
        let path = dir.join(name);
        write_checkpoint(&path, &model.to_checkpoint())?;
        out.push(path);
    }
    Ok(())
}

/// Trains a fresh model: phase 1 then phase 2, one checkpoint per phase in
/// `checkpoint_dir` when given. A non-finite loss aborts the run; earlier
/// phase checkpoints stay on disk.
pub fn train(
    data: &[Sample],
    cfg: &TrainConfig,
    sel: FeatureSelection,
    checkpoint_dir: Option<&Path>,
) -> Result<Trained> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let mut model = Model::build_with(sel, cfg.seed, ModelOptions::default())?;
    let sets: Vec<&FeatureImageSet> = data.iter().map(|s| &s.features).collect();
    model.set_norm(InputNorm::fit(&sel, &sets))?;
    let mut t = Trainer {
        adam: AdamState::new(model.params()),
        model,
        adam_cfg: AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00),
        cfg,
        log: TrainLog::default(),
        step: 0,
        epoch: 0,
    };
    let mut checkpoints = Vec::new();
    for _ in 0..cfg.phase1.epochs {
        t.run_epoch(data, 1, cfg.phase1.lr)?;
    }
    save_phase(&t.model, checkpoint_dir, "phase1.ckpt", &mut checkpoints)?;
    for _ in 0..cfg.phase2.epochs {
        t.run_epoch(data, 2, cfg.phase2.lr)?;
    }
    save_phase(&t.model, checkpoint_dir, "phase2.ckpt", &mut checkpoints)?;
    Ok(Trained {
        model: t.model,
        log: t.log,
        checkpoints,
    })
}

/// Continues training `model` on a reduced feature set at the phase-2 rate
/// for `cfg.fine_tune_epochs` epochs. The optimizer state starts fresh.
pub fn fine_tune(
    model: &Model<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
    reduced: FeatureSelection,
) -> Result<Trained> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let model = model.drop_features(reduced)?;
    let mut t = Trainer {
        adam: AdamState::new(model.params()),
        model,
        adam_cfg: AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6674_756e_6500),
        cfg,
        log: TrainLog::default(),
        step: 0,
        epoch: 0,
    };
    for _ in 0..cfg.fine_tune_epochs {
        t.run_epoch(data, 3, cfg.phase2.lr)?;
    }
    Ok(Trained {
        model: t.model,
        log: t.log,
        checkpoints: Vec::new(),
    })
}

/// Leave-one-out over scene groups: for every group, trains on the others
/// and calls `evaluate` with the model and the held-out group.
pub fn leave_one_out<R>(
    groups: &[Vec<Sample>],
    cfg: &TrainConfig,
    sel: FeatureSelection,
    mut evaluate: impl FnMut(&Model<f32>, &[Sample]) -> Result<R>,
) -> Result<Vec<R>> {
    if groups.len() < 2 {
        return Err(Error::Config("leave-one-out needs at least two groups".into()));
    }
    let mut out = Vec::with_capacity(groups.len());
    for held in 0..groups.len() {
        let train_set: Vec<Sample> = groups
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != held)
            .flat_map(|(_, s)| s.iter().cloned())
            .collect();
        let trained = train(&train_set, cfg, sel, None)?;
        out.push(evaluate(&trained.model, &groups[held])?);
    }
    Ok(out)
}

/// Network predictions for `samples`, evaluated in batches of `batch`.
/// Kinds in `disabled` are fed as zeros. The mask of each prediction is the
/// feature coverage.
///
/// Frames whose sides are not multiples of the network stride are padded
/// at the bottom and right with uncovered pixels and cropped back.
pub fn predict_errors(
    model: &Model<f32>,
    features: &[&FeatureImageSet],
    disabled: &[crate::raster::FeatureKind],
    batch: usize,
) -> Result<Vec<ErrorImage>> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(batch.max(1)) {
        let padded: Vec<FeatureImageSet> = chunk.iter().map(|s| pad_to_stride(s)).collect();
        let refs: Vec<&FeatureImageSet> = padded.iter().collect();
        let input = model.assemble_input(&refs, disabled)?;
        let pred: Tensor<f32> = model.predict(&input)?;
        let [_, h, w, _] = pred.shape();
        for (set, values) in chunk.iter().zip(pred.data().chunks_exact(h * w)) {
            let mut delta = Vec::with_capacity(set.width() * set.height());
            for r in 0..set.height() {
                for c in 0..set.width() {
                    delta.push(if set.mask.get(c, r) { values[r * w + c] as f64 } else { 0.0 });
                }
            }
            out.push(ErrorImage {
                delta: crate::image::Image::from_vec(set.width(), set.height(), 1, delta)?,
                mask: set.mask.clone(),
            });
        }
    }
    Ok(out)
}

fn pad_to_stride(set: &FeatureImageSet) -> FeatureImageSet {
    let up = |n: usize| n.div_ceil(NETWORK_STRIDE) * NETWORK_STRIDE;
    let (w, h) = (up(set.width()), up(set.height()));
    if (w, h) == (set.width(), set.height()) {
        return set.clone();
    }
    let mut out = FeatureImageSet::empty(w, h);
    for kind in crate::raster::FeatureKind::ALL {
        let src = set.channel(kind);
        let dst = out.channel_mut(kind);
        for r in 0..set.height() {
            for c in 0..set.width() {
                dst.pixel_mut(c, r).copy_from_slice(src.pixel(c, r));
            }
        }
    }
    for r in 0..set.height() {
        for c in 0..set.width() {
            out.mask.set(c, r, set.mask.get(c, r));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn sample(w: usize, h: usize) -> Sample {
        let mut f = FeatureImageSet::empty(w, h);
        let mut t = ErrorImage::zeros(w, h);
        for r in 0..h {
            for c in 0..w {
                f.mask.set(c, r, true);
                f.inverse_depth.set(c, r, (r * 1000 + c) as f32);
                t.mask.set(c, r, (r + c) % 3 != 0);
                t.delta.set(c, r, (r * 1000 + c) as f64);
            }
        }
        Sample::new(f, t, 0).unwrap()
    }

    #[test]
    fn crop_of_equal_size_is_identity() {
        let s = sample(96, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, off) = augment_crop(&s, 96, 64, &mut rng).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(c, s);
    }

    #[test]
    fn crop_pixels_follow_offset() {
        let s = sample(104, 72);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (c, (dr, dc)) = augment_crop(&s, 96, 64, &mut rng).unwrap();
            for (r, col) in [(0, 0), (63, 95), (10, 40)] {
                assert_eq!(c.features.inverse_depth.get(col, r), s.features.inverse_depth.get(col + dc, r + dr));
                assert_eq!(c.target.delta.get(col, r), s.target.delta.get(col + dc, r + dr));
                assert_eq!(c.target.mask.get(col, r), s.target.mask.get(col + dc, r + dr));
            }
        }
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let s = sample(104, 72);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [[0usize; 9]; 9];
        let draws = 10_000;
        for _ in 0..draws {
            let row = rng.random_range(0..=s.height() - 64);
            let col = rng.random_range(0..=s.width() - 96);
            counts[row][col] += 1;
        }
        let expected = draws as f64 / 81.0;
        let chi2: f64 = counts
            .iter()
            .flatten()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(counts.iter().flatten().all(|&c| c > 0));
        // 99th percentile of chi-square with 80 degrees of freedom
        assert!(chi2 < 112.33, "chi2 = {chi2}");
    }

    #[test]
    fn sample_validation() {
        let mut f = FeatureImageSet::empty(2, 2);
        let mut t = ErrorImage::zeros(2, 2);
        t.mask.set(0, 0, true);
        assert!(Sample::new(f.clone(), t.clone(), 0).is_err());
        f.mask.set(0, 0, true);
        assert!(Sample::new(f.clone(), t, 0).is_ok());
        assert!(Sample::new(f, ErrorImage::zeros(3, 2), 0).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig {
            seed: 9,
            phase1: Phase { lr: 3e-4, epochs: 30 },
            ..Default::default()
        };
        let mut kv = KvConfig::parse(&cfg.to_config_string(), "t").unwrap();
        assert_eq!(TrainConfig::from_kv(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
        let mut kv = KvConfig::parse("crop_width = 100\n", "t").unwrap();
        assert!(TrainConfig::from_kv(&mut kv).is_err());
        assert_eq!(TrainConfig::default().steps_per_epoch(33), 3);
    }

    #[test]
    fn reference_inverse_depth_inverts_target() {
        let mut cam = FeatureImageSet::empty(2, 1);
        let mut laser = FeatureImageSet::empty(2, 1);
        for c in 0..2 {
            cam.mask.set(c, 0, true);
            laser.mask.set(c, 0, c == 0);
        }
        cam.inverse_depth = Image::from_vec(2, 1, 1, vec![0.5, 0.25]).unwrap();
        laser.inverse_depth = Image::from_vec(2, 1, 1, vec![0.375, 0.0]).unwrap();
        let s = Sample::from_renders(cam, &laser, 3).unwrap();
        assert_eq!(s.reference_inverse_depth(), vec![0.375, 0.0]);
    }
}
