//! Alternating discriminator/generator optimization over four-tuple batches.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mcgan_nn::{Adam, AdamConfig, Mode, Tape, BN_MOMENTUM};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::config::Hyperparams;
use crate::data::TrainingSet;
use crate::discriminator::{Discriminator, HeadScores};
use crate::error::{Error, Result};
use crate::generator::{Generator, Pass, SwitchOverride};
use crate::losses::{
    loss_d, loss_g, loss_g_no_mask, loss_no_mask_variant, GenTerms, SelectorConfig, TupleBatch, TupleScores,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub flip: bool,
    pub zoom: bool,
    pub crop: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flip: true,
            zoom: true,
            crop: true,
        }
    }
}

impl AugmentFlags {
    pub const OFF: AugmentFlags = AugmentFlags {
        flip: false,
        zoom: false,
        crop: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hyperparams: Hyperparams,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch: usize,
    pub epochs: u64,
    /// The learning rate halves every this many epochs.
    pub lr_decay_every: u64,
    pub seed: u64,
    pub augment: AugmentFlags,
    pub selector: SelectorConfig,
    /// Checkpoint interval in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Log every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyperparams: Hyperparams::default(),
            lr0: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch: 32,
            epochs: 200,
            lr_decay_every: 200,
            seed: 0,
            augment: AugmentFlags::default(),
            selector: SelectorConfig::default(),
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    /// Shapes dataset at 64×64; zoom and crop are off because the objects
    /// are already placed with jitter.
    pub fn toy() -> Self {
        TrainConfig {
            hyperparams: Hyperparams::toy(),
            augment: AugmentFlags {
                flip: true,
                zoom: false,
                crop: false,
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.selector.validate()?;
        if self.batch < 2 {
            return Err(Error::Config("batch size must be at least 2 for mismatching tuples".into()));
        }
        if !(self.lr0 >= 0.0) || self.lr_decay_every == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "learning rate must be non-negative and decay/log periods positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let c: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        c.validate()?;
        Ok(c)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }
}

/// `lr0 · 0.5^⌊epoch / period⌋`.
pub fn lr_schedule(epoch: u64, config: &TrainConfig) -> f64 {
    let halvings = (epoch / config.lr_decay_every.max(1)).min(1 << 20) as i32;
    config.lr0 * 0.5f64.powi(halvings)
}

/// Samples `src` at `(y, x)` with bilinear weights, clamping at the border.
fn bilinear_at(src: &Array3<f32>, c: usize, y: f64, x: f64) -> f32 {
    let (_, h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    if fy == 0.0 && fx == 0.0 {
        return src[[c, y0, x0]];
    }
    let top = src[[c, y0, x0]] * (1.0 - fx) + src[[c, y0, x1]] * fx;
    let bot = src[[c, y1, x0]] * (1.0 - fx) + src[[c, y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Random horizontal flip, zoom in `[1, 1.15]` about the center, and a shift
/// of at most 5% of the side. Image and mask get the same transform.
pub fn augment<R: Rng + ?Sized>(
    image: &Array3<f32>,
    mask: &Array3<f32>,
    rng: &mut R,
    flags: AugmentFlags,
) -> (Array3<f32>, Array3<f32>) {
    let (_, h, w) = image.dim();
    let flip = flags.flip && rng.random_bool(0.5);
    let zoom = if flags.zoom { rng.random_range(1.0..=1.15) } else { 1.0 };
    let (dy, dx) = if flags.crop {
        let jy = (0.05 * h as f64).floor() as i64;
        let jx = (0.05 * w as f64).floor() as i64;
        (rng.random_range(-jy..=jy) as f64, rng.random_range(-jx..=jx) as f64)
    } else {
        (0.0, 0.0)
    };
    if !flip && zoom == 1.0 && dy == 0.0 && dx == 0.0 {
        return (image.clone(), mask.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let source = |y: usize, x: usize| -> (f64, f64) {
        let x = if flip { (w - 1 - x) as f64 } else { x as f64 };
        ((y as f64 - cy) / zoom + cy + dy, (x - cx) / zoom + cx + dx)
    };
    let out_image = Array3::from_shape_fn(image.raw_dim(), |(c, y, x)| {
        let (sy, sx) = source(y, x);
        bilinear_at(image, c, sy, sx)
    });
    let out_mask = Array3::from_shape_fn(mask.raw_dim(), |(c, y, x)| {
        let (sy, sx) = source(y, x);
        let sy = sy.round().clamp(0.0, (h - 1) as f64) as usize;
        let sx = sx.round().clamp(0.0, (w - 1) as f64) as usize;
        mask[[c, sy, sx]]
    });
    (out_image, out_mask)
}

/// For each `i`, the nearest later index (cyclically) whose id differs; `i + 1` if none does.
pub fn derangement(ids: &[String]) -> Result<Vec<usize>> {
    let n = ids.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mismatching tuples need a batch of at least 2, got {n}")));
    }
    Ok((0..n)
        .map(|i| {
            (1..n)
                .map(|k| (i + k) % n)
                .find(|&j| ids[j] != ids[i])
                .unwrap_or((i + 1) % n)
        })
        .collect())
}

fn stack3(parts: &[Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

fn normal2<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f32, _>(StandardNormal))
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    #[serde(rename = "L_D1")]
    pub d1: f64,
    #[serde(rename = "L_D2")]
    pub d2: f64,
    #[serde(rename = "L_D3")]
    pub d3: f64,
    #[serde(rename = "L_G")]
    pub g: f64,
    #[serde(rename = "KL")]
    pub kl: f64,
    #[serde(rename = "L1_bg")]
    pub l1_bg: f64,
}

impl StepLosses {
    fn all_finite(&self) -> bool {
        [self.d1, self.d2, self.d3, self.g, self.kl, self.l1_bg]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
    /// Seconds since the run started.
    pub wallclock: f64,
}

/// Networks, optimizer moments and counters; everything needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub epoch: u64,
    pub step: u64,
    pub batch_in_epoch: u64,
}

/// Where and how long a run goes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `train_log.ndjson` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    /// Stop before this global step.
    pub stop_at_step: Option<u64>,
}

const STREAM_EPOCH: u64 = 1 << 40;

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.hyperparams.clone(), &mut rng)?;
        let discriminator = Discriminator::new(config.hyperparams.clone(), &mut rng)?;
        let adam = config.adam();
        Ok(TrainState {
            config,
            generator,
            discriminator,
            adam_g: Adam::new(adam),
            adam_d: Adam::new(adam),
            epoch: 0,
            step: 0,
            batch_in_epoch: 0,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            hyperparams: self.config.hyperparams.clone(),
            generator: self.generator.params.clone(),
            discriminator: Some(self.discriminator.params.clone()),
            optimizers: Some((self.adam_g.clone(), self.adam_d.clone())),
            meta: Some(TrainMeta {
                epoch: self.epoch,
                step: self.step,
                batch_in_epoch: self.batch_in_epoch,
                adam_g_step: self.adam_g.step,
                adam_d_step: self.adam_d.step,
                config: serde_json::to_value(&self.config)?,
            }),
        })
    }

    /// Restores a training checkpoint. `config` overrides the stored one (e.g. more epochs)
    /// but must describe the same architecture.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let meta = ck
            .meta
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("not a training checkpoint (no state.json)".into()))?;
        let config = match config {
            Some(c) => c,
            None => serde_json::from_value(meta.config.clone())?,
        };
        config.validate()?;
        if config.hyperparams != ck.hyperparams {
            return Err(Error::Checkpoint("training config architecture differs from checkpoint".into()));
        }
        let (mut adam_g, mut adam_d) = ck
            .optimizers
            .clone()
            .ok_or_else(|| Error::Checkpoint("training checkpoint without optimizer state".into()))?;
        adam_g.config = config.adam();
        adam_d.config = config.adam();
        Ok(TrainState {
            generator: ck.generator()?,
            discriminator: ck.discriminator()?,
            adam_g,
            adam_d,
            epoch: meta.epoch,
            step: meta.step,
            batch_in_epoch: meta.batch_in_epoch,
            config,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.config.batch).max(usize::from(n >= 2)) as u64
    }

    fn batch_len(&self, n: usize) -> usize {
        self.config.batch.min(n)
    }

    /// Random generator for step `step`, independent of any earlier draw.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(step + 1);
        r
    }

    /// Sample order of `epoch`.
    pub fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(STREAM_EPOCH + epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        order
    }

    /// Real tuples of `indices`, in-batch mismatches, random bases and fresh noise.
    pub fn make_tuples<R: Rng + ?Sized>(
        &self,
        data: &TrainingSet,
        indices: &[usize],
        rng: &mut R,
    ) -> Result<(TupleBatch<f32>, Array2<f32>, Array2<f32>)> {
        make_tuples(data, indices, &self.config, rng)
    }

    /// One discriminator update on the sum of its losses, then one generator
    /// update through the updated discriminator.
    pub fn train_step(
        &mut self,
        batch: &TupleBatch<f32>,
        z: &Array2<f32>,
        eps: &Array2<f32>,
        lr: f64,
    ) -> Result<StepLosses> {
        batch.validate()?;
        let hp = self.config.hyperparams.clone();
        let tape = Tape::new();
        let c = |a: ndarray::ArrayD<f32>| tape.constant(a);
        let x1 = c(batch.x.clone().into_dyn());
        let s1 = c(batch.s.clone().into_dyn());
        let t1 = c(batch.t.clone().into_dyn());
        let t2 = c(batch.t_mismatch.clone().into_dyn());
        let s2 = c(batch.s_mismatch.clone().into_dyn());
        let b = c(batch.b.clone().into_dyn());
        let tf = c(batch.t_fake.clone().into_dyn());
        let zv = c(z.clone().into_dyn());
        let ev = c(eps.clone().into_dyn());

        let gpass = Pass::new(&tape, Mode::Train, true);
        let (ca, gv) = self
            .generator
            .forward(gpass, &b, &tf, &ev, &zv, &SwitchOverride::Learned)?;

        // Discriminator step on detached fakes.
        let d = &self.discriminator;
        let dpass = Pass::new(&tape, Mode::Train, true);
        let xg = gv.image.detach();
        let sg = gv.mask.detach();
        let tc1 = d.text_code(dpass, &t1)?;
        let tc2 = d.text_code(dpass, &t2)?;
        let tcf = d.text_code(dpass, &tf)?;
        let (dl_total, dvals) = if hp.with_mask {
            let real = d.score_all(dpass, &x1, Some(&s1), &tc1)?;
            let im_real = d.encode_image_mask(dpass, &x1, &s1)?;
            let mt = d.score_d3(dpass, &d.fuse_text(dpass, &im_real, &tc2)?)?;
            let im_mm = d.encode_image_mask(dpass, &x1, &s2)?;
            let mm2 = d.score_d2(dpass, &im_mm)?;
            let mm3 = d.score_d3(dpass, &d.fuse_text(dpass, &im_mm, &tc1)?)?;
            let fake = d.score_all(dpass, &xg, Some(&sg), &tcf)?;
            let sc = TupleScores {
                mismatch_text_d3: Some(mt),
                mismatch_mask_d2: Some(mm2),
                mismatch_mask_d3: Some(mm3),
                ..TupleScores::default()
            }
            .with_real(&real)
            .with_fake(&fake);
            let dl = loss_d(&sc)?;
            (dl.total(), [dl.d1.item(), dl.d2.item(), dl.d3.item()])
        } else {
            let real = d.score_all(dpass, &x1, None, &tc1)?;
            let image_code = d.encode_image(dpass, &x1)?;
            let mt = d.score_d3(dpass, &d.fuse_text(dpass, &image_code, &tc2)?)?;
            let fake = d.score_all(dpass, &xg, None, &tcf)?;
            let sc = TupleScores {
                mismatch_text_d3: Some(mt),
                ..TupleScores::default()
            }
            .with_real(&real)
            .with_fake(&fake);
            let (dl, _) = loss_no_mask_variant(&sc, &ca.mu, &ca.sigma, hp.lambda1, false)?;
            (dl.total(), [dl.d1.item(), dl.d2.item(), dl.d3.item()])
        };
        let d_total = dl_total.item() as f64;
        let dgrads = tape.backward(dl_total).by_name();

        // Generator step through the updated discriminator, whose weights stay fixed.
        let mut d_next = self.discriminator.clone();
        self.adam_d.update(&mut d_next.params, &dgrads, lr)?;
        let fpass = Pass::new(&tape, Mode::Train, false);
        let tcg = d_next.text_code(fpass, &tf)?;
        let fake: HeadScores<f32> = d_next.score_all(fpass, &gv.image, Some(&gv.mask), &tcg)?;
        let gl = if hp.with_mask {
            loss_g(
                &fake,
                &GenTerms {
                    mu: &ca.mu,
                    sigma: &ca.sigma,
                    x_g: &gv.image,
                    s_g: &gv.mask,
                    b: &b,
                },
                hp.lambda1,
                hp.lambda2,
                &self.config.selector,
            )?
        } else {
            loss_g_no_mask(&fake, &ca.mu, &ca.sigma, hp.lambda1)?
        };
        let losses = StepLosses {
            d1: dvals[0] as f64,
            d2: dvals[1] as f64,
            d3: dvals[2] as f64,
            g: gl.total.item() as f64,
            kl: gl.kl.item() as f64,
            l1_bg: gl.l1_bg.item() as f64,
        };
        if !losses.all_finite() || !d_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: serde_json::to_string(&losses)?,
            });
        }
        let ggrads = tape.backward(gl.total).by_name();
        let mut g_next = self.generator.clone();
        self.adam_g.update(&mut g_next.params, &ggrads, lr)?;
        let obs = tape.take_bn_observations();
        let momentum = BN_MOMENTUM as f32;
        g_next.params.apply_bn_observations(&obs, momentum);
        d_next.params.apply_bn_observations(&obs, momentum);
        self.generator = g_next;
        self.discriminator = d_next;
        Ok(losses)
    }

    /// Trains until `config.epochs` (or `opts.stop_at_step`), logging and checkpointing.
    /// `on_epoch` runs after every completed epoch.
    pub fn run(
        &mut self,
        data: &TrainingSet,
        opts: &RunOptions,
        mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<Vec<LogRecord>> {
        let n = data.len();
        if n < 2 || data.backgrounds.is_empty() {
            return Err(Error::InvalidArgument(
                "training needs at least two samples and one background".into(),
            ));
        }
        let spe = self.steps_per_epoch(n);
        let bl = self.batch_len(n);
        let mut log = match &opts.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.ndjson"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let start = Instant::now();
        let mut records = Vec::new();
        while self.epoch < self.config.epochs {
            let order = self.epoch_order(self.epoch, n);
            let lr = lr_schedule(self.epoch, &self.config);
            while self.batch_in_epoch < spe {
                if opts.stop_at_step.is_some_and(|s| self.step >= s) {
                    if let Some(l) = log.as_mut() {
                        l.flush()?;
                    }
                    return Ok(records);
                }
                let k = self.batch_in_epoch as usize;
                let indices = &order[k * bl..(k + 1) * bl];
                let mut rng = self.step_rng(self.step);
                let (batch, z, eps) = self.make_tuples(data, indices, &mut rng)?;
                let losses = match self.train_step(&batch, &z, &eps, lr) {
                    Ok(l) => l,
                    Err(e @ Error::NonFiniteLoss { .. }) => {
                        if let Some(dir) = &opts.out_dir {
                            let dump = dir.join("nonfinite_dump");
                            self.checkpoint()?.save(&dump)?;
                            log::error!("non-finite loss; state written to {}", dump.display());
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                self.step += 1;
                self.batch_in_epoch += 1;
                let rec = LogRecord {
                    step: self.step,
                    epoch: self.epoch,
                    lr,
                    losses,
                    wallclock: start.elapsed().as_secs_f64(),
                };
                if self.step % self.config.log_every == 0 {
                    if let Some(l) = log.as_mut() {
                        serde_json::to_writer(&mut *l, &rec)?;
                        l.write_all(b"\n")?;
                    }
                    log::info!(
                        "step {} epoch {} D {:.4}/{:.4}/{:.4} G {:.4} KL {:.4} L1 {:.2}",
                        rec.step,
                        rec.epoch,
                        losses.d1,
                        losses.d2,
                        losses.d3,
                        losses.g,
                        losses.kl,
                        losses.l1_bg
                    );
                }
                records.push(rec);
            }
            self.epoch += 1;
            self.batch_in_epoch = 0;
            if let Some(l) = log.as_mut() {
                l.flush()?;
            }
            if let Some(dir) = &opts.out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.epoch % every == 0 {
                    self.checkpoint()?
                        .save(&dir.join("checkpoints").join(format!("epoch-{:05}", self.epoch)))?;
                }
            }
            on_epoch(self)?;
        }
        if let Some(dir) = &opts.out_dir {
            self.checkpoint()?.save(&dir.join("checkpoints").join("final"))?;
        }
        Ok(records)
    }
}

/// Builds real, mismatching and fake-conditioning tuples for `indices`.
/// Returns the batch plus the noise `z: [B, Z]` and `ε: [B, C]` for the fakes.
pub fn make_tuples<R: Rng + ?Sized>(
    data: &TrainingSet,
    indices: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(TupleBatch<f32>, Array2<f32>, Array2<f32>)> {
    let n = indices.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("mismatching tuples need a batch of at least 2, got {n}")));
    }
    let hp = &config.hyperparams;
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for &i in indices {
        let (im, m) = augment(&data.images[i], &data.masks[i], rng, config.augment);
        images.push(im);
        masks.push(m);
        let caps = &data.captions[i];
        rows.push(caps[rng.random_range(0..caps.len())]);
    }
    let caption_ids: Vec<String> = rows.iter().map(|&r| data.caption_id(r)).collect();
    let mask_ids: Vec<String> = indices.iter().map(|&i| data.image_ids[i].clone()).collect();
    let text_perm = derangement(&caption_ids)?;
    let mask_perm = derangement(&mask_ids)?;
    let t = data.table.rows.select(Axis(0), &rows);
    if t.ncols() != hp.text_dim {
        return Err(Error::DimensionMismatch {
            expected: hp.text_dim,
            found: t.ncols(),
        });
    }
    let x = stack3(&images);
    let s = stack3(&masks);
    let t_mismatch = t.select(Axis(0), &text_perm);
    let s_mismatch = s.select(Axis(0), &mask_perm);
    let bases: Vec<Array3<f32>> = (0..n)
        .map(|_| data.backgrounds[rng.random_range(0..data.backgrounds.len())].clone())
        .collect();
    let b = stack3(&bases);
    if b.shape()[2..] != x.shape()[2..] {
        return Err(Error::Shape(format!("bases {:?} vs images {:?}", b.shape(), x.shape())));
    }
    let z = normal2(rng, n, hp.z_dim);
    let eps = normal2(rng, n, hp.code_dim);
    let batch = TupleBatch {
        t_fake: t.clone(),
        x,
        s,
        t,
        t_mismatch,
        s_mismatch,
        text_perm,
        mask_perm,
        caption_ids,
        mask_ids,
        b,
        x_fake: None,
        s_fake: None,
    };
    Ok((batch, z, eps))
}

/// Generated images and masks for a batch, in inference mode.
pub fn generate_fakes(
    generator: &Generator<f32>,
    batch: &TupleBatch<f32>,
    z: &Array2<f32>,
    eps: &Array2<f32>,
) -> Result<(Array4<f32>, Array4<f32>)> {
    let out = generator.generate_from_text(&batch.b, &batch.t_fake, eps, z, &SwitchOverride::Learned)?;
    Ok((out.image, out.mask))
}

/// Writes a log to an NDJSON file.
pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
