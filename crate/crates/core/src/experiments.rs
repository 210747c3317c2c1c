//! Inference-only drivers: embedding interpolation, noise sweep, switch
//! sweep, and switch/mask statistics. None of them touch model weights.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{color_threshold_mask, iou, ToySample};
use crate::embedding::{interpolate, TextEmbedding};
use crate::error::{Error, Result};
use crate::generator::{GenOutput, Generator, SwitchOverride};
use crate::imageio;
use crate::losses::{background_selector, SelectorConfig};

/// One generated image with its mask, at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub label: String,
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Array3<f32>,
    /// `[1, H, W]` in `[0, 1]`.
    pub mask: Array3<f32>,
}

/// Generates a single sample; every driver goes through here so that a
/// direct call and a driver step are the same computation.
pub fn generate_one(
    gen: &Generator<f32>,
    b: &Array3<f32>,
    phi: &TextEmbedding,
    z: &Array1<f32>,
    eps: &Array1<f32>,
    ov: &SwitchOverride,
) -> Result<GenOutput<f32>> {
    let hp = gen.hyperparams();
    if phi.dim() != hp.text_dim {
        return Err(Error::DimensionMismatch {
            expected: hp.text_dim,
            found: phi.dim(),
        });
    }
    let row = |v: &Array1<f32>| v.clone().insert_axis(Axis(0));
    let phi = Array2::from_shape_vec((1, phi.dim()), phi.values.clone()).expect("row vector");
    gen.generate_from_text(&b.clone().insert_axis(Axis(0)), &phi, &row(eps), &row(z), ov)
}

fn frame(label: String, out: &GenOutput<f32>) -> Frame {
    Frame {
        label,
        image: out.image.index_axis(Axis(0), 0).to_owned(),
        mask: out.mask.index_axis(Axis(0), 0).to_owned(),
    }
}

fn finite_in_range(f: &Frame) -> bool {
    f.image.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
        && f.mask.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
}

fn l2(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    match s.len() {
        0 => 0.0,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationMetrics {
    pub alphas: Vec<f64>,
    /// L2 distance between consecutive output images.
    pub step_deltas: Vec<f64>,
    pub max_delta: f64,
    pub median_delta: f64,
    pub all_finite_in_range: bool,
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub frames: Vec<Frame>,
    pub metrics: InterpolationMetrics,
}

/// Outputs along `(1 − α)·φ₁ + α·φ₂` for `α = i / (steps − 1)`.
pub fn run_interpolation(
    gen: &Generator<f32>,
    b: &Array3<f32>,
    phi1: &TextEmbedding,
    phi2: &TextEmbedding,
    z: &Array1<f32>,
    eps: &Array1<f32>,
    steps: usize,
) -> Result<Interpolation> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let mut frames = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = i as f64 / (steps - 1) as f64;
        let phi = interpolate(phi1, phi2, alpha)?;
        let out = generate_one(gen, b, &phi, z, eps, &SwitchOverride::Learned)?;
        frames.push(frame(format!("alpha={alpha:.3}"), &out));
        alphas.push(alpha);
    }
    let step_deltas: Vec<f64> = frames.windows(2).map(|w| l2(&w[0].image, &w[1].image)).collect();
    let metrics = InterpolationMetrics {
        max_delta: step_deltas.iter().cloned().fold(0.0, f64::max),
        median_delta: median(&step_deltas),
        all_finite_in_range: frames.iter().all(finite_in_range),
        alphas,
        step_deltas,
    };
    Ok(Interpolation { frames, metrics })
}

/// `z = α·1` for `α = i / (steps − 1)`, with `(b, φ, ε)` fixed.
pub fn run_noise_sweep(
    gen: &Generator<f32>,
    b: &Array3<f32>,
    phi: &TextEmbedding,
    eps: &Array1<f32>,
    steps: usize,
) -> Result<Vec<Frame>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("noise sweep needs at least 2 steps, got {steps}")));
    }
    let zd = gen.hyperparams().z_dim;
    (0..steps)
        .map(|i| {
            let alpha = i as f32 / (steps - 1) as f32;
            let z = Array1::from_elem(zd, alpha);
            let out = generate_one(gen, b, phi, &z, eps, &SwitchOverride::Learned)?;
            Ok(frame(format!("z={alpha:.3}"), &out))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSweepEntry {
    pub label: String,
    /// Constant switch value, absent for the learned switch.
    pub constant: Option<f64>,
    /// Background L1 against `b`, over the selector of the learned output's mask.
    pub background_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSweepMetrics {
    pub entries: Vec<SwitchSweepEntry>,
}

#[derive(Debug, Clone)]
pub struct SwitchSweep {
    pub frames: Vec<Frame>,
    pub metrics: SwitchSweepMetrics,
}

/// Background L1 of one `[3, H, W]` image over a `[1, H, W]` selector.
fn selected_l1(x: &Array3<f32>, b: &Array3<f32>, sel: &Array3<f32>) -> f64 {
    let mut acc = 0.0;
    for c in 0..3 {
        for ((&xv, &bv), &s) in x
            .index_axis(Axis(0), c)
            .iter()
            .zip(b.index_axis(Axis(0), c).iter())
            .zip(sel.index_axis(Axis(0), 0).iter())
        {
            acc += ((xv - bv).abs() * s) as f64;
        }
    }
    acc
}

fn selector_of(mask: &Array3<f32>, cfg: &SelectorConfig) -> Result<Array3<f32>> {
    let m4 = mask.clone().insert_axis(Axis(0));
    Ok(background_selector(&m4, cfg)?.index_axis(Axis(0), 0).to_owned())
}

/// Outputs with all switches at 0, 0.5, 1 and learned.
pub fn run_switch_sweep(
    gen: &Generator<f32>,
    b: &Array3<f32>,
    phi: &TextEmbedding,
    z: &Array1<f32>,
    eps: &Array1<f32>,
    selector: &SelectorConfig,
) -> Result<SwitchSweep> {
    let learned = generate_one(gen, b, phi, z, eps, &SwitchOverride::Learned)?;
    let learned = frame("learned".into(), &learned);
    let sel = selector_of(&learned.mask, selector)?;
    let mut frames = Vec::new();
    let mut entries = Vec::new();
    for (label, c) in [("off", 0.0), ("half", 0.5), ("on", 1.0)] {
        let out = generate_one(gen, b, phi, z, eps, &SwitchOverride::Constant(c))?;
        let f = frame(label.into(), &out);
        entries.push(SwitchSweepEntry {
            label: label.into(),
            constant: Some(c),
            background_l1: selected_l1(&f.image, b, &sel),
        });
        frames.push(f);
    }
    entries.push(SwitchSweepEntry {
        label: "learned".into(),
        constant: None,
        background_l1: selected_l1(&learned.image, b, &sel),
    });
    frames.push(learned);
    Ok(SwitchSweep {
        frames,
        metrics: SwitchSweepMetrics { entries },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchStats {
    pub mean_in: Option<f64>,
    pub mean_out: Option<f64>,
    /// `mean_in − mean_out`; absent when either region is empty.
    pub gap: Option<f64>,
}

/// Channel-mean switch activation inside and outside the object mask.
/// `switch: [C, h, w]` is nearest-resized to the mask's `[1, H, W]`.
pub fn switch_mask_stats(switch: &Array3<f32>, true_mask: &Array3<f32>) -> Result<SwitchStats> {
    if true_mask.shape()[0] != 1 {
        return Err(Error::Shape(format!("mask must have one channel, got {:?}", true_mask.shape())));
    }
    let (_, h, w) = true_mask.dim();
    let mean = switch.mean_axis(Axis(0)).expect("non-empty channels").insert_axis(Axis(0));
    let resized = imageio::resize_nearest(mean.view(), h, w);
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in resized.iter().zip(true_mask.iter()) {
        if m >= 0.5 {
            sin += v as f64;
            nin += 1;
        } else {
            sout += v as f64;
            nout += 1;
        }
    }
    let mean_in = (nin > 0).then(|| sin / nin as f64);
    let mean_out = (nout > 0).then(|| sout / nout as f64);
    let gap = mean_in.zip(mean_out).map(|(a, b)| a - b);
    Ok(SwitchStats { mean_in, mean_out, gap })
}

/// Mechanism statistics of a generator on held-out toy samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEval {
    /// Mean background L1 against each sample's clean background, over the
    /// selector of its true mask.
    pub background_l1: f64,
    /// Same, with every switch forced off.
    pub background_l1_off: f64,
    /// Mean last-block switch gap over samples with both regions non-empty.
    pub switch_gap: f64,
    /// Mean IoU of the generated mask against the color-threshold detector on the generated image.
    pub mask_iou: f64,
    pub samples: usize,
}

/// Chroma threshold of the toy object detector.
pub const DETECTOR_CHROMA: f32 = 0.4;

/// Generates every sample on its own clean background with its own caption.
/// Noise is drawn from `seed` so evaluations are repeatable.
pub fn evaluate_toy(
    gen: &Generator<f32>,
    samples: &[ToySample],
    seed: u64,
    selector: &SelectorConfig,
    chunk: usize,
) -> Result<ToyEval> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no evaluation samples".into()));
    }
    let hp = gen.hyperparams();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut l1, mut l1_off, mut gap_sum, mut gap_n, mut iou_sum) = (0.0, 0.0, 0.0, 0usize, 0.0);
    for part in samples.chunks(chunk.max(1)) {
        let n = part.len();
        let stack = |f: &dyn Fn(&ToySample) -> &Array3<f32>| -> Array4<f32> {
            let views: Vec<_> = part.iter().map(|t| f(t).view()).collect();
            ndarray::stack(Axis(0), &views).expect("equal shapes")
        };
        let b = stack(&|t| &t.background);
        let m = stack(&|t| &t.sample.mask);
        let mut phi = Array2::zeros((n, hp.text_dim));
        for (i, t) in part.iter().enumerate() {
            phi.row_mut(i).assign(&Array1::from(t.sample.embedding.values.clone()));
        }
        let z = Array2::from_shape_simple_fn((n, hp.z_dim), || StandardNormal.sample(&mut rng));
        let eps = Array2::from_shape_simple_fn((n, hp.code_dim), || StandardNormal.sample(&mut rng));
        let out = gen.generate_from_text(&b, &phi, &eps, &z, &SwitchOverride::Learned)?;
        let off = gen.generate_from_text(&b, &phi, &eps, &z, &SwitchOverride::Constant(0.0))?;
        let sel = background_selector(&m, selector)?;
        let last = out.switches.last().expect("at least one block");
        for i in 0..n {
            let bi = b.index_axis(Axis(0), i).to_owned();
            let si = sel.index_axis(Axis(0), i).to_owned();
            l1 += selected_l1(&out.image.index_axis(Axis(0), i).to_owned(), &bi, &si);
            l1_off += selected_l1(&off.image.index_axis(Axis(0), i).to_owned(), &bi, &si);
            let st = switch_mask_stats(&last.index_axis(Axis(0), i).to_owned(), &m.index_axis(Axis(0), i).to_owned())?;
            if let Some(g) = st.gap {
                gap_sum += g;
                gap_n += 1;
            }
            let image = out.image.index_axis(Axis(0), i).to_owned();
            let detected = color_threshold_mask(&image, DETECTOR_CHROMA);
            let generated = out.mask.slice(s![i, 0, .., ..]).mapv(|v| v >= 0.5);
            iou_sum += iou(&generated, &detected);
        }
    }
    let k = samples.len() as f64;
    Ok(ToyEval {
        background_l1: l1 / k,
        background_l1_off: l1_off / k,
        switch_gap: if gap_n > 0 { gap_sum / gap_n as f64 } else { 0.0 },
        mask_iou: iou_sum / k,
        samples: samples.len(),
    })
}

/// Writes a labelled grid: generated images on the first row, masks on the second.
pub fn save_grid(frames: &[Frame], path: &Path) -> Result<()> {
    let mut tiles: Vec<Array3<f32>> = frames.iter().map(|f| f.image.clone()).collect();
    tiles.extend(frames.iter().map(|f| imageio::map_to_rgb(f.mask.view())));
    let g = imageio::grid(&tiles, frames.len(), 2)?;
    imageio::save_rgb(g.view(), path)
}

/// Serializes a metrics value as pretty JSON.
pub fn save_metrics<M: Serialize>(metrics: &M, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(metrics)?)?;
    Ok(())
}

/// Parses a metrics document, rejecting missing or unknown fields.
pub fn validate_metrics<M: for<'de> Deserialize<'de>>(json: &str) -> Result<M> {
    Ok(serde_json::from_str(json)?)
}
