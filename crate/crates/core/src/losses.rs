//! Least-squares adversarial losses over the four tuple types, the
//! generator objective, and the eroded-background reconstruction term.

use mcgan_nn::{Float, Var};
use ndarray::{Array2, Array4, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::discriminator::HeadScores;
use crate::embedding::kl_divergence_var;
use crate::error::{Error, Result};

/// Parameters of the morphological background selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    /// Side of the square structuring element; odd.
    pub kernel: usize,
    pub iterations: usize,
    pub threshold: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            kernel: 3,
            iterations: 1,
            threshold: 0.5,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "erosion kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// One erosion pass with a `k×k` square; pixels outside the frame count as off.
pub fn erode(map: &Array2<bool>, k: usize) -> Array2<bool> {
    let (h, w) = map.dim();
    let r = k / 2;
    // Separable: a square window is off iff some row-run or column-run is off.
    let mut rows = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            rows[[i, j]] = j >= r && j + r < w && (j - r..=j + r).all(|jj| map[[i, jj]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = i >= r && i + r < h && (i - r..=i + r).all(|ii| rows[[ii, j]]);
        }
    }
    out
}

/// Background selector for one mask `[H, W]`: threshold, complement, erode.
pub fn background_selector_map<T: Float>(s: &Array2<T>, cfg: &SelectorConfig) -> Result<Array2<bool>> {
    cfg.validate()?;
    let theta = T::of(cfg.threshold);
    let mut bg = s.mapv(|v| v < theta);
    for _ in 0..cfg.iterations {
        bg = erode(&bg, cfg.kernel);
    }
    Ok(bg)
}

/// Batched selector: `s: [B, 1, H, W]` → `{0, 1}` map of the same shape.
pub fn background_selector<T: Float>(s: &Array4<T>, cfg: &SelectorConfig) -> Result<Array4<T>> {
    if s.shape()[1] != 1 {
        return Err(Error::Shape(format!("mask must have one channel, got {:?}", s.shape())));
    }
    let mut out = Array4::zeros(s.raw_dim());
    for (src, mut dst) in s.outer_iter().zip(out.outer_iter_mut()) {
        let plane = src.index_axis(Axis(0), 0).to_owned();
        let sel = background_selector_map(&plane, cfg)?;
        dst.index_axis_mut(Axis(0), 0)
            .zip_mut_with(&sel, |d, &b| *d = if b { T::one() } else { T::zero() });
    }
    Ok(out)
}

/// `Σ |x − b| ⊙ sel` over pixels and channels, divided by the batch size.
/// `sel` is `[B, 1, H, W]` and carries no gradient.
pub fn l1_background<'t, T: Float>(x: &Var<'t, T>, b: &Var<'t, T>, sel: &Array4<T>) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if xs != b.shape() || xs.len() != 4 || xs[1] != 3 {
        return Err(Error::Shape(format!(
            "l1 background: image {:?} vs base {:?}",
            xs,
            b.shape()
        )));
    }
    if sel.shape() != [xs[0], 1, xs[2], xs[3]] {
        return Err(Error::Shape(format!(
            "selector {:?} does not match image {:?}",
            sel.shape(),
            xs
        )));
    }
    let wide: ArrayD<T> = sel
        .broadcast((xs[0], 3, xs[2], xs[3]))
        .expect("selector broadcast")
        .to_owned()
        .into_dyn();
    let mask = x.tape().constant(wide);
    let batch = T::of(xs[0].max(1) as f64);
    Ok(x.sub(b).abs().mul(&mask).sum().scale(T::one() / batch))
}

/// Real tuples, mismatching tuples and fakes for one discriminator update.
/// Caption and mask identities are kept so the derangement can be checked.
#[derive(Debug, Clone)]
pub struct TupleBatch<T: Float> {
    /// Real images `[B, 3, H, W]`.
    pub x: Array4<T>,
    /// Matching masks `[B, 1, H, W]`.
    pub s: Array4<T>,
    /// Matching captions `[B, E]`.
    pub t: Array2<T>,
    /// Mismatching captions: caption `i` comes from `text_perm[i]`.
    pub t_mismatch: Array2<T>,
    /// Mismatching masks, taken from `mask_perm[i]`.
    pub s_mismatch: Array4<T>,
    pub text_perm: Vec<usize>,
    pub mask_perm: Vec<usize>,
    pub caption_ids: Vec<String>,
    pub mask_ids: Vec<String>,
    /// Base images the fakes are painted on.
    pub b: Array4<T>,
    /// Captions conditioning the fakes.
    pub t_fake: Array2<T>,
    /// Generated images and masks, if already produced.
    pub x_fake: Option<Array4<T>>,
    pub s_fake: Option<Array4<T>>,
}

impl<T: Float> TupleBatch<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every class has the same length and no real tuple is paired with its own caption or mask.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.s.shape()[0],
            self.t.nrows(),
            self.t_mismatch.nrows(),
            self.s_mismatch.shape()[0],
            self.b.shape()[0],
            self.t_fake.nrows(),
            self.text_perm.len(),
            self.mask_perm.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Shape(format!("tuple classes of unequal length: {n} vs {lens:?}")));
        }
        for i in 0..n {
            let (ti, mi) = (self.text_perm[i], self.mask_perm[i]);
            if ti == i || mi == i {
                return Err(Error::InvalidArgument(format!("tuple {i} paired with itself")));
            }
            if let (Some(a), Some(b)) = (self.caption_ids.get(i), self.caption_ids.get(ti)) {
                if a == b {
                    return Err(Error::InvalidArgument(format!("tuple {i}: mismatching caption {a} is its own")));
                }
            }
            if let (Some(a), Some(b)) = (self.mask_ids.get(i), self.mask_ids.get(mi)) {
                if a == b {
                    return Err(Error::InvalidArgument(format!("tuple {i}: mismatching mask {a} is its own")));
                }
            }
        }
        Ok(())
    }
}

/// Raw head outputs on each tuple class. Absent entries mean the class was not scored.
#[derive(Clone, Copy, Default)]
pub struct TupleScores<'t, T: Float> {
    /// `(x₁, s₁, t₁)`.
    pub real_d1: Option<Var<'t, T>>,
    pub real_d2: Option<Var<'t, T>>,
    pub real_d3: Option<Var<'t, T>>,
    /// `(x₁, s₁, t₂)`.
    pub mismatch_text_d3: Option<Var<'t, T>>,
    /// `(x₁, s₂, t₁)`.
    pub mismatch_mask_d2: Option<Var<'t, T>>,
    pub mismatch_mask_d3: Option<Var<'t, T>>,
    /// `(x_g, s_g, t)`.
    pub fake_d1: Option<Var<'t, T>>,
    pub fake_d2: Option<Var<'t, T>>,
    pub fake_d3: Option<Var<'t, T>>,
}

impl<'t, T: Float> TupleScores<'t, T> {
    pub fn with_real(mut self, h: &HeadScores<'t, T>) -> Self {
        self.real_d1 = Some(h.d1);
        self.real_d2 = h.d2;
        self.real_d3 = Some(h.d3);
        self
    }

    pub fn with_fake(mut self, h: &HeadScores<'t, T>) -> Self {
        self.fake_d1 = Some(h.d1);
        self.fake_d2 = h.d2;
        self.fake_d3 = Some(h.d3);
        self
    }
}

/// The three discriminator losses.
#[derive(Clone, Copy)]
pub struct DiscLosses<'t, T: Float> {
    pub d1: Var<'t, T>,
    pub d2: Var<'t, T>,
    pub d3: Var<'t, T>,
}

impl<'t, T: Float> DiscLosses<'t, T> {
    pub fn total(&self) -> Var<'t, T> {
        self.d1.add(&self.d2).add(&self.d3)
    }
}

/// `E[(D − target)²]`.
pub fn mean_sq<'t, T: Float>(d: &Var<'t, T>, target: f64) -> Var<'t, T> {
    if target == 0.0 {
        d.square().mean()
    } else {
        d.add_scalar(T::of(-target)).square().mean()
    }
}

fn need<'t, T: Float>(v: Option<Var<'t, T>>, what: &'static str) -> Result<Var<'t, T>> {
    v.ok_or(Error::MissingTupleClass(what))
}

/// Discriminator losses over all four tuple classes.
pub fn loss_d<'t, T: Float>(sc: &TupleScores<'t, T>) -> Result<DiscLosses<'t, T>> {
    let d3 = mean_sq(&need(sc.real_d3, "D3 on matching real")?, 1.0)
        .add(&mean_sq(&need(sc.mismatch_text_d3, "D3 on mismatching text")?, 0.0))
        .add(&mean_sq(&need(sc.mismatch_mask_d3, "D3 on mismatching mask")?, 0.0))
        .add(&mean_sq(&need(sc.fake_d3, "D3 on fake")?, 0.0));
    let d2 = mean_sq(&need(sc.real_d2, "D2 on matching real")?, 1.0)
        .add(&mean_sq(&need(sc.mismatch_mask_d2, "D2 on mismatching mask")?, 0.0))
        .add(&mean_sq(&need(sc.fake_d2, "D2 on fake")?, 0.0));
    let d1 = mean_sq(&need(sc.real_d1, "D1 on matching real")?, 1.0)
        .add(&mean_sq(&need(sc.fake_d1, "D1 on fake")?, 0.0));
    Ok(DiscLosses { d1, d2, d3 })
}

/// Generator objective and its parts.
#[derive(Clone, Copy)]
pub struct GenLoss<'t, T: Float> {
    pub total: Var<'t, T>,
    pub adversarial: Var<'t, T>,
    pub kl: Var<'t, T>,
    /// Zero in the maskless variant.
    pub l1_bg: Var<'t, T>,
}

fn check_lambda(l: f64, name: &str) -> Result<()> {
    if l < 0.0 || !l.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative weight, got {l}")));
    }
    Ok(())
}

/// Inputs of the generator objective beyond the fake scores.
pub struct GenTerms<'a, 't, T: Float> {
    pub mu: &'a Var<'t, T>,
    pub sigma: &'a Var<'t, T>,
    pub x_g: &'a Var<'t, T>,
    /// Only its value is used; no gradient flows through the selector.
    pub s_g: &'a Var<'t, T>,
    pub b: &'a Var<'t, T>,
}

/// `E[(D₁−1)² + (D₂−1)² + (D₃−1)²] + λ₁·KL + λ₂·L1_bg`.
pub fn loss_g<'t, T: Float>(
    fake: &HeadScores<'t, T>,
    terms: &GenTerms<'_, 't, T>,
    lambda1: f64,
    lambda2: f64,
    selector: &SelectorConfig,
) -> Result<GenLoss<'t, T>> {
    check_lambda(lambda1, "lambda1")?;
    check_lambda(lambda2, "lambda2")?;
    let d2 = need(fake.d2, "D2 on fake")?;
    let adversarial = mean_sq(&fake.d1, 1.0)
        .add(&mean_sq(&d2, 1.0))
        .add(&mean_sq(&fake.d3, 1.0));
    let kl = kl_divergence_var(terms.mu, terms.sigma);
    let s = terms.s_g.value();
    let s4: Array4<T> = (*s)
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Shape(format!("generated mask must be 4-d, got {:?}", s.shape())))?;
    let sel = background_selector(&s4, selector)?;
    let l1_bg = l1_background(terms.x_g, terms.b, &sel)?;
    let total = adversarial
        .add(&kl.scale(T::of(lambda1)))
        .add(&l1_bg.scale(T::of(lambda2)));
    Ok(GenLoss {
        total,
        adversarial,
        kl,
        l1_bg,
    })
}

/// Losses of the variant trained without masks: matching, mismatching-text
/// and fake image-text tuples; D₁ and the image-text head only; KL kept.
pub fn loss_no_mask_variant<'t, T: Float>(
    sc: &TupleScores<'t, T>,
    mu: &Var<'t, T>,
    sigma: &Var<'t, T>,
    lambda1: f64,
    with_mask: bool,
) -> Result<(DiscLosses<'t, T>, GenLoss<'t, T>)> {
    if with_mask {
        return Err(Error::Config("maskless losses requested with with_mask = true".into()));
    }
    check_lambda(lambda1, "lambda1")?;
    let real_d1 = need(sc.real_d1, "D1 on matching real")?;
    let fake_d1 = need(sc.fake_d1, "D1 on fake")?;
    let real_d3 = need(sc.real_d3, "D3' on matching real")?;
    let fake_d3 = need(sc.fake_d3, "D3' on fake")?;
    let d1 = mean_sq(&real_d1, 1.0).add(&mean_sq(&fake_d1, 0.0));
    let d3 = mean_sq(&real_d3, 1.0)
        .add(&mean_sq(&need(sc.mismatch_text_d3, "D3' on mismatching text")?, 0.0))
        .add(&mean_sq(&fake_d3, 0.0));
    let zero = real_d1.tape().scalar(T::zero());
    let fake = HeadScores {
        d1: fake_d1,
        d2: None,
        d3: fake_d3,
    };
    Ok((DiscLosses { d1, d2: zero, d3 }, loss_g_no_mask(&fake, mu, sigma, lambda1)?))
}

/// Generator objective of the maskless variant: adversarial terms of D₁ and
/// the image-text head plus the weighted KL.
pub fn loss_g_no_mask<'t, T: Float>(
    fake: &HeadScores<'t, T>,
    mu: &Var<'t, T>,
    sigma: &Var<'t, T>,
    lambda1: f64,
) -> Result<GenLoss<'t, T>> {
    check_lambda(lambda1, "lambda1")?;
    let adversarial = mean_sq(&fake.d1, 1.0).add(&mean_sq(&fake.d3, 1.0));
    let kl = kl_divergence_var(mu, sigma);
    let total = adversarial.add(&kl.scale(T::of(lambda1)));
    Ok(GenLoss {
        total,
        adversarial,
        kl,
        l1_bg: fake.d1.tape().scalar(T::zero()),
    })
}
