//! Matching-aware discriminator with image, image-mask and image-mask-text heads.

use mcgan_nn::{BatchNorm, Conv2d, Ctx, Float, Params, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::Hyperparams;
use crate::embedding::CondAug;
use crate::error::{Error, Result};
use crate::generator::{check_same_layout, expect_shape, Pass};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Stride-2 conv stack; the first layer has no batch-norm.
#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<(Conv2d, Option<BatchNorm>)>,
}

impl Encoder {
    fn new(name: &str, in_channels: usize, base: usize, depth: usize) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut cin = in_channels;
        for k in 0..depth {
            let cout = base << k;
            let conv = Conv2d::new(format!("{name}.{k}.conv"), cin, cout, 3, 2, k == 0);
            let bn = (k > 0).then(|| BatchNorm::new(format!("{name}.{k}.bn"), cout));
            layers.push((conv, bn));
            cin = cout;
        }
        Encoder { layers }
    }

    fn init<T: Float>(&self, p: &mut Params<T>, rng: &mut ChaCha8Rng) {
        for (c, b) in &self.layers {
            c.init(p, rng);
            if let Some(b) = b {
                b.init(p, rng);
            }
        }
    }

    fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let slope = T::of(LEAKY_SLOPE);
        let mut h = *x;
        for (conv, bn) in &self.layers {
            h = conv.forward(ctx, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(ctx, &h)?;
            }
            h = h.leaky_relu(slope);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    text: CondAug,
    image: Encoder,
    image_mask: Option<Encoder>,
    fuse: Conv2d,
    fuse_bn: BatchNorm,
    d1: Conv2d,
    d2: Option<Conv2d>,
    d3: Conv2d,
}

/// Scores of the three heads for one batch; `d2` is absent in the maskless variant.
#[derive(Clone, Copy)]
pub struct HeadScores<'t, T: Float> {
    pub d1: Var<'t, T>,
    pub d2: Option<Var<'t, T>>,
    pub d3: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Float> {
    hp: Hyperparams,
    arch: Arch,
    pub params: Params<T>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(hp: Hyperparams, rng: &mut ChaCha8Rng) -> Result<Self> {
        hp.validate()?;
        let depth = hp.n_blocks;
        let code = hp.disc_code_channels();
        let (h, w) = hp.disc_code_size();
        if h != w {
            return Err(Error::Config("square discriminator codes required".into()));
        }
        let arch = Arch {
            text: CondAug::new("d.text", hp.text_dim, hp.code_dim),
            image: Encoder::new("d.image", 3, hp.disc_channels, depth),
            image_mask: hp
                .with_mask
                .then(|| Encoder::new("d.image_mask", 4, hp.disc_channels, depth)),
            fuse: Conv2d::new("d.fuse", code + hp.code_dim, code, 3, 1, false),
            fuse_bn: BatchNorm::new("d.fuse_bn", code),
            d1: Conv2d::full("d.head1", code, 1, h),
            d2: hp.with_mask.then(|| Conv2d::full("d.head2", code, 1, h)),
            d3: Conv2d::full("d.head3", code, 1, h),
        };
        let mut p = Params::new();
        arch.text.init(&mut p, rng);
        arch.image.init(&mut p, rng);
        if let Some(e) = &arch.image_mask {
            e.init(&mut p, rng);
        }
        arch.fuse.init(&mut p, rng);
        arch.fuse_bn.init(&mut p, rng);
        arch.d1.init(&mut p, rng);
        if let Some(d2) = &arch.d2 {
            d2.init(&mut p, rng);
        }
        arch.d3.init(&mut p, rng);
        Ok(Discriminator { hp, arch, params: p })
    }

    pub fn from_params(hp: Hyperparams, params: Params<T>) -> Result<Self> {
        let reference = Discriminator::<T>::new(hp.clone(), &mut rand::SeedableRng::seed_from_u64(0))?;
        check_same_layout(&reference.params, &params)?;
        Ok(Discriminator {
            hp,
            arch: reference.arch,
            params,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn cast<U: Float>(&self) -> Discriminator<U> {
        Discriminator {
            hp: self.hp.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    fn check_image(&self, x: &Var<'_, T>, channels: usize, what: &str) -> Result<()> {
        let b = x.shape().first().copied().unwrap_or(0);
        expect_shape(x, &[b, channels, self.hp.height, self.hp.width], what)
    }

    /// Deterministic text code: the mean of the discriminator's own conditioning map.
    pub fn text_code<'t>(&self, pass: Pass<'t, T>, phi: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = phi.shape()[0];
        expect_shape(phi, &[b, self.hp.text_dim], "text embedding")?;
        Ok(self.arch.text.forward(&pass.ctx(&self.params), phi, None)?.mu)
    }

    /// Image code `[B, code, H/2^N, W/2^N]`.
    pub fn encode_image<'t>(&self, pass: Pass<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_image(x, 3, "image")?;
        self.arch.image.forward(&pass.ctx(&self.params), x)
    }

    /// Image-mask code from the channel concatenation `[x ‖ s]`.
    pub fn encode_image_mask<'t>(&self, pass: Pass<'t, T>, x: &Var<'t, T>, s: &Var<'t, T>) -> Result<Var<'t, T>> {
        let enc = self
            .arch
            .image_mask
            .as_ref()
            .ok_or_else(|| Error::Config("image-mask path disabled (with_mask = false)".into()))?;
        self.check_image(x, 3, "image")?;
        self.check_image(s, 1, "mask")?;
        enc.forward(&pass.ctx(&self.params), &Var::concat(&[*x, *s]))
    }

    /// Concatenates the replicated text code and reduces back to the code width.
    pub fn fuse_text<'t>(&self, pass: Pass<'t, T>, code: &Var<'t, T>, text_code: &Var<'t, T>) -> Result<Var<'t, T>> {
        let cs = code.shape();
        let (h, w) = self.hp.disc_code_size();
        expect_shape(code, &[cs[0], self.hp.disc_code_channels(), h, w], "discriminator code")?;
        expect_shape(text_code, &[cs[0], self.hp.code_dim], "text code")?;
        let ctx = pass.ctx(&self.params);
        let joint = Var::concat(&[*code, text_code.replicate(h, w)]);
        let y = self.arch.fuse_bn.forward(&ctx, &self.arch.fuse.forward(&ctx, &joint)?)?;
        Ok(y.leaky_relu(T::of(LEAKY_SLOPE)))
    }

    fn head<'t>(&self, pass: Pass<'t, T>, conv: &Conv2d, code: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = code.shape()[0];
        Ok(conv.forward(&pass.ctx(&self.params), code)?.reshape(&[b]))
    }

    /// Raw least-squares score of the image head.
    pub fn score_d1<'t>(&self, pass: Pass<'t, T>, image_code: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.head(pass, &self.arch.d1, image_code)
    }

    pub fn score_d2<'t>(&self, pass: Pass<'t, T>, image_mask_code: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d2 = self
            .arch
            .d2
            .as_ref()
            .ok_or_else(|| Error::Config("image-mask head disabled (with_mask = false)".into()))?;
        self.head(pass, d2, image_mask_code)
    }

    pub fn score_d3<'t>(&self, pass: Pass<'t, T>, joint_code: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.head(pass, &self.arch.d3, joint_code)
    }

    /// All heads on one `(x, s, t)` batch. In the maskless variant `s` is
    /// ignored and the text is fused with the image code.
    pub fn score_all<'t>(
        &self,
        pass: Pass<'t, T>,
        x: &Var<'t, T>,
        s: Option<&Var<'t, T>>,
        text_code: &Var<'t, T>,
    ) -> Result<HeadScores<'t, T>> {
        let image_code = self.encode_image(pass, x)?;
        let d1 = self.score_d1(pass, &image_code)?;
        if self.hp.with_mask {
            let s = s.ok_or(Error::MissingTupleClass("mask for the image-mask head"))?;
            let im = self.encode_image_mask(pass, x, s)?;
            let d2 = self.score_d2(pass, &im)?;
            let d3 = self.score_d3(pass, &self.fuse_text(pass, &im, text_code)?)?;
            Ok(HeadScores { d1, d2: Some(d2), d3 })
        } else {
            let d3 = self.score_d3(pass, &self.fuse_text(pass, &image_code, text_code)?)?;
            Ok(HeadScores { d1, d2: None, d3 })
        }
    }
}
