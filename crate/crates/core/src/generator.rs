//! Generator: seed map from the text code and noise, a linear background
//! pyramid, a chain of switch-gated synthesis blocks and the RGB + mask head.

use mcgan_nn::{BatchNorm, Conv2d, Ctx, Float, Linear, Mode, Params, Tape, Var};
use ndarray::{Array2, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Hyperparams;
use crate::embedding::{CondAug, CondAugVars};
use crate::error::{Error, Result};

/// How the sigmoid output of each block's switch is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum SwitchOverride {
    #[default]
    Learned,
    /// Every switch value replaced by this constant.
    Constant(f64),
    /// One constant per synthesis block, coarse to fine.
    PerBlock(Vec<f64>),
}

impl SwitchOverride {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        let check = |c: f64| {
            if (0.0..=1.0).contains(&c) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("switch constant {c} outside [0, 1]")))
            }
        };
        match self {
            SwitchOverride::Learned => Ok(()),
            SwitchOverride::Constant(c) => check(*c),
            SwitchOverride::PerBlock(cs) => {
                if cs.len() != blocks {
                    return Err(Error::InvalidArgument(format!(
                        "{} per-block switch constants for {blocks} blocks",
                        cs.len()
                    )));
                }
                cs.iter().try_for_each(|&c| check(c))
            }
        }
    }

    fn for_block(&self, k: usize) -> Option<f64> {
        match self {
            SwitchOverride::Learned => None,
            SwitchOverride::Constant(c) => Some(*c),
            SwitchOverride::PerBlock(cs) => cs.get(k).copied(),
        }
    }
}

/// How a forward pass runs.
#[derive(Clone, Copy)]
pub struct Pass<'t, T: Float> {
    pub tape: &'t Tape<T>,
    pub mode: Mode,
    /// Whether the network's weights collect gradients.
    pub trainable: bool,
}

impl<'t, T: Float> Pass<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode, trainable: bool) -> Self {
        Pass {
            tape,
            mode,
            trainable,
        }
    }

    pub fn eval(tape: &'t Tape<T>) -> Self {
        Pass::new(tape, Mode::Eval, false)
    }

    pub(crate) fn ctx<'p>(&self, params: &'p Params<T>) -> Ctx<'t, 'p, T> {
        Ctx::new(self.tape, params, self.mode, self.trainable)
    }
}

/// A residual-style unit whose skip path carries background features gated
/// by a sigmoid switch computed from the foreground stream.
#[derive(Debug, Clone)]
pub struct SynthesisBlock {
    pub channels: usize,
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    up_conv: Conv2d,
    up_bn: BatchNorm,
}

impl SynthesisBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        let c = channels;
        SynthesisBlock {
            channels,
            conv1: Conv2d::new(format!("{name}.conv1"), c, 2 * c, 3, 1, false),
            bn1: BatchNorm::new(format!("{name}.bn1"), 2 * c),
            conv2: Conv2d::new(format!("{name}.conv2"), 2 * c, 2 * c, 3, 1, false),
            bn2: BatchNorm::new(format!("{name}.bn2"), 2 * c),
            up_conv: Conv2d::new(format!("{name}.up_conv"), c, c / 2, 3, 1, false),
            up_bn: BatchNorm::new(format!("{name}.up_bn"), c / 2),
        }
    }

    fn init<T: Float>(&self, p: &mut Params<T>, rng: &mut ChaCha8Rng) {
        self.conv1.init(p, rng);
        self.bn1.init(p, rng);
        self.conv2.init(p, rng);
        self.bn2.init(p, rng);
        self.up_conv.init(p, rng);
        self.up_bn.init(p, rng);
    }

    /// Returns `(fg_next, switch)`; `fg_next` has half the channels at twice the resolution.
    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        fg: &Var<'t, T>,
        bg: &Var<'t, T>,
        constant: Option<f64>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (fs, bs) = (fg.shape(), bg.shape());
        if fs != bs {
            return Err(Error::Shape(format!("fg {fs:?} vs bg {bs:?}")));
        }
        if fs.len() != 4 || fs[1] != self.channels || self.channels % 2 != 0 {
            return Err(Error::Shape(format!(
                "synthesis block expects an even {} channels, got {fs:?}",
                self.channels
            )));
        }
        let c = self.channels;
        let u = self.bn1.forward(ctx, &self.conv1.forward(ctx, fg)?)?.relu();
        let u = self.bn2.forward(ctx, &self.conv2.forward(ctx, &u)?)?;
        let switch = match constant {
            None => u.narrow(0, c).sigmoid(),
            Some(v) => ctx.tape.constant(ArrayD::from_elem(fs.clone(), T::of(v))),
        };
        let fg_half = u.narrow(c, c);
        let merged = fg_half.add(&switch.mul(bg));
        let up = merged.upsample2x();
        let next = self.up_bn.forward(ctx, &self.up_conv.forward(ctx, &up)?)?.relu();
        Ok((next, switch))
    }
}

#[derive(Debug, Clone)]
struct Stage2 {
    reduce: Conv2d,
    reduce_bn: BatchNorm,
    bg: Conv2d,
    bg_bn: BatchNorm,
    block: SynthesisBlock,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct Arch {
    ca: CondAug,
    fc: Linear,
    fc_bn: BatchNorm,
    /// Background levels, finest (W/2) first.
    bg: Vec<(Conv2d, BatchNorm)>,
    blocks: Vec<SynthesisBlock>,
    head: Conv2d,
    stage2: Option<Stage2>,
}

impl Arch {
    fn new(hp: &Hyperparams) -> Self {
        let n = hp.n_blocks;
        let plan = hp.channel_plan();
        let (sh, sw) = hp.seed_size();
        let mut bg = Vec::with_capacity(n);
        let mut ch = plan[n - 1];
        bg.push((
            Conv2d::new("bg.0.conv", 3, ch, 3, 2, false),
            BatchNorm::new("bg.0.bn", ch),
        ));
        for k in 1..n {
            bg.push((
                Conv2d::new(format!("bg.{k}.conv"), ch, 2 * ch, 3, 2, false),
                BatchNorm::new(format!("bg.{k}.bn"), 2 * ch),
            ));
            ch *= 2;
        }
        let stage2 = hp.stacked.then(|| {
            let c2 = hp.stage2_channels;
            Stage2 {
                reduce: Conv2d::new("stage2.reduce", hp.final_channels() + hp.code_dim, c2, 3, 1, false),
                reduce_bn: BatchNorm::new("stage2.reduce_bn", c2),
                bg: Conv2d::new("stage2.bg.conv", 3, c2, 3, 2, false),
                bg_bn: BatchNorm::new("stage2.bg.bn", c2),
                block: SynthesisBlock::new("stage2.block", c2),
                head: Conv2d::new("stage2.head", c2 / 2, 4, 3, 1, true),
            }
        });
        Arch {
            ca: CondAug::new("ca", hp.text_dim, hp.code_dim),
            fc: Linear::new("fc", hp.code_dim + hp.z_dim, hp.seed_channels * sh * sw, false),
            fc_bn: BatchNorm::new("fc_bn", hp.seed_channels * sh * sw),
            bg,
            blocks: (0..n)
                .map(|k| SynthesisBlock::new(&format!("blocks.{k}"), plan[k]))
                .collect(),
            head: Conv2d::new("head", plan[n], 4, 3, 1, true),
            stage2,
        }
    }
}

/// Tape handles of one generator pass.
#[derive(Clone)]
pub struct GenVars<'t, T: Float> {
    /// `[B, 3, H, W]` in `[-1, 1]`.
    pub image: Var<'t, T>,
    /// `[B, 1, H, W]` in `[0, 1]`.
    pub mask: Var<'t, T>,
    /// One switch map per synthesis block, coarse to fine.
    pub switches: Vec<Var<'t, T>>,
    /// Foreground maps: the seed, then the output of every block.
    pub features: Vec<Var<'t, T>>,
    /// Feature map entering the output head.
    pub final_feature: Var<'t, T>,
}

/// Plain-array result of an inference pass.
#[derive(Debug, Clone)]
pub struct GenOutput<T: Float> {
    pub image: Array4<T>,
    pub mask: Array4<T>,
    pub switches: Vec<Array4<T>>,
    pub features: Vec<Array4<T>>,
    pub final_feature: Array4<T>,
}

impl<T: Float> GenOutput<T> {
    fn from_vars(v: &GenVars<'_, T>) -> Self {
        GenOutput {
            image: to4(&v.image),
            mask: to4(&v.mask),
            switches: v.switches.iter().map(to4).collect(),
            features: v.features.iter().map(to4).collect(),
            final_feature: to4(&v.final_feature),
        }
    }
}

pub(crate) fn to4<T: Float>(v: &Var<'_, T>) -> Array4<T> {
    (*v.value())
        .clone()
        .into_dimensionality()
        .expect("4-d feature map")
}

#[derive(Debug, Clone)]
pub struct Generator<T: Float> {
    hp: Hyperparams,
    arch: Arch,
    pub params: Params<T>,
}

impl<T: Float> Generator<T> {
    pub fn new(hp: Hyperparams, rng: &mut ChaCha8Rng) -> Result<Self> {
        hp.validate()?;
        let arch = Arch::new(&hp);
        let mut p = Params::new();
        arch.ca.init(&mut p, rng);
        arch.fc.init(&mut p, rng);
        arch.fc_bn.init(&mut p, rng);
        for (c, b) in &arch.bg {
            c.init(&mut p, rng);
            b.init(&mut p, rng);
        }
        for b in &arch.blocks {
            b.init(&mut p, rng);
        }
        arch.head.init(&mut p, rng);
        if let Some(s2) = &arch.stage2 {
            s2.reduce.init(&mut p, rng);
            s2.reduce_bn.init(&mut p, rng);
            s2.bg.init(&mut p, rng);
            s2.bg_bn.init(&mut p, rng);
            s2.block.init(&mut p, rng);
            s2.head.init(&mut p, rng);
        }
        Ok(Generator { hp, arch, params: p })
    }

    /// Rebuilds a generator around existing weights, checking every expected tensor.
    pub fn from_params(hp: Hyperparams, params: Params<T>) -> Result<Self> {
        let reference = Generator::<T>::new(hp.clone(), &mut rand::SeedableRng::seed_from_u64(0))?;
        check_same_layout(&reference.params, &params)?;
        Ok(Generator {
            hp,
            arch: reference.arch,
            params,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    /// Number of synthesis blocks including the stage-two block.
    pub fn num_blocks(&self) -> usize {
        self.hp.n_blocks + usize::from(self.hp.stacked)
    }

    pub fn cast<U: Float>(&self) -> Generator<U> {
        Generator {
            hp: self.hp.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Conditioning augmentation of `phi: [B, E]` with noise `eps: [B, C]`.
    pub fn condition<'t>(
        &self,
        pass: Pass<'t, T>,
        phi: &Var<'t, T>,
        eps: Option<&Var<'t, T>>,
    ) -> Result<CondAugVars<'t, T>> {
        expect_shape(phi, &[phi.shape()[0], self.hp.text_dim], "text embedding")?;
        self.arch.ca.forward(&self.stage1_ctx(pass), phi, eps)
    }

    /// FC on `[c_hat ‖ z]`, batch-normalised and rectified, reshaped to the seed map.
    pub fn seed_map<'t>(&self, pass: Pass<'t, T>, c_hat: &Var<'t, T>, z: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = c_hat.shape()[0];
        expect_shape(c_hat, &[b, self.hp.code_dim], "text code")?;
        expect_shape(z, &[b, self.hp.z_dim], "noise")?;
        let ctx = self.stage1_ctx(pass);
        let h = Var::concat(&[*c_hat, *z]);
        let h = self.arch.fc.forward(&ctx, &h)?;
        let h = self.arch.fc_bn.forward(&ctx, &h)?.relu();
        let (sh, sw) = self.hp.seed_size();
        Ok(h.reshape(&[b, self.hp.seed_channels, sh, sw]))
    }

    /// Convolution + batch-norm pyramid of the base image, finest level first;
    /// no activation anywhere.
    pub fn encode_background<'t>(&self, pass: Pass<'t, T>, b: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let (w, h) = self.hp.stage1_size();
        expect_shape(b, &[b.shape()[0], 3, h, w], "base image")?;
        let ctx = self.stage1_ctx(pass);
        let mut levels = Vec::with_capacity(self.hp.n_blocks);
        let mut x = *b;
        for (conv, bn) in &self.arch.bg {
            x = bn.forward(&ctx, &conv.forward(&ctx, &x)?)?;
            levels.push(x);
        }
        Ok(levels)
    }

    /// Synthesis block `k` (0-based, coarse to fine).
    pub fn synthesis_block<'t>(
        &self,
        pass: Pass<'t, T>,
        k: usize,
        fg: &Var<'t, T>,
        bg: &Var<'t, T>,
        ov: &SwitchOverride,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let block = self
            .arch
            .blocks
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no synthesis block {k}")))?;
        block.forward(&self.stage1_ctx(pass), fg, bg, ov.for_block(k))
    }

    fn stage1_ctx<'t, 'p>(&'p self, pass: Pass<'t, T>) -> Ctx<'t, 'p, T> {
        if self.hp.stacked && self.hp.stage1_frozen {
            Ctx::new(pass.tape, &self.params, Mode::Eval, false)
        } else {
            pass.ctx(&self.params)
        }
    }

    fn head<'t>(ctx: &Ctx<'t, '_, T>, conv: &Conv2d, feature: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = conv.forward(ctx, feature)?;
        Ok((out.narrow(0, 3).tanh(), out.narrow(3, 1).sigmoid()))
    }

    /// Stage-one pass from a text code: seed map, synthesis blocks fed
    /// coarse-to-fine by the background pyramid, and the output head.
    fn stage1<'t>(
        &self,
        pass: Pass<'t, T>,
        b: &Var<'t, T>,
        c_hat: &Var<'t, T>,
        z: &Var<'t, T>,
        ov: &SwitchOverride,
    ) -> Result<GenVars<'t, T>> {
        let seed = self.seed_map(pass, c_hat, z)?;
        let levels = self.encode_background(pass, b)?;
        let mut fg = seed;
        let mut features = vec![seed];
        let mut switches = Vec::with_capacity(self.hp.n_blocks);
        for k in 0..self.hp.n_blocks {
            let bg = &levels[self.hp.n_blocks - 1 - k];
            let (next, switch) = self.synthesis_block(pass, k, &fg, bg, ov)?;
            fg = next;
            features.push(next);
            switches.push(switch);
        }
        let (image, mask) = Self::head(&self.stage1_ctx(pass), &self.arch.head, &fg)?;
        Ok(GenVars {
            image,
            mask,
            switches,
            features,
            final_feature: fg,
        })
    }

    /// Full generator pass from a text code.
    pub fn forward_code<'t>(
        &self,
        pass: Pass<'t, T>,
        b: &Var<'t, T>,
        c_hat: &Var<'t, T>,
        z: &Var<'t, T>,
        ov: &SwitchOverride,
    ) -> Result<GenVars<'t, T>> {
        ov.validate(self.num_blocks())?;
        let bs = b.shape();
        expect_shape(b, &[bs[0], 3, self.hp.height, self.hp.width], "base image")?;
        if !self.hp.stacked {
            return self.stage1(pass, b, c_hat, z, ov);
        }
        let small = b.avg_pool2x();
        let s1 = self.stage1(pass, &small, c_hat, z, ov)?;
        let s2 = self.stack_stage2(pass, &s1.final_feature, c_hat, b, ov.for_block(self.hp.n_blocks))?;
        let mut switches = s1.switches;
        switches.extend(s2.switches);
        let mut features = s1.features;
        features.extend(s2.features);
        Ok(GenVars {
            switches,
            features,
            ..s2
        })
    }

    /// Stage two of the stacked variant: the stage-one feature concatenated
    /// with the replicated text code, reduced, then one more synthesis block
    /// against a background level at the stage-one resolution.
    pub fn stack_stage2<'t>(
        &self,
        pass: Pass<'t, T>,
        final_feature: &Var<'t, T>,
        text_code: &Var<'t, T>,
        b: &Var<'t, T>,
        constant: Option<f64>,
    ) -> Result<GenVars<'t, T>> {
        let s2 = self
            .arch
            .stage2
            .as_ref()
            .ok_or_else(|| Error::Config("stage two requires a stacked configuration".into()))?;
        let (w1, h1) = self.hp.stage1_size();
        let batch = final_feature.shape()[0];
        expect_shape(final_feature, &[batch, self.hp.final_channels(), h1, w1], "stage-one feature")?;
        expect_shape(text_code, &[batch, self.hp.code_dim], "text code")?;
        expect_shape(b, &[batch, 3, self.hp.height, self.hp.width], "base image")?;
        let ctx = pass.ctx(&self.params);
        let joint = Var::concat(&[*final_feature, text_code.replicate(h1, w1)]);
        let fg = s2.reduce_bn.forward(&ctx, &s2.reduce.forward(&ctx, &joint)?)?.relu();
        let bg = s2.bg_bn.forward(&ctx, &s2.bg.forward(&ctx, b)?)?;
        let (next, switch) = s2.block.forward(&ctx, &fg, &bg, constant)?;
        let (image, mask) = Self::head(&ctx, &s2.head, &next)?;
        Ok(GenVars {
            image,
            mask,
            switches: vec![switch],
            features: vec![fg, next],
            final_feature: next,
        })
    }

    /// Conditioning augmentation followed by [`Generator::forward_code`].
    pub fn forward<'t>(
        &self,
        pass: Pass<'t, T>,
        b: &Var<'t, T>,
        phi: &Var<'t, T>,
        eps: &Var<'t, T>,
        z: &Var<'t, T>,
        ov: &SwitchOverride,
    ) -> Result<(CondAugVars<'t, T>, GenVars<'t, T>)> {
        let ca = self.condition(pass, phi, Some(eps))?;
        let out = self.forward_code(pass, b, &ca.c_hat, z, ov)?;
        Ok((ca, out))
    }

    /// Inference-mode generation from a text code.
    pub fn generate(
        &self,
        b: &Array4<T>,
        c_hat: &Array2<T>,
        z: &Array2<T>,
        ov: &SwitchOverride,
    ) -> Result<GenOutput<T>> {
        let tape = Tape::new();
        let pass = Pass::eval(&tape);
        let out = self.forward_code(
            pass,
            &tape.constant(b.clone().into_dyn()),
            &tape.constant(c_hat.clone().into_dyn()),
            &tape.constant(z.clone().into_dyn()),
            ov,
        )?;
        Ok(GenOutput::from_vars(&out))
    }

    /// Inference-mode conditioning: returns `(mu, sigma, c_hat)`.
    pub fn condition_code(&self, phi: &Array2<T>, eps: &Array2<T>) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
        let tape = Tape::new();
        let pass = Pass::eval(&tape);
        let phi = tape.constant(phi.clone().into_dyn());
        let eps = tape.constant(eps.clone().into_dyn());
        let ca = self.condition(pass, &phi, Some(&eps))?;
        let two = |v: &Var<'_, T>| -> Array2<T> { (*v.value()).clone().into_dimensionality().expect("2-d") };
        Ok((two(&ca.mu), two(&ca.sigma), two(&ca.c_hat)))
    }

    /// Inference-mode generation from raw embeddings.
    pub fn generate_from_text(
        &self,
        b: &Array4<T>,
        phi: &Array2<T>,
        eps: &Array2<T>,
        z: &Array2<T>,
        ov: &SwitchOverride,
    ) -> Result<GenOutput<T>> {
        let (_, _, c_hat) = self.condition_code(phi, eps)?;
        self.generate(b, &c_hat, z, ov)
    }
}

pub(crate) fn expect_shape<T: Float>(v: &Var<'_, T>, want: &[usize], what: &str) -> Result<()> {
    let got = v.shape();
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want:?}, got {got:?}")));
    }
    Ok(())
}

pub(crate) fn check_same_layout<T: Float>(reference: &Params<T>, got: &Params<T>) -> Result<()> {
    for (name, e) in reference.iter() {
        match got.entry(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(g) if g.value.shape() != e.value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    e.value.shape(),
                    g.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = got.names().find(|n| !reference.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
