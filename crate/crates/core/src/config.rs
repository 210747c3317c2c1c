//! Architecture hyperparameters shared by every network in the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Output width in pixels.
    pub width: usize,
    /// Output height in pixels.
    pub height: usize,
    /// Number of synthesis blocks.
    pub n_blocks: usize,
    /// Noise dimension.
    pub z_dim: usize,
    /// Text embedding dimension.
    pub text_dim: usize,
    /// Width of the conditioning-augmentation code.
    pub code_dim: usize,
    /// Channels of the seed feature map; halved by every synthesis block.
    pub seed_channels: usize,
    /// Channels of the first discriminator convolution; doubled per layer.
    pub disc_channels: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub with_mask: bool,
    /// Two-stage generator: a stage-one model at half resolution feeding one more synthesis block.
    pub stacked: bool,
    /// Stage one receives no gradient when stacked.
    pub stage1_frozen: bool,
    /// Channels of the stage-two reduction convolution.
    pub stage2_channels: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            width: 128,
            height: 128,
            n_blocks: 4,
            z_dim: 100,
            text_dim: 1024,
            code_dim: 128,
            seed_channels: 1024,
            disc_channels: 64,
            lambda1: 2.0,
            lambda2: 15.0,
            with_mask: true,
            stacked: false,
            stage1_frozen: false,
            stage2_channels: 64,
        }
    }
}

impl Hyperparams {
    /// Desk-scale configuration used with the procedural shapes dataset.
    pub fn toy() -> Self {
        Hyperparams {
            width: 64,
            height: 64,
            n_blocks: 3,
            z_dim: 32,
            text_dim: 1024,
            code_dim: 32,
            seed_channels: 64,
            disc_channels: 16,
            lambda2: 20.0,
            ..Hyperparams::default()
        }
    }

    /// Flower-dataset loss weighting.
    pub fn flower() -> Self {
        Hyperparams {
            lambda2: 30.0,
            ..Hyperparams::default()
        }
    }

    /// The two-stage 128×128 variant: a 4×4 seed grown to a 64×64×64 stage-one feature.
    pub fn stacked() -> Self {
        Hyperparams {
            stacked: true,
            ..Hyperparams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 {
            return bad("n_blocks must be positive".into());
        }
        if self.width != self.height {
            return bad(format!("only square images are supported, got {}x{}", self.width, self.height));
        }
        let (w, h) = self.stage1_size();
        let div = 1usize << self.n_blocks;
        if w % div != 0 || h % div != 0 || w < div {
            return bad(format!("stage-one size {w}x{h} is not divisible by 2^{}", self.n_blocks));
        }
        if self.seed_channels % div != 0 || self.seed_channels < div {
            return bad(format!(
                "seed_channels {} cannot be halved {} times",
                self.seed_channels, self.n_blocks
            ));
        }
        for (name, v) in [
            ("z_dim", self.z_dim),
            ("text_dim", self.text_dim),
            ("code_dim", self.code_dim),
            ("disc_channels", self.disc_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.stacked && (self.stage2_channels < 2 || self.stage2_channels % 2 != 0) {
            return bad("stage2_channels must be even and at least 2".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Resolution produced by the chain of synthesis blocks (half the output when stacked).
    pub fn stage1_size(&self) -> (usize, usize) {
        if self.stacked {
            (self.width / 2, self.height / 2)
        } else {
            (self.width, self.height)
        }
    }

    /// Spatial size of the seed feature map.
    pub fn seed_size(&self) -> (usize, usize) {
        let (w, h) = self.stage1_size();
        (h >> self.n_blocks, w >> self.n_blocks)
    }

    /// Channels entering each synthesis block, then the channels leaving the last one.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..=self.n_blocks).map(|k| self.seed_channels >> k).collect()
    }

    /// Channels of the final stage-one feature map.
    pub fn final_channels(&self) -> usize {
        self.seed_channels >> self.n_blocks
    }

    /// Channels of the discriminator codes at the terminal resolution.
    pub fn disc_code_channels(&self) -> usize {
        self.disc_channels << (self.n_blocks - 1)
    }

    /// Terminal discriminator resolution `(H / 2^N, W / 2^N)` of the full output.
    pub fn disc_code_size(&self) -> (usize, usize) {
        (self.height >> self.n_blocks, self.width >> self.n_blocks)
    }
}
