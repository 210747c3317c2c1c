use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{BnObservation, Tape, Var};
use crate::{Float, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Updated by the optimizer.
    Weight,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry<T: Float> {
    pub value: Arc<ArrayD<T>>,
    pub kind: Kind,
}

/// Named tensors of a model. Iteration order is the lexical order of names,
/// which keeps checkpoints and optimizer updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params<T: Float> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Float> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>, kind: Kind) {
        self.entries.insert(
            name.into(),
            Entry {
                value: Arc::new(value),
                kind,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Arc<ArrayD<T>>, NnError> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the value of an existing tensor, keeping its shape contract.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) -> Result<(), NnError> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place updates; clones only if a tape still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.get_mut(name).map(|e| Arc::make_mut(&mut e.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_weights(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == Kind::Weight)
            .map(|e| e.value.len())
            .sum()
    }

    /// Folds observed batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * observed`.
    pub fn apply_bn_observations(&mut self, obs: &[BnObservation<T>], momentum: T) {
        for o in obs {
            for (name, stat) in [(&o.running_mean, &o.mean), (&o.running_var, &o.var)] {
                if let Some(buf) = self.get_mut(name) {
                    ndarray::Zip::from(buf)
                        .and(stat.view().into_dyn())
                        .for_each(|r, &s| *r = (T::one() - momentum) * *r + momentum * s);
                }
            }
        }
    }

    /// Converts element type, e.g. to run a 64-bit gradient check on f32 weights.
    pub fn cast<U: Float>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: Arc::new(e.value.mapv(|v| U::of(v.f64()))),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Params<T>) {
        for (k, e) in other.iter() {
            self.entries.insert(format!("{prefix}{k}"), e.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn extract_prefixed(&self, prefix: &str) -> Params<T> {
        Params {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, e)| k.strip_prefix(prefix).map(|s| (s.to_string(), e.clone())))
                .collect(),
        }
    }

    /// True when both stores hold identical names, kinds, shapes and bits.
    pub fn bit_equal(&self, other: &Params<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.kind == b.kind
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, running buffers updated after the step.
    Train,
    /// Running statistics in batch-norm; the forward is a pure function of its inputs.
    Eval,
}

/// Everything a layer needs to run: the tape, the weights, the mode, and
/// whether the weights should collect gradients.
#[derive(Clone, Copy)]
pub struct Ctx<'t, 'p, T: Float> {
    pub tape: &'t Tape<T>,
    pub params: &'p Params<T>,
    pub mode: Mode,
    pub trainable: bool,
}

impl<'t, 'p, T: Float> Ctx<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p Params<T>, mode: Mode, trainable: bool) -> Self {
        Ctx {
            tape,
            params,
            mode,
            trainable,
        }
    }

    pub fn bind(&self, name: &str) -> Result<Var<'t, T>, NnError> {
        let v = self.params.get(name)?;
        Ok(self.tape.param(name, v.clone(), self.trainable))
    }
}

fn normal_init<T: Float, R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Normal::new(mean, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(dist.sample(rng)))
}

/// Standard deviation of the DCGAN-style normal initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            bias,
        }
    }

    /// A kernel covering the whole `size`×`size` input with no padding.
    pub fn full(name: impl Into<String>, in_channels: usize, out_channels: usize, size: usize) -> Self {
        Conv2d {
            pad: 0,
            ..Conv2d::new(name, in_channels, out_channels, size, 1, true)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, params: &mut Params<T>, rng: &mut R) {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        params.insert(self.weight_name(), normal_init(&shape, 0.0, INIT_STD, rng), Kind::Weight);
        if self.bias {
            params.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_channels])), Kind::Weight);
        }
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>, NnError> {
        let xs = x.shape();
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(NnError::Shape(format!(
                "{}: expected [B, {}, H, W], got {xs:?}",
                self.name, self.in_channels
            )));
        }
        let w = ctx.bind(&self.weight_name())?;
        let b = if self.bias { Some(ctx.bind(&self.bias_name())?) } else { None };
        Ok(x.conv2d(&w, b.as_ref(), self.stride, self.pad))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, params: &mut Params<T>, rng: &mut R) {
        params.insert(
            self.weight_name(),
            normal_init(&[self.out_features, self.in_features], 0.0, INIT_STD, rng),
            Kind::Weight,
        );
        if self.bias {
            params.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.out_features])), Kind::Weight);
        }
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>, NnError> {
        let xs = x.shape();
        if xs.len() != 2 || xs[1] != self.in_features {
            return Err(NnError::Shape(format!(
                "{}: expected [B, {}], got {xs:?}",
                self.name, self.in_features
            )));
        }
        let w = ctx.bind(&self.weight_name())?;
        let b = if self.bias { Some(ctx.bind(&self.bias_name())?) } else { None };
        Ok(x.linear(&w, b.as_ref()))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub features: usize,
    pub eps: f64,
}

/// Momentum of the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new(name: impl Into<String>, features: usize) -> Self {
        BatchNorm {
            name: name.into(),
            features,
            eps: 1e-5,
        }
    }

    fn n(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn init<T: Float, R: Rng + ?Sized>(&self, params: &mut Params<T>, rng: &mut R) {
        let c = [self.features];
        params.insert(self.n("weight"), normal_init(&c, 1.0, INIT_STD, rng), Kind::Weight);
        params.insert(self.n("bias"), ArrayD::zeros(IxDyn(&c)), Kind::Weight);
        params.insert(self.n("running_mean"), ArrayD::zeros(IxDyn(&c)), Kind::Buffer);
        params.insert(self.n("running_var"), ArrayD::ones(IxDyn(&c)), Kind::Buffer);
    }

    pub fn forward<'t, T: Float>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>, NnError> {
        let xs = x.shape();
        if xs.len() < 2 || xs[1] != self.features {
            return Err(NnError::Shape(format!(
                "{}: expected {} features on axis 1, got {xs:?}",
                self.name, self.features
            )));
        }
        let gamma = ctx.bind(&self.n("weight"))?;
        let beta = ctx.bind(&self.n("bias"))?;
        let eps = T::of(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm(&gamma, &beta, None, eps);
                if ctx.trainable {
                    let (mean, var) = stats.expect("batch statistics");
                    ctx.tape.observe_bn(BnObservation {
                        running_mean: self.n("running_mean"),
                        running_var: self.n("running_var"),
                        mean,
                        var,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.params.get(&self.n("running_mean"))?;
                let rv = ctx.params.get(&self.n("running_var"))?;
                Ok(x.batch_norm(&gamma, &beta, Some((rm, rv)), eps).0)
            }
        }
    }
}
