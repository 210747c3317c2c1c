//! Text embeddings: binary table ingestion, the deterministic toy encoder,
//! conditioning augmentation and its KL regularizer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use mcgan_nn::{Ctx, Float, Linear, Params, Var};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 16] = b"MCGAN-EMB\0\0\0\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub values: Vec<f32>,
    pub source_id: String,
}

impl TextEmbedding {
    pub fn new(values: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("embedding entry {i} is not finite")));
        }
        Ok(TextEmbedding {
            values,
            source_id: source_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Rows of precomputed caption embeddings plus an image → rows index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    pub rows: Array2<f32>,
    pub index: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    count: usize,
    dim: usize,
}

impl EmbeddingTable {
    pub fn new(rows: Array2<f32>, index: BTreeMap<String, Vec<usize>>) -> Result<Self> {
        let t = EmbeddingTable { rows, index };
        t.validate()?;
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        for (id, rows) in &self.index {
            if let Some(&r) = rows.iter().find(|&&r| r >= self.count()) {
                return Err(Error::InvalidArgument(format!(
                    "index entry {id} points at row {r} of {}",
                    self.count()
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> Result<TextEmbedding> {
        if i >= self.count() {
            return Err(Error::InvalidArgument(format!("row {i} out of range {}", self.count())));
        }
        TextEmbedding::new(self.rows.row(i).to_vec(), format!("row:{i}"))
    }

    /// Serializes to the binary layout: magic, u32 header length, JSON header, f32 rows.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            count: self.count(),
            dim: self.dim(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * self.rows.len());
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.rows.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary layout. `expected_dim` rejects tables of another width.
    pub fn from_bytes(bytes: &[u8], expected_dim: Option<usize>) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..16] != EMBEDDING_MAGIC {
            return Err(Error::MalformedHeader("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::MalformedHeader(format!(
                "header length {hlen} exceeds file size"
            )));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.dim == 0 {
            return Err(Error::MalformedHeader("dim must be positive".into()));
        }
        if let Some(d) = expected_dim {
            if d != header.dim {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: header.dim,
                });
            }
        }
        let payload = &body[hlen..];
        let expected = header
            .count
            .checked_mul(header.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::MalformedHeader("size overflow".into()))?;
        if payload.len() != expected {
            if payload.len() < expected {
                return Err(Error::Truncated {
                    expected,
                    found: payload.len(),
                });
            }
            return Err(Error::MalformedHeader(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let rows = Array2::from_shape_vec((header.count, header.dim), values)
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        Ok(EmbeddingTable {
            rows,
            index: BTreeMap::new(),
        })
    }
}

/// Sidecar index path: `embeddings.bin` → `embeddings.index.json`.
pub fn index_path(path: &Path) -> PathBuf {
    path.with_extension("index.json")
}

/// Loads a table and, if present, its sidecar index.
pub fn load_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let mut table = EmbeddingTable::from_bytes(&bytes, expected_dim)?;
    let idx = index_path(path);
    if idx.exists() {
        table.index = serde_json::from_slice(&fs::read(idx)?)?;
        table.validate()?;
    }
    Ok(table)
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_bytes())?;
    if !table.index.is_empty() {
        fs::write(index_path(path), serde_json::to_vec_pretty(&table.index)?)?;
    }
    Ok(())
}

/// Mean, standard deviation and reparameterized sample of the text code.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningResult {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c_hat: Vec<f64>,
}

/// One affine map from the embedding to `[mu ‖ logvar]`.
#[derive(Debug, Clone)]
pub struct CondAug {
    pub fc: Linear,
    pub code_dim: usize,
}

/// Tape handles produced by [`CondAug::forward`].
#[derive(Clone, Copy)]
pub struct CondAugVars<'t, T: Float> {
    pub mu: Var<'t, T>,
    pub logvar: Var<'t, T>,
    pub sigma: Var<'t, T>,
    pub c_hat: Var<'t, T>,
}

impl CondAug {
    pub fn new(name: &str, text_dim: usize, code_dim: usize) -> Self {
        CondAug {
            fc: Linear::new(format!("{name}.fc"), text_dim, 2 * code_dim, true),
            code_dim,
        }
    }

    pub fn init<T: Float>(&self, params: &mut Params<T>, rng: &mut ChaCha8Rng) {
        self.fc.init(params, rng);
    }

    /// `phi: [B, E]`, `eps: [B, C]` (pass `None` for the deterministic mean).
    pub fn forward<'t, T: Float>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        phi: &Var<'t, T>,
        eps: Option<&Var<'t, T>>,
    ) -> Result<CondAugVars<'t, T>> {
        let out = self.fc.forward(ctx, phi)?;
        let mu = out.narrow(0, self.code_dim);
        let logvar = out.narrow(self.code_dim, self.code_dim);
        let sigma = logvar.scale(T::of(0.5)).exp();
        let c_hat = match eps {
            Some(eps) => {
                if eps.shape() != mu.shape() {
                    return Err(Error::Shape(format!(
                        "epsilon {:?} vs code {:?}",
                        eps.shape(),
                        mu.shape()
                    )));
                }
                mu.add(&sigma.mul(eps))
            }
            None => mu,
        };
        Ok(CondAugVars {
            mu,
            logvar,
            sigma,
            c_hat,
        })
    }
}

/// Conditioning augmentation for a single embedding with explicit weights
/// `weight: [2C, E]`, `bias: [2C]`.
pub fn condition_augment(
    phi: &TextEmbedding,
    epsilon: &[f64],
    weight: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
) -> Result<ConditioningResult> {
    let (out, e) = weight.dim();
    if e != phi.dim() {
        return Err(Error::DimensionMismatch {
            expected: e,
            found: phi.dim(),
        });
    }
    if out % 2 != 0 || bias.len() != out {
        return Err(Error::Shape(format!("weight rows {out}, bias {}", bias.len())));
    }
    let c = out / 2;
    if epsilon.len() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            found: epsilon.len(),
        });
    }
    let x = Array1::from_iter(phi.values.iter().map(|&v| v as f64));
    let y = weight.dot(&x) + bias;
    let mu: Vec<f64> = y.iter().take(c).copied().collect();
    let sigma: Vec<f64> = y.iter().skip(c).map(|lv| (0.5 * lv).exp()).collect();
    let c_hat = mu
        .iter()
        .zip(&sigma)
        .zip(epsilon)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(ConditioningResult { mu, sigma, c_hat })
}

/// `KL(N(mu, diag(sigma²)) ‖ N(0, I)) = ½ Σ (μ² + σ² − ln σ² − 1)`.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: sigma.len(),
        });
    }
    let mut acc = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {s}")));
        }
        let s2 = s * s;
        acc += m * m + s2 - s2.ln() - 1.0;
    }
    Ok((0.5 * acc).max(0.0))
}

/// Batch mean of the per-sample KL term, on the tape. `mu`, `sigma`: `[B, C]`.
pub fn kl_divergence_var<'t, T: Float>(mu: &Var<'t, T>, sigma: &Var<'t, T>) -> Var<'t, T> {
    let batch = mu.shape()[0].max(1);
    let s2 = sigma.square();
    mu.square()
        .add(&s2)
        .sub(&s2.ln())
        .add_scalar(-T::one())
        .sum()
        .scale(T::of(0.5 / batch as f64))
}

/// `(1 − α)·φ₁ + α·φ₂`.
pub fn interpolate(phi1: &TextEmbedding, phi2: &TextEmbedding, alpha: f64) -> Result<TextEmbedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if phi1.dim() != phi2.dim() {
        return Err(Error::DimensionMismatch {
            expected: phi1.dim(),
            found: phi2.dim(),
        });
    }
    if alpha == 0.0 {
        return Ok(phi1.clone());
    }
    if alpha == 1.0 {
        return Ok(phi2.clone());
    }
    let a = alpha as f32;
    let values = phi1
        .values
        .iter()
        .zip(&phi2.values)
        .map(|(&x, &y)| (1.0 - a) * x + a * y)
        .collect();
    TextEmbedding::new(values, format!("lerp({},{},{alpha})", phi1.source_id, phi2.source_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];

    fn index(self) -> usize {
        self as usize
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    fn index(self) -> usize {
        self as usize
    }
}

/// Attributes standing in for a caption in the toy dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub shape: ShapeKind,
    pub color: [f32; 3],
    pub size: SizeClass,
}

impl AttributeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument(format!("color {:?} outside [0, 1]", self.color)));
        }
        Ok(())
    }

    pub fn features(&self) -> [f32; TOY_FEATURES] {
        let mut f = [0.0; TOY_FEATURES];
        f[self.shape.index()] = 1.0;
        f[3..6].copy_from_slice(&self.color);
        f[6 + self.size.index()] = 1.0;
        f
    }

    pub fn id(&self) -> String {
        format!(
            "{:?}-{:.3},{:.3},{:.3}-{:?}",
            self.shape, self.color[0], self.color[1], self.color[2], self.size
        )
        .to_lowercase()
    }
}

/// Default toy palette: saturated colors far from the muted backgrounds.
pub const TOY_PALETTE: [[f32; 3]; 3] = [[0.9, 0.15, 0.1], [0.95, 0.85, 0.1], [0.15, 0.3, 0.95]];

pub const TOY_FEATURES: usize = 9;
pub const TOY_PROJECTION_SEED: u64 = 7;

/// Fixed `[dim, 9]` projection drawn from a ChaCha8 stream seeded with 7.
pub fn toy_projection(dim: usize) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(TOY_PROJECTION_SEED);
    let scale = 1.0 / (TOY_FEATURES as f64).sqrt();
    Array2::from_shape_simple_fn((dim, TOY_FEATURES), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        (v * scale) as f32
    })
}

fn cached_projection(dim: usize) -> Array2<f32> {
    static DEFAULT: OnceLock<Array2<f32>> = OnceLock::new();
    if dim == 1024 {
        DEFAULT.get_or_init(|| toy_projection(1024)).clone()
    } else {
        toy_projection(dim)
    }
}

/// Deterministic toy text encoder: one-hot(shape) ⊕ color ⊕ one-hot(size), projected to `dim`.
pub fn toy_encode(attrs: &AttributeSpec, dim: usize) -> Result<TextEmbedding> {
    attrs.validate()?;
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dim must be positive".into()));
    }
    let proj = cached_projection(dim);
    let f = Array1::from(attrs.features().to_vec());
    TextEmbedding::new(proj.dot(&f).to_vec(), attrs.id())
}

/// Every (shape, palette color, size) combination.
pub fn attribute_grid(palette: &[[f32; 3]]) -> Vec<AttributeSpec> {
    let mut out = Vec::new();
    for &shape in &ShapeKind::ALL {
        for &color in palette {
            for &size in &SizeClass::ALL {
                out.push(AttributeSpec { shape, color, size });
            }
        }
    }
    out
}
