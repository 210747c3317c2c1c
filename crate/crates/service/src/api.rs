//! Request and response types and the transport-independent handler.

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::DynamicImage;
use mcgan::checkpoint::Checkpoint;
use mcgan::embedding::{load_embeddings, toy_encode, AttributeSpec, EmbeddingTable, TextEmbedding, TOY_PALETTE};
use mcgan::experiments::generate_one;
use mcgan::imageio::{array_to_rgb, decode_png, encode_png, mask_to_gray, resize_bilinear};
use mcgan::{Generator, Hyperparams, SwitchOverride};
use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compose::{compose, crop, BBox, ComposeMode};
use crate::error::ApiError;

/// Feather radius of mask blending, in pixels.
pub const FEATHER: usize = 2;

/// What the object should look like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextRef {
    /// Toy attributes, encoded on the fly.
    Attrs(AttributeSpec),
    /// A row of the loaded embedding table.
    EmbeddingRow(usize),
    /// The `index`-th caption of an image in the table's index.
    ImageCaption { image_id: String, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    /// Base image as base64-encoded PNG.
    pub base_png: String,
    pub bbox: BBox,
    pub text: TextRef,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub overrides: SwitchOverride,
    #[serde(default)]
    pub return_debug: bool,
    #[serde(default)]
    pub mode: ComposeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeResult {
    pub composite_png: String,
    pub crop_png: String,
    pub mask_png: String,
    /// One channel-mean switch map per synthesis block, coarse to fine; only with `return_debug`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_pngs: Option<Vec<String>>,
    pub timing_ms: f64,
}

/// A loaded checkpoint and, optionally, an embedding table.
pub struct Model {
    pub generator: Generator<f32>,
    pub embeddings: Option<EmbeddingTable>,
    pub source: String,
}

impl Model {
    pub fn load(checkpoint: &Path, embeddings: Option<&Path>) -> mcgan::Result<Self> {
        let generator = Checkpoint::load(checkpoint)?.generator()?;
        let embeddings = embeddings
            .map(|p| load_embeddings(p, Some(generator.hyperparams().text_dim)))
            .transpose()?;
        Ok(Model {
            generator,
            embeddings,
            source: checkpoint.display().to_string(),
        })
    }
}

/// Shared server state. Inference on the model is serialized by the lock.
#[derive(Default)]
pub struct AppState {
    pub model: Mutex<Option<Model>>,
}

impl AppState {
    pub fn with_model(model: Model) -> Self {
        AppState {
            model: Mutex::new(Some(model)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub source: String,
    pub hyperparams: Hyperparams,
    pub synthesis_blocks: usize,
    pub parameters: usize,
    pub embedding_rows: Option<usize>,
}

pub fn model_summary(state: &AppState) -> Result<ModelSummary, ApiError> {
    let guard = state.model.lock().map_err(|_| ApiError::internal("model lock poisoned"))?;
    let m = guard.as_ref().ok_or_else(ApiError::no_model)?;
    Ok(ModelSummary {
        source: m.source.clone(),
        hyperparams: m.generator.hyperparams().clone(),
        synthesis_blocks: m.generator.num_blocks(),
        parameters: m.generator.params.num_weights(),
        embedding_rows: m.embeddings.as_ref().map(|t| t.count()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySchema {
    pub shapes: Vec<String>,
    pub sizes: Vec<String>,
    pub palette: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsInfo {
    pub toy: ToySchema,
    /// Image ids of the loaded table's index.
    pub image_ids: Vec<String>,
    pub rows: usize,
}

pub fn embeddings_info(state: &AppState) -> Result<EmbeddingsInfo, ApiError> {
    let guard = state.model.lock().map_err(|_| ApiError::internal("model lock poisoned"))?;
    let table = guard.as_ref().and_then(|m| m.embeddings.as_ref());
    Ok(EmbeddingsInfo {
        toy: ToySchema {
            shapes: vec!["ellipse".into(), "rectangle".into(), "triangle".into()],
            sizes: vec!["small".into(), "medium".into(), "large".into()],
            palette: TOY_PALETTE.to_vec(),
        },
        image_ids: table.map(|t| t.index.keys().cloned().collect()).unwrap_or_default(),
        rows: table.map(|t| t.count()).unwrap_or(0),
    })
}

fn resolve_text(text: &TextRef, model: &Model) -> Result<TextEmbedding, ApiError> {
    let dim = model.generator.hyperparams().text_dim;
    let table = || {
        model
            .embeddings
            .as_ref()
            .ok_or_else(|| ApiError::not_found("no embedding table loaded"))
    };
    match text {
        TextRef::Attrs(a) => toy_encode(a, dim).map_err(|e| ApiError::bad_request(e.to_string())),
        TextRef::EmbeddingRow(r) => {
            let t = table()?;
            if *r >= t.count() {
                return Err(ApiError::not_found(format!("embedding row {r} not in table of {}", t.count())));
            }
            Ok(t.row(*r)?)
        }
        TextRef::ImageCaption { image_id, index } => {
            let t = table()?;
            let rows = t
                .index
                .get(image_id)
                .ok_or_else(|| ApiError::not_found(format!("unknown image id {image_id}")))?;
            let r = rows
                .get(*index)
                .ok_or_else(|| ApiError::not_found(format!("image {image_id} has {} captions", rows.len())))?;
            Ok(t.row(*r)?)
        }
    }
}

fn png_b64(img: DynamicImage) -> Result<String, ApiError> {
    Ok(B64.encode(encode_png(&img)?))
}

/// Noise for a request: `ε` first, then `z`, both from one stream seeded by `seed`.
pub fn request_noise(seed: u64, code_dim: usize, z_dim: usize) -> (Array1<f32>, Array1<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array1::from_shape_simple_fn(code_dim, || StandardNormal.sample(&mut rng));
    let z = Array1::from_shape_simple_fn(z_dim, || StandardNormal.sample(&mut rng));
    (eps, z)
}

/// Crop → resize → condition → generate → compose.
pub fn handle_generate(state: &AppState, req: &GenerateRequest) -> Result<CompositeResult, ApiError> {
    let start = Instant::now();
    let bytes = B64
        .decode(req.base_png.as_bytes())
        .map_err(|e| ApiError::bad_request(format!("base_png is not base64: {e}")))?;
    let base = decode_png(&bytes)
        .map_err(|e| ApiError::bad_request(format!("base_png is not a PNG: {e}")))?
        .to_rgb8();
    req.bbox.validate(base.width(), base.height())?;

    let guard = state.model.lock().map_err(|_| ApiError::internal("model lock poisoned"))?;
    let model = guard.as_ref().ok_or_else(ApiError::no_model)?;
    let gen = &model.generator;
    let hp = gen.hyperparams();
    req.overrides
        .validate(gen.num_blocks())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let phi = resolve_text(&req.text, model)?;

    let region = crop(&base, &req.bbox);
    let b = resize_bilinear(region.view(), hp.height, hp.width);
    let (eps, z) = request_noise(req.seed, hp.code_dim, hp.z_dim);
    let out = generate_one(gen, &b, &phi, &z, &eps, &req.overrides)?;
    let image = out.image.index_axis(Axis(0), 0).to_owned();
    let mask = out.mask.index_axis(Axis(0), 0).to_owned();
    let composite = compose(&base, &req.bbox, &image, &mask, req.mode, FEATHER)?;

    let switch_pngs = if req.return_debug {
        let maps = out
            .switches
            .iter()
            .map(|s| {
                let m = s
                    .index_axis(Axis(0), 0)
                    .mean_axis(Axis(0))
                    .expect("non-empty switch")
                    .insert_axis(Axis(0));
                png_b64(DynamicImage::ImageLuma8(mask_to_gray(m.view())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(maps)
    } else {
        None
    };
    Ok(CompositeResult {
        composite_png: png_b64(DynamicImage::ImageRgb8(composite))?,
        crop_png: png_b64(DynamicImage::ImageRgb8(array_to_rgb(image.view())))?,
        mask_png: png_b64(DynamicImage::ImageLuma8(mask_to_gray(mask.view())))?,
        switch_pngs,
        timing_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Parses a JSON request body; malformed input is a 400.
pub fn parse_request(body: &[u8]) -> Result<GenerateRequest, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}
