//! Dataset manifests, PNG loading, object-free background crops and the
//! procedural toy dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    load_embeddings, save_embeddings, toy_encode, AttributeSpec, EmbeddingTable, ShapeKind, SizeClass,
    TextEmbedding, TOY_PALETTE,
};
use crate::error::{Error, Result};
use crate::imageio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_id: String,
    /// Paths are relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub embedding_rows: Vec<usize>,
    pub split: Split,
    pub class_id: u32,
}

/// Where generator base images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackgroundPool {
    /// Ready-made object-free images.
    Files { files: Vec<String> },
    /// Crops sampled from the dataset images away from their objects.
    Crops {
        per_image: usize,
        max_overlap: f64,
        max_tries: usize,
    },
}

impl Default for BackgroundPool {
    fn default() -> Self {
        BackgroundPool::Crops {
            per_image: 1,
            max_overlap: 0.01,
            max_tries: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory the relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
    pub embeddings: String,
    pub records: Vec<Record>,
    #[serde(default)]
    pub background_pool: BackgroundPool,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut m: DatasetManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Checks that every referenced file exists and no image is in both splits.
    pub fn validate(&self) -> Result<()> {
        let mut files = vec![self.embeddings.as_str()];
        for r in &self.records {
            files.push(&r.image);
            files.push(&r.mask);
        }
        if let BackgroundPool::Files { files: f } = &self.background_pool {
            files.extend(f.iter().map(String::as_str));
        }
        for f in files {
            let p = self.resolve(f);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &self.records {
            if let Some(prev) = seen.insert(&r.image_id, r.split) {
                if prev != r.split {
                    return Err(Error::InvalidArgument(format!(
                        "image {} appears in both splits",
                        r.image_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One real `(x, s, φ(t))` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Array3<f32>,
    /// `[1, H, W]` in `{0, 1}`; the object is 1.
    pub mask: Array3<f32>,
    pub embedding: TextEmbedding,
    pub image_id: String,
    pub caption_id: String,
}

/// Lazily decoded view of one split of a manifest.
pub struct Dataset {
    manifest: DatasetManifest,
    records: Vec<Record>,
    table: EmbeddingTable,
    width: usize,
    height: usize,
}

pub fn load_dataset(
    manifest: &DatasetManifest,
    split: Split,
    width: usize,
    height: usize,
    expected_dim: Option<usize>,
) -> Result<Dataset> {
    manifest.validate()?;
    let table = load_embeddings(&manifest.resolve(&manifest.embeddings), expected_dim)?;
    let records: Vec<Record> = manifest.records.iter().filter(|r| r.split == split).cloned().collect();
    for r in &records {
        if r.embedding_rows.is_empty() {
            return Err(Error::InvalidArgument(format!("image {} has no captions", r.image_id)));
        }
        if let Some(&bad) = r.embedding_rows.iter().find(|&&i| i >= table.count()) {
            return Err(Error::InvalidArgument(format!(
                "image {}: caption row {bad} outside table of {}",
                r.image_id,
                table.count()
            )));
        }
    }
    Ok(Dataset {
        manifest: manifest.clone(),
        records,
        table,
        width,
        height,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Image and mask at their native size after the image/mask size check.
    fn native(&self, r: &Record) -> Result<(Array3<f32>, Array3<f32>)> {
        let image = imageio::load_rgb(&self.manifest.resolve(&r.image))?;
        let mask = imageio::load_mask(&self.manifest.resolve(&r.mask))?;
        if image.dim().1 != mask.dim().1 || image.dim().2 != mask.dim().2 {
            return Err(Error::Shape(format!(
                "image {}: mask {:?} does not match image {:?}",
                r.image_id,
                mask.shape(),
                image.shape()
            )));
        }
        Ok((image, mask))
    }

    /// Decodes record `i`, resized to the model resolution, with a caption drawn from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<SceneSample> {
        let r = &self.records[i];
        let (image, mask) = self.native(r)?;
        let row = *r.embedding_rows.choose(rng).expect("non-empty caption rows");
        Ok(SceneSample {
            image: imageio::resize_bilinear(image.view(), self.height, self.width),
            mask: imageio::resize_nearest(mask.view(), self.height, self.width),
            embedding: self.table.row(row)?,
            image_id: r.image_id.clone(),
            caption_id: format!("{}#{row}", r.image_id),
        })
    }

    /// One pass over the split in record order.
    pub fn epoch<'a, R: Rng + ?Sized>(&'a self, rng: &'a mut R) -> impl Iterator<Item = Result<SceneSample>> + 'a {
        (0..self.len()).map(move |i| self.sample(i, rng))
    }

    /// Decodes everything into memory and builds the base-image pool.
    pub fn materialize(&self, seed: u64) -> Result<TrainingSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = TrainingSet {
            table: self.table.clone(),
            ..TrainingSet::default()
        };
        for r in &self.records {
            let (image, mask) = self.native(r)?;
            set.images.push(imageio::resize_bilinear(image.view(), self.height, self.width));
            set.masks.push(imageio::resize_nearest(mask.view(), self.height, self.width));
            set.image_ids.push(r.image_id.clone());
            set.captions.push(r.embedding_rows.clone());
            if let BackgroundPool::Crops {
                per_image,
                max_overlap,
                max_tries,
            } = &self.manifest.background_pool
            {
                // Crops are cut at the model resolution from the native image;
                // images smaller than that contribute none.
                let (_, nh, nw) = image.dim();
                if nh < self.height || nw < self.width {
                    continue;
                }
                for _ in 0..*per_image {
                    if let Some(c) = sample_background_crop(
                        &image,
                        &mask,
                        (self.height, self.width),
                        &mut rng,
                        *max_overlap,
                        *max_tries,
                    )? {
                        set.backgrounds.push(c.image);
                    }
                }
            }
        }
        if let BackgroundPool::Files { files } = &self.manifest.background_pool {
            for f in files {
                let b = imageio::load_rgb(&self.manifest.resolve(f))?;
                set.backgrounds
                    .push(imageio::resize_bilinear(b.view(), self.height, self.width));
            }
        }
        if set.backgrounds.is_empty() {
            return Err(Error::InvalidArgument("no object-free background crops found".into()));
        }
        Ok(set)
    }
}

/// In-memory training data: real triples plus the pool of base images.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub images: Vec<Array3<f32>>,
    pub masks: Vec<Array3<f32>>,
    pub image_ids: Vec<String>,
    /// Caption rows into `table` for each image.
    pub captions: Vec<Vec<usize>>,
    pub table: EmbeddingTable,
    /// Identity of each table row; rows describing the same thing share one.
    pub row_ids: Vec<String>,
    pub backgrounds: Vec<Array3<f32>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn caption_id(&self, row: usize) -> String {
        self.row_ids.get(row).cloned().unwrap_or_else(|| format!("row:{row}"))
    }

    pub fn from_toy(samples: &[ToySample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty toy sample list".into()));
        }
        let dim = samples[0].sample.embedding.dim();
        let mut rows = Array2::zeros((samples.len(), dim));
        let mut index = BTreeMap::new();
        let mut set = TrainingSet::default();
        for (i, t) in samples.iter().enumerate() {
            rows.row_mut(i).assign(&ndarray::ArrayView1::from(&t.sample.embedding.values));
            index.insert(t.sample.image_id.clone(), vec![i]);
            set.images.push(t.sample.image.clone());
            set.masks.push(t.sample.mask.clone());
            set.image_ids.push(t.sample.image_id.clone());
            set.captions.push(vec![i]);
            set.backgrounds.push(t.background.clone());
        }
        set.table = EmbeddingTable::new(rows, index)?;
        set.row_ids = samples.iter().map(|t| t.attrs.id()).collect();
        Ok(set)
    }
}

/// An object-free crop and its top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundCrop {
    pub image: Array3<f32>,
    pub x: usize,
    pub y: usize,
}

/// Fraction of object pixels inside the `h×w` window at `(y, x)`, from a summed-area table.
fn window_coverage(sat: &Array2<f64>, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let sum = sat[[y + h, x + w]] - sat[[y, x + w]] - sat[[y + h, x]] + sat[[y, x]];
    sum / (h * w) as f64
}

fn summed_area(mask: &Array3<f32>) -> Array2<f64> {
    let (_, h, w) = mask.dim();
    let mut sat = Array2::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f64::from(mask[[0, y, x]] >= 0.5);
            sat[[y + 1, x + 1]] = sat[[y, x + 1]] + row;
        }
    }
    sat
}

/// Uniformly placed crop whose object coverage is at most `max_overlap`; `None` after `max_tries` misses.
pub fn sample_background_crop<R: Rng + ?Sized>(
    image: &Array3<f32>,
    mask: &Array3<f32>,
    size: (usize, usize),
    rng: &mut R,
    max_overlap: f64,
    max_tries: usize,
) -> Result<Option<BackgroundCrop>> {
    let (_, ih, iw) = image.dim();
    let (h, w) = size;
    if mask.dim() != (1, ih, iw) {
        return Err(Error::Shape(format!("mask {:?} vs image {:?}", mask.shape(), image.shape())));
    }
    if h == 0 || w == 0 || h > ih || w > iw {
        return Err(Error::InvalidArgument(format!(
            "crop {h}x{w} does not fit image {ih}x{iw}"
        )));
    }
    let sat = summed_area(mask);
    for _ in 0..max_tries {
        let y = rng.random_range(0..=ih - h);
        let x = rng.random_range(0..=iw - w);
        let cov = window_coverage(&sat, y, x, h, w);
        if cov <= max_overlap {
            debug_assert!(cov <= max_overlap);
            return Ok(Some(BackgroundCrop {
                image: image.slice(s![.., y..y + h, x..x + w]).to_owned(),
                x,
                y,
            }));
        }
    }
    Ok(None)
}

/// Toy canvas options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub size: usize,
    pub palette: Vec<[f32; 3]>,
    /// Maximum offset of the object center from the canvas center, in pixels.
    pub jitter: usize,
    pub text_dim: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 64,
            palette: TOY_PALETTE.to_vec(),
            jitter: 6,
            text_dim: 1024,
        }
    }
}

/// A toy triple with its attributes and the background before the object was painted.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub sample: SceneSample,
    pub attrs: AttributeSpec,
    /// `[3, H, W]` in `[-1, 1]`.
    pub background: Array3<f32>,
}

/// Half-extent of a shape as a fraction of the canvas side.
pub fn size_radius(size: SizeClass, canvas: usize) -> f64 {
    let f = match size {
        SizeClass::Small => 0.14,
        SizeClass::Medium => 0.2,
        SizeClass::Large => 0.26,
    };
    f * canvas as f64
}

/// Exact area in pixels of a shape with half-extent `r`.
pub fn analytic_area(shape: ShapeKind, r: f64) -> f64 {
    match shape {
        ShapeKind::Ellipse => std::f64::consts::PI * r * 0.8 * r,
        ShapeKind::Rectangle => 4.0 * r * 0.75 * r,
        ShapeKind::Triangle => 2.0 * r * r,
    }
}

fn inside(shape: ShapeKind, r: f64, dx: f64, dy: f64) -> bool {
    match shape {
        ShapeKind::Ellipse => (dx / r).powi(2) + (dy / (0.8 * r)).powi(2) <= 1.0,
        ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= 0.75 * r,
        // Apex at the top, base of width 2r at the bottom, height 2r.
        ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
    }
}

const SUPERSAMPLE: usize = 4;

/// Fractional coverage of each pixel by the shape.
pub fn render_coverage(shape: ShapeKind, r: f64, cx: f64, cy: f64, size: usize) -> Array2<f64> {
    let n = SUPERSAMPLE as f64;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let mut hit = 0usize;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) / n;
                let py = y as f64 + (sy as f64 + 0.5) / n;
                hit += usize::from(inside(shape, r, px - cx, py - cy));
            }
        }
        hit as f64 / (n * n)
    })
}

/// Muted background: gray base with a slight tint, a low-frequency sinusoid and value noise.
pub fn toy_background<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Array3<f32> {
    let base: f64 = rng.random_range(0.3..0.65);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
    let amp: f64 = rng.random_range(0.05..0.12);
    let freq: f64 = rng.random_range(0.5..1.5);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    const G: usize = 5;
    let lattice = Array2::from_shape_simple_fn((G, G), || rng.random_range(-1.0..1.0f64));
    let (ca, sa) = (angle.cos(), angle.sin());
    let n = size as f64;
    let mut out = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let wave = amp * (std::f64::consts::TAU * freq * (u * ca + v * sa) + phase).sin();
            let gx = u * (G - 1) as f64;
            let gy = v * (G - 1) as f64;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let (x1, y1) = ((x0 + 1).min(G - 1), (y0 + 1).min(G - 1));
            let noise = lattice[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
                + lattice[[y0, x1]] * fx * (1.0 - fy)
                + lattice[[y1, x0]] * (1.0 - fx) * fy
                + lattice[[y1, x1]] * fx * fy;
            for c in 0..3 {
                let v = (base + tint[c] + wave + 0.05 * noise).clamp(0.0, 1.0);
                out[[c, y, x]] = (v * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

/// Paints `attrs` onto `background` centered at `(cx, cy)`. Pixels outside the
/// returned mask keep their background value exactly.
pub fn paint(background: &Array3<f32>, attrs: &AttributeSpec, cx: f64, cy: f64) -> (Array3<f32>, Array3<f32>) {
    let size = background.dim().1;
    let r = size_radius(attrs.size, size);
    let cov = render_coverage(attrs.shape, r, cx, cy, size);
    let mut image = background.clone();
    let mut mask = Array3::zeros((1, size, size));
    for ((y, x), &a) in cov.indexed_iter() {
        if a < 0.5 {
            continue;
        }
        mask[[0, y, x]] = 1.0;
        for c in 0..3 {
            let fg = attrs.color[c] * 2.0 - 1.0;
            let bg = image[[c, y, x]];
            image[[c, y, x]] = (a as f32) * fg + (1.0 - a as f32) * bg;
        }
    }
    (image, mask)
}

/// One procedural sample with uniformly drawn attributes.
pub fn make_toy_sample<R: Rng + ?Sized>(rng: &mut R, cfg: &ToyConfig, image_id: &str) -> Result<ToySample> {
    if cfg.palette.is_empty() || cfg.size < 8 {
        return Err(Error::Config("toy canvas needs a palette and side ≥ 8".into()));
    }
    let shape = ShapeKind::ALL[rng.random_range(0..3)];
    let color = cfg.palette[rng.random_range(0..cfg.palette.len())];
    let size = SizeClass::ALL[rng.random_range(0..3)];
    let attrs = AttributeSpec { shape, color, size };
    let background = toy_background(rng, cfg.size);
    let j = cfg.jitter as f64;
    let center = cfg.size as f64 / 2.0;
    let cx = center + rng.random_range(-j..=j);
    let cy = center + rng.random_range(-j..=j);
    let (image, mask) = paint(&background, &attrs, cx, cy);
    let embedding = toy_encode(&attrs, cfg.text_dim)?;
    Ok(ToySample {
        sample: SceneSample {
            image,
            mask,
            caption_id: embedding.source_id.clone(),
            embedding,
            image_id: image_id.to_string(),
        },
        attrs,
        background,
    })
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn toy_dataset(n: usize, seed: u64, cfg: &ToyConfig) -> Result<Vec<ToySample>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            make_toy_sample(&mut rng, cfg, &format!("toy{i:05}"))
        })
        .collect()
}

/// Writes `images/`, `masks/`, `backgrounds/`, `embeddings.bin` and `manifest.json`.
/// The last `test` samples form the test split.
pub fn write_toy_dataset(dir: &Path, samples: &[ToySample], test: usize) -> Result<DatasetManifest> {
    let set = TrainingSet::from_toy(samples)?;
    std::fs::create_dir_all(dir)?;
    save_embeddings(&set.table, &dir.join("embeddings.bin"))?;
    let n = samples.len();
    let mut records = Vec::with_capacity(n);
    let mut backgrounds = Vec::new();
    for (i, t) in samples.iter().enumerate() {
        let id = &t.sample.image_id;
        let image = format!("images/{id}.png");
        let mask = format!("masks/{id}.png");
        let bg = format!("backgrounds/{id}.png");
        imageio::save_rgb(t.sample.image.view(), &dir.join(&image))?;
        imageio::save_mask(t.sample.mask.view(), &dir.join(&mask))?;
        imageio::save_rgb(t.background.view(), &dir.join(&bg))?;
        let split = if i + test >= n { Split::Test } else { Split::Train };
        if split == Split::Train {
            backgrounds.push(bg);
        }
        records.push(Record {
            image_id: id.clone(),
            image,
            mask,
            embedding_rows: vec![i],
            split,
            class_id: class_of(&t.attrs),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        embeddings: "embeddings.bin".into(),
        records,
        background_pool: BackgroundPool::Files { files: backgrounds },
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

fn class_of(a: &AttributeSpec) -> u32 {
    let shape = ShapeKind::ALL.iter().position(|&s| s == a.shape).unwrap_or(0);
    let size = SizeClass::ALL.iter().position(|&s| s == a.size).unwrap_or(0);
    (shape * 3 + size) as u32
}

/// Distinct attribute ids present in a sample list.
pub fn distinct_attributes(samples: &[ToySample]) -> BTreeSet<String> {
    samples.iter().map(|t| t.attrs.id()).collect()
}

/// Object detector for toy images: pixels whose chroma (max − min channel,
/// in `[0, 1]` units) exceeds `threshold`.
pub fn color_threshold_mask(image: &Array3<f32>, threshold: f32) -> Array2<bool> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let px = [0, 1, 2].map(|c| (image[[c, y, x]] + 1.0) * 0.5);
        let hi = px.iter().cloned().fold(f32::MIN, f32::max);
        let lo = px.iter().cloned().fold(f32::MAX, f32::min);
        hi - lo > threshold
    })
}

/// Intersection over union of two binary maps; 1 when both are empty.
pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b.iter()).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
