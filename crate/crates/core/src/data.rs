//! Desk-scale datasets: a procedural mini-dSprites generator with known
//! ground-truth factors, IDX image/label files, and deterministic batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FactorTable;
use crate::ndgrad::Array;
use crate::rng::{Stream, StreamKind};

/// What a generative factor controls in the renderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorRole {
    Shape,
    Scale,
    PosX,
    PosY,
    Rotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub name: String,
    pub cardinality: usize,
    pub role: FactorRole,
}

/// Images plus their ground-truth factor assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Array,
    factors: FactorTable,
    resolution: usize,
}

/// Per-layer supervision targets derived from one factor column.
#[derive(Clone, Debug)]
pub struct LayerLabels {
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Array, factors: FactorTable, resolution: usize) -> Result<Self> {
        if images.rank() != 2
            || images.shape()[0] != factors.num_samples()
            || images.shape()[1] != resolution * resolution
        {
            return Err(Error::Validation(format!(
                "images {:?} do not match {} samples at {}×{}",
                images.shape(),
                factors.num_samples(),
                resolution,
                resolution
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            images,
            factors,
            resolution,
        })
    }

    pub fn images(&self) -> &Array {
        &self.images
    }

    pub fn factors(&self) -> &FactorTable {
        &self.factors
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_dim(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn gather_images(&self, indices: &[usize]) -> Result<Array> {
        self.images.gather_rows(indices)
    }

    /// The rows at `indices`, as their own dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.images.gather_rows(indices)?,
            self.factors.gather(indices)?,
            self.resolution,
        )
    }

    /// The dataset tiled `times` times.
    pub fn replicate(&self, times: usize) -> Result<Dataset> {
        if times == 0 {
            return Err(Error::Validation("replicate count must be ≥ 1".into()));
        }
        let indices: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        Dataset::new(
            self.images.gather_rows(&indices)?,
            self.factors.gather(&indices)?,
            self.resolution,
        )
    }

    /// Supervision targets for each layer, factors resolved by name.
    pub fn layer_labels(&self, factor_names: &[String]) -> Result<Vec<LayerLabels>> {
        factor_names
            .iter()
            .map(|name| {
                let k = self
                    .factors
                    .names()
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "no factor named \"{name}\" (have: {})",
                            self.factors.names().join(", ")
                        ))
                    })?;
                Ok(LayerLabels {
                    labels: self.factors.column(k),
                    classes: self.factors.cardinality(k),
                })
            })
            .collect()
    }
}

/// Default layer→factor assignment: coarse factors shallow, shape deepest.
pub fn default_layer_factors(layers: usize) -> Result<Vec<String>> {
    let order = ["scale", "pos_x", "shape"];
    if layers == 0 || layers > order.len() {
        return Err(Error::Validation(format!(
            "no default factor mapping for {layers} layers; name layer factors explicitly"
        )));
    }
    Ok(order[..layers].iter().map(|s| s.to_string()).collect())
}

const SHAPE_KINDS: usize = 3; // square, ellipse, cross
const SCALE_STEPS: usize = 3; // 0.5, 0.7, 0.9

#[derive(Clone, Copy)]
struct RenderParams {
    kind: usize,
    scale: f64,
    cx: f64,
    cy: f64,
    theta: f64,
}

fn render_params(specs: &[FactorSpec], combo: &[usize], res: usize) -> RenderParams {
    let r = res as f64;
    let mut p = RenderParams {
        kind: 0,
        scale: 0.9,
        cx: 0.5 * r,
        cy: 0.5 * r,
        theta: 0.0,
    };
    for (spec, &idx) in specs.iter().zip(combo) {
        let grid = |n: usize| {
            let u = if n <= 1 {
                0.5
            } else {
                idx as f64 / (n - 1) as f64
            };
            r * (0.25 + 0.5 * u)
        };
        match spec.role {
            FactorRole::Shape => p.kind = idx,
            FactorRole::Scale => p.scale = 0.5 + 0.2 * idx as f64,
            FactorRole::PosX => p.cx = grid(spec.cardinality),
            FactorRole::PosY => p.cy = grid(spec.cardinality),
            FactorRole::Rotation => {
                p.theta = std::f64::consts::FRAC_PI_2 * idx as f64 / spec.cardinality as f64
            }
        }
    }
    p
}

/// Axis-aligned half-extents of the shape's support, for the canvas check.
fn support_half_extents(p: &RenderParams, res: usize) -> (f64, f64) {
    let h = p.scale * res as f64 / 4.0;
    let s = p.theta.sin().abs();
    let c = p.theta.cos().abs();
    match p.kind {
        1 => {
            // ellipse semi-axes (h, 0.6h)
            let rx = ((h * c).powi(2) + (0.6 * h * s).powi(2)).sqrt();
            let ry = ((h * s).powi(2) + (0.6 * h * c).powi(2)).sqrt();
            (rx, ry)
        }
        _ => {
            let e = h * (c + s);
            (e, e)
        }
    }
}

fn pixel_inside(p: &RenderParams, h: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - p.cx, py - p.cy);
    let (sin, cos) = (p.theta.sin(), p.theta.cos());
    let u = dx * cos + dy * sin;
    let v = -dx * sin + dy * cos;
    match p.kind {
        0 => u.abs() <= h && v.abs() <= h,
        1 => (u / h).powi(2) + (v / (0.6 * h)).powi(2) <= 1.0,
        2 => {
            let third = h / 3.0;
            (u.abs() <= third && v.abs() <= h) || (u.abs() <= h && v.abs() <= third)
        }
        _ => unreachable!("shape kind validated"),
    }
}

fn render(p: &RenderParams, res: usize, out: &mut [f64]) {
    let h = p.scale * res as f64 / 4.0;
    for y in 0..res {
        for x in 0..res {
            let inside = pixel_inside(p, h, x as f64 + 0.5, y as f64 + 0.5);
            out[y * res + x] = if inside { 1.0 } else { 0.0 };
        }
    }
}

fn combo_description(specs: &[FactorSpec], combo: &[usize]) -> String {
    specs
        .iter()
        .zip(combo)
        .map(|(s, &v)| format!("{}={}", s.name, v))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Render the full factorial grid of the given factor specs. `_seed` is part
/// of the interface for parity with the other constructors; the grid itself
/// is canonical (first factor slowest).
pub fn gen_minidsprites(specs: &[FactorSpec], resolution: usize, _seed: u64) -> Result<Dataset> {
    if !matches!(resolution, 32 | 64) {
        return Err(Error::Validation(format!(
            "resolution must be 32 or 64, got {resolution}"
        )));
    }
    if specs.is_empty() {
        return Err(Error::Validation("at least one factor required".into()));
    }
    let mut total: usize = 1;
    for spec in specs {
        if spec.cardinality == 0 {
            return Err(Error::Validation(format!(
                "factor \"{}\" has cardinality 0",
                spec.name
            )));
        }
        let limit = match spec.role {
            FactorRole::Shape => SHAPE_KINDS,
            FactorRole::Scale => SCALE_STEPS,
            _ => usize::MAX,
        };
        if spec.cardinality > limit {
            return Err(Error::Validation(format!(
                "factor \"{}\" ({:?}) supports at most {} values",
                spec.name, spec.role, limit
            )));
        }
        total = total.saturating_mul(spec.cardinality);
    }
    if total > 1_000_000 {
        return Err(Error::Validation(format!(
            "factorial grid has {total} combinations (limit 10^6)"
        )));
    }

    let dim = resolution * resolution;
    let mut images = vec![0.0; total * dim];
    let mut values = Vec::with_capacity(total * specs.len());
    let mut combo = vec![0usize; specs.len()];
    let r = resolution as f64;
    for row in 0..total {
        let mut idx = row;
        for (slot, spec) in combo.iter_mut().zip(specs).rev() {
            *slot = idx % spec.cardinality;
            idx /= spec.cardinality;
        }
        let p = render_params(specs, &combo, resolution);
        let (rx, ry) = support_half_extents(&p, resolution);
        if p.cx - rx < 0.0 || p.cx + rx > r || p.cy - ry < 0.0 || p.cy + ry > r {
            return Err(Error::Validation(format!(
                "combination [{}] leaves the {}×{} canvas",
                combo_description(specs, &combo),
                resolution,
                resolution
            )));
        }
        render(&p, resolution, &mut images[row * dim..(row + 1) * dim]);
        values.extend_from_slice(&combo);
    }

    let table = FactorTable::new(
        specs.iter().map(|s| s.name.clone()).collect(),
        specs.iter().map(|s| s.cardinality).collect(),
        values,
    )?;
    Dataset::new(Array::new(vec![total, dim], images)?, table, resolution)
}

/// JSON spec for `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub resolution: usize,
    pub factors: Vec<FactorSpec>,
    #[serde(default = "default_replicate")]
    pub replicate: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_replicate() -> usize {
    1
}

pub fn generate_from_config(cfg: &DataGenConfig) -> Result<Dataset> {
    let base = gen_minidsprites(&cfg.factors, cfg.resolution, cfg.seed)?;
    if cfg.replicate > 1 {
        base.replicate(cfg.replicate)
    } else {
        Ok(base)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated while reading {what}"),
        });
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

/// Parse an IDX image file into (pixels scaled to [0,1], n, rows, cols).
pub fn read_idx_images(path: &Path) -> Result<(Array, usize, usize)> {
    let bytes = fs::read(path)?;
    let magic = idx_read_u32(&bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad image magic 0x{magic:08x}, want 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = idx_read_u32(&bytes, 4, "image count")? as usize;
    let rows = idx_read_u32(&bytes, 8, "row count")? as usize;
    let cols = idx_read_u32(&bytes, 12, "column count")? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            detail: format!("expected {expected} bytes, file has {}", bytes.len()),
        });
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Array::new(vec![n, rows * cols], data)?, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = idx_read_u32(&bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad label magic 0x{magic:08x}, want 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n = idx_read_u32(&bytes, 4, "label count")? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            offset: bytes.len().min(8 + n) as u64,
            detail: format!("expected {} bytes, file has {}", 8 + n, bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Load an IDX image/label pair as a dataset with one "digit" factor.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (images, rows, cols) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::Format {
            offset: 4,
            detail: format!(
                "{} labels for {} images",
                labels.len(),
                images.shape()[0]
            ),
        });
    }
    if rows != cols {
        return Err(Error::Format {
            offset: 8,
            detail: format!("non-square images {rows}×{cols} unsupported"),
        });
    }
    let cardinality = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let table = FactorTable::new(
        vec!["digit".into()],
        vec![cardinality.max(2)],
        labels.iter().map(|&l| l as usize).collect(),
    )?;
    Dataset::new(images, table, rows)
}

pub fn write_idx_images(path: &Path, images: &Array, rows: usize, cols: usize) -> Result<()> {
    if images.rank() != 2 || images.shape()[1] != rows * cols {
        return Err(Error::Validation(format!(
            "images {:?} do not factor as {}×{}",
            images.shape(),
            rows,
            cols
        )));
    }
    let n = images.shape()[0];
    let mut bytes = Vec::with_capacity(16 + n * rows * cols);
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    bytes.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Factor sidecar stored next to images.idx in a dataset directory.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorSidecar {
    resolution: usize,
    names: Vec<String>,
    cardinalities: Vec<usize>,
    values: Vec<usize>,
}

/// Write `<dir>/images.idx` and `<dir>/factors.json`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_idx_images(
        &dir.join("images.idx"),
        dataset.images(),
        dataset.resolution(),
        dataset.resolution(),
    )?;
    let table = dataset.factors();
    let sidecar = FactorSidecar {
        resolution: dataset.resolution(),
        names: table.names().to_vec(),
        cardinalities: (0..table.num_factors()).map(|k| table.cardinality(k)).collect(),
        values: (0..dataset.len())
            .flat_map(|s| (0..table.num_factors()).map(move |k| (s, k)))
            .map(|(s, k)| table.value(s, k))
            .collect(),
    };
    let mut file = fs::File::create(dir.join("factors.json"))?;
    serde_json::to_writer_pretty(&mut file, &sidecar)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (images, rows, cols) = read_idx_images(&dir.join("images.idx"))?;
    if rows != cols {
        return Err(Error::Format {
            offset: 8,
            detail: format!("non-square images {rows}×{cols} unsupported"),
        });
    }
    let mut json = String::new();
    fs::File::open(dir.join("factors.json"))?.read_to_string(&mut json)?;
    let sidecar: FactorSidecar = serde_json::from_str(&json)?;
    if sidecar.resolution != rows {
        return Err(Error::Validation(format!(
            "sidecar resolution {} vs IDX {}",
            sidecar.resolution, rows
        )));
    }
    let table = FactorTable::new(sidecar.names, sidecar.cardinalities, sidecar.values)?;
    Dataset::new(images, table, rows)
}

/// Open a dataset given either a saved dataset directory or a generator
/// spec JSON file.
pub fn open_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return load_dataset(path);
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: DataGenConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    generate_from_config(&cfg)
}

/// One training batch: images plus the dataset row indices they came from.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Array,
    pub indices: Vec<usize>,
}

/// Infinite epoch-wise shuffled batch stream. Shuffles are deterministic in
/// (seed, epoch); the final short batch of each epoch is dropped.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

pub fn batch_iter(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::Validation(format!(
            "batch size {} invalid for {} samples",
            batch_size,
            dataset.len()
        )));
    }
    let order = Stream::derive(seed, StreamKind::Shuffle, 0).permutation(dataset.len());
    Ok(BatchIter {
        dataset,
        batch_size,
        seed,
        epoch: 0,
        order,
        pos: 0,
    })
}

impl BatchIter<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.order =
                Stream::derive(self.seed, StreamKind::Shuffle, self.epoch).permutation(self.order.len());
            self.pos = 0;
        }
        let indices = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        let images = self
            .dataset
            .gather_images(&indices)
            .expect("indices from permutation are in range");
        Some(Batch { images, indices })
    }
}
