use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::render::{class_params, render, GlyphParams, Placement};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GLYPH_FILE: &str = "glyphs.csv";
const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub subtlety: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 250,
            image_size: 64,
            subtlety: 0.3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.per_class < 2 {
            return Err(Error::Config(format!("per_class must be >= 2, got {}", self.per_class)));
        }
        if !(0.0..=1.0).contains(&self.subtlety) {
            return Err(Error::Config(format!("subtlety must be in [0, 1], got {}", self.subtlety)));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        Ok(())
    }

    /// Test items per class under the stratified 80/20 split; both splits
    /// always keep at least one item.
    pub fn test_per_class(&self) -> usize {
        ((self.per_class as f64 * TEST_FRACTION).round() as usize).clamp(1, self.per_class - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
            return Err(Error::Data(format!(
                "{}: expected header path,label,split",
                path.display()
            )));
        }
        let rows = r
            .deserialize()
            .enumerate()
            .map(|(i, row)| row.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 2))))
            .collect::<Result<Vec<ManifestRow>>>()?;
        Ok(Self { rows })
    }

    pub fn count(&self, label: usize, split: Split) -> usize {
        self.rows.iter().filter(|r| r.label == label && r.split == split).count()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("checked io kind");
    }
    Error::Data(format!("{}: {e}", path.display()))
}

/// Ground-truth description of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphRecord {
    pub path: String,
    pub label: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub inner_ratio: f64,
    pub notch_depth: f64,
    pub bar_thickness: f64,
}

impl GlyphRecord {
    pub fn params(&self) -> GlyphParams {
        GlyphParams {
            inner_ratio: self.inner_ratio,
            notch_depth: self.notch_depth,
            bar_thickness: self.bar_thickness,
        }
    }

    pub fn placement(&self) -> Placement {
        Placement {
            cx: self.cx,
            cy: self.cy,
            radius: self.radius,
        }
    }
}

pub fn read_glyphs(dir: &Path) -> Result<Vec<GlyphRecord>> {
    let path = dir.join(GLYPH_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, planar: &[f32], height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    let mut img = RgbImage::new(width as u32, height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let i = y as usize * width + x as usize;
        *px = image::Rgb([0, 1, 2].map(|c| to_u8(planar[c * plane + i] as f64)));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

/// Render the synthetic dataset into `out_dir`: PNG images, `manifest.csv`
/// and the ground-truth sidecar `glyphs.csv`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let n_test = spec.test_per_class();
    let mut manifest = Manifest::default();
    let mut glyphs = Vec::new();
    let size = spec.image_size;
    for class in 0..spec.num_classes {
        let params = class_params(class, spec.num_classes, spec.subtlety);
        for idx in 0..spec.per_class {
            let mut rng = stream(spec.seed, Stream::Dataset, &[class as u64, idx as u64]);
            let (pixels, at) = render(&params, size, &mut rng);
            let rel = format!("images/c{class:03}_{idx:05}.png");
            let planar: Vec<f32> = pixels.iter().map(|&v| v as f32).collect();
            save_png(&out_dir.join(&rel), &planar, size, size)?;
            let split = if idx < spec.per_class - n_test { Split::Train } else { Split::Test };
            manifest.rows.push(ManifestRow {
                path: rel.clone(),
                label: class,
                split,
            });
            glyphs.push(GlyphRecord {
                path: rel,
                label: class,
                cx: at.cx,
                cy: at.cy,
                radius: at.radius,
                inner_ratio: params.inner_ratio,
                notch_depth: params.notch_depth,
                bar_thickness: params.bar_thickness,
            });
        }
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let gpath = out_dir.join(GLYPH_FILE);
    let mut w = csv::Writer::from_path(&gpath).map_err(|e| csv_err(&gpath, e))?;
    for g in &glyphs {
        w.serialize(g).map_err(|e| csv_err(&gpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&gpath, e))?;
    log::info!(
        "generated {} images ({} classes) in {}",
        manifest.rows.len(),
        spec.num_classes,
        out_dir.display()
    );
    Ok(manifest)
}

/// Images held in memory as planar `[3, S, S]` floats in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub num_classes: usize,
    pub image_size: usize,
    pixels: Vec<f32>,
}

fn decode_image(path: &Path, size: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::CorruptImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            out[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Load every image named by the manifest at `manifest_path`, resizing to
/// `image_size` where needed. With `num_classes` set, labels must fall below
/// it; otherwise the class count is one past the largest label.
pub fn load_dataset(manifest_path: &Path, image_size: usize, num_classes: Option<usize>) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    if manifest.rows.is_empty() {
        return Err(Error::Data(format!("{} lists no images", manifest_path.display())));
    }
    let max_label = manifest.rows.iter().map(|r| r.label).max().unwrap_or(0);
    let num_classes = match num_classes {
        Some(c) => {
            if let Some(bad) = manifest.rows.iter().find(|r| r.label >= c) {
                return Err(Error::Data(format!(
                    "label {} of {} outside [0, {c})",
                    bad.label, bad.path
                )));
            }
            c
        }
        None => max_label + 1,
    };
    for split in [Split::Train, Split::Test] {
        if !manifest.rows.iter().any(|r| r.split == split) {
            return Err(Error::Data(format!("{} has an empty {split:?} split", manifest_path.display())));
        }
    }
    let mut pixels = Vec::with_capacity(manifest.rows.len() * 3 * image_size * image_size);
    for row in &manifest.rows {
        pixels.extend(decode_image(&root.join(&row.path), image_size)?);
    }
    Ok(Dataset {
        root,
        rows: manifest.rows,
        num_classes,
        image_size,
        pixels,
    })
}

impl Dataset {
    /// Build an in-memory dataset directly from planar pixels.
    pub fn from_parts(rows: Vec<ManifestRow>, num_classes: usize, image_size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != rows.len() * 3 * image_size * image_size {
            return Err(Error::shape("dataset", "pixel buffer does not match item count"));
        }
        Ok(Self {
            root: PathBuf::new(),
            rows,
            num_classes,
            image_size,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn item_len(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.rows[i].label
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.label(i)).collect()
    }

    /// Stack items into a `[B, 3, S, S]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.item_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        let s = self.image_size;
        Tensor::from_vec(&[idx.len(), 3, s, s], data).expect("consistent item size")
    }

    /// Seeded shuffle of `items` cut into full batches; a trailing partial
    /// batch is dropped.
    pub fn shuffled_batches(items: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order = items.to_vec();
        order.shuffle(&mut stream(seed, Stream::Shuffle, &[epoch]));
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() == batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn class_counts(&self, split: Split) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.split == split) {
            *m.entry(r.label).or_insert(0) += 1;
        }
        m
    }
}
