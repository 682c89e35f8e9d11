//! Dataset ingestion, splitting, geometric/photometric transforms and
//! batching.

mod batch;
pub mod synthetic;
mod transform;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{make_batches, Batch, Batches};
pub use transform::{
    augment, flip_horizontal, flip_vertical, pad_reflect, resize_bilinear, resize_crop, rotate,
    AugmentParams, AugmentSpec,
};

/// PNG gray levels above this become crack pixels.
pub const MASK_THRESHOLD: u8 = 127;

/// One image/mask pair. `image` is `3×H×W` in [0, 1]; `mask` is `1×H×W` with
/// values exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub name: String,
}

impl Sample {
    pub fn new(name: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        let name = name.into();
        let (ic, ih, iw) = chw(&image)?;
        let (mc, mh, mw) = chw(&mask)?;
        if ic != 3 || mc != 1 || (ih, iw) != (mh, mw) {
            return Err(Error::Dimension(format!(
                "sample {name}: image {:?} and mask {:?} must be 3×H×W and 1×H×W",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dimension(format!("sample {name}: mask is not binary")));
        }
        Ok(Self { image, mask, name })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

pub(crate) fn chw(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Dimension(format!("expected a C×H×W tensor, got {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub name: String,
}

/// Image/mask file pairs, sorted by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Entries whose names appear in `names`, in the order given.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let by_name: BTreeMap<&str, &IndexEntry> =
            self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let entries = names
            .iter()
            .map(|n| {
                by_name
                    .get(n.as_str())
                    .map(|e| (*e).clone())
                    .ok_or_else(|| Error::Ingestion(format!("manifest names unknown sample {n}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if file_name.starts_with('.') {
            continue;
        }
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            return Err(Error::Format {
                path,
                reason: "expected a .png file".into(),
            });
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: "file name is not valid UTF-8".into(),
            })?
            .to_string();
        out.insert(stem, path);
    }
    Ok(out)
}

/// Pairs `<root>/images/*.png` with `<root>/masks/*.png` by file stem.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    if !root.is_dir() {
        return Err(Error::Ingestion(format!("{} is not a directory", root.display())));
    }
    match (images_dir.is_dir(), masks_dir.is_dir()) {
        (true, true) => {}
        (false, false) if fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_none() => {
            log::warn!("dataset root {} is empty", root.display());
            return Ok(DatasetIndex::default());
        }
        (has_images, _) => {
            let missing = if has_images { &masks_dir } else { &images_dir };
            return Err(Error::Ingestion(format!(
                "missing directory {}",
                missing.display()
            )));
        }
    }
    let images = png_stems(&images_dir)?;
    let mut masks = png_stems(&masks_dir)?;
    let mut orphans = Vec::new();
    let mut entries = Vec::with_capacity(images.len());
    for (name, image) in images {
        match masks.remove(&name) {
            Some(mask) => entries.push(IndexEntry { image, mask, name }),
            None => orphans.push(format!("image {name} has no mask")),
        }
    }
    orphans.extend(masks.into_keys().map(|n| format!("mask {n} has no image")));
    if !orphans.is_empty() {
        return Err(Error::Ingestion(format!(
            "unpaired files: {}",
            orphans.join(", ")
        )));
    }
    if entries.is_empty() {
        log::warn!("dataset at {} contains no image pairs", root.display());
    }
    Ok(DatasetIndex { entries })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB PNG as a `3×H×W` tensor scaled to [0, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Reads a grayscale PNG mask, thresholding at [`MASK_THRESHOLD`].
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let img = open_image(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .as_raw()
        .iter()
        .map(|&v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::new([1, h, w], data)
}

pub fn load_samples(index: &DatasetIndex) -> Result<Vec<Sample>> {
    index
        .entries
        .iter()
        .map(|e| Sample::new(e.name.clone(), read_rgb(&e.image)?, read_mask(&e.mask)?))
        .collect()
}

/// Writes a sample back to `<root>/images/<name>.png` and `<root>/masks/<name>.png`.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let plane = h * w;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((sample.image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img_path = root.join("images").join(format!("{}.png", sample.name));
    image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("buffer sized from the tensor")
        .save(&img_path)
        .map_err(|source| Error::Image {
            path: img_path.clone(),
            source,
        })?;
    let mask: Vec<u8> = sample
        .mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    let mask_path = root.join("masks").join(format!("{}.png", sample.name));
    image::GrayImage::from_raw(w as u32, h as u32, mask)
        .expect("buffer sized from the tensor")
        .save(&mask_path)
        .map_err(|source| Error::Image {
            path: mask_path.clone(),
            source,
        })
}

/// Number of training entries for `n` samples at `ratio`: `ceil(ratio·n)`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).min(n)
}

/// Seeded random partition into train and test. `train_size` overrides the
/// ratio rule when given.
pub fn split(
    index: &DatasetIndex,
    ratio: f64,
    seed: u64,
    train_size: Option<usize>,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n_train = train_size.unwrap_or_else(|| train_count(index.len(), ratio));
    if n_train > index.len() {
        return Err(Error::Config(format!(
            "train size {n_train} exceeds the {} available samples",
            index.len()
        )));
    }
    let mut order = index.entries.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = order.split_off(n_train);
    let mut train = order;
    train.sort_by(|a, b| a.name.cmp(&b.name));
    test.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((DatasetIndex { entries: train }, DatasetIndex { entries: test }))
}

/// One name per line.
pub fn write_manifest(path: &Path, index: &DatasetIndex) -> Result<()> {
    let mut text = String::new();
    for name in index.names() {
        text.push_str(name);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
