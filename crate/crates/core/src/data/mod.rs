//! Dataset manifests, image I/O and augmentation.

mod corrupt;
mod synth;

pub use corrupt::{adjust_brightness, corrupt_test, distortion_parameter, CorruptionKind, MAX_SEVERITY};
pub use synth::{synth_sample, synth_shapes, synth_shapes_with, write_synth_dataset, SynthConfig, BACKGROUND, CIRCLE, RECTANGLE};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};

/// Pixel normalization applied on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `v / 127.5 − 1`, mapping 8-bit samples into `[-1, 1]`.
    #[default]
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default)]
    root: Option<PathBuf>,
    num_classes: usize,
    #[serde(default)]
    channels: Option<usize>,
    #[serde(default)]
    normalization: Normalization,
    #[serde(default)]
    pretrain: Vec<ManifestEntry>,
    #[serde(default)]
    seg_train: Vec<ManifestEntry>,
    #[serde(default)]
    seg_test: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    SegTrain,
    SegTest,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::SegTrain => "seg_train",
            Split::SegTest => "seg_test",
        }
    }
}

/// Pipeline stage on whose behalf files are opened. Only evaluation may read
/// the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretraining,
    HeadTraining,
    Evaluation,
}

/// A validated dataset description with paths resolved against its root.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub root: PathBuf,
    pub num_classes: usize,
    pub channels: usize,
    pub normalization: Normalization,
    pub pretrain: Vec<ManifestEntry>,
    pub seg_train: Vec<ManifestEntry>,
    pub seg_test: Vec<ManifestEntry>,
    /// Pixel count per class over every labelled split, computed on load.
    pub label_histogram: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub label: Option<LabelMap>,
}

fn resolve(root: &Path, entries: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    entries
        .into_iter()
        .map(|e| ManifestEntry {
            image: root.join(e.image),
            label: e.label.map(|l| root.join(l)),
        })
        .collect()
}

/// Reads, resolves and validates a TOML manifest.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: ManifestFile = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let root = match raw.root {
        Some(r) if r.is_absolute() => r,
        Some(r) => base.join(r),
        None => base.to_path_buf(),
    };
    if raw.num_classes < 2 {
        return Err(Error::Validation(format!("num_classes must be >= 2, got {}", raw.num_classes)));
    }
    let mut manifest = DatasetManifest {
        path: path.to_path_buf(),
        num_classes: raw.num_classes,
        channels: raw.channels.unwrap_or(3),
        normalization: raw.normalization,
        pretrain: resolve(&root, raw.pretrain),
        seg_train: resolve(&root, raw.seg_train),
        seg_test: resolve(&root, raw.seg_test),
        root,
        label_histogram: Vec::new(),
    };
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    fn validate(&mut self) -> Result<()> {
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Validation(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        let test: BTreeSet<&PathBuf> = self.seg_test.iter().map(|e| &e.image).collect();
        for (split, entries) in [(Split::SegTrain, &self.seg_train), (Split::Pretrain, &self.pretrain)] {
            if let Some(e) = entries.iter().find(|e| test.contains(&e.image)) {
                return Err(Error::Validation(format!(
                    "{} is listed in both {} and seg_test",
                    e.image.display(),
                    split.name()
                )));
            }
        }
        for (split, entries) in [(Split::SegTrain, &self.seg_train), (Split::SegTest, &self.seg_test)] {
            for e in entries {
                let label = e.label.as_ref().ok_or_else(|| {
                    Error::Validation(format!("{} entry {} has no label file", split.name(), e.image.display()))
                })?;
                if !label.is_file() {
                    return Err(Error::Data(format!("label file {} does not exist", label.display())));
                }
            }
        }
        let mut hist = vec![0usize; self.num_classes];
        for e in self.seg_train.iter().chain(&self.seg_test) {
            let path = e.label.as_ref().expect("checked above");
            let label = load_label(path)?;
            if let Some(max) = label.max_label() {
                if max as usize >= self.num_classes {
                    return Err(Error::Data(format!(
                        "{} contains label {max} but num_classes is {}",
                        path.display(),
                        self.num_classes
                    )));
                }
            }
            for (h, c) in hist.iter_mut().zip(label.histogram(self.num_classes)) {
                *h += c;
            }
        }
        self.label_histogram = hist;
        Ok(())
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::SegTrain => &self.seg_train,
            Split::SegTest => &self.seg_test,
        }
    }

    /// Loads every sample of `split`. The test split is only readable during
    /// evaluation.
    pub fn load_split(&self, split: Split, phase: Phase) -> Result<Vec<Sample>> {
        if split == Split::SegTest && phase != Phase::Evaluation {
            return Err(Error::Validation(format!(
                "{phase:?} must not read the seg_test split"
            )));
        }
        self.entries(split)
            .iter()
            .map(|e| {
                let image = load_image(&e.image, self.channels)?;
                let label = match &e.label {
                    Some(l) => {
                        let label = load_label(l)?;
                        if (label.height(), label.width()) != (image.height(), image.width()) {
                            return Err(Error::Data(format!(
                                "label {} is {}x{} but image is {}x{}",
                                l.display(),
                                label.height(),
                                label.width(),
                                image.height(),
                                image.width()
                            )));
                        }
                        Some(label)
                    }
                    None => None,
                };
                let id = e
                    .image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Sample { id, image, label })
            })
            .collect()
    }
}

/// Decodes an 8-bit image and normalizes it into `[-1, 1]`.
pub fn load_image(path: &Path, channels: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => ImageTensor::from_u8(h, w, 1, img.to_luma8().as_raw()),
        3 => ImageTensor::from_u8(h, w, 3, img.to_rgb8().as_raw()),
        c => Err(Error::Config(format!("cannot load images with {c} channels"))),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Writes a `[-1, 1]` image as 8-bit PNG (or JPEG, by extension).
pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    ensure_parent(path)?;
    let (h, w, c) = img.shape();
    let bytes = img.to_u8();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Config(format!("cannot save an image with {c} channels"))),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a single-channel PNG of raw class indices.
pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match img {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::format(
                path,
                format!("label maps must be single-channel, found {:?}", other.color()),
            ))
        }
    };
    LabelMap::new(h, w, data)
}

pub fn save_label(path: &Path, label: &LabelMap) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = (label.height() as u32, label.width() as u32);
    let max = label.max_label().unwrap_or(0);
    if max <= u8::MAX as u32 {
        let bytes: Vec<u8> = label.data().iter().map(|&v| v as u8).collect();
        image::save_buffer(path, &bytes, w, h, image::ExtendedColorType::L8)
    } else if max <= u16::MAX as u32 {
        let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            w,
            h,
            label.data().iter().map(|&v| v as u16).collect(),
        )
        .expect("buffer matches dimensions");
        buf.save(path)
    } else {
        return Err(Error::Data(format!("label {max} does not fit a 16-bit PNG")));
    }
    .map_err(|e| Error::format(path, e.to_string()))
}

/// Index into `[0, n)` after reflecting about the edges without repeating
/// them (`… 2 1 | 0 1 2 … n−1 | n−2 …`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reflect-pads on the bottom and right so both sides reach at least `size`.
pub fn reflect_pad(image: &ImageTensor, label: Option<&LabelMap>, size: usize) -> (ImageTensor, Option<LabelMap>) {
    let (h, w, c) = image.shape();
    let (nh, nw) = (h.max(size), w.max(size));
    if (nh, nw) == (h, w) {
        return (image.clone(), label.cloned());
    }
    let img = ImageTensor::from_fn(nh, nw, c, |y, x, ch| image.get(reflect(y as isize, h), reflect(x as isize, w), ch));
    let lab = label.map(|l| {
        let mut out = LabelMap::filled(nh, nw, 0);
        for y in 0..nh {
            for x in 0..nw {
                out.set(y, x, l.get(reflect(y as isize, h), reflect(x as isize, w)));
            }
        }
        out
    });
    (img, lab)
}

/// Aligned `size×size` crop at a uniformly random origin, reflect-padding
/// undersized inputs first.
pub fn random_crop<R: Rng + ?Sized>(
    image: &ImageTensor,
    label: Option<&LabelMap>,
    size: usize,
    rng: &mut R,
) -> Result<(ImageTensor, Option<LabelMap>)> {
    if size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    if let Some(l) = label {
        if (l.height(), l.width()) != (image.height(), image.width()) {
            return Err(Error::Dimension("label and image differ in size".into()));
        }
    }
    let (img, lab) = reflect_pad(image, label, size);
    let oy = rng.random_range(0..=img.height() - size);
    let ox = rng.random_range(0..=img.width() - size);
    let cropped = img.crop(oy, ox, size, size)?;
    let lab = lab.map(|l| l.crop(oy, ox, size, size)).transpose()?;
    Ok((cropped, lab))
}

pub fn hflip_image(image: &ImageTensor) -> ImageTensor {
    let (h, w, c) = image.shape();
    ImageTensor::from_fn(h, w, c, |y, x, ch| image.get(y, w - 1 - x, ch))
}

pub fn hflip_label(label: &LabelMap) -> LabelMap {
    let (h, w) = (label.height(), label.width());
    let mut out = label.clone();
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, label.get(y, w - 1 - x));
        }
    }
    out
}

/// Horizontal flip with probability 1/2, applied to both image and label.
/// Returns whether the flip happened.
pub fn random_flip<R: Rng + ?Sized>(
    image: &ImageTensor,
    label: Option<&LabelMap>,
    rng: &mut R,
) -> (ImageTensor, Option<LabelMap>, bool) {
    if rng.random_bool(0.5) {
        (hflip_image(image), label.map(hflip_label), true)
    } else {
        (image.clone(), label.cloned(), false)
    }
}
