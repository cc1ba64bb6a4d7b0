//! Core rasters, class-space conventions, dataset containers, and file IO.
//!
//! Class indexing is 0-based throughout: known classes are `0..K-1`, the
//! single unknown class is `K`, and `255` is the ignore sentinel excluded
//! from every loss and metric. Labels are stored as 8-bit single-channel
//! PNGs, images as 24-bit RGB PNGs.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Ignore sentinel for label maps.
pub const IGNORE_INDEX: u8 = 255;

/// Counts and index conventions for known classes, the unknown class,
/// head classes, and target-private classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpace {
    /// Number of known classes K (indices `0..K-1`).
    pub num_known: usize,
    /// Number of target-private classes collapsed into "unknown" at eval.
    pub num_private: usize,
    /// High-frequency known classes used by hard-unknown refinement.
    pub head_classes: BTreeSet<u8>,
}

impl ClassSpace {
    pub fn new(num_known: usize, num_private: usize) -> Result<Self> {
        let cs = ClassSpace {
            num_known,
            num_private,
            head_classes: BTreeSet::new(),
        };
        cs.validate()?;
        Ok(cs)
    }

    pub fn with_head_classes(mut self, head: impl IntoIterator<Item = u8>) -> Result<Self> {
        self.head_classes = head.into_iter().collect();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_known < 1 {
            return Err(Error::validation("at least one known class is required"));
        }
        if self.num_known + 1 >= usize::from(IGNORE_INDEX) {
            return Err(Error::validation(format!(
                "num_known = {} leaves no room below the ignore sentinel",
                self.num_known
            )));
        }
        for &c in &self.head_classes {
            if usize::from(c) >= self.num_known {
                return Err(Error::validation(format!(
                    "head class {c} is not a known class (K = {})",
                    self.num_known
                )));
            }
        }
        Ok(())
    }

    /// Index of the single unknown class (= K).
    pub fn unknown_index(&self) -> u8 {
        self.num_known as u8
    }

    /// Channels of an expanded classifier head: K known + 1 unknown.
    pub fn num_channels_expanded(&self) -> usize {
        self.num_known + 1
    }

    /// True if `v` is a legal label value under this class space.
    pub fn is_valid_label(&self, v: u8) -> bool {
        v == IGNORE_INDEX || usize::from(v) <= self.num_known
    }
}

/// Per-pixel class-index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub values: Vec<u8>,
    pub width: usize,
    pub height: usize,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        LabelMap {
            values: vec![fill; width * height],
            width,
            height,
        }
    }

    pub fn from_values(values: Vec<u8>, width: usize, height: usize) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "label buffer has {} values for {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(LabelMap {
            values,
            width,
            height,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count(&self, value: u8) -> usize {
        self.values.iter().filter(|&&v| v == value).count()
    }
}

/// Per-pixel {0,1} raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Vec<u8>,
    pub width: usize,
    pub height: usize,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            bits: vec![0; width * height],
            width,
            height,
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        BinaryMask {
            bits: vec![1; width * height],
            width,
            height,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// True if every set pixel of `other` is also set here.
    pub fn is_superset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(&a, &b)| b == 0 || a == 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits.len() != self.width * self.height {
            return Err(Error::DimensionMismatch(format!(
                "mask buffer has {} bits for {}x{}",
                self.bits.len(),
                self.width,
                self.height
            )));
        }
        if let Some(b) = self.bits.iter().find(|&&b| b > 1) {
            return Err(Error::validation(format!("mask value {b} is not binary")));
        }
        Ok(())
    }
}

/// Per-pixel softmax distribution over C classes, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    /// Layout `[channel][row][col]`, length `channels * width * height`.
    pub probs: Vec<f64>,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
}

impl ProbMap {
    pub fn new(channels: usize, width: usize, height: usize) -> Self {
        ProbMap {
            probs: vec![0.0; channels * width * height],
            channels,
            width,
            height,
        }
    }

    #[inline]
    pub fn at(&self, channel: usize, pixel: usize) -> f64 {
        self.probs[channel * self.width * self.height + pixel]
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Check the per-pixel normalization invariant to `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.num_pixels();
        for p in 0..n {
            let mut sum = 0.0;
            for c in 0..self.channels {
                let v = self.at(c, p);
                if !(0.0..=1.0 + tol).contains(&v) {
                    return Err(Error::validation(format!(
                        "probability {v} out of [0,1] at pixel {p} channel {c}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::validation(format!(
                    "pixel {p} probabilities sum to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// An RGB raster paired with a per-pixel class-index label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    /// Interleaved RGB, row-major, length `3 * width * height`.
    pub pixels: Vec<u8>,
    pub label: LabelMap,
    pub width: usize,
    pub height: usize,
}

impl LabeledImage {
    pub fn new(pixels: Vec<u8>, label: LabelMap, width: usize, height: usize) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::DimensionMismatch(format!(
                "pixel buffer has {} bytes for {}x{} RGB",
                pixels.len(),
                width,
                height
            )));
        }
        if label.width != width || label.height != height {
            return Err(Error::DimensionMismatch(format!(
                "label is {}x{} but image is {}x{}",
                label.width, label.height, width, height
            )));
        }
        Ok(LabeledImage {
            pixels,
            label,
            width,
            height,
        })
    }

    /// Solid-color image with an all-`fill` label; mostly for tests.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3], fill: u8) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        LabeledImage {
            pixels,
            label: LabelMap::new(width, height, fill),
            width,
            height,
        }
    }

    #[inline]
    pub fn rgb_at(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    TargetTrain,
    TargetVal,
}

impl DomainTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::TargetTrain => "target_train",
            DomainTag::TargetVal => "target_val",
        }
    }
}

/// Ordered collection of labeled images sharing one class space.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<LabeledImage>,
    pub domain_tag: DomainTag,
    pub class_space: ClassSpace,
}

impl Dataset {
    pub fn new(items: Vec<LabeledImage>, domain_tag: DomainTag, class_space: ClassSpace) -> Self {
        Dataset {
            items,
            domain_tag,
            class_space,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Index of the offending item, when the problem is item-specific.
    pub item: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.item {
            Some(i) => write!(f, "item {}: {}", i, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Check every dataset and image invariant; violations are data, not errors.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = ds.class_space.validate() {
        out.push(Violation {
            item: None,
            message: e.to_string(),
        });
    }
    let unknown = ds.class_space.unknown_index();
    for (i, item) in ds.items.iter().enumerate() {
        if item.pixels.len() != 3 * item.width * item.height {
            out.push(Violation {
                item: Some(i),
                message: format!(
                    "pixel buffer has {} bytes for {}x{}",
                    item.pixels.len(),
                    item.width,
                    item.height
                ),
            });
        }
        if item.label.width != item.width || item.label.height != item.height {
            out.push(Violation {
                item: Some(i),
                message: format!(
                    "label is {}x{} but image is {}x{}",
                    item.label.width, item.label.height, item.width, item.height
                ),
            });
        }
        for (p, &v) in item.label.values.iter().enumerate() {
            if !ds.class_space.is_valid_label(v) {
                out.push(Violation {
                    item: Some(i),
                    message: format!(
                        "label value {} at pixel ({}, {}) outside 0..={} and {}",
                        v,
                        p % item.label.width,
                        p / item.label.width,
                        unknown,
                        IGNORE_INDEX
                    ),
                });
                break; // one out-of-range report per item is enough
            }
        }
        if ds.domain_tag == DomainTag::Source && item.label.values.contains(&unknown) {
            out.push(Violation {
                item: Some(i),
                message: "source label contains the unknown class".to_string(),
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

/// Load an RGB image and an optional label map; a missing label path yields
/// an all-ignore label.
pub fn load_labeled_image(
    image_path: &Path,
    label_path: Option<&Path>,
    class_space: &ClassSpace,
) -> Result<LabeledImage> {
    let img = image::ImageReader::open(image_path)
        .map_err(|e| Error::io(image_path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: image_path.into(),
            source: e,
        })?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::validation(format!(
                "{}: expected 8-bit RGB, got {:?}",
                image_path.display(),
                other.color()
            )))
        }
    };
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.into_raw();

    let label = match label_path {
        None => LabelMap::new(width, height, IGNORE_INDEX),
        Some(lp) => {
            let limg = image::ImageReader::open(lp)
                .map_err(|e| Error::io(lp, e))?
                .decode()
                .map_err(|e| Error::Image {
                    path: lp.into(),
                    source: e,
                })?;
            let gray = match limg {
                image::DynamicImage::ImageLuma8(buf) => buf,
                other => {
                    return Err(Error::validation(format!(
                        "{}: expected 8-bit single-channel label, got {:?}",
                        lp.display(),
                        other.color()
                    )))
                }
            };
            if gray.width() as usize != width || gray.height() as usize != height {
                return Err(Error::DimensionMismatch(format!(
                    "label {} is {}x{} but image {} is {}x{}",
                    lp.display(),
                    gray.width(),
                    gray.height(),
                    image_path.display(),
                    width,
                    height
                )));
            }
            let values = gray.into_raw();
            for (p, &v) in values.iter().enumerate() {
                if !class_space.is_valid_label(v) {
                    return Err(Error::validation(format!(
                        "{}: label value {} at pixel ({}, {}) outside 0..={} and {}",
                        lp.display(),
                        v,
                        p % width,
                        p / width,
                        class_space.unknown_index(),
                        IGNORE_INDEX
                    )));
                }
            }
            LabelMap::from_values(values, width, height)?
        }
    };

    LabeledImage::new(pixels, label, width, height)
}

/// Save image and label as PNGs; loading them back reproduces the input
/// bit-exactly.
pub fn save_labeled_image(img: &LabeledImage, image_path: &Path, label_path: &Path) -> Result<()> {
    save_rgb_png(&img.pixels, img.width, img.height, image_path)?;
    save_gray_png(&img.label.values, img.width, img.height, label_path)
}

pub fn save_rgb_png(pixels: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::DimensionMismatch("RGB buffer does not match size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn save_gray_png(values: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::DimensionMismatch("label buffer does not match size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory layout: <root>/{images,labels}/<name>.png + dataset.txt
// ---------------------------------------------------------------------------

/// Write a dataset under `root` with the standard layout. Target-train
/// splits, being unlabeled, still get all-ignore label files so the layout
/// stays uniform.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&labels).map_err(|e| Error::io(&labels, e))?;
    let mut manifest = String::new();
    for (i, item) in ds.items.iter().enumerate() {
        let name = item_name(i);
        save_labeled_image(
            item,
            &images.join(format!("{name}.png")),
            &labels.join(format!("{name}.png")),
        )?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let manifest_path = root.join("dataset.txt");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

/// Load a dataset written by [`save_dataset`], in manifest order. A missing
/// `labels/` entry for a listed name falls back to an all-ignore label.
pub fn load_dataset(root: &Path, class_space: &ClassSpace, tag: DomainTag) -> Result<Dataset> {
    let manifest_path = root.join("dataset.txt");
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut items = Vec::new();
    for name in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let image_path = root.join("images").join(format!("{name}.png"));
        let label_path = root.join("labels").join(format!("{name}.png"));
        let label_opt = label_path.exists().then_some(label_path.as_path());
        items.push(load_labeled_image(&image_path, label_opt, class_space)?);
    }
    Ok(Dataset::new(items, tag, class_space.clone()))
}

pub fn item_name(index: usize) -> String {
    format!("img_{index:05}")
}
