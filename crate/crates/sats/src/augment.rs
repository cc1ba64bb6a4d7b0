//! Mask construction and image/label composition: virtual-unknown regions
//! for stage-one training, unknown mixup for stage-two training, and
//! hard-unknown mask refinement.
//!
//! Rasterization convention: a pixel belongs to a polygon when its center
//! `(x + 0.5, y + 0.5)` is inside under the even-odd rule; boundary ties
//! resolve by half-open intervals (top-left fill). All operations are pure;
//! randomized ones take an explicit generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{BinaryMask, ClassSpace, LabelMap, LabeledImage};
use crate::{Error, Result};

/// Closed polygon over pixel coordinates; the last vertex connects back to
/// the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Polygon {
    pub vertices: Vec<(i64, i64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(i64, i64)>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::validation(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        Ok(Polygon { vertices })
    }
}

/// Settings for virtual-unknown region generation.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualUnknownConfig {
    /// Target fraction of image area covered by virtual-unknown regions.
    pub gamma: f64,
    /// Inclusive vertex-count range for sampled polygons.
    pub vertex_count_range: (usize, usize),
    /// Polygons pasted per image; each aims for `gamma / polygons_per_image`
    /// of the area.
    pub polygons_per_image: usize,
}

impl Default for VirtualUnknownConfig {
    fn default() -> Self {
        VirtualUnknownConfig {
            gamma: 0.25,
            vertex_count_range: (3, 8),
            polygons_per_image: 1,
        }
    }
}

impl VirtualUnknownConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::validation(format!(
                "gamma must be in (0,1), got {}",
                self.gamma
            )));
        }
        let (lo, hi) = self.vertex_count_range;
        if lo < 3 {
            return Err(Error::validation(format!(
                "minimum vertex count must be >= 3, got {lo}"
            )));
        }
        if hi < lo {
            return Err(Error::validation(format!(
                "vertex count range [{lo},{hi}] is empty"
            )));
        }
        if self.polygons_per_image == 0 {
            return Err(Error::validation("polygons_per_image must be >= 1"));
        }
        Ok(())
    }

    /// Acceptable filled-area band for one polygon, in pixels.
    pub fn area_band(&self, height: usize, width: usize) -> (f64, f64) {
        let share = self.gamma * (height * width) as f64 / self.polygons_per_image as f64;
        (0.5 * share, 1.5 * share)
    }
}

/// Sample a random polygon whose filled area lands in the configured band.
///
/// Candidates are drawn by picking random in-bounds vertices, then rescaled
/// about their centroid toward the target area; after 100 attempts the
/// closest candidate is returned rather than failing.
pub fn sample_polygon(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    cfg: &VirtualUnknownConfig,
) -> Polygon {
    let (lo, hi) = cfg.area_band(height, width);
    let target = cfg.gamma * (height * width) as f64 / cfg.polygons_per_image as f64;
    let (vmin, vmax) = cfg.vertex_count_range;

    let mut best: Option<(f64, Polygon)> = None;
    let consider = |poly: Polygon, area: f64, best: &mut Option<(f64, Polygon)>| {
        let dist = if area < lo {
            lo - area
        } else if area > hi {
            area - hi
        } else {
            0.0
        };
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            *best = Some((dist, poly));
        }
    };

    for _ in 0..100 {
        let n = rng.random_range(vmin..=vmax);
        let verts: Vec<(i64, i64)> = (0..n)
            .map(|_| {
                (
                    rng.random_range(0..width as i64),
                    rng.random_range(0..height as i64),
                )
            })
            .collect();
        let poly = Polygon { vertices: verts };
        let area = rasterize_polygon(&poly, height, width).count_ones() as f64;
        if area >= lo && area <= hi {
            return poly;
        }
        consider(poly.clone(), area, &mut best);

        // Rescale about the centroid toward the target area and retry.
        if area >= 1.0 {
            let scale = (target / area).sqrt();
            let cx = poly.vertices.iter().map(|v| v.0 as f64).sum::<f64>()
                / poly.vertices.len() as f64;
            let cy = poly.vertices.iter().map(|v| v.1 as f64).sum::<f64>()
                / poly.vertices.len() as f64;
            let scaled: Vec<(i64, i64)> = poly
                .vertices
                .iter()
                .map(|&(x, y)| {
                    let sx = (cx + (x as f64 - cx) * scale).round() as i64;
                    let sy = (cy + (y as f64 - cy) * scale).round() as i64;
                    (sx.clamp(0, width as i64 - 1), sy.clamp(0, height as i64 - 1))
                })
                .collect();
            let scaled_poly = Polygon { vertices: scaled };
            let scaled_area = rasterize_polygon(&scaled_poly, height, width).count_ones() as f64;
            if scaled_area >= lo && scaled_area <= hi {
                return scaled_poly;
            }
            consider(scaled_poly, scaled_area, &mut best);
        }
    }
    best.expect("at least one candidate was generated").1
}

/// Fill a polygon by scanline: for each pixel row, intersect edges with the
/// horizontal line through the pixel centers, sort the crossings, and fill
/// half-open spans between successive pairs (even-odd rule). Degenerate
/// polygons produce an empty mask.
pub fn rasterize_polygon(poly: &Polygon, height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(width, height);
    let n = poly.vertices.len();
    if n < 3 {
        return mask;
    }
    let mut crossings: Vec<f64> = Vec::with_capacity(n);
    for y in 0..height {
        let py = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (x1, y1) = poly.vertices[i];
            let (x2, y2) = poly.vertices[(i + 1) % n];
            let (y1f, y2f) = (y1 as f64, y2 as f64);
            if (y1f > py) != (y2f > py) {
                let t = (py - y1f) / (y2f - y1f);
                crossings.push(x1 as f64 + t * (x2 - x1) as f64);
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossing"));
        let row = &mut mask.bits[y * width..(y + 1) * width];
        for pair in crossings.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0) as usize;
            let end = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
            if start < end {
                row[start..end].fill(1);
            }
        }
    }
    mask
}

/// Uniform-random RGB fill color.
pub fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()]
}

/// Paste a flat-colored region into a source image, labeling masked pixels
/// as unknown. The mask wins over ignore pixels.
pub fn compose_virtual_unknown(
    src: &LabeledImage,
    mask: &BinaryMask,
    color: [u8; 3],
    class_space: &ClassSpace,
) -> Result<LabeledImage> {
    if mask.width != src.width || mask.height != src.height {
        return Err(Error::DimensionMismatch(format!(
            "mask is {}x{} but image is {}x{}",
            mask.width, mask.height, src.width, src.height
        )));
    }
    let unknown = class_space.unknown_index();
    let mut pixels = src.pixels.clone();
    let mut values = src.label.values.clone();
    for (p, &m) in mask.bits.iter().enumerate() {
        if m == 1 {
            pixels[3 * p..3 * p + 3].copy_from_slice(&color);
            values[p] = unknown;
        }
    }
    LabeledImage::new(
        pixels,
        LabelMap::from_values(values, src.width, src.height)?,
        src.width,
        src.height,
    )
}

/// Sample, rasterize, and paste the configured number of virtual-unknown
/// polygons into one image; returns the augmented image and the union mask.
pub fn apply_virtual_unknowns(
    src: &LabeledImage,
    cfg: &VirtualUnknownConfig,
    class_space: &ClassSpace,
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledImage, BinaryMask)> {
    let mut out = src.clone();
    let mut union = BinaryMask::zeros(src.width, src.height);
    for _ in 0..cfg.polygons_per_image {
        let poly = sample_polygon(rng, src.height, src.width, cfg);
        let mask = rasterize_polygon(&poly, src.height, src.width);
        let color = random_color(rng);
        out = compose_virtual_unknown(&out, &mask, color, class_space)?;
        for (u, &m) in union.bits.iter_mut().zip(&mask.bits) {
            *u |= m;
        }
    }
    Ok((out, union))
}

/// Binary mask of the pixels a segmentation map calls unknown.
pub fn extract_unknown_mask(pred: &LabelMap, class_space: &ClassSpace) -> BinaryMask {
    let unknown = class_space.unknown_index();
    BinaryMask {
        bits: pred
            .values
            .iter()
            .map(|&v| u8::from(v == unknown))
            .collect(),
        width: pred.width,
        height: pred.height,
    }
}

/// Blend target pixels into a source image under a mask, labeling masked
/// pixels unknown and keeping source labels (including ignore) elsewhere.
pub fn unknown_mixup(
    src: &LabeledImage,
    target: &LabeledImage,
    mask: &BinaryMask,
    class_space: &ClassSpace,
) -> Result<LabeledImage> {
    if target.width != src.width || target.height != src.height {
        return Err(Error::DimensionMismatch(format!(
            "target is {}x{} but source is {}x{}",
            target.width, target.height, src.width, src.height
        )));
    }
    if mask.width != src.width || mask.height != src.height {
        return Err(Error::DimensionMismatch(format!(
            "mask is {}x{} but source is {}x{}",
            mask.width, mask.height, src.width, src.height
        )));
    }
    let unknown = class_space.unknown_index();
    let mut pixels = src.pixels.clone();
    let mut values = src.label.values.clone();
    for (p, &m) in mask.bits.iter().enumerate() {
        if m == 1 {
            pixels[3 * p..3 * p + 3].copy_from_slice(&target.pixels[3 * p..3 * p + 3]);
            values[p] = unknown;
        }
    }
    LabeledImage::new(
        pixels,
        LabelMap::from_values(values, src.width, src.height)?,
        src.width,
        src.height,
    )
}

/// Grow the stage-one unknown mask with hard unknowns: pixels the stage-two
/// pseudo label calls unknown while the stage-one map assigned a head known
/// class. Refinement only ever adds pixels.
pub fn refine_hard_unknown_mask(
    stage1_pred: &LabelMap,
    stage2_pseudo: &LabelMap,
    class_space: &ClassSpace,
) -> Result<BinaryMask> {
    if stage1_pred.width != stage2_pseudo.width || stage1_pred.height != stage2_pseudo.height {
        return Err(Error::DimensionMismatch(format!(
            "stage-one map is {}x{} but stage-two map is {}x{}",
            stage1_pred.width, stage1_pred.height, stage2_pseudo.width, stage2_pseudo.height
        )));
    }
    let unknown = class_space.unknown_index();
    let head = &class_space.head_classes;
    let bits = stage1_pred
        .values
        .iter()
        .zip(&stage2_pseudo.values)
        .map(|(&s1, &s2)| u8::from(s1 == unknown || (s2 == unknown && head.contains(&s1))))
        .collect();
    Ok(BinaryMask {
        bits,
        width: stage1_pred.width,
        height: stage1_pred.height,
    })
}
