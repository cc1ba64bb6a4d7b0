//! Deterministic synthetic two-domain benchmark: colored shapes on a
//! textured background, with a parametric color/noise shift between the
//! source and target domains and extra private-class shapes that exist only
//! on the target side.
//!
//! Known classes are the background (class 0) plus foreground shapes drawn
//! from rectangles, circles, and triangles; private classes use crosses and
//! rings so they stay geometrically distinct. Every image is a pure function
//! of the config seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{ClassSpace, Dataset, DomainTag, LabelMap, LabeledImage, IGNORE_INDEX};
use crate::seeds;
use crate::{Error, Result};

/// Per-channel affine color transform plus additive Gaussian pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
    pub noise_std: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            scale: [1.0, 1.0, 1.0],
            offset: [0.0, 0.0, 0.0],
            noise_std: 0.0,
        }
    }
}

impl Default for DomainShift {
    /// A shift strong enough that source-only training measurably degrades
    /// on target, leaving headroom for adaptation to close.
    fn default() -> Self {
        DomainShift {
            scale: [0.90, 1.00, 1.10],
            offset: [15.0, -8.0, 6.0],
            noise_std: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Known classes K, including the background class 0.
    pub num_known: usize,
    /// Target-private classes K'.
    pub num_private: usize,
    /// Training images per domain.
    pub train_per_domain: usize,
    /// Validation images (target side).
    pub val_count: usize,
    pub shift: DomainShift,
    /// Hue distance (degrees) between the known and private palettes;
    /// smaller values make private shapes look more like known ones.
    pub private_hue_offset_deg: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            image_size: 64,
            num_known: 3,
            num_private: 2,
            train_per_domain: 200,
            val_count: 50,
            shift: DomainShift::default(),
            private_hue_offset_deg: 25.0,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_known < 2 {
            return Err(Error::validation(format!(
                "at least 2 known classes required, got {}",
                self.num_known
            )));
        }
        if self.num_private < 1 {
            return Err(Error::validation(
                "an open-set benchmark needs at least one private class",
            ));
        }
        if self.image_size < 16 {
            return Err(Error::validation(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            )));
        }
        if self.shift.noise_std < 0.0 {
            return Err(Error::validation("noise_std must be non-negative"));
        }
        if self.train_per_domain == 0 || self.val_count == 0 {
            return Err(Error::validation("image counts must be positive"));
        }
        ClassSpace::new(self.num_known, self.num_private)?;
        Ok(())
    }

    pub fn class_space(&self) -> ClassSpace {
        ClassSpace::new(self.num_known, self.num_private).expect("validated")
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Base hue for foreground known class `c` (1-based foreground index).
fn known_hue(cfg: &BenchConfig, c: usize) -> f64 {
    let fg = (cfg.num_known - 1).max(1);
    (c - 1) as f64 * 360.0 / fg as f64
}

fn private_hue(cfg: &BenchConfig, j: usize) -> f64 {
    cfg.private_hue_offset_deg + j as f64 * 360.0 / cfg.num_private as f64
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
    Cross,
    Ring,
}

struct ShapeSpec {
    kind: ShapeKind,
    cx: i64,
    cy: i64,
    rx: i64,
    ry: i64,
    /// Arm/annulus thickness for crosses and rings.
    thickness: i64,
    color: [f64; 3],
    label: u8,
}

impl ShapeSpec {
    fn covers(&self, x: i64, y: i64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeKind::Circle => dx * dx + dy * dy <= self.rx * self.rx,
            ShapeKind::Triangle => {
                // Isoceles triangle: apex up, base at dy = +ry.
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                let half_width = (dy + self.ry) * self.rx / (2 * self.ry).max(1);
                dx.abs() <= half_width
            }
            ShapeKind::Cross => {
                (dx.abs() <= self.thickness && dy.abs() <= self.ry)
                    || (dy.abs() <= self.thickness && dx.abs() <= self.rx)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = (self.rx - self.thickness).max(0);
                d2 <= self.rx * self.rx && d2 >= inner * inner
            }
        }
    }
}

fn known_shape_kind(class: usize) -> ShapeKind {
    match (class - 1) % 3 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Circle,
        _ => ShapeKind::Triangle,
    }
}

fn private_shape_kind(private_idx: usize) -> ShapeKind {
    if private_idx.is_multiple_of(2) {
        ShapeKind::Cross
    } else {
        ShapeKind::Ring
    }
}

fn jittered_color(base_hue: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let hue = base_hue + rng.random_range(-8.0..8.0);
    let sat = 0.80 + rng.random_range(-0.05..0.05);
    let val = 0.85 + rng.random_range(-0.06..0.06);
    hsv_to_rgb(hue, sat, val)
}

fn sample_shape(
    cfg: &BenchConfig,
    kind: ShapeKind,
    label: u8,
    color: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> ShapeSpec {
    let size = cfg.image_size as i64;
    let r = rng.random_range(5..=10.min(size / 5).max(5));
    let margin = r + 1;
    ShapeSpec {
        kind,
        cx: rng.random_range(margin..size - margin),
        cy: rng.random_range(margin..size - margin),
        rx: r,
        ry: match kind {
            ShapeKind::Rectangle => rng.random_range(4..=9.min(size / 6).max(4)),
            _ => r,
        },
        thickness: rng.random_range(2..=3),
        color,
        label,
    }
}

fn render_image(
    cfg: &BenchConfig,
    with_private: bool,
    shifted: bool,
    rng: &mut ChaCha8Rng,
) -> LabeledImage {
    let size = cfg.image_size;
    let cs = cfg.class_space();

    // Background: desaturated warm gray with per-pixel texture.
    let bg = hsv_to_rgb(30.0 + rng.random_range(-6.0..6.0), 0.15, 0.35);
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    let known_count = rng.random_range(2..=4);
    for _ in 0..known_count {
        let class = rng.random_range(1..cfg.num_known);
        let color = jittered_color(known_hue(cfg, class), rng);
        shapes.push(sample_shape(
            cfg,
            known_shape_kind(class),
            class as u8,
            color,
            rng,
        ));
    }
    if with_private {
        // Private shapes go last so at least part of one stays on top.
        let private_count = rng.random_range(1..=2);
        for _ in 0..private_count {
            let j = rng.random_range(0..cfg.num_private);
            let color = jittered_color(private_hue(cfg, j), rng);
            shapes.push(sample_shape(
                cfg,
                private_shape_kind(j),
                cs.unknown_index(),
                color,
                rng,
            ));
        }
    }

    let mut pixels = vec![0u8; 3 * size * size];
    let mut labels = vec![0u8; size * size];
    let noise = Normal::new(0.0, cfg.shift.noise_std).expect("std validated");
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let mut color = bg;
            let mut label = 0u8;
            for shape in &shapes {
                if shape.covers(x as i64, y as i64) {
                    color = shape.color;
                    label = shape.label;
                }
            }
            // Texture on every pixel, stronger on the background.
            let texture = if label == 0 { 10.0 } else { 6.0 };
            for (c, out) in color.iter().enumerate().map(|(c, &v)| (c, v)) {
                let mut v = out + rng.random_range(-texture..texture);
                if shifted {
                    v = v * cfg.shift.scale[c] + cfg.shift.offset[c];
                    if cfg.shift.noise_std > 0.0 {
                        v += noise.sample(rng);
                    }
                }
                pixels[3 * p + c] = v.round().clamp(0.0, 255.0) as u8;
            }
            labels[p] = label;
        }
    }

    LabeledImage {
        pixels,
        label: LabelMap {
            values: labels,
            width: size,
            height: size,
        },
        width: size,
        height: size,
    }
}

/// Generate the three splits. Source images carry only known classes;
/// target images add private shapes under the domain shift. Target-train
/// labels are erased to the ignore sentinel; target-val labels collapse
/// every private shape to the unknown class.
pub fn generate_benchmark(cfg: &BenchConfig) -> Result<(Dataset, Dataset, Dataset)> {
    cfg.validate()?;
    let cs = cfg.class_space();

    let mut source_items = Vec::with_capacity(cfg.train_per_domain);
    for i in 0..cfg.train_per_domain {
        let mut rng = seeds::rng(cfg.seed, "bench/source", i as u64);
        source_items.push(render_image(cfg, false, false, &mut rng));
    }

    let mut target_train_items = Vec::with_capacity(cfg.train_per_domain);
    for i in 0..cfg.train_per_domain {
        let mut rng = seeds::rng(cfg.seed, "bench/target_train", i as u64);
        let mut img = render_image(cfg, true, true, &mut rng);
        img.label.values.fill(IGNORE_INDEX); // unlabeled split
        target_train_items.push(img);
    }

    let mut target_val_items = Vec::with_capacity(cfg.val_count);
    for i in 0..cfg.val_count {
        let mut rng = seeds::rng(cfg.seed, "bench/target_val", i as u64);
        target_val_items.push(render_image(cfg, true, true, &mut rng));
    }

    Ok((
        Dataset::new(source_items, DomainTag::Source, cs.clone()),
        Dataset::new(target_train_items, DomainTag::TargetTrain, cs.clone()),
        Dataset::new(target_val_items, DomainTag::TargetVal, cs),
    ))
}

/// Pixel counts per class index 0..=K over non-ignore labels.
pub fn class_pixel_frequencies(ds: &Dataset) -> Vec<u64> {
    let mut counts = vec![0u64; ds.class_space.num_channels_expanded()];
    for item in &ds.items {
        for &v in &item.label.values {
            if v != IGNORE_INDEX {
                counts[usize::from(v)] += 1;
            }
        }
    }
    counts
}

/// Default head-class choice: the background class plus every foreground
/// known class whose pixel count reaches half of the most frequent
/// foreground's. Near-ties all count as head classes; rare classes drop
/// out.
pub fn default_head_classes(ds: &Dataset) -> Vec<u8> {
    let counts = class_pixel_frequencies(ds);
    let mut head = vec![0u8];
    let foreground = &counts[1..ds.class_space.num_known];
    let top = foreground.iter().copied().max().unwrap_or(0);
    for (i, &count) in foreground.iter().enumerate() {
        if count > 0 && count * 2 >= top {
            head.push((i + 1) as u8);
        }
    }
    head
}
