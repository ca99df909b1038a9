//! Synthetic segmentation scenes, scribble synthesis, class vectors and
//! training augmentation.
//!
//! Scenes mimic cardiac MR slices: an ellipse (cavity) wrapped by a ring
//! (wall) plus free-standing polygons, each class at its own base
//! intensity with additive Gaussian texture noise.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{distance_to_boundary, erode, neighbors8, thin};

pub const MIN_SIDE: usize = 16;
const MIN_CLASS_FRACTION: f64 = 0.01;
const MAX_CLASS_FRACTION: f64 = 0.40;
const SCENE_ATTEMPTS: usize = 64;
const PLACEMENT_ATTEMPTS: usize = 64;
/// Labeled pixels in a generated stroke never have more labeled 8-neighbors than this.
pub const MAX_STROKE_NEIGHBORS: usize = 4;

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "image pixels",
                expected: format!("{}", height * width),
                actual: format!("{}", pixels.len()),
            });
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Full per-pixel ground truth in `0..num_classes`. Evaluation only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseMask {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl DenseMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "dense mask",
                expected: format!("{}", height * width),
                actual: format!("{}", labels.len()),
            });
        }
        if let Some(&v) = labels.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                value: v as usize,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Sparse labels: class ids on stroke pixels, [`ScribbleMask::unlabeled`]
/// (equal to `num_classes`) everywhere else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleMask {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl ScribbleMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "scribble mask",
                expected: format!("{}", height * width),
                actual: format!("{}", labels.len()),
            });
        }
        if let Some(&v) = labels.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::LabelOutOfRange {
                value: v as usize,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn empty(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            height,
            width,
            num_classes,
            labels: vec![num_classes as u8; height * width],
        }
    }

    pub fn unlabeled(&self) -> u8 {
        self.num_classes as u8
    }

    pub fn is_labeled(&self, idx: usize) -> bool {
        self.labels[idx] != self.unlabeled()
    }

    pub fn labeled_count(&self) -> usize {
        (0..self.labels.len()).filter(|&i| self.is_labeled(i)).count()
    }

    /// Labeled-pixel count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in &self.labels {
            if (l as usize) < self.num_classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Multi-hot vector of the classes present in a scribble.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassVector {
    pub present: Vec<u8>,
}

impl ClassVector {
    pub fn num_classes(&self) -> usize {
        self.present.len()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.present.iter().map(|&v| v as f64).collect()
    }
}

pub fn class_vector_from_scribble(s: &ScribbleMask) -> ClassVector {
    let mut present = vec![0u8; s.num_classes];
    for &l in &s.labels {
        if (l as usize) < s.num_classes {
            present[l as usize] = 1;
        }
    }
    ClassVector { present }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Filled rotated ellipse; starts a new cluster.
    Ellipse,
    /// Annulus wrapped around the previous class of the current cluster.
    Ring,
    /// Filled convex polygon; starts a new cluster.
    Polygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Standard deviation of the additive Gaussian texture, in `[0, 0.3]`.
    pub noise_std: f32,
    /// Base intensity per class; derived from `num_classes` when empty.
    pub intensities: Vec<f32>,
    /// Shape family per foreground class; derived when empty.
    pub families: Vec<ShapeFamily>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            noise_std: 0.05,
            intensities: Vec::new(),
            families: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    pub fn new(height: usize, width: usize, num_classes: usize, noise_std: f32) -> Self {
        Self {
            height,
            width,
            num_classes,
            noise_std,
            ..Self::default()
        }
    }

    /// Background dark, first foreground class brightest, the rest
    /// evenly spaced below it.
    pub fn resolved_intensities(&self) -> Vec<f32> {
        if !self.intensities.is_empty() {
            return self.intensities.clone();
        }
        let k = self.num_classes;
        let mut out = vec![0.1f32];
        let fg = k.saturating_sub(1);
        for i in 0..fg {
            let t = if fg == 1 { 0.0 } else { i as f32 / (fg - 1) as f32 };
            out.push(0.9 - 0.6 * t);
        }
        out
    }

    pub fn resolved_families(&self) -> Vec<ShapeFamily> {
        if !self.families.is_empty() {
            return self.families.clone();
        }
        const CYCLE: [ShapeFamily; 3] = [ShapeFamily::Ellipse, ShapeFamily::Ring, ShapeFamily::Polygon];
        (0..self.num_classes.saturating_sub(1))
            .map(|i| CYCLE[i % 3])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::InvalidConfig(format!(
                "image {}x{} is smaller than {MIN_SIDE}x{MIN_SIDE}",
                self.height, self.width
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if !(0.0..=0.3).contains(&self.noise_std) {
            return Err(Error::InvalidConfig(format!(
                "noise_std {} outside [0, 0.3]",
                self.noise_std
            )));
        }
        let ints = self.resolved_intensities();
        if ints.len() != self.num_classes || ints.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(
                "intensities must hold one value in [0, 1] per class".into(),
            ));
        }
        if self.resolved_families().len() != self.num_classes - 1 {
            return Err(Error::InvalidConfig(
                "families must hold one shape family per foreground class".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Ellipse { a: f64, b: f64 },
    Ring { thickness: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

#[derive(Clone, Debug)]
struct Cluster {
    cy: f64,
    cx: f64,
    theta: f64,
    layers: Vec<(u8, Layer)>,
}

impl Cluster {
    fn bound(&self) -> f64 {
        let mut r = 0.0f64;
        let mut ring_base = 0.0f64;
        for (_, layer) in &self.layers {
            match layer {
                Layer::Ellipse { a, b } => {
                    ring_base = a.max(*b);
                    r = r.max(ring_base);
                }
                Layer::Polygon { vertices } => {
                    ring_base = vertices
                        .iter()
                        .map(|(y, x)| libm::sqrt(y * y + x * x))
                        .fold(0.0, f64::max);
                    r = r.max(ring_base);
                }
                Layer::Ring { thickness } => {
                    ring_base += thickness;
                    r = r.max(ring_base);
                }
            }
        }
        r
    }

    fn paint(&self, labels: &mut [u8], height: usize, width: usize) {
        let (s, c) = (libm::sin(self.theta), libm::cos(self.theta));
        let in_ellipse = |a: f64, b: f64, u: f64, v: f64| (u / a).powi(2) + (v / b).powi(2) <= 1.0;
        // Radii of the outline the next ring wraps around.
        let mut inner: (f64, f64) = (0.0, 0.0);
        for (class, layer) in &self.layers {
            for y in 0..height {
                for x in 0..width {
                    let dy = y as f64 + 0.5 - self.cy;
                    let dx = x as f64 + 0.5 - self.cx;
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    let hit = match layer {
                        Layer::Ellipse { a, b } => in_ellipse(*a, *b, u, v),
                        Layer::Ring { thickness } => {
                            let (ia, ib) = inner;
                            in_ellipse(ia + thickness, ib + thickness, u, v)
                                && (ia <= 0.0 || !in_ellipse(ia, ib, u, v))
                        }
                        Layer::Polygon { vertices } => point_in_convex(vertices, v, u),
                    };
                    if hit {
                        labels[y * width + x] = *class;
                    }
                }
            }
            inner = match layer {
                Layer::Ellipse { a, b } => (*a, *b),
                Layer::Ring { thickness } => (inner.0 + thickness, inner.1 + thickness),
                Layer::Polygon { vertices } => {
                    let r = vertices
                        .iter()
                        .map(|(y, x)| libm::sqrt(y * y + x * x))
                        .fold(0.0, f64::max);
                    (r, r)
                }
            };
        }
    }
}

/// Vertices are (y, x) in counter-clockwise angular order.
fn point_in_convex(vertices: &[(f64, f64)], y: f64, x: f64) -> bool {
    let n = vertices.len();
    (0..n).all(|i| {
        let (y0, x0) = vertices[i];
        let (y1, x1) = vertices[(i + 1) % n];
        (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
    })
}

fn sample_layers<R: Rng>(
    rng: &mut R,
    families: &[ShapeFamily],
    side: f64,
) -> Vec<Vec<(u8, Layer)>> {
    let mut clusters: Vec<Vec<(u8, Layer)>> = Vec::new();
    for (i, fam) in families.iter().enumerate() {
        let class = (i + 1) as u8;
        match fam {
            ShapeFamily::Ellipse => {
                let a = rng.random_range(0.09..0.15) * side;
                let b = rng.random_range(0.09..0.15) * side;
                clusters.push(vec![(class, Layer::Ellipse { a: a.max(2.5), b: b.max(2.5) })]);
            }
            ShapeFamily::Polygon => {
                let r = (rng.random_range(0.10..0.17) * side).max(3.0);
                let n = rng.random_range(5..=8);
                let mut angles: Vec<f64> = (0..n)
                    .map(|_| rng.random_range(0.0..core::f64::consts::TAU))
                    .collect();
                angles.sort_by(f64::total_cmp);
                let vertices = angles
                    .into_iter()
                    .map(|t| {
                        let rr = r * rng.random_range(0.75..=1.0);
                        (rr * libm::sin(t), rr * libm::cos(t))
                    })
                    .collect();
                clusters.push(vec![(class, Layer::Polygon { vertices })]);
            }
            ShapeFamily::Ring => {
                let thickness = (rng.random_range(0.05..0.08) * side).max(3.0);
                match clusters.last_mut() {
                    Some(c) => c.push((class, Layer::Ring { thickness })),
                    None => {
                        // A ring with nothing inside: hollow core of background.
                        let core = (rng.random_range(0.08..0.12) * side).max(2.5);
                        clusters.push(vec![
                            (0, Layer::Ellipse { a: core, b: core }),
                            (class, Layer::Ring { thickness }),
                        ]);
                    }
                }
            }
        }
    }
    clusters
}

fn try_scene<R: Rng>(rng: &mut R, cfg: &GeneratorConfig, families: &[ShapeFamily]) -> Option<Vec<u8>> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let mut placed: Vec<Cluster> = Vec::new();
    for layers in sample_layers(rng, families, side) {
        let mut cluster = Cluster {
            cy: 0.0,
            cx: 0.0,
            theta: rng.random_range(0.0..core::f64::consts::PI),
            layers,
        };
        let r = cluster.bound();
        if 2.0 * r + 2.0 > side {
            return None;
        }
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            cluster.cy = rng.random_range(r + 1.0..=h - r - 1.0);
            cluster.cx = rng.random_range(r + 1.0..=w - r - 1.0);
            if placed.iter().all(|p| {
                let d = libm::hypot(p.cy - cluster.cy, p.cx - cluster.cx);
                d >= p.bound() + r + 1.0
            }) {
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
        placed.push(cluster);
    }
    let mut labels = vec![0u8; cfg.height * cfg.width];
    for c in &placed {
        c.paint(&mut labels, cfg.height, cfg.width);
    }
    let total = labels.len() as f64;
    let mut counts = vec![0usize; cfg.num_classes];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let fits = counts[1..].iter().all(|&n| {
        let f = n as f64 / total;
        (MIN_CLASS_FRACTION..=MAX_CLASS_FRACTION).contains(&f)
    });
    fits.then_some(labels)
}

/// Draws one synthetic scene. Pure function of `(seed, config)`.
pub fn generate_sample(seed: u64, config: &GeneratorConfig) -> Result<(Image, DenseMask)> {
    config.validate()?;
    let families = config.resolved_families();
    let intensities = config.resolved_intensities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SCENE_ATTEMPTS {
        let Some(labels) = try_scene(&mut rng, config, &families) else {
            continue;
        };
        let pixels = labels
            .iter()
            .map(|&l| {
                let base = intensities[l as usize];
                let noise = if config.noise_std > 0.0 {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * config.noise_std
                } else {
                    0.0
                };
                (base + noise).clamp(0.0, 1.0)
            })
            .collect();
        let image = Image {
            height: config.height,
            width: config.width,
            pixels,
        };
        let mask = DenseMask {
            height: config.height,
            width: config.width,
            num_classes: config.num_classes,
            labels,
        };
        return Ok((image, mask));
    }
    Err(Error::CannotFit(format!(
        "{} foreground shapes do not fit a {}x{} image with each class covering {}%..{}% of pixels",
        config.num_classes - 1,
        config.height,
        config.width,
        MIN_CLASS_FRACTION * 100.0,
        MAX_CLASS_FRACTION * 100.0
    )))
}

fn labeled_neighbors(idx: usize, labeled: &[bool], h: usize, w: usize) -> usize {
    neighbors8(idx, h, w).filter(|&j| labeled[j]).count()
}

/// Whether labeling `idx` keeps every stroke pixel within the neighbor bound.
fn keeps_thin(idx: usize, labeled: &[bool], h: usize, w: usize, own_limit: usize) -> bool {
    labeled_neighbors(idx, labeled, h, w) <= own_limit
        && neighbors8(idx, h, w)
            .filter(|&j| labeled[j])
            .all(|j| labeled_neighbors(j, labeled, h, w) < MAX_STROKE_NEIGHBORS)
}

/// Synthesizes a scribble from a dense mask: for every class present,
/// a connected thin stroke along the skeleton of the eroded class region,
/// randomly pruned to `budget` of the class area.
pub fn scribble_from_mask(mask: &DenseMask, seed: u64, budget: f64) -> Result<ScribbleMask> {
    if !(budget > 0.0 && budget <= 0.2) {
        return Err(Error::InvalidArgument(format!(
            "scribble budget {budget} outside (0, 0.2]"
        )));
    }
    let (h, w) = (mask.height, mask.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ScribbleMask::empty(h, w, mask.num_classes);
    let counts = mask.class_counts();
    for (class, &area) in counts.iter().enumerate() {
        if area == 0 {
            continue;
        }
        let region: Vec<bool> = mask.labels.iter().map(|&l| l as usize == class).collect();
        let target = ((budget * area as f64).round() as usize).max(1);
        let eroded = erode(&region, h, w);
        let stroke = if eroded.iter().any(|&v| v) {
            grow_stroke(&eroded, &region, target, h, w, &mut rng)
        } else {
            // Region too thin to erode: label its interior-most pixel.
            let dist = distance_to_boundary(&region, h, w);
            let best = (0..region.len())
                .filter(|&i| region[i])
                .max_by_key(|&i| (dist[i], core::cmp::Reverse(i)))
                .expect("class with nonzero area");
            vec![best]
        };
        for i in stroke {
            out.labels[i] = class as u8;
        }
    }
    Ok(out)
}

fn grow_stroke<R: Rng>(
    region: &[bool],
    outer: &[bool],
    target: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Vec<usize> {
    let dist = distance_to_boundary(region, h, w);
    let mut skeleton = thin(region, h, w);
    if !skeleton.iter().any(|&v| v) {
        let best = (0..region.len())
            .filter(|&i| region[i])
            .max_by_key(|&i| dist[i])
            .unwrap();
        skeleton[best] = true;
    }
    let skel_pixels: Vec<usize> = (0..skeleton.len()).filter(|&i| skeleton[i]).collect();
    let start = *skel_pixels.choose(rng).unwrap();
    let mut labeled = vec![false; region.len()];
    let mut stroke = vec![start];
    labeled[start] = true;

    // Breadth-first walk along the skeleton from a random start.
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        if stroke.len() >= target {
            break;
        }
        let mut next: Vec<usize> = neighbors8(p, h, w).filter(|&q| skeleton[q] && !labeled[q]).collect();
        next.sort_unstable();
        for q in next {
            if stroke.len() >= target {
                break;
            }
            if keeps_thin(q, &labeled, h, w, MAX_STROKE_NEIGHBORS) {
                labeled[q] = true;
                stroke.push(q);
                queue.push_back(q);
            }
        }
    }

    // Skeleton too short for the budget: extend the stroke ends through
    // the eroded region, preferring pixels far from the boundary, and only
    // then through the uneroded class region.
    let outer_dist = distance_to_boundary(outer, h, w);
    for (area, dist, own_limit) in [(region, &dist, 1usize), (region, &dist, 2), (outer, &outer_dist, 2)] {
        while stroke.len() < target {
            let mut candidates = BTreeSet::new();
            for &p in &stroke {
                for q in neighbors8(p, h, w) {
                    if area[q] && !labeled[q] && keeps_thin(q, &labeled, h, w, own_limit) {
                        candidates.insert(q);
                    }
                }
            }
            if candidates.is_empty() {
                break;
            }
            let best_dist = candidates.iter().map(|&q| dist[q]).max().unwrap();
            let top: Vec<usize> = candidates.into_iter().filter(|&q| dist[q] == best_dist).collect();
            let q = *top.choose(rng).unwrap();
            labeled[q] = true;
            stroke.push(q);
        }
    }
    stroke
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip: bool,
    /// Standard deviation of additive pixel noise (image only).
    pub noise_std: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            flip: true,
            noise_std: 0.02,
        }
    }
}

/// Geometric part of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GeometricTransform {
    /// Clockwise quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl GeometricTransform {
    pub fn is_identity(&self) -> bool {
        self.quarter_turns.is_multiple_of(4) && !self.flip_horizontal && !self.flip_vertical
    }

    pub fn draw<R: Rng>(rng: &mut R, cfg: &AugmentConfig, square: bool) -> Self {
        let quarter_turns = if !cfg.rotate {
            0
        } else if square {
            rng.random_range(0..4u8)
        } else {
            2 * rng.random_range(0..2u8)
        };
        let (flip_horizontal, flip_vertical) = if cfg.flip {
            (rng.random_bool(0.5), rng.random_bool(0.5))
        } else {
            (false, false)
        };
        Self {
            quarter_turns,
            flip_horizontal,
            flip_vertical,
        }
    }

    /// Output dimensions for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source index for each output pixel.
    fn source_index(&self, h: usize, w: usize, oy: usize, ox: usize) -> usize {
        let (oh, ow) = self.output_dims(h, w);
        let oy = if self.flip_vertical { oh - 1 - oy } else { oy };
        let ox = if self.flip_horizontal { ow - 1 - ox } else { ox };
        let (sy, sx) = match self.quarter_turns % 4 {
            0 => (oy, ox),
            1 => (h - 1 - ox, oy),
            2 => (h - 1 - oy, w - 1 - ox),
            _ => (ox, w - 1 - oy),
        };
        sy * w + sx
    }

    pub fn apply<T: Copy>(&self, data: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(data[self.source_index(h, w, oy, ox)]);
            }
        }
        out
    }
}

/// Applies the same seeded rotation/flip to image and scribble, then
/// additive noise to the image only.
pub fn augment(
    img: &Image,
    s: &ScribbleMask,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Image, ScribbleMask)> {
    if img.height != s.height || img.width != s.width {
        return Err(Error::ShapeMismatch {
            what: "augment inputs",
            expected: format!("{}x{}", img.height, img.width),
            actual: format!("{}x{}", s.height, s.width),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = GeometricTransform::draw(&mut rng, cfg, img.height == img.width);
    Ok(apply_augment(img, s, &t, cfg.noise_std, &mut rng))
}

pub fn apply_augment<R: Rng>(
    img: &Image,
    s: &ScribbleMask,
    t: &GeometricTransform,
    noise_std: f32,
    rng: &mut R,
) -> (Image, ScribbleMask) {
    let (h, w) = (img.height, img.width);
    let (oh, ow) = t.output_dims(h, w);
    let mut pixels = t.apply(&img.pixels, h, w);
    if noise_std > 0.0 {
        for p in &mut pixels {
            let z: f32 = StandardNormal.sample(rng);
            *p = (*p + z * noise_std).clamp(0.0, 1.0);
        }
    }
    let labels = t.apply(&s.labels, h, w);
    (
        Image {
            height: oh,
            width: ow,
            pixels,
        },
        ScribbleMask {
            height: oh,
            width: ow,
            num_classes: s.num_classes,
            labels,
        },
    )
}
