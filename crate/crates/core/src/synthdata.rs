//! Deterministic synthetic segmentation benchmark: ellipses and rectangles
//! over background, annotation noise for labeled images, and weak/strong
//! augmentation pairs.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus `num_classes - 1` shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Range of shape half-extents in pixels.
    pub radius_min: usize,
    pub radius_max: usize,
    /// Mean intensity per class.
    pub class_means: Vec<f64>,
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of the linear illumination ramp.
    pub gradient_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            shapes_min: 3,
            shapes_max: 6,
            radius_min: 4,
            radius_max: 10,
            class_means: vec![0.2, 0.5, 0.8],
            noise_sigma: 0.15,
            gradient_amplitude: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.num_classes < 2 {
            return bad("scene needs at least 2 classes".into());
        }
        if self.class_means.len() != self.num_classes {
            return bad(format!("{} class means for {} classes", self.class_means.len(), self.num_classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("grid dimensions must be >= 1".into());
        }
        if self.shapes_min > self.shapes_max || self.radius_min > self.radius_max || self.radius_min == 0 {
            return bad("shape count and radius ranges must be non-empty with radius_min >= 1".into());
        }
        if 2 * self.radius_min + 1 > self.height.min(self.width) {
            return bad(format!(
                "shapes of half-extent {} do not fit a {}x{} grid",
                self.radius_min, self.height, self.width
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !self.gradient_amplitude.is_finite() {
            return bad("noise sigma must be >= 0 and the gradient amplitude finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// Shape class `k >= 1`: odd classes are ellipses, even classes rectangles.
fn shape_kind(class: usize) -> ShapeKind {
    if class % 2 == 1 {
        ShapeKind::Ellipse
    } else {
        ShapeKind::Rectangle
    }
}

/// Renders image `index` of the scene family; every index uses its own
/// random stream.
pub fn generate_image(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    // the largest half-extent that still fits
    let rmax = spec.radius_max.min((h.min(w) - 1) / 2);
    let n_shapes = rng.random_range(spec.shapes_min..=spec.shapes_max);
    let mut labels = vec![0u16; h * w];
    for _ in 0..n_shapes {
        let class = rng.random_range(1..spec.num_classes);
        let a = rng.random_range(spec.radius_min..=rmax);
        let b = rng.random_range(spec.radius_min..=rmax);
        let cy = rng.random_range(a..h - a);
        let cx = rng.random_range(b..w - b);
        let kind = shape_kind(class);
        for r in cy - a..=cy + a {
            for c in cx - b..=cx + b {
                let inside = match kind {
                    ShapeKind::Rectangle => true,
                    ShapeKind::Ellipse => {
                        let dy = (r as f64 - cy as f64) / a as f64;
                        let dx = (c as f64 - cx as f64) / b as f64;
                        dy * dy + dx * dx <= 1.0
                    }
                };
                if inside {
                    labels[r * w + c] = class as u16;
                }
            }
        }
    }

    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let ry = if h > 1 { r as f64 / (h - 1) as f64 - 0.5 } else { 0.0 };
            let rx = if w > 1 { c as f64 / (w - 1) as f64 - 0.5 } else { 0.0 };
            let ramp = spec.gradient_amplitude * (ry * sin + rx * cos);
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(spec.class_means[labels[r * w + c] as usize] + ramp + eps);
        }
    }
    Ok(Sample { image: Image::new(h, w, 1, data)?, labels: LabelMap::new(h, w, labels)? })
}

pub fn generate_dataset(spec: &SceneSpec, n_images: usize) -> Result<Vec<Sample>> {
    generate_range(spec, 0, n_images)
}

pub(crate) fn generate_range(spec: &SceneSpec, first: u64, n_images: usize) -> Result<Vec<Sample>> {
    if n_images == 0 {
        return Err(Error::InvalidParameter("n_images must be >= 1".into()));
    }
    (0..n_images as u64).map(|i| generate_image(spec, first + i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    #[default]
    BoundaryMorph,
    RandomFlip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    /// Target fraction of corrupted pixels.
    pub rate: f64,
    pub seed: u64,
}

/// Fraction of pixels where two label maps differ.
pub fn corruption_fraction(clean: &LabelMap, noisy: &LabelMap) -> f64 {
    let diff = clean.data().iter().zip(noisy.data()).filter(|(a, b)| a != b).count();
    diff as f64 / clean.num_pixels() as f64
}

pub fn inject_label_noise(labels: &LabelMap, num_classes: usize, spec: &NoiseSpec) -> Result<LabelMap> {
    if !(0.0..0.5).contains(&spec.rate) {
        return Err(Error::InvalidParameter(format!("noise rate {} outside [0, 0.5)", spec.rate)));
    }
    if num_classes < 2 {
        return Err(Error::InvalidParameter("need at least 2 classes".into()));
    }
    labels.check_classes(num_classes)?;
    let target = (spec.rate * labels.num_pixels() as f64).round() as usize;
    if target == 0 {
        return Ok(labels.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        NoiseMode::RandomFlip => {
            let mut out = labels.clone();
            for i in index::sample(&mut rng, labels.num_pixels(), target) {
                let old = labels.get(i);
                let shift = rng.random_range(1..num_classes);
                out.data_mut()[i] = ((old + shift) % num_classes) as u16;
            }
            Ok(out)
        }
        NoiseMode::BoundaryMorph => Ok(boundary_morph(labels, target, &mut rng)),
    }
}

/// 8-connected components of every non-background class.
fn components(labels: &LabelMap) -> Vec<(u16, Vec<usize>)> {
    let (h, w) = labels.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        let class = labels.data()[start];
        if class == 0 || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut members = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            members.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if !seen[q] && labels.data()[q] == class {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        members.sort_unstable();
        out.push((class, members));
    }
    out
}

fn disk(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as usize <= radius * radius && (dy, dx) != (0, 0) {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Upper bound on re-drawn dilate/erode choices per component. Sparse scenes
/// can run out of pixels within 2 of a boundary before reaching the target;
/// the result is then the fully corrupted band.
const MORPH_PASSES: usize = 16;

/// Grows or shrinks shape components by 1-2 pixels until about `target`
/// pixels disagree with the clean labels. The last component touched may be
/// morphed along an angular sector only, so the count lands on the target.
fn boundary_morph(clean: &LabelMap, target: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w) = clean.dims();
    let mut noisy = clean.clone();
    let mut corrupted = 0usize;
    let mut comps = components(clean);
    let in_grid = |r: isize, c: isize| r >= 0 && c >= 0 && r < h as isize && c < w as isize;

    for _pass in 0..MORPH_PASSES {
        if corrupted >= target || comps.is_empty() {
            break;
        }
        comps.shuffle(rng);
        for (class, members) in &comps {
            if corrupted >= target {
                break;
            }
            let dilate = rng.random_bool(0.5);
            let radius = rng.random_range(1..=2);
            let offsets = disk(radius);
            let mut member = vec![false; h * w];
            for &p in members {
                member[p] = true;
            }
            let mut candidates: Vec<usize> = Vec::new();
            let new_value = if dilate { *class } else { 0 };
            if dilate {
                let mut marked = vec![false; h * w];
                for &p in members {
                    let (r, c) = ((p / w) as isize, (p % w) as isize);
                    for &(dy, dx) in &offsets {
                        if !in_grid(r + dy, c + dx) {
                            continue;
                        }
                        let q = (r + dy) as usize * w + (c + dx) as usize;
                        if !marked[q] && clean.data()[q] != *class {
                            marked[q] = true;
                            candidates.push(q);
                        }
                    }
                }
                candidates.sort_unstable();
            } else {
                for &p in members {
                    let (r, c) = ((p / w) as isize, (p % w) as isize);
                    let near_other = offsets.iter().any(|&(dy, dx)| {
                        in_grid(r + dy, c + dx)
                            && clean.data()[(r + dy) as usize * w + (c + dx) as usize] != *class
                    });
                    if near_other {
                        candidates.push(p);
                    }
                }
            }
            // only pixels that are still clean and would actually change
            candidates.retain(|&q| noisy.data()[q] == clean.data()[q] && clean.data()[q] != new_value);
            if candidates.is_empty() {
                continue;
            }
            let need = target - corrupted;
            if candidates.len() > need {
                let n = members.len() as f64;
                let cy = members.iter().map(|&p| (p / w) as f64).sum::<f64>() / n;
                let cx = members.iter().map(|&p| (p % w) as f64).sum::<f64>() / n;
                let start = rng.random_range(0.0..std::f64::consts::TAU);
                let angle = |q: usize| {
                    let a = ((q / w) as f64 - cy).atan2((q % w) as f64 - cx);
                    (a - start).rem_euclid(std::f64::consts::TAU)
                };
                candidates.sort_by(|&a, &b| angle(a).total_cmp(&angle(b)).then(a.cmp(&b)));
                candidates.truncate(need);
            }
            for &q in &candidates {
                noisy.data_mut()[q] = new_value;
            }
            corrupted += candidates.len();
        }
    }
    noisy
}

/// Geometric part of an augmentation; applied identically to images and
/// labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometryTag {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl GeometryTag {
    pub const ALL: [GeometryTag; 6] = [
        GeometryTag::Identity,
        GeometryTag::FlipHorizontal,
        GeometryTag::FlipVertical,
        GeometryTag::Rotate90,
        GeometryTag::Rotate180,
        GeometryTag::Rotate270,
    ];

    pub fn inverse(self) -> GeometryTag {
        match self {
            GeometryTag::Rotate90 => GeometryTag::Rotate270,
            GeometryTag::Rotate270 => GeometryTag::Rotate90,
            other => other,
        }
    }

    fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeometryTag::Rotate90 | GeometryTag::Rotate270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source coordinate of output pixel `(r, c)`; `(h, w)` are input dims.
    fn source(self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeometryTag::Identity => (r, c),
            GeometryTag::FlipHorizontal => (r, w - 1 - c),
            GeometryTag::FlipVertical => (h - 1 - r, c),
            // clockwise quarter turn
            GeometryTag::Rotate90 => (h - 1 - c, r),
            GeometryTag::Rotate180 => (h - 1 - r, w - 1 - c),
            GeometryTag::Rotate270 => (c, w - 1 - r),
        }
    }

    fn apply_raw<T: Copy>(self, data: &[T], h: usize, w: usize, ch: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(data.len());
        for r in 0..oh {
            for c in 0..ow {
                let (sr, sc) = self.source(r, c, h, w);
                let base = (sr * w + sc) * ch;
                out.extend_from_slice(&data[base..base + ch]);
            }
        }
        (out, oh, ow)
    }

    pub fn apply_image(self, image: &Image) -> Image {
        let (data, h, w) = self.apply_raw(image.data(), image.height(), image.width(), image.channels());
        Image::new(h, w, image.channels(), data).expect("geometry preserves validity")
    }

    pub fn apply_labels(self, labels: &LabelMap) -> LabelMap {
        let (data, h, w) = self.apply_raw(labels.data(), labels.height(), labels.width(), 1);
        LabelMap::new(h, w, data).expect("geometry preserves validity")
    }
}

pub fn weak_augment(image: &Image, labels: &LabelMap, seed: u64) -> (Image, LabelMap, GeometryTag) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = GeometryTag::ALL[rng.random_range(0..GeometryTag::ALL.len())];
    (tag.apply_image(image), tag.apply_labels(labels), tag)
}

/// Photometric extras layered on top of the shared geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugmentSpec {
    /// Intensity scale drawn from `[1 - jitter, 1 + jitter]`, shift from
    /// `[-jitter, jitter]`; 0 disables jitter.
    pub jitter: f64,
    pub cutout: bool,
    pub cutout_min: usize,
    pub cutout_max: usize,
    /// Value written into cutout patches, normally the dataset mean.
    pub fill: f64,
}

impl Default for StrongAugmentSpec {
    fn default() -> Self {
        Self { jitter: 0.1, cutout: true, cutout_min: 4, cutout_max: 16, fill: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Patch {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongView {
    pub image: Image,
    pub scale: f64,
    pub shift: f64,
    pub patches: Vec<Patch>,
}

pub fn strong_augment(image: &Image, geometry: GeometryTag, seed: u64, spec: &StrongAugmentSpec) -> StrongView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = geometry.apply_image(image);
    let (scale, shift) = if spec.jitter > 0.0 {
        (rng.random_range(1.0 - spec.jitter..=1.0 + spec.jitter), rng.random_range(-spec.jitter..=spec.jitter))
    } else {
        (1.0, 0.0)
    };
    for v in out.data_mut() {
        *v = *v * scale + shift;
    }
    let (h, w) = out.dims();
    let ch = out.channels();
    let mut patches = Vec::new();
    if spec.cutout {
        let lo = spec.cutout_min.max(1);
        let n = rng.random_range(1..=3);
        for _ in 0..n {
            let ph = rng.random_range(lo.min(h)..=spec.cutout_max.max(lo).min(h));
            let pw = rng.random_range(lo.min(w)..=spec.cutout_max.max(lo).min(w));
            let row = rng.random_range(0..=h - ph);
            let col = rng.random_range(0..=w - pw);
            let patch = Patch { row, col, height: ph, width: pw };
            let data = out.data_mut();
            for r in row..row + ph {
                for c in col..col + pw {
                    for k in 0..ch {
                        data[(r * w + c) * ch + k] = spec.fill;
                    }
                }
            }
            patches.push(patch);
        }
    }
    StrongView { image: out, scale, shift, patches }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub labeled_fraction: f64,
    pub noise: NoiseSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_train: 200,
            n_val: 20,
            n_test: 40,
            labeled_fraction: 0.05,
            noise: NoiseSpec { mode: NoiseMode::BoundaryMorph, rate: 0.1, seed: 0 },
        }
    }
}

impl BenchmarkSpec {
    pub fn n_labeled(&self) -> usize {
        ((self.labeled_fraction * self.n_train as f64).round() as usize).clamp(1, self.n_train)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidParameter("every split needs at least one image".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidParameter("labeled_fraction must be in (0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.noise.rate) {
            return Err(Error::InvalidParameter("noise rate must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// A training image. `annotation` is the (possibly noisy) label available to
/// training for labeled images; `truth` is the clean render mask, used only
/// for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub truth: LabelMap,
    pub annotation: Option<LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub num_classes: usize,
    pub train: Vec<TrainSample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Achieved corruption fraction of each labeled image.
    pub noise_fractions: Vec<f64>,
}

impl Benchmark {
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        spec.validate()?;
        let n_labeled = spec.n_labeled();
        let train_raw = generate_range(&spec.scene, 0, spec.n_train)?;
        let val = generate_range(&spec.scene, spec.n_train as u64, spec.n_val)?;
        let test = generate_range(&spec.scene, (spec.n_train + spec.n_val) as u64, spec.n_test)?;
        let mut train = Vec::with_capacity(train_raw.len());
        let mut noise_fractions = Vec::with_capacity(n_labeled);
        for (i, s) in train_raw.into_iter().enumerate() {
            let annotation = if i < n_labeled {
                let noise = NoiseSpec { seed: spec.noise.seed.wrapping_add(i as u64), ..spec.noise };
                let noisy = inject_label_noise(&s.labels, spec.scene.num_classes, &noise)?;
                noise_fractions.push(corruption_fraction(&s.labels, &noisy));
                Some(noisy)
            } else {
                None
            };
            train.push(TrainSample { image: s.image, truth: s.labels, annotation });
        }
        Ok(Self { num_classes: spec.scene.num_classes, train, val, test, noise_fractions })
    }

    pub fn labeled(&self) -> impl Iterator<Item = &TrainSample> {
        self.train.iter().filter(|s| s.annotation.is_some())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &TrainSample> {
        self.train.iter().filter(|s| s.annotation.is_none())
    }

    pub fn train_mean(&self) -> f64 {
        let n = self.train.len() as f64;
        self.train.iter().map(|s| s.image.mean()).sum::<f64>() / n
    }
}
