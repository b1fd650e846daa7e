//! Dense row-major 2D grids. The class (or channel) axis varies fastest, so
//! entry `(row, col, c)` of an `H x W x C` grid lives at `(row * W + col) * C + c`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Tolerance on per-pixel probability sums accepted by [`ProbMap::new`].
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidParameter("image dimensions must be >= 1".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter("logit maps need at least 2 classes".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("grid dimensions must be >= 1".into()));
        }
        if data.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "logit buffer has {} values, expected {}",
                data.len(),
                height * width * num_classes
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self { height, width, num_classes, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.num_classes..(idx + 1) * self.num_classes]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Validates that every pixel is a probability vector.
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter("probability maps need at least 2 classes".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("grid dimensions must be >= 1".into()));
        }
        if data.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "probability buffer has {} values, expected {}",
                data.len(),
                height * width * num_classes
            )));
        }
        for px in data.chunks_exact(num_classes) {
            if px.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                return Err(Error::InvalidParameter("probabilities must lie in [0, 1]".into()));
            }
            let s: f64 = px.iter().sum();
            if (s - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidParameter(format!("pixel probabilities sum to {s}")));
            }
        }
        Ok(Self { height, width, num_classes, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.num_classes..(idx + 1) * self.num_classes]
    }
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("grid dimensions must be >= 1".into()));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u16) -> Result<Self> {
        Self::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn num_pixels(&self) -> usize {
        self.data.len()
    }
    pub fn data(&self) -> &[u16] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }
    pub fn get(&self, idx: usize) -> usize {
        self.data[idx] as usize
    }
    pub fn at(&self, row: usize, col: usize) -> usize {
        self.data[row * self.width + col] as usize
    }
    pub fn max_class(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0) as usize
    }

    /// Errors if any label is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= num_classes) {
            Some(&v) => Err(Error::ClassOutOfRange { index: v as usize, num_classes }),
            None => Ok(()),
        }
    }
}

/// Quadripartition code of a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Region {
    /// unanimous and confident
    UC = 0,
    /// unanimous and suspicious
    US = 1,
    /// discrepant and confident
    DC = 2,
    /// discrepant and suspicious
    DS = 3,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::UC, Region::US, Region::DC, Region::DS];

    pub fn from_flags(unanimous: bool, confident: bool) -> Self {
        match (unanimous, confident) {
            (true, true) => Region::UC,
            (true, false) => Region::US,
            (false, true) => Region::DC,
            (false, false) => Region::DS,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::UC => "UC",
            Region::US => "US",
            Region::DC => "DC",
            Region::DS => "DS",
        }
    }

    pub fn is_unanimous(self) -> bool {
        matches!(self, Region::UC | Region::US)
    }

    pub fn is_confident(self) -> bool {
        matches!(self, Region::UC | Region::DC)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    data: Vec<Region>,
}

impl RegionMap {
    pub fn new(height: usize, width: usize, data: Vec<Region>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "region buffer has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, region: Region) -> Self {
        Self { height, width, data: vec![region; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[Region] {
        &self.data
    }
    pub fn get(&self, idx: usize) -> Region {
        self.data[idx]
    }
}

/// Per-pixel softmax with the max logit subtracted before exponentiation.
pub fn softmax(logits: &LogitMap) -> Result<ProbMap> {
    let c = logits.num_classes;
    let mut out = vec![0.0; logits.data.len()];
    for (src, dst) in logits.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(ProbMap { height: logits.height, width: logits.width, num_classes: c, data: out })
}

/// Maps a gradient with respect to probabilities back through the softmax
/// Jacobian: `dL/dz_c = p_c * (g_c - sum_k g_k p_k)`.
pub fn softmax_backward(p: &ProbMap, grad_probs: &[f64]) -> Result<Vec<f64>> {
    if grad_probs.len() != p.data.len() {
        return Err(Error::ShapeMismatch("gradient length differs from probability map".into()));
    }
    let c = p.num_classes;
    let mut out = vec![0.0; grad_probs.len()];
    for ((pp, g), o) in p.data.chunks_exact(c).zip(grad_probs.chunks_exact(c)).zip(out.chunks_exact_mut(c)) {
        let dot: f64 = pp.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..c {
            o[k] = pp[k] * (g[k] - dot);
        }
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub(crate) fn argmax_slice(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub fn argmax(p: &ProbMap) -> LabelMap {
    let data = p.pixels().map(|px| argmax_slice(px) as u16).collect();
    LabelMap { height: p.height, width: p.width, data }
}

pub fn argmax_logits(logits: &LogitMap) -> LabelMap {
    let data = logits.data.chunks_exact(logits.num_classes).map(|px| argmax_slice(px) as u16).collect();
    LabelMap { height: logits.height, width: logits.width, data }
}

/// Per-pixel maximal class probability, row-major.
pub fn max_prob(p: &ProbMap) -> Vec<f64> {
    p.pixels().map(|px| px.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
}

pub fn one_hot(y: &LabelMap, num_classes: usize) -> Result<ProbMap> {
    if num_classes < 2 {
        return Err(Error::InvalidParameter("one_hot needs at least 2 classes".into()));
    }
    y.check_classes(num_classes)?;
    let mut data = vec![0.0; y.data.len() * num_classes];
    for (i, &v) in y.data.iter().enumerate() {
        data[i * num_classes + v as usize] = 1.0;
    }
    Ok(ProbMap { height: y.height, width: y.width, num_classes, data })
}

pub(crate) fn check_same_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(shape_err(what, a, b));
    }
    Ok(())
}
