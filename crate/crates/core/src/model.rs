//! Two-layer convolutional pixel classifier with hand-written backward pass:
//! `conv1x1(dropout(relu(conv3x3(image))))`, same padding.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Image, LogitMap};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSNW";
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, seed })
    }
}

/// Parameters are stored flat in declaration order:
/// conv1 weights `[F][in][3][3]`, conv1 bias `[F]`, conv2 weights `[C][F]`,
/// conv2 bias `[C]`.
#[derive(Debug)]
pub struct TinySegNet {
    in_channels: usize,
    hidden: usize,
    classes: usize,
    params: Vec<f64>,
    // changes on every mutation so caches from older parameters are rejected
    id: u64,
}

impl Clone for TinySegNet {
    fn clone(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            hidden: self.hidden,
            classes: self.classes,
            params: self.params.clone(),
            id: fresh_id(),
        }
    }
}

impl PartialEq for TinySegNet {
    fn eq(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.hidden == other.hidden
            && self.classes == other.classes
            && self.params == other.params
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    input: Image,
    pre: Vec<f64>,
    mask: Option<Vec<f64>>,
    hidden: Vec<f64>,
}

impl ForwardCache {
    pub fn pre_activation(&self) -> &[f64] {
        &self.pre
    }
    pub fn mask(&self) -> Option<&[f64]> {
        self.mask.as_deref()
    }
}

/// Flat gradient vector with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros_like(net: &TinySegNet) -> Self {
        ParamGrads(vec![0.0; net.params.len()])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

impl TinySegNet {
    /// Uniform Glorot initialization of the kernels, zero biases.
    pub fn init(seed: u64, in_channels: usize, hidden: usize, classes: usize) -> Result<Self> {
        if in_channels == 0 || hidden == 0 {
            return Err(Error::InvalidParameter("in_channels and hidden width must be >= 1".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        let mut net = Self {
            in_channels,
            hidden,
            classes,
            params: vec![0.0; Self::param_count(in_channels, hidden, classes)],
            id: fresh_id(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = (6.0 / ((in_channels * TAPS + hidden * TAPS) as f64)).sqrt();
        let a2 = (6.0 / ((hidden + classes) as f64)).sqrt();
        let (w1, _, w2, _) = net.offsets();
        for v in &mut net.params[w1.clone()] {
            *v = rng.random_range(-a1..=a1);
        }
        for v in &mut net.params[w2.clone()] {
            *v = rng.random_range(-a2..=a2);
        }
        Ok(net)
    }

    pub fn from_params(in_channels: usize, hidden: usize, classes: usize, params: Vec<f64>) -> Result<Self> {
        if in_channels == 0 || hidden == 0 || classes < 2 {
            return Err(Error::InvalidParameter("invalid architecture".into()));
        }
        if params.len() != Self::param_count(in_channels, hidden, classes) {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a {in_channels}-{hidden}-{classes} network",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self { in_channels, hidden, classes, params, id: fresh_id() })
    }

    pub fn param_count(in_channels: usize, hidden: usize, classes: usize) -> usize {
        hidden * in_channels * TAPS + hidden + classes * hidden + classes
    }

    fn offsets(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let w1 = self.hidden * self.in_channels * TAPS;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.classes * self.hidden;
        let b2 = w2 + self.classes;
        (0..w1, w1..b1, b1..w2, w2..b2)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Replaces all parameters; invalidates outstanding caches.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch("parameter vector length".into()));
        }
        self.params = params;
        self.id = fresh_id();
        Ok(())
    }

    pub fn conv2_bias(&self) -> &[f64] {
        let (_, _, _, b2) = self.offsets();
        &self.params[b2]
    }

    pub fn same_architecture(&self, other: &TinySegNet) -> bool {
        self.in_channels == other.in_channels && self.hidden == other.hidden && self.classes == other.classes
    }

    /// The 3x3 neighbourhood of `(row, col)` for every input channel, zero
    /// outside the grid. Layout `[ch][ky][kx]`.
    fn patch(&self, image: &Image, row: usize, col: usize, out: &mut [f64]) {
        let (h, w) = image.dims();
        let ch = self.in_channels;
        let data = image.data();
        for c in 0..ch {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let y = row as isize + ky as isize - 1;
                    let x = col as isize + kx as isize - 1;
                    out[c * TAPS + ky * KERNEL + kx] = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        0.0
                    } else {
                        data[(y as usize * w + x as usize) * ch + c]
                    };
                }
            }
        }
    }

    pub fn forward(&self, image: &Image, dropout: Option<&DropoutSpec>) -> Result<(LogitMap, ForwardCache)> {
        if image.channels() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, network expects {}",
                image.channels(),
                self.in_channels
            )));
        }
        let (h, w) = image.dims();
        let (f, c) = (self.hidden, self.classes);
        let fan = self.in_channels * TAPS;
        let (w1r, b1r, w2r, b2r) = self.offsets();
        let (w1, b1, w2, b2) = (&self.params[w1r], &self.params[b1r], &self.params[w2r], &self.params[b2r]);

        let mut rng = dropout.filter(|d| d.rate > 0.0).map(|d| (ChaCha8Rng::seed_from_u64(d.seed), d.rate));
        let mut mask = rng.as_ref().map(|_| vec![0.0; h * w * f]);

        let mut pre = vec![0.0; h * w * f];
        let mut hidden = vec![0.0; h * w * f];
        let mut logits = vec![0.0; h * w * c];
        let mut patch = vec![0.0; fan];
        for row in 0..h {
            for col in 0..w {
                let px = row * w + col;
                self.patch(image, row, col, &mut patch);
                let pre_px = &mut pre[px * f..(px + 1) * f];
                let hid_px = &mut hidden[px * f..(px + 1) * f];
                for j in 0..f {
                    let kern = &w1[j * fan..(j + 1) * fan];
                    let z = b1[j] + kern.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
                    pre_px[j] = z;
                    let mut a = z.max(0.0);
                    if let (Some((r, rate)), Some(m)) = (rng.as_mut(), mask.as_mut()) {
                        let keep = if r.random::<f64>() >= *rate { 1.0 / (1.0 - *rate) } else { 0.0 };
                        m[px * f + j] = keep;
                        a *= keep;
                    }
                    hid_px[j] = a;
                }
                let out = &mut logits[px * c..(px + 1) * c];
                for k in 0..c {
                    let row_w = &w2[k * f..(k + 1) * f];
                    out[k] = b2[k] + row_w.iter().zip(hid_px.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        let logits = LogitMap::new(h, w, c, logits)?;
        let cache = ForwardCache { net_id: self.id, input: image.clone(), pre, mask, hidden };
        Ok((logits, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Result<ParamGrads> {
        if cache.net_id != self.id {
            return Err(Error::StaleCache);
        }
        let (h, w) = cache.input.dims();
        let (f, c) = (self.hidden, self.classes);
        if dlogits.len() != h * w * c {
            return Err(Error::ShapeMismatch("upstream gradient does not match logit grid".into()));
        }
        let fan = self.in_channels * TAPS;
        let (w1r, b1r, w2r, b2r) = self.offsets();
        let w2 = &self.params[w2r.clone()];
        let mut grads = vec![0.0; self.params.len()];
        let mut patch = vec![0.0; fan];
        let mut dpre = vec![0.0; f];
        for row in 0..h {
            for col in 0..w {
                let px = row * w + col;
                let dl = &dlogits[px * c..(px + 1) * c];
                if dl.iter().all(|&g| g == 0.0) {
                    continue;
                }
                let hid = &cache.hidden[px * f..(px + 1) * f];
                {
                    let (gw2, gb2) = grads[w2r.start..b2r.end].split_at_mut(w2r.len());
                    for k in 0..c {
                        gb2[k] += dl[k];
                        let g = &mut gw2[k * f..(k + 1) * f];
                        for j in 0..f {
                            g[j] += dl[k] * hid[j];
                        }
                    }
                }
                let pre = &cache.pre[px * f..(px + 1) * f];
                for j in 0..f {
                    let mut d = 0.0;
                    for k in 0..c {
                        d += dl[k] * w2[k * f + j];
                    }
                    if let Some(m) = &cache.mask {
                        d *= m[px * f + j];
                    }
                    dpre[j] = if pre[j] > 0.0 { d } else { 0.0 };
                }
                self.patch(&cache.input, row, col, &mut patch);
                let (gw1, gb1) = grads[w1r.start..b1r.end].split_at_mut(w1r.len());
                for j in 0..f {
                    if dpre[j] == 0.0 {
                        continue;
                    }
                    gb1[j] += dpre[j];
                    let g = &mut gw1[j * fan..(j + 1) * fan];
                    for (gi, &xi) in g.iter_mut().zip(&patch) {
                        *gi += dpre[j] * xi;
                    }
                }
            }
        }
        Ok(ParamGrads(grads))
    }

    /// Plain gradient descent step. Non-finite gradients abort without
    /// touching the parameters.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {lr} must be > 0")));
        }
        if grads.0.len() != self.params.len() {
            return Err(Error::ShapeMismatch("gradient length differs from parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("parameter gradient"));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            *p -= lr * g;
        }
        self.id = fresh_id();
        Ok(())
    }

    /// `self <- m * self + (1 - m) * student`, elementwise.
    pub fn ema_update(&mut self, student: &TinySegNet, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        if !self.same_architecture(student) {
            return Err(Error::ShapeMismatch("teacher and student architectures differ".into()));
        }
        for (t, s) in self.params.iter_mut().zip(&student.params) {
            *t = momentum * *t + (1.0 - momentum) * s;
        }
        self.id = fresh_id();
        Ok(())
    }

    /// Checkpoint layout: `TSNW`, `in`, `F`, `C` as u32 LE, then every
    /// parameter as f32 LE in declaration order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        for d in [self.in_channels, self.hidden, self.classes] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing TSNW header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (in_channels, hidden, classes) = (dim(0), dim(1), dim(2));
        let n = Self::param_count(in_channels, hidden, classes);
        let payload = &bytes[16..];
        if payload.len() != n * 4 {
            return Err(Error::Format(format!("checkpoint payload has {} bytes, expected {}", payload.len(), n * 4)));
        }
        let params =
            payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
        Self::from_params(in_channels, hidden, classes, params)
    }
}
