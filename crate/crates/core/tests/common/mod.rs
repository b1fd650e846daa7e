#![allow(dead_code)]

use hetseg::grid::{softmax, Image, LabelMap, LogitMap, ProbMap, Region, RegionMap};
use hetseg::model::{DropoutSpec, TinySegNet};
use hetseg::weights::WeightSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_logits(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Vec<f64> {
    (0..h * w * c).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn probs_from(h: usize, w: usize, c: usize, logits: &[f64]) -> ProbMap {
    softmax(&LogitMap::new(h, w, c, logits.to_vec()).unwrap()).unwrap()
}

pub fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ProbMap {
    let l = random_logits(rng, h, w, c, 3.0);
    probs_from(h, w, c, &l)
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u16)).collect()).unwrap()
}

pub fn random_regions(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RegionMap {
    RegionMap::new(h, w, (0..h * w).map(|_| Region::ALL[rng.random_range(0..4)]).collect()).unwrap()
}

pub fn random_schedule(rng: &mut ChaCha8Rng) -> WeightSchedule {
    WeightSchedule::from_weights([
        rng.random_range(0.05..1.0),
        rng.random_range(0.05..1.0),
        rng.random_range(0.05..1.0),
        rng.random_range(0.05..1.0),
    ])
    .unwrap()
}

fn weight_at(regions: &RegionMap, w: &WeightSchedule, r: usize, c: usize) -> f64 {
    w[regions.get(r * regions.width() + c)]
}

fn prob_at(p: &ProbMap, r: usize, c: usize, k: usize) -> f64 {
    p.pixel(r * p.width() + c)[k]
}

/// `-(1/Z) sum_x w(x) log p(x, y_x)` with explicit loops.
pub fn naive_ce(p: &ProbMap, y: &LabelMap, regions: &RegionMap, w: &WeightSchedule) -> f64 {
    let (mut num, mut z) = (0.0, 0.0);
    for r in 0..p.height() {
        for c in 0..p.width() {
            let wx = weight_at(regions, w, r, c);
            num += wx * prob_at(p, r, c, y.at(r, c)).max(1e-12).ln();
            z += wx;
        }
    }
    -num / z
}

/// `1 - (1/C) sum_k (2 sum v t p + eps) / (sum v (t + p) + eps)` with the
/// pixel weights rescaled to unit mean.
pub fn naive_dice(p: &ProbMap, y: &LabelMap, regions: &RegionMap, w: &WeightSchedule) -> f64 {
    let n = (p.height() * p.width()) as f64;
    let mut z = 0.0;
    for r in 0..p.height() {
        for c in 0..p.width() {
            z += weight_at(regions, w, r, c);
        }
    }
    let mut total = 0.0;
    for k in 0..p.num_classes() {
        let (mut inter, mut sizes) = (0.0, 0.0);
        for r in 0..p.height() {
            for c in 0..p.width() {
                let v = weight_at(regions, w, r, c) * n / z;
                let t = if y.at(r, c) == k { 1.0 } else { 0.0 };
                inter += v * t * prob_at(p, r, c, k);
                sizes += v * (t + prob_at(p, r, c, k));
            }
        }
        total += (2.0 * inter + 1e-5) / (sizes + 1e-5);
    }
    1.0 - total / p.num_classes() as f64
}

pub fn naive_mse(p: &ProbMap, q: &ProbMap, regions: &RegionMap, w: &WeightSchedule) -> f64 {
    let (mut num, mut z) = (0.0, 0.0);
    for r in 0..p.height() {
        for c in 0..p.width() {
            let wx = weight_at(regions, w, r, c);
            for k in 0..p.num_classes() {
                num += wx * (prob_at(p, r, c, k) - prob_at(q, r, c, k)).powi(2);
            }
            z += wx;
        }
    }
    num / z
}

/// Plain cross entropy and smooth Dice without any weighting.
pub fn plain_ce(p: &ProbMap, y: &LabelMap) -> f64 {
    let mut s = 0.0;
    for i in 0..y.num_pixels() {
        s -= p.pixel(i)[y.get(i)].max(1e-12).ln();
    }
    s / y.num_pixels() as f64
}

pub fn plain_dice(p: &ProbMap, y: &LabelMap) -> f64 {
    let c = p.num_classes();
    let mut total = 0.0;
    for k in 0..c {
        let (mut inter, mut sizes) = (0.0, 0.0);
        for i in 0..y.num_pixels() {
            let t = (y.get(i) == k) as u8 as f64;
            inter += t * p.pixel(i)[k];
            sizes += t + p.pixel(i)[k];
        }
        total += (2.0 * inter + 1e-5) / (sizes + 1e-5);
    }
    1.0 - total / c as f64
}

/// Per-pixel partition rule written out directly.
pub fn naive_partition(reference: &ProbMap, other: &LabelMap, gamma: &[f64]) -> Vec<Region> {
    (0..other.num_pixels())
        .map(|i| {
            let px = reference.pixel(i);
            let mut best = 0;
            for k in 1..px.len() {
                if px[k] > px[best] {
                    best = k;
                }
            }
            let unanimous = best == other.get(i);
            let confident = px[best] > gamma[best];
            match (unanimous, confident) {
                (true, true) => Region::UC,
                (true, false) => Region::US,
                (false, true) => Region::DC,
                (false, false) => Region::DS,
            }
        })
        .collect()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_bool(density) as u16).collect()).unwrap()
}

/// Mask with a few filled rectangles; more realistic boundaries than i.i.d.
/// noise.
pub fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMap {
    let mut data = vec![0u16; h * w];
    for _ in 0..rng.random_range(0..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = ((r0 + rng.random_range(1..h / 2)).min(h), (c0 + rng.random_range(1..w / 2)).min(w));
        for r in r0..r1 {
            for c in c0..c1 {
                data[r * w + c] = 1;
            }
        }
    }
    LabelMap::new(h, w, data).unwrap()
}

/// 95th percentile of boundary distances by enumerating every pixel pair.
pub fn hd95_oracle(a: &LabelMap, b: &LabelMap, class: usize) -> Option<f64> {
    let boundary = |m: &LabelMap| -> Vec<(f64, f64)> {
        let (h, w) = m.dims();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if m.at(r, c) != class {
                    continue;
                }
                let interior = r > 0
                    && c > 0
                    && r + 1 < h
                    && c + 1 < w
                    && m.at(r - 1, c) == class
                    && m.at(r + 1, c) == class
                    && m.at(r, c - 1) == class
                    && m.at(r, c + 1) == class;
                if !interior {
                    out.push((r as f64, c as f64));
                }
            }
        }
        out
    };
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() && bb.is_empty() {
        return Some(0.0);
    }
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> Vec<f64> {
        from.iter()
            .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut all = directed(&ba, &bb);
    all.extend(directed(&bb, &ba));
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let k = (0.95 * all.len() as f64).ceil() as usize;
    Some(all[k.max(1) - 1])
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> Image {
    Image::new(h, w, ch, (0..h * w * ch).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of the network's parameter gradient for the
/// linear read-out `L = sum(G * logits)`. Coordinates whose perturbation
/// flips a ReLU are skipped (the function is not differentiable across the
/// kink); returns the worst relative error and the number of skipped
/// coordinates.
pub fn network_gradient_error(seed: u64, dropout: Option<f64>) -> (f64, usize) {
    let mut r = rng(seed);
    let (h, w, cin, f, c) = (6, 7, r.random_range(1..3), r.random_range(2..6), r.random_range(2..4));
    let net = TinySegNet::init(seed, cin, f, c).unwrap();
    // non-zero biases so they are exercised too
    let mut params = net.params().to_vec();
    for p in params.iter_mut() {
        *p += r.random_range(-0.1..0.1);
    }
    let net = TinySegNet::from_params(cin, f, c, params.clone()).unwrap();
    let image = random_image(&mut r, h, w, cin);
    let g: Vec<f64> = (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect();
    let spec = dropout.map(|rate| DropoutSpec::new(rate, seed ^ 0xD0).unwrap());

    let eval = |theta: &[f64]| -> (f64, Vec<bool>) {
        let n = TinySegNet::from_params(cin, f, c, theta.to_vec()).unwrap();
        let (logits, cache) = n.forward(&image, spec.as_ref()).unwrap();
        let value = logits.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        (value, cache.pre_activation().iter().map(|&z| z > 0.0).collect())
    };
    let (_, cache) = net.forward(&image, spec.as_ref()).unwrap();
    let analytic = net.backward(&cache, &g).unwrap().0;
    let base_mask: Vec<bool> = cache.pre_activation().iter().map(|&z| z > 0.0).collect();

    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut probe = params.clone();
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let (plus, mp) = eval(&probe);
        probe[i] = params[i] - step;
        let (minus, mm) = eval(&probe);
        probe[i] = params[i];
        if mp != base_mask || mm != base_mask {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    (worst, skipped)
}
