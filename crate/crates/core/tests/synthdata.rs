mod common;

use hetseg::grid::LabelMap;
use hetseg::synthdata::{corruption_fraction, generate_dataset, inject_label_noise, NoiseMode, NoiseSpec, SceneSpec};
use rand::Rng;

use common::rng;

/// Draws one label layout by the documented placement law, independently of
/// the generator: 3-6 shapes, uniform class in 1..C, half-extents uniform in
/// [4, 10], centres uniform among positions that keep the shape inside, odd
/// classes ellipses, even classes rectangles, later shapes painted on top.
fn placement_law_fractions(r: &mut impl Rng, spec: &SceneSpec) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut grid = vec![0usize; h * w];
    for _ in 0..r.random_range(spec.shapes_min..=spec.shapes_max) {
        let class = r.random_range(1..spec.num_classes);
        let a = r.random_range(spec.radius_min..=spec.radius_max) as i64;
        let b = r.random_range(spec.radius_min..=spec.radius_max) as i64;
        let cy = r.random_range(a..h as i64 - a);
        let cx = r.random_range(b..w as i64 - b);
        for y in cy - a..=cy + a {
            for x in cx - b..=cx + b {
                let (dy, dx) = ((y - cy) as f64 / a as f64, (x - cx) as f64 / b as f64);
                if class % 2 == 0 || dy * dy + dx * dx <= 1.0 {
                    grid[y as usize * w + x as usize] = class;
                }
            }
        }
    }
    let mut f = vec![0.0; spec.num_classes];
    for k in grid {
        f[k] += 1.0 / (h * w) as f64;
    }
    f
}

fn class_fractions(labels: &LabelMap, classes: usize) -> Vec<f64> {
    let mut f = vec![0.0; classes];
    for &k in labels.data() {
        f[k as usize] += 1.0 / labels.num_pixels() as f64;
    }
    f
}

#[test]
fn class_fractions_match_placement_law() {
    let spec = SceneSpec { seed: 21, ..SceneSpec::default() };
    let c = spec.num_classes;
    let data = generate_dataset(&spec, 100).unwrap();
    let observed: Vec<Vec<f64>> = data.iter().map(|s| class_fractions(&s.labels, c)).collect();

    let mut r = rng(777);
    let reference: Vec<Vec<f64>> = (0..4000).map(|_| placement_law_fractions(&mut r, &spec)).collect();
    for k in 0..c {
        let mean = |v: &[Vec<f64>]| v.iter().map(|f| f[k]).sum::<f64>() / v.len() as f64;
        let (m_ref, m_obs) = (mean(&reference), mean(&observed));
        let var = reference.iter().map(|f| (f[k] - m_ref).powi(2)).sum::<f64>() / (reference.len() - 1) as f64;
        // standard error of a 100-image mean, plus the oracle's own error
        let se = (var / 100.0 + var / 4000.0).sqrt();
        assert!((m_obs - m_ref).abs() < 4.0 * se, "class {k}: observed {m_obs:.4}, law {m_ref:.4} +- {se:.4}");
    }
}

#[test]
fn clean_labels_are_exact_render_masks() {
    let spec = SceneSpec { noise_sigma: 0.0, gradient_amplitude: 0.0, seed: 8, ..SceneSpec::default() };
    for s in generate_dataset(&spec, 10).unwrap() {
        for (v, &k) in s.image.data().iter().zip(s.labels.data()) {
            assert_eq!(*v, spec.class_means[k as usize]);
        }
    }
}

/// Whether a pixel of a different clean class lies within Euclidean distance
/// 2; exactly the pixels a 1-2 pixel dilation or erosion can reach.
fn near_boundary(clean: &LabelMap, idx: usize) -> bool {
    let (h, w) = clean.dims();
    let (r, c) = ((idx / w) as i64, (idx % w) as i64);
    let own = clean.get(idx);
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            let (y, x) = (r + dy, c + dx);
            if dy * dy + dx * dx > 4 || y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                continue;
            }
            if clean.at(y as usize, x as usize) != own {
                return true;
            }
        }
    }
    false
}

#[test]
fn boundary_morph_is_local_and_hits_the_rate() {
    let spec = SceneSpec { seed: 4, ..SceneSpec::default() };
    let mut hits = 0;
    for (i, s) in generate_dataset(&spec, 30).unwrap().iter().enumerate() {
        let noise = NoiseSpec { mode: NoiseMode::BoundaryMorph, rate: 0.1, seed: i as u64 };
        let noisy = inject_label_noise(&s.labels, 3, &noise).unwrap();
        for idx in 0..noisy.num_pixels() {
            if noisy.get(idx) != s.labels.get(idx) {
                assert!(near_boundary(&s.labels, idx), "image {i} pixel {idx} is far from any boundary");
            }
        }
        let f = corruption_fraction(&s.labels, &noisy);
        let band = (0..noisy.num_pixels()).filter(|&idx| near_boundary(&s.labels, idx)).count();
        let saturated = (f * noisy.num_pixels() as f64).round() as usize == band;
        assert!((0.08..=0.12).contains(&f) || (f < 0.08 && saturated), "image {i}: corrupted {f}, band {band}");
        hits += (0.08..=0.12).contains(&f) as usize;
    }
    assert!(hits >= 25, "only {hits}/30 images reach the requested rate");
}

#[test]
fn random_flip_always_changes_class() {
    let mut r = rng(6);
    for seed in 0..10 {
        let clean = common::random_labels(&mut r, 64, 64, 3);
        let noisy = inject_label_noise(&clean, 3, &NoiseSpec { mode: NoiseMode::RandomFlip, rate: 0.1, seed }).unwrap();
        let f = corruption_fraction(&clean, &noisy);
        assert!((0.08..=0.12).contains(&f), "{f}");
        assert!(noisy.data().iter().all(|&k| k < 3));
    }
}

#[test]
fn noise_rate_at_half_is_rejected() {
    let y = LabelMap::filled(8, 8, 0).unwrap();
    let spec = NoiseSpec { mode: NoiseMode::RandomFlip, rate: 0.5, seed: 0 };
    assert!(inject_label_noise(&y, 3, &spec).is_err());
}
