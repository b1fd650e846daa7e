//! Confidence/consistency quadripartition, per-class mean confidence, the
//! adaptive per-class threshold tracker and region diagnostics.

use std::ops::{Add, AddAssign, Index};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax_slice, check_same_dims, LabelMap, ProbMap, Region, RegionMap};

/// Initial threshold for every class.
pub const DEFAULT_GAMMA_INIT: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.99;

/// Which side of the moving average `alpha` multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaOrientation {
    /// `gamma_i = alpha * O_i + (1 - alpha) * gamma_{i-1}`
    #[default]
    Observation,
    /// `gamma_i = alpha * gamma_{i-1} + (1 - alpha) * O_i`
    History,
}

/// Mean confidence per class over the pixels predicted as that class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassConfidence {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Running sums for [`ClassConfidence`] over several probability maps.
#[derive(Debug, Clone)]
pub struct ConfidenceAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl ConfidenceAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self { sums: vec![0.0; num_classes], counts: vec![0; num_classes] }
    }

    pub fn add(&mut self, p: &ProbMap) -> Result<()> {
        if p.num_classes() != self.sums.len() {
            return Err(Error::ShapeMismatch(format!(
                "accumulator has {} classes, map has {}",
                self.sums.len(),
                p.num_classes()
            )));
        }
        for px in p.pixels() {
            let c = argmax_slice(px);
            self.sums[c] += px[c];
            self.counts[c] += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> ClassConfidence {
        let values = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        let valid = self.counts.iter().map(|&n| n > 0).collect();
        ClassConfidence { values, valid }
    }
}

pub fn class_mean_conf(p: &ProbMap) -> ClassConfidence {
    let mut acc = ConfidenceAccumulator::new(p.num_classes());
    acc.add(p).expect("class count matches by construction");
    acc.finish()
}

/// Per-class adaptive confidence thresholds. Single writer per training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTracker {
    gamma: Vec<f64>,
    alpha: f64,
    #[serde(default)]
    orientation: EmaOrientation,
    #[serde(default)]
    iteration: u64,
}

impl ThresholdTracker {
    pub fn new(num_classes: usize, alpha: f64) -> Result<Self> {
        Self::with_settings(num_classes, alpha, DEFAULT_GAMMA_INIT, EmaOrientation::Observation)
    }

    pub fn with_settings(
        num_classes: usize,
        alpha: f64,
        gamma_init: f64,
        orientation: EmaOrientation,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidParameter("tracker needs at least 2 classes".into()));
        }
        check_unit("alpha", alpha)?;
        check_unit("gamma_init", gamma_init)?;
        Ok(Self { gamma: vec![gamma_init; num_classes], alpha, orientation, iteration: 0 })
    }

    /// Fixed thresholds, e.g. loaded from the command line.
    pub fn from_gamma(gamma: Vec<f64>, alpha: f64) -> Result<Self> {
        if gamma.len() < 2 {
            return Err(Error::InvalidParameter("tracker needs at least 2 classes".into()));
        }
        check_unit("alpha", alpha)?;
        for &g in &gamma {
            check_unit("gamma", g)?;
        }
        Ok(Self { gamma, alpha, orientation: EmaOrientation::Observation, iteration: 0 })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn orientation(&self) -> EmaOrientation {
        self.orientation
    }
    pub fn iteration(&self) -> u64 {
        self.iteration
    }
    pub fn num_classes(&self) -> usize {
        self.gamma.len()
    }

    /// One moving-average step. Classes without any predicted pixel keep
    /// their previous threshold.
    pub fn update(&mut self, conf: &ClassConfidence) -> Result<()> {
        check_unit("alpha", self.alpha)?;
        if conf.values.len() != self.gamma.len() || conf.valid.len() != self.gamma.len() {
            return Err(Error::ShapeMismatch(format!(
                "tracker has {} classes, confidence has {}",
                self.gamma.len(),
                conf.values.len()
            )));
        }
        let a = self.alpha;
        for ((g, &o), &ok) in self.gamma.iter_mut().zip(&conf.values).zip(&conf.valid) {
            if !ok {
                continue;
            }
            *g = match self.orientation {
                EmaOrientation::Observation => a * o + (1.0 - a) * *g,
                EmaOrientation::History => a * *g + (1.0 - a) * o,
            };
        }
        self.iteration += 1;
        Ok(())
    }

    /// Consuming form of [`ThresholdTracker::update`].
    pub fn updated(mut self, conf: &ClassConfidence) -> Result<Self> {
        self.update(conf)?;
        Ok(self)
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidParameter(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Splits pixels by agreement between `argmax(reference)` and `other_labels`
/// and by whether the reference confidence strictly exceeds the threshold of
/// the reference class.
pub fn quadripartition(
    reference: &ProbMap,
    other_labels: &LabelMap,
    tracker: &ThresholdTracker,
) -> Result<RegionMap> {
    quadripartition_with(reference, other_labels, tracker.gamma())
}

pub fn quadripartition_with(reference: &ProbMap, other_labels: &LabelMap, gamma: &[f64]) -> Result<RegionMap> {
    check_same_dims("quadripartition", reference.dims(), other_labels.dims())?;
    if gamma.len() != reference.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} thresholds for {} classes",
            gamma.len(),
            reference.num_classes()
        )));
    }
    let codes = reference
        .pixels()
        .zip(other_labels.data())
        .map(|(px, &other)| {
            let c = argmax_slice(px);
            Region::from_flags(c == other as usize, px[c] > gamma[c])
        })
        .collect();
    RegionMap::new(reference.height(), reference.width(), codes)
}

/// Pixel count per region, indexed by [`Region`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts(pub [usize; 4]);

impl RegionCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

impl Index<Region> for RegionCounts {
    type Output = usize;
    fn index(&self, r: Region) -> &usize {
        &self.0[r.index()]
    }
}

impl Add for RegionCounts {
    type Output = RegionCounts;
    fn add(mut self, rhs: RegionCounts) -> RegionCounts {
        self += rhs;
        self
    }
}

impl AddAssign for RegionCounts {
    fn add_assign(&mut self, rhs: RegionCounts) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

pub fn region_sizes(r: &RegionMap) -> RegionCounts {
    let mut counts = [0usize; 4];
    for code in r.data() {
        counts[code.index()] += 1;
    }
    RegionCounts(counts)
}

/// Correct/total pixel tallies per region; accuracy is undefined for an
/// empty region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RegionAccuracy {
    pub correct: [usize; 4],
    pub total: [usize; 4],
}

impl RegionAccuracy {
    pub fn accuracy(&self, r: Region) -> Option<f64> {
        let n = self.total[r.index()];
        (n > 0).then(|| self.correct[r.index()] as f64 / n as f64)
    }

    pub fn merge(&mut self, other: &RegionAccuracy) {
        for i in 0..4 {
            self.correct[i] += other.correct[i];
            self.total[i] += other.total[i];
        }
    }
}

pub fn region_accuracy(r: &RegionMap, pred: &LabelMap, gt: &LabelMap) -> Result<RegionAccuracy> {
    check_same_dims("region_accuracy pred", r.dims(), pred.dims())?;
    check_same_dims("region_accuracy gt", r.dims(), gt.dims())?;
    let mut acc = RegionAccuracy::default();
    for ((code, &p), &g) in r.data().iter().zip(pred.data()).zip(gt.data()) {
        acc.total[code.index()] += 1;
        if p == g {
            acc.correct[code.index()] += 1;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{one_hot, softmax, LogitMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ProbMap {
        let raw: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        softmax(&LogitMap::new(h, w, c, raw).unwrap()).unwrap()
    }

    fn worked_example() -> (ProbMap, LabelMap, ThresholdTracker) {
        let p = ProbMap::new(2, 2, 2, vec![0.9, 0.1, 0.6, 0.4, 0.2, 0.8, 0.45, 0.55]).unwrap();
        let other = LabelMap::new(2, 2, vec![0, 0, 1, 0]).unwrap();
        let tracker = ThresholdTracker::from_gamma(vec![0.7, 0.5], 0.99).unwrap();
        (p, other, tracker)
    }

    #[test]
    fn class_mean_conf_constant_map() {
        let p = ProbMap::new(2, 2, 2, [0.8, 0.2].repeat(4)).unwrap();
        let conf = class_mean_conf(&p);
        assert!((conf.values[0] - 0.8).abs() < 1e-15);
        assert_eq!(conf.valid, vec![true, false]);
    }

    #[test]
    fn class_mean_conf_hand_mean() {
        let p = ProbMap::new(1, 3, 2, vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3]).unwrap();
        let conf = class_mean_conf(&p);
        assert!((conf.values[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn class_mean_conf_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_probs(&mut rng, 8, 8, 3);
        let conf = class_mean_conf(&p);
        for c in 0..3 {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..64 {
                let px = &p.data()[i * 3..i * 3 + 3];
                let mut best = 0;
                for k in 1..3 {
                    if px[k] > px[best] {
                        best = k;
                    }
                }
                if best == c {
                    sum += px[c];
                    n += 1;
                }
            }
            if n > 0 {
                assert!((conf.values[c] - sum / n as f64).abs() < 1e-7);
            }
            assert_eq!(conf.valid[c], n > 0);
        }
    }

    #[test]
    fn ema_degenerate_and_hand_values() {
        let conf = ClassConfidence { values: vec![0.9, 0.7], valid: vec![true, true] };

        let t = ThresholdTracker::new(2, 1.0).unwrap().updated(&conf).unwrap();
        assert_eq!(t.gamma(), &[0.9, 0.7]);

        let t = ThresholdTracker::new(2, 0.0).unwrap().updated(&conf).unwrap();
        assert_eq!(t.gamma(), &[0.5, 0.5]);

        let t = ThresholdTracker::new(2, 0.99).unwrap().updated(&conf).unwrap();
        assert!((t.gamma()[0] - 0.896).abs() < 1e-9);
        assert_eq!(t.iteration(), 1);
    }

    #[test]
    fn ema_history_orientation() {
        let conf = ClassConfidence { values: vec![0.9, 0.9], valid: vec![true, true] };
        let mut t = ThresholdTracker::with_settings(2, 0.99, 0.5, EmaOrientation::History).unwrap();
        t.update(&conf).unwrap();
        assert!((t.gamma()[0] - 0.504).abs() < 1e-12);
    }

    #[test]
    fn invalid_class_keeps_threshold() {
        let conf = ClassConfidence { values: vec![0.9, 0.0], valid: vec![true, false] };
        let t = ThresholdTracker::new(2, 0.5).unwrap().updated(&conf).unwrap();
        assert_eq!(t.gamma()[1], 0.5);
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        assert!(ThresholdTracker::new(2, 1.5).is_err());
        assert!(ThresholdTracker::new(2, -0.1).is_err());
    }

    #[test]
    fn worked_example_codes_and_sizes() {
        let (p, other, tracker) = worked_example();
        let r = quadripartition(&p, &other, &tracker).unwrap();
        assert_eq!(r.data(), &[Region::UC, Region::US, Region::UC, Region::DC]);
        assert_eq!(region_sizes(&r), RegionCounts([2, 1, 1, 0]));
    }

    #[test]
    fn perfect_agreement_and_total_disagreement() {
        let y = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let oh = one_hot(&y, 2).unwrap();
        let t = ThresholdTracker::new(2, 0.99).unwrap();
        let r = quadripartition(&oh, &y, &t).unwrap();
        assert!(r.data().iter().all(|&c| c == Region::UC));

        let uniform = ProbMap::new(2, 2, 2, vec![0.5; 8]).unwrap();
        let other = LabelMap::filled(2, 2, 1).unwrap();
        let r = quadripartition(&uniform, &other, &t).unwrap();
        assert!(r.data().iter().all(|&c| c == Region::DS));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (p, _, tracker) = worked_example();
        let other = LabelMap::filled(3, 2, 0).unwrap();
        assert!(matches!(quadripartition(&p, &other, &tracker), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn region_accuracy_examples() {
        let r = RegionMap::new(1, 4, vec![Region::UC; 4]).unwrap();
        let gt = LabelMap::new(1, 4, vec![0, 1, 2, 0]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 1, 2, 1]).unwrap();
        let acc = region_accuracy(&r, &pred, &gt).unwrap();
        assert_eq!(acc.accuracy(Region::UC), Some(0.75));
        assert_eq!(acc.accuracy(Region::DS), None);
        let acc = region_accuracy(&r, &gt, &gt).unwrap();
        assert_eq!(acc.accuracy(Region::UC), Some(1.0));
    }

    #[test]
    fn region_sizes_match_naive_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes: Vec<Region> = (0..100).map(|_| Region::ALL[rng.random_range(0..4)]).collect();
        let r = RegionMap::new(10, 10, codes.clone()).unwrap();
        let counts = region_sizes(&r);
        for reg in Region::ALL {
            assert_eq!(counts[reg], codes.iter().filter(|&&c| c == reg).count());
        }
    }

    proptest! {
        #[test]
        fn flipping_unanimity_keeps_confidence_axis(seed in 0u64..500, pix in 0usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probs(&mut rng, 4, 4, 3);
            let other = LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let gamma: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let before = quadripartition_with(&p, &other, &gamma).unwrap();
            let mut flipped = other.clone();
            flipped.data_mut()[pix] = ((other.get(pix) + 1) % 3) as u16;
            let after = quadripartition_with(&p, &flipped, &gamma).unwrap();
            for i in 0..16 {
                prop_assert_eq!(before.get(i).is_confident(), after.get(i).is_confident());
            }
        }

        #[test]
        fn extreme_thresholds(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probs(&mut rng, 4, 4, 3);
            let other = LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let high = region_sizes(&quadripartition_with(&p, &other, &[1.0; 3]).unwrap());
            prop_assert_eq!(high[Region::UC] + high[Region::DC], 0);
            let low = region_sizes(&quadripartition_with(&p, &other, &[0.3; 3]).unwrap());
            prop_assert_eq!(low[Region::US] + low[Region::DS], 0);
        }

        #[test]
        fn ema_stays_in_unit_interval(
            alpha in 0.0f64..=1.0,
            obs in prop::collection::vec(0.0f64..=1.0, 1..40),
        ) {
            let mut t = ThresholdTracker::new(2, alpha).unwrap();
            for o in obs {
                t.update(&ClassConfidence { values: vec![o, 1.0 - o], valid: vec![true, true] }).unwrap();
                for &g in t.gamma() {
                    prop_assert!((0.0..=1.0).contains(&g));
                }
            }
        }
    }
}
