//! Epoch loop around the step functions: batching, learning-rate decay,
//! validation and the per-epoch metrics rows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{step, Batch, StepReport, TrainSettings, TrainState};
use crate::error::{Error, Result};
use crate::grid::{argmax_logits, Image, LabelMap};
use crate::metrics::{evaluate, EvalReport};
use crate::model::TinySegNet;
use crate::partition::{RegionAccuracy, RegionCounts};
use crate::synthdata::{Benchmark, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoaderSettings {
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
}

impl Default for LoaderSettings {
    fn default() -> Self {
        Self { batch_labeled: 2, batch_unlabeled: 4 }
    }
}

/// One metrics row. Losses are means over the epoch's iterations, region
/// counts and accuracies are sums, `gamma` is the tracker state at the end
/// of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub gamma: Vec<f64>,
    pub labeled_regions: RegionCounts,
    pub unlabeled_regions: RegionCounts,
    pub val_dsc: f64,
    pub unlabeled_accuracy: RegionAccuracy,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<EpochRow>,
    pub test: EvalReport,
}

impl TrainOutcome {
    /// Pseudo-label accuracy per unlabeled region over the last epoch.
    pub fn final_accuracy(&self) -> RegionAccuracy {
        self.rows.last().map(|r| r.unlabeled_accuracy).unwrap_or_default()
    }
}

pub fn predict(net: &TinySegNet, images: &[&Image], parallel: bool) -> Result<Vec<LabelMap>> {
    let one = |img: &&Image| -> Result<LabelMap> { Ok(argmax_logits(&net.forward(img, None)?.0)) };
    if parallel {
        images.par_iter().map(one).collect()
    } else {
        images.iter().map(one).collect()
    }
}

pub fn evaluate_split(net: &TinySegNet, split: &[Sample], num_classes: usize, parallel: bool) -> Result<EvalReport> {
    let images: Vec<&Image> = split.iter().map(|s| &s.image).collect();
    let preds = predict(net, &images, parallel)?;
    let gts: Vec<LabelMap> = split.iter().map(|s| s.labels.clone()).collect();
    evaluate(&preds, &gts, num_classes)
}

/// Cycles through a shuffled index list, reshuffling on every wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains for epochs `0..=t_max`, so the warm-up factor is sampled at both
/// endpoints. An epoch is one pass over the labeled images.
pub fn train(
    settings: TrainSettings,
    data: &Benchmark,
    loader: LoaderSettings,
    mut on_epoch: impl FnMut(&EpochRow) -> Result<()>,
) -> Result<TrainOutcome> {
    if loader.batch_labeled == 0 {
        return Err(Error::InvalidParameter("labeled batch size must be >= 1".into()));
    }
    if settings.num_classes != data.num_classes {
        return Err(Error::InvalidParameter(format!(
            "settings use {} classes, data has {}",
            settings.num_classes, data.num_classes
        )));
    }
    let labeled: Vec<(&Image, &LabelMap)> =
        data.labeled().map(|s| (&s.image, s.annotation.as_ref().expect("labeled sample"))).collect();
    let unlabeled: Vec<(&Image, &LabelMap)> = data.unlabeled().map(|s| (&s.image, &s.truth)).collect();
    if labeled.is_empty() {
        return Err(Error::InvalidParameter("no labeled images".into()));
    }
    let parallel = settings.parallel;
    let num_classes = settings.num_classes;
    let t_max = settings.t_max;
    let mut state = TrainState::new(settings)?;
    let iters_per_epoch = labeled.len().div_ceil(loader.batch_labeled) as u64;
    state.total_iterations = iters_per_epoch * (t_max as u64 + 1);

    let mut sampler = ChaCha8Rng::seed_from_u64(state.settings.seed);
    sampler.set_stream(3);
    let mut lab_cycle = Cycler::new(labeled.len());
    let mut unl_cycle = Cycler::new(unlabeled.len());
    let batch_u = if unlabeled.is_empty() { 0 } else { loader.batch_unlabeled };

    let mut rows = Vec::with_capacity(t_max as usize + 1);
    for epoch in 0..=t_max {
        state.epoch = epoch;
        let mut reports: Vec<StepReport> = Vec::with_capacity(iters_per_epoch as usize);
        for _ in 0..iters_per_epoch {
            let li = lab_cycle.take(loader.batch_labeled, &mut sampler);
            let ui = unl_cycle.take(batch_u, &mut sampler);
            let batch = Batch {
                labeled: li.iter().map(|&i| (labeled[i].0.clone(), labeled[i].1.clone())).collect(),
                unlabeled: ui.iter().map(|&i| unlabeled[i].0.clone()).collect(),
                unlabeled_truth: Some(ui.iter().map(|&i| unlabeled[i].1.clone()).collect()),
            };
            let report = match step(&mut state, &batch) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            if !(report.sup_loss.is_finite() && report.unsup_loss.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            reports.push(report);
        }
        let n = reports.len() as f64;
        let mut row = EpochRow {
            epoch,
            sup_loss: reports.iter().map(|r| r.sup_loss).sum::<f64>() / n,
            unsup_loss: reports.iter().map(|r| r.unsup_loss).sum::<f64>() / n,
            lambda: state.lambda()?,
            lr: reports.last().map(|r| r.lr).unwrap_or(state.settings.lr0),
            gamma: state.tracker.gamma().to_vec(),
            labeled_regions: RegionCounts::default(),
            unlabeled_regions: RegionCounts::default(),
            val_dsc: 0.0,
            unlabeled_accuracy: RegionAccuracy::default(),
        };
        for r in &reports {
            row.labeled_regions += r.labeled_regions;
            row.unlabeled_regions += r.unlabeled_regions;
            if let Some(a) = &r.unlabeled_accuracy {
                row.unlabeled_accuracy.merge(a);
            }
        }
        row.val_dsc = evaluate_split(state.eval_model(), &data.val, num_classes, parallel)?.mean_dsc;
        on_epoch(&row)?;
        rows.push(row);
    }
    let test = evaluate_split(state.eval_model(), &data.test, num_classes, parallel)?;
    Ok(TrainOutcome { state, rows, test })
}
