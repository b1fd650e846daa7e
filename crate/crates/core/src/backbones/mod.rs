//! One optimisation step for each semi-supervised backbone.
//!
//! Every backbone produces a supervised prediction `p` (receives gradients)
//! and a reference prediction `p~` (treated as a constant) per image. The
//! total objective is `L_labeled + lambda(t) * L_unlabeled`, with both terms
//! averaged over the images of their half of the batch.

mod trainer;

pub use trainer::{evaluate_split, predict, train, EpochRow, LoaderSettings, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax, one_hot, softmax, Image, LabelMap, ProbMap, RegionMap};
use crate::hetloss::{het_ce, het_dice, LossOutput};
use crate::model::{DropoutSpec, ForwardCache, ParamGrads, TinySegNet};
use crate::partition::{
    quadripartition, region_accuracy, region_sizes, ConfidenceAccumulator, EmaOrientation, RegionAccuracy,
    RegionCounts, ThresholdTracker,
};
use crate::synthdata::{strong_augment, weak_augment, StrongAugmentSpec};
use crate::weights::{lambda_warmup_with, make_schedule, poly_lr, DecayFunction, Ordering, WeightSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    MeanTeacher,
    Cps,
    FixMatch,
    RDrop,
    /// labeled images only
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// quadripartition weights from the decay function
    Heterogeneous,
    /// all four region weights equal
    Homogeneous,
}

/// Which predictions feed the per-class confidence statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPopulation {
    #[default]
    Reference,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub kind: BackboneKind,
    pub mode: LossMode,
    pub decay: DecayFunction,
    pub delta_u: f64,
    pub delta_l: f64,
    pub alpha: f64,
    pub orientation: EmaOrientation,
    pub gamma_init: f64,
    pub population: ThresholdPopulation,
    pub lambda_scale: f64,
    pub lambda_sharpness: f64,
    pub t_max: u32,
    pub lr0: f64,
    pub teacher_momentum: f64,
    pub dropout_rate: f64,
    pub in_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub unsup_dice: bool,
    pub strong: StrongAugmentSpec,
    pub parallel: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Cps,
            mode: LossMode::Heterogeneous,
            decay: DecayFunction::default(),
            delta_u: crate::weights::DEFAULT_DELTA_UNLABELED,
            delta_l: crate::weights::DEFAULT_DELTA_LABELED,
            alpha: crate::partition::DEFAULT_ALPHA,
            orientation: EmaOrientation::Observation,
            gamma_init: crate::partition::DEFAULT_GAMMA_INIT,
            population: ThresholdPopulation::Reference,
            lambda_scale: crate::weights::DEFAULT_LAMBDA_SCALE,
            lambda_sharpness: crate::weights::DEFAULT_LAMBDA_SHARPNESS,
            t_max: 600,
            lr0: 0.01,
            teacher_momentum: 0.99,
            dropout_rate: 0.3,
            in_channels: 1,
            hidden: 16,
            num_classes: 3,
            seed: 0,
            unsup_dice: false,
            strong: StrongAugmentSpec::default(),
            parallel: false,
        }
    }
}

/// A mixed batch. `unlabeled_truth` is never used for training; when present
/// it feeds the per-region pseudo-label accuracy diagnostic.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub labeled: Vec<(Image, LabelMap)>,
    pub unlabeled: Vec<Image>,
    pub unlabeled_truth: Option<Vec<LabelMap>>,
}

impl Batch {
    fn validate(&self) -> Result<()> {
        let mut dims = self.labeled.iter().map(|(i, _)| i.dims()).chain(self.unlabeled.iter().map(|i| i.dims()));
        if let Some(first) = dims.next() {
            if dims.any(|d| d != first) {
                return Err(Error::ShapeMismatch("all images of a batch must share dimensions".into()));
            }
        }
        for (img, y) in &self.labeled {
            if img.dims() != y.dims() {
                return Err(Error::ShapeMismatch("labeled image and annotation differ in size".into()));
            }
        }
        if let Some(t) = &self.unlabeled_truth {
            if t.len() != self.unlabeled.len() {
                return Err(Error::ShapeMismatch("unlabeled truth count differs from images".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Models {
    Single(TinySegNet),
    StudentTeacher { student: TinySegNet, teacher: TinySegNet },
    Pair(TinySegNet, TinySegNet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub lambda: f64,
    pub lr: f64,
    pub labeled_regions: RegionCounts,
    pub unlabeled_regions: RegionCounts,
    pub gamma: Vec<f64>,
    /// pseudo-label accuracy per unlabeled region, when truth was supplied
    pub unlabeled_accuracy: Option<RegionAccuracy>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub settings: TrainSettings,
    pub models: Models,
    pub tracker: ThresholdTracker,
    pub epoch: u32,
    pub iteration: u64,
    pub total_iterations: u64,
    w_labeled: WeightSchedule,
    w_unlabeled: WeightSchedule,
    aug_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(settings: TrainSettings) -> Result<Self> {
        let s = &settings;
        let init = |seed| TinySegNet::init(seed, s.in_channels, s.hidden, s.num_classes);
        let models = match s.kind {
            BackboneKind::Cps => Models::Pair(init(s.seed)?, init(s.seed.wrapping_add(1))?),
            BackboneKind::MeanTeacher => {
                let student = init(s.seed)?;
                Models::StudentTeacher { teacher: student.clone(), student }
            }
            _ => Models::Single(init(s.seed)?),
        };
        if s.kind == BackboneKind::RDrop && !(0.0..1.0).contains(&s.dropout_rate) {
            return Err(Error::InvalidParameter("dropout rate must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&s.teacher_momentum) {
            return Err(Error::InvalidParameter("teacher momentum must be in [0, 1]".into()));
        }
        if !(s.lr0 > 0.0) {
            return Err(Error::InvalidParameter("lr0 must be > 0".into()));
        }
        let tracker = ThresholdTracker::with_settings(s.num_classes, s.alpha, s.gamma_init, s.orientation)?;
        let (w_labeled, w_unlabeled) = match s.mode {
            LossMode::Heterogeneous => (
                make_schedule(&s.decay, s.delta_l, Ordering::Labeled)?,
                make_schedule(&s.decay, s.delta_u, Ordering::Unlabeled)?,
            ),
            LossMode::Homogeneous => (WeightSchedule::uniform(), WeightSchedule::uniform()),
        };
        let mut aug_rng = ChaCha8Rng::seed_from_u64(s.seed);
        aug_rng.set_stream(1);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(s.seed);
        dropout_rng.set_stream(2);
        Ok(Self {
            settings,
            models,
            tracker,
            epoch: 0,
            iteration: 0,
            total_iterations: 0,
            w_labeled,
            w_unlabeled,
            aug_rng,
            dropout_rng,
        })
    }

    pub fn labeled_schedule(&self) -> &WeightSchedule {
        &self.w_labeled
    }
    pub fn unlabeled_schedule(&self) -> &WeightSchedule {
        &self.w_unlabeled
    }

    pub fn lambda(&self) -> Result<f64> {
        lambda_warmup_with(self.epoch, self.settings.t_max, self.settings.lambda_scale, self.settings.lambda_sharpness)
    }

    pub fn lr(&self) -> f64 {
        if self.total_iterations == 0 {
            self.settings.lr0
        } else {
            poly_lr(self.settings.lr0, self.iteration, self.total_iterations)
        }
    }

    /// The network used for inference: the teacher for Mean Teacher, the
    /// first network for cross pseudo supervision.
    pub fn eval_model(&self) -> &TinySegNet {
        match &self.models {
            Models::Single(m) => m,
            Models::StudentTeacher { teacher, .. } => teacher,
            Models::Pair(a, _) => a,
        }
    }

    pub fn networks(&self) -> Vec<&TinySegNet> {
        match &self.models {
            Models::Single(m) => vec![m],
            Models::StudentTeacher { student, teacher } => vec![student, teacher],
            Models::Pair(a, b) => vec![a, b],
        }
    }
}

struct Pass {
    probs: ProbMap,
    cache: ForwardCache,
}

fn forward_all(net: &TinySegNet, images: &[&Image], dropout: &[Option<DropoutSpec>], parallel: bool) -> Result<Vec<Pass>> {
    let run = |(img, d): (&&Image, &Option<DropoutSpec>)| -> Result<Pass> {
        let (logits, cache) = net.forward(img, d.as_ref())?;
        Ok(Pass { probs: softmax(&logits)?, cache })
    };
    if parallel {
        images.par_iter().zip(dropout.par_iter()).map(run).collect()
    } else {
        images.iter().zip(dropout).map(run).collect()
    }
}

/// Backward through every `(cache, dlogits)` pair; sums in input order so
/// the result does not depend on thread scheduling.
fn backward_all(net: &TinySegNet, items: &[(&ForwardCache, Vec<f64>)], parallel: bool) -> Result<ParamGrads> {
    let per: Vec<ParamGrads> = if parallel {
        items.par_iter().map(|(c, g)| net.backward(c, g)).collect::<Result<_>>()?
    } else {
        items.iter().map(|(c, g)| net.backward(c, g)).collect::<Result<_>>()?
    };
    let mut total = ParamGrads::zeros_like(net);
    for g in &per {
        total.add_assign(g);
    }
    Ok(total)
}

fn no_dropout(n: usize) -> Vec<Option<DropoutSpec>> {
    vec![None; n]
}

/// Heterogeneous CE + Dice of `p` against annotation `y`, with regions from
/// the reference prediction compared to `y`. Gradient with respect to the
/// logits behind `p`.
pub fn supervised_het_loss(
    p: &ProbMap,
    reference: &ProbMap,
    y: &LabelMap,
    tracker: &ThresholdTracker,
    w: &WeightSchedule,
) -> Result<(LossOutput, RegionMap)> {
    let regions = quadripartition(reference, y, tracker)?;
    let ce = het_ce(p, y, &regions, w)?;
    let dice = het_dice(p, &one_hot(y, p.num_classes())?, &regions, w)?;
    Ok((ce.combine(&dice, p)?, regions))
}

/// Heterogeneous CE of `p` against the pseudo-label `argmax(reference)`,
/// with regions from the reference compared to `argmax(p)`.
pub fn unsupervised_het_loss(
    p: &ProbMap,
    reference: &ProbMap,
    tracker: &ThresholdTracker,
    w: &WeightSchedule,
    with_dice: bool,
) -> Result<(LossOutput, RegionMap, LabelMap)> {
    let pseudo = argmax(reference);
    let regions = quadripartition(reference, &argmax(p), tracker)?;
    let mut loss = het_ce(p, &pseudo, &regions, w)?;
    if with_dice {
        let dice = het_dice(p, &one_hot(&pseudo, p.num_classes())?, &regions, w)?;
        loss = loss.combine(&dice, p)?;
    }
    Ok((loss, regions, pseudo))
}

fn update_tracker(tracker: &mut ThresholdTracker, reference: &[&[Pass]], others: &[&[Pass]], population: ThresholdPopulation) -> Result<()> {
    let mut acc = ConfidenceAccumulator::new(tracker.num_classes());
    for group in reference {
        for pass in group.iter() {
            acc.add(&pass.probs)?;
        }
    }
    if population == ThresholdPopulation::All {
        for group in others {
            for pass in group.iter() {
                acc.add(&pass.probs)?;
            }
        }
    }
    tracker.update(&acc.finish())
}

/// Loss terms for one supervised/reference pairing over a whole batch.
struct Direction {
    sup: f64,
    unsup: f64,
    labeled_grads: Vec<Vec<f64>>,
    unlabeled_grads: Vec<Vec<f64>>,
    labeled_regions: RegionCounts,
    unlabeled_regions: RegionCounts,
    accuracy: Option<RegionAccuracy>,
}

struct DirectionInputs<'a> {
    sup_l: &'a [Pass],
    ref_l: &'a [Pass],
    labels: &'a [&'a LabelMap],
    sup_u: &'a [Pass],
    ref_u: &'a [Pass],
    truth_u: Option<&'a [LabelMap]>,
}

fn direction(
    state: &TrainState,
    inputs: DirectionInputs<'_>,
    w_l: &WeightSchedule,
    w_u: &WeightSchedule,
    lambda: f64,
    include_labeled: bool,
) -> Result<Direction> {
    let n_l = inputs.sup_l.len().max(1) as f64;
    let n_u = inputs.sup_u.len().max(1) as f64;
    let mut d = Direction {
        sup: 0.0,
        unsup: 0.0,
        labeled_grads: Vec::new(),
        unlabeled_grads: Vec::new(),
        labeled_regions: RegionCounts::default(),
        unlabeled_regions: RegionCounts::default(),
        accuracy: inputs.truth_u.map(|_| RegionAccuracy::default()),
    };
    if include_labeled {
        for ((p, r), y) in inputs.sup_l.iter().zip(inputs.ref_l).zip(inputs.labels) {
            let (loss, regions) = supervised_het_loss(&p.probs, &r.probs, y, &state.tracker, w_l)?;
            d.sup += loss.value / n_l;
            d.labeled_regions += region_sizes(&regions);
            d.labeled_grads.push(loss.grad.iter().map(|g| g / n_l).collect());
        }
    }
    for (j, (p, r)) in inputs.sup_u.iter().zip(inputs.ref_u).enumerate() {
        let (loss, regions, pseudo) =
            unsupervised_het_loss(&p.probs, &r.probs, &state.tracker, w_u, state.settings.unsup_dice)?;
        let g = loss.logit_grad(&p.probs)?;
        d.unsup += loss.value / n_u;
        d.unlabeled_regions += region_sizes(&regions);
        if let (Some(acc), Some(truth)) = (d.accuracy.as_mut(), inputs.truth_u) {
            acc.merge(&region_accuracy(&regions, &pseudo, &truth[j])?);
        }
        d.unlabeled_grads.push(g.iter().map(|v| v * lambda / n_u).collect());
    }
    Ok(d)
}

fn sgd(net: &mut TinySegNet, caches: &[&ForwardCache], grads: Vec<Vec<f64>>, lr: f64, parallel: bool) -> Result<()> {
    let items: Vec<(&ForwardCache, Vec<f64>)> = caches.iter().copied().zip(grads).collect();
    let g = backward_all(net, &items, parallel)?;
    net.sgd_step(&g, lr)
}

fn finish(state: &mut TrainState, mut report: StepReport) -> StepReport {
    state.iteration += 1;
    report.gamma = state.tracker.gamma().to_vec();
    report
}

fn schedules(state: &TrainState, homogeneous: bool) -> (WeightSchedule, WeightSchedule) {
    if homogeneous {
        (WeightSchedule::uniform(), WeightSchedule::uniform())
    } else {
        (state.w_labeled, state.w_unlabeled)
    }
}

pub fn step_cps(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    step_cps_with(state, batch, false)
}

fn step_cps_with(state: &mut TrainState, batch: &Batch, homogeneous: bool) -> Result<StepReport> {
    batch.validate()?;
    let par = state.settings.parallel;
    let (lambda, lr) = (state.lambda()?, state.lr());
    let (w_l, w_u) = schedules(state, homogeneous);
    let (img_l, labels, img_u) = split(batch);
    let Models::Pair(a, b) = &state.models else {
        return Err(Error::InvalidParameter("cross pseudo supervision needs two networks".into()));
    };
    let (a_l, a_u) = (forward_all(a, &img_l, &no_dropout(img_l.len()), par)?, forward_all(a, &img_u, &no_dropout(img_u.len()), par)?);
    let (b_l, b_u) = (forward_all(b, &img_l, &no_dropout(img_l.len()), par)?, forward_all(b, &img_u, &no_dropout(img_u.len()), par)?);

    // both networks act as references
    update_tracker(&mut state.tracker, &[&a_l, &a_u, &b_l, &b_u], &[], state.settings.population)?;

    let truth = batch.unlabeled_truth.as_deref();
    let da = direction(
        state,
        DirectionInputs { sup_l: &a_l, ref_l: &b_l, labels: &labels, sup_u: &a_u, ref_u: &b_u, truth_u: truth },
        &w_l,
        &w_u,
        lambda,
        true,
    )?;
    let db = direction(
        state,
        DirectionInputs { sup_l: &b_l, ref_l: &a_l, labels: &labels, sup_u: &b_u, ref_u: &a_u, truth_u: None },
        &w_l,
        &w_u,
        lambda,
        true,
    )?;

    let caches = |l: &[Pass], u: &[Pass]| -> Vec<ForwardCache> { l.iter().chain(u).map(|p| p.cache.clone()).collect() };
    let ca = caches(&a_l, &a_u);
    let cb = caches(&b_l, &b_u);
    let report = StepReport {
        sup_loss: da.sup + db.sup,
        unsup_loss: da.unsup + db.unsup,
        lambda,
        lr,
        labeled_regions: da.labeled_regions,
        unlabeled_regions: da.unlabeled_regions,
        gamma: Vec::new(),
        unlabeled_accuracy: da.accuracy,
    };
    let ga: Vec<Vec<f64>> = da.labeled_grads.into_iter().chain(da.unlabeled_grads).collect();
    let gb: Vec<Vec<f64>> = db.labeled_grads.into_iter().chain(db.unlabeled_grads).collect();
    let Models::Pair(a, b) = &mut state.models else { unreachable!() };
    sgd(a, &ca.iter().collect::<Vec<_>>(), ga, lr, par)?;
    sgd(b, &cb.iter().collect::<Vec<_>>(), gb, lr, par)?;
    Ok(finish(state, report))
}

pub fn step_mt(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    step_mt_with(state, batch, false)
}

fn step_mt_with(state: &mut TrainState, batch: &Batch, homogeneous: bool) -> Result<StepReport> {
    batch.validate()?;
    let par = state.settings.parallel;
    let (lambda, lr) = (state.lambda()?, state.lr());
    let (w_l, w_u) = schedules(state, homogeneous);
    let (img_l, labels, img_u) = split(batch);
    let Models::StudentTeacher { student, teacher } = &state.models else {
        return Err(Error::InvalidParameter("mean teacher needs a student and a teacher".into()));
    };
    let s_l = forward_all(student, &img_l, &no_dropout(img_l.len()), par)?;
    let s_u = forward_all(student, &img_u, &no_dropout(img_u.len()), par)?;
    let t_l = forward_all(teacher, &img_l, &no_dropout(img_l.len()), par)?;
    let t_u = forward_all(teacher, &img_u, &no_dropout(img_u.len()), par)?;
    update_tracker(&mut state.tracker, &[&t_l, &t_u], &[&s_l, &s_u], state.settings.population)?;

    let d = direction(
        state,
        DirectionInputs {
            sup_l: &s_l,
            ref_l: &t_l,
            labels: &labels,
            sup_u: &s_u,
            ref_u: &t_u,
            truth_u: batch.unlabeled_truth.as_deref(),
        },
        &w_l,
        &w_u,
        lambda,
        true,
    )?;
    let report = StepReport {
        sup_loss: d.sup,
        unsup_loss: d.unsup,
        lambda,
        lr,
        labeled_regions: d.labeled_regions,
        unlabeled_regions: d.unlabeled_regions,
        gamma: Vec::new(),
        unlabeled_accuracy: d.accuracy,
    };
    let caches: Vec<&ForwardCache> = s_l.iter().chain(&s_u).map(|p| &p.cache).collect();
    let grads: Vec<Vec<f64>> = d.labeled_grads.into_iter().chain(d.unlabeled_grads).collect();
    let m = state.settings.teacher_momentum;
    let Models::StudentTeacher { student, teacher } = &mut state.models else { unreachable!() };
    sgd(student, &caches, grads, lr, par)?;
    teacher.ema_update(student, m)?;
    Ok(finish(state, report))
}

pub fn step_fixmatch(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    step_fixmatch_with(state, batch, false)
}

fn step_fixmatch_with(state: &mut TrainState, batch: &Batch, homogeneous: bool) -> Result<StepReport> {
    batch.validate()?;
    let par = state.settings.parallel;
    let (lambda, lr) = (state.lambda()?, state.lr());
    let (w_l, w_u) = schedules(state, homogeneous);
    let strong_spec = state.settings.strong;

    let mut weak_l = Vec::new();
    let mut strong_l = Vec::new();
    let mut labels_aug = Vec::new();
    for (img, y) in &batch.labeled {
        let (ws, ss) = (state.aug_rng.random::<u64>(), state.aug_rng.random::<u64>());
        let (wi, wy, tag) = weak_augment(img, y, ws);
        strong_l.push(strong_augment(img, tag, ss, &strong_spec).image);
        weak_l.push(wi);
        labels_aug.push(wy);
    }
    let mut weak_u = Vec::new();
    let mut strong_u = Vec::new();
    let mut truth_u = Vec::new();
    for (j, img) in batch.unlabeled.iter().enumerate() {
        let (ws, ss) = (state.aug_rng.random::<u64>(), state.aug_rng.random::<u64>());
        let placeholder;
        let y = match &batch.unlabeled_truth {
            Some(t) => &t[j],
            None => {
                placeholder = LabelMap::filled(img.height(), img.width(), 0)?;
                &placeholder
            }
        };
        let (wi, wy, tag) = weak_augment(img, y, ws);
        strong_u.push(strong_augment(img, tag, ss, &strong_spec).image);
        weak_u.push(wi);
        truth_u.push(wy);
    }

    let Models::Single(net) = &state.models else {
        return Err(Error::InvalidParameter("FixMatch needs a single network".into()));
    };
    let w_pl = forward_all(net, &refs(&weak_l), &no_dropout(weak_l.len()), par)?;
    let w_pu = forward_all(net, &refs(&weak_u), &no_dropout(weak_u.len()), par)?;
    let s_pl = forward_all(net, &refs(&strong_l), &no_dropout(strong_l.len()), par)?;
    let s_pu = forward_all(net, &refs(&strong_u), &no_dropout(strong_u.len()), par)?;
    update_tracker(&mut state.tracker, &[&w_pl, &w_pu], &[&s_pl, &s_pu], state.settings.population)?;

    let label_refs: Vec<&LabelMap> = labels_aug.iter().collect();
    let d = direction(
        state,
        DirectionInputs {
            sup_l: &s_pl,
            ref_l: &w_pl,
            labels: &label_refs,
            sup_u: &s_pu,
            ref_u: &w_pu,
            truth_u: batch.unlabeled_truth.as_ref().map(|_| truth_u.as_slice()),
        },
        &w_l,
        &w_u,
        lambda,
        true,
    )?;
    let report = StepReport {
        sup_loss: d.sup,
        unsup_loss: d.unsup,
        lambda,
        lr,
        labeled_regions: d.labeled_regions,
        unlabeled_regions: d.unlabeled_regions,
        gamma: Vec::new(),
        unlabeled_accuracy: d.accuracy,
    };
    let caches: Vec<&ForwardCache> = s_pl.iter().chain(&s_pu).map(|p| &p.cache).collect();
    let grads: Vec<Vec<f64>> = d.labeled_grads.into_iter().chain(d.unlabeled_grads).collect();
    let Models::Single(net) = &mut state.models else { unreachable!() };
    sgd(net, &caches, grads, lr, par)?;
    Ok(finish(state, report))
}

pub fn step_rdrop(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    step_rdrop_with(state, batch, false)
}

fn step_rdrop_with(state: &mut TrainState, batch: &Batch, homogeneous: bool) -> Result<StepReport> {
    batch.validate()?;
    let par = state.settings.parallel;
    let (lambda, lr) = (state.lambda()?, state.lr());
    let (w_l, w_u) = schedules(state, homogeneous);
    let (img_l, labels, img_u) = split(batch);
    let rate = state.settings.dropout_rate;
    let mut draw = |n: usize| -> Result<Vec<Option<DropoutSpec>>> {
        (0..n).map(|_| DropoutSpec::new(rate, state.dropout_rng.random()).map(Some)).collect()
    };
    let (d1l, d1u, d2l, d2u) = (draw(img_l.len())?, draw(img_u.len())?, draw(img_l.len())?, draw(img_u.len())?);
    let Models::Single(net) = &state.models else {
        return Err(Error::InvalidParameter("R-Drop needs a single network".into()));
    };
    let p1_l = forward_all(net, &img_l, &d1l, par)?;
    let p1_u = forward_all(net, &img_u, &d1u, par)?;
    let p2_l = forward_all(net, &img_l, &d2l, par)?;
    let p2_u = forward_all(net, &img_u, &d2u, par)?;
    update_tracker(&mut state.tracker, &[&p2_l, &p2_u], &[&p1_l, &p1_u], state.settings.population)?;

    let first = direction(
        state,
        DirectionInputs {
            sup_l: &p1_l,
            ref_l: &p2_l,
            labels: &labels,
            sup_u: &p1_u,
            ref_u: &p2_u,
            truth_u: batch.unlabeled_truth.as_deref(),
        },
        &w_l,
        &w_u,
        lambda,
        true,
    )?;
    let second = direction(
        state,
        DirectionInputs { sup_l: &p2_l, ref_l: &p1_l, labels: &labels, sup_u: &p2_u, ref_u: &p1_u, truth_u: None },
        &w_l,
        &w_u,
        lambda,
        false,
    )?;
    let report = StepReport {
        sup_loss: first.sup,
        unsup_loss: first.unsup + second.unsup,
        lambda,
        lr,
        labeled_regions: first.labeled_regions,
        unlabeled_regions: first.unlabeled_regions,
        gamma: Vec::new(),
        unlabeled_accuracy: first.accuracy,
    };
    let caches: Vec<&ForwardCache> =
        p1_l.iter().chain(&p1_u).chain(&p2_u).map(|p| &p.cache).collect();
    let grads: Vec<Vec<f64>> = first
        .labeled_grads
        .into_iter()
        .chain(first.unlabeled_grads)
        .chain(second.unlabeled_grads)
        .collect();
    let Models::Single(net) = &mut state.models else { unreachable!() };
    sgd(net, &caches, grads, lr, par)?;
    Ok(finish(state, report))
}

/// Supervised-only step: CE + Dice on labeled images with equal region
/// weights. The network's own detached prediction serves as the reference
/// for the reported labeled partition.
pub fn step_supervised(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    batch.validate()?;
    let par = state.settings.parallel;
    let (lambda, lr) = (state.lambda()?, state.lr());
    let (img_l, labels, _) = split(batch);
    let Models::Single(net) = &state.models else {
        return Err(Error::InvalidParameter("supervised training needs a single network".into()));
    };
    let p_l = forward_all(net, &img_l, &no_dropout(img_l.len()), par)?;
    update_tracker(&mut state.tracker, &[&p_l], &[], state.settings.population)?;
    let uniform = WeightSchedule::uniform();
    let d = direction(
        state,
        DirectionInputs { sup_l: &p_l, ref_l: &p_l, labels: &labels, sup_u: &[], ref_u: &[], truth_u: None },
        &uniform,
        &uniform,
        lambda,
        true,
    )?;
    let report = StepReport {
        sup_loss: d.sup,
        unsup_loss: 0.0,
        lambda,
        lr,
        labeled_regions: d.labeled_regions,
        unlabeled_regions: RegionCounts::default(),
        gamma: Vec::new(),
        unlabeled_accuracy: None,
    };
    let caches: Vec<&ForwardCache> = p_l.iter().map(|p| &p.cache).collect();
    let Models::Single(net) = &mut state.models else { unreachable!() };
    sgd(net, &caches, d.labeled_grads, lr, par)?;
    Ok(finish(state, report))
}

/// Runs the backbone's step with its configured loss mode.
pub fn step(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    let homogeneous = state.settings.mode == LossMode::Homogeneous;
    dispatch(state, batch, homogeneous)
}

/// Same wiring as [`step`] with all four region weights forced to 1.
pub fn step_baseline(state: &mut TrainState, batch: &Batch) -> Result<StepReport> {
    dispatch(state, batch, true)
}

fn dispatch(state: &mut TrainState, batch: &Batch, homogeneous: bool) -> Result<StepReport> {
    match state.settings.kind {
        BackboneKind::Cps => step_cps_with(state, batch, homogeneous),
        BackboneKind::MeanTeacher => step_mt_with(state, batch, homogeneous),
        BackboneKind::FixMatch => step_fixmatch_with(state, batch, homogeneous),
        BackboneKind::RDrop => step_rdrop_with(state, batch, homogeneous),
        BackboneKind::Supervised => step_supervised(state, batch),
    }
}

fn refs(v: &[Image]) -> Vec<&Image> {
    v.iter().collect()
}

fn split(batch: &Batch) -> (Vec<&Image>, Vec<&LabelMap>, Vec<&Image>) {
    (
        batch.labeled.iter().map(|(i, _)| i).collect(),
        batch.labeled.iter().map(|(_, y)| y).collect(),
        batch.unlabeled.iter().collect(),
    )
}
