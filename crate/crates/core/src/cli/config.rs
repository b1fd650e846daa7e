//! JSON run configuration. Unknown keys are rejected and every omitted key
//! takes its default, so re-serializing a loaded file yields the complete
//! effective settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneKind, LoaderSettings, LossMode, ThresholdPopulation, TrainSettings};
use crate::error::{Error, Result};
use crate::partition::EmaOrientation;
use crate::synthdata::{BenchmarkSpec, NoiseMode, NoiseSpec, SceneSpec, StrongAugmentSpec};
use crate::weights::{make_schedule, DecayFunction, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneName {
    Mt,
    Cps,
    Fixmatch,
    Rdrop,
    Sl,
    PlainMt,
    PlainCps,
    PlainFixmatch,
    PlainRdrop,
}

impl BackboneName {
    pub fn kind_and_mode(self) -> (BackboneKind, LossMode) {
        use BackboneKind as K;
        use LossMode::{Heterogeneous as H, Homogeneous as P};
        match self {
            BackboneName::Mt => (K::MeanTeacher, H),
            BackboneName::Cps => (K::Cps, H),
            BackboneName::Fixmatch => (K::FixMatch, H),
            BackboneName::Rdrop => (K::RDrop, H),
            BackboneName::Sl => (K::Supervised, P),
            BackboneName::PlainMt => (K::MeanTeacher, P),
            BackboneName::PlainCps => (K::Cps, P),
            BackboneName::PlainFixmatch => (K::FixMatch, P),
            BackboneName::PlainRdrop => (K::RDrop, P),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneName,

    // region weights
    pub decay_function: String,
    pub beta: f64,
    pub delta_u: f64,
    pub delta_l: f64,

    // adaptive thresholds
    pub alpha_ema: f64,
    pub ema_orientation: EmaOrientation,
    pub gamma_init: f64,
    pub threshold_population: ThresholdPopulation,

    // schedule
    pub lambda_scale: f64,
    pub lambda_sharpness: f64,
    pub t_max: u32,
    pub lr0: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,

    // backbone specifics
    pub teacher_momentum: f64,
    pub dropout_rate: f64,
    pub jitter: f64,
    pub cutout: bool,
    pub unsup_dice: bool,

    pub width: usize,
    pub seed: u64,

    // data
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub labeled_fraction: f64,
    pub noise_mode: NoiseMode,
    pub noise_rate: f64,
    pub data_seed: u64,
    /// Load a dataset written by `synth` instead of generating one.
    pub data_dir: Option<PathBuf>,

    pub output_dir: PathBuf,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchmarkSpec::default();
        Self {
            backbone: BackboneName::Cps,
            decay_function: "generalized-gaussian".into(),
            beta: crate::weights::DEFAULT_BETA,
            delta_u: crate::weights::DEFAULT_DELTA_UNLABELED,
            delta_l: crate::weights::DEFAULT_DELTA_LABELED,
            alpha_ema: crate::partition::DEFAULT_ALPHA,
            ema_orientation: EmaOrientation::Observation,
            gamma_init: crate::partition::DEFAULT_GAMMA_INIT,
            threshold_population: ThresholdPopulation::Reference,
            lambda_scale: crate::weights::DEFAULT_LAMBDA_SCALE,
            lambda_sharpness: crate::weights::DEFAULT_LAMBDA_SHARPNESS,
            t_max: 600,
            lr0: 1.0,
            batch_labeled: 2,
            batch_unlabeled: 4,
            teacher_momentum: 0.99,
            dropout_rate: 0.3,
            jitter: 0.1,
            cutout: true,
            unsup_dice: false,
            width: 16,
            seed: 0,
            scene: bench.scene,
            n_train: bench.n_train,
            n_val: bench.n_val,
            n_test: bench.n_test,
            labeled_fraction: bench.labeled_fraction,
            noise_mode: bench.noise.mode,
            noise_rate: bench.noise.rate,
            data_seed: 0,
            data_dir: None,
            output_dir: PathBuf::from("runs/default"),
            parallel: false,
        }
    }
}

fn check(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg.into()))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn decay(&self) -> Result<DecayFunction> {
        DecayFunction::from_name(&self.decay_function, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let decay = self.decay()?;
        make_schedule(&decay, self.delta_u, Ordering::Unlabeled)?;
        make_schedule(&decay, self.delta_l, Ordering::Labeled)?;
        check((0.0..=1.0).contains(&self.alpha_ema), "alpha_ema must be in [0, 1]")?;
        check((0.0..=1.0).contains(&self.gamma_init), "gamma_init must be in [0, 1]")?;
        check(self.lambda_scale >= 0.0 && self.lambda_scale.is_finite(), "lambda_scale must be >= 0")?;
        check(self.lambda_sharpness >= 0.0 && self.lambda_sharpness.is_finite(), "lambda_sharpness must be >= 0")?;
        check(self.t_max >= 1, "t_max must be >= 1")?;
        check(self.lr0 > 0.0 && self.lr0.is_finite(), "lr0 must be > 0")?;
        check(self.batch_labeled >= 1, "batch_labeled must be >= 1")?;
        check((0.0..=1.0).contains(&self.teacher_momentum), "teacher_momentum must be in [0, 1]")?;
        check((0.0..1.0).contains(&self.dropout_rate), "dropout_rate must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.jitter), "jitter must be in [0, 1)")?;
        check(self.width >= 1, "width must be >= 1")?;
        if self.data_dir.is_none() {
            self.benchmark().validate()?;
        }
        Ok(())
    }

    pub fn benchmark(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            scene: SceneSpec { seed: self.data_seed, ..self.scene.clone() },
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            labeled_fraction: self.labeled_fraction,
            noise: NoiseSpec { mode: self.noise_mode, rate: self.noise_rate, seed: self.data_seed },
        }
    }

    /// Training settings for data with `num_classes` classes whose training
    /// images have mean intensity `fill` (used for cutout patches).
    pub fn train_settings(&self, num_classes: usize, fill: f64) -> Result<TrainSettings> {
        let (kind, mode) = self.backbone.kind_and_mode();
        Ok(TrainSettings {
            kind,
            mode,
            decay: self.decay()?,
            delta_u: self.delta_u,
            delta_l: self.delta_l,
            alpha: self.alpha_ema,
            orientation: self.ema_orientation,
            gamma_init: self.gamma_init,
            population: self.threshold_population,
            lambda_scale: self.lambda_scale,
            lambda_sharpness: self.lambda_sharpness,
            t_max: self.t_max,
            lr0: self.lr0,
            teacher_momentum: self.teacher_momentum,
            dropout_rate: self.dropout_rate,
            in_channels: 1,
            hidden: self.width,
            num_classes,
            seed: self.seed,
            unsup_dice: self.unsup_dice,
            strong: StrongAugmentSpec { jitter: self.jitter, cutout: self.cutout, fill, ..StrongAugmentSpec::default() },
            parallel: self.parallel,
        })
    }

    pub fn loader(&self) -> LoaderSettings {
        LoaderSettings { batch_labeled: self.batch_labeled, batch_unlabeled: self.batch_unlabeled }
    }
}
