//! Python bindings for the `hetseg` crate.
//!
//! Maps are exchanged as flat row-major lists together with their shape:
//! probabilities and logits as `H*W*C` floats, labels as `H*W` ints and
//! region maps as `H*W` strings (`"UC"`, `"US"`, `"DC"`, `"DS"`).

use hetseg::backbones::{evaluate_split, train as run_training};
use hetseg::cli::RunConfig;
use hetseg::synthdata::{generate_dataset, inject_label_noise, Benchmark, NoiseMode, NoiseSpec, SceneSpec};
use hetseg::{
    argmax, class_mean_conf, het_ce, het_dice, het_mse, lambda_warmup, make_schedule, metrics, one_hot,
    quadripartition, softmax, DecayFunction, Image, LabelMap, LogitMap, LossOutput, Ordering, ProbMap, Region,
    RegionMap, WeightSchedule,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: hetseg::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn decay(function: &str, beta: f64) -> PyResult<DecayFunction> {
    DecayFunction::from_name(function, beta).map_err(err)
}

fn ordering(name: &str) -> PyResult<Ordering> {
    match name {
        "unlabeled" => Ok(Ordering::Unlabeled),
        "labeled" => Ok(Ordering::Labeled),
        other => Err(PyValueError::new_err(format!("unknown ordering '{other}'"))),
    }
}

fn probs(data: Vec<f64>, h: usize, w: usize, c: usize) -> PyResult<ProbMap> {
    ProbMap::new(h, w, c, data).map_err(err)
}

fn labels(data: Vec<u16>, h: usize, w: usize) -> PyResult<LabelMap> {
    LabelMap::new(h, w, data).map_err(err)
}

fn regions(names: Vec<String>, h: usize, w: usize) -> PyResult<RegionMap> {
    let data = names
        .iter()
        .map(|n| {
            Region::ALL
                .into_iter()
                .find(|r| r.name() == n)
                .ok_or_else(|| PyValueError::new_err(format!("unknown region '{n}'")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    RegionMap::new(h, w, data).map_err(err)
}

fn schedule(weights: [f64; 4]) -> PyResult<WeightSchedule> {
    WeightSchedule::from_weights(weights).map_err(err)
}

fn loss_pair(out: LossOutput) -> (f64, Vec<f64>) {
    (out.value, out.grad)
}

/// Decay function value at `u` in `[0, 2]`.
#[pyfunction]
#[pyo3(signature = (u, function = "generalized-gaussian", beta = 3.0))]
fn phi(u: f64, function: &str, beta: f64) -> PyResult<f64> {
    hetseg::phi(u, &decay(function, beta)?).map_err(err)
}

/// Region weights `[UC, US, DC, DS]` for spacing `delta`.
#[pyfunction]
#[pyo3(signature = (delta, ordering = "unlabeled", function = "generalized-gaussian", beta = 3.0))]
fn weight_schedule(delta: f64, ordering: &str, function: &str, beta: f64) -> PyResult<[f64; 4]> {
    let s = make_schedule(&decay(function, beta)?, delta, self::ordering(ordering)?).map_err(err)?;
    Ok(s.weights())
}

#[pyfunction]
fn lambda_at(t: u32, t_max: u32) -> PyResult<f64> {
    lambda_warmup(t, t_max).map_err(err)
}

#[pyfunction]
fn softmax_map(logits: Vec<f64>, height: usize, width: usize, classes: usize) -> PyResult<Vec<f64>> {
    let l = LogitMap::new(height, width, classes, logits).map_err(err)?;
    Ok(softmax(&l).map_err(err)?.data().to_vec())
}

#[pyfunction]
fn argmax_map(probabilities: Vec<f64>, height: usize, width: usize, classes: usize) -> PyResult<Vec<u16>> {
    Ok(argmax(&probs(probabilities, height, width, classes)?).data().to_vec())
}

/// Splits pixels by agreement between `reference`'s argmax and `other`, and by
/// `reference`'s confidence against the per-class thresholds `gamma`.
#[pyfunction]
fn partition(
    reference: Vec<f64>,
    other: Vec<u16>,
    height: usize,
    width: usize,
    gamma: Vec<f64>,
) -> PyResult<Vec<&'static str>> {
    let p = probs(reference, height, width, gamma.len())?;
    let y = labels(other, height, width)?;
    let tracker = ThresholdTracker::from_gamma(gamma, 0.99)?;
    let r = quadripartition(&p, &y, &tracker.inner).map_err(err)?;
    Ok(r.data().iter().map(|q| q.name()).collect())
}

/// Weighted cross entropy; returns the value and the gradient w.r.t. logits.
#[pyfunction]
fn ce_loss(
    probabilities: Vec<f64>,
    target: Vec<u16>,
    region_names: Vec<String>,
    weights: [f64; 4],
    height: usize,
    width: usize,
    classes: usize,
) -> PyResult<(f64, Vec<f64>)> {
    let p = probs(probabilities, height, width, classes)?;
    let y = labels(target, height, width)?;
    let r = regions(region_names, height, width)?;
    Ok(loss_pair(het_ce(&p, &y, &r, &schedule(weights)?).map_err(err)?))
}

/// Weighted soft Dice; returns the value and the gradient w.r.t. probabilities.
#[pyfunction]
fn dice_loss(
    probabilities: Vec<f64>,
    target: Vec<u16>,
    region_names: Vec<String>,
    weights: [f64; 4],
    height: usize,
    width: usize,
    classes: usize,
) -> PyResult<(f64, Vec<f64>)> {
    let p = probs(probabilities, height, width, classes)?;
    let t = one_hot(&labels(target, height, width)?, classes).map_err(err)?;
    let r = regions(region_names, height, width)?;
    Ok(loss_pair(het_dice(&p, &t, &r, &schedule(weights)?).map_err(err)?))
}

/// Weighted squared error between two probability maps; gradient w.r.t.
/// the first one.
#[pyfunction]
fn mse_loss(
    probabilities: Vec<f64>,
    reference: Vec<f64>,
    region_names: Vec<String>,
    weights: [f64; 4],
    height: usize,
    width: usize,
    classes: usize,
) -> PyResult<(f64, Vec<f64>)> {
    let p = probs(probabilities, height, width, classes)?;
    let q = probs(reference, height, width, classes)?;
    let r = regions(region_names, height, width)?;
    Ok(loss_pair(het_mse(&p, &q, &r, &schedule(weights)?).map_err(err)?))
}

/// Per-class DSC, Jaccard and HD95 of one prediction, as a JSON string.
#[pyfunction]
fn evaluate_image(pred: Vec<u16>, truth: Vec<u16>, height: usize, width: usize, classes: usize) -> PyResult<String> {
    let m = metrics::evaluate_image(&labels(pred, height, width)?, &labels(truth, height, width)?, classes)
        .map_err(err)?;
    Ok(serde_json::to_string(&m).expect("metrics serialize"))
}

/// Renders `n` synthetic scenes; returns `(images, labels)` as flat lists.
#[pyfunction]
#[pyo3(signature = (n, seed = 0, scene_json = None))]
fn synth(n: usize, seed: u64, scene_json: Option<&str>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<u16>>)> {
    let scene: SceneSpec = match scene_json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SceneSpec::default(),
    };
    let samples = generate_dataset(&SceneSpec { seed, ..scene }, n).map_err(err)?;
    Ok(samples.into_iter().map(|s| (s.image.data().to_vec(), s.labels.data().to_vec())).unzip())
}

#[pyfunction]
#[pyo3(signature = (label_map, height, width, classes, rate, seed = 0, mode = "boundary-morph"))]
fn corrupt_labels(
    label_map: Vec<u16>,
    height: usize,
    width: usize,
    classes: usize,
    rate: f64,
    seed: u64,
    mode: &str,
) -> PyResult<Vec<u16>> {
    let mode = match mode {
        "boundary-morph" => NoiseMode::BoundaryMorph,
        "random-flip" => NoiseMode::RandomFlip,
        other => return Err(PyValueError::new_err(format!("unknown noise mode '{other}'"))),
    };
    let y = labels(label_map, height, width)?;
    Ok(inject_label_noise(&y, classes, &NoiseSpec { mode, rate, seed }).map_err(err)?.data().to_vec())
}

/// Trains from a run configuration (JSON, same keys as the command line
/// tool) and returns the per-epoch rows and test report as JSON.
#[pyfunction]
fn train(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = RunConfig::from_json(config_json).map_err(err)?;
    py.detach(|| {
        let bench = Benchmark::generate(&cfg.benchmark()).map_err(err)?;
        let settings = cfg.train_settings(bench.num_classes, bench.train_mean()).map_err(err)?;
        let outcome = run_training(settings, &bench, cfg.loader(), |_| Ok(())).map_err(err)?;
        let val = evaluate_split(
            outcome.state.eval_model(),
            &bench.val,
            bench.num_classes,
            cfg.parallel,
        )
        .map_err(err)?;
        let doc = serde_json::json!({
            "rows": outcome.rows,
            "test": outcome.test,
            "val_mean_dsc": val.mean_dsc,
            "gamma": outcome.state.tracker.gamma(),
        });
        Ok(doc.to_string())
    })
}

/// Adaptive per-class confidence thresholds.
#[pyclass(name = "ThresholdTracker")]
struct ThresholdTracker {
    inner: hetseg::ThresholdTracker,
}

impl ThresholdTracker {
    fn from_gamma(gamma: Vec<f64>, alpha: f64) -> PyResult<Self> {
        Ok(Self { inner: hetseg::ThresholdTracker::from_gamma(gamma, alpha).map_err(err)? })
    }
}

#[pymethods]
impl ThresholdTracker {
    #[new]
    #[pyo3(signature = (classes, alpha = 0.99))]
    fn new(classes: usize, alpha: f64) -> PyResult<Self> {
        Ok(Self { inner: hetseg::ThresholdTracker::new(classes, alpha).map_err(err)? })
    }

    /// One moving-average step from a probability map.
    fn update(&mut self, probabilities: Vec<f64>, height: usize, width: usize) -> PyResult<()> {
        let p = probs(probabilities, height, width, self.inner.num_classes())?;
        self.inner.update(&class_mean_conf(&p)).map_err(err)
    }

    #[getter]
    fn gamma(&self) -> Vec<f64> {
        self.inner.gamma().to_vec()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration()
    }
}

/// The 3x3 conv + ReLU + 1x1 conv classifier.
#[pyclass(name = "TinySegNet")]
struct TinySegNet {
    inner: hetseg::TinySegNet,
}

#[pymethods]
impl TinySegNet {
    #[new]
    #[pyo3(signature = (in_channels = 1, hidden = 16, classes = 3, seed = 0))]
    fn new(in_channels: usize, hidden: usize, classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: hetseg::TinySegNet::init(seed, in_channels, hidden, classes).map_err(err)? })
    }

    /// Logits for an `H*W*channels` image.
    fn forward(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let img = Image::new(height, width, self.inner.in_channels(), image).map_err(err)?;
        Ok(self.inner.forward(&img, None).map_err(err)?.0.data().to_vec())
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[setter]
    fn set_params(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.inner.set_params(params).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }
}

#[pymodule]
fn hetseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phi, m)?)?;
    m.add_function(wrap_pyfunction!(weight_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_map, m)?)?;
    m.add_function(wrap_pyfunction!(argmax_map, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mse_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_image, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt_labels, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<ThresholdTracker>()?;
    m.add_class::<TinySegNet>()?;
    Ok(())
}
