//! Command-line front end: `weights`, `synth`, `train`, `eval`, `partition`.
//!
//! Exit codes: 0 success, 2 bad input or configuration, 3 I/O failure,
//! 4 numerical failure.

pub mod config;
pub mod dataset;
pub mod dump;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::backbones::{train, EpochRow, TrainOutcome};
use crate::error::Error;
use crate::grid::{LabelMap, Region};
use crate::metrics::{evaluate, EvalReport};
use crate::model::TinySegNet;
use crate::partition::{quadripartition_with, region_sizes, ThresholdTracker};
use crate::synthdata::Benchmark;
use crate::weights::{make_schedule, DecayFunction, Ordering, WeightSchedule};

pub use config::{BackboneName, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hetseg", version, about = "Quadripartition-weighted semi-supervised segmentation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderingArg {
    Unlabeled,
    Labeled,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the four region weights of a schedule
    Weights {
        #[arg(long, default_value_t = 3.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        #[arg(long, value_enum, default_value = "unlabeled")]
        ordering: OrderingArg,
        #[arg(long, default_value = "generalized-gaussian")]
        function: String,
    },
    /// Render the synthetic benchmark to IMG0/LMAP files plus a manifest
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured backbone; writes metrics.csv, model.tsnw and test_eval.json
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output_dir from the configuration
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split written by `synth`
    Eval {
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth against itself instead of a model
        #[arg(long)]
        identity: bool,
    },
    /// Quadripartition a reference PMAP against an LMAP
    Partition {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        other: PathBuf,
        /// Comma-separated per-class thresholds
        #[arg(long, value_delimiter = ',', conflicts_with = "tracker", required_unless_present = "tracker")]
        gamma: Option<Vec<f64>>,
        /// Threshold tracker JSON as written by `train`
        #[arg(long)]
        tracker: Option<PathBuf>,
        #[arg(long)]
        qmap: PathBuf,
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Diverged { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError { code: EXIT_IO, message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> CliError {
    CliError { code: EXIT_INPUT, message: message.into() }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code. Output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Weights { beta, delta, ordering, function } => cmd_weights(beta, delta, ordering, &function, out),
        Command::Synth { config, out: dir } => cmd_synth(&config, &dir, out),
        Command::Train { config, out: dir } => cmd_train(&config, dir.as_deref(), out).map(|_| ()),
        Command::Eval { checkpoint, data, split, out: dir, identity } => {
            cmd_eval(checkpoint.as_deref(), &data, &split, &dir, identity, out).map(|_| ())
        }
        Command::Partition { reference, other, gamma, tracker, qmap, pgm } => {
            cmd_partition(&reference, &other, gamma, tracker.as_deref(), &qmap, pgm.as_deref(), out)
        }
    }
}

fn emit(out: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::from(Error::Io(e)))
}

pub fn format_schedule(w: &WeightSchedule) -> String {
    Region::ALL.iter().map(|&r| format!("{} {:.3}", r.name(), w[r])).collect::<Vec<_>>().join(" ")
}

pub fn cmd_weights(beta: f64, delta: f64, ordering: OrderingArg, function: &str, out: &mut dyn Write) -> CliResult<()> {
    let f = DecayFunction::from_name(function, beta)?;
    let ordering = match ordering {
        OrderingArg::Unlabeled => Ordering::Unlabeled,
        OrderingArg::Labeled => Ordering::Labeled,
    };
    let w = make_schedule(&f, delta, ordering)?;
    emit(out, &format_schedule(&w))
}

pub fn cmd_synth(config: &Path, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.benchmark();
    spec.validate()?;
    if !dir.is_dir() {
        return Err(CliError { code: EXIT_IO, message: format!("output directory {} does not exist", dir.display()) });
    }
    let data = Benchmark::generate(&spec)?;
    let m = dataset::write_dataset(dir, &spec, &data)?;
    emit(
        out,
        &format!(
            "wrote {} train ({} labeled), {} val, {} test images; mean label noise {:.4}",
            m.train.len(),
            m.n_labeled,
            m.val.len(),
            m.test.len(),
            m.noise.mean_fraction
        ),
    )
}

fn csv_header(num_classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "sup_loss", "unsup_loss", "lambda", "lr"].iter().map(|s| s.to_string()).collect();
    h.extend((0..num_classes).map(|c| format!("gamma_{c}")));
    for prefix in ["lab", "unl"] {
        h.extend(Region::ALL.iter().map(|r| format!("{prefix}_{}", r.name().to_lowercase())));
    }
    h.push("val_dsc".into());
    h.extend(Region::ALL.iter().map(|r| format!("acc_{}", r.name().to_lowercase())));
    h
}

fn csv_row(r: &EpochRow) -> Vec<String> {
    let mut row = vec![r.epoch.to_string(), r.sup_loss.to_string(), r.unsup_loss.to_string(), r.lambda.to_string(), r.lr.to_string()];
    row.extend(r.gamma.iter().map(|g| g.to_string()));
    row.extend(Region::ALL.iter().map(|&q| r.labeled_regions[q].to_string()));
    row.extend(Region::ALL.iter().map(|&q| r.unlabeled_regions[q].to_string()));
    row.push(r.val_dsc.to_string());
    row.extend(Region::ALL.iter().map(|&q| r.unlabeled_accuracy.accuracy(q).map(|a| a.to_string()).unwrap_or_default()));
    row
}

fn write_checkpoint(net: &TinySegNet, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    net.write_checkpoint(&mut buf)?;
    Ok(dump::write_bytes(path, &buf)?)
}

pub fn read_checkpoint(path: &Path) -> CliResult<TinySegNet> {
    let bytes = dump::read_bytes(path)?;
    TinySegNet::read_checkpoint(&bytes[..]).map_err(|e| match e {
        Error::Io(io) => input_error(format!("{}: truncated checkpoint ({io})", path.display())),
        other => other.into(),
    })
}

/// Loads or generates the dataset a configuration refers to.
pub fn load_data(cfg: &RunConfig) -> CliResult<Benchmark> {
    Ok(match &cfg.data_dir {
        Some(dir) => dataset::load_dataset(dir)?,
        None => Benchmark::generate(&cfg.benchmark())?,
    })
}

pub fn cmd_train(config: &Path, out_dir: Option<&Path>, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = out_dir {
        cfg.output_dir = d.to_path_buf();
    }
    let data = load_data(&cfg)?;
    let settings = cfg.train_settings(data.num_classes, data.train_mean())?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(Error::Io)?;
    dump::write_bytes(&dir.join("config.json"), cfg.to_json().as_bytes())?;

    let mut writer = csv::Writer::from_path(dir.join("metrics.csv"))?;
    writer.write_record(csv_header(data.num_classes))?;
    writer.flush().map_err(Error::Io)?;
    let result = train(settings, &data, cfg.loader(), |row| {
        writer.write_record(csv_row(row)).map_err(|e| Error::Io(e.into()))?;
        writer.flush().map_err(Error::Io)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Diverged { epoch }) => {
            return Err(CliError { code: EXIT_NUMERIC, message: format!("non-finite loss at epoch {epoch}") })
        }
        Err(e) => return Err(e.into()),
    };
    write_checkpoint(outcome.state.eval_model(), &dir.join("model.tsnw"))?;
    let nets = outcome.state.networks();
    if nets.len() == 2 {
        write_checkpoint(nets[1], &dir.join("model_b.tsnw"))?;
    }
    dump::write_bytes(&dir.join("tracker.json"), serde_json::to_string_pretty(&outcome.state.tracker).map_err(Error::from)?.as_bytes())?;
    dump::write_bytes(&dir.join("test_eval.json"), serde_json::to_string_pretty(&outcome.test).map_err(Error::from)?.as_bytes())?;
    emit(out, &format!("test mean DSC {:.3}", outcome.test.mean_dsc))?;
    Ok(outcome)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_eval(dir: &Path, rep: &EvalReport) -> CliResult<()> {
    let c = rep.num_classes;
    let mut w = csv::Writer::from_path(dir.join("per_image.csv"))?;
    let mut header = vec!["image".to_string()];
    for m in ["dsc", "jaccard", "hd95"] {
        header.extend((0..c).map(|k| format!("{m}_{k}")));
    }
    header.extend(["mean_dsc", "mean_jaccard", "mean_hd95"].map(String::from));
    w.write_record(&header)?;
    for (i, m) in rep.per_image.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(m.dsc.iter().map(|v| v.to_string()));
        row.extend(m.jaccard.iter().map(|v| v.to_string()));
        row.extend(m.hd95.iter().map(|v| opt(*v)));
        row.extend([m.mean_dsc.to_string(), m.mean_jaccard.to_string(), opt(m.mean_hd95)]);
        w.write_record(&row)?;
    }
    w.flush().map_err(Error::Io)?;

    let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
    w.write_record(["class", "dsc", "jaccard", "hd95"])?;
    for k in 0..c {
        w.write_record([k.to_string(), rep.class_dsc[k].to_string(), rep.class_jaccard[k].to_string(), opt(rep.class_hd95[k])])?;
    }
    w.write_record(["mean".to_string(), rep.mean_dsc.to_string(), rep.mean_jaccard.to_string(), opt(rep.mean_hd95)])?;
    w.flush().map_err(Error::Io)?;
    dump::write_bytes(&dir.join("eval.json"), serde_json::to_string_pretty(rep).map_err(Error::from)?.as_bytes())?;
    Ok(())
}

pub fn cmd_eval(
    checkpoint: Option<&Path>,
    data: &Path,
    split: &str,
    dir: &Path,
    identity: bool,
    out: &mut dyn Write,
) -> CliResult<EvalReport> {
    let net = match (identity, checkpoint) {
        (true, _) => None,
        (false, Some(p)) => Some(read_checkpoint(p)?),
        (false, None) => return Err(input_error("either --checkpoint or --identity is required")),
    };
    let bench = dataset::load_dataset(data)?;
    let samples = match split {
        "val" => bench.val,
        "test" => bench.test,
        "train" => bench.train.into_iter().map(|t| crate::synthdata::Sample { image: t.image, labels: t.truth }).collect(),
        other => return Err(input_error(format!("unknown split '{other}' (train, val, test)"))),
    };
    if samples.is_empty() {
        return Err(input_error(format!("split '{split}' is empty")));
    }
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    let preds = match &net {
        None => gts.clone(),
        Some(net) => {
            if net.classes() != bench.num_classes {
                return Err(input_error(format!(
                    "checkpoint predicts {} classes, dataset has {}",
                    net.classes(),
                    bench.num_classes
                )));
            }
            if net.in_channels() != samples[0].image.channels() {
                return Err(input_error("checkpoint input channels differ from the dataset"));
            }
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            crate::backbones::predict(net, &images, false)?
        }
    };
    let rep = evaluate(&preds, &gts, bench.num_classes)?;
    std::fs::create_dir_all(dir).map_err(Error::Io)?;
    write_eval(dir, &rep)?;
    emit(
        out,
        &format!(
            "mean DSC {:.3} Jaccard {:.3} HD95 {}",
            rep.mean_dsc,
            rep.mean_jaccard,
            rep.mean_hd95.map(|v| format!("{v:.3}")).unwrap_or_else(|| "undefined".into())
        ),
    )?;
    Ok(rep)
}

pub fn cmd_partition(
    reference: &Path,
    other: &Path,
    gamma: Option<Vec<f64>>,
    tracker: Option<&Path>,
    qmap: &Path,
    pgm: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let p = dump::decode_pmap(&dump::read_bytes(reference)?)?;
    let y = dump::decode_lmap(&dump::read_bytes(other)?)?;
    let gamma = match (gamma, tracker) {
        (Some(g), _) => g,
        (None, Some(path)) => {
            let t: ThresholdTracker = serde_json::from_slice(&dump::read_bytes(path)?).map_err(Error::from)?;
            t.gamma().to_vec()
        }
        (None, None) => return Err(input_error("either --gamma or --tracker is required")),
    };
    let regions = quadripartition_with(&p, &y, &gamma)?;
    dump::write_bytes(qmap, &dump::encode_qmap(&regions))?;
    if let Some(path) = pgm {
        dump::write_bytes(path, &dump::encode_pgm(&regions))?;
    }
    let counts = region_sizes(&regions);
    let line = Region::ALL.iter().map(|&r| format!("{} {}", r.name(), counts[r])).collect::<Vec<_>>().join(" ");
    emit(out, &line)
}
