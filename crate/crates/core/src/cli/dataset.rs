//! On-disk dataset layout written by `synth`:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/{train,val,test}/img_NNNN.img0
//! <dir>/{train,val,test}/lbl_NNNN.lmap     clean masks
//! <dir>/train/ann_NNNN.lmap                noisy annotations (labeled subset)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dump::{decode_image, decode_lmap, encode_image, encode_lmap, read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::synthdata::{Benchmark, BenchmarkSpec, Sample, TrainSample};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub image: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub target_rate: f64,
    pub mean_fraction: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: BenchmarkSpec,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub scene_seed: u64,
    pub noise_seed: u64,
    pub n_labeled: usize,
    pub noise: NoiseStats,
    pub train: Vec<FileEntry>,
    pub val: Vec<FileEntry>,
    pub test: Vec<FileEntry>,
}

fn write_split(dir: &Path, name: &str, samples: &[(&Sample, Option<(&crate::grid::LabelMap, f64)>)]) -> Result<Vec<FileEntry>> {
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (s, ann)) in samples.iter().enumerate() {
        let image = format!("{name}/img_{i:04}.img0");
        let labels = format!("{name}/lbl_{i:04}.lmap");
        write_bytes(&dir.join(&image), &encode_image(&s.image))?;
        write_bytes(&dir.join(&labels), &encode_lmap(&s.labels))?;
        let mut entry = FileEntry { image, labels, annotation: None, noise_fraction: None };
        if let Some((a, frac)) = ann {
            let path = format!("{name}/ann_{i:04}.lmap");
            write_bytes(&dir.join(&path), &encode_lmap(a))?;
            entry.annotation = Some(path);
            entry.noise_fraction = Some(*frac);
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Writes every split plus the manifest into the existing directory `dir`.
pub fn write_dataset(dir: &Path, spec: &BenchmarkSpec, data: &Benchmark) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("output directory {} does not exist", dir.display()),
        )));
    }
    let train_samples: Vec<Sample> =
        data.train.iter().map(|t| Sample { image: t.image.clone(), labels: t.truth.clone() }).collect();
    let mut noise_iter = data.noise_fractions.iter();
    let train_rows: Vec<(&Sample, Option<(&crate::grid::LabelMap, f64)>)> = train_samples
        .iter()
        .zip(&data.train)
        .map(|(s, t)| (s, t.annotation.as_ref().map(|a| (a, *noise_iter.next().expect("one fraction per annotation")))))
        .collect();
    let train = write_split(dir, "train", &train_rows)?;
    let val = write_split(dir, "val", &data.val.iter().map(|s| (s, None)).collect::<Vec<_>>())?;
    let test = write_split(dir, "test", &data.test.iter().map(|s| (s, None)).collect::<Vec<_>>())?;

    let fr = &data.noise_fractions;
    let noise = NoiseStats {
        target_rate: spec.noise.rate,
        mean_fraction: if fr.is_empty() { 0.0 } else { fr.iter().sum::<f64>() / fr.len() as f64 },
        min_fraction: fr.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
        max_fraction: fr.iter().copied().fold(0.0, f64::max),
    };
    let manifest = Manifest {
        spec: spec.clone(),
        num_classes: data.num_classes,
        height: spec.scene.height,
        width: spec.scene.width,
        scene_seed: spec.scene.seed,
        noise_seed: spec.noise.seed,
        n_labeled: fr.len(),
        noise,
        train,
        val,
        test,
    };
    write_bytes(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn load_sample(dir: &Path, e: &FileEntry) -> Result<Sample> {
    Ok(Sample { image: decode_image(&read_bytes(&dir.join(&e.image))?)?, labels: decode_lmap(&read_bytes(&dir.join(&e.labels))?)? })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_bytes(&dir.join(MANIFEST))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_dataset(dir: &Path) -> Result<Benchmark> {
    let m = read_manifest(dir)?;
    let mut train = Vec::with_capacity(m.train.len());
    let mut noise_fractions = Vec::new();
    for e in &m.train {
        let s = load_sample(dir, e)?;
        let annotation = match &e.annotation {
            Some(p) => Some(decode_lmap(&read_bytes(&dir.join(p))?)?),
            None => None,
        };
        if let Some(f) = e.noise_fraction {
            noise_fractions.push(f);
        }
        train.push(TrainSample { image: s.image, truth: s.labels, annotation });
    }
    let val = m.val.iter().map(|e| load_sample(dir, e)).collect::<Result<Vec<_>>>()?;
    let test = m.test.iter().map(|e| load_sample(dir, e)).collect::<Result<Vec<_>>>()?;
    for s in train.iter().map(|t| &t.truth).chain(train.iter().filter_map(|t| t.annotation.as_ref())).chain(val.iter().chain(&test).map(|s| &s.labels)) {
        s.check_classes(m.num_classes)?;
    }
    Ok(Benchmark { num_classes: m.num_classes, train, val, test, noise_fractions })
}
