//! Overlap and boundary-distance metrics: Dice, Jaccard and the 95th
//! percentile Hausdorff distance (pixels).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{check_same_dims, LabelMap};

fn overlap(pred: &LabelMap, gt: &LabelMap, class: usize) -> (usize, usize, usize) {
    let (mut a, mut b, mut both) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p as usize == class, g as usize == class);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    (a, b, both)
}

/// `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64> {
    check_same_dims("dsc", pred.dims(), gt.dims())?;
    let (a, b, both) = overlap(pred, gt, class);
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// `|A n B| / |A u B|`; 1 when both masks are empty.
pub fn jaccard(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<f64> {
    check_same_dims("jaccard", pred.dims(), gt.dims())?;
    let (a, b, both) = overlap(pred, gt, class);
    let union = a + b - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

/// Mask pixels with a 4-neighbour outside the mask or outside the grid.
pub fn boundary_pixels(labels: &LabelMap, class: usize) -> Vec<(i64, i64)> {
    let (h, w) = labels.dims();
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && labels.at(r as usize, c as usize) == class;
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if !inside(r, c) {
                continue;
            }
            if !(inside(r - 1, c) && inside(r + 1, c) && inside(r, c - 1) && inside(r, c + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Squared distance from each point of `from` to its nearest point in `to`.
fn nearest_sq(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<i64> {
    from.iter()
        .map(|&(r, c)| to.iter().map(|&(r2, c2)| (r - r2).pow(2) + (c - c2).pow(2)).min().unwrap_or(i64::MAX))
        .collect()
}

/// Both directed boundary distance sets, ascending. `None` when exactly one
/// mask is empty.
fn symmetric_distances(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<Option<Vec<f64>>> {
    check_same_dims("hd95", pred.dims(), gt.dims())?;
    let a = boundary_pixels(pred, class);
    let b = boundary_pixels(gt, class);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(Some(vec![0.0])),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let mut sq = nearest_sq(&a, &b);
    sq.extend(nearest_sq(&b, &a));
    sq.sort_unstable();
    Ok(Some(sq.into_iter().map(|d| (d as f64).sqrt()).collect()))
}

/// 95th percentile (nearest rank) of the pooled boundary-to-boundary
/// distances in both directions. `None` if only one mask is empty; 0 if
/// both are.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<Option<f64>> {
    Ok(symmetric_distances(pred, gt, class)?.map(|d| {
        let rank = ((0.95 * d.len() as f64).ceil() as usize).max(1);
        d[rank - 1]
    }))
}

/// Full symmetric Hausdorff distance between the two boundaries.
pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, class: usize) -> Result<Option<f64>> {
    Ok(symmetric_distances(pred, gt, class)?.map(|d| *d.last().unwrap()))
}

/// Metrics of one image, one entry per class (background included).
/// DSC and Jaccard in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub dsc: Vec<f64>,
    pub jaccard: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub mean_dsc: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
}

/// Per-image rows plus dataset aggregates. Means run over the foreground
/// classes `1..C`; undefined HD95 entries are left out of every mean and
/// counted in `hd95_undefined`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub per_image: Vec<ImageMetrics>,
    pub class_dsc: Vec<f64>,
    pub mean_dsc: f64,
    pub class_jaccard: Vec<f64>,
    pub mean_jaccard: f64,
    pub class_hd95: Vec<Option<f64>>,
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn foreground(num_classes: usize) -> std::ops::Range<usize> {
    if num_classes > 1 {
        1..num_classes
    } else {
        0..num_classes
    }
}

pub fn evaluate_image(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ImageMetrics> {
    let mut dscs = Vec::with_capacity(num_classes);
    let mut jacs = Vec::with_capacity(num_classes);
    let mut hds = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        dscs.push(100.0 * dsc(pred, gt, c)?);
        jacs.push(100.0 * jaccard(pred, gt, c)?);
        hds.push(hd95(pred, gt, c)?);
    }
    let fg = foreground(num_classes);
    Ok(ImageMetrics {
        mean_dsc: mean(fg.clone().map(|c| dscs[c])).unwrap_or(0.0),
        mean_jaccard: mean(fg.clone().map(|c| jacs[c])).unwrap_or(0.0),
        mean_hd95: mean(fg.filter_map(|c| hds[c])),
        dsc: dscs,
        jaccard: jacs,
        hd95: hds,
    })
}

pub fn evaluate(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| evaluate_image(p, g, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let class_dsc: Vec<f64> =
        (0..num_classes).map(|c| mean(per_image.iter().map(|m| m.dsc[c])).unwrap_or(0.0)).collect();
    let class_jaccard: Vec<f64> =
        (0..num_classes).map(|c| mean(per_image.iter().map(|m| m.jaccard[c])).unwrap_or(0.0)).collect();
    let class_hd95: Vec<Option<f64>> =
        (0..num_classes).map(|c| mean(per_image.iter().filter_map(|m| m.hd95[c]))).collect();
    let fg = foreground(num_classes);
    let hd95_undefined =
        per_image.iter().map(|m| fg.clone().filter(|&c| m.hd95[c].is_none()).count()).sum();
    Ok(EvalReport {
        num_classes,
        mean_dsc: mean(fg.clone().map(|c| class_dsc[c])).unwrap_or(0.0),
        mean_jaccard: mean(fg.clone().map(|c| class_jaccard[c])).unwrap_or(0.0),
        mean_hd95: mean(fg.filter_map(|c| class_hd95[c])),
        per_image,
        class_dsc,
        class_jaccard,
        class_hd95,
        hd95_undefined,
    })
}
