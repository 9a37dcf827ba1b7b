//! Confidence and calibration statistics for pixel-wise classification:
//! variation-ratio confidence, reliability bins, ECE/mECE, AUREC, mIoU,
//! and class-balancing weights.
//!
//! Binning convention (fixed for bit-exact reproducibility): `N_b` equal
//! widths over `[0, 1]`, right-closed bins `((m−1)/N_b, m/N_b]`, and a
//! confidence of exactly 0 falls into the first bin.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-softmax class scores per pixel, shape `(h, w, c)`.
#[derive(Debug, Clone)]
pub struct LogitTensor {
    pub data: Array3<f64>,
}

impl LogitTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, _, c) = data.dim();
        if c < 2 {
            return Err(Error::invalid(format!("need ≥ 2 classes, got {c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite".to_string()));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn classes(&self) -> usize {
        self.data.dim().2
    }

    /// Per-pixel argmax class (invariant under any temperature t > 0).
    pub fn argmax_map(&self) -> Array2<usize> {
        let (h, w, c) = self.data.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut best = 0;
            for k in 1..c {
                if self.data[[i, j, k]] > self.data[[i, j, best]] {
                    best = k;
                }
            }
            best
        })
    }
}

/// Ground-truth class IDs per pixel, with an optional ignore label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub data: Array2<i32>,
    pub ignore_id: Option<i32>,
}

impl LabelMap {
    pub fn new(data: Array2<i32>, ignore_id: Option<i32>) -> Self {
        Self { data, ignore_id }
    }

    pub fn is_ignored(&self, id: i32) -> bool {
        self.ignore_id == Some(id)
    }
}

/// Per-bin counts, mean confidence, and mean accuracy over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub n_bins: usize,
    pub counts: Vec<u64>,
    pub mean_confidence: Vec<f64>,
    pub mean_accuracy: Vec<f64>,
    pub total_count: u64,
}

impl ReliabilityBins {
    /// Index of the right-closed bin holding `conf`; 0 maps to the first bin.
    fn bin_index(conf: f64, n_bins: usize) -> usize {
        if conf <= 0.0 {
            return 0;
        }
        let idx = (conf * n_bins as f64).ceil() as usize;
        idx.saturating_sub(1).min(n_bins - 1)
    }
}

/// Softmax over one logit slice at temperature `t` (numerically stabilized).
fn softmax_pixel(scores: &mut [f64], t: f64) {
    let mut max = f64::NEG_INFINITY;
    for s in scores.iter_mut() {
        *s /= t;
        max = max.max(*s);
    }
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Per-pixel confidence: the softmax maximum of `ω / t`.
///
/// Values lie in `(1/C, 1]`; the uniform-logit pixel sits exactly at `1/C`.
pub fn confidence_map(logits: &LogitTensor, t: f64) -> Result<Array2<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("temperature {t} must be > 0")));
    }
    let (h, w, c) = logits.data.dim();
    let mut out = Array2::zeros((h, w));
    let mut scratch = vec![0.0; c];
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                scratch[k] = logits.data[[i, j, k]];
            }
            softmax_pixel(&mut scratch, t);
            out[[i, j]] = scratch.iter().copied().fold(f64::MIN, f64::max);
        }
    }
    Ok(out)
}

/// Variation ratio, the point-wise predictive uncertainty `1 − confidence`.
pub fn variation_ratio(logits: &LogitTensor, t: f64) -> Result<Array2<f64>> {
    Ok(confidence_map(logits, t)?.mapv(|c| 1.0 - c))
}

/// Accumulates reliability bins from flat confidence/correctness pairs.
pub fn reliability_bins(conf: &[f64], correct: &[bool], n_bins: usize) -> Result<ReliabilityBins> {
    if conf.len() != correct.len() {
        return Err(Error::invalid(format!(
            "confidence/correctness length mismatch: {} vs {}",
            conf.len(),
            correct.len()
        )));
    }
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be ≥ 1".to_string()));
    }
    let mut counts = vec![0u64; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut acc_sum = vec![0.0; n_bins];
    for (&c, &ok) in conf.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        let b = ReliabilityBins::bin_index(c, n_bins);
        counts[b] += 1;
        conf_sum[b] += c;
        acc_sum[b] += if ok { 1.0 } else { 0.0 };
    }
    let mean = |sum: Vec<f64>| -> Vec<f64> {
        sum.iter()
            .zip(&counts)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect()
    };
    Ok(ReliabilityBins {
        n_bins,
        total_count: counts.iter().sum(),
        mean_confidence: mean(conf_sum),
        mean_accuracy: mean(acc_sum),
        counts,
    })
}

/// Expected calibration error: bin-weighted `|acc − conf|`.
pub fn ece(bins: &ReliabilityBins) -> Result<f64> {
    if bins.total_count == 0 {
        return Err(Error::UndefinedMetric(
            "ece over an empty population".to_string(),
        ));
    }
    let total = bins.total_count as f64;
    Ok(bins
        .counts
        .iter()
        .zip(bins.mean_accuracy.iter().zip(&bins.mean_confidence))
        .map(|(&n, (a, c))| n as f64 / total * (a - c).abs())
        .sum())
}

/// Area under the reliability error curve: the unweighted mean `|acc − conf|`
/// over non-empty bins, magnifying low-cardinality bins.
pub fn aurec(bins: &ReliabilityBins) -> Result<f64> {
    let mut sum = 0.0;
    let mut non_empty = 0usize;
    for (i, &n) in bins.counts.iter().enumerate() {
        if n > 0 {
            sum += (bins.mean_accuracy[i] - bins.mean_confidence[i]).abs();
            non_empty += 1;
        }
    }
    if non_empty == 0 {
        return Err(Error::UndefinedMetric("all bins empty".to_string()));
    }
    Ok(sum / non_empty as f64)
}

/// Per-class reliability bins: class `i` statistics use the pixels whose
/// ground truth is class `i`.
pub fn per_class_bins(
    logits: &LogitTensor,
    labels: &LabelMap,
    t: f64,
    n_bins: usize,
) -> Result<Vec<Option<ReliabilityBins>>> {
    if logits.data.dim().0 != labels.data.dim().0 || logits.data.dim().1 != labels.data.dim().1 {
        return Err(Error::invalid("logit/label shape mismatch".to_string()));
    }
    let c = logits.classes();
    let conf = confidence_map(logits, t)?;
    let pred = logits.argmax_map();
    let mut per_class: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); c];
    for ((i, j), &gt) in labels.data.indexed_iter() {
        if labels.is_ignored(gt) {
            continue;
        }
        if gt < 0 || gt as usize >= c {
            return Err(Error::invalid(format!(
                "label {gt} outside [0, {c}) at ({i}, {j})"
            )));
        }
        let k = gt as usize;
        per_class[k].0.push(conf[[i, j]]);
        per_class[k].1.push(pred[[i, j]] == k);
    }
    per_class
        .into_iter()
        .map(|(cf, ok)| {
            if cf.is_empty() {
                Ok(None)
            } else {
                reliability_bins(&cf, &ok, n_bins).map(Some)
            }
        })
        .collect()
}

/// ECE of the pooled pixel population (no per-class split).
pub fn pooled_ece(logits: &LogitTensor, labels: &LabelMap, t: f64, n_bins: usize) -> Result<f64> {
    if logits.data.dim().0 != labels.data.dim().0 || logits.data.dim().1 != labels.data.dim().1 {
        return Err(Error::invalid("logit/label shape mismatch".to_string()));
    }
    let c = logits.classes();
    let conf = confidence_map(logits, t)?;
    let pred = logits.argmax_map();
    let mut flat_conf = Vec::new();
    let mut flat_ok = Vec::new();
    for ((i, j), &gt) in labels.data.indexed_iter() {
        if labels.is_ignored(gt) {
            continue;
        }
        if gt < 0 || gt as usize >= c {
            return Err(Error::invalid(format!("label {gt} outside [0, {c})")));
        }
        flat_conf.push(conf[[i, j]]);
        flat_ok.push(pred[[i, j]] == gt as usize);
    }
    ece(&reliability_bins(&flat_conf, &flat_ok, n_bins)?)
}

/// Mean expected calibration error: the unweighted mean of per-class ECE
/// over classes with at least one ground-truth pixel.
pub fn mece(logits: &LogitTensor, labels: &LabelMap, t: f64, n_bins: usize) -> Result<f64> {
    let bins = per_class_bins(logits, labels, t, n_bins)?;
    let mut sum = 0.0;
    let mut present = 0usize;
    for b in bins.iter().flatten() {
        sum += ece(b)?;
        present += 1;
    }
    if present == 0 {
        return Err(Error::UndefinedMetric(
            "no labeled pixels for mece".to_string(),
        ));
    }
    Ok(sum / present as f64)
}

/// Per-class intersection-over-union and their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes with an empty union (absent everywhere).
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Mean intersection over union, `TP / (TP + FP + FN)` per class, averaged
/// over classes with a non-empty union. Ignored pixels are excluded from
/// both prediction and ground-truth sets.
pub fn miou(pred: &LabelMap, gt: &LabelMap, n_classes: usize) -> Result<IouReport> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: pred {:?} vs gt {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let mut tp = vec![0u64; n_classes];
    let mut fp = vec![0u64; n_classes];
    let mut fna = vec![0u64; n_classes];
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if gt.is_ignored(g) {
            continue;
        }
        if g < 0 || g as usize >= n_classes {
            return Err(Error::invalid(format!("gt label {g} outside [0, {n_classes})")));
        }
        if p < 0 || p as usize >= n_classes {
            return Err(Error::invalid(format!("pred label {p} outside [0, {n_classes})")));
        }
        if p == g {
            tp[g as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fna[g as usize] += 1;
        }
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for i in 0..n_classes {
        let union = tp[i] + fp[i] + fna[i];
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp[i] as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::UndefinedMetric("no class has a non-empty union".to_string()));
    }
    Ok(IouReport {
        per_class,
        mean: sum / present as f64,
    })
}

/// Class-balancing weights `τᵢ ∝ 1 / ln(1.1 + cᵢ/N)`, normalized to sum 1.
pub fn class_balance_weights(counts: &[u64], n_total: u64) -> Result<Vec<f64>> {
    if n_total == 0 {
        return Err(Error::invalid("total pixel count must be > 0".to_string()));
    }
    if counts.is_empty() {
        return Err(Error::invalid("need at least one class".to_string()));
    }
    let sum_counts: u64 = counts.iter().sum();
    if sum_counts > n_total {
        return Err(Error::invalid(format!(
            "class counts {sum_counts} exceed total {n_total}"
        )));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| 1.0 / (1.1 + c as f64 / n_total as f64).ln())
        .collect();
    let norm: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / norm).collect())
}
