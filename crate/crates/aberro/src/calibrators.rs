//! Temperature calibrators: scalar temperature scaling (TS), the
//! parameterized temperature network (PTS), and its physics-informed
//! extension conditioning on the Zernike coefficient vector (PIPTS).
//!
//! Includes the per-instance optimal-temperature oracle, the smoothed-ECE
//! training loop, deep-ensemble significance evaluation, and the
//! temperature-deviation histogram with a Gaussian maximum-likelihood fit.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{mece, LabelMap, LogitTensor};
use crate::error::{Error, Result};
use crate::loss::{pipts_loss, pipts_loss_t_factor, soft_ece_with_grad, SmoothLossConfig};
use crate::net::{downsample_mean, MomentSgd, TempNet, INPUT_HW};
use crate::zernike::ZernikeVector;

/// One instance of calibrator training/evaluation data.
#[derive(Debug, Clone)]
pub struct TrainInstance {
    pub logits: LogitTensor,
    pub labels: LabelMap,
    pub alpha: ZernikeVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorVariant {
    Ts,
    Pts,
    Pipts,
}

impl std::fmt::Display for CalibratorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CalibratorVariant::Ts => write!(f, "ts"),
            CalibratorVariant::Pts => write!(f, "pts"),
            CalibratorVariant::Pipts => write!(f, "pipts"),
        }
    }
}

/// A trained temperature network plus its input normalization (logits and
/// Zernike inputs are both standardized to the training corpus).
#[derive(Debug, Clone)]
pub struct NetCalibrator {
    pub net: TempNet,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub alpha_mean: [f64; 3],
    pub alpha_std: [f64; 3],
    pub seed: u64,
}

impl NetCalibrator {
    /// Downsampled, standardized network input for one logit tensor.
    fn prepare_input(&self, logits: &LogitTensor) -> Result<Array3<f64>> {
        if logits.classes() != self.net.channels {
            return Err(Error::invalid(format!(
                "logits have {} classes, model expects {}",
                logits.classes(),
                self.net.channels
            )));
        }
        let normalized = logits
            .data
            .mapv(|v| (v - self.norm_mean) / self.norm_std);
        Ok(downsample_mean(&normalized, INPUT_HW))
    }

    fn prepare_alpha(&self, alpha: &ZernikeVector) -> Vec<f64> {
        if self.net.alpha_dim == 0 {
            return Vec::new();
        }
        alpha
            .second_order_triple()
            .iter()
            .enumerate()
            .map(|(i, &a)| (a - self.alpha_mean[i]) / self.alpha_std[i])
            .collect()
    }

    fn forward(&self, logits: &LogitTensor, alpha: &[f64]) -> Result<f64> {
        let input = self.prepare_input(logits)?;
        self.net.forward(&input, alpha)
    }
}

/// The calibrator model: scalar TS, PTS, or PIPTS.
#[derive(Debug, Clone)]
pub enum CalibratorModel {
    Ts { t: f64 },
    Pts(NetCalibrator),
    Pipts(NetCalibrator),
}

impl CalibratorModel {
    pub fn variant(&self) -> CalibratorVariant {
        match self {
            CalibratorModel::Ts { .. } => CalibratorVariant::Ts,
            CalibratorModel::Pts(_) => CalibratorVariant::Pts,
            CalibratorModel::Pipts(_) => CalibratorVariant::Pipts,
        }
    }

    /// Instance-wise temperature prediction.
    pub fn predict_temperature(&self, logits: &LogitTensor, alpha: &ZernikeVector) -> Result<f64> {
        match self {
            CalibratorModel::Ts { t } => Ok(*t),
            CalibratorModel::Pts(m) => pts_forward(m, logits),
            CalibratorModel::Pipts(m) => pipts_forward(m, logits, alpha),
        }
    }
}

/// Per-pixel class probabilities `softmax(ω / t)`; the argmax class is
/// unchanged for any `t > 0`, so accuracy is preserved.
pub fn apply_temperature(logits: &LogitTensor, t: f64) -> Result<Array3<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("temperature {t} must be > 0")));
    }
    let (h, w, c) = logits.data.dim();
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                max = max.max(logits.data[[i, j, k]] / t);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (logits.data[[i, j, k]] / t - max).exp();
                out[[i, j, k]] = e;
                sum += e;
            }
            for k in 0..c {
                out[[i, j, k]] /= sum;
            }
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of the labeled pixels at temperature `t`.
pub fn mean_nll(instances: &[(&LogitTensor, &LabelMap)], t: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("temperature {t} must be > 0")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (logits, labels) in instances {
        let (h, w, c) = logits.data.dim();
        if (h, w) != labels.data.dim() {
            return Err(Error::invalid("logit/label shape mismatch".to_string()));
        }
        for i in 0..h {
            for j in 0..w {
                let gt = labels.data[[i, j]];
                if labels.is_ignored(gt) {
                    continue;
                }
                if gt < 0 || gt as usize >= c {
                    return Err(Error::invalid(format!("label {gt} outside [0, {c})")));
                }
                // −ln softmax(ω/t)_y via logsumexp.
                let mut max = f64::NEG_INFINITY;
                for k in 0..c {
                    max = max.max(logits.data[[i, j, k]] / t);
                }
                let mut lse = 0.0;
                for k in 0..c {
                    lse += (logits.data[[i, j, k]] / t - max).exp();
                }
                sum += max + lse.ln() - logits.data[[i, j, gt as usize]] / t;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no labeled pixels".to_string()));
    }
    Ok(sum / count as f64)
}

const LOG_T_MIN: f64 = -2.995_732_273_553_991; // ln 0.05
const LOG_T_MAX: f64 = 2.995_732_273_553_991; // ln 20

/// Golden-section minimization over `ln t`.
fn golden_section(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    (lo + hi) / 2.0
}

/// Scalar temperature scaling result.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TsFit {
    pub t: f64,
    pub nll: f64,
}

/// Fits the single TS temperature by minimizing the mean NLL over the
/// validation set (golden-section search on `ln t ∈ [ln 0.05, ln 20]`).
pub fn fit_ts(val: &[TrainInstance]) -> Result<TsFit> {
    if val.is_empty() {
        return Err(Error::invalid("empty validation set".to_string()));
    }
    let pairs: Vec<(&LogitTensor, &LabelMap)> =
        val.iter().map(|i| (&i.logits, &i.labels)).collect();
    let objective = |log_t: f64| mean_nll(&pairs, log_t.exp()).unwrap_or(f64::INFINITY);
    let log_t = golden_section(LOG_T_MIN, LOG_T_MAX, 1e-4, objective);
    let t = log_t.exp();
    Ok(TsFit {
        t,
        nll: mean_nll(&pairs, t)?,
    })
}

/// Per-instance optimal temperature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimalTemperature {
    pub t: f64,
    pub mece: f64,
    /// Set when the instance carries a single ground-truth class; the
    /// result is then the coarse grid argmin only.
    pub degenerate: bool,
}

/// Minimizes the instance mECE over the temperature: a 64-point log grid
/// on `[0.05, 20]` followed by golden-section refinement between the
/// bracketing grid neighbors. Deterministic.
pub fn optimal_instance_temperature(
    logits: &LogitTensor,
    labels: &LabelMap,
    n_bins: usize,
) -> Result<OptimalTemperature> {
    let mut present = std::collections::HashSet::new();
    for &gt in labels.data.iter() {
        if !labels.is_ignored(gt) {
            present.insert(gt);
        }
    }
    if present.is_empty() {
        return Err(Error::invalid("instance has no labeled pixels".to_string()));
    }
    let degenerate = present.len() == 1;

    const GRID: usize = 64;
    let mut best_k = 0;
    let mut best_val = f64::INFINITY;
    let grid_t = |k: usize| {
        (LOG_T_MIN + (LOG_T_MAX - LOG_T_MIN) * k as f64 / (GRID - 1) as f64).exp()
    };
    for k in 0..GRID {
        let v = mece(logits, labels, grid_t(k), n_bins)?;
        if v < best_val {
            best_val = v;
            best_k = k;
        }
    }
    if degenerate {
        return Ok(OptimalTemperature {
            t: grid_t(best_k),
            mece: best_val,
            degenerate,
        });
    }
    let lo = grid_t(best_k.saturating_sub(1)).ln();
    let hi = grid_t((best_k + 1).min(GRID - 1)).ln();
    let log_t = golden_section(lo, hi, 1e-4, |log_t| {
        mece(logits, labels, log_t.exp(), n_bins).unwrap_or(f64::INFINITY)
    });
    let t = log_t.exp();
    let refined = mece(logits, labels, t, n_bins)?;
    // The golden section can settle on a worse micro-bracket than the grid
    // point itself when the objective has binning steps.
    if refined <= best_val {
        Ok(OptimalTemperature {
            t,
            mece: refined,
            degenerate,
        })
    } else {
        Ok(OptimalTemperature {
            t: grid_t(best_k),
            mece: best_val,
            degenerate,
        })
    }
}

/// Temperature prediction of a PTS model.
pub fn pts_forward(model: &NetCalibrator, logits: &LogitTensor) -> Result<f64> {
    if model.net.alpha_dim != 0 {
        return Err(Error::invalid(
            "model has a Zernike input slot; use pipts_forward".to_string(),
        ));
    }
    model.forward(logits, &[])
}

/// Temperature prediction of a PIPTS model conditioned on the Zernike
/// coefficient vector.
pub fn pipts_forward(
    model: &NetCalibrator,
    logits: &LogitTensor,
    alpha: &ZernikeVector,
) -> Result<f64> {
    if model.net.alpha_dim != 3 {
        return Err(Error::invalid(
            "model has no Zernike input slot; use pts_forward".to_string(),
        ));
    }
    model.forward(logits, &model.prepare_alpha(alpha))
}

/// Optimizer and schedule settings for calibrator training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Learning rate drops by `lr_drop` after this many epochs without
    /// validation improvement.
    pub plateau_epochs: usize,
    /// Training stops after this many epochs without validation improvement.
    pub stop_epochs: usize,
    pub lr_drop: f64,
    /// Initialize the output bias at the train-set TS temperature instead
    /// of softplus(0), skipping the transient to the working range.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            max_epochs: 500,
            plateau_epochs: 40,
            stop_epochs: 100,
            lr_drop: 10.0,
            warm_start: true,
        }
    }
}

/// Trains a PTS or PIPTS calibrator by minimizing the modulated smooth-ECE
/// loss with moment-accumulating SGD. Deterministic in `seed`; training
/// restores the best-validation parameters on exit.
pub fn train_calibrator(
    variant: CalibratorVariant,
    train: &[TrainInstance],
    val: &[TrainInstance],
    loss_cfg: &SmoothLossConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<CalibratorModel> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set".to_string()));
    }
    if variant == CalibratorVariant::Ts {
        let fit = fit_ts(if val.is_empty() { train } else { val })?;
        return Ok(CalibratorModel::Ts { t: fit.t });
    }
    let alpha_dim = match variant {
        CalibratorVariant::Pts => 0,
        CalibratorVariant::Pipts => 3,
        CalibratorVariant::Ts => unreachable!(),
    };
    let channels = train[0].logits.classes();
    for inst in train.iter().chain(val) {
        if inst.logits.classes() != channels {
            return Err(Error::invalid(
                "all instances must share the class count".to_string(),
            ));
        }
    }

    // Corpus normalization of the network input.
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for inst in train {
        for &v in inst.logits.data.iter() {
            sum += v;
            sum_sq += v * v;
            count += 1;
        }
    }
    let norm_mean = sum / count as f64;
    let norm_std = (sum_sq / count as f64 - norm_mean * norm_mean).sqrt().max(1e-12);

    // Zernike inputs are standardized as well; otherwise their O(0.1)
    // magnitudes starve the α path of gradient next to the O(1) encoder
    // features.
    let mut alpha_mean = [0.0; 3];
    let mut alpha_std = [1.0; 3];
    if alpha_dim > 0 {
        let mut acc = [0.0; 3];
        let mut acc_sq = [0.0; 3];
        for inst in train {
            let a = inst.alpha.second_order_triple();
            for i in 0..3 {
                acc[i] += a[i];
                acc_sq[i] += a[i] * a[i];
            }
        }
        let n = train.len() as f64;
        for i in 0..3 {
            alpha_mean[i] = acc[i] / n;
            alpha_std[i] = (acc_sq[i] / n - alpha_mean[i] * alpha_mean[i])
                .max(0.0)
                .sqrt()
                .max(1e-6);
        }
    }

    let mut calibrator = NetCalibrator {
        net: TempNet::new(channels, alpha_dim, seed)?,
        norm_mean,
        norm_std,
        alpha_mean,
        alpha_std,
        seed,
    };
    if train_cfg.warm_start {
        let ts = fit_ts(train)?;
        calibrator.net.warm_start_output(ts.t.clamp(0.1, 19.0));
    }

    // The network inputs never change across epochs: prepare them once.
    let prep = |set: &[TrainInstance]| -> Result<Vec<(Array3<f64>, Vec<f64>)>> {
        set.iter()
            .map(|inst| {
                let input = calibrator.prepare_input(&inst.logits)?;
                Ok((input, calibrator.prepare_alpha(&inst.alpha)))
            })
            .collect()
    };
    let train_inputs = prep(train)?;
    let val_inputs = prep(val)?;

    let mut opt = MomentSgd::new(
        train_cfg.learning_rate,
        train_cfg.beta1,
        train_cfg.beta2,
        calibrator.net.param_count(),
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best_val = f64::INFINITY;
    let mut best_params = calibrator.net.params.clone();
    let mut epochs_since_best = 0usize;
    let mut epochs_since_drop = 0usize;

    for epoch in 0..train_cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(train_cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; calibrator.net.param_count()];
            for &idx in batch {
                let inst = &train[idx];
                let (input, alpha) = &train_inputs[idx];
                let (t, trace) = calibrator.net.forward_with_trace(input, alpha)?;
                let (ece, d_ece) = soft_ece_with_grad(&inst.logits, &inst.labels, t, loss_cfg)?;
                let loss = pipts_loss(ece, t, loss_cfg);
                if !loss.is_finite() {
                    return Err(Error::TrainingAborted(format!(
                        "non-finite loss at epoch {epoch}, instance {idx}: ece {ece}, t {t}"
                    )));
                }
                let factor = pipts_loss_t_factor(d_ece, ece, t, loss_cfg);
                let g = calibrator.net.backward(&trace, factor);
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi / batch.len() as f64;
                }
            }
            opt.step(&mut calibrator.net.params, &grad);
        }

        // Validation loss drives the schedule (falls back to train loss
        // when no validation set is provided).
        let (check_set, check_inputs) = if val.is_empty() {
            (train, &train_inputs)
        } else {
            (val, &val_inputs)
        };
        let mut val_loss = 0.0;
        for (inst, (input, alpha)) in check_set.iter().zip(check_inputs) {
            let t = calibrator.net.forward(input, alpha)?;
            let (ece, _) = soft_ece_with_grad(&inst.logits, &inst.labels, t, loss_cfg)?;
            val_loss += pipts_loss(ece, t, loss_cfg) / check_set.len() as f64;
        }
        if !val_loss.is_finite() {
            return Err(Error::TrainingAborted(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }

        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best_params.copy_from_slice(&calibrator.net.params);
            epochs_since_best = 0;
            epochs_since_drop = 0;
        } else {
            epochs_since_best += 1;
            epochs_since_drop += 1;
        }
        if epochs_since_best >= train_cfg.stop_epochs {
            break;
        }
        if epochs_since_drop >= train_cfg.plateau_epochs {
            opt.lr /= train_cfg.lr_drop;
            epochs_since_drop = 0;
        }
    }
    calibrator.net.params = best_params;

    Ok(match variant {
        CalibratorVariant::Pts => CalibratorModel::Pts(calibrator),
        CalibratorVariant::Pipts => CalibratorModel::Pipts(calibrator),
        CalibratorVariant::Ts => unreachable!(),
    })
}

/// Mean mECE of a calibrator over an evaluation set, using its per-instance
/// temperature predictions.
pub fn evaluate_calibrator(
    model: &CalibratorModel,
    eval: &[TrainInstance],
    n_bins: usize,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::invalid("empty evaluation set".to_string()));
    }
    let mut sum = 0.0;
    for inst in eval {
        let t = model.predict_temperature(&inst.logits, &inst.alpha)?;
        sum += mece(&inst.logits, &inst.labels, t, n_bins)?;
    }
    Ok(sum / eval.len() as f64)
}

/// Per-variant ensemble statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleArm {
    pub variant: CalibratorVariant,
    pub member_mece: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation divided by √members.
    pub std_of_mean: f64,
    /// Seed indices whose training failed and were excluded.
    pub failed_members: Vec<usize>,
}

/// Two-arm comparison at the Student-t extension factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub baseline: EnsembleArm,
    pub candidate: EnsembleArm,
    pub k_factor: f64,
    pub mean_difference: f64,
    pub threshold: f64,
    pub significant: bool,
}

fn thread_budget() -> usize {
    std::env::var("ABERRO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Trains `seeds.len()` independently initialized members and evaluates
/// each on the held-out set. Members run in parallel (capped by the
/// `ABERRO_THREADS` environment variable); results are deterministic in
/// the seed list regardless of the thread count.
pub fn ensemble_evaluate(
    variant: CalibratorVariant,
    train: &[TrainInstance],
    val: &[TrainInstance],
    eval: &[TrainInstance],
    loss_cfg: &SmoothLossConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<EnsembleArm> {
    if seeds.len() < 2 {
        return Err(Error::invalid("need at least 2 ensemble members".to_string()));
    }
    let n_bins = loss_cfg.n_bins;
    let results: Vec<Result<f64>> = {
        let mut results: Vec<Option<Result<f64>>> = (0..seeds.len()).map(|_| None).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results_mx = std::sync::Mutex::new(&mut results);
        let workers = thread_budget().min(seeds.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if k >= seeds.len() {
                        break;
                    }
                    let out = train_calibrator(variant, train, val, loss_cfg, train_cfg, seeds[k])
                        .and_then(|model| evaluate_calibrator(&model, eval, n_bins));
                    results_mx.lock().unwrap()[k] = Some(out);
                });
            }
        });
        results.into_iter().map(|r| r.expect("worker filled slot")).collect()
    };

    let mut member_mece = Vec::new();
    let mut failed_members = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(m) => member_mece.push(m),
            Err(_) => failed_members.push(k),
        }
    }
    if member_mece.len() < 2 {
        return Err(Error::TrainingAborted(format!(
            "only {} of {} members trained",
            member_mece.len(),
            seeds.len()
        )));
    }
    let n = member_mece.len() as f64;
    let mean = member_mece.iter().sum::<f64>() / n;
    let var = member_mece.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(EnsembleArm {
        variant,
        member_mece,
        mean,
        std_of_mean: (var / n).sqrt(),
        failed_members,
    })
}

/// Significance verdict: `|mean_b − mean_c| > k · √(s_b² + s_c²)` with the
/// per-arm standard deviations of the mean pooled in quadrature.
pub fn compare_ensembles(
    baseline: EnsembleArm,
    candidate: EnsembleArm,
    k_factor: f64,
) -> EnsembleReport {
    let pooled = (baseline.std_of_mean.powi(2) + candidate.std_of_mean.powi(2)).sqrt();
    let diff = (baseline.mean - candidate.mean).abs();
    let threshold = k_factor * pooled;
    EnsembleReport {
        mean_difference: diff,
        threshold,
        significant: diff > threshold,
        baseline,
        candidate,
        k_factor,
    }
}

/// Temperature-deviation histogram with its Gaussian MLE fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviationReport {
    /// `ΔT_i = T_pred,i − T*_i` per instance.
    pub deviations: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Curvature-based uncertainties from the observed information of the
    /// negative log-likelihood at the MLE.
    pub mu_err: f64,
    pub sigma_err: f64,
}

/// Deviations between predicted and per-instance optimal temperatures,
/// with `(μ, σ)` from the Gaussian maximum-likelihood fit and their
/// curvature-based uncertainties.
pub fn temperature_deviation_histogram(
    model: &CalibratorModel,
    eval: &[TrainInstance],
    n_bins: usize,
) -> Result<DeviationReport> {
    if eval.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "need ≥ 10 instances, got {}",
            eval.len()
        )));
    }
    let mut deviations = Vec::with_capacity(eval.len());
    for inst in eval {
        let pred = model.predict_temperature(&inst.logits, &inst.alpha)?;
        let oracle = optimal_instance_temperature(&inst.logits, &inst.labels, n_bins)?;
        deviations.push(pred - oracle.t);
    }
    let n = deviations.len() as f64;
    // Gaussian MLE in closed form (the exact NLL minimizer).
    let mu = deviations.iter().sum::<f64>() / n;
    let sigma = (deviations.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n).sqrt();

    // Observed information from numeric second differences of the NLL.
    let nll = |m: f64, s: f64| -> f64 {
        n * s.ln()
            + deviations.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (2.0 * s * s)
    };
    let (mu_err, sigma_err) = if sigma > 0.0 {
        let h_mu = (1e-6 * sigma).max(1e-12);
        let h_sigma = (1e-6 * sigma).max(1e-12);
        let curv_mu = (nll(mu + h_mu, sigma) - 2.0 * nll(mu, sigma) + nll(mu - h_mu, sigma))
            / (h_mu * h_mu);
        let curv_sigma = (nll(mu, sigma + h_sigma) - 2.0 * nll(mu, sigma)
            + nll(mu, sigma - h_sigma))
            / (h_sigma * h_sigma);
        (
            (1.0 / curv_mu.max(1e-300)).sqrt(),
            (1.0 / curv_sigma.max(1e-300)).sqrt(),
        )
    } else {
        (0.0, 0.0)
    };
    Ok(DeviationReport {
        deviations,
        mu,
        sigma,
        mu_err,
        sigma_err,
    })
}

/// Serialized calibrator file (`model.json`): variant, float32 weights in
/// base64, the training seed, and the configuration hash.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    schema: u32,
    variant: CalibratorVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_mean: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha_std: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Little-endian float32 weights, base64.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_b64: Option<String>,
    config_hash: String,
}

pub fn save_model(path: &Path, model: &CalibratorModel, config_hash: &str) -> Result<()> {
    let file = match model {
        CalibratorModel::Ts { t } => ModelFile {
            schema: 1,
            variant: CalibratorVariant::Ts,
            t: Some(*t),
            channels: None,
            alpha_dim: None,
            norm_mean: None,
            norm_std: None,
            alpha_mean: None,
            alpha_std: None,
            seed: None,
            weights_b64: None,
            config_hash: config_hash.to_string(),
        },
        CalibratorModel::Pts(m) | CalibratorModel::Pipts(m) => {
            let mut bytes = Vec::with_capacity(4 * m.net.params.len());
            for &p in &m.net.params {
                bytes.extend_from_slice(&(p as f32).to_le_bytes());
            }
            ModelFile {
                schema: 1,
                variant: model.variant(),
                t: None,
                channels: Some(m.net.channels),
                alpha_dim: Some(m.net.alpha_dim),
                norm_mean: Some(m.norm_mean),
                norm_std: Some(m.norm_std),
                alpha_mean: Some(m.alpha_mean),
                alpha_std: Some(m.alpha_std),
                seed: Some(m.seed),
                weights_b64: Some(BASE64.encode(bytes)),
                config_hash: config_hash.to_string(),
            }
        }
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CalibratorModel> {
    let file: ModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.schema != 1 {
        return Err(Error::invalid(format!("unsupported model schema {}", file.schema)));
    }
    match file.variant {
        CalibratorVariant::Ts => {
            let t = file.t.ok_or_else(|| Error::invalid("ts model missing t".to_string()))?;
            Ok(CalibratorModel::Ts { t })
        }
        variant => {
            let take = |o: Option<f64>, name: &str| {
                o.ok_or_else(|| Error::invalid(format!("model missing {name}")))
            };
            let channels = file
                .channels
                .ok_or_else(|| Error::invalid("model missing channels".to_string()))?;
            let alpha_dim = file
                .alpha_dim
                .ok_or_else(|| Error::invalid("model missing alpha_dim".to_string()))?;
            let b64 = file
                .weights_b64
                .ok_or_else(|| Error::invalid("model missing weights".to_string()))?;
            let bytes = BASE64
                .decode(b64.as_bytes())
                .map_err(|e| Error::invalid(format!("bad weight encoding: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::invalid("weight byte length not a multiple of 4".to_string()));
            }
            let params: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let mut net = TempNet::new(channels, alpha_dim, 0)?;
            if params.len() != net.param_count() {
                return Err(Error::invalid(format!(
                    "weight count {} does not match architecture ({} expected)",
                    params.len(),
                    net.param_count()
                )));
            }
            net.params = params;
            let calibrator = NetCalibrator {
                net,
                norm_mean: take(file.norm_mean, "norm_mean")?,
                norm_std: take(file.norm_std, "norm_std")?,
                alpha_mean: file.alpha_mean.unwrap_or([0.0; 3]),
                alpha_std: file.alpha_std.unwrap_or([1.0; 3]),
                seed: file.seed.unwrap_or(0),
            };
            Ok(match variant {
                CalibratorVariant::Pts => CalibratorModel::Pts(calibrator),
                CalibratorVariant::Pipts => CalibratorModel::Pipts(calibrator),
                CalibratorVariant::Ts => unreachable!(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{calibrated_logits_for_labels, synth_dataset, TemperatureCoupling};
    use crate::optics::OpticalConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    /// A calibrated instance with a known optimal temperature, without the
    /// optics pipeline.
    fn instance_with_t(seed: u64, hw: usize, c: usize, t_true: f64) -> TrainInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = LabelMap::new(
            Array2::from_shape_fn((hw, hw), |_| rng.gen_range(0..c as i32)),
            None,
        );
        let logits =
            calibrated_logits_for_labels(&labels, c, (0.6, 0.92), t_true, &mut rng).unwrap();
        TrainInstance {
            logits,
            labels,
            alpha: ZernikeVector::zero(),
        }
    }

    #[test]
    fn apply_temperature_limit_cases() {
        let inst = instance_with_t(1, 8, 3, 1.0);
        // t = 1: plain softmax, rows sum to 1.
        let probs = apply_temperature(&inst.logits, 1.0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let s: f64 = (0..3).map(|k| probs[[i, j, k]]).sum();
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
            }
        }
        // t → ∞: uniform.
        let probs = apply_temperature(&inst.logits, 1e12).unwrap();
        for v in probs.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-9);
        }
        assert!(apply_temperature(&inst.logits, 0.0).is_err());
    }

    #[test]
    fn apply_temperature_preserves_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = Array3::from_shape_fn((25, 40, 5), |_| rng.gen_range(-4.0..4.0));
        let logits = LogitTensor::new(data).unwrap();
        let base = logits.argmax_map();
        for t in [0.1, 1.0, 10.0] {
            let probs = apply_temperature(&logits, t).unwrap();
            for ((i, j), &b) in base.indexed_iter() {
                let arg = (0..5)
                    .max_by(|&a, &bb| probs[[i, j, a]].total_cmp(&probs[[i, j, bb]]))
                    .unwrap();
                assert_eq!(arg, b, "t = {t} at ({i}, {j})");
            }
        }
    }

    #[test]
    fn ts_recovers_known_temperatures() {
        // Instances calibrated at t_true: NLL is minimized at t_true.
        for t_true in [0.5, 2.0] {
            let val: Vec<TrainInstance> =
                (0..6).map(|k| instance_with_t(100 + k, 48, 4, t_true)).collect();
            let fit = fit_ts(&val).unwrap();
            assert!(
                (fit.t - t_true).abs() <= 0.04 * t_true,
                "recovered {} for t_true {t_true}",
                fit.t
            );
            // The optimizer dominates the identity temperature.
            let pairs: Vec<(&LogitTensor, &LabelMap)> =
                val.iter().map(|i| (&i.logits, &i.labels)).collect();
            assert!(fit.nll <= mean_nll(&pairs, 1.0).unwrap() + 1e-12);
        }

        // An inherently calibrated set sits at t ≈ 1.
        let val: Vec<TrainInstance> = (0..6).map(|k| instance_with_t(200 + k, 48, 4, 1.0)).collect();
        let fit = fit_ts(&val).unwrap();
        assert!((fit.t - 1.0).abs() <= 0.05, "t = {}", fit.t);
    }

    #[test]
    fn optimal_temperature_oracle() {
        let inst = instance_with_t(5, 64, 4, 1.0);
        let opt = optimal_instance_temperature(&inst.logits, &inst.labels, 10).unwrap();
        assert!((opt.t - 1.0).abs() < 0.15, "t* = {}", opt.t);
        assert!(!opt.degenerate);

        let sharp = instance_with_t(6, 64, 4, 2.0);
        let opt2 = optimal_instance_temperature(&sharp.logits, &sharp.labels, 10).unwrap();
        assert!((opt2.t - 2.0).abs() <= 0.1, "t* = {}", opt2.t);

        // Optimizer dominance over the identity temperature.
        for seed in 0..10 {
            let inst = instance_with_t(700 + seed, 48, 5, 1.0 + 0.2 * seed as f64);
            let opt = optimal_instance_temperature(&inst.logits, &inst.labels, 10).unwrap();
            let at_unit = mece(&inst.logits, &inst.labels, 1.0, 10).unwrap();
            assert!(opt.mece <= at_unit + 1e-12);
        }
    }

    #[test]
    fn optimal_temperature_flags_single_class_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = LabelMap::new(Array2::zeros((16, 16)), None);
        let logits = calibrated_logits_for_labels(&labels, 3, (0.6, 0.9), 1.0, &mut rng).unwrap();
        let opt = optimal_instance_temperature(&logits, &labels, 10).unwrap();
        assert!(opt.degenerate);
    }

    #[test]
    fn net_forward_contracts() {
        let inst = instance_with_t(9, 64, 4, 1.0);
        // Zero weights → softplus(0) = ln 2 regardless of input.
        let calibrator = NetCalibrator {
            net: TempNet::zeroed(4, 0).unwrap(),
            norm_mean: 0.0,
            norm_std: 1.0,
            alpha_mean: [0.0; 3],
            alpha_std: [1.0; 3],
            seed: 0,
        };
        let t = pts_forward(&calibrator, &inst.logits).unwrap();
        assert_abs_diff_eq!(t, 2.0f64.ln(), epsilon = 1e-12);

        // PIPTS with the α path zeroed is independent of α.
        let mut net = TempNet::new(4, 3, 2).unwrap();
        net.zero_alpha_path();
        let calibrator = NetCalibrator {
            net,
            norm_mean: 0.0,
            norm_std: 1.0,
            alpha_mean: [0.0; 3],
            alpha_std: [1.0; 3],
            seed: 2,
        };
        let t0 = pipts_forward(&calibrator, &inst.logits, &ZernikeVector::zero()).unwrap();
        let t1 = pipts_forward(
            &calibrator,
            &inst.logits,
            &ZernikeVector::second_order(0.8, -0.5, 0.3),
        )
        .unwrap();
        assert_eq!(t0, t1);

        // Variant mismatch is rejected.
        assert!(pipts_forward(&calibrator, &inst.logits, &ZernikeVector::zero()).is_ok());
        let pts = NetCalibrator {
            net: TempNet::zeroed(4, 0).unwrap(),
            norm_mean: 0.0,
            norm_std: 1.0,
            alpha_mean: [0.0; 3],
            alpha_std: [1.0; 3],
            seed: 0,
        };
        assert!(pipts_forward(&pts, &inst.logits, &ZernikeVector::zero()).is_err());

        // Channel mismatch is rejected.
        let other = instance_with_t(10, 64, 5, 1.0);
        assert!(pts_forward(&pts, &other.logits).is_err());
    }

    /// Calibrated at t = 1, then sharpened by `scale`: the optimal
    /// temperature is `scale` and is visible in the logit magnitudes.
    fn scaled_instance(seed: u64, hw: usize, c: usize, scale: f64) -> TrainInstance {
        let base = instance_with_t(seed, hw, c, 1.0);
        TrainInstance {
            logits: LogitTensor::new(base.logits.data.mapv(|v| scale * v)).unwrap(),
            ..base
        }
    }

    #[test]
    fn training_recovers_constant_temperature() {
        // Every instance shares t* = 2; a trained PTS must predict ≈ 2 on
        // held-out instances.
        let train: Vec<TrainInstance> =
            (0..12).map(|k| scaled_instance(300 + k, 64, 4, 2.0)).collect();
        let val: Vec<TrainInstance> =
            (0..4).map(|k| scaled_instance(400 + k, 64, 4, 2.0)).collect();
        let held_out: Vec<TrainInstance> =
            (0..4).map(|k| scaled_instance(500 + k, 64, 4, 2.0)).collect();
        let loss_cfg = SmoothLossConfig::default();
        let train_cfg = TrainConfig {
            max_epochs: 150,
            stop_epochs: 60,
            plateau_epochs: 25,
            ..TrainConfig::default()
        };
        let model =
            train_calibrator(CalibratorVariant::Pts, &train, &val, &loss_cfg, &train_cfg, 11)
                .unwrap();
        for inst in &held_out {
            let t = model.predict_temperature(&inst.logits, &inst.alpha).unwrap();
            assert!((1.8..=2.2).contains(&t), "predicted {t}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let train: Vec<TrainInstance> =
            (0..6).map(|k| instance_with_t(600 + k, 32, 3, 1.5)).collect();
        let loss_cfg = SmoothLossConfig::default();
        let train_cfg = TrainConfig {
            max_epochs: 10,
            ..TrainConfig::default()
        };
        let run = || {
            let model = train_calibrator(
                CalibratorVariant::Pipts,
                &train,
                &[],
                &loss_cfg,
                &train_cfg,
                77,
            )
            .unwrap();
            match model {
                CalibratorModel::Pipts(m) => m.net.params,
                _ => unreachable!(),
            }
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_loss_decreases_in_median() {
        // Median-of-5-seeds sanity: the final training loss improves on the
        // initial one.
        let train: Vec<TrainInstance> =
            (0..8).map(|k| instance_with_t(800 + k, 48, 4, 2.0)).collect();
        let loss_cfg = SmoothLossConfig::default();
        let mut initial = Vec::new();
        let mut finals = Vec::new();
        for seed in 0..5u64 {
            let loss_of = |model: &CalibratorModel| {
                train
                    .iter()
                    .map(|inst| {
                        let t = model.predict_temperature(&inst.logits, &inst.alpha).unwrap();
                        let (e, _) =
                            soft_ece_with_grad(&inst.logits, &inst.labels, t, &loss_cfg).unwrap();
                        pipts_loss(e, t, &loss_cfg)
                    })
                    .sum::<f64>()
                    / train.len() as f64
            };
            let untrained = CalibratorModel::Pts(NetCalibrator {
                net: TempNet::new(4, 0, seed).unwrap(),
                norm_mean: 0.0,
                norm_std: 1.0,
                alpha_mean: [0.0; 3],
                alpha_std: [1.0; 3],
                seed,
            });
            initial.push(loss_of(&untrained));
            let train_cfg = TrainConfig {
                max_epochs: 60,
                stop_epochs: 60,
                ..TrainConfig::default()
            };
            let model = train_calibrator(
                CalibratorVariant::Pts,
                &train,
                &[],
                &loss_cfg,
                &train_cfg,
                seed,
            )
            .unwrap();
            finals.push(loss_of(&model));
        }
        initial.sort_by(f64::total_cmp);
        finals.sort_by(f64::total_cmp);
        assert!(
            finals[2] < initial[2],
            "median final {} vs initial {}",
            finals[2],
            initial[2]
        );
    }

    #[test]
    fn ensemble_identical_seeds_have_zero_spread() {
        let train: Vec<TrainInstance> =
            (0..4).map(|k| instance_with_t(900 + k, 32, 3, 1.5)).collect();
        let eval: Vec<TrainInstance> =
            (0..3).map(|k| instance_with_t(950 + k, 32, 3, 1.5)).collect();
        let loss_cfg = SmoothLossConfig::default();
        let train_cfg = TrainConfig {
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let arm = ensemble_evaluate(
            CalibratorVariant::Pts,
            &train,
            &[],
            &eval,
            &loss_cfg,
            &train_cfg,
            &[42, 42, 42],
        )
        .unwrap();
        assert_abs_diff_eq!(arm.std_of_mean, 0.0, epsilon = 1e-15);
        assert!(arm.failed_members.is_empty());
    }

    #[test]
    fn comparison_flags_clear_differences() {
        let a = EnsembleArm {
            variant: CalibratorVariant::Pts,
            member_mece: vec![0.030, 0.031, 0.029],
            mean: 0.030,
            std_of_mean: 0.0006,
            failed_members: vec![],
        };
        let b = EnsembleArm {
            variant: CalibratorVariant::Pipts,
            member_mece: vec![0.020, 0.021, 0.019],
            mean: 0.020,
            std_of_mean: 0.0006,
            failed_members: vec![],
        };
        let report = compare_ensembles(a.clone(), b.clone(), 2.23);
        assert!(report.significant);

        let c = EnsembleArm {
            mean: 0.0305,
            ..b
        };
        let report = compare_ensembles(a, c, 2.23);
        assert!(!report.significant);
    }

    #[test]
    fn deviation_histogram_statistics() {
        let eval: Vec<TrainInstance> =
            (0..12).map(|k| instance_with_t(1000 + k, 48, 4, 1.6)).collect();

        // Oracle the deviations of a constant-offset calibrator: predicted
        // temperature = 1.6 + 0.3 while t* ≈ 1.6.
        let model = CalibratorModel::Ts { t: 1.9 };
        let report = temperature_deviation_histogram(&model, &eval, 10).unwrap();
        assert!((report.mu - 0.3).abs() < 0.1, "μ = {}", report.mu);

        // μ equals the sample mean (Gaussian MLE identity).
        let sample_mean = report.deviations.iter().sum::<f64>() / report.deviations.len() as f64;
        assert_abs_diff_eq!(report.mu, sample_mean, epsilon = 1e-6);

        // Curvature-based uncertainties match the analytic observed
        // information σ/√n and σ/√(2n).
        let n = report.deviations.len() as f64;
        assert_abs_diff_eq!(report.mu_err, report.sigma / n.sqrt(), epsilon = 1e-4);
        assert_abs_diff_eq!(
            report.sigma_err,
            report.sigma / (2.0 * n).sqrt(),
            epsilon = 1e-4
        );

        assert!(temperature_deviation_histogram(&model, &eval[0..5], 10).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();

        let ts = CalibratorModel::Ts { t: 1.37 };
        let path = dir.path().join("ts.json");
        save_model(&path, &ts, "abc123").unwrap();
        match load_model(&path).unwrap() {
            CalibratorModel::Ts { t } => assert_abs_diff_eq!(t, 1.37),
            _ => panic!("wrong variant"),
        }

        let net = TempNet::new(4, 3, 5).unwrap();
        let pipts = CalibratorModel::Pipts(NetCalibrator {
            net,
            norm_mean: 0.25,
            norm_std: 2.0,
            alpha_mean: [0.01, -0.02, 0.005],
            alpha_std: [0.1, 0.12, 0.09],
            seed: 5,
        });
        let path = dir.path().join("pipts.json");
        save_model(&path, &pipts, "abc123").unwrap();
        let loaded = load_model(&path).unwrap();
        let inst = instance_with_t(44, 32, 4, 1.0);
        let alpha = ZernikeVector::second_order(0.2, -0.1, 0.4);
        let t_orig = pipts.predict_temperature(&inst.logits, &alpha).unwrap();
        let t_back = loaded.predict_temperature(&inst.logits, &alpha).unwrap();
        // Weights round-trip through float32.
        assert!((t_orig - t_back).abs() < 1e-5, "{t_orig} vs {t_back}");
    }

    #[test]
    fn synth_dataset_feeds_training_types() {
        let cfg = OpticalConfig {
            grid_n: 64,
            pad_factor: 2,
            ..OpticalConfig::default()
        };
        let data = crate::io::synth_dataset_with(3, 2, &cfg, 0.2, TemperatureCoupling::StrehlCoupled)
            .unwrap();
        let instances: Vec<TrainInstance> = data
            .iter()
            .map(|d| TrainInstance {
                logits: d.logits.clone(),
                labels: d.labels.clone(),
                alpha: d.alpha.clone(),
            })
            .collect();
        // The oracle tracks the generator's recorded optimum.
        for (inst, d) in instances.iter().zip(&data) {
            let opt = optimal_instance_temperature(&inst.logits, &inst.labels, 10).unwrap();
            assert!(
                (opt.t - d.true_optimal_t).abs() < 0.25,
                "oracle {} vs generator {}",
                opt.t,
                d.true_optimal_t
            );
        }
        let _ = synth_dataset(1, 1, &cfg, 0.1).unwrap();
    }
}
