//! Browser demo: interactive wavefront → PSF/MTF exploration, the
//! calibration-versus-blur story, and the rank-correlation toy study.
//!
//! Every export takes plain numbers and returns a JSON string; the static
//! page (`www/index.html`) renders the payloads onto canvases. All
//! computation is deterministic in the provided seeds.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use aberro::analysis::{chatterjee_xi, generate_test_series, pearson_rho};
use aberro::calib::{mece, reliability_bins, ReliabilityBins};
use aberro::calibrators::optimal_instance_temperature;
use aberro::io::{synth_dataset, SyntheticInstance};
use aberro::loss::{pipts_loss, soft_ece, SmoothLossConfig};
use aberro::optics::{
    evaluate_system, mtf_is_monotone, radial_mtf_profile, OpticalConfig, SystemEvaluation,
};
use aberro::zernike::{wavefront_map, ZernikeVector};

/// Interactive optics geometry: small grid for snappy sliders.
fn demo_config() -> OpticalConfig {
    OpticalConfig {
        grid_n: 64,
        pad_factor: 2,
        ..OpticalConfig::default()
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

#[derive(Serialize)]
struct OpticsPayload {
    /// Center crop of the PSF, log-compressed to 0..255 rows×cols.
    psf: Vec<Vec<u8>>,
    /// Wavefront map (waves) over the pupil, row-major, NaN outside.
    wavefront: Vec<Vec<f64>>,
    wavefront_range: f64,
    /// Radially averaged MTF profile; index k is `k·freq_step`.
    mtf: Vec<f64>,
    /// Cutoff index in profile bins.
    cutoff_bin: f64,
    half_nyquist_bin: f64,
    mtf_half_nyquist: f64,
    strehl: f64,
    oig: f64,
    mtf_is_monotone: bool,
    rms_waves: f64,
}

fn log_compress(eval: &SystemEvaluation, crop: usize) -> Vec<Vec<u8>> {
    let grid = &eval.psf.grid;
    let m = grid.nrows();
    let c = m / 2;
    let half = crop / 2;
    let peak = grid.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let mut out = Vec::with_capacity(crop);
    for i in 0..crop {
        let mut row = Vec::with_capacity(crop);
        for j in 0..crop {
            let v = grid[[c - half + i, c - half + j]] / peak;
            // Four decades of log range.
            let level = ((1.0 + v * 1e4).log10() / 4.0).clamp(0.0, 1.0);
            row.push((level * 255.0).round() as u8);
        }
        out.push(row);
    }
    out
}

/// Evaluates one aberration state: PSF image, MTF profile, and the three
/// scalar metrics.
#[wasm_bindgen]
pub fn optics_report(a3: f64, a4: f64, a5: f64) -> String {
    let cfg = demo_config();
    let alpha = ZernikeVector::second_order(a3, a4, a5);
    let eval = match evaluate_system(&alpha, &cfg) {
        Ok(e) => e,
        Err(e) => return format!("{{\"error\":\"{e}\"}}"),
    };
    let profile = radial_mtf_profile(&eval.spectral);
    let w = wavefront_map(&alpha, cfg.grid_n).expect("demo grid");
    let mut wavefront = Vec::with_capacity(cfg.grid_n);
    let mut range = 0.0f64;
    for i in 0..cfg.grid_n {
        let mut row = Vec::with_capacity(cfg.grid_n);
        for j in 0..cfg.grid_n {
            if w.mask[[i, j]] {
                range = range.max(w.grid[[i, j]].abs());
                row.push(w.grid[[i, j]]);
            } else {
                row.push(f64::NAN);
            }
        }
        wavefront.push(row);
    }
    let payload = OpticsPayload {
        psf: log_compress(&eval, 64),
        wavefront,
        wavefront_range: range.max(1e-9),
        mtf: profile,
        cutoff_bin: eval.spectral.cutoff / eval.spectral.freq_step,
        half_nyquist_bin: cfg.half_nyquist() / eval.spectral.freq_step,
        mtf_half_nyquist: eval.metrics.mtf_half_nyquist,
        strehl: eval.metrics.strehl,
        oig: eval.metrics.oig,
        mtf_is_monotone: mtf_is_monotone(&eval.spectral),
        rms_waves: alpha.rms(),
    };
    // NaN is not valid JSON; encode the mask as nulls.
    to_json(&payload).replace("NaN", "null")
}

#[derive(Serialize)]
struct CorrelationPayload {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Index where the inserted subsamples start.
    base_n: usize,
    xi: f64,
    rho: f64,
}

/// The discontinuous toy study: ξ stays high under noise but decays as
/// unexplained variance is inserted at the jumps; ρ sees almost nothing.
#[wasm_bindgen]
pub fn correlation_report(sigma_eps: f64, n_sub: u32, seed: u32) -> String {
    let s = generate_test_series(1001, sigma_eps.max(0.0), seed as u64, n_sub as usize);
    let xi = chatterjee_xi(&s, seed as u64).unwrap_or(f64::NAN);
    let rho = pearson_rho(&s).unwrap_or(f64::NAN);
    to_json(&CorrelationPayload {
        base_n: 1001,
        x: s.x,
        y: s.y,
        xi,
        rho,
    })
}

#[derive(Serialize)]
struct BinsPayload {
    counts: Vec<u64>,
    mean_confidence: Vec<f64>,
    mean_accuracy: Vec<f64>,
}

#[derive(Serialize)]
struct CalibrationPayload {
    /// Temperature grid of the sweep.
    t: Vec<f64>,
    /// Instance mECE at each grid temperature.
    mece: Vec<f64>,
    /// Smoothed-ECE training loss at each grid temperature.
    loss: Vec<f64>,
    /// Reliability bins at each grid temperature.
    bins: Vec<BinsPayload>,
    /// The generator's exact re-calibration temperature.
    t_true: f64,
    /// The per-instance oracle minimizer.
    t_oracle: f64,
    strehl_coupling: f64,
}

fn instance_bins(inst: &SyntheticInstance, t: f64, n_bins: usize) -> ReliabilityBins {
    let conf = aberro::calib::confidence_map(&inst.logits, t).expect("valid t");
    let pred = inst.logits.argmax_map();
    let mut flat_conf = Vec::new();
    let mut flat_ok = Vec::new();
    for ((i, j), &gt) in inst.labels.data.indexed_iter() {
        flat_conf.push(conf[[i, j]]);
        flat_ok.push(pred[[i, j]] == gt as usize);
    }
    reliability_bins(&flat_conf, &flat_ok, n_bins).expect("bins")
}

/// Generates a blurred synthetic instance and sweeps the calibration
/// temperature across it.
#[wasm_bindgen]
pub fn calibration_report(defocus: f64, seed: u32) -> String {
    let cfg = demo_config();
    // One instance whose aberration is dominated by the requested defocus:
    // sample, then override α₄.
    let base = match synth_dataset(seed as u64, 1, &cfg, 1e-9) {
        Ok(mut v) => {
            let inst = &mut v[0];
            let alpha = ZernikeVector::second_order(0.0, defocus, 0.0);
            let eval = evaluate_system(&alpha, &cfg).expect("demo optics");
            let t_true = 1.0
                + aberro::io::COUPLING_SLOPE * (1.0 - eval.metrics.strehl.clamp(0.0, 1.0));
            // Regenerate the logits against the new temperature.
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
                seed as u64 ^ 0xD5,
            );
            inst.logits = aberro::io::calibrated_logits_for_labels(
                &inst.labels,
                inst.logits.classes(),
                (0.55, 0.95),
                t_true,
                &mut rng,
            )
            .expect("logit generation");
            inst.alpha = alpha;
            inst.true_optimal_t = t_true;
            v.remove(0)
        }
        Err(e) => return format!("{{\"error\":\"{e}\"}}"),
    };
    let loss_cfg = SmoothLossConfig::default();
    let n = 61;
    let mut t_grid = Vec::with_capacity(n);
    let mut mece_curve = Vec::with_capacity(n);
    let mut loss_curve = Vec::with_capacity(n);
    let mut bins = Vec::with_capacity(n);
    for k in 0..n {
        let t = 0.5 + 3.5 * k as f64 / (n - 1) as f64;
        let m = mece(&base.logits, &base.labels, t, 10).unwrap_or(f64::NAN);
        let e = soft_ece(&base.logits, &base.labels, t, &loss_cfg).unwrap_or(f64::NAN);
        t_grid.push(t);
        mece_curve.push(m);
        loss_curve.push(pipts_loss(e, t, &loss_cfg));
        let b = instance_bins(&base, t, 10);
        bins.push(BinsPayload {
            counts: b.counts,
            mean_confidence: b.mean_confidence,
            mean_accuracy: b.mean_accuracy,
        });
    }
    let oracle = optimal_instance_temperature(&base.logits, &base.labels, 10)
        .map(|o| o.t)
        .unwrap_or(f64::NAN);
    to_json(&CalibrationPayload {
        t: t_grid,
        mece: mece_curve,
        loss: loss_curve,
        bins,
        t_true: base.true_optimal_t,
        t_oracle: oracle,
        strehl_coupling: aberro::io::COUPLING_SLOPE,
    })
}
