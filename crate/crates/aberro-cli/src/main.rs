//! `aberro` command-line interface.
//!
//! Exit codes: 0 on success, 2 on usage errors (from the argument parser),
//! 1 on runtime errors. All randomness is seeded through `--seed`-style
//! flags; reports are pretty-printed JSON to `--report` or standard output
//! and become byte-identical across runs with `--no-timestamp`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use aberro::analysis::{
    chatterjee_xi, confidence_band, fit_sensitivity_with, generate_test_series, mc_covariance_with,
    pearson_rho, xi_decay_study, FitOptions, SampleSeries,
};
use aberro::calib::{
    aurec, confidence_map, ece, mece, miou, per_class_bins, pooled_ece, reliability_bins,
    LabelMap, ReliabilityBins,
};
use aberro::calibrators::{
    compare_ensembles, ensemble_evaluate, load_model, optimal_instance_temperature, save_model,
    train_calibrator, CalibratorVariant, TrainConfig, TrainInstance,
};
use aberro::io::{
    read_dataset, read_pgm_with_depth, read_tensor, sha256_hex, synth_dataset_with,
    tensor_to_labels, tensor_to_logits, write_dataset, write_pgm, TemperatureCoupling, Tensor,
};
use aberro::loss::SmoothLossConfig;
use aberro::optics::{degrade_image, evaluate_system, radial_mtf_profile, OpticalConfig};
use aberro::zernike::ZernikeVector;

#[derive(Parser)]
#[command(
    name = "aberro",
    version,
    about = "Optical aberrations and confidence calibration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ReportArgs {
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Omit the timestamp so repeated runs are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Degrade a PGM image with the PSF of a given aberration state.
    Degrade {
        /// Input image (binary PGM, 8- or 16-bit).
        #[arg(long)]
        input: PathBuf,
        /// Zernike coefficients in waves as `a3,a4,a5`.
        #[arg(long)]
        zernike: String,
        /// Optics configuration JSON (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compute MTF@half-Nyquist, Strehl ratio, and OIG for an aberration state.
    OpticsMetrics {
        /// Zernike coefficients in waves as `a3,a4,a5`.
        #[arg(long)]
        zernike: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Calibration metrics of a logits/labels pair at a fixed temperature.
    Ece {
        /// Logit tensor (`.tnsr`, float32, h×w×c).
        #[arg(long)]
        logits: PathBuf,
        /// Label tensor (`.tnsr`, int32, h×w).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Label value to exclude everywhere.
        #[arg(long)]
        ignore_id: Option<i32>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Train a calibrator on a synthetic dataset directory.
    Calibrate {
        /// ts, pts, or pipts.
        variant: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Training configuration JSON (loss + optimizer blocks).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Chatterjee rank correlation of two series (or the built-in study).
    Xi {
        /// x series (`.tnsr`, float32, rank 1).
        #[arg(long)]
        x: Option<PathBuf>,
        /// y series (`.tnsr`, float32, rank 1).
        #[arg(long)]
        y: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        tie_seed: u64,
        /// Run the built-in toy-function study and check its published value.
        #[arg(long)]
        self_test: bool,
        /// Emit the subsample decay curve alongside the self-test.
        #[arg(long)]
        decay: bool,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Fit the sensitivity regression with Monte-Carlo uncertainty bands.
    FitSensitivity {
        /// Series JSON: `{"schema":1,"x":[...],"y":[...],"sigma_y":[...]}`.
        #[arg(long)]
        series: PathBuf,
        /// Monte-Carlo resamples for the parameter covariance (0 disables).
        #[arg(long, default_value_t = 1000)]
        mc: usize,
        /// Coverage factor for the confidence band.
        #[arg(long, default_value_t = 1.96)]
        k: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Freeze the exponential component (linear submodel).
        #[arg(long)]
        linear_only: bool,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Generate a synthetic scene/logit dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Uniform sampling half-range of (α₃, α₄, α₅) in waves.
        #[arg(long, default_value_t = 0.25)]
        half_range: f64,
        /// Decouple the miscalibration temperature from the optics
        /// (control generator with t_true = 1).
        #[arg(long)]
        control: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train PTS/PIPTS deep ensembles and test the significance of the gap.
    Ensemble {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = 11)]
        members: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Student-t extension factor for the significance test.
        #[arg(long, default_value_t = 2.23)]
        k: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Evaluate a dataset (optionally through a trained calibrator).
    Report {
        #[arg(long)]
        data: PathBuf,
        /// Trained model JSON; a fixed temperature is used when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[command(flatten)]
        report: ReportArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn parse_zernike(arg: &str) -> anyhow::Result<ZernikeVector> {
    let parts: Vec<&str> = arg.split(',').collect();
    if parts.len() != 3 {
        bail!("--zernike expects `a3,a4,a5`, got `{arg}`");
    }
    let mut vals = [0.0f64; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .with_context(|| format!("bad coefficient `{p}`"))?;
    }
    Ok(ZernikeVector::second_order(vals[0], vals[1], vals[2]))
}

fn default_schema() -> u32 {
    1
}

#[derive(serde::Serialize, serde::Deserialize)]
struct OpticsFile {
    #[serde(default = "default_schema")]
    schema: u32,
    #[serde(flatten)]
    config: OpticalConfig,
}

#[derive(serde::Serialize, serde::Deserialize, Default)]
struct TrainFile {
    #[serde(default = "default_schema")]
    schema: u32,
    #[serde(default)]
    loss: SmoothLossConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn load_optics(path: &Option<PathBuf>) -> anyhow::Result<OpticalConfig> {
    match path {
        None => Ok(OpticalConfig::default()),
        Some(p) => {
            let file: OpticsFile = serde_json::from_str(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?;
            if file.schema != 1 {
                bail!("unsupported optics config schema {}", file.schema);
            }
            Ok(file.config)
        }
    }
}

fn load_train_file(path: &Option<PathBuf>) -> anyhow::Result<TrainFile> {
    match path {
        None => Ok(TrainFile {
            schema: 1,
            loss: SmoothLossConfig::default(),
            train: TrainConfig::default(),
        }),
        Some(p) => {
            let file: TrainFile = serde_json::from_str(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?;
            if file.schema != 1 {
                bail!("unsupported training config schema {}", file.schema);
            }
            Ok(file)
        }
    }
}

fn emit_report(args: &ReportArgs, mut value: serde_json::Value) -> anyhow::Result<()> {
    if !args.no_timestamp {
        if let Some(map) = value.as_object_mut() {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            map.insert("timestamp_unix".to_string(), serde_json::json!(secs));
        }
    }
    let text = serde_json::to_string_pretty(&value)?;
    match &args.report {
        Some(path) => {
            std::fs::write(path, text.as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn bins_json(bins: &ReliabilityBins) -> serde_json::Value {
    serde_json::json!({
        "n_bins": bins.n_bins,
        "counts": bins.counts,
        "mean_confidence": bins.mean_confidence,
        "mean_accuracy": bins.mean_accuracy,
        "total_count": bins.total_count,
    })
}

fn load_instances(dir: &Path) -> anyhow::Result<Vec<TrainInstance>> {
    let (_, data) =
        read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(data
        .into_iter()
        .map(|d| TrainInstance {
            logits: d.logits,
            labels: d.labels,
            alpha: d.alpha,
        })
        .collect())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Degrade {
            input,
            zernike,
            config,
            output,
        } => {
            let alpha = parse_zernike(&zernike)?;
            let cfg = load_optics(&config)?;
            let (img, bits) = read_pgm_with_depth(&input)?;
            let eval = evaluate_system(&alpha, &cfg)?;
            let out = degrade_image(&img, &eval.psf)?;
            write_pgm(&output, &out, bits)?;
            Ok(())
        }

        Cmd::OpticsMetrics {
            zernike,
            config,
            report,
        } => {
            let alpha = parse_zernike(&zernike)?;
            let cfg = load_optics(&config)?;
            let eval = evaluate_system(&alpha, &cfg)?;
            let profile = radial_mtf_profile(&eval.spectral);
            emit_report(
                &report,
                serde_json::json!({
                    "schema": 1,
                    "zernike": alpha,
                    "mtf_half_nyquist": eval.metrics.mtf_half_nyquist,
                    "strehl": eval.metrics.strehl,
                    "oig": eval.metrics.oig,
                    "mtf_is_monotone": eval.mtf_monotone,
                    "radial_mtf": profile,
                    "freq_step_cycles_per_m": eval.spectral.freq_step,
                    "cutoff_cycles_per_m": eval.spectral.cutoff,
                }),
            )
        }

        Cmd::Ece {
            logits,
            labels,
            temperature,
            bins,
            ignore_id,
            report,
        } => {
            let logits = tensor_to_logits(&read_tensor(&logits)?)?;
            let labels = tensor_to_labels(&read_tensor(&labels)?, ignore_id)?;
            let pooled = pooled_ece(&logits, &labels, temperature, bins)?;
            let m = mece(&logits, &labels, temperature, bins)?;

            // Pooled reliability bins for diagram plotting.
            let conf = confidence_map(&logits, temperature)?;
            let pred = logits.argmax_map();
            let mut flat_conf = Vec::new();
            let mut flat_ok = Vec::new();
            for ((i, j), &gt) in labels.data.indexed_iter() {
                if labels.is_ignored(gt) {
                    continue;
                }
                flat_conf.push(conf[[i, j]]);
                flat_ok.push(pred[[i, j]] == gt as usize);
            }
            let pooled_bins = reliability_bins(&flat_conf, &flat_ok, bins)?;
            let per_class = per_class_bins(&logits, &labels, temperature, bins)?;
            let per_class_json: Vec<serde_json::Value> = per_class
                .iter()
                .map(|b| match b {
                    Some(b) => serde_json::json!({
                        "ece": ece(b).ok(),
                        "aurec": aurec(b).ok(),
                        "bins": bins_json(b),
                    }),
                    None => serde_json::Value::Null,
                })
                .collect();
            emit_report(
                &report,
                serde_json::json!({
                    "schema": 1,
                    "temperature": temperature,
                    "n_bins": bins,
                    "ece": pooled,
                    "mece": m,
                    "aurec": aurec(&pooled_bins)?,
                    "reliability": bins_json(&pooled_bins),
                    "per_class": per_class_json,
                }),
            )
        }

        Cmd::Calibrate {
            variant,
            train,
            val,
            config,
            out,
            seed,
        } => {
            let variant = match variant.as_str() {
                "ts" => CalibratorVariant::Ts,
                "pts" => CalibratorVariant::Pts,
                "pipts" => CalibratorVariant::Pipts,
                other => bail!("unknown calibrator variant `{other}` (ts|pts|pipts)"),
            };
            let file = load_train_file(&config)?;
            let config_hash = sha256_hex(serde_json::to_string(&file)?.as_bytes());
            let train_set = load_instances(&train)?;
            let val_set = match &val {
                Some(dir) => load_instances(dir)?,
                None => Vec::new(),
            };
            let model =
                train_calibrator(variant, &train_set, &val_set, &file.loss, &file.train, seed)?;
            save_model(&out, &model, &config_hash)?;
            eprintln!("saved {variant} model to {}", out.display());
            Ok(())
        }

        Cmd::Xi {
            x,
            y,
            tie_seed,
            self_test,
            decay,
            report,
        } => {
            if self_test {
                let seeds: Vec<u64> = (0..100).collect();
                let mut xis = Vec::with_capacity(seeds.len());
                let mut rhos = Vec::with_capacity(seeds.len());
                for &seed in &seeds {
                    let s = generate_test_series(1001, 0.3, seed, 0);
                    xis.push(chatterjee_xi(&s, seed)?);
                    rhos.push(pearson_rho(&s)?);
                }
                let mean_xi = xis.iter().sum::<f64>() / xis.len() as f64;
                let mean_abs_rho = rhos.iter().map(|r| r.abs()).sum::<f64>() / rhos.len() as f64;
                let pass = (0.794..=0.854).contains(&mean_xi);
                let decay_curve = if decay {
                    Some(xi_decay_study(
                        &[0, 25, 50, 100, 200],
                        &(0..20).collect::<Vec<u64>>(),
                    )?)
                } else {
                    None
                };
                println!(
                    "xi self-test: mean ξ over {} seeds = {:.4} (target 0.824 ± 0.03) → {}",
                    seeds.len(),
                    mean_xi,
                    if pass { "PASS" } else { "FAIL" }
                );
                emit_report(
                    &report,
                    serde_json::json!({
                        "schema": 1,
                        "mean_xi": mean_xi,
                        "target": 0.824,
                        "tolerance": 0.03,
                        "pass": pass,
                        "mean_abs_pearson_rho": mean_abs_rho,
                        "decay": decay_curve,
                    }),
                )?;
                if !pass {
                    bail!("xi self-test failed: mean ξ = {mean_xi:.4}");
                }
                return Ok(());
            }
            let (Some(xp), Some(yp)) = (x, y) else {
                bail!("xi needs --x and --y tensors (or --self-test)");
            };
            let load_series = |p: &Path| -> anyhow::Result<Vec<f64>> {
                match read_tensor(p)? {
                    Tensor::F32 { data, .. } => Ok(data.iter().map(|&v| v as f64).collect()),
                    _ => bail!("{} must be a float32 tensor", p.display()),
                }
            };
            let s = SampleSeries::new(load_series(&xp)?, load_series(&yp)?, None)?;
            let xi = chatterjee_xi(&s, tie_seed)?;
            let rho = pearson_rho(&s)?;
            emit_report(
                &report,
                serde_json::json!({
                    "schema": 1,
                    "n": s.len(),
                    "tie_seed": tie_seed,
                    "xi": xi,
                    "pearson_rho": rho,
                }),
            )
        }

        Cmd::FitSensitivity {
            series,
            mc,
            k,
            seed,
            linear_only,
            report,
        } => {
            #[derive(serde::Deserialize)]
            struct SeriesFile {
                #[serde(default = "default_schema")]
                schema: u32,
                x: Vec<f64>,
                y: Vec<f64>,
                #[serde(default)]
                sigma_y: Option<Vec<f64>>,
            }
            let file: SeriesFile = serde_json::from_str(&std::fs::read_to_string(&series)?)?;
            if file.schema != 1 {
                bail!("unsupported series schema {}", file.schema);
            }
            let s = SampleSeries::new(file.x, file.y, file.sigma_y)?;
            let opts = if linear_only {
                FitOptions::linear_only()
            } else {
                FitOptions::default()
            };
            let mut fit = fit_sensitivity_with(&s, &opts)?;
            let mc_used = if mc > 0 && s.sigma_y.is_some() {
                fit.covariance = mc_covariance_with(&s, mc, seed, &opts)?;
                true
            } else {
                false
            };
            // Band over a regular grid spanning the data.
            let x_min = s.x.iter().cloned().fold(f64::INFINITY, f64::min);
            let x_max = s.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let grid: Vec<f64> = (0..=200)
                .map(|i| x_min + (x_max - x_min) * i as f64 / 200.0)
                .collect();
            let band = confidence_band(&fit, &grid, k)?;
            fit.band = Some(band.clone());
            emit_report(
                &report,
                serde_json::json!({
                    "schema": 1,
                    "beta": fit.beta,
                    "covariance": fit.covariance,
                    "mc_covariance_used": mc_used,
                    "n_mc": mc,
                    "k": k,
                    "unexplained_variance": fit.unexplained_variance,
                    "band_x": grid,
                    "band": band,
                }),
            )
        }

        Cmd::Synth {
            seed,
            n,
            out,
            half_range,
            control,
            config,
        } => {
            let cfg = match &config {
                Some(_) => load_optics(&config)?,
                // Compact default geometry for 64×64 scenes.
                None => OpticalConfig {
                    grid_n: 64,
                    pad_factor: 2,
                    ..OpticalConfig::default()
                },
            };
            let coupling = if control {
                TemperatureCoupling::Unit
            } else {
                TemperatureCoupling::StrehlCoupled
            };
            let instances = synth_dataset_with(seed, n, &cfg, half_range, coupling)?;
            write_dataset(&out, &instances, seed, half_range, coupling, &cfg)?;
            eprintln!("wrote {} instances to {}", instances.len(), out.display());
            Ok(())
        }

        Cmd::Ensemble {
            train,
            val,
            eval,
            members,
            seed,
            k,
            config,
            report,
        } => {
            let file = load_train_file(&config)?;
            let train_set = load_instances(&train)?;
            let val_set = load_instances(&val)?;
            let eval_set = load_instances(&eval)?;
            let seeds: Vec<u64> = (0..members as u64)
                .map(|i| seed ^ (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                .collect();
            let pts = ensemble_evaluate(
                CalibratorVariant::Pts,
                &train_set,
                &val_set,
                &eval_set,
                &file.loss,
                &file.train,
                &seeds,
            )?;
            let pipts = ensemble_evaluate(
                CalibratorVariant::Pipts,
                &train_set,
                &val_set,
                &eval_set,
                &file.loss,
                &file.train,
                &seeds,
            )?;
            let comparison = compare_ensembles(pts, pipts, k);
            println!(
                "pts mECE {:.6} ± {:.6} | pipts mECE {:.6} ± {:.6} | significant: {}",
                comparison.baseline.mean,
                comparison.baseline.std_of_mean,
                comparison.candidate.mean,
                comparison.candidate.std_of_mean,
                comparison.significant
            );
            emit_report(&report, serde_json::to_value(&comparison)?)
        }

        Cmd::Report {
            data,
            model,
            temperature,
            bins,
            report,
        } => {
            let instances = load_instances(&data)?;
            let model = match &model {
                Some(p) => Some(load_model(p)?),
                None => None,
            };
            let mut per_instance = Vec::new();
            let mut flat_conf = Vec::new();
            let mut flat_ok = Vec::new();
            let mut mece_sum = 0.0;
            let mut miou_sum = 0.0;
            for inst in &instances {
                let t = match &model {
                    Some(m) => m.predict_temperature(&inst.logits, &inst.alpha)?,
                    None => temperature,
                };
                let m = mece(&inst.logits, &inst.labels, t, bins)?;
                let pred_map = LabelMap::new(inst.logits.argmax_map().mapv(|v| v as i32), None);
                let iou = miou(&pred_map, &inst.labels, inst.logits.classes())?;
                let oracle = optimal_instance_temperature(&inst.logits, &inst.labels, bins)?;
                mece_sum += m;
                miou_sum += iou.mean;

                let conf = confidence_map(&inst.logits, t)?;
                let pred = inst.logits.argmax_map();
                for ((i, j), &gt) in inst.labels.data.indexed_iter() {
                    if inst.labels.is_ignored(gt) {
                        continue;
                    }
                    flat_conf.push(conf[[i, j]]);
                    flat_ok.push(pred[[i, j]] == gt as usize);
                }
                per_instance.push(serde_json::json!({
                    "temperature": t,
                    "mece": m,
                    "miou": iou.mean,
                    "optimal_temperature": oracle.t,
                    "optimal_mece": oracle.mece,
                }));
            }
            let pooled_bins = reliability_bins(&flat_conf, &flat_ok, bins)?;
            emit_report(
                &report,
                serde_json::json!({
                    "schema": 1,
                    "instances": per_instance.len(),
                    "mean_mece": mece_sum / instances.len() as f64,
                    "mean_miou": miou_sum / instances.len() as f64,
                    "ece_pooled": ece(&pooled_bins)?,
                    "aurec_pooled": aurec(&pooled_bins)?,
                    "reliability": bins_json(&pooled_bins),
                    "per_instance": per_instance,
                }),
            )
        }
    }
}
