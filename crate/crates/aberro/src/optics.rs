//! Fourier-optical system model: pupil → PSF → OTF/MTF, the scalar quality
//! metrics (MTF at half-Nyquist, Strehl ratio, OIG), and PSF-based image
//! degradation for data augmentation.
//!
//! Geometry: the pupil disk spans the wavefront grid (`w.n` samples) and is
//! embedded centered in a `pad_factor · grid_n` square field. Image-plane
//! sample spacing follows Fraunhofer scaling `λ · f# · w.n / M`, so the
//! spectral cutoff is the incoherent limit `1/(λ · f#)`.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zernike::{wavefront_map, WavefrontMap, ZernikeVector};

/// How the real-valued MTF plane is filled from the complex OTF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtfMode {
    /// Real part of the OTF (the convention used throughout this crate).
    RealPart,
    /// Modulus of the OTF, kept for cross-checks.
    Modulus,
}

/// Sampling geometry and sensor/lens parameters of the simulated system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticalConfig {
    /// Pupil grid size (power of two).
    pub grid_n: usize,
    /// Zero-padding factor for anti-aliasing headroom (≥ 2).
    pub pad_factor: usize,
    /// Wavelength in meters.
    pub wavelength: f64,
    /// Working f-number.
    pub f_number: f64,
    /// Sensor pixel pitch in meters.
    pub pixel_pitch: f64,
    pub mtf_mode: MtfMode,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            grid_n: 256,
            pad_factor: 2,
            wavelength: 550e-9,
            f_number: 2.0,
            pixel_pitch: 3.0e-6,
            mtf_mode: MtfMode::RealPart,
        }
    }
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.grid_n.is_power_of_two() || self.grid_n < 16 {
            return Err(Error::invalid(format!(
                "grid_n {} must be a power of two ≥ 16",
                self.grid_n
            )));
        }
        if self.pad_factor < 2 {
            return Err(Error::invalid(format!(
                "pad_factor {} must be ≥ 2",
                self.pad_factor
            )));
        }
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("f_number", self.f_number),
            ("pixel_pitch", self.pixel_pitch),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Incoherent spectral cutoff `1/(λ · f#)` in cycles/meter.
    pub fn cutoff(&self) -> f64 {
        1.0 / (self.wavelength * self.f_number)
    }

    /// Half-Nyquist frequency of the sensor, `1/(4 · pixel_pitch)`.
    pub fn half_nyquist(&self) -> f64 {
        1.0 / (4.0 * self.pixel_pitch)
    }
}

/// Point spread function: non-negative, unit-sum impulse response.
#[derive(Debug, Clone)]
pub struct Psf {
    /// `M × M` intensity samples, peak centered at `[M/2, M/2]`.
    pub grid: Array2<f64>,
    /// Image-plane meters per sample.
    pub sample_spacing: f64,
}

/// OTF/MTF planes with their frequency geometry, DC centered at `[M/2, M/2]`.
#[derive(Debug, Clone)]
pub struct SpectralGrid {
    pub otf: Array2<Complex64>,
    pub mtf: Array2<f64>,
    /// Cycles/meter per frequency bin.
    pub freq_step: f64,
    /// Incoherent cutoff in cycles/meter.
    pub cutoff: f64,
}

/// The three scalar optical quality metrics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OpticalMetrics {
    pub mtf_half_nyquist: f64,
    pub strehl: f64,
    pub oig: f64,
}

/// Builds the complex pupil function `mask · exp(i·2π·W)` (W in waves),
/// embedded centered in a `(pad_factor · grid_n)²` zero field.
pub fn pupil_function(w: &WavefrontMap, cfg: &OpticalConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    if w.n > cfg.grid_n {
        return Err(Error::invalid(format!(
            "wavefront grid {} exceeds pupil grid {}",
            w.n, cfg.grid_n
        )));
    }
    let m = cfg.pad_factor * cfg.grid_n;
    let offset = (m - w.n) / 2;
    let mut pupil = Array2::zeros((m, m));
    for i in 0..w.n {
        for j in 0..w.n {
            if w.mask[[i, j]] {
                let phase = std::f64::consts::TAU * w.grid[[i, j]];
                pupil[[offset + i, offset + j]] = Complex64::from_polar(1.0, phase);
            }
        }
    }
    Ok(pupil)
}

/// Computes the PSF `|FT(P)|²`, centered and normalized to unit sum.
pub fn psf(pupil: &Array2<Complex64>, cfg: &OpticalConfig) -> Result<Psf> {
    cfg.validate()?;
    let m = pupil.nrows();
    if pupil.ncols() != m {
        return Err(Error::invalid("pupil grid must be square".to_string()));
    }
    let open_area: f64 = pupil.iter().map(|c| c.norm_sqr()).sum();
    if open_area == 0.0 {
        return Err(Error::degenerate("all-zero pupil".to_string()));
    }
    // Pupil diameter in samples: the embedded wavefront grid size.
    let diameter = pupil_diameter(pupil);
    let mut field = pupil.clone();
    fft2d(&mut field, false);
    let mut grid = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            grid[[i, j]] = field[[i, j]].norm_sqr();
        }
    }
    let grid = fftshift(&grid);
    let total: f64 = grid.iter().sum();
    let grid = grid.mapv(|v| v / total);
    Ok(Psf {
        grid,
        sample_spacing: cfg.wavelength * cfg.f_number * diameter as f64 / m as f64,
    })
}

/// Infers the pupil disk diameter (in samples) from the populated rows.
fn pupil_diameter(pupil: &Array2<Complex64>) -> usize {
    let m = pupil.nrows();
    let mut first = m;
    let mut last = 0;
    for i in 0..m {
        if (0..m).any(|j| pupil[[i, j]].norm_sqr() > 0.0) {
            first = first.min(i);
            last = last.max(i);
        }
    }
    // Pixel centers at (i+0.5)/n: a disk over an n-grid populates all n rows.
    last + 1 - first
}

/// Computes the OTF as the normalized Fourier transform of the PSF, DC
/// centered, with the MTF plane filled per `cfg.mtf_mode`.
pub fn otf(psf: &Psf, cfg: &OpticalConfig) -> Result<SpectralGrid> {
    cfg.validate()?;
    let m = psf.grid.nrows();
    let mut field: Array2<Complex64> = ifftshift(&psf.grid).mapv(|v| Complex64::new(v, 0.0));
    fft2d(&mut field, false);
    let dc = field[[0, 0]];
    if dc.norm() == 0.0 {
        return Err(Error::degenerate("zero-energy PSF".to_string()));
    }
    let mut otf = fftshift(&field.mapv(|c| c / dc));
    let center = m / 2;
    otf[[center, center]] = Complex64::new(1.0, 0.0);
    let mtf = match cfg.mtf_mode {
        MtfMode::RealPart => otf.mapv(|c| c.re),
        MtfMode::Modulus => otf.mapv(|c| c.norm()),
    };
    Ok(SpectralGrid {
        otf,
        mtf,
        freq_step: 1.0 / (m as f64 * psf.sample_spacing),
        cutoff: cfg.cutoff(),
    })
}

/// Radially averaged MTF profile; entry `k` is the mean over the annulus of
/// radius `k ± 0.5` frequency bins, i.e. the profile at `k · freq_step`.
pub fn radial_mtf_profile(s: &SpectralGrid) -> Vec<f64> {
    let m = s.mtf.nrows();
    let center = (m / 2) as f64;
    let k_max = m / 2;
    let mut sums = vec![0.0; k_max + 1];
    let mut counts = vec![0usize; k_max + 1];
    for i in 0..m {
        for j in 0..m {
            let r = ((i as f64 - center).powi(2) + (j as f64 - center).powi(2)).sqrt();
            let k = r.round() as usize;
            if k <= k_max {
                sums[k] += s.mtf[[i, j]];
                counts[k] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect()
}

/// Radially averaged MTF, linearly interpolated at the sensor half-Nyquist
/// frequency.
pub fn mtf_at_half_nyquist(s: &SpectralGrid, cfg: &OpticalConfig) -> Result<f64> {
    let nu = cfg.half_nyquist();
    if nu > s.cutoff {
        return Err(Error::OutOfBand(format!(
            "half-Nyquist {nu:.3e} c/m beyond cutoff {:.3e} c/m",
            s.cutoff
        )));
    }
    let profile = radial_mtf_profile(s);
    let x = nu / s.freq_step;
    let k = x.floor() as usize;
    if k + 1 >= profile.len() {
        return Err(Error::OutOfBand(format!(
            "half-Nyquist {nu:.3e} c/m beyond sampled band"
        )));
    }
    let frac = x - k as f64;
    Ok(profile[k] * (1.0 - frac) + profile[k + 1] * frac)
}

fn check_same_geometry(a: &SpectralGrid, b: &SpectralGrid) -> Result<()> {
    if a.mtf.dim() != b.mtf.dim() || (a.freq_step - b.freq_step).abs() > 1e-9 * a.freq_step.abs() {
        return Err(Error::invalid(
            "spectral grids have mismatched geometry".to_string(),
        ));
    }
    Ok(())
}

/// Strehl ratio: full-plane spectral integral of the MTF over the
/// diffraction-limited integral.
pub fn strehl(s: &SpectralGrid, s_diff: &SpectralGrid) -> Result<f64> {
    check_same_geometry(s, s_diff)?;
    let num: f64 = s.mtf.iter().sum();
    let den: f64 = s_diff.mtf.iter().sum();
    Ok(num / den)
}

/// Optical Informative Gain: normalized spectral integral of the squared MTF.
pub fn oig(s: &SpectralGrid, s_diff: &SpectralGrid) -> Result<f64> {
    check_same_geometry(s, s_diff)?;
    let num: f64 = s.mtf.iter().map(|v| v * v).sum();
    let den: f64 = s_diff.mtf.iter().map(|v| v * v).sum();
    Ok(num / den)
}

/// Whether the radially averaged MTF is monotone non-increasing out to the
/// cutoff. Large aberrations (defocus around a full wave) violate this.
pub fn mtf_is_monotone(s: &SpectralGrid) -> bool {
    let profile = radial_mtf_profile(s);
    let k_cut = ((s.cutoff / s.freq_step).floor() as usize).min(profile.len() - 1);
    profile.windows(2).take(k_cut).all(|w| w[1] <= w[0] + 1e-6)
}

/// Full evaluation of one aberration state against its diffraction-limited
/// reference.
#[derive(Debug, Clone)]
pub struct SystemEvaluation {
    pub psf: Psf,
    pub spectral: SpectralGrid,
    pub metrics: OpticalMetrics,
    pub mtf_monotone: bool,
}

/// Diffraction-limited spectral reference for `cfg` (zero aberrations).
pub fn diffraction_limited(cfg: &OpticalConfig) -> Result<SpectralGrid> {
    let w = wavefront_map(&ZernikeVector::zero(), cfg.grid_n)?;
    let p = pupil_function(&w, cfg)?;
    otf(&psf(&p, cfg)?, cfg)
}

/// Evaluates PSF, spectrum, and the three scalar metrics for `alpha`,
/// reusing a precomputed diffraction-limited reference.
pub fn evaluate_with_reference(
    alpha: &ZernikeVector,
    cfg: &OpticalConfig,
    reference: &SpectralGrid,
) -> Result<SystemEvaluation> {
    let w = wavefront_map(alpha, cfg.grid_n)?;
    let p = pupil_function(&w, cfg)?;
    let psf = psf(&p, cfg)?;
    let spectral = otf(&psf, cfg)?;
    let metrics = OpticalMetrics {
        mtf_half_nyquist: mtf_at_half_nyquist(&spectral, cfg)?,
        strehl: strehl(&spectral, reference)?,
        oig: oig(&spectral, reference)?,
    };
    let mtf_monotone = mtf_is_monotone(&spectral);
    Ok(SystemEvaluation {
        psf,
        spectral,
        metrics,
        mtf_monotone,
    })
}

/// Evaluates one aberration state, computing the diffraction-limited
/// reference internally.
pub fn evaluate_system(alpha: &ZernikeVector, cfg: &OpticalConfig) -> Result<SystemEvaluation> {
    let reference = diffraction_limited(cfg)?;
    evaluate_with_reference(alpha, cfg, &reference)
}

/// Degrades an image by linear convolution with the PSF (frequency-domain
/// product over a reflect-padded field), clipping the result to `[0, 1]`.
pub fn degrade_image(img: &Array2<f64>, psf: &Psf) -> Result<Array2<f64>> {
    if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("image values must lie in [0, 1]".to_string()));
    }
    let (h, w) = img.dim();
    let kernel = effective_kernel(psf, h.min(w))?;
    let k = kernel.nrows();
    let half = k / 2;
    if k == 1 {
        // Delta kernel: identity.
        return Ok(img.clone());
    }

    // Reflect-pad by the kernel half-width.
    let ph = h + 2 * half;
    let pw = w + 2 * half;
    let mut padded = Array2::zeros((ph, pw));
    for i in 0..ph {
        for j in 0..pw {
            padded[[i, j]] = img[[reflect_index(i, half, h), reflect_index(j, half, w)]];
        }
    }

    // Linear convolution sized to avoid circular wrap.
    let sy = (ph + k - 1).next_power_of_two();
    let sx = (pw + k - 1).next_power_of_two();
    let s = sy.max(sx);
    let mut fa: Array2<Complex64> = Array2::zeros((s, s));
    let mut fb: Array2<Complex64> = Array2::zeros((s, s));
    for i in 0..ph {
        for j in 0..pw {
            fa[[i, j]] = Complex64::new(padded[[i, j]], 0.0);
        }
    }
    for i in 0..k {
        for j in 0..k {
            fb[[i, j]] = Complex64::new(kernel[[i, j]], 0.0);
        }
    }
    fft2d(&mut fa, false);
    fft2d(&mut fb, false);
    for (a, b) in fa.iter_mut().zip(fb.iter()) {
        *a *= *b;
    }
    fft2d(&mut fa, true);

    // Kernel center sits at (half, half), and the image starts at (half, half)
    // inside the padded field, so the aligned output begins at (2·half, 2·half).
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = fa[[i + 2 * half, j + 2 * half]].re.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Flux fraction that defines the blur core; the core must fit inside the
/// image or the convolution is meaningless.
const KERNEL_CORE_FLUX: f64 = 0.9;
/// Flux fraction the crop window aims for. Diffraction tails decay too
/// slowly (ring energy ~ 1/r²) for a tighter target; the kernel is
/// renormalized to unit sum so flux stays exact.
const KERNEL_TARGET_FLUX: f64 = 0.999;

/// Crops the PSF to a centered odd window: the smallest window holding the
/// target flux, clamped to `limit`. Errors when even the blur core
/// (`KERNEL_CORE_FLUX`) does not fit within `limit`.
fn effective_kernel(psf: &Psf, limit: usize) -> Result<Array2<f64>> {
    let m = psf.grid.nrows();
    let c = m / 2;
    let total: f64 = psf.grid.iter().sum();
    let max_half = c.min(m - 1 - c);

    // Incremental centered-window sums: window(h) = window(h-1) + ring(h).
    let mut core_half = None;
    let mut target_half = None;
    let mut acc = 0.0;
    for half in 0..=max_half {
        if half == 0 {
            acc = psf.grid[[c, c]];
        } else {
            let (lo, hi) = (c - half, c + half);
            for j in lo..=hi {
                acc += psf.grid[[lo, j]] + psf.grid[[hi, j]];
            }
            for i in (lo + 1)..hi {
                acc += psf.grid[[i, lo]] + psf.grid[[i, hi]];
            }
        }
        if core_half.is_none() && acc >= total * KERNEL_CORE_FLUX {
            core_half = Some(half);
        }
        if acc >= total * KERNEL_TARGET_FLUX {
            target_half = Some(half);
            break;
        }
    }
    let core = 2 * core_half.unwrap_or(max_half) + 1;
    if core > limit {
        return Err(Error::degenerate(format!(
            "psf support {core} exceeds image extent {limit}"
        )));
    }
    let clamp_half = (limit - 1) / 2;
    let half = target_half.unwrap_or(max_half).min(clamp_half);

    let k = 2 * half + 1;
    let mut kernel = Array2::zeros((k, k));
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            kernel[[i, j]] = psf.grid[[c - half + i, c - half + j]];
            s += kernel[[i, j]];
        }
    }
    Ok(kernel.mapv(|v| v / s))
}

/// Maps a padded index back into `[0, len)` with boundary reflection.
fn reflect_index(i: usize, pad: usize, len: usize) -> usize {
    let mut x = i as i64 - pad as i64;
    let n = len as i64;
    loop {
        if x < 0 {
            x = -x - 1;
        } else if x >= n {
            x = 2 * n - 1 - x;
        } else {
            return x as usize;
        }
    }
}

/// In-place 2-D FFT (rows then columns). `inverse` applies 1/N² scaling.
fn fft2d(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    let mut scratch = vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("contiguous row");
        row_fft.process_with_scratch(slice, &mut scratch);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::default(); h];
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex64::default());
    for j in 0..w {
        for i in 0..h {
            col[i] = data[[i, j]];
        }
        col_fft.process_with_scratch(&mut col, &mut scratch);
        for i in 0..h {
            data[[i, j]] = col[i];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        data.mapv_inplace(|c| c * scale);
    }
}

/// Moves DC from index 0 to the array center.
fn fftshift<T: Copy + Default>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    let mut out = Array2::default((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[(i + h / 2) % h, (j + w / 2) % w]] = data[[i, j]];
        }
    }
    out
}

/// Inverse of [`fftshift`] (identical for even sizes).
fn ifftshift<T: Copy + Default>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    let mut out = Array2::default((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = data[[(i + h / 2) % h, (j + w / 2) % w]];
        }
    }
    out
}
