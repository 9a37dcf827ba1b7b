//! Orthonormal Zernike polynomials and wavefront aberration maps.
//!
//! Polynomials follow the OSA/ANSI single-index scheme and are normalized
//! to unit norm under the area-averaged inner product over the unit disk,
//! so that the expansion coefficient of a wavefront along `Z_n` is exactly
//! the inner product of the wavefront with `Z_n`. Under this convention
//! index 3 is oblique astigmatism `√6 ρ² sin 2φ`, index 4 is defocus
//! `√3 (2ρ² − 1)`, and index 5 is orthogonal astigmatism `√6 ρ² cos 2φ`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aberration coefficients in waves, keyed by OSA/ANSI single index.
///
/// Indices are strictly increasing; absent indices are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ZernikeVector {
    coefficients: Vec<(u32, f64)>,
}

impl ZernikeVector {
    /// Builds a vector from `(osa_index, alpha_waves)` pairs.
    ///
    /// Pairs must be sorted by strictly increasing index.
    pub fn new(coefficients: Vec<(u32, f64)>) -> Result<Self> {
        for pair in coefficients.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::invalid(format!(
                    "osa indices must be strictly increasing, got {} after {}",
                    pair[1].0, pair[0].0
                )));
            }
        }
        if let Some((_, a)) = coefficients.iter().find(|(_, a)| !a.is_finite()) {
            return Err(Error::invalid(format!("non-finite coefficient {a}")));
        }
        Ok(Self { coefficients })
    }

    /// The second-radial-order vector `(α₃, α₄, α₅)` used for augmentation.
    pub fn second_order(a3: f64, a4: f64, a5: f64) -> Self {
        Self {
            coefficients: vec![(3, a3), (4, a4), (5, a5)],
        }
    }

    pub fn zero() -> Self {
        Self {
            coefficients: Vec::new(),
        }
    }

    /// Coefficient at `osa_index`, zero when absent.
    pub fn get(&self, osa_index: u32) -> f64 {
        self.coefficients
            .iter()
            .find(|(j, _)| *j == osa_index)
            .map(|(_, a)| *a)
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.coefficients.iter().copied()
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients.iter().all(|(_, a)| *a == 0.0)
    }

    /// The `(α₃, α₄, α₅)` triple, zeros for absent indices.
    pub fn second_order_triple(&self) -> [f64; 3] {
        [self.get(3), self.get(4), self.get(5)]
    }

    /// Root-mean-square wavefront error in waves (valid because the basis
    /// is orthonormal: the RMS is the Euclidean norm of the non-piston
    /// coefficients).
    pub fn rms(&self) -> f64 {
        self.coefficients
            .iter()
            .filter(|(j, _)| *j > 0)
            .map(|(_, a)| a * a)
            .sum::<f64>()
            .sqrt()
    }
}

impl std::ops::Add for &ZernikeVector {
    type Output = ZernikeVector;

    fn add(self, rhs: &ZernikeVector) -> ZernikeVector {
        let mut merged: Vec<(u32, f64)> = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.coefficients.len() || j < rhs.coefficients.len() {
            let a = self.coefficients.get(i);
            let b = rhs.coefficients.get(j);
            match (a, b) {
                (Some(&(ja, va)), Some(&(jb, vb))) if ja == jb => {
                    merged.push((ja, va + vb));
                    i += 1;
                    j += 1;
                }
                (Some(&(ja, va)), Some(&(jb, _))) if ja < jb => {
                    merged.push((ja, va));
                    i += 1;
                }
                (Some(_), Some(&(jb, vb))) => {
                    merged.push((jb, vb));
                    j += 1;
                }
                (Some(&(ja, va)), None) => {
                    merged.push((ja, va));
                    i += 1;
                }
                (None, Some(&(jb, vb))) => {
                    merged.push((jb, vb));
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        ZernikeVector {
            coefficients: merged,
        }
    }
}

/// Wire form: `{"osa": [3, 4, 5], "alpha_waves": [a3, a4, a5]}`.
#[derive(Serialize, Deserialize)]
struct ZernikeWire {
    osa: Vec<u32>,
    alpha_waves: Vec<f64>,
}

impl Serialize for ZernikeVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = ZernikeWire {
            osa: self.coefficients.iter().map(|(j, _)| *j).collect(),
            alpha_waves: self.coefficients.iter().map(|(_, a)| *a).collect(),
        };
        wire.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ZernikeVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = ZernikeWire::deserialize(deserializer)?;
        if wire.osa.len() != wire.alpha_waves.len() {
            return Err(serde::de::Error::custom("osa and alpha_waves length mismatch"));
        }
        ZernikeVector::new(wire.osa.into_iter().zip(wire.alpha_waves).collect())
            .map_err(serde::de::Error::custom)
    }
}

/// Optical path difference over the unit pupil, in waves.
#[derive(Debug, Clone)]
pub struct WavefrontMap {
    /// `n × n` OPD samples; exactly zero outside the pupil mask.
    pub grid: Array2<f64>,
    /// Inscribed-disk mask `ρ ≤ 1` at pixel centers.
    pub mask: Array2<bool>,
    pub n: usize,
}

impl WavefrontMap {
    /// Projects the map onto `Z_{osa_index}` with the area-averaged inner
    /// product over the mask; recovers the expansion coefficient.
    pub fn project(&self, osa_index: i64) -> Result<f64> {
        let n = self.n;
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                if self.mask[[i, j]] {
                    let (rho, phi) = pupil_coords(i, j, n);
                    acc += self.grid[[i, j]] * zernike_eval(osa_index, rho.min(1.0), phi)?;
                    count += 1;
                }
            }
        }
        Ok(acc / count as f64)
    }
}

/// Pixel-center pupil coordinates for cell `(i, j)` of an `n × n` grid.
fn pupil_coords(i: usize, j: usize, n: usize) -> (f64, f64) {
    let x = 2.0 * (j as f64 + 0.5) / n as f64 - 1.0;
    let y = 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    (x.hypot(y), y.atan2(x))
}

/// OSA single index to `(radial order n, azimuthal frequency m)`.
fn osa_to_nm(j: u32) -> (u32, i32) {
    let mut n = 0u32;
    while n * (n + 3) / 2 < j {
        n += 1;
    }
    let m = 2 * j as i32 - (n * (n + 2)) as i32;
    (n, m)
}

fn factorial(k: u32) -> f64 {
    (1..=k as u64).product::<u64>() as f64
}

/// Radial polynomial `R_n^{|m|}(ρ)`.
fn radial(n: u32, m_abs: u32, rho: f64) -> f64 {
    let mut value = 0.0;
    for k in 0..=(n - m_abs) / 2 {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let num = factorial(n - k);
        let den = factorial(k) * factorial((n + m_abs) / 2 - k) * factorial((n - m_abs) / 2 - k);
        value += sign * num / den * rho.powi((n - 2 * k) as i32);
    }
    value
}

/// Evaluates the unit-norm Zernike polynomial `Z_j` at polar pupil
/// coordinates `(ρ, φ)`.
///
/// Normalization makes the basis orthonormal under the area-averaged
/// inner product over the unit disk, so piston is identically 1 and
/// defocus is `√3 (2ρ² − 1)`.
pub fn zernike_eval(osa_index: i64, rho: f64, phi: f64) -> Result<f64> {
    if osa_index < 0 {
        return Err(Error::invalid(format!("negative osa index {osa_index}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho {rho} outside [0, 1]")));
    }
    let (n, m) = osa_to_nm(osa_index as u32);
    let m_abs = m.unsigned_abs();
    let norm = if m == 0 {
        ((n + 1) as f64).sqrt()
    } else {
        (2.0 * (n + 1) as f64).sqrt()
    };
    let angular = match m.cmp(&0) {
        std::cmp::Ordering::Greater => (m_abs as f64 * phi).cos(),
        std::cmp::Ordering::Less => (m_abs as f64 * phi).sin(),
        std::cmp::Ordering::Equal => 1.0,
    };
    Ok(norm * radial(n, m_abs, rho) * angular)
}

/// Synthesizes the wavefront aberration map `W = Σ αₙ Zₙ` on an `n × n`
/// grid with the inscribed-disk mask.
pub fn wavefront_map(alpha: &ZernikeVector, n: usize) -> Result<WavefrontMap> {
    if n < 16 {
        return Err(Error::invalid(format!("grid size {n} below minimum 16")));
    }
    let mut grid = Array2::zeros((n, n));
    let mut mask = Array2::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..n {
            let (rho, phi) = pupil_coords(i, j, n);
            if rho <= 1.0 {
                mask[[i, j]] = true;
                let mut w = 0.0;
                for (index, a) in alpha.iter() {
                    if a != 0.0 {
                        w += a * zernike_eval(index as i64, rho, phi)?;
                    }
                }
                grid[[i, j]] = w;
            }
        }
    }
    Ok(WavefrontMap { grid, mask, n })
}

/// Draws `(α₃, α₄, α₅)` independently and uniformly from
/// `[-half_range, +half_range]` waves. Deterministic in the seed.
pub fn sample_zernike(rng_seed: u64, half_range: f64) -> Result<ZernikeVector> {
    if half_range < 0.0 || !half_range.is_finite() {
        return Err(Error::invalid(format!("half_range {half_range} must be ≥ 0")));
    }
    if half_range == 0.0 {
        return Ok(ZernikeVector::second_order(0.0, 0.0, 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = || rng.gen_range(-half_range..=half_range);
    let a3 = draw();
    let a4 = draw();
    let a5 = draw();
    Ok(ZernikeVector::second_order(a3, a4, a5))
}
