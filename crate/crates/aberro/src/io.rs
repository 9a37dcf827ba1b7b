//! Bit-exact file formats and the synthetic scene/logit generator.
//!
//! ## TNSR container
//!
//! ```text
//! magic   4 bytes  "TNSR"
//! version u16 LE   1
//! dtype   u8       1 = float32, 2 = int32, 3 = uint8
//! rank    u8
//! dims    rank × u64 LE
//! payload row-major, little-endian
//! ```
//!
//! ## Synthetic instances
//!
//! The generator stands in for a trained segmentation network. Scenes are
//! Voronoi label maps; the per-pixel logits are built so that the instance
//! is *exactly* calibrated after dividing by a known temperature
//! `t_true = 1 + 3·(1 − Strehl(α))`:
//!
//! 1. per pixel draw a raw confidence `q ~ U(q_lo, q_hi)` and set the
//!    logits to `ln p` with `p = q` on the predicted class and
//!    `(1−q)/(C−1)` elsewhere,
//! 2. let `q_t` be the confidence that temperature scaling by `t_true`
//!    assigns to the same pixel; draw `correct ~ Bernoulli(q_t)` and make
//!    the predicted class the ground truth when correct, else a uniformly
//!    random other class.
//!
//! After dividing by `t_true`, every pixel's confidence equals its
//! conditional accuracy and the wrong-class mass is uniform, so the
//! instance is fully calibrated there: `true_optimal_t = t_true` exactly,
//! anchored at 1 for zero aberrations and monotone in the blur. The
//! marginal logit distribution is the same for every `t_true` — the
//! miscalibration lives only in the correctness pattern — so the Zernike
//! vector is informative for calibration by construction, which is what
//! the PIPTS-versus-PTS comparison relies on.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{LabelMap, LogitTensor};
use crate::error::{Error, Result};
use crate::optics::{degrade_image, diffraction_limited, evaluate_with_reference, OpticalConfig};
use crate::zernike::{sample_zernike, ZernikeVector};

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u16 = 1;

/// In-memory tensor matching the TNSR dtype codes.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32 { dims: Vec<u64>, data: Vec<f32> },
    I32 { dims: Vec<u64>, data: Vec<i32> },
    U8 { dims: Vec<u64>, data: Vec<u8> },
}

impl Tensor {
    pub fn dims(&self) -> &[u64] {
        match self {
            Tensor::F32 { dims, .. } | Tensor::I32 { dims, .. } | Tensor::U8 { dims, .. } => dims,
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32 { .. } => 1,
            Tensor::I32 { .. } => 2,
            Tensor::U8 { .. } => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Tensor::F32 { data, .. } => data.len(),
            Tensor::I32 { data, .. } => data.len(),
            Tensor::U8 { data, .. } => data.len(),
        }
    }

    fn check(&self) -> Result<()> {
        let expect: u64 = self.dims().iter().product();
        if expect != self.len() as u64 {
            return Err(Error::invalid(format!(
                "payload length {} does not match dims {:?}",
                self.len(),
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Serializes a tensor to the TNSR byte layout.
pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    t.check()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype_code());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t {
        Tensor::F32 { data, .. } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::I32 { data, .. } => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Tensor::U8 { data, .. } => out.extend_from_slice(data),
    }
    Ok(out)
}

/// Parses the TNSR byte layout; errors carry the byte offset of the fault.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    let rank = bytes[7] as usize;
    let mut offset = 8usize;
    if bytes.len() < offset + 8 * rank {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated dims: need {} bytes", 8 * rank),
        ));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(u64::from_le_bytes(
            bytes[offset..offset + 8].try_into().unwrap(),
        ));
        offset += 8;
    }
    let count: u64 = dims.iter().product();
    let elem = match dtype {
        1 | 2 => 4usize,
        3 => 1,
        _ => return Err(Error::format(6, format!("unknown dtype code {dtype}"))),
    };
    let need = count as usize * elem;
    let have = bytes.len() - offset;
    if have != need {
        return Err(Error::format(
            offset as u64,
            format!("payload length {have}, expected {need}"),
        ));
    }
    let payload = &bytes[offset..];
    Ok(match dtype {
        1 => Tensor::F32 {
            dims,
            data: payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
        2 => Tensor::I32 {
            dims,
            data: payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
        _ => Tensor::U8 {
            dims,
            data: payload.to_vec(),
        },
    })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    tensor_from_bytes(&bytes)
}

/// `(h, w, c)` float32 tensor from a logit array (f64 narrowed to f32).
pub fn logits_to_tensor(l: &LogitTensor) -> Tensor {
    let (h, w, c) = l.data.dim();
    Tensor::F32 {
        dims: vec![h as u64, w as u64, c as u64],
        data: l.data.iter().map(|&v| v as f32).collect(),
    }
}

pub fn tensor_to_logits(t: &Tensor) -> Result<LogitTensor> {
    let Tensor::F32 { dims, data } = t else {
        return Err(Error::invalid("logits tensor must be float32".to_string()));
    };
    if dims.len() != 3 {
        return Err(Error::invalid(format!("logits need rank 3, got {}", dims.len())));
    }
    let (h, w, c) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let arr = Array3::from_shape_vec((h, w, c), data.iter().map(|&v| v as f64).collect())
        .map_err(|e| Error::invalid(e.to_string()))?;
    LogitTensor::new(arr)
}

pub fn labels_to_tensor(l: &LabelMap) -> Tensor {
    let (h, w) = l.data.dim();
    Tensor::I32 {
        dims: vec![h as u64, w as u64],
        data: l.data.iter().copied().collect(),
    }
}

pub fn tensor_to_labels(t: &Tensor, ignore_id: Option<i32>) -> Result<LabelMap> {
    let Tensor::I32 { dims, data } = t else {
        return Err(Error::invalid("label tensor must be int32".to_string()));
    };
    if dims.len() != 2 {
        return Err(Error::invalid(format!("labels need rank 2, got {}", dims.len())));
    }
    let arr = Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data.clone())
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(LabelMap::new(arr, ignore_id))
}

pub fn image_to_tensor(img: &Array2<f64>) -> Tensor {
    let (h, w) = img.dim();
    Tensor::F32 {
        dims: vec![h as u64, w as u64],
        data: img.iter().map(|&v| v as f32).collect(),
    }
}

pub fn tensor_to_image(t: &Tensor) -> Result<Array2<f64>> {
    let Tensor::F32 { dims, data } = t else {
        return Err(Error::invalid("image tensor must be float32".to_string()));
    };
    if dims.len() != 2 {
        return Err(Error::invalid(format!("images need rank 2, got {}", dims.len())));
    }
    Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data.iter().map(|&v| v as f64).collect())
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Reads a binary PGM (P5) image into `[0, 1]` grays. 8- and 16-bit
/// (big-endian, per the format) depths are supported.
pub fn read_pgm(path: &Path) -> Result<Array2<f64>> {
    read_pgm_with_depth(path).map(|(img, _)| img)
}

/// [`read_pgm`] returning the bit depth (8 or 16) alongside the image.
pub fn read_pgm_with_depth(path: &Path) -> Result<(Array2<f64>, u8)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;

    // Header tokenizer skipping whitespace and '#' comments.
    fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(*pos as u64, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    }
    let mut pos = 0usize;
    if next_token(&bytes, &mut pos)? != "P5" {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    let w: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format(pos as u64, "bad width"))?;
    let h: usize = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format(pos as u64, "bad height"))?;
    let maxval: u32 = next_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::format(pos as u64, "bad maxval"))?;
    pos += 1; // single whitespace after maxval
    let data = &bytes[pos..];
    let mut img = Array2::zeros((h, w));
    if maxval < 256 {
        if data.len() < h * w {
            return Err(Error::format(pos as u64, "truncated 8-bit payload"));
        }
        for i in 0..h {
            for j in 0..w {
                img[[i, j]] = data[i * w + j] as f64 / maxval as f64;
            }
        }
    } else if maxval < 65536 {
        if data.len() < 2 * h * w {
            return Err(Error::format(pos as u64, "truncated 16-bit payload"));
        }
        for i in 0..h {
            for j in 0..w {
                let k = 2 * (i * w + j);
                let v = u16::from_be_bytes([data[k], data[k + 1]]);
                img[[i, j]] = v as f64 / maxval as f64;
            }
        }
    } else {
        return Err(Error::format(pos as u64, format!("invalid maxval {maxval}")));
    }
    Ok((img, if maxval < 256 { 8 } else { 16 }))
}

/// Writes a `[0, 1]` image as binary PGM with the requested bit depth
/// (8 or 16; 16-bit samples are big-endian).
pub fn write_pgm(path: &Path, img: &Array2<f64>, bits: u8) -> Result<()> {
    let (h, w) = img.dim();
    let maxval: u32 = match bits {
        8 => 255,
        16 => 65535,
        _ => return Err(Error::invalid(format!("unsupported bit depth {bits}"))),
    };
    let mut out = Vec::new();
    out.extend_from_slice(format!("P5\n{w} {h}\n{maxval}\n").as_bytes());
    for v in img.iter() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if bits == 8 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// One generated scene with everything a calibrator needs.
#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub image: Array2<f64>,
    pub labels: LabelMap,
    pub logits: LogitTensor,
    pub alpha: ZernikeVector,
    /// The temperature that exactly re-calibrates the logits.
    pub true_optimal_t: f64,
}

/// How the generator couples the miscalibration temperature to the optics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureCoupling {
    /// `t_true = 1 + 3·(1 − Strehl)`: the Zernike vector is informative.
    StrehlCoupled,
    /// `t_true = 1` regardless of aberrations: the control generator.
    Unit,
}

/// Slope of the Strehl coupling in the generator law.
pub const COUPLING_SLOPE: f64 = 3.0;

/// Scene resolution of generated instances.
pub const SCENE_HW: usize = 64;

/// Confidence after temperature scaling: the softmax maximum of
/// `ln(p)/t` for the two-level distribution `(q, (1−q)/(C−1), ...)`.
fn scaled_confidence(q: f64, n_classes: usize, t: f64) -> f64 {
    let other = (1.0 - q) / (n_classes - 1) as f64;
    let a = q.powf(1.0 / t);
    let b = other.powf(1.0 / t);
    a / (a + (n_classes - 1) as f64 * b)
}

/// Builds logits that become exactly calibrated after scaling by `t_true`.
///
/// The logit values themselves carry no trace of `t_true` (their marginal
/// distribution is fixed by the confidence range); the miscalibration is
/// encoded in which pixels are correct.
pub fn calibrated_logits_for_labels(
    labels: &LabelMap,
    n_classes: usize,
    q_range: (f64, f64),
    t_true: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LogitTensor> {
    let (h, w) = labels.data.dim();
    if n_classes < 2 {
        return Err(Error::invalid("need ≥ 2 classes".to_string()));
    }
    if !(t_true > 0.0) || !t_true.is_finite() {
        return Err(Error::invalid(format!("t_true {t_true} must be > 0")));
    }
    let (q_lo, q_hi) = q_range;
    if !(1.0 / n_classes as f64 <= q_lo && q_lo < q_hi && q_hi < 1.0) {
        return Err(Error::invalid(format!(
            "invalid confidence range [{q_lo}, {q_hi}]"
        )));
    }
    let mut data = Array3::zeros((h, w, n_classes));
    for i in 0..h {
        for j in 0..w {
            let gt = labels.data[[i, j]];
            let q: f64 = rng.gen_range(q_lo..=q_hi);
            let correct = rng.gen_bool(scaled_confidence(q, n_classes, t_true));
            let pred = if correct || labels.is_ignored(gt) {
                gt.max(0) as usize % n_classes
            } else {
                let offset = rng.gen_range(1..n_classes);
                (gt as usize + offset) % n_classes
            };
            let p_other = (1.0 - q) / (n_classes - 1) as f64;
            for k in 0..n_classes {
                let p = if k == pred { q } else { p_other };
                data[[i, j, k]] = p.ln();
            }
        }
    }
    LogitTensor::new(data)
}

/// Voronoi scene: `n_centers` random seeds with random classes; every pixel
/// takes the class of its nearest center.
fn voronoi_labels(hw: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let n_centers = 12;
    let centers: Vec<(f64, f64, i32)> = (0..n_centers)
        .map(|_| {
            (
                rng.gen_range(0.0..hw as f64),
                rng.gen_range(0.0..hw as f64),
                rng.gen_range(0..n_classes as i32),
            )
        })
        .collect();
    let data = Array2::from_shape_fn((hw, hw), |(i, j)| {
        centers
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - i as f64).powi(2) + (a.1 - j as f64).powi(2);
                let db = (b.0 - i as f64).powi(2) + (b.1 - j as f64).powi(2);
                da.total_cmp(&db)
            })
            .unwrap()
            .2
    });
    LabelMap::new(data, None)
}

/// Generates `n_instances` synthetic instances (see the module docs for the
/// generator law). Deterministic in `seed`.
pub fn synth_dataset(
    seed: u64,
    n_instances: usize,
    cfg: &OpticalConfig,
    half_range: f64,
) -> Result<Vec<SyntheticInstance>> {
    synth_dataset_with(seed, n_instances, cfg, half_range, TemperatureCoupling::StrehlCoupled)
}

/// [`synth_dataset`] with an explicit temperature coupling.
pub fn synth_dataset_with(
    seed: u64,
    n_instances: usize,
    cfg: &OpticalConfig,
    half_range: f64,
    coupling: TemperatureCoupling,
) -> Result<Vec<SyntheticInstance>> {
    if n_instances == 0 {
        return Err(Error::invalid("need at least one instance".to_string()));
    }
    let reference = diffraction_limited(cfg)?;
    // One class count per dataset: calibrator networks take a fixed
    // channel count, so instances of one corpus must agree on it.
    let n_classes = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_5E5).gen_range(4..=8usize);
    let mut out = Vec::with_capacity(n_instances);
    for idx in 0..n_instances {
        let inst_seed = seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);

        let alpha = sample_zernike(rng.gen(), half_range)?;
        let eval = evaluate_with_reference(&alpha, cfg, &reference)?;
        let t_true = match coupling {
            TemperatureCoupling::StrehlCoupled => {
                1.0 + COUPLING_SLOPE * (1.0 - eval.metrics.strehl.clamp(0.0, 1.0))
            }
            TemperatureCoupling::Unit => 1.0,
        };

        let labels = voronoi_labels(SCENE_HW, n_classes, &mut rng);

        // Per-instance confidence range decouples logit scale from t_true.
        let q_lo = rng.gen_range(0.55..0.75);
        let q_hi = rng.gen_range((q_lo + 0.1)..0.97);
        let logits =
            calibrated_logits_for_labels(&labels, n_classes, (q_lo, q_hi), t_true, &mut rng)?;

        // Scene image: per-class gray levels, blurred by the instance PSF.
        let scene = labels
            .data
            .mapv(|c| (c as f64 + 1.0) / (n_classes as f64 + 1.0));
        let image = degrade_image(&scene, &eval.psf)?;

        out.push(SyntheticInstance {
            image,
            labels,
            logits,
            alpha,
            true_optimal_t: t_true,
        });
    }
    Ok(out)
}

/// Dataset manifest entry with content hashes for integrity checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub id: usize,
    pub image: String,
    pub labels: String,
    pub logits: String,
    pub alpha: ZernikeVector,
    pub true_optimal_t: f64,
    pub sha256: ManifestHashes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHashes {
    pub image: String,
    pub labels: String,
    pub logits: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub seed: u64,
    pub half_range: f64,
    pub coupling: TemperatureCoupling,
    pub optics: OpticalConfig,
    pub instances: Vec<ManifestInstance>,
}

/// Hex-encoded SHA-256, the manifest/config integrity hash.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes instances as TNSR files plus `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    instances: &[SyntheticInstance],
    seed: u64,
    half_range: f64,
    coupling: TemperatureCoupling,
    cfg: &OpticalConfig,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(instances.len());
    for (id, inst) in instances.iter().enumerate() {
        let files = [
            (format!("{id:04}_image.tnsr"), tensor_to_bytes(&image_to_tensor(&inst.image))?),
            (format!("{id:04}_labels.tnsr"), tensor_to_bytes(&labels_to_tensor(&inst.labels))?),
            (format!("{id:04}_logits.tnsr"), tensor_to_bytes(&logits_to_tensor(&inst.logits))?),
        ];
        let mut hashes = Vec::with_capacity(3);
        for (name, bytes) in &files {
            fs::write(dir.join(name), bytes)?;
            hashes.push(sha256_hex(bytes));
        }
        entries.push(ManifestInstance {
            id,
            image: files[0].0.clone(),
            labels: files[1].0.clone(),
            logits: files[2].0.clone(),
            alpha: inst.alpha.clone(),
            true_optimal_t: inst.true_optimal_t,
            sha256: ManifestHashes {
                image: hashes[0].clone(),
                labels: hashes[1].clone(),
                logits: hashes[2].clone(),
            },
        });
    }
    let manifest = Manifest {
        schema: 1,
        seed,
        half_range,
        coupling,
        optics: *cfg,
        instances: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Reads a dataset back, verifying every content hash.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SyntheticInstance>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.schema != 1 {
        return Err(Error::invalid(format!(
            "unsupported manifest schema {}",
            manifest.schema
        )));
    }
    let mut instances = Vec::with_capacity(manifest.instances.len());
    for entry in &manifest.instances {
        let load = |name: &str, expect_hash: &str| -> Result<Vec<u8>> {
            let path: PathBuf = dir.join(name);
            let bytes = fs::read(&path)?;
            let actual = sha256_hex(&bytes);
            if actual != expect_hash {
                return Err(Error::invalid(format!(
                    "hash mismatch for {name}: manifest {expect_hash}, file {actual}"
                )));
            }
            Ok(bytes)
        };
        let image = tensor_to_image(&tensor_from_bytes(&load(&entry.image, &entry.sha256.image)?)?)?;
        let labels =
            tensor_to_labels(&tensor_from_bytes(&load(&entry.labels, &entry.sha256.labels)?)?, None)?;
        let logits =
            tensor_to_logits(&tensor_from_bytes(&load(&entry.logits, &entry.sha256.logits)?)?)?;
        instances.push(SyntheticInstance {
            image,
            labels,
            logits,
            alpha: entry.alpha.clone(),
            true_optimal_t: entry.true_optimal_t,
        });
    }
    Ok((manifest, instances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::mece;
    use approx::assert_abs_diff_eq;

    fn synth_cfg() -> OpticalConfig {
        OpticalConfig {
            grid_n: 64,
            pad_factor: 2,
            ..OpticalConfig::default()
        }
    }

    #[test]
    fn tensor_round_trip_f32() {
        let t = Tensor::F32 {
            dims: vec![2, 3],
            data: vec![1.0, -2.5, 3.25, 0.0, 5.5, -0.125],
        };
        let bytes = tensor_to_bytes(&t).unwrap();
        assert_eq!(&bytes[0..4], b"TNSR");
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_scalar_rank_zero() {
        let t = Tensor::I32 {
            dims: vec![],
            data: vec![42],
        };
        let back = tensor_from_bytes(&tensor_to_bytes(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_format_errors_carry_offsets() {
        let t = Tensor::U8 {
            dims: vec![4],
            data: vec![1, 2, 3, 4],
        };
        let mut bytes = tensor_to_bytes(&t).unwrap();

        // Truncated payload names expected vs actual length.
        bytes.pop();
        match tensor_from_bytes(&bytes) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("3") && message.contains("4"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }

        // Bad magic is reported at offset 0.
        let mut bad = tensor_to_bytes(&t).unwrap();
        bad[0] = b'X';
        match tensor_from_bytes(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        // Unknown dtype code.
        let mut bad = tensor_to_bytes(&t).unwrap();
        bad[6] = 9;
        assert!(matches!(tensor_from_bytes(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_round_trip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((9, 7), |(i, j)| ((i * 7 + j) % 64) as f64 / 63.0);
        for bits in [8u8, 16] {
            let path = dir.path().join(format!("img{bits}.pgm"));
            write_pgm(&path, &img, bits).unwrap();
            let back = read_pgm(&path).unwrap();
            assert_eq!(back.dim(), img.dim());
            let tol = 1.0 / if bits == 8 { 255.0 } else { 65535.0 };
            for (a, b) in back.iter().zip(img.iter()) {
                assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# comment line\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.dim(), (2, 2));
        assert_abs_diff_eq!(img[[0, 1]], 128.0 / 255.0, epsilon = 1e-12);
    }

    #[test]
    fn synth_is_deterministic_and_anchored() {
        let cfg = synth_cfg();
        let a = synth_dataset(42, 4, &cfg, 0.4).unwrap();
        let b = synth_dataset(42, 4, &cfg, 0.4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.logits.data, y.logits.data);
            assert_eq!(x.labels.data, y.labels.data);
            assert_eq!(x.image, y.image);
            assert_eq!(x.true_optimal_t, y.true_optimal_t);
        }

        // Zero aberrations anchor t_true at 1.
        let zero = synth_dataset(7, 3, &cfg, 0.0).unwrap();
        for inst in &zero {
            assert!((inst.true_optimal_t - 1.0).abs() < 1e-6, "{}", inst.true_optimal_t);
        }
    }

    #[test]
    fn synth_t_true_monotone_in_defocus() {
        // The generator law is monotone in 1 − Strehl; check it through a
        // pure-defocus sweep evaluated with the generator's own optics.
        let cfg = synth_cfg();
        let reference = diffraction_limited(&cfg).unwrap();
        let mut last = 0.0;
        for a4 in [0.0, 0.1, 0.2, 0.3] {
            let alpha = ZernikeVector::new(vec![(4, a4)]).unwrap();
            let eval = evaluate_with_reference(&alpha, &cfg, &reference).unwrap();
            let t_true = 1.0 + COUPLING_SLOPE * (1.0 - eval.metrics.strehl.clamp(0.0, 1.0));
            assert!(t_true > last, "t_true {t_true} at α₄ = {a4}");
            last = t_true;
        }
    }

    #[test]
    fn synth_instances_are_calibrated_at_true_t() {
        let cfg = synth_cfg();
        let instances = synth_dataset(3, 6, &cfg, 0.4).unwrap();
        // Pool instances by stacking vertically: per-class binomial noise
        // drops with the pooled pixel count.
        for inst in &instances {
            let m_true = mece(&inst.logits, &inst.labels, inst.true_optimal_t, 10).unwrap();
            let m_unit = mece(&inst.logits, &inst.labels, 1.0, 10).unwrap();
            assert!(m_true < 0.06, "mECE at t_true: {m_true}");
            if inst.true_optimal_t > 1.3 {
                assert!(m_true < m_unit, "calibration should improve: {m_true} vs {m_unit}");
            }
        }
    }

    #[test]
    fn control_coupling_keeps_unit_temperature() {
        let cfg = synth_cfg();
        let instances =
            synth_dataset_with(11, 3, &cfg, 0.4, TemperatureCoupling::Unit).unwrap();
        for inst in &instances {
            assert_eq!(inst.true_optimal_t, 1.0);
        }
    }

    #[test]
    fn dataset_write_read_round_trip_with_hashes() {
        let cfg = synth_cfg();
        let dir = tempfile::tempdir().unwrap();
        let instances = synth_dataset(5, 3, &cfg, 0.3).unwrap();
        let manifest = write_dataset(
            dir.path(),
            &instances,
            5,
            0.3,
            TemperatureCoupling::StrehlCoupled,
            &cfg,
        )
        .unwrap();
        assert_eq!(manifest.instances.len(), 3);

        let (manifest2, loaded) = read_dataset(dir.path()).unwrap();
        assert_eq!(manifest2.seed, 5);
        for (orig, back) in instances.iter().zip(&loaded) {
            assert_eq!(orig.labels.data, back.labels.data);
            // f32 round trip: equality within float32 resolution.
            for (a, b) in orig.logits.data.iter().zip(back.logits.data.iter()) {
                assert!((a - b).abs() <= a.abs().max(1.0) * 1e-6);
            }
            assert_eq!(orig.true_optimal_t, back.true_optimal_t);
        }

        // Corruption is caught by the manifest hash.
        let victim = dir.path().join("0001_logits.tnsr");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        fs::write(&victim, bytes).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn two_seeds_differ() {
        let cfg = synth_cfg();
        let a = synth_dataset(1, 2, &cfg, 0.4).unwrap();
        let b = synth_dataset(2, 2, &cfg, 0.4).unwrap();
        assert_ne!(a[0].logits.data, b[0].logits.data);
    }
}
