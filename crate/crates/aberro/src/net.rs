//! The temperature network behind PTS and PIPTS: a strided-convolution
//! encoder over downsampled logits, a small fully-connected head, and a
//! softplus output keeping the predicted temperature strictly positive.
//!
//! Forward and reverse passes are written out by hand; the reverse pass
//! returns `∂T/∂θ` as a flat gradient aligned with the parameter vector.
//! Everything is `f64` and deterministic given the init seed.
//!
//! Architecture (desk scale): three 3×3 stride-2 conv blocks with widths
//! 16/32/64 over a 32×32×C input, GELU activations, global average
//! pooling, then `fc(64 + alpha_dim → 64) → GELU → fc(64 → 1) → softplus`.
//! PIPTS concatenates the 3-component Zernike vector after the pooled
//! encoder (keeping the physical prior a sizable fraction of the head
//! input); PTS is the same network with `alpha_dim = 0`.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed encoder input resolution.
pub const INPUT_HW: usize = 32;
/// Encoder channel widths.
const WIDTHS: [usize; 3] = [16, 32, 64];
/// Head hidden width.
const HIDDEN: usize = 64;

/// tanh-form GELU `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/π)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Exact derivative of the tanh-form GELU.
fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

/// Numerically stable `softplus(x) = ln(1 + eˣ)`.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Parameter layout of one conv layer within the flat vector.
#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    w_off: usize,
    b_off: usize,
    c_in: usize,
    c_out: usize,
    in_hw: usize,
    out_hw: usize,
}

impl ConvSpec {
    fn w_index(&self, ky: usize, kx: usize, ic: usize, oc: usize) -> usize {
        self.w_off + ((ky * 3 + kx) * self.c_in + ic) * self.c_out + oc
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    conv: [ConvSpec; 3],
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    flat_dim: usize,
    head_in: usize,
    total: usize,
}

impl Layout {
    fn new(channels: usize, alpha_dim: usize) -> Self {
        let mut off = 0;
        let mut conv = [ConvSpec {
            w_off: 0,
            b_off: 0,
            c_in: 0,
            c_out: 0,
            in_hw: 0,
            out_hw: 0,
        }; 3];
        let mut c_in = channels;
        let mut hw = INPUT_HW;
        for (i, &c_out) in WIDTHS.iter().enumerate() {
            let w_off = off;
            off += 9 * c_in * c_out;
            let b_off = off;
            off += c_out;
            let out_hw = hw / 2;
            conv[i] = ConvSpec {
                w_off,
                b_off,
                c_in,
                c_out,
                in_hw: hw,
                out_hw,
            };
            c_in = c_out;
            hw = out_hw;
        }
        // Global average pooling collapses the spatial grid.
        let flat_dim = c_in;
        let head_in = flat_dim + alpha_dim;
        let _ = hw;
        let fc1_w = off;
        off += head_in * HIDDEN;
        let fc1_b = off;
        off += HIDDEN;
        let fc2_w = off;
        off += HIDDEN;
        let fc2_b = off;
        off += 1;
        Self {
            conv,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            flat_dim,
            head_in,
            total: off,
        }
    }
}

/// The temperature network. `alpha_dim = 0` is the PTS trunk; `alpha_dim = 3`
/// adds the Zernike-prior input slot of PIPTS.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TempNet {
    pub channels: usize,
    pub alpha_dim: usize,
    pub params: Vec<f64>,
}

/// Intermediate activations kept for the reverse pass.
pub struct Trace {
    input: Array3<f64>,
    // Pre-activation and activated outputs of each conv block.
    conv_z: Vec<Array3<f64>>,
    conv_a: Vec<Array3<f64>>,
    head_x: Vec<f64>,
    z_hidden: Vec<f64>,
    a_hidden: Vec<f64>,
    z_out: f64,
}

impl TempNet {
    /// Glorot-uniform initialization, deterministic in the seed.
    pub fn new(channels: usize, alpha_dim: usize, seed: u64) -> Result<Self> {
        if channels < 2 {
            return Err(Error::invalid(format!("need ≥ 2 channels, got {channels}")));
        }
        let layout = Layout::new(channels, alpha_dim);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |w_off: usize, len: usize, fan_in: usize, fan_out: usize,
                        params: &mut Vec<f64>| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in params[w_off..w_off + len].iter_mut() {
                *p = rng.gen_range(-bound..=bound);
            }
        };
        for spec in layout.conv {
            init(
                spec.w_off,
                9 * spec.c_in * spec.c_out,
                9 * spec.c_in,
                spec.c_out,
                &mut params,
            );
        }
        init(
            layout.fc1_w,
            layout.head_in * HIDDEN,
            layout.head_in,
            HIDDEN,
            &mut params,
        );
        init(layout.fc2_w, HIDDEN, HIDDEN, 1, &mut params);
        Ok(Self {
            channels,
            alpha_dim,
            params,
        })
    }

    /// All-zero parameters; the forward pass then returns `softplus(0) = ln 2`.
    pub fn zeroed(channels: usize, alpha_dim: usize) -> Result<Self> {
        let mut net = Self::new(channels, alpha_dim, 0)?;
        net.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(net)
    }

    fn layout(&self) -> Layout {
        Layout::new(self.channels, self.alpha_dim)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sets the output bias so an otherwise-neutral head predicts `t`
    /// (softplus inverse), shortening the transient to the working range.
    pub fn warm_start_output(&mut self, t: f64) {
        let layout = self.layout();
        let z = if t > 30.0 { t } else { (t.exp() - 1.0).max(1e-12).ln() };
        self.params[layout.fc2_b] = z;
    }

    /// Zeroes the fc1 columns fed by the Zernike inputs; afterwards the
    /// forward pass is independent of `alpha` (the PTS reduction).
    pub fn zero_alpha_path(&mut self) {
        let layout = self.layout();
        for a in 0..self.alpha_dim {
            let row = layout.flat_dim + a;
            for h in 0..HIDDEN {
                self.params[layout.fc1_w + row * HIDDEN + h] = 0.0;
            }
        }
    }

    fn check_input(&self, input: &Array3<f64>, alpha: &[f64]) -> Result<()> {
        let (h, w, c) = input.dim();
        if h != INPUT_HW || w != INPUT_HW {
            return Err(Error::invalid(format!(
                "input resolution {h}×{w}, expected {INPUT_HW}×{INPUT_HW}"
            )));
        }
        if c != self.channels {
            return Err(Error::invalid(format!(
                "input channels {c}, expected {}",
                self.channels
            )));
        }
        if alpha.len() != self.alpha_dim {
            return Err(Error::invalid(format!(
                "alpha length {}, expected {}",
                alpha.len(),
                self.alpha_dim
            )));
        }
        Ok(())
    }

    /// Predicted temperature, strictly positive via softplus.
    pub fn forward(&self, input: &Array3<f64>, alpha: &[f64]) -> Result<f64> {
        self.forward_with_trace(input, alpha).map(|(t, _)| t)
    }

    /// Forward pass keeping activations for [`TempNet::backward`].
    pub fn forward_with_trace(&self, input: &Array3<f64>, alpha: &[f64]) -> Result<(f64, Trace)> {
        self.check_input(input, alpha)?;
        let layout = self.layout();
        let mut conv_z = Vec::with_capacity(3);
        let mut conv_a = Vec::with_capacity(3);
        let mut current = input.clone();
        for spec in layout.conv {
            let z = self.conv_forward(&current, spec);
            let a = z.mapv(gelu);
            conv_z.push(z);
            conv_a.push(a.clone());
            current = a;
        }
        // Global average pool over the last conv activations.
        let (ph, pw, pc) = current.dim();
        let mut head_x = vec![0.0; layout.head_in];
        for i in 0..ph {
            for j in 0..pw {
                for k in 0..pc {
                    head_x[k] += current[[i, j, k]] / (ph * pw) as f64;
                }
            }
        }
        head_x[pc..pc + alpha.len()].copy_from_slice(alpha);

        let mut z_hidden = vec![0.0; HIDDEN];
        for (i, &x) in head_x.iter().enumerate() {
            let row = layout.fc1_w + i * HIDDEN;
            for h in 0..HIDDEN {
                z_hidden[h] += self.params[row + h] * x;
            }
        }
        for h in 0..HIDDEN {
            z_hidden[h] += self.params[layout.fc1_b + h];
        }
        let a_hidden: Vec<f64> = z_hidden.iter().map(|&z| gelu(z)).collect();

        let mut z_out = self.params[layout.fc2_b];
        for h in 0..HIDDEN {
            z_out += self.params[layout.fc2_w + h] * a_hidden[h];
        }
        let t = softplus(z_out);
        Ok((
            t,
            Trace {
                input: input.clone(),
                conv_z,
                conv_a,
                head_x,
                z_hidden,
                a_hidden,
                z_out,
            },
        ))
    }

    /// Reverse pass: `upstream · ∂T/∂θ` as a flat gradient.
    pub fn backward(&self, trace: &Trace, upstream: f64) -> Vec<f64> {
        let layout = self.layout();
        let mut grad = vec![0.0; layout.total];

        // softplus output
        let g_out = upstream * sigmoid(trace.z_out);

        // fc2
        grad[layout.fc2_b] = g_out;
        let mut d_hidden = vec![0.0; HIDDEN];
        for h in 0..HIDDEN {
            grad[layout.fc2_w + h] = g_out * trace.a_hidden[h];
            d_hidden[h] = g_out * self.params[layout.fc2_w + h] * gelu_deriv(trace.z_hidden[h]);
        }

        // fc1
        let mut d_head = vec![0.0; layout.head_in];
        for (i, &x) in trace.head_x.iter().enumerate() {
            let row = layout.fc1_w + i * HIDDEN;
            let mut acc = 0.0;
            for h in 0..HIDDEN {
                grad[row + h] = d_hidden[h] * x;
                acc += d_hidden[h] * self.params[row + h];
            }
            d_head[i] = acc;
        }
        for h in 0..HIDDEN {
            grad[layout.fc1_b + h] = d_hidden[h];
        }

        // conv stack, last to first; the pooled gradient spreads evenly
        // over the spatial grid.
        let last = layout.conv[2];
        let cells = (last.out_hw * last.out_hw) as f64;
        let mut d_out = Array3::zeros((last.out_hw, last.out_hw, last.c_out));
        for i in 0..last.out_hw {
            for j in 0..last.out_hw {
                for k in 0..last.c_out {
                    d_out[[i, j, k]] = d_head[k] / cells;
                }
            }
        }
        for (idx, spec) in layout.conv.iter().enumerate().rev() {
            // Pre-activation gradient.
            let z = &trace.conv_z[idx];
            let mut d_z = d_out.clone();
            for (dz, zv) in d_z.iter_mut().zip(z.iter()) {
                *dz *= gelu_deriv(*zv);
            }
            let input = if idx == 0 {
                &trace.input
            } else {
                &trace.conv_a[idx - 1]
            };
            let d_in = self.conv_backward(input, &d_z, *spec, &mut grad, idx > 0);
            if idx > 0 {
                d_out = d_in;
            }
        }
        grad
    }

    /// 3×3 stride-2 pad-1 convolution.
    fn conv_forward(&self, input: &Array3<f64>, spec: ConvSpec) -> Array3<f64> {
        let n = spec.out_hw;
        let mut out = Array3::zeros((n, n, spec.c_out));
        for oy in 0..n {
            for ox in 0..n {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as i64 - 1;
                    if iy < 0 || iy >= spec.in_hw as i64 {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as i64 - 1;
                        if ix < 0 || ix >= spec.in_hw as i64 {
                            continue;
                        }
                        for ic in 0..spec.c_in {
                            let x = input[[iy as usize, ix as usize, ic]];
                            if x == 0.0 {
                                continue;
                            }
                            let w_base = spec.w_index(ky, kx, ic, 0);
                            for oc in 0..spec.c_out {
                                out[[oy, ox, oc]] += self.params[w_base + oc] * x;
                            }
                        }
                    }
                }
                for oc in 0..spec.c_out {
                    out[[oy, ox, oc]] += self.params[spec.b_off + oc];
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and (optionally) returns the
    /// input gradient.
    fn conv_backward(
        &self,
        input: &Array3<f64>,
        d_z: &Array3<f64>,
        spec: ConvSpec,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Array3<f64> {
        let n = spec.out_hw;
        let mut d_in = Array3::zeros(if need_input_grad {
            (spec.in_hw, spec.in_hw, spec.c_in)
        } else {
            (1, 1, 1)
        });
        for oy in 0..n {
            for ox in 0..n {
                for oc in 0..spec.c_out {
                    grad[spec.b_off + oc] += d_z[[oy, ox, oc]];
                }
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as i64 - 1;
                    if iy < 0 || iy >= spec.in_hw as i64 {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as i64 - 1;
                        if ix < 0 || ix >= spec.in_hw as i64 {
                            continue;
                        }
                        for ic in 0..spec.c_in {
                            let x = input[[iy as usize, ix as usize, ic]];
                            let w_base = spec.w_index(ky, kx, ic, 0);
                            let mut acc = 0.0;
                            for oc in 0..spec.c_out {
                                let dz = d_z[[oy, ox, oc]];
                                grad[w_base + oc] += dz * x;
                                acc += dz * self.params[w_base + oc];
                            }
                            if need_input_grad {
                                d_in[[iy as usize, ix as usize, ic]] += acc;
                            }
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Area-average pooling of an `(h, w, c)` tensor to `target × target`.
pub fn downsample_mean(data: &Array3<f64>, target: usize) -> Array3<f64> {
    let (h, w, c) = data.dim();
    let mut sums = Array3::<f64>::zeros((target, target, c));
    let mut counts = ndarray::Array2::<f64>::zeros((target, target));
    for i in 0..h {
        let ti = (i * target / h).min(target - 1);
        for j in 0..w {
            let tj = (j * target / w).min(target - 1);
            counts[[ti, tj]] += 1.0;
            for k in 0..c {
                sums[[ti, tj, k]] += data[[i, j, k]];
            }
        }
    }
    for i in 0..target {
        for j in 0..target {
            let n = counts[[i, j]].max(1.0);
            for k in 0..c {
                sums[[i, j, k]] /= n;
            }
        }
    }
    sums
}

/// Stochastic gradient descent with first/second-moment accumulators
/// (step 10⁻³, moments 0.9/0.999 by default).
#[derive(Debug, Clone)]
pub struct MomentSgd {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl MomentSgd {
    pub fn new(lr: f64, beta1: f64, beta2: f64, dim: usize) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_input(channels: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((INPUT_HW, INPUT_HW, channels), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn zero_network_outputs_ln_two() {
        let net = TempNet::zeroed(4, 0).unwrap();
        let t = net.forward(&random_input(4, 1), &[]).unwrap();
        assert_abs_diff_eq!(t, 2.0f64.ln(), epsilon = 1e-12);

        let net = TempNet::zeroed(4, 3).unwrap();
        let t = net.forward(&random_input(4, 2), &[0.5, -0.2, 0.9]).unwrap();
        assert_abs_diff_eq!(t, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn output_positive_and_finite_for_random_weights() {
        for seed in 0..1000 {
            let net = TempNet::new(3, 3, seed).unwrap();
            let t = net
                .forward(&random_input(3, seed + 5000), &[0.3, -0.8, 0.1])
                .unwrap();
            assert!(t.is_finite() && t > 0.0, "seed {seed}: t = {t}");
        }
    }

    #[test]
    fn forward_is_deterministic_in_seed() {
        let a = TempNet::new(5, 3, 42).unwrap();
        let b = TempNet::new(5, 3, 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = TempNet::new(5, 3, 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn input_validation() {
        let net = TempNet::new(4, 0, 1).unwrap();
        let bad_res = Array3::zeros((16, 16, 4));
        assert!(net.forward(&bad_res, &[]).is_err());
        let bad_c = Array3::zeros((INPUT_HW, INPUT_HW, 3));
        assert!(net.forward(&bad_c, &[]).is_err());
        assert!(net.forward(&random_input(4, 1), &[0.1]).is_err());
    }

    #[test]
    fn zeroed_alpha_path_ignores_alpha() {
        let mut net = TempNet::new(4, 3, 7).unwrap();
        net.zero_alpha_path();
        let input = random_input(4, 9);
        let t0 = net.forward(&input, &[0.0, 0.0, 0.0]).unwrap();
        let t1 = net.forward(&input, &[0.9, -1.0, 0.4]).unwrap();
        assert_eq!(t0, t1);

        // Without zeroing, alpha matters.
        let net = TempNet::new(4, 3, 7).unwrap();
        let t0 = net.forward(&input, &[0.0, 0.0, 0.0]).unwrap();
        let t1 = net.forward(&input, &[0.9, -1.0, 0.4]).unwrap();
        assert_ne!(t0, t1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = TempNet::new(3, 3, 11).unwrap();
        let input = random_input(3, 12);
        let alpha = [0.4, -0.6, 0.2];
        let (_, trace) = net.forward_with_trace(&input, &alpha).unwrap();
        let grad = net.backward(&trace, 1.0);

        // Probe a spread of parameter indices across every layer.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = net.param_count();
        let picks: Vec<usize> = (0..40).map(|_| rng.gen_range(0..n)).collect();
        let h = 1e-5;
        for &k in &picks {
            let orig = net.params[k];
            net.params[k] = orig + h;
            let up = net.forward(&input, &alpha).unwrap();
            net.params[k] = orig - h;
            let dn = net.forward(&input, &alpha).unwrap();
            net.params[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            let denom = grad[k].abs().max(fd.abs()).max(1e-8);
            assert!(
                ((grad[k] - fd) / denom).abs() < 1e-4,
                "param {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn backward_scales_linearly_with_upstream() {
        let net = TempNet::new(2, 0, 3).unwrap();
        let input = random_input(2, 4);
        let (_, trace) = net.forward_with_trace(&input, &[]).unwrap();
        let g1 = net.backward(&trace, 1.0);
        let g3 = net.backward(&trace, 3.0);
        for (a, b) in g1.iter().zip(&g3) {
            assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn downsample_mean_averages_blocks() {
        let data = Array3::from_shape_fn((4, 4, 1), |(i, j, _)| (i * 4 + j) as f64);
        let down = downsample_mean(&data, 2);
        assert_abs_diff_eq!(down[[0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_abs_diff_eq!(down[[1, 1, 0]], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
        // Identity when target equals the input size.
        let same = downsample_mean(&data, 4);
        assert_eq!(same, data);
    }

    #[test]
    fn moment_sgd_reduces_a_quadratic() {
        // Minimize ‖x − c‖² with the accumulator updates.
        let c = [1.0, -2.0, 3.0];
        let mut x = vec![0.0; 3];
        let mut opt = MomentSgd::new(0.05, 0.9, 0.999, 3);
        for _ in 0..2000 {
            let grad: Vec<f64> = x.iter().zip(&c).map(|(xi, ci)| 2.0 * (xi - ci)).collect();
            opt.step(&mut x, &grad);
        }
        for (xi, ci) in x.iter().zip(&c) {
            assert!((xi - ci).abs() < 1e-3, "{xi} vs {ci}");
        }
    }
}
