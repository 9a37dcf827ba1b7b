//! Nonlinear correlation and sensitivity analysis: Chatterjee's rank
//! correlation with its discrete-population oracle, the Pearson
//! coefficient, the piecewise toy study behind the correlation
//! measure comparison, and the exponential-plus-linear sensitivity
//! regression with Monte-Carlo uncertainty bands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired observations, optionally with per-point standard deviations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSeries {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_y: Option<Vec<f64>>,
}

impl SampleSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma_y: Option<Vec<f64>>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "x/y length mismatch: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::invalid("need at least 2 samples".to_string()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite sample".to_string()));
        }
        if let Some(s) = &sigma_y {
            if s.len() != x.len() {
                return Err(Error::invalid("sigma_y length mismatch".to_string()));
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid("sigma_y must be > 0".to_string()));
            }
        }
        Ok(Self { x, y, sigma_y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Standard normal draw via Box–Muller (deterministic per rng state).
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Chatterjee's rank correlation `ξ_n`.
///
/// Pairs are ordered by `x` with ties broken uniformly at random
/// (deterministic in `tie_seed`); ranks `r_i = #{y_j ≤ y_i}` and
/// `l_i = #{y_j ≥ y_i}` give
/// `ξ = 1 − n Σ|r_{i+1} − r_i| / (2 Σ l_i (n − l_i))`.
pub fn chatterjee_xi(s: &SampleSeries, tie_seed: u64) -> Result<f64> {
    let n = s.len();
    let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
    let tiebreak: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        s.x[a]
            .total_cmp(&s.x[b])
            .then_with(|| tiebreak[a].cmp(&tiebreak[b]))
    });

    // Ranks via a sorted copy of y.
    let mut sorted_y = s.y.clone();
    sorted_y.sort_by(f64::total_cmp);
    let count_le = |v: f64| sorted_y.partition_point(|&u| u <= v) as u64;
    let count_ge = |v: f64| (n - sorted_y.partition_point(|&u| u < v)) as u64;

    let r: Vec<u64> = s.y.iter().map(|&v| count_le(v)).collect();
    let mut denom: u64 = 0;
    for &v in &s.y {
        let l = count_ge(v);
        denom += l * (n as u64 - l);
    }
    if denom == 0 {
        return Err(Error::UndefinedMetric(
            "constant y series: zero rank variance".to_string(),
        ));
    }
    let mut num: u64 = 0;
    for w in order.windows(2) {
        num += r[w[1]].abs_diff(r[w[0]]);
    }
    Ok(1.0 - (n as f64 * num as f64) / (2.0 * denom as f64))
}

/// Exact dependence measure of a finite joint PMF over `(x, y)` points:
/// the expected explained variance of the indicator `1{y ≥ t}` over the
/// expected total variance, scanning thresholds `t` over the y-support
/// weighted by the y-marginal. This is the population quantity that
/// [`chatterjee_xi`] estimates.
pub fn xi_population_discrete(joint: &[(f64, f64, f64)]) -> Result<f64> {
    if joint.is_empty() {
        return Err(Error::invalid("empty joint pmf".to_string()));
    }
    let total_p: f64 = joint.iter().map(|&(_, _, p)| p).sum();
    if joint.iter().any(|&(_, _, p)| p < 0.0) || (total_p - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "pmf must be non-negative and sum to 1 (got {total_p})"
        )));
    }

    // Distinct y support (thresholds) and x groups.
    let mut ys: Vec<f64> = joint.iter().map(|&(_, y, _)| y).collect();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut xs: Vec<f64> = joint.iter().map(|&(x, _, _)| x).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let x_index = |v: f64| xs.partition_point(|&u| u < v);

    let px: Vec<f64> = {
        let mut px = vec![0.0; xs.len()];
        for &(x, _, p) in joint {
            px[x_index(x)] += p;
        }
        px
    };

    let mut num = 0.0;
    let mut den = 0.0;
    for &t in &ys {
        // Marginal mass at the threshold value.
        let pt: f64 = joint
            .iter()
            .filter(|&&(_, y, _)| y == t)
            .map(|&(_, _, p)| p)
            .sum();
        // F = P(y ≥ t) and conditional P(y ≥ t | x).
        let f: f64 = joint
            .iter()
            .filter(|&&(_, y, _)| y >= t)
            .map(|&(_, _, p)| p)
            .sum();
        let mut cond = vec![0.0; xs.len()];
        for &(x, y, p) in joint {
            if y >= t {
                cond[x_index(x)] += p;
            }
        }
        let mut var_x = 0.0;
        for (i, &p) in px.iter().enumerate() {
            if p > 0.0 {
                let c = cond[i] / p;
                var_x += p * (c - f) * (c - f);
            }
        }
        num += pt * var_x;
        den += pt * f * (1.0 - f);
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "degenerate y marginal".to_string(),
        ));
    }
    Ok(num / den)
}

/// Pearson product-moment correlation.
pub fn pearson_rho(s: &SampleSeries) -> Result<f64> {
    let n = s.len() as f64;
    let mx = s.x.iter().sum::<f64>() / n;
    let my = s.y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in s.x.iter().zip(&s.y) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric(
            "constant series has no correlation".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// The piecewise test function of the correlation toy study:
/// `2 − cos(10x)` outside `[−2π, 2π]`, `12 ± Σ_{n=1..10} sin(nx)` inside
/// (plus on `[−2π, 0)`, minus on `[0, 2π]`).
pub fn test_function(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    if x < -tau || x > tau {
        2.0 - (10.0 * x).cos()
    } else {
        let s: f64 = (1..=10).map(|n| (n as f64 * x).sin()).sum();
        if x < 0.0 {
            12.0 + s
        } else {
            12.0 - s
        }
    }
}

/// One-sided limits of the test function at its discontinuities `x = ±2π`:
/// the outer branch approaches 1, the inner branch 12.
const JUMP_LOW: f64 = 1.0;
const JUMP_HIGH: f64 = 12.0;

/// Samples the toy study series: `n` points with `x` uniform on
/// `[−10, 10]` and `y = f(x) + N(0, σ_ε²)`, plus `n_sub` extra points at
/// each discontinuity `x = ±2π` with `y` uniform across the jump interval.
pub fn generate_test_series(n: usize, sigma_eps: f64, seed: u64, n_sub: usize) -> SampleSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n + 2 * n_sub);
    let mut y = Vec::with_capacity(n + 2 * n_sub);
    for _ in 0..n {
        let xi = rng.gen_range(-10.0..=10.0);
        x.push(xi);
        y.push(test_function(xi) + sigma_eps * normal(&mut rng));
    }
    let tau = std::f64::consts::TAU;
    for &x_disc in &[-tau, tau] {
        for _ in 0..n_sub {
            x.push(x_disc);
            y.push(rng.gen_range(JUMP_LOW..=JUMP_HIGH));
        }
    }
    SampleSeries { x, y, sigma_y: None }
}

/// One level of the subsample decay study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayPoint {
    pub n_sub: usize,
    /// Inserted points (both discontinuities) relative to the base sample.
    pub relative_cardinality: f64,
    pub mean_xi: f64,
    pub std_xi: f64,
}

/// Mean ξ versus inserted-subsample cardinality for the base `n = 1001`,
/// `σ_ε = 0.3` series; ξ decays as the unexplained variance grows.
pub fn xi_decay_study(n_sub_levels: &[usize], seeds: &[u64]) -> Result<Vec<DecayPoint>> {
    const BASE_N: usize = 1001;
    const SIGMA: f64 = 0.3;
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed".to_string()));
    }
    let mut out = Vec::with_capacity(n_sub_levels.len());
    for &n_sub in n_sub_levels {
        let mut xis = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let s = generate_test_series(BASE_N, SIGMA, seed, n_sub);
            xis.push(chatterjee_xi(&s, seed)?);
        }
        let mean = xis.iter().sum::<f64>() / xis.len() as f64;
        let var = xis.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (xis.len().max(2) - 1) as f64;
        out.push(DecayPoint {
            n_sub,
            relative_cardinality: 2.0 * n_sub as f64 / BASE_N as f64,
            mean_xi: mean,
            std_xi: var.sqrt(),
        });
    }
    Ok(out)
}

/// Result of the sensitivity regression `f(x; β) = β₁ e^{β₂(x−β₃)} + β₄x + β₅`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: [f64; 5],
    pub covariance: [[f64; 5]; 5],
    /// Degrees-of-freedom corrected MSE over the sample variance of y.
    pub unexplained_variance: f64,
    /// Confidence band per evaluation point, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Vec<(f64, f64)>>,
}

/// Sensitivity model evaluation.
pub fn sensitivity_model(x: f64, beta: &[f64; 5]) -> f64 {
    let u = (beta[1] * (x - beta[2])).clamp(-500.0, 500.0);
    beta[0] * u.exp() + beta[3] * x + beta[4]
}

/// Analytic gradient of the sensitivity model with respect to β.
pub fn sensitivity_gradient(x: f64, beta: &[f64; 5]) -> [f64; 5] {
    let u = (beta[1] * (x - beta[2])).clamp(-500.0, 500.0);
    let e = u.exp();
    [
        e,
        beta[0] * (x - beta[2]) * e,
        -beta[0] * beta[1] * e,
        x,
        1.0,
    ]
}

fn weighted_ssr(s: &SampleSeries, w: &[f64], beta: &[f64; 5]) -> f64 {
    s.x.iter()
        .zip(&s.y)
        .zip(w)
        .map(|((&x, &y), &wi)| {
            let r = y - sensitivity_model(x, beta);
            wi * r * r
        })
        .sum()
}

/// Solves a symmetric 5×5 system by Gaussian elimination with partial
/// pivoting. Returns `None` when the pivot collapses.
fn solve5(a: &[[f64; 5]; 5], b: &[f64; 5]) -> Option<[f64; 5]> {
    let mut m = *a;
    let mut v = *b;
    for col in 0..5 {
        let mut pivot = col;
        for row in (col + 1)..5 {
            if m[row][col].abs() > m[pivot][col].abs() {
                pivot = row;
            }
        }
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        v.swap(col, pivot);
        for row in (col + 1)..5 {
            let f = m[row][col] / m[col][col];
            for k in col..5 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = [0.0; 5];
    for col in (0..5).rev() {
        let mut acc = v[col];
        for k in (col + 1)..5 {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Some(x)
}

/// Cyclic Jacobi eigendecomposition of a symmetric 5×5 matrix:
/// `a = V · diag(vals) · Vᵀ` with eigenvectors in the columns of `V`.
fn jacobi_eigen(a: &[[f64; 5]; 5]) -> ([f64; 5], [[f64; 5]; 5]) {
    let mut m = *a;
    let mut v = [[0.0; 5]; 5];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..5 {
            for q in (p + 1)..5 {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..5 {
            for q in (p + 1)..5 {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..5 {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..5 {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut vals = [0.0; 5];
    for i in 0..5 {
        vals[i] = m[i][i];
    }
    (vals, v)
}

/// Inverts a symmetric PSD matrix through its eigendecomposition with an
/// eigenvalue floor; near-null directions (the β₁/β₃ gauge freedom of the
/// model) then carry honestly enormous variances.
fn invert_information(info: &[[f64; 5]; 5]) -> [[f64; 5]; 5] {
    let (vals, v) = jacobi_eigen(info);
    let max = vals.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let floor = (max * 1e-14).max(1e-300);
    let mut cov = [[0.0; 5]; 5];
    for (k, &val) in vals.iter().enumerate() {
        let inv = 1.0 / val.max(floor);
        for i in 0..5 {
            for j in 0..5 {
                cov[i][j] += v[i][k] * inv * v[j][k];
            }
        }
    }
    cov
}

/// Parameters held at fixed values during the fit (the spec's "frozen"
/// starts); `None` entries stay free.
#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    pub frozen: [Option<f64>; 5],
}

impl FitOptions {
    /// Freezes the exponential component: the identified linear submodel.
    pub fn linear_only() -> Self {
        Self {
            frozen: [Some(0.0), Some(0.0), Some(0.0), None, None],
        }
    }
}

/// One damped Gauss–Newton (Levenberg–Marquardt) run from a given start.
fn lm_single(
    s: &SampleSeries,
    w: &[f64],
    start: [f64; 5],
    max_iter: usize,
    frozen: &[Option<f64>; 5],
) -> Option<([f64; 5], f64)> {
    let mut beta = start;
    for (b, f) in beta.iter_mut().zip(frozen) {
        if let Some(v) = f {
            *b = *v;
        }
    }
    let mut ssr = weighted_ssr(s, w, &beta);
    if !ssr.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..max_iter {
        // Normal equations JᵀWJ δ = JᵀW r over the free parameters;
        // frozen rows are pinned to δᵢ = 0.
        let mut a = [[0.0; 5]; 5];
        let mut g = [0.0; 5];
        for ((&x, &y), &wi) in s.x.iter().zip(&s.y).zip(w) {
            let grad = sensitivity_gradient(x, &beta);
            let r = y - sensitivity_model(x, &beta);
            for i in 0..5 {
                g[i] += wi * grad[i] * r;
                for j in 0..5 {
                    a[i][j] += wi * grad[i] * grad[j];
                }
            }
        }
        for i in 0..5 {
            if frozen[i].is_some() {
                g[i] = 0.0;
                for j in 0..5 {
                    a[i][j] = 0.0;
                    a[j][i] = 0.0;
                }
                a[i][i] = 1.0;
            }
        }
        let max_diag = a.iter().enumerate().map(|(i, r)| r[i]).fold(0.0f64, f64::max);
        let mut stepped = false;
        for _try in 0..24 {
            let mut damped = a;
            for i in 0..5 {
                damped[i][i] += lambda * a[i][i].max(1e-10 * max_diag + 1e-300);
            }
            let Some(delta) = solve5(&damped, &g) else {
                lambda = (lambda * 5.0).min(1e12);
                continue;
            };
            let mut candidate = beta;
            for i in 0..5 {
                candidate[i] += delta[i];
            }
            let new_ssr = weighted_ssr(s, w, &candidate);
            if new_ssr.is_finite() && new_ssr <= ssr {
                let step: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
                let scale: f64 = beta.iter().map(|b| b * b).sum::<f64>().sqrt() + 1e-12;
                beta = candidate;
                ssr = new_ssr;
                lambda = (lambda / 3.0).max(1e-12);
                stepped = true;
                if step / scale < 1e-8 {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 5.0).min(1e12);
        }
        if converged {
            return Some((beta, ssr));
        }
        if !stepped {
            // Damping saturated: the iterate is at a (possibly flat) optimum.
            return Some((beta, ssr));
        }
    }
    None
}

/// Ordinary least squares line fit, `y ≈ slope·x + intercept`.
fn ols_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// β₃ seed: x at the extremum of a moving-average smooth of y
/// (the strongest deviation from the mean level).
fn extremum_x(s: &SampleSeries) -> f64 {
    let n = s.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s.x[a].total_cmp(&s.x[b]));
    let window = (n / 10).max(1);
    let my = s.y.iter().sum::<f64>() / n as f64;
    let mut best_x = s.x[order[0]];
    let mut best_dev = -1.0;
    for (k, &i) in order.iter().enumerate() {
        let lo = k.saturating_sub(window / 2);
        let hi = (k + window / 2 + 1).min(n);
        let smooth: f64 =
            order[lo..hi].iter().map(|&j| s.y[j]).sum::<f64>() / (hi - lo) as f64;
        let dev = (smooth - my).abs();
        if dev > best_dev {
            best_dev = dev;
            best_x = s.x[i];
        }
    }
    best_x
}

/// Weighted least-squares fit of the sensitivity model by multi-start
/// damped Gauss–Newton (8 starts over a sign/scale grid on β₁ and β₂;
/// β₃ seeded at the smoothed-data extremum).
pub fn fit_sensitivity(s: &SampleSeries) -> Result<FitResult> {
    fit_sensitivity_with(s, &FitOptions::default())
}

/// [`fit_sensitivity`] with selected parameters frozen at fixed values.
pub fn fit_sensitivity_with(s: &SampleSeries, opts: &FitOptions) -> Result<FitResult> {
    let n = s.len();
    if n < 10 {
        return Err(Error::invalid(format!("need ≥ 10 points, got {n}")));
    }
    let x_min = s.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = s.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(x_max > x_min) {
        return Err(Error::invalid("degenerate x spread".to_string()));
    }
    // Normalized weights (max 1) keep tiny σ from overflowing 1/σ²; the
    // absolute scale is restored in the covariance below.
    let (w, weight_scale): (Vec<f64>, Option<f64>) = match &s.sigma_y {
        Some(sig) => {
            let s_min = sig.iter().cloned().fold(f64::INFINITY, f64::min);
            (
                sig.iter().map(|&v| (s_min / v) * (s_min / v)).collect(),
                Some(s_min * s_min),
            )
        }
        None => (vec![1.0; n], None),
    };

    let (slope, intercept) = ols_line(&s.x, &s.y);
    let amplitude = s
        .x
        .iter()
        .zip(&s.y)
        .map(|(&x, &y)| (y - slope * x - intercept).abs())
        .fold(0.0f64, f64::max);
    let x_ext = extremum_x(s);
    let rate = 4.0 / (x_max - x_min);

    let b1_grid: Vec<f64> = match opts.frozen[0] {
        Some(v) => vec![v],
        None => vec![amplitude, -amplitude],
    };
    let b2_grid: Vec<f64> = match opts.frozen[1] {
        Some(v) => vec![v],
        None => vec![-4.0 * rate, -rate, rate, 4.0 * rate],
    };

    let mut best: Option<([f64; 5], f64)> = None;
    for &b1 in &b1_grid {
        for &b2 in &b2_grid {
            let start = [b1, b2, x_ext, slope, intercept];
            if let Some((beta, ssr)) = lm_single(s, &w, start, 500, &opts.frozen) {
                // Strict relative improvement keeps the winner stable on the
                // flat β₁/β₃ direction where starts tie to rounding error.
                if best.as_ref().map_or(true, |(_, b)| ssr < b * (1.0 - 1e-10)) {
                    best = Some((beta, ssr));
                }
            }
        }
    }
    let (beta, ssr) = best.ok_or_else(|| {
        Error::FitFailure(format!(
            "no start converged (n = {n}, amplitude = {amplitude:.3e}, x extremum = {x_ext:.3e})"
        ))
    })?;

    // Linearized covariance at the optimum: (JᵀWJ)⁻¹ for known σ, scaled by
    // the residual variance otherwise. Frozen parameters carry no variance.
    let mut info = [[0.0; 5]; 5];
    for ((&x, _), &wi) in s.x.iter().zip(&s.y).zip(&w) {
        let grad = sensitivity_gradient(x, &beta);
        for i in 0..5 {
            for j in 0..5 {
                info[i][j] += wi * grad[i] * grad[j];
            }
        }
    }
    for i in 0..5 {
        if opts.frozen[i].is_some() {
            for j in 0..5 {
                info[i][j] = 0.0;
                info[j][i] = 0.0;
            }
            info[i][i] = 1.0;
        }
    }
    let mut covariance = invert_information(&info);
    for i in 0..5 {
        if opts.frozen[i].is_some() {
            for j in 0..5 {
                covariance[i][j] = 0.0;
                covariance[j][i] = 0.0;
            }
        }
    }
    // Known σ: restore the absolute weight scale. Unknown σ: scale by the
    // residual variance estimate.
    let scale = match weight_scale {
        Some(s2) => s2,
        None if n > 5 => ssr / (n - 5) as f64,
        None => 1.0,
    };
    for row in covariance.iter_mut() {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    let mut fit = FitResult {
        beta,
        covariance,
        unexplained_variance: 0.0,
        band: None,
    };
    fit.unexplained_variance = unexplained_variance(&fit, s)?;
    Ok(fit)
}

/// Monte-Carlo parameter covariance: resamples `y_i ← y_i + N(0, σ_{y,i}²)`,
/// refits, and returns the covariance of the β ensemble. Deterministic in
/// `seed`; errors when more than 20% of the refits fail.
pub fn mc_covariance(s: &SampleSeries, n_mc: usize, seed: u64) -> Result<[[f64; 5]; 5]> {
    mc_covariance_with(s, n_mc, seed, &FitOptions::default())
}

/// [`mc_covariance`] with the per-resample fits restricted by `opts`.
pub fn mc_covariance_with(
    s: &SampleSeries,
    n_mc: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<[[f64; 5]; 5]> {
    let sigma = s
        .sigma_y
        .as_ref()
        .ok_or_else(|| Error::invalid("mc_covariance needs per-point sigma_y".to_string()))?
        .clone();
    if n_mc < 100 {
        return Err(Error::invalid(format!("n_mc {n_mc} below minimum 100")));
    }
    let mut betas: Vec<[f64; 5]> = Vec::with_capacity(n_mc);
    let mut failures = 0usize;
    for k in 0..n_mc {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let y: Vec<f64> = s
            .y
            .iter()
            .zip(&sigma)
            .map(|(&y, &sg)| y + sg * normal(&mut rng))
            .collect();
        let resampled = SampleSeries {
            x: s.x.clone(),
            y,
            sigma_y: Some(sigma.clone()),
        };
        match fit_sensitivity_with(&resampled, opts) {
            Ok(fit) => betas.push(fit.beta),
            Err(_) => failures += 1,
        }
    }
    if failures * 5 > n_mc {
        return Err(Error::FitFailure(format!(
            "{failures}/{n_mc} resample fits failed"
        )));
    }
    let m = betas.len() as f64;
    let mut mean = [0.0; 5];
    for b in &betas {
        for i in 0..5 {
            mean[i] += b[i] / m;
        }
    }
    let mut cov = [[0.0; 5]; 5];
    for b in &betas {
        for i in 0..5 {
            for j in 0..5 {
                cov[i][j] += (b[i] - mean[i]) * (b[j] - mean[j]) / (m - 1.0);
            }
        }
    }
    Ok(cov)
}

/// Confidence band `f(x) ± k·√(∇f ᵀ Cov ∇f)` on a grid.
pub fn confidence_band(fit: &FitResult, x_grid: &[f64], k: f64) -> Result<Vec<(f64, f64)>> {
    let (vals, _) = jacobi_eigen(&fit.covariance);
    let max = vals.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    if vals.iter().any(|&v| v < -1e-9 * max.max(1e-300)) {
        return Err(Error::invalid(
            "covariance is not positive semi-definite".to_string(),
        ));
    }
    Ok(x_grid
        .iter()
        .map(|&x| {
            let g = sensitivity_gradient(x, &fit.beta);
            let mut q = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    q += g[i] * fit.covariance[i][j] * g[j];
                }
            }
            let f = sensitivity_model(x, &fit.beta);
            let half = k * q.max(0.0).sqrt();
            (f - half, f + half)
        })
        .collect())
}

/// Ratio of the dof-corrected MSE over the (population) variance of y:
/// `[Σ r² / (n − 5)] / [Σ (y − ȳ)² / n]`.
pub fn unexplained_variance(fit: &FitResult, s: &SampleSeries) -> Result<f64> {
    let n = s.len();
    if n <= 5 {
        return Err(Error::InsufficientData(format!(
            "need more than 5 points, got {n}"
        )));
    }
    let ssr: f64 = s
        .x
        .iter()
        .zip(&s.y)
        .map(|(&x, &y)| {
            let r = y - sensitivity_model(x, &fit.beta);
            r * r
        })
        .sum();
    let my = s.y.iter().sum::<f64>() / n as f64;
    let var: f64 = s.y.iter().map(|&y| (y - my) * (y - my)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Err(Error::UndefinedMetric("constant y".to_string()));
    }
    Ok((ssr / (n - 5) as f64) / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Direct O(n²) evaluation of the rank correlation from its displayed
    /// definition; the independent oracle for `chatterjee_xi`.
    fn xi_brute_force(x: &[f64], y: &[f64], tie_seed: u64) -> f64 {
        let n = x.len();
        let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
        let tiebreak: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then_with(|| tiebreak[a].cmp(&tiebreak[b])));
        let r = |i: usize| y.iter().filter(|&&v| v <= y[i]).count() as f64;
        let l = |i: usize| y.iter().filter(|&&v| v >= y[i]).count() as f64;
        let num: f64 = order
            .windows(2)
            .map(|w| (r(w[1]) - r(w[0])).abs())
            .sum();
        let den: f64 = (0..n).map(|i| l(i) * (n as f64 - l(i))).sum();
        1.0 - n as f64 * num / (2.0 * den)
    }

    #[test]
    fn xi_closed_form_for_monotone_data() {
        for n in [4usize, 10, 100] {
            let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 1.0).collect();
            let s = SampleSeries::new(x.clone(), y.clone(), None).unwrap();
            let xi = chatterjee_xi(&s, 0).unwrap();
            let expect = 1.0 - 3.0 / (n as f64 + 1.0);
            assert_abs_diff_eq!(xi, expect, epsilon = 1e-12);
            assert_abs_diff_eq!(xi, xi_brute_force(&s.x, &s.y, 0), epsilon = 1e-12);
        }
    }

    #[test]
    fn xi_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let n = 60;
            // Coarse quantization produces plenty of ties in x and y.
            let x: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 2.0).collect();
            let y: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..6) as f64) / 3.0).collect();
            let s = SampleSeries::new(x.clone(), y.clone(), None).unwrap();
            for tie_seed in [0u64, 1, 99] {
                assert_abs_diff_eq!(
                    chatterjee_xi(&s, tie_seed).unwrap(),
                    xi_brute_force(&x, &y, tie_seed),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn xi_rejects_constant_y() {
        let s = SampleSeries::new(vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0], None).unwrap();
        assert!(matches!(
            chatterjee_xi(&s, 0),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn xi_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..300).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|&v| (2.0 * v).sin() + 0.1 * normal(&mut rng)).collect();
        let s = SampleSeries::new(x.clone(), y.clone(), None).unwrap();
        let base = chatterjee_xi(&s, 3).unwrap();

        let s_exp_y =
            SampleSeries::new(x.clone(), y.iter().map(|&v| v.exp()).collect(), None).unwrap();
        assert_abs_diff_eq!(chatterjee_xi(&s_exp_y, 3).unwrap(), base, epsilon = 1e-12);

        let s_cube_x =
            SampleSeries::new(x.iter().map(|&v| v * v * v).collect(), y, None).unwrap();
        assert_abs_diff_eq!(chatterjee_xi(&s_cube_x, 3).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn xi_near_zero_for_independent_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = SampleSeries::new(x, y, None).unwrap();
        let xi = chatterjee_xi(&s, 0).unwrap();
        assert!(xi.abs() < 0.05, "ξ = {xi}");
    }

    #[test]
    fn population_xi_functional_and_independent_cases() {
        // y a deterministic function of x → 1.
        let joint = vec![
            (0.0, 1.0, 0.25),
            (1.0, 3.0, 0.25),
            (2.0, 2.0, 0.25),
            (3.0, 5.0, 0.25),
        ];
        assert_abs_diff_eq!(xi_population_discrete(&joint).unwrap(), 1.0, epsilon = 1e-12);

        // Independent x and y → 0.
        let mut joint = Vec::new();
        for (x, px) in [(0.0, 0.5), (1.0, 0.5)] {
            for (y, py) in [(0.0, 0.3), (1.0, 0.7)] {
                joint.push((x, y, px * py));
            }
        }
        assert_abs_diff_eq!(xi_population_discrete(&joint).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn population_xi_rejects_degenerate_marginal() {
        let joint = vec![(0.0, 2.0, 0.5), (1.0, 2.0, 0.5)];
        assert!(xi_population_discrete(&joint).is_err());
    }

    #[test]
    fn sampled_xi_converges_to_population_value() {
        // A dependent 2×2 joint.
        let joint = vec![
            (0.0, 0.0, 0.4),
            (0.0, 1.0, 0.1),
            (1.0, 0.0, 0.1),
            (1.0, 1.0, 0.4),
        ];
        let target = xi_population_discrete(&joint).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for &(xj, yj, p) in &joint {
                acc += p;
                if u <= acc {
                    x.push(xj);
                    y.push(yj);
                    break;
                }
            }
        }
        let s = SampleSeries::new(x, y, None).unwrap();
        let xi = chatterjee_xi(&s, 1).unwrap();
        assert!(
            (xi - target).abs() < 0.02,
            "sampled {xi} vs population {target}"
        );
    }

    #[test]
    fn pearson_exact_cases_and_affine_invariance() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 7.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 1.0).collect();
        let s = SampleSeries::new(x.clone(), y, None).unwrap();
        assert_abs_diff_eq!(pearson_rho(&s).unwrap(), 1.0, epsilon = 1e-12);

        let s_neg = SampleSeries::new(x.clone(), x.iter().map(|&v| -v).collect(), None).unwrap();
        assert_abs_diff_eq!(pearson_rho(&s_neg).unwrap(), -1.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = x.iter().map(|&v| v.sin() + 0.3 * normal(&mut rng)).collect();
        let s = SampleSeries::new(x.clone(), y.clone(), None).unwrap();
        let base = pearson_rho(&s).unwrap();
        let s_aff = SampleSeries::new(
            x.iter().map(|&v| 3.0 * v + 11.0).collect(),
            y.iter().map(|&v| 0.5 * v - 4.0).collect(),
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(pearson_rho(&s_aff).unwrap(), base, epsilon = 1e-10);

        let s_const = SampleSeries::new(x, vec![1.0; 50], None).unwrap();
        assert!(pearson_rho(&s_const).is_err());
    }

    #[test]
    fn test_function_branch_values() {
        let pi = std::f64::consts::PI;
        assert_abs_diff_eq!(test_function(3.0 * pi), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(test_function(0.0), 12.0, epsilon = 1e-12);
        // Branches 2 and 3 agree at x = 0.
        assert_abs_diff_eq!(test_function(-1e-12), 12.0, epsilon = 1e-9);
        // Discontinuity at 2π: inner branch 12, outer branch 1.
        assert_abs_diff_eq!(test_function(2.0 * pi), 12.0, epsilon = 1e-9);
        assert_abs_diff_eq!(test_function(2.0 * pi + 1e-9), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn generated_series_layout_and_determinism() {
        let a = generate_test_series(100, 0.3, 9, 7);
        let b = generate_test_series(100, 0.3, 9, 7);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.len(), 100 + 14);
        let tau = std::f64::consts::TAU;
        for k in 0..7 {
            assert_eq!(a.x[100 + k], -tau);
            assert_eq!(a.x[107 + k], tau);
        }
        for k in 100..114 {
            assert!((JUMP_LOW..=JUMP_HIGH).contains(&a.y[k]));
        }
        let c = generate_test_series(100, 0.3, 10, 7);
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn toy_study_xi_near_published_value() {
        let s = generate_test_series(1001, 0.3, 4, 0);
        let xi = chatterjee_xi(&s, 4).unwrap();
        assert!((xi - 0.824).abs() < 0.05, "ξ = {xi}");
        let rho = pearson_rho(&s).unwrap();
        assert!(rho.abs() < 0.15, "ρ = {rho}");
    }

    #[test]
    fn decay_study_is_monotone_in_subsample_size() {
        let seeds: Vec<u64> = (0..8).collect();
        let points = xi_decay_study(&[0, 50, 200], &seeds).unwrap();
        assert!(points[0].mean_xi > points[1].mean_xi);
        assert!(points[1].mean_xi > points[2].mean_xi);
        assert!(points[1].relative_cardinality > 0.0);
    }

    fn synth_series(beta: [f64; 5], n: usize, sigma: f64, seed: u64) -> SampleSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| sensitivity_model(xi, &beta) + sigma * normal(&mut rng))
            .collect();
        SampleSeries::new(x, y, Some(vec![sigma; n])).unwrap()
    }

    #[test]
    fn fit_recovers_generating_parameters_within_uncertainty() {
        let truth = [0.5, -8.0, 0.2, 0.1, 0.3];
        let s = synth_series(truth, 60, 1e-3, 13);
        let fit = fit_sensitivity(&s).unwrap();
        for q in 0..5 {
            let sigma = fit.covariance[q][q].sqrt();
            let dev = (fit.beta[q] - truth[q]).abs();
            assert!(
                dev <= 3.0 * sigma,
                "β{}: {} vs {} (3σ = {})",
                q + 1,
                fit.beta[q],
                truth[q],
                3.0 * sigma
            );
        }
        // The identified combination β₁e^{−β₂β₃} is recovered tightly even
        // though β₁ and β₃ individually share a flat direction.
        let a_fit = fit.beta[0] * (-fit.beta[1] * fit.beta[2]).exp();
        let a_true = truth[0] * (-truth[1] * truth[2]).exp();
        assert!((a_fit - a_true).abs() / a_true < 1e-2, "{a_fit} vs {a_true}");
    }

    #[test]
    fn fit_linear_special_case_matches_ols() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 0.7 * v - 0.2).collect();
        let s = SampleSeries::new(x.clone(), y.clone(), None).unwrap();
        let fit = fit_sensitivity(&s).unwrap();
        let (slope, intercept) = ols_line(&x, &y);
        assert!((fit.beta[3] - slope).abs() < 1e-6, "β₄ {}", fit.beta[3]);
        assert!((fit.beta[4] - intercept).abs() < 1e-6, "β₅ {}", fit.beta[4]);
    }

    #[test]
    fn fit_beats_the_mean_model() {
        let truth = [0.4, -6.0, 0.3, -0.2, 1.0];
        let s = synth_series(truth, 80, 0.01, 3);
        let fit = fit_sensitivity(&s).unwrap();
        let my = s.y.iter().sum::<f64>() / s.len() as f64;
        let ssr_fit: f64 = s
            .x
            .iter()
            .zip(&s.y)
            .map(|(&x, &y)| (y - sensitivity_model(x, &fit.beta)).powi(2))
            .sum();
        let ssr_mean: f64 = s.y.iter().map(|&y| (y - my) * (y - my)).sum();
        assert!(ssr_fit <= ssr_mean);
    }

    #[test]
    fn mc_covariance_zero_noise_collapses() {
        // σ_y in the denormal range: every resample reproduces y exactly,
        // so the β ensemble is constant and the covariance is the zero matrix.
        let truth = [0.5, -8.0, 0.2, 0.1, 0.3];
        let mut s = synth_series(truth, 40, 1e-3, 5);
        s.sigma_y = Some(vec![1e-300; s.len()]);
        let cov = mc_covariance(&s, 100, 7).unwrap();
        for (i, row) in cov.iter().enumerate() {
            assert!(row[i] >= 0.0);
            // The β ensemble is bit-identical; what remains is the rounding
            // noise of the ensemble-mean accumulation (~ (ε·β)²).
            assert!(row[i] < 1e-25, "β{} variance {}", i + 1, row[i]);
        }
    }

    #[test]
    fn mc_covariance_matches_ols_on_linear_case() {
        // The linear special case (exponential component frozen at zero):
        // the (β₄, β₅) block must match the analytic OLS covariance within
        // 15%. Left free, the small-β₂ regime of the exponential term is
        // collinear with the line and legitimately inflates the variance.
        let n = 60;
        let sigma = 0.05;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 0.4 * v + 0.1).collect();
        let s = SampleSeries::new(x.clone(), y, Some(vec![sigma; n])).unwrap();
        let cov = mc_covariance_with(&s, 1000, 11, &FitOptions::linear_only()).unwrap();

        let nf = n as f64;
        let mx = x.iter().sum::<f64>() / nf;
        let sxx: f64 = x.iter().map(|&v| (v - mx) * (v - mx)).sum();
        let var_slope = sigma * sigma / sxx;
        let var_intercept = sigma * sigma * (1.0 / nf + mx * mx / sxx);
        assert!(
            (cov[3][3] - var_slope).abs() / var_slope < 0.15,
            "slope var {} vs {}",
            cov[3][3],
            var_slope
        );
        assert!(
            (cov[4][4] - var_intercept).abs() / var_intercept < 0.15,
            "intercept var {} vs {}",
            cov[4][4],
            var_intercept
        );
    }

    #[test]
    fn band_limit_cases() {
        let fit = FitResult {
            beta: [0.0, 1.0, 0.0, 0.5, 1.0],
            covariance: [[0.0; 5]; 5],
            unexplained_variance: 0.0,
            band: None,
        };
        let grid = [0.0, 0.5, 1.0];
        // Zero covariance collapses the band onto the curve.
        for (x, (lo, hi)) in grid.iter().zip(confidence_band(&fit, &grid, 1.96).unwrap()) {
            let f = sensitivity_model(*x, &fit.beta);
            assert_abs_diff_eq!(lo, f, epsilon = 1e-12);
            assert_abs_diff_eq!(hi, f, epsilon = 1e-12);
        }

        // Only β₅ uncertain: half-width is k√v everywhere.
        let mut cov = [[0.0; 5]; 5];
        cov[4][4] = 0.04;
        let fit = FitResult {
            covariance: cov,
            ..fit
        };
        let band1 = confidence_band(&fit, &grid, 1.0).unwrap();
        let band2 = confidence_band(&fit, &grid, 2.0).unwrap();
        for ((lo1, hi1), (lo2, hi2)) in band1.iter().zip(&band2) {
            let w1 = hi1 - lo1;
            let w2 = hi2 - lo2;
            assert_abs_diff_eq!(w1, 2.0 * 0.2, epsilon = 1e-12);
            // Doubling k doubles the width exactly.
            assert_abs_diff_eq!(w2, 2.0 * w1, epsilon = 1e-12);
        }
    }

    #[test]
    fn band_rejects_non_psd_covariance() {
        let mut cov = [[0.0; 5]; 5];
        cov[0][0] = -1.0;
        let fit = FitResult {
            beta: [0.0; 5],
            covariance: cov,
            unexplained_variance: 0.0,
            band: None,
        };
        assert!(confidence_band(&fit, &[0.0], 1.96).is_err());
    }

    #[test]
    fn unexplained_variance_limit_cases() {
        let truth = [0.5, -8.0, 0.2, 0.1, 0.3];
        let n = 50;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| sensitivity_model(v, &truth)).collect();
        let s = SampleSeries::new(x, y, None).unwrap();
        // Perfect parameters → 0.
        let fit = FitResult {
            beta: truth,
            covariance: [[0.0; 5]; 5],
            unexplained_variance: 0.0,
            band: None,
        };
        assert_abs_diff_eq!(unexplained_variance(&fit, &s).unwrap(), 0.0, epsilon = 1e-20);

        // The arithmetic-mean model scores exactly n/(n−5).
        let my = s.y.iter().sum::<f64>() / n as f64;
        let mean_fit = FitResult {
            beta: [0.0, 0.0, 0.0, 0.0, my],
            covariance: [[0.0; 5]; 5],
            unexplained_variance: 0.0,
            band: None,
        };
        assert_abs_diff_eq!(
            unexplained_variance(&mean_fit, &s).unwrap(),
            n as f64 / (n as f64 - 5.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn unexplained_variance_detects_structure() {
        let truth = [0.5, -8.0, 0.2, 0.1, 0.3];
        let s = synth_series(truth, 60, 0.01, 19);
        let fit = fit_sensitivity(&s).unwrap();
        let structured = fit.unexplained_variance;

        // Shuffling y destroys the relationship; the refit cannot do much
        // better than the mean model.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut y = s.y.clone();
        use rand::seq::SliceRandom;
        y.shuffle(&mut rng);
        let shuffled = SampleSeries::new(s.x.clone(), y, s.sigma_y.clone()).unwrap();
        let fit_sh = fit_sensitivity(&shuffled).unwrap();
        assert!(
            structured < fit_sh.unexplained_variance,
            "structured {structured} vs shuffled {}",
            fit_sh.unexplained_variance
        );
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        let s = SampleSeries::new(vec![1.0; 12], vec![0.0; 12], None).unwrap();
        assert!(fit_sensitivity(&s).is_err());
        let s = SampleSeries::new(vec![0.0, 1.0], vec![0.0, 1.0], None).unwrap();
        assert!(fit_sensitivity(&s).is_err());
    }
}
