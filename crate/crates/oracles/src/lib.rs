//! Brute-force reference computations for the `hmsmm` test suites.
//!
//! Nothing in here shares code with the library under test. Every routine is
//! the slow, obvious version of something the library does quickly.

/// Adaptive Gauss-Kronrod (7/15) quadrature of `f` over `[a, b]`.
///
/// Subdivides until the Kronrod/Gauss discrepancy of each panel is below
/// `abs_tol + rel_tol * |panel estimate|`, or `max_depth` bisections deep.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
        const XK: [f64; 8] = [
            0.991_455_371_120_812_6,
            0.949_107_912_342_758_5,
            0.864_864_423_359_769_1,
            0.741_531_185_599_394_4,
            0.586_087_235_467_691_1,
            0.405_845_151_377_397_2,
            0.207_784_955_007_898_5,
            0.0,
        ];
        const WK: [f64; 8] = [
            0.022_935_322_010_529_22,
            0.063_092_092_629_978_55,
            0.104_790_010_322_250_2,
            0.140_653_259_715_525_9,
            0.169_004_726_639_267_9,
            0.190_350_578_064_785_4,
            0.204_432_940_075_298_9,
            0.209_482_141_084_728,
        ];
        const WG: [f64; 4] = [
            0.129_484_966_168_869_7,
            0.279_705_391_489_276_7,
            0.381_830_050_505_118_9,
            0.417_959_183_673_469_4,
        ];
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        let fc = f(c);
        let mut kronrod = WK[7] * fc;
        let mut gauss = WG[3] * fc;
        for i in 0..7 {
            let x = h * XK[i];
            let s = f(c - x) + f(c + x);
            kronrod += WK[i] * s;
            if i % 2 == 1 {
                gauss += WG[i / 2] * s;
            }
        }
        (kronrod * h, (kronrod - gauss).abs() * h)
    }

    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        whole: (f64, f64),
        abs_tol: f64,
        rel_tol: f64,
        depth: usize,
    ) -> f64 {
        let (est, err) = whole;
        if depth == 0 || err <= abs_tol + rel_tol * est.abs() {
            return est;
        }
        let m = 0.5 * (a + b);
        let left = gk15(f, a, m);
        let right = gk15(f, m, b);
        recurse(f, a, m, left, 0.5 * abs_tol, rel_tol, depth - 1)
            + recurse(f, m, b, right, 0.5 * abs_tol, rel_tol, depth - 1)
    }

    let whole = gk15(f, a, b);
    recurse(f, a, b, whole, abs_tol, rel_tol, 40)
}

/// Composite trapezoid rule on `n` equal panels.
pub fn trapezoid<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + i as f64 * h);
    }
    s * h
}

/// Gauss-Jordan inverse with partial pivoting of a row-major `n x n` matrix.
/// Also returns `ln|det|`.
pub fn dense_inverse(a: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        let p = m[col * n + col];
        log_det += p.abs().ln();
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = m[r * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= factor * m[col * n + k];
                inv[r * n + k] -= factor * inv[col * n + k];
            }
        }
    }
    (inv, log_det)
}

/// `(x - mu)^T S^{-1} (x - mu)` with an explicitly inverted `S`.
pub fn dense_mahalanobis(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let n = x.len();
    let (inv, _) = dense_inverse(sigma, n);
    let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += diff[i] * inv[i * n + j] * diff[j];
        }
    }
    acc
}

/// Gaussian log-density from an explicit inverse and determinant.
pub fn dense_log_gaussian(x: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let n = x.len();
    let (_, log_det) = dense_inverse(sigma, n);
    let d = dense_mahalanobis(x, mu, sigma);
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * d
}

/// Probability that a random positive outscores a random negative, ties
/// counted half. O(n^2).
pub fn pairwise_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &ti) in truth.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Centered moving average with edge truncation, O(T * W).
/// The window covers `[t - w/2, t + (w - 1 - w/2)]`.
pub fn naive_moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let left = w / 2;
    let right = w - 1 - left;
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(left);
            let hi = (t + right).min(x.len() - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Weighted mean by plain summation.
pub fn naive_weighted_mean(samples: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let d = samples[0].len();
    let total: f64 = weights.iter().sum();
    (0..d)
        .map(|j| samples.iter().zip(weights).map(|(x, w)| w * x[j]).sum::<f64>() / total)
        .collect()
}

/// `sum_i w_i (x_i - mu)(x_i - mu)^T / n` by explicit outer products.
pub fn naive_weighted_scatter(samples: &[Vec<f64>], weights: &[f64], mu: &[f64]) -> Vec<f64> {
    let d = mu.len();
    let mut out = vec![0.0; d * d];
    for (x, w) in samples.iter().zip(weights) {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += w * (x[i] - mu[i]) * (x[j] - mu[j]);
            }
        }
    }
    let n = samples.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Distribution of `z_t` for a Markov chain by repeated vector-matrix products.
pub fn chain_marginals(pi: &[f64], a: &[Vec<f64>], t_len: usize) -> Vec<Vec<f64>> {
    let k = pi.len();
    let mut out = vec![pi.to_vec()];
    for _ in 1..t_len {
        let prev = out.last().unwrap();
        let next: Vec<f64> = (0..k).map(|j| (0..k).map(|i| prev[i] * a[i][j]).sum()).collect();
        out.push(next);
    }
    out
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// `ln Γ(x)` for `x > 0` by upward recurrence to `x + 30` followed by the
/// Stirling series. Unrelated to the Lanczos form used in the library.
pub fn ln_gamma_stirling(x: f64) -> f64 {
    assert!(x > 0.0);
    let mut shift = 0.0;
    let mut z = x;
    while z < 30.0 {
        shift += z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // B2/(1·2), B4/(3·4), ... B12/(11·12)
    let coefs = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
    ];
    let mut series = 0.0;
    let mut pow = inv;
    for c in coefs {
        series += c * pow;
        pow *= inv2;
    }
    (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + series - shift
}

/// Digamma by a fourth-order central difference of [`ln_gamma_stirling`].
pub fn digamma_numeric(x: f64) -> f64 {
    let h = 1e-3 * x;
    let f = ln_gamma_stirling;
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}
