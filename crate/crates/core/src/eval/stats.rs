use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lanczos approximation (g = 7, 9 terms), good to ~1e-15 for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// Lower series `P(a, x)`, converges fast for `x < a + 1`.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper continued fraction `Q(a, x)` (modified Lentz), for `x >= a + 1`.
fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "gamma_q needs a > 0");
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

/// Upper tail of the chi-square distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

/// Two-sided standard normal tail `P(|Z| >= |z|)`, via `erfc(t) = Q(1/2, t^2)`.
pub fn normal_two_sided(z: f64) -> f64 {
    gamma_q(0.5, z * z / 2.0)
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (i, &k) in order.iter().enumerate() {
        running = running.max(((m - i) as f64 * p[k]).min(1.0));
        out[k] = running;
    }
    Ok(out)
}

/// Ranks within one row, 1 = highest value, ties share the average rank.
pub fn rank_descending(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    /// `(mean rank a - mean rank b) / sqrt(k (k + 1) / (6 N))`.
    pub z: f64,
    pub p_value: f64,
    pub p_holm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanReport {
    pub models: Vec<String>,
    pub replicates: usize,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Mean rank per model; rank 1 is the best score in a replicate.
    pub average_ranks: Vec<f64>,
    pub pairwise: Vec<PairwiseComparison>,
}

impl FriedmanReport {
    /// Holm-adjusted p-values as a symmetric `k x k` matrix with ones on the
    /// diagonal, the layout of a pairwise heatmap.
    pub fn holm_matrix(&self) -> Vec<Vec<f64>> {
        let k = self.models.len();
        let mut m = vec![vec![1.0; k]; k];
        for c in &self.pairwise {
            let i = self.models.iter().position(|n| *n == c.a).expect("model listed");
            let j = self.models.iter().position(|n| *n == c.b).expect("model listed");
            m[i][j] = c.p_holm;
            m[j][i] = c.p_holm;
        }
        m
    }
}

/// Friedman rank test over a `replicates x models` score matrix (higher is
/// better), followed by pairwise rank z-tests with Holm correction.
pub fn friedman_test(matrix: &[Vec<f64>], models: &[String]) -> Result<FriedmanReport> {
    let n = matrix.len();
    let k = models.len();
    if k < 2 || n < 2 {
        return Err(Error::Data(format!("Friedman test needs at least 2 models and 2 replicates, got {k} and {n}")));
    }
    if let Some(row) = matrix.iter().find(|r| r.len() != k) {
        return Err(Error::Data(format!("row with {} scores for {k} models", row.len())));
    }
    if matrix.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Data("Friedman test: NaN score".into()));
    }
    let mut rank_sums = vec![0.0; k];
    for row in matrix {
        for (s, r) in rank_sums.iter_mut().zip(rank_descending(row)) {
            *s += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    // ties can push the textbook formula a hair below zero
    let statistic = (12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0)).max(0.0);
    let df = k - 1;
    let average_ranks: Vec<f64> = rank_sums.iter().map(|r| r / nf).collect();

    let se = (kf * (kf + 1.0) / (6.0 * nf)).sqrt();
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let z = (average_ranks[i] - average_ranks[j]) / se;
            pairs.push((i, j, z, normal_two_sided(z)));
        }
    }
    let adjusted = holm_adjust(&pairs.iter().map(|p| p.3).collect::<Vec<_>>())?;
    let pairwise = pairs
        .into_iter()
        .zip(adjusted)
        .map(|((i, j, z, p), ph)| PairwiseComparison { a: models[i].clone(), b: models[j].clone(), z, p_value: p, p_holm: ph })
        .collect();
    Ok(FriedmanReport {
        models: models.to_vec(),
        replicates: n,
        statistic,
        df,
        p_value: chi2_sf(statistic, df as f64),
        average_ranks,
        pairwise,
    })
}
