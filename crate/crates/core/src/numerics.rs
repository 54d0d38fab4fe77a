//! Scalar and matrix routines shared by all estimators.
//!
//! Everything here is a pure function of its inputs and reports results in
//! nats. The routines are:
//!
//! - binary relative entropy `d(p‖q) = p·log(p/q) + (1−p)·log((1−p)/(1−q))`
//!   and its inversion (largest population risk consistent with a divergence
//!   budget),
//! - plug-in mutual information over a discrete joint histogram,
//! - `log|I_d + c·AᵀA|` computed through the smaller Gram matrix,
//! - the smallest admissible C1 for the fast-rate constant constraints
//!   `e^{C2} + e^{−C2(1+C1)} ≤ 2` (hypothesis form) and
//!   `e^{2C2} + e^{−2C2(1+C1)} ≤ 2` (loss form).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// log 2 in nats; the entropy of one fair membership bit.
pub const LOG_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("infinite divergence: d({p} || {q}) diverges")]
    InfiniteDivergence { p: f64, q: f64 },
    #[error("{name} = {value} outside {expected}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("histogram has no observations")]
    NoObservations,
    #[error("no probe rows supplied")]
    NoProbes,
    #[error("C2 = {c2} violates the {variant} constraint interval {interval}")]
    ConstraintViolated {
        c2: f64,
        variant: &'static str,
        interval: &'static str,
    },
}

fn check_unit(name: &'static str, value: f64) -> Result<(), NumericsError> {
    if !(0.0..=1.0).contains(&value) || value.is_nan() {
        return Err(NumericsError::OutOfRange {
            name,
            value,
            expected: "[0, 1]",
        });
    }
    Ok(())
}

/// Binary relative entropy `d(p‖q)` in nats, with the convention
/// `0·log 0 = 0`.
///
/// `q ∈ {0, 1}` is only admissible when `p` matches it (the divergence is
/// `+∞` otherwise and is signalled as an error).
pub fn binary_kl(p: f64, q: f64) -> Result<f64, NumericsError> {
    check_unit("p", p)?;
    check_unit("q", q)?;
    if q == 0.0 {
        return if p == 0.0 {
            Ok(0.0)
        } else {
            Err(NumericsError::InfiniteDivergence { p, q })
        };
    }
    if q == 1.0 {
        return if p == 1.0 {
            Ok(0.0)
        } else {
            Err(NumericsError::InfiniteDivergence { p, q })
        };
    }
    // ln_1p form in the offset q − p: avoids the catastrophic cancellation
    // of the two log terms when p ≈ q, where d is O((q−p)²).
    let delta = q - p;
    let mut d = 0.0;
    if p > 0.0 {
        d -= p * (delta / p).ln_1p();
    }
    if p < 1.0 {
        d += (1.0 - p) * (delta / (1.0 - q)).ln_1p();
    }
    Ok(d.max(0.0))
}

/// Largest `L ∈ [p_hat, 1]` such that `d(p_hat ‖ (p_hat+L)/2) ≤ budget`.
///
/// `d` is monotone increasing in `L` on that interval, so the root is unique;
/// bisection runs to an interval width of 1e−13 (within the 1e−10 contract)
/// with a 200-iteration cap, returning the upper bracket end so the result
/// never undershoots the true root. A budget at or above the divergence at
/// `L = 1` yields 1 (a vacuous bound for the caller to interpret).
pub fn invert_binary_kl(p_hat: f64, budget: f64) -> Result<f64, NumericsError> {
    check_unit("p_hat", p_hat)?;
    if budget < 0.0 || budget.is_nan() {
        return Err(NumericsError::OutOfRange {
            name: "budget",
            value: budget,
            expected: "[0, inf)",
        });
    }
    if p_hat >= 1.0 {
        return Ok(1.0);
    }
    // q = (p_hat + L)/2 stays inside (0, 1) for L in (p_hat, 1], so the
    // divergence below never errors.
    let d_at = |l: f64| binary_kl(p_hat, (p_hat + l) / 2.0).expect("q interior");
    if d_at(1.0) <= budget {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (p_hat, 1.0);
    for _ in 0..200 {
        if hi - lo <= 1e-13 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if d_at(mid) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Empirical joint counts of a discrete loss outcome against the membership
/// bit `s ∈ {0, 1}`.
///
/// Rows index the value alphabet (loss pairs in {0,1}², differences in
/// {−1,0,1}, or single losses in {0,1}); the two columns index `s`. Column
/// sums equal the number of observations assigned to each bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointHistogram {
    counts: Vec<[u64; 2]>,
}

impl JointHistogram {
    pub fn new(value_count: usize) -> Self {
        Self {
            counts: vec![[0, 0]; value_count],
        }
    }

    pub fn from_counts(counts: Vec<[u64; 2]>) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, value: usize, s: usize) {
        self.counts[value][s] += 1;
    }

    pub fn counts(&self) -> &[[u64; 2]] {
        &self.counts
    }

    pub fn value_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|r| r[0] + r[1]).sum()
    }

    /// Pool another histogram over the same alphabet into this one.
    pub fn absorb(&mut self, other: &JointHistogram) {
        assert_eq!(self.counts.len(), other.counts.len(), "alphabet mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a[0] += b[0];
            a[1] += b[1];
        }
    }

    /// Pushforward through a value map: row `v` of the result accumulates
    /// every source row with `map[i] = v`. Used to collapse loss pairs into
    /// loss differences so the data-processing inequality holds exactly on
    /// the empirical tables.
    pub fn pushforward(&self, map: &[usize], new_value_count: usize) -> JointHistogram {
        assert_eq!(map.len(), self.counts.len());
        let mut out = JointHistogram::new(new_value_count);
        for (i, row) in self.counts.iter().enumerate() {
            out.counts[map[i]][0] += row[0];
            out.counts[map[i]][1] += row[1];
        }
        out
    }
}

/// Plug-in mutual information of the empirical joint, in nats.
///
/// `Σ_{v,s} p(v,s)·log( p(v,s) / (p(v)·p(s)) )` with `p = counts/total` and
/// `0·log 0 = 0`. The raw plug-in is the estimator of record: the ordering
/// properties between the loss-pair, loss-difference, and single-loss tables
/// hold exactly only without bias correction.
pub fn plugin_mi(hist: &JointHistogram) -> Result<f64, NumericsError> {
    let total = hist.total();
    if total == 0 {
        return Err(NumericsError::NoObservations);
    }
    let n = total as f64;
    let mut col = [0u64; 2];
    for row in hist.counts() {
        col[0] += row[0];
        col[1] += row[1];
    }
    let mut mi = 0.0;
    for row in hist.counts() {
        let row_total = row[0] + row[1];
        if row_total == 0 {
            continue;
        }
        for s in 0..2 {
            if row[s] == 0 {
                continue;
            }
            let p = row[s] as f64 / n;
            let pv = row_total as f64 / n;
            let ps = col[s] as f64 / n;
            mi += p * (p / (pv * ps)).ln();
        }
    }
    Ok(mi.max(0.0))
}

/// Miller–Madow corrected plug-in MI (optional diagnostic; may be negative).
pub fn plugin_mi_miller_madow(hist: &JointHistogram) -> Result<f64, NumericsError> {
    let raw = plugin_mi(hist)?;
    let n = hist.total() as f64;
    let mut col = [0u64; 2];
    let mut k_joint = 0usize;
    let mut k_value = 0usize;
    for row in hist.counts() {
        col[0] += row[0];
        col[1] += row[1];
        if row[0] + row[1] > 0 {
            k_value += 1;
        }
        k_joint += usize::from(row[0] > 0) + usize::from(row[1] > 0);
    }
    let k_s = usize::from(col[0] > 0) + usize::from(col[1] > 0);
    let correction =
        ((k_value as f64 - 1.0) + (k_s as f64 - 1.0) - (k_joint as f64 - 1.0)) / (2.0 * n);
    Ok(raw + correction)
}

/// `log|I_d + scale·AᵀA|` for a matrix of centered probe rows, computed as
/// `log|I_m + scale·AAᵀ|` when `m < d` (the nonzero eigenvalues of `AᵀA` and
/// `AAᵀ` coincide). Rows must already be centered; `scale` folds in the
/// covariance normalization.
pub fn logdet_cov_gram(rows: &[Vec<f64>], scale: f64) -> Result<f64, NumericsError> {
    if rows.is_empty() {
        return Err(NumericsError::NoProbes);
    }
    if scale < 0.0 || !scale.is_finite() {
        return Err(NumericsError::OutOfRange {
            name: "scale",
            value: scale,
            expected: "[0, inf)",
        });
    }
    let m = rows.len();
    let d = rows[0].len();
    for row in rows {
        assert_eq!(row.len(), d, "ragged probe matrix");
    }
    if d == 0 {
        return Ok(0.0);
    }
    let side = m.min(d);
    // Gram matrix on the smaller side, plus the identity.
    let mut g = vec![0.0f64; side * side];
    if m <= d {
        for i in 0..m {
            for j in i..m {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                g[i * side + j] = scale * dot;
                g[j * side + i] = scale * dot;
            }
        }
    } else {
        for i in 0..d {
            for j in i..d {
                let dot: f64 = rows.iter().map(|r| r[i] * r[j]).sum();
                g[i * side + j] = scale * dot;
                g[j * side + i] = scale * dot;
            }
        }
    }
    for i in 0..side {
        g[i * side + i] += 1.0;
    }
    Ok(cholesky_logdet(&mut g, side).max(0.0))
}

/// In-place Cholesky log-determinant of a symmetric positive-definite matrix.
fn cholesky_logdet(a: &mut [f64], n: usize) -> f64 {
    let mut logdet = 0.0;
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        // I + PSD keeps diag >= 1 up to roundoff.
        let diag = diag.max(f64::MIN_POSITIVE);
        let l_jj = diag.sqrt();
        a[j * n + j] = l_jj;
        logdet += 2.0 * l_jj.ln();
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / l_jj;
        }
    }
    logdet
}

/// Which fast-rate constraint family a C2 value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum C1Variant {
    /// Parameter-side weighted bound: `C2 ∈ (0, log 2)`.
    Hypothesis,
    /// Loss-side weighted bound: `C2 ∈ (0, (log 2)/2)`, with the exponent
    /// `e^{2C2}` that the validity condition `λ' ≤ 2` actually requires.
    Loss,
}

/// Smallest admissible C1 for a given C2.
///
/// Hypothesis variant: `−log(2 − e^{C2})/C2 − 1`.
/// Loss variant: `−log(2 − e^{2C2})/(2C2) − 1`.
pub fn min_c1(c2: f64, variant: C1Variant) -> Result<f64, NumericsError> {
    match variant {
        C1Variant::Hypothesis => {
            if !(c2 > 0.0 && c2 < LOG_2) {
                return Err(NumericsError::ConstraintViolated {
                    c2,
                    variant: "hypothesis",
                    interval: "(0, log 2)",
                });
            }
            Ok(-(2.0 - c2.exp()).ln() / c2 - 1.0)
        }
        C1Variant::Loss => {
            if !(c2 > 0.0 && c2 < LOG_2 / 2.0) {
                return Err(NumericsError::ConstraintViolated {
                    c2,
                    variant: "loss",
                    interval: "(0, (log 2)/2)",
                });
            }
            Ok(-(2.0 - (2.0 * c2).exp()).ln() / (2.0 * c2) - 1.0)
        }
    }
}

/// Log-spaced C2 grid covering the admissible interval of `variant`.
///
/// The top point sits at `(1 − 1e−9)` of the interval endpoint so the
/// interpolating limit `C2 → (log 2)/2` is reachable while C1 stays finite.
pub fn c2_grid(variant: C1Variant, points: usize) -> Vec<f64> {
    assert!(points >= 2);
    let max = match variant {
        C1Variant::Hypothesis => LOG_2,
        C1Variant::Loss => LOG_2 / 2.0,
    };
    let lo = (1e-4f64).ln();
    let hi = (1.0 - 1e-9f64).ln();
    (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            max * (lo + t * (hi - lo)).exp()
        })
        .collect()
}
