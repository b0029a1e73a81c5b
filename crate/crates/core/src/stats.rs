//! Correlation and regression with hand-rolled distribution functions.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest p-value ever reported.
pub const P_VALUE_FLOOR: f64 = 1e-15;

const MAX_ITER: usize = 500;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

/// Paired observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Input(format!("sample has {} x values and {} y values", x.len(), y.len())));
        }
        if x.len() < 3 {
            return Err(Error::Input(format!("sample needs at least 3 pairs, got {}", x.len())));
        }
        if let Some(i) = x.iter().chain(&y).position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at position {}", i % x.len())));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value_slope: f64,
    pub n: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Centered sums `(Sxx, Syy, Sxy)`.
fn moments(s: &Sample) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (mean(&s.x), mean(&s.y));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in s.x.iter().zip(&s.y) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    (mx, my, sxx, syy, sxy)
}

/// Product-moment correlation with a Fisher-z interval `tanh(atanh r ± z/√(n−3))`.
pub fn pearson_ci(sample: &Sample, confidence: f64) -> Result<(f64, f64, f64)> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Input(format!("confidence {confidence} must lie in (0, 1)")));
    }
    let n = sample.len();
    if n < 4 {
        return Err(Error::Input(format!("a Fisher-z interval needs n >= 4, got {n}")));
    }
    let (_, _, sxx, syy, sxy) = moments(sample);
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in x or y".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let z = r.atanh();
    let half = normal_quantile(0.5 + confidence / 2.0) / ((n - 3) as f64).sqrt();
    Ok((r, (z - half).tanh(), (z + half).tanh()))
}

/// Least-squares line with a two-sided t-test on the slope (n − 2 degrees of freedom),
/// plus the 95% Pearson interval (`[-1, 1]` when n = 3).
pub fn ols_slope_test(sample: &Sample) -> Result<RegressionResult> {
    let n = sample.len();
    let (mx, my, sxx, syy, sxy) = moments(sample);
    if sxx == 0.0 {
        return Err(Error::Degenerate("zero variance in x".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = sample
        .x
        .iter()
        .zip(&sample.y)
        .map(|(&x, &y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let df = (n - 2) as f64;
    let slope_se = (sse / df / sxx).sqrt();
    let p = if slope_se == 0.0 {
        if slope == 0.0 {
            1.0
        } else {
            P_VALUE_FLOOR
        }
    } else {
        let t = (slope / slope_se).abs();
        (2.0 * student_t_cdf(-t, df)).clamp(P_VALUE_FLOOR, 1.0)
    };
    let (r, ci_low, ci_high) = if syy == 0.0 {
        (0.0, -1.0, 1.0)
    } else if n >= 4 {
        pearson_ci(sample, 0.95)?
    } else {
        ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), -1.0, 1.0)
    };
    Ok(RegressionResult {
        slope,
        intercept,
        slope_se,
        r,
        ci_low,
        ci_high,
        p_value_slope: p,
        n,
    })
}

/// Natural log of each value; a non-positive value is a domain error naming its index.
pub fn log_measure(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| if v > 0.0 { Ok(v.ln()) } else { Err(Error::Domain { index: i, value: v }) })
        .collect()
}

/// Keeps the pairs whose measure is positive and logs how many were dropped.
pub fn filter_positive(measure: &[f64], other: &[f64], label: &str) -> (Vec<f64>, Vec<f64>) {
    let (kept_m, kept_o): (Vec<f64>, Vec<f64>) = measure
        .iter()
        .zip(other)
        .filter(|(m, _)| **m > 0.0)
        .map(|(&m, &o)| (m, o))
        .unzip();
    let dropped = measure.len() - kept_m.len();
    if dropped > 0 {
        log::info!("{label}: dropped {dropped} non-positive values before taking logs");
    }
    (kept_m, kept_o)
}

// ---- special functions -----------------------------------------------------

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
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
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student-t CDF with `df` degrees of freedom (`df > 0`, fractional allowed).
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_nan() || !(df > 0.0) {
        return f64::NAN;
    }
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn inc_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        let mut sum = 1.0 / a;
        let mut term = sum;
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
    } else {
        1.0 - inc_gamma_q_cf(a, x)
    }
}

/// Upper tail `Q(a, x)` by continued fraction, valid for `x ≥ a + 1`.
fn inc_gamma_q_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 − P(a, x)`, computed without
/// cancellation in the upper tail.
pub fn inc_gamma_q(a: f64, x: f64) -> f64 {
    if x < a + 1.0 {
        1.0 - inc_gamma_p(a, x)
    } else {
        inc_gamma_q_cf(a, x)
    }
}

/// Standard normal CDF via `Φ(−z) = ½·Q(½, z²/2)`.
pub fn normal_cdf(z: f64) -> f64 {
    let tail = 0.5 * inc_gamma_q(0.5, z * z / 2.0);
    if z < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Standard normal quantile: Acklam's rational approximation refined by one Halley step.
pub fn normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    const A: [f64; 6] = [-3.969_683_028_665_376e1, 2.209_460_984_245_205e2, -2.759_285_104_469_687e2, 1.383_577_518_672_69e2, -3.066_479_806_614_716e1, 2.506_628_277_459_239];
    const B: [f64; 5] = [-5.447_609_879_822_406e1, 1.615_858_368_580_409e2, -1.556_989_798_598_866e2, 6.680_131_188_771_972e1, -1.328_068_155_288_572e1];
    const C: [f64; 6] = [-7.784_894_002_430_293e-3, -3.223_964_580_411_365e-1, -2.400_758_277_161_838, -2.549_732_539_343_734, 4.374_664_141_464_968, 2.938_163_982_698_783];
    const D: [f64; 4] = [7.784_695_709_041_462e-3, 3.224_671_290_700_398e-1, 2.445_134_137_142_996, 3.754_408_661_907_416];
    const P_LOW: f64 = 0.024_25;
    if p > 0.5 {
        // 1 − p is exact here, and the refinement below is accurate in the lower tail
        return -normal_quantile(1.0 - p);
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Student-t quantile by bisection on [`student_t_cdf`].
pub fn student_t_quantile(p: f64, df: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) || !(df > 0.0) {
        return f64::NAN;
    }
    if p == 0.5 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-1.0, 1.0);
    while student_t_cdf(lo, df) > p {
        lo *= 2.0;
    }
    while student_t_cdf(hi, df) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

// ---- CSV input --------------------------------------------------------------

/// One row of a measure-vs-accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub run_id: String,
    pub measure: String,
    pub value: f64,
    pub accuracy: f64,
}

pub fn read_measure_csv(path: &Path) -> Result<Vec<MeasureRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let rows = reader.deserialize().collect::<std::result::Result<Vec<MeasureRow>, _>>()?;
    Ok(rows)
}

/// Regresses accuracy on the measure named `measure` (optionally on its log).
pub fn regress_measure(rows: &[MeasureRow], measure: &str, log_x: bool) -> Result<RegressionResult> {
    let (values, acc): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.measure == measure)
        .map(|r| (r.value, r.accuracy))
        .unzip();
    if values.is_empty() {
        return Err(Error::Input(format!("no rows for measure `{measure}`")));
    }
    let (x, y) = if log_x {
        let (kept, acc) = filter_positive(&values, &acc, measure);
        (log_measure(&kept)?, acc)
    } else {
        (values, acc)
    };
    ols_slope_test(&Sample::new(x, y)?)
}
