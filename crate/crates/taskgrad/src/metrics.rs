//! Result statistics: relative per-task improvement, cosine-similarity
//! traces, and a paired one-sided Student's t-test whose tail probability is
//! computed in-repo via the regularized incomplete beta function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::StepRecord;

/// Errors from metric computation.
#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("single-task baseline is zero; relative improvement undefined")]
    ZeroBaseline,
    #[error("no values supplied")]
    Empty,
    #[error("paired samples have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least {need} paired observations, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("step {step} carries no update-vs-task cosine diagnostics")]
    MissingDiagnostics { step: u64 },
}

/// Signed percentage gain of a multitask model over a single-task baseline:
/// `100 · σ · (M − S)/S` with `σ = −1` when lower is better, `+1` otherwise.
/// Positive means the multitask model wins on this task.
pub fn delta_k(m: f64, s: f64, lower_is_better: bool) -> Result<f64, MetricsError> {
    if s == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    let sign = if lower_is_better { -1.0 } else { 1.0 };
    Ok(100.0 * sign * (m - s) / s)
}

/// Per-task relative improvements with their aggregate statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    /// Per-task signed percentage improvements.
    pub deltas: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    /// Sample standard deviation over tasks (0 for a single task).
    pub std: f64,
    /// Optional per-task significance marks from paired t-tests across
    /// seeds; empty when no test was run.
    pub significant: Vec<bool>,
}

impl ImprovementReport {
    /// Aggregate a set of per-task improvements.
    pub fn from_deltas(deltas: Vec<f64>) -> Result<Self, MetricsError> {
        if deltas.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mean = mean(&deltas);
        let median = median(&deltas);
        let max = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
        let std = sample_std(&deltas);
        Ok(Self { deltas, mean, median, max, min, std, significant: Vec::new() })
    }
}

/// Arithmetic mean (callers guarantee non-empty input).
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median via sorting; even lengths average the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN metric values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Sample standard deviation (divisor n−1); 0 when fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Per-step mean (over tasks) of the cosine between each task gradient and
/// the applied update, extracted from step records.
pub fn cosine_trace(records: &[StepRecord]) -> Result<Vec<f64>, MetricsError> {
    records
        .iter()
        .map(|r| {
            if r.update_task_cos.is_empty() {
                Err(MetricsError::MissingDiagnostics { step: r.step })
            } else {
                Ok(mean(&r.update_task_cos))
            }
        })
        .collect()
}

/// Outcome of a paired one-sided t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestOutcome {
    /// Paired t statistic `d̄ / (s_d/√n)` over differences `a − b`.
    pub t: f64,
    /// Right-tail probability `P(T_{n−1} ≥ t)`.
    pub p: f64,
    /// Whether `p < α` (never true for a degenerate sample).
    pub significant: bool,
    /// Zero variance of differences: the statistic is undefined and no
    /// significance is claimed.
    pub degenerate: bool,
}

/// Paired one-sided Student's t-test of the alternative "mean(a) exceeds
/// mean(b)". To ask whether a method's losses are significantly smaller
/// than a baseline's, pass the baseline as `a` and the method as `b`.
pub fn paired_ttest_one_sided(a: &[f64], b: &[f64], alpha: f64) -> Result<TTestOutcome, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 2 {
        return Err(MetricsError::TooShort { need: 2, got: a.len() });
    }
    let n = a.len();
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d_bar = mean(&diffs);
    let ss: f64 = diffs.iter().map(|d| (d - d_bar) * (d - d_bar)).sum();
    let var = ss / (n - 1) as f64;
    if var == 0.0 {
        let t = if d_bar == 0.0 { 0.0 } else { f64::INFINITY.copysign(d_bar) };
        return Ok(TTestOutcome { t, p: f64::NAN, significant: false, degenerate: true });
    }
    let se = (var / n as f64).sqrt();
    let t = d_bar / se;
    let p = student_t_right_tail(t, (n - 1) as f64);
    Ok(TTestOutcome { t, p, significant: p < alpha, degenerate: false })
}

/// `P(T_ν ≥ t)` for Student's t with `ν` degrees of freedom, through the
/// identity `P(|T| ≥ |t|) = I_x(ν/2, 1/2)` with `x = ν/(ν + t²)`.
pub fn student_t_right_tail(t: f64, nu: f64) -> f64 {
    assert!(nu > 0.0, "degrees of freedom must be positive");
    if t == 0.0 {
        return 0.5;
    }
    let x = nu / (nu + t * t);
    let half = 0.5 * betai_reg(0.5 * nu, 0.5, x);
    if t > 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// Natural log of the gamma function (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    // nine-term Lanczos coefficients for g = 7
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    const BASE: f64 = 0.99999999999980993;
    if x < 0.5 {
        // reflection: Γ(x)Γ(1−x) = π/sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = BASE;
    for (i, c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta function `I_x(a, b)` via Lentz's continued
/// fraction, using the symmetry `I_x(a,b) = 1 − I_{1−x}(b,a)` to stay in
/// the fast-converging regime.
pub fn betai_reg(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "x must be in [0, 1], got {x}");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
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

/// Continued-fraction kernel of the incomplete beta function (modified
/// Lentz iteration).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
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
        // even step
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
        // odd step
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
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn delta_examples() {
        assert_eq!(delta_k(1.0, 1.0, true).unwrap(), 0.0);
        assert_eq!(delta_k(0.7, 0.7, false).unwrap(), 0.0);
        // mean squared error halves: +50%
        assert_abs_diff_eq!(delta_k(0.5, 1.0, true).unwrap(), 50.0, epsilon = 1e-12);
        // accuracy 0.8 -> 0.9: +12.5%
        assert_abs_diff_eq!(delta_k(0.9, 0.8, false).unwrap(), 12.5, epsilon = 1e-12);
        assert_eq!(delta_k(1.0, 0.0, true), Err(MetricsError::ZeroBaseline));
    }

    #[test]
    fn delta_sign_law_over_all_four_combinations() {
        // (metric direction, better model) in all four combinations
        let cases = [
            (0.5, 1.0, true, true),   // lower better, model lower: wins
            (2.0, 1.0, true, false),  // lower better, model higher: loses
            (0.9, 0.8, false, true),  // higher better, model higher: wins
            (0.7, 0.8, false, false), // higher better, model lower: loses
        ];
        for (m, s, lower, wins) in cases {
            let delta = delta_k(m, s, lower).unwrap();
            assert_eq!(delta > 0.0, wins, "m={m} s={s} lower={lower}");
            assert_ne!(delta, 0.0);
        }
    }

    #[test]
    fn report_aggregates_recompute_exactly() {
        let deltas = vec![12.5, -3.0, 50.0, 0.25, -17.75];
        let report = ImprovementReport::from_deltas(deltas.clone()).unwrap();
        assert_eq!(report.deltas, deltas);
        assert_eq!(report.mean, mean(&deltas));
        assert_eq!(report.median, median(&deltas));
        assert_eq!(report.max, 50.0);
        assert_eq!(report.min, -17.75);
        assert_eq!(report.std, sample_std(&deltas));
        assert_eq!(report.median, 0.25);
        assert!(report.significant.is_empty());
        assert!(ImprovementReport::from_deltas(vec![]).is_err());
    }

    #[test]
    fn median_handles_even_lengths_and_single_values() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(sample_std(&[7.0]), 0.0);
        // std of [1,2,3]: variance 1
        assert_abs_diff_eq!(sample_std(&[1.0, 2.0, 3.0]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_trace_means_over_tasks() {
        let record = |step: u64, cos: Vec<f64>| StepRecord {
            step,
            epoch: 0,
            raw_losses: vec![0.0],
            losses: vec![0.0],
            task_norms: vec![1.0],
            weights: vec![1.0],
            scale: 1.0,
            alphas: None,
            pairwise_cos: vec![],
            update_task_cos: cos,
            rotation_losses: None,
            lr_network: 0.1,
            lr_rotation: 0.05,
            notes: vec![],
        };
        // single task, aligned update: cosine 1 at every step
        let trace = cosine_trace(&[record(0, vec![1.0]), record(1, vec![1.0])]).unwrap();
        assert_eq!(trace, vec![1.0, 1.0]);
        // two identical task gradients: both cosines 1
        let trace = cosine_trace(&[record(0, vec![1.0, 1.0])]).unwrap();
        assert_eq!(trace, vec![1.0]);
        // K=2 orthogonal unit gradients, plain sum: each cosine 1/sqrt(2)
        let c = 1.0 / 2.0f64.sqrt();
        let trace = cosine_trace(&[record(0, vec![c, c])]).unwrap();
        assert_abs_diff_eq!(trace[0], c, epsilon = 1e-15);
        assert!(trace.iter().all(|v| (-1.0..=1.0).contains(v)));
        // missing diagnostics are rejected
        assert_eq!(
            cosine_trace(&[record(7, vec![])]),
            Err(MetricsError::MissingDiagnostics { step: 7 })
        );
    }

    #[test]
    fn orthogonal_pair_cosine_from_real_geometry() {
        // unit gradients e1 and e2; plain-sum update (1,1)/|.| has cosine
        // 1/sqrt(2) with each task gradient
        let g1: [f64; 2] = [1.0, 0.0];
        let g2: [f64; 2] = [0.0, 1.0];
        let update = [g1[0] + g2[0], g1[1] + g2[1]];
        let norm = (update[0] * update[0] + update[1] * update[1]).sqrt();
        let cos1 = (g1[0] * update[0] + g1[1] * update[1]) / norm;
        assert_abs_diff_eq!(cos1, 1.0 / 2.0f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert_abs_diff_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(2.0), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(5.0), 24.0f64.ln(), epsilon = 1e-12);
        // Γ(1/2) = sqrt(pi)
        assert_abs_diff_eq!(ln_gamma(0.5), 0.5 * std::f64::consts::PI.ln(), epsilon = 1e-12);
        // Γ(3/2) = sqrt(pi)/2
        assert_abs_diff_eq!(
            ln_gamma(1.5),
            0.5 * std::f64::consts::PI.ln() - 2.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn incomplete_beta_reference_values() {
        // I_x(1,1) = x
        for x in [0.1, 0.33, 0.5, 0.9] {
            assert_abs_diff_eq!(betai_reg(1.0, 1.0, x), x, epsilon = 1e-12);
        }
        // binomial identity: I_{0.25}(2,3) = 0.26171875 exactly
        assert_abs_diff_eq!(betai_reg(2.0, 3.0, 0.25), 0.26171875, epsilon = 1e-12);
        // symmetry point
        assert_abs_diff_eq!(betai_reg(0.5, 0.5, 0.5), 0.5, epsilon = 1e-12);
        // complement identity on random-ish arguments
        for (a, b, x) in [(2.0, 0.5, 0.1), (3.5, 1.25, 0.7), (0.5, 4.0, 0.02)] {
            assert_abs_diff_eq!(
                betai_reg(a, b, x),
                1.0 - betai_reg(b, a, 1.0 - x),
                epsilon = 1e-12
            );
        }
        // endpoints
        assert_eq!(betai_reg(2.0, 3.0, 0.0), 0.0);
        assert_eq!(betai_reg(2.0, 3.0, 1.0), 1.0);
        // independent high-precision evaluation of I_0.1(2, 0.5)
        assert_abs_diff_eq!(betai_reg(2.0, 0.5, 0.1), 3.8825370469605104e-3, epsilon = 1e-12);
    }

    #[test]
    fn t_tail_reference_values() {
        // nu=1 is Cauchy: P(T >= 1) = 1/4 exactly
        assert_abs_diff_eq!(student_t_right_tail(1.0, 1.0), 0.25, epsilon = 1e-12);
        // nu=2 closed form: P(T >= t) = 1/2 - t/(2*sqrt(2+t^2))
        assert_abs_diff_eq!(
            student_t_right_tail(2.0f64.sqrt(), 2.0),
            0.14644660940672624,
            epsilon = 1e-12
        );
        // independent high-precision evaluations
        assert_abs_diff_eq!(student_t_right_tail(2.0, 4.0), 0.058058261758407795, epsilon = 1e-12);
        assert_abs_diff_eq!(
            student_t_right_tail(6.0, 4.0),
            1.9412685234802551e-3,
            epsilon = 1e-12
        );
        // symmetry and the central point
        assert_eq!(student_t_right_tail(0.0, 7.0), 0.5);
        assert_abs_diff_eq!(
            student_t_right_tail(-6.0, 4.0),
            1.0 - student_t_right_tail(6.0, 4.0),
            epsilon = 1e-15
        );
        // one-tailed 5% critical values from statistical tables
        assert_abs_diff_eq!(student_t_right_tail(2.131846786, 4.0), 0.05, epsilon = 1e-9);
        assert_abs_diff_eq!(student_t_right_tail(1.812461123, 10.0), 0.05, epsilon = 1e-9);
    }

    #[test]
    fn paired_test_hand_fixture() {
        // d = a - b = [-1,-1,-1,-1,-2]: mean -1.2, variance 0.2, se 0.2,
        // t = -6 exactly
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 7.0];
        let out = paired_ttest_one_sided(&a, &b, 0.05).unwrap();
        assert_abs_diff_eq!(out.t, -6.0, epsilon = 1e-10);
        assert!(!out.degenerate);
        // right tail at t=-6 is ~0.998: a is NOT above b
        assert!(!out.significant);
        assert_abs_diff_eq!(out.p, 0.9980587314765197, epsilon = 1e-10);
        // swapped direction: b exceeds a, significantly
        let out = paired_ttest_one_sided(&b, &a, 0.05).unwrap();
        assert_abs_diff_eq!(out.t, 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(out.p, 1.9412685234802551e-3, epsilon = 1e-10);
        assert!(out.significant);
    }

    #[test]
    fn paired_test_degenerate_and_trivial_cases() {
        // identical samples: t = 0, not significant
        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        let out = paired_ttest_one_sided(&a, &a, 0.05).unwrap();
        assert_eq!(out.t, 0.0);
        assert!(out.degenerate);
        assert!(!out.significant);
        // constant nonzero difference: degenerate, never significant
        let b: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
        let out = paired_ttest_one_sided(&a, &b, 0.05).unwrap();
        assert!(out.degenerate);
        assert!(!out.significant);
        assert_eq!(out.t, f64::INFINITY);
        // mismatched lengths and tiny samples are rejected
        assert!(matches!(
            paired_ttest_one_sided(&[1.0], &[1.0, 2.0], 0.05),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            paired_ttest_one_sided(&[1.0], &[1.0], 0.05),
            Err(MetricsError::TooShort { .. })
        ));
    }

    #[test]
    fn paired_test_detects_consistent_gains_with_jitter() {
        // differences of +1 with small jitter, n = 5: strongly significant
        let b = [10.0, 11.0, 12.0, 13.0, 14.0];
        let a: Vec<f64> = b
            .iter()
            .zip([1.001, 0.999, 1.0005, 0.9995, 1.0])
            .map(|(v, j)| v + j)
            .collect();
        let out = paired_ttest_one_sided(&a, &b, 0.05).unwrap();
        assert!(out.t > 2.131846786, "t = {} must clear the 5% critical value", out.t);
        assert!(out.significant);
        assert!(out.p < 1e-6);
    }
}
