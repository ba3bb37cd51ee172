//! Posterior smoothing, thresholded detection and sample-wise metrics.

use serde::{Deserialize, Serialize};

use crate::data::StateSequence;
use crate::error::{Error, Result};
use crate::inference::PosteriorSequence;
use crate::signal::{moving_average, window_samples};

/// What the moving-average window is applied to before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingTarget {
    /// The seizure-state posterior probability.
    #[default]
    Probability,
    /// The 0/1 indicator that the seizure state is the most probable state.
    Labels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub smoothing_window_s: f64,
    pub threshold: f64,
    pub smoothing_target: SmoothingTarget,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            smoothing_window_s: 5.0,
            threshold: 0.5,
            smoothing_target: SmoothingTarget::Probability,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_window_s > 0.0) || !self.smoothing_window_s.is_finite() {
            return Err(Error::InvalidParameter("smoothing window must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub seizure_prob: Vec<f64>,
    pub predicted: Vec<bool>,
    pub threshold: f64,
}

/// Sample-wise detection metrics. Quantities that are undefined for the
/// given data (an empty class) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub mcc: f64,
    pub auc_roc: Option<f64>,
    pub auc_pr: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("probabilities must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Centered moving average over `window_s` seconds, truncated at the edges.
pub fn smooth_probability(probs: &[f64], window_s: f64, sampling_rate_hz: f64) -> Result<Vec<f64>> {
    check_probs(probs)?;
    if !(window_s > 0.0) || !(sampling_rate_hz > 0.0) {
        return Err(Error::InvalidParameter(
            "window and sampling rate must be positive".into(),
        ));
    }
    if probs.is_empty() {
        return Ok(Vec::new());
    }
    let w = window_samples(window_s, sampling_rate_hz);
    Ok(moving_average(probs, w)
        .into_iter()
        .map(|p| p.clamp(0.0, 1.0))
        .collect())
}

/// `p > threshold`, strictly.
pub fn threshold_detect(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > threshold).collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    if a == 0 {
        return Err(Error::InvalidParameter("cannot evaluate an empty sequence".into()));
    }
    Ok(())
}

/// Sensitivity, specificity and MCC; the AUC fields are left `None`.
pub fn confusion_metrics(predicted: &[bool], truth: &[bool]) -> Result<MetricsReport> {
    check_lengths(truth.len(), predicted.len())?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: u64, b: u64| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    let (tpf, fpf, tnf, fnf) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
    let denom = (tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf);
    let mcc = if denom == 0.0 {
        0.0
    } else {
        ((tpf * tnf - fpf * fnf) / denom.sqrt()).clamp(-1.0, 1.0)
    };
    Ok(MetricsReport {
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        mcc,
        auc_roc: None,
        auc_pr: None,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// `(positives, total)` per distinct score, highest score first.
fn descending_groups(scores: &[f64], truth: &[bool]) -> Result<Vec<(u64, u64)>> {
    check_lengths(truth.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last = f64::NAN;
    for i in order {
        if scores[i] != last {
            groups.push((0, 0));
            last = scores[i];
        }
        let g = groups.last_mut().expect("group pushed");
        g.0 += truth[i] as u64;
        g.1 += 1;
    }
    Ok(groups)
}

/// Area under the ROC curve by the trapezoid rule over every distinct
/// threshold. Equals the probability that a random positive outscores a
/// random negative, ties counted half.
pub fn auc_roc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let groups = descending_groups(scores, truth)?;
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1 - g.0).sum();
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined("truth has a single class"));
    }
    // Integrate in integer counts, normalize once at the end.
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    for (p, n) in groups {
        let n = n - p;
        twice_area += (n as u128) * (2 * tp as u128 + p as u128);
        tp += p;
        fp += n;
    }
    debug_assert_eq!((tp, fp), (pos, neg));
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Area under the precision-recall step curve,
/// `sum_i (R_i - R_{i-1}) P_i` over descending distinct thresholds.
pub fn auc_pr(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let groups = descending_groups(scores, truth)?;
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    if pos == 0 {
        return Err(Error::AucUndefined("truth has no positives"));
    }
    // Accumulate sum_i p_i tp_i / seen_i in double-double and divide by the
    // positive count once, so simple rational cases round correctly.
    let (mut tp, mut seen) = (0u64, 0u64);
    let mut area = DoubleDouble::default();
    for (p, n) in groups {
        tp += p;
        seen += n;
        if p > 0 {
            area.add_quotient((p * tp) as f64, seen as f64);
        }
    }
    Ok(area.div(pos as f64))
}

#[derive(Default)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    fn add(&mut self, v: f64) {
        let s = self.hi + v;
        let bv = s - self.hi;
        let err = (self.hi - (s - bv)) + (v - bv);
        let lo = self.lo + err;
        self.hi = s + lo;
        self.lo = lo - (self.hi - s);
    }

    /// Add `a / b` carrying the rounding error of the division.
    fn add_quotient(&mut self, a: f64, b: f64) {
        let q = a / b;
        let r = (-q).mul_add(b, a) / b;
        self.add(q);
        self.add(r);
    }

    fn div(&self, d: f64) -> f64 {
        let q = self.hi / d;
        let r = (-q).mul_add(d, self.hi) + self.lo;
        q + r / d
    }
}

/// Smooth, threshold and score one posterior against its labels.
/// `seizure_state` is zero-based.
pub fn evaluate_sequence(
    gamma: &PosteriorSequence,
    truth: &StateSequence,
    seizure_state: usize,
    sampling_rate_hz: f64,
    config: &DetectionConfig,
) -> Result<(DetectionResult, MetricsReport)> {
    config.validate()?;
    check_lengths(truth.len(), gamma.len())?;
    if seizure_state >= gamma.num_states() {
        return Err(Error::LabelOutOfRange {
            label: seizure_state + 1,
            k: gamma.num_states(),
        });
    }
    truth.validate(gamma.num_states())?;
    let raw: Vec<f64> = match config.smoothing_target {
        SmoothingTarget::Probability => gamma.column(seizure_state),
        SmoothingTarget::Labels => gamma
            .rows()
            .map(|r| {
                let best = r[seizure_state];
                let is_max = r
                    .iter()
                    .enumerate()
                    .all(|(k, &v)| v < best || (v == best && k >= seizure_state));
                if is_max {
                    1.0
                } else {
                    0.0
                }
            })
            .collect(),
    };
    let seizure_prob = smooth_probability(&raw, config.smoothing_window_s, sampling_rate_hz)?;
    let predicted = threshold_detect(&seizure_prob, config.threshold);
    let truth_bin: Vec<bool> = truth.0.iter().map(|&z| z == seizure_state).collect();
    let mut report = confusion_metrics(&predicted, &truth_bin)?;
    report.auc_roc = auc_roc(&seizure_prob, &truth_bin).ok();
    report.auc_pr = auc_pr(&seizure_prob, &truth_bin).ok();
    Ok((
        DetectionResult {
            seizure_prob,
            predicted,
            threshold: config.threshold,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::test_support::rng;
    use hmsmm_oracles as oracle;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn smoothing_cases() {
        let s = smooth_probability(&[0.7; 100], 5.0, 10.0).unwrap();
        assert!(s.iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut x = vec![0.0; 20_000];
        x[10_000] = 1.0;
        let s = smooth_probability(&x, 5.0, 500.0).unwrap();
        assert!((s[10_000] - 4e-4).abs() < 1e-15);

        let step: Vec<f64> = (0..3000).map(|t| if t < 1500 { 0.0 } else { 1.0 }).collect();
        let s = smooth_probability(&step, 1.0, 500.0).unwrap();
        let want = oracle::naive_moving_average(&step, 500);
        for (a, b) in s.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        assert!(smooth_probability(&[1.5], 1.0, 1.0).is_err());
    }

    #[test]
    fn threshold_ties_are_negative() {
        assert_eq!(threshold_detect(&[0.49, 0.50, 0.51], 0.5), vec![false, false, true]);
        assert!(threshold_detect(&[0.0; 10], 0.5).iter().all(|&b| !b));
        let mut r = rng(1);
        let p: Vec<f64> = (0..500).map(|_| r.random_range(0.0..1.0)).collect();
        let d = threshold_detect(&p, 0.3);
        for (x, y) in p.iter().zip(d) {
            assert_eq!(y, *x > 0.3);
        }
    }

    fn counts(tp: usize, fn_: usize, tn: usize, fp: usize) -> (Vec<bool>, Vec<bool>) {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (n, p, t) in [
            (tp, true, true),
            (fn_, false, true),
            (tn, false, false),
            (fp, true, false),
        ] {
            pred.extend(std::iter::repeat_n(p, n));
            truth.extend(std::iter::repeat_n(t, n));
        }
        (pred, truth)
    }

    #[test]
    fn confusion_cases() {
        let truth = vec![true, false, true, false];
        let m = confusion_metrics(&truth, &truth).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.mcc), (Some(1.0), Some(1.0), 1.0));

        let (p, t) = counts(25, 25, 25, 25);
        assert_eq!(confusion_metrics(&p, &t).unwrap().mcc, 0.0);

        let (p, t) = counts(40, 10, 35, 15);
        let m = confusion_metrics(&p, &t).unwrap();
        assert!((m.sensitivity.unwrap() - 0.8).abs() < 1e-15);
        assert!((m.specificity.unwrap() - 0.7).abs() < 1e-15);
        let want = (40.0 * 35.0 - 15.0 * 10.0) / (55.0f64 * 50.0 * 50.0 * 45.0).sqrt();
        assert!((m.mcc - want).abs() < 1e-15);
        assert!((m.mcc - 0.5025).abs() < 1e-4);

        let m = confusion_metrics(&[false, false], &[false, false]).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.mcc, 0.0);
        assert!(confusion_metrics(&[true], &[true, false]).is_err());
    }

    #[test]
    fn auc_cases() {
        let truth = [true, true, false, false];
        assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &truth).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.5; 4], &truth).unwrap(), 0.5);
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[true, true]),
            Err(Error::AucUndefined(_))
        ));
        assert!(Error::AucUndefined("x").to_string().starts_with("AUC undefined"));

        assert_eq!(auc_pr(&[0.9, 0.8, 0.2, 0.1], &truth).unwrap(), 1.0);
        let hand = auc_pr(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert_eq!(hand, 5.0 / 6.0);
        assert!(auc_pr(&[0.1], &[false]).is_err());
    }

    #[test]
    fn auc_pr_random_scores_approach_prevalence() {
        let mut r = rng(2);
        let truth: Vec<bool> = (0..10_000).map(|_| r.random_bool(0.3)).collect();
        let scores: Vec<f64> = (0..10_000).map(|_| r.random_range(0.0..1.0)).collect();
        let prevalence = truth.iter().filter(|&&t| t).count() as f64 / 1e4;
        assert!((auc_pr(&scores, &truth).unwrap() - prevalence).abs() < 0.05);
    }

    #[test]
    fn auc_roc_matches_pairwise_statistic() {
        let mut r = rng(3);
        for case in 0..100 {
            let n = r.random_range(2..=500);
            let quantized = case % 2 == 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let s: f64 = r.random_range(0.0..1.0);
                    if quantized {
                        (s * 10.0).floor() / 10.0
                    } else {
                        s
                    }
                })
                .collect();
            let mut truth: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            truth[0] = true;
            truth[1] = false;
            let got = auc_roc(&scores, &truth).unwrap();
            assert!((got - oracle::pairwise_auc(&scores, &truth)).abs() < 1e-12);
        }
    }

    fn one_hot(states: &[usize], k: usize) -> PosteriorSequence {
        let mut g = vec![0.0; states.len() * k];
        for (t, &s) in states.iter().enumerate() {
            g[t * k + s] = 1.0;
        }
        PosteriorSequence::new(g, k, 0.0).unwrap()
    }

    #[test]
    fn perfect_posterior_scores_perfectly() {
        let states: Vec<usize> = (0..3000)
            .map(|t| {
                if t < 1000 {
                    0
                } else if t < 2000 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let truth = StateSequence(states.clone());
        for target in [SmoothingTarget::Probability, SmoothingTarget::Labels] {
            // 501-sample window: symmetric around every sample.
            let cfg = DetectionConfig {
                smoothing_window_s: 5.01,
                smoothing_target: target,
                ..DetectionConfig::default()
            };
            let (_, m) = evaluate_sequence(&one_hot(&states, 3), &truth, 1, 100.0, &cfg).unwrap();
            assert_eq!((m.sensitivity, m.specificity, m.mcc), (Some(1.0), Some(1.0), 1.0));
            assert_eq!((m.auc_roc, m.auc_pr), (Some(1.0), Some(1.0)));

            // An even window puts exactly half its mass on each side of the
            // onset, and the strict threshold rejects that one sample.
            let cfg = DetectionConfig {
                smoothing_window_s: 5.0,
                ..cfg
            };
            let (d, m) = evaluate_sequence(&one_hot(&states, 3), &truth, 1, 100.0, &cfg).unwrap();
            // The first post-seizure sample also sits at 0.5 and ties with it.
            assert_eq!(d.seizure_prob[1000], 0.5);
            assert_eq!(d.seizure_prob[2000], 0.5);
            assert_eq!((m.fn_, m.fp), (1, 0));
            assert!(m.auc_roc.unwrap() > 0.9999 && m.auc_pr.unwrap() > 0.9999);
        }
    }

    #[test]
    fn uniform_posterior_detects_nothing() {
        let states: Vec<usize> = (0..600).map(|t| t / 200).collect();
        let g = PosteriorSequence::new(vec![1.0 / 3.0; 1800], 3, 0.0).unwrap();
        let (d, m) = evaluate_sequence(&g, &StateSequence(states), 1, 100.0, &DetectionConfig::default()).unwrap();
        assert!(d.predicted.iter().all(|&p| !p));
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.auc_roc, Some(0.5));
    }

    #[test]
    fn single_class_truth_leaves_aucs_absent() {
        let g = PosteriorSequence::new(vec![0.5; 20], 2, 0.0).unwrap();
        let (_, m) = evaluate_sequence(&g, &StateSequence(vec![0; 10]), 1, 10.0, &DetectionConfig::default()).unwrap();
        assert_eq!((m.auc_roc, m.auc_pr, m.sensitivity), (None, None, None));
    }

    #[test]
    fn detection_is_local() {
        let mut r = rng(4);
        let p: Vec<f64> = (0..2000).map(|_| r.random_range(0.0..1.0)).collect();
        let w = 50;
        let short = threshold_detect(&smooth_probability(&p[..1000], 5.0, 10.0).unwrap(), 0.5);
        let long = threshold_detect(&smooth_probability(&p, 5.0, 10.0).unwrap(), 0.5);
        assert_eq!(&short[..1000 - w], &long[..1000 - w]);
    }

    proptest! {
        #[test]
        fn mcc_symmetric_under_class_swap(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..200)) {
            let (p, t): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let a = confusion_metrics(&p, &t).unwrap().mcc;
            let np: Vec<bool> = p.iter().map(|b| !b).collect();
            let nt: Vec<bool> = t.iter().map(|b| !b).collect();
            let b = confusion_metrics(&np, &nt).unwrap().mcc;
            prop_assert!((a - b).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
