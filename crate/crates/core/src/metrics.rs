//! Evaluation metrics for imbalanced binary risk prediction.

use std::fmt;

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Probabilities at or above this are predicted positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&y| y > 1) {
        Some(y) => Err(Error::validation(format!("label {y} is not 0 or 1"))),
        None => Ok(()),
    }
}

/// Average precision, `Σ (R_i - R_{i-1}) P_i` over descending distinct
/// score thresholds. Tied scores enter the curve together.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    check_labels(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::validation("average precision needs at least one positive label"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall_prev = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        check_lengths(predictions.len(), labels.len())?;
        check_labels(labels)?;
        check_labels(predictions)?;
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Positive-class F1; zero when precision and recall are both zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 || denom == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }

    /// Cohen's kappa. When chance agreement is 1 the result is 1 for perfect
    /// observed agreement and 0 otherwise.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let p_o = (self.tp + self.tn) as f64 / n;
        let pred_pos = (self.tp + self.fp) as f64 / n;
        let true_pos = (self.tp + self.fn_) as f64 / n;
        let p_e = pred_pos * true_pos + (1.0 - pred_pos) * (1.0 - true_pos);
        if p_e >= 1.0 {
            return if p_o >= 1.0 { 1.0 } else { 0.0 };
        }
        (p_o - p_e) / (1.0 - p_e)
    }
}

pub fn f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(Confusion::from_predictions(predictions, labels)?.f1())
}

pub fn cohen_kappa(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::validation("kappa of an empty sample"));
    }
    Ok(Confusion::from_predictions(predictions, labels)?.kappa())
}

pub fn threshold_predictions(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub pr_auc: f64,
    pub f1: f64,
    pub kappa: f64,
    pub n_samples: usize,
    pub threshold: f64,
}

impl MetricsReport {
    /// Scores positive-class probabilities against labels.
    pub fn evaluate(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let predictions = threshold_predictions(probs, threshold);
        let confusion = Confusion::from_predictions(&predictions, labels)?;
        Ok(MetricsReport {
            pr_auc: pr_auc(probs, labels)?,
            f1: confusion.f1(),
            kappa: cohen_kappa(&predictions, labels)?,
            n_samples: labels.len(),
            threshold,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.pr_auc.is_finite() && self.f1.is_finite() && self.kappa.is_finite()
    }

    pub fn to_kv(&self) -> String {
        format!(
            "pr_auc = {:.6}\nf1 = {:.6}\nkappa = {:.6}\nn_samples = {}\nthreshold = {:.6}\n",
            self.pr_auc, self.f1, self.kappa, self.n_samples, self.threshold
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let mut req = |key: &str| -> Result<f64> {
            kv.take(key)?
                .ok_or_else(|| Error::validation(format!("report is missing `{key}`")))
        };
        let pr_auc = req("pr_auc")?;
        let f1 = req("f1")?;
        let kappa = req("kappa")?;
        let threshold = req("threshold")?;
        let n_samples = kv
            .take("n_samples")?
            .ok_or_else(|| Error::validation("report is missing `n_samples`"))?;
        kv.finish()?;
        Ok(MetricsReport {
            pr_auc,
            f1,
            kappa,
            n_samples,
            threshold,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Arithmetic mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} ± {:.6}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateReport {
    pub pr_auc: MeanStd,
    pub f1: MeanStd,
    pub kappa: MeanStd,
    pub runs: usize,
}

impl AggregateReport {
    pub fn to_kv(&self) -> String {
        let mut out = format!("runs = {}\n", self.runs);
        for (name, m) in [("pr_auc", self.pr_auc), ("f1", self.f1), ("kappa", self.kappa)] {
            out.push_str(&format!("{name}_mean = {:.6}\n{name}_std = {:.6}\n", m.mean, m.std));
        }
        out
    }
}

pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::validation("no runs to aggregate"));
    }
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        pr_auc: col(|r| r.pr_auc),
        f1: col(|r| r.f1),
        kappa: col(|r| r.kappa),
        runs: reports.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn confusion_vectors(tp: usize, fp: usize, fn_: usize, tn: usize) -> (Vec<u8>, Vec<u8>) {
        let mut p = Vec::new();
        let mut y = Vec::new();
        for (count, pred, label) in [(tp, 1, 1), (fp, 1, 0), (fn_, 0, 1), (tn, 0, 0)] {
            p.extend(std::iter::repeat_n(pred, count));
            y.extend(std::iter::repeat_n(label, count));
        }
        (p, y)
    }

    #[test]
    fn hand_computed_average_precision() {
        // Thresholds 0.9 (R=1/2, P=1) and 0.7 (R=1, P=2/3).
        let ap = pr_auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn perfect_and_tied_rankings() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let labels = [1, 0, 0, 0, 1, 0, 0, 0];
        assert!((pr_auc(&[0.3; 8], &labels).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ties_are_not_broken_by_position() {
        let a = pr_auc(&[0.5, 0.5, 0.1], &[1, 0, 0]).unwrap();
        let b = pr_auc(&[0.5, 0.5, 0.1], &[0, 1, 0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn average_precision_errors() {
        assert!(pr_auc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(pr_auc(&[0.1], &[0, 1]).is_err());
        assert!(pr_auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
        assert!(pr_auc(&[0.1, 0.2], &[2, 0]).is_err());
    }

    #[test]
    fn f1_and_kappa_from_confusion_counts() {
        let (p, y) = confusion_vectors(4, 1, 2, 0);
        assert!((f1(&p, &y).unwrap() - 8.0 / 11.0).abs() < 1e-15);
        let (p, y) = confusion_vectors(4, 1, 2, 3);
        // p_o = 0.7, p_e = 0.5*0.6 + 0.5*0.4 = 0.5
        assert!((cohen_kappa(&p, &y).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_conventions() {
        assert_eq!(f1(&[0, 0, 0], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert!(cohen_kappa(&[], &[]).is_err());
    }

    #[test]
    fn report_thresholds_at_half() {
        let r = MetricsReport::evaluate(&[0.9, 0.5, 0.49, 0.1], &[1, 0, 1, 0], DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.n_samples, 4);
        assert_eq!(r.f1, 0.5);
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn report_kv_round_trip() {
        let r = MetricsReport {
            pr_auc: 0.8333333333,
            f1: 0.7272727,
            kappa: 0.4,
            n_samples: 10,
            threshold: 0.5,
        };
        let text = r.to_kv();
        assert_eq!(
            text,
            "pr_auc = 0.833333\nf1 = 0.727273\nkappa = 0.400000\nn_samples = 10\nthreshold = 0.500000\n"
        );
        let back = MetricsReport::from_kv(&text).unwrap();
        assert_eq!(back.to_kv(), text);
    }

    #[test]
    fn aggregation() {
        let r = |pr_auc| MetricsReport {
            pr_auc,
            f1: 0.5,
            kappa: 0.1,
            n_samples: 3,
            threshold: 0.5,
        };
        let one = aggregate_runs(&[r(0.6)]).unwrap();
        assert_eq!(one.pr_auc, MeanStd { mean: 0.6, std: 0.0 });
        let two = aggregate_runs(&[r(0.6), r(0.8)]).unwrap();
        assert!((two.pr_auc.mean - 0.7).abs() < 1e-15 && (two.pr_auc.std - 0.1).abs() < 1e-15);
        let five = aggregate_runs(&[r(0.3); 5]).unwrap();
        assert_eq!([five.pr_auc.std, five.f1.std, five.kappa.std], [0.0; 3]);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn random_scores_give_prevalence_level_precision() {
        use crate::rng;
        use rand::seq::SliceRandom;
        use rand::Rng;
        let n = 10_000;
        let draw = |seed: u64| {
            let mut r = rng::stream(seed, &[]);
            let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n / 2)).collect();
            labels.shuffle(&mut r);
            let scores: Vec<f64> = (0..n).map(|_| r.gen()).collect();
            pr_auc(&scores, &labels).unwrap()
        };
        let replicates: Vec<f64> = (1..=40).map(draw).collect();
        let sigma = MeanStd::of(&replicates).std;
        assert!(sigma > 0.0 && sigma < 0.02);
        assert!((draw(0) - 0.5).abs() < 3.0 * sigma);
    }

    mod props {
        use super::*;
        use crate::rng;
        use proptest::prelude::*;
        use rand::seq::SliceRandom;
        use rand::Rng;

        fn sample(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
            let mut r = rng::stream(seed, &[]);
            let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
            labels[0] = 1;
            (scores, labels)
        }

        proptest! {
            #[test]
            fn ap_is_invariant_to_monotone_transforms(seed in 0u64..10_000, n in 2usize..60) {
                let (s, y) = sample(seed, n);
                let base = pr_auc(&s, &y).unwrap();
                let exp: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
                let cube: Vec<f64> = s.iter().map(|v| v.powi(3)).collect();
                prop_assert!((pr_auc(&exp, &y).unwrap() - base).abs() < 1e-12);
                prop_assert!((pr_auc(&cube, &y).unwrap() - base).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&base));
            }

            #[test]
            fn f1_and_kappa_ignore_joint_permutation(seed in 0u64..10_000, n in 1usize..60) {
                let mut r = rng::stream(seed, &[1]);
                let p: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
                let y: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut r);
                let pp: Vec<u8> = idx.iter().map(|&i| p[i]).collect();
                let yp: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
                prop_assert_eq!(f1(&p, &y).unwrap(), f1(&pp, &yp).unwrap());
                prop_assert_eq!(cohen_kappa(&p, &y).unwrap(), cohen_kappa(&pp, &yp).unwrap());
                let k = cohen_kappa(&p, &y).unwrap();
                prop_assert!((-1.0..=1.0).contains(&k));
            }
        }
    }
}
