use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Mode;
use crate::error::{Error, Result};

/// Harmonic mean `2us / (u + s)`, zero when both are zero.
pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u == s {
        return u;
    }
    if u + s == 0.0 {
        return 0.0;
    }
    2.0 * (u * s) / (u + s)
}

/// Correct and total counts of one test class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassTally {
    pub class: usize,
    pub unseen: bool,
    pub correct: usize,
    pub total: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Evaluation summary. In the zero-shot setting only `acc` is set; in the
/// generalized setting `u`, `s` and `h` are.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    /// Ordered by class id.
    pub per_class: Vec<ClassTally>,
    pub acc: Option<f64>,
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
    /// `(true class, predicted class) -> count`.
    pub confusion: BTreeMap<(usize, usize), usize>,
}

fn mean_accuracy<'a>(tallies: impl Iterator<Item = &'a ClassTally>) -> Option<f64> {
    let accs: Vec<f64> = tallies.map(ClassTally::accuracy).collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Tallies predictions into per-class top-1 accuracies. `unseen[c]` marks
/// the unseen classes.
pub fn evaluate_predictions(truth: &[usize], predicted: &[usize], unseen: &[bool], mode: Mode) -> Result<EvalReport> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid("one prediction per test sample is required"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no test samples"));
    }
    let mut tallies: BTreeMap<usize, ClassTally> = BTreeMap::new();
    let mut confusion = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        let is_unseen = *unseen
            .get(t)
            .ok_or_else(|| Error::invalid(format!("test class {t} is unknown")))?;
        let e = tallies.entry(t).or_insert(ClassTally {
            class: t,
            unseen: is_unseen,
            correct: 0,
            total: 0,
        });
        e.total += 1;
        if t == p {
            e.correct += 1;
        }
        *confusion.entry((t, p)).or_insert(0) += 1;
    }
    let per_class: Vec<ClassTally> = tallies.into_values().collect();
    let mut report = EvalReport {
        mode,
        per_class,
        acc: None,
        u: None,
        s: None,
        h: None,
        confusion,
    };
    match mode {
        Mode::Zsl => {
            if report.per_class.iter().any(|t| !t.unseen) {
                return Err(Error::invalid("zero-shot evaluation received seen-class test samples"));
            }
            report.acc = mean_accuracy(report.per_class.iter());
        }
        Mode::Gzsl => {
            let u = mean_accuracy(report.per_class.iter().filter(|t| t.unseen))
                .ok_or_else(|| Error::invalid("no unseen-class test samples"))?;
            let s = mean_accuracy(report.per_class.iter().filter(|t| !t.unseen))
                .ok_or_else(|| Error::invalid("no seen-class test samples"))?;
            report.u = Some(u);
            report.s = Some(s);
            report.h = Some(harmonic_mean(u, s));
        }
    }
    Ok(report)
}

impl EvalReport {
    /// Plain-text `key = value` summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode = {}", self.mode);
        for (k, v) in [("acc", self.acc), ("u", self.u), ("s", self.s), ("H", self.h)] {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        let _ = writeln!(out, "classes = {}", self.per_class.len());
        let _ = writeln!(out, "samples = {}", self.per_class.iter().map(|t| t.total).sum::<usize>());
        for t in &self.per_class {
            let _ = writeln!(out, "per_class.{} = {}", t.class, t.accuracy());
        }
        out
    }

    /// Comma-separated per-class table with a header row.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,split,correct,total,accuracy\n");
        for t in &self.per_class {
            let split = if t.unseen { "unseen" } else { "seen" };
            let _ = writeln!(out, "{},{split},{},{},{}", t.class, t.correct, t.total, t.accuracy());
        }
        out
    }

    /// Comma-separated confusion counts with a header row.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true,predicted,count\n");
        for ((t, p), n) in &self.confusion {
            let _ = writeln!(out, "{t},{p},{n}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn size_invariant_per_class_average() {
        let mut truth = vec![0; 99];
        truth.push(1);
        let mut pred = vec![0; 99];
        pred.push(0);
        let r = evaluate_predictions(&truth, &pred, &[true, true], Mode::Zsl).unwrap();
        assert_eq!(r.acc, Some(0.5));
        assert_eq!(r.confusion[&(1, 0)], 1);
    }

    #[test]
    fn generalized_report_fields() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let r = evaluate_predictions(&truth, &pred, &[false, true], Mode::Gzsl).unwrap();
        assert_eq!((r.u, r.s), (Some(1.0), Some(0.5)));
        assert_eq!(r.h, Some(harmonic_mean(1.0, 0.5)));
        assert!(r.acc.is_none());
        let text = r.to_text();
        assert!(text.contains("\nu = 1\n") && text.contains("\ns = 0.5\n") && text.contains("\nH = "));
        assert!(!text.contains("acc ="));
    }

    #[test]
    fn zero_shot_report_has_single_accuracy() {
        let r = evaluate_predictions(&[2, 3], &[2, 2], &[false, false, true, true], Mode::Zsl).unwrap();
        let text = r.to_text();
        assert_eq!(text.matches("acc = ").count(), 1);
        assert!(!text.contains("\nH = "));
        assert_eq!(r.per_class_csv(), "class,split,correct,total,accuracy\n2,unseen,1,1,1\n3,unseen,0,1,0\n");
    }

    #[test]
    fn harmonic_means_of_reported_results() {
        assert!((harmonic_mean(0.574, 0.800) - 0.668).abs() < 5e-4);
        assert!((harmonic_mean(0.472, 0.612) - 0.533).abs() < 5e-4);
    }

    proptest! {
        #[test]
        fn harmonic_mean_properties(u in 0.0..=1.0f64, s in 0.0..=1.0f64) {
            prop_assert_eq!(harmonic_mean(u, s), harmonic_mean(s, u));
            prop_assert_eq!(harmonic_mean(u, u), u);
            prop_assert_eq!(harmonic_mean(u, 0.0), 0.0);
            let h = harmonic_mean(u, s);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!(h <= (u + s) / 2.0 + 1e-15);
            prop_assert!(h <= u.max(s));
        }

        #[test]
        fn duplicating_a_class_keeps_per_class_accuracy(
            truth in prop::collection::vec(0usize..3, 1..30),
            pred in prop::collection::vec(0usize..3, 30),
            dup in 0usize..30,
        ) {
            let pred = &pred[..truth.len()];
            let unseen = [true, true, true];
            let a = evaluate_predictions(&truth, pred, &unseen, Mode::Zsl).unwrap();
            let k = dup % truth.len();
            let mut t2 = truth.clone();
            let mut p2 = pred.to_vec();
            // a single duplicate would shift that class ratio, so the whole class is duplicated
            let class = truth[k];
            for i in 0..truth.len() {
                if truth[i] == class {
                    t2.push(truth[i]);
                    p2.push(pred[i]);
                }
            }
            let b = evaluate_predictions(&t2, &p2, &unseen, Mode::Zsl).unwrap();
            for (x, y) in a.per_class.iter().zip(&b.per_class) {
                prop_assert_eq!(x.accuracy(), y.accuracy());
            }
        }
    }
}
