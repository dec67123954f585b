//! Confusion tallies, accuracy/TPR/PPV/F1 and a forgetting measure.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ClassId;

/// One-vs-rest counts for a single class, or their sum over classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Rate {
        Rate::ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> Rate {
        Rate::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn ppv(&self) -> Rate {
        Rate::ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> Rate {
        f1_score(self.tpr(), self.ppv())
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// A metric value; `degenerate` marks a zero denominator, in which case the
/// value is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub degenerate: bool,
}

impl Rate {
    pub fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Self {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }

    pub fn exact(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }
}

/// Harmonic mean of TPR and PPV.
pub fn f1_score(tpr: Rate, ppv: Rate) -> Rate {
    let degenerate = tpr.degenerate || ppv.degenerate;
    let den = tpr.value + ppv.value;
    if den == 0.0 {
        return Rate {
            value: 0.0,
            degenerate: true,
        };
    }
    Rate {
        value: 2.0 * tpr.value * ppv.value / den,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassId>,
    pub per_class: Vec<Counts>,
    /// Number of (prediction, truth) pairs.
    pub samples: u64,
    /// Number of pairs whose prediction equals the truth.
    pub correct: u64,
}

impl ConfusionCounts {
    pub fn micro(&self) -> Counts {
        self.per_class.iter().fold(Counts::default(), |a, b| a + *b)
    }

    pub fn class(&self, class: ClassId) -> Option<&Counts> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .map(|i| &self.per_class[i])
    }

    /// Fraction of samples labelled correctly.
    pub fn overall_accuracy(&self) -> Rate {
        Rate::ratio(self.correct, self.samples)
    }

    /// Per-class recall, the quantity tracked for forgetting.
    pub fn class_accuracy(&self, class: ClassId) -> Option<Rate> {
        self.class(class).map(Counts::tpr)
    }

    fn macro_of(&self, f: impl Fn(&Counts) -> Rate) -> Rate {
        if self.per_class.is_empty() {
            return Rate::ratio(0, 0);
        }
        let rates: Vec<Rate> = self.per_class.iter().map(f).collect();
        Rate {
            value: rates.iter().map(|r| r.value).sum::<f64>() / rates.len() as f64,
            degenerate: rates.iter().any(|r| r.degenerate),
        }
    }

    pub fn macro_tpr(&self) -> Rate {
        self.macro_of(Counts::tpr)
    }

    pub fn macro_ppv(&self) -> Rate {
        self.macro_of(Counts::ppv)
    }

    pub fn macro_f1(&self) -> Rate {
        self.macro_of(Counts::f1)
    }
}

pub fn tally(predictions: &[ClassId], truths: &[ClassId], classes: &[ClassId]) -> Result<ConfusionCounts> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    let index = |c: ClassId| {
        classes
            .iter()
            .position(|x| *x == c)
            .ok_or_else(|| Error::Data(format!("label {c} is outside the class set")))
    };
    let mut per_class = vec![Counts::default(); classes.len()];
    let mut correct = 0;
    for (&p, &t) in predictions.iter().zip(truths) {
        let (pi, ti) = (index(p)?, index(t)?);
        if pi == ti {
            correct += 1;
        }
        for (k, c) in per_class.iter_mut().enumerate() {
            match (pi == k, ti == k) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        classes: classes.to_vec(),
        per_class,
        samples: predictions.len() as u64,
        correct,
    })
}

/// Mean over classes of the clamped accuracy drop `max(0, before − after)`.
pub fn forgetting(before: &[f64], after: &[f64]) -> Result<f64> {
    if before.is_empty() {
        return Err(Error::Parameter("forgetting needs at least one old class".into()));
    }
    if before.len() != after.len() {
        return Err(Error::Shape(format!(
            "{} accuracies before, {} after",
            before.len(),
            after.len()
        )));
    }
    let drop: f64 = before.iter().zip(after).map(|(b, a)| (b - a).max(0.0)).sum();
    Ok(drop / before.len() as f64)
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub increment: usize,
    /// Domain tag, or `all`.
    pub domain: String,
    /// Class id, `micro` or `macro`.
    pub class: String,
    pub accuracy: f64,
    pub tpr: f64,
    pub ppv: f64,
    pub f1: f64,
    /// Empty when not applicable.
    pub forgetting: Option<f64>,
}

impl MetricRow {
    pub fn from_counts(increment: usize, domain: String, class: String, c: &Counts) -> Self {
        Self {
            increment,
            domain,
            class,
            accuracy: c.accuracy().value,
            tpr: c.tpr().value,
            ppv: c.ppv().value,
            f1: c.f1().value,
            forgetting: None,
        }
    }
}

pub const METRIC_HEADER: &str = "increment,domain,class,accuracy,tpr,ppv,f1,forgetting";

pub fn write_metric_rows<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(out);
    let err = |e: csv::Error| Error::Data(format!("writing metric rows: {e}"));
    w.write_record(METRIC_HEADER.split(',')).map_err(err)?;
    for r in rows {
        let f = |v: f64| format!("{v:?}");
        w.write_record([
            r.increment.to_string(),
            r.domain.clone(),
            r.class.clone(),
            f(r.accuracy),
            f(r.tpr),
            f(r.ppv),
            f(r.f1),
            r.forgetting.map(f).unwrap_or_default(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing metric rows: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn formula_example() {
        let c = Counts {
            tp: 5,
            tn: 3,
            fp: 1,
            fn_: 1,
        };
        assert_abs_diff_eq!(c.accuracy().value, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.tpr().value, 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.ppv().value, 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.f1().value, 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_recall() {
        let c = Counts {
            tp: 4,
            tn: 0,
            fp: 2,
            fn_: 0,
        };
        assert_eq!(c.tpr(), Rate::exact(1.0));
    }

    #[test]
    fn zero_denominator_is_flagged() {
        let c = Counts {
            tp: 0,
            tn: 5,
            fp: 0,
            fn_: 0,
        };
        assert_eq!(
            c.ppv(),
            Rate {
                value: 0.0,
                degenerate: true
            }
        );
        assert!(c.f1().degenerate);
        assert!(!c.accuracy().degenerate);
    }

    #[test]
    fn tally_all_correct() {
        let y = ids(&[0, 1, 2, 1, 0]);
        let t = tally(&y, &y, &ids(&[0, 1, 2])).unwrap();
        assert!(t.per_class.iter().all(|c| c.fp == 0 && c.fn_ == 0));
        assert_eq!(t.overall_accuracy().value, 1.0);
    }

    #[test]
    fn tally_all_wrong_binary() {
        let truth = ids(&[0, 1, 1, 0]);
        let pred = ids(&[1, 0, 0, 1]);
        let t = tally(&pred, &truth, &ids(&[0, 1])).unwrap();
        assert!(t.per_class.iter().all(|c| c.tp == 0 && c.tn == 0));
    }

    #[test]
    fn tally_matches_enumeration() {
        let truth = ids(&[0, 0, 0, 1, 1, 1, 2, 2, 2, 2]);
        let pred = ids(&[0, 1, 0, 1, 1, 2, 2, 0, 2, 2]);
        let classes = ids(&[0, 1, 2]);
        let t = tally(&pred, &truth, &classes).unwrap();
        // brute force: count each cell of the 2x2 table per class
        for (k, &c) in classes.iter().enumerate() {
            let mut e = Counts::default();
            for i in 0..10 {
                let (p, y) = (pred[i] == c, truth[i] == c);
                if p && y {
                    e.tp += 1
                } else if p {
                    e.fp += 1
                } else if y {
                    e.fn_ += 1
                } else {
                    e.tn += 1
                }
            }
            assert_eq!(t.per_class[k], e);
            assert_eq!(t.per_class[k].total(), 10);
        }
        assert_eq!(
            t.per_class[0],
            Counts {
                tp: 2,
                tn: 6,
                fp: 1,
                fn_: 1
            }
        );
        assert_eq!(t.correct, 7);
    }

    #[test]
    fn tally_errors() {
        assert!(matches!(
            tally(&ids(&[0]), &ids(&[0, 1]), &ids(&[0, 1])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            tally(&ids(&[3]), &ids(&[0]), &ids(&[0, 1])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting(&[0.7, 0.4], &[0.7, 0.4]).unwrap(), 0.0);
        assert_eq!(forgetting(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(forgetting(&[0.9, 0.8], &[0.7, 0.9]).unwrap(), 0.1, epsilon = 1e-12);
        assert!(matches!(forgetting(&[], &[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn f1_from_reported_rates() {
        let f = |t: f64, p: f64| f1_score(Rate::exact(t), Rate::exact(p)).value;
        assert_abs_diff_eq!(f(0.8526, 0.8092), 0.8303, epsilon = 5e-4);
        assert_abs_diff_eq!(f(0.8435, 0.9138), 0.8772, epsilon = 5e-4);
        assert_abs_diff_eq!(f(0.7068, 0.7192), 0.7129, epsilon = 5e-4);
    }

    #[test]
    fn csv_rows() {
        let rows = vec![
            MetricRow::from_counts(
                1,
                "0".into(),
                "3".into(),
                &Counts {
                    tp: 1,
                    tn: 2,
                    fp: 0,
                    fn_: 1,
                },
            ),
            MetricRow {
                forgetting: Some(0.25),
                ..MetricRow::from_counts(2, "all".into(), "micro".into(), &Counts::default())
            },
        ];
        let mut buf = Vec::new();
        write_metric_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRIC_HEADER);
        assert_eq!(lines[1], "1,0,3,0.75,0.5,1.0,0.6666666666666666,");
        assert_eq!(lines[2], "2,all,micro,0.0,0.0,0.0,0.0,0.25");
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((0u32..4, 0u32..4), 1..40), seed in 0u64..50) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let classes = ids(&[0, 1, 2, 3]);
            let (p, t): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
            let a = tally(&ids(&p), &ids(&t), &classes).unwrap();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (p2, t2): (Vec<u32>, Vec<u32>) = shuffled.into_iter().unzip();
            let b = tally(&ids(&p2), &ids(&t2), &classes).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn accuracy_one_iff_no_errors(tp in 0u64..20, tn in 0u64..20, fp in 0u64..3, fn_ in 0u64..3) {
            let c = Counts { tp, tn, fp, fn_ };
            prop_assume!(c.total() > 0);
            prop_assert_eq!(c.accuracy().value == 1.0, fp == 0 && fn_ == 0);
        }
    }
}
