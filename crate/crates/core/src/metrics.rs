//! Detection measures for imbalanced binary problems.
//!
//! All rates are percentages. DR is the share of true positives detected, FA
//! the share of true negatives flagged, and EER the mean of FA and the miss
//! rate `100 - DR`. Conservation (cons) and relative false alarm (rFA) are
//! DR and FA measured against a reference classifier's decisions instead of
//! the ground truth.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn from_predictions(predictions: &[f64], truth: &[f64]) -> Result<Self> {
        if predictions.len() != truth.len() {
            return Err(Error::invalid(format!(
                "{} predictions but {} ground-truth labels",
                predictions.len(),
                truth.len()
            )));
        }
        let mut c = Counts::default();
        for (&p, &t) in predictions.iter().zip(truth) {
            match (p > 0.0, t > 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn rates(&self) -> Result<Rates> {
        let pos = self.tp + self.fn_;
        let neg = self.fp + self.tn;
        if pos == 0 {
            return Err(Error::UndefinedRate("detection rate with no positive ground truth".into()));
        }
        if neg == 0 {
            return Err(Error::UndefinedRate("false alarm rate with no negative ground truth".into()));
        }
        Ok(Rates {
            dr: 100.0 * self.tp as f64 / pos as f64,
            fa: 100.0 * self.fp as f64 / neg as f64,
        })
    }
}

/// Detection rate and false alarm rate, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub dr: f64,
    pub fa: f64,
}

impl Rates {
    pub fn eer(&self) -> f64 {
        eer(self.dr, self.fa)
    }
}

pub fn detection_metrics(predictions: &[f64], ground_truth: &[f64]) -> Result<Rates> {
    Counts::from_predictions(predictions, ground_truth)?.rates()
}

/// Mean of the false alarm rate and the miss rate.
pub fn eer(dr: f64, fa: f64) -> f64 {
    (fa + (100.0 - dr)) / 2.0
}

/// `(cons, rfa)` of `g` with respect to the reference decisions `f`.
pub fn conservation_metrics(g_predictions: &[f64], f_predictions: &[f64]) -> Result<(f64, f64)> {
    let r = detection_metrics(g_predictions, f_predictions)?;
    Ok((r.dr, r.fa))
}

/// One row of a per-stage report. `None` cells print as `-`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub cons: Option<f64>,
    pub rfa: Option<f64>,
    pub dr: f64,
    pub fa: f64,
    pub eer: f64,
    pub time_ms: Option<f64>,
    pub mean_kernel_evals: f64,
    pub mean_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionSummary {
    pub counts: Counts,
    pub dr: f64,
    pub fa: f64,
    pub eer: f64,
    pub cons: Option<f64>,
    pub rfa: Option<f64>,
}

impl ConfusionSummary {
    /// Metrics of `predictions` against `truth`, plus conservation against
    /// `reference` when given.
    pub fn new(predictions: &[f64], truth: &[f64], reference: Option<&[f64]>) -> Result<Self> {
        let counts = Counts::from_predictions(predictions, truth)?;
        let r = counts.rates()?;
        let (cons, rfa) = match reference {
            Some(f) => {
                let (c, r) = conservation_metrics(predictions, f)?;
                (Some(c), Some(r))
            }
            None => (None, None),
        };
        Ok(Self {
            counts,
            dr: r.dr,
            fa: r.fa,
            eer: r.eer(),
            cons,
            rfa,
        })
    }
}

pub const REPORT_HEADER: &str = "stage,cons,rfa,dr,fa,eer,time_ms,mean_kernel_evals,mean_cost";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.2},{:.2},{:.2},{},{:.2},{:.2}",
            self.label,
            cell(self.cons),
            cell(self.rfa),
            self.dr,
            self.fa,
            self.eer,
            cell(self.time_ms),
            self.mean_kernel_evals,
            self.mean_cost
        )
    }
}

/// Comma-separated table with a header line; `preamble` lines are emitted as `# ` comments.
pub fn render_table(preamble: &[String], rows: &[ReportRow]) -> String {
    let mut out = String::new();
    for p in preamble {
        out.push_str("# ");
        out.push_str(p);
        out.push('\n');
    }
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detection_examples() {
        let truth = [1.0, 1.0, -1.0, -1.0, -1.0];
        let r = detection_metrics(&truth, &truth).unwrap();
        assert_eq!((r.dr, r.fa), (100.0, 0.0));
        let r = detection_metrics(&[1.0; 5], &truth).unwrap();
        assert_eq!((r.dr, r.fa), (100.0, 100.0));

        let c = Counts { tp: 97, fn_: 3, fp: 4, tn: 96 };
        let r = c.rates().unwrap();
        assert!((r.dr - 97.0).abs() < 1e-12 && (r.fa - 4.0).abs() < 1e-12);

        assert!(matches!(detection_metrics(&[1.0, -1.0], &[1.0, 1.0]), Err(Error::UndefinedRate(_))));
        assert!(matches!(detection_metrics(&[1.0, -1.0], &[-1.0, -1.0]), Err(Error::UndefinedRate(_))));
        assert!(detection_metrics(&[1.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn eer_examples() {
        assert!((eer(97.14, 4.44) - 3.65).abs() < 1e-9);
        assert!((eer(97.55, 43.56) - 23.005).abs() < 1e-9);
        assert_eq!(eer(100.0, 0.0), 0.0);
    }

    #[test]
    fn conservation_examples() {
        let f = [1.0, -1.0, 1.0, -1.0, -1.0];
        assert_eq!(conservation_metrics(&f, &f).unwrap(), (100.0, 0.0));
        assert_eq!(conservation_metrics(&[1.0; 5], &f).unwrap(), (100.0, 100.0));
        assert!(matches!(conservation_metrics(&f, &[1.0; 5]), Err(Error::UndefinedRate(_))));
    }

    #[test]
    fn report_dashes_for_missing_cells() {
        let row = ReportRow {
            label: "6".into(),
            cons: None,
            rfa: None,
            dr: 97.14,
            fa: 4.44,
            eer: eer(97.14, 4.44),
            time_ms: None,
            mean_kernel_evals: 12.0,
            mean_cost: 1000.0,
        };
        assert_eq!(row.to_csv(), "6,-,-,97.14,4.44,3.65,-,12.00,1000.00");
        let t = render_table(&["config_hash=abc".into()], &[row]);
        assert!(t.starts_with("# config_hash=abc\nstage,cons"));
    }

    proptest! {
        #[test]
        fn eer_symmetry(dr in 0.0f64..=100.0, fa in 0.0f64..=100.0) {
            prop_assert!((eer(dr, fa) - eer(100.0 - fa, 100.0 - dr)).abs() < 1e-12);
        }

        #[test]
        fn conservation_equals_detection_against_pseudo_labels(
            pairs in prop::collection::vec((any::<bool>(), -2.0f64..2.0), 2..60)
        ) {
            let g: Vec<f64> = pairs.iter().map(|(b, _)| if *b { 1.0 } else { -1.0 }).collect();
            let f_scores: Vec<f64> = pairs.iter().map(|(_, s)| *s).collect();
            let f = crate::distill::pseudo_labels(&f_scores);
            let via_cons = conservation_metrics(&g, &f);
            let via_det = detection_metrics(&g, &f);
            match (via_cons, via_det) {
                (Ok((c, r)), Ok(d)) => { prop_assert_eq!(c, d.dr); prop_assert_eq!(r, d.fa); }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "inconsistent definedness"),
            }
        }

        #[test]
        fn permutation_invariant(
            pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 2..40),
            rot in 0usize..40,
        ) {
            let p: Vec<f64> = pairs.iter().map(|(a, _)| if *a { 1.0 } else { -1.0 }).collect();
            let t: Vec<f64> = pairs.iter().map(|(_, b)| if *b { 1.0 } else { -1.0 }).collect();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(k);
            t2.rotate_left(k);
            p2.reverse();
            t2.reverse();
            let a = Counts::from_predictions(&p, &t).unwrap();
            let b = Counts::from_predictions(&p2, &t2).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
