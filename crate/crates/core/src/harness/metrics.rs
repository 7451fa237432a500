use crate::error::{Error, Result};

/// Zero guard in the MAPE denominator, in vehicles.
pub const MAPE_EPSILON: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsTriple {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

impl MetricsTriple {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Mae => self.mae,
            Metric::Rmse => self.rmse,
            Metric::Mape => self.mape,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Mae,
    Rmse,
    Mape,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Rmse, Metric::Mape];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Rmse => "RMSE",
            Metric::Mape => "MAPE",
        }
    }
}

/// MAE, RMSE and MAPE (with `|truth|` floored at [`MAPE_EPSILON`]).
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsTriple> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidData(format!(
            "metrics need equal lengths, got {} predictions and {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidData("metrics need at least one cell".into()));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let e = (p - t).abs();
        abs += e;
        sq += e * e;
        pct += e / t.abs().max(MAPE_EPSILON);
    }
    Ok(MetricsTriple {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: pct / n * 100.0,
    })
}

/// Reduction of `score_with` relative to `score_without`, in percent;
/// positive when the framework is better. `None` for a non-positive baseline.
pub fn improvement_ratio(score_with: f64, score_without: f64) -> Option<f64> {
    if !(score_without > 0.0) || !score_with.is_finite() {
        return None;
    }
    Some((score_without - score_with) / score_without * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn exact_and_single_cell() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), MetricsTriple::default());
        let m = metrics(&[8.0], &[10.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (2.0, 2.0, 20.0));
        assert!(metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn zero_truth_uses_guard() {
        let m = metrics(&[3.0], &[0.0]).unwrap();
        assert_eq!(m.mape, 300.0);
    }

    #[test]
    fn matches_one_line_oracle() {
        let mut rng = SeededRng::new(17);
        let p: Vec<f64> = (0..100).map(|_| rng.uniform_in(0.0, 300.0)).collect();
        let t: Vec<f64> = (0..100).map(|_| rng.uniform_in(0.0, 300.0)).collect();
        let m = metrics(&p, &t).unwrap();
        let mae = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 100.0;
        let rmse = (p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 100.0).sqrt();
        let mape = p.iter().zip(&t).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).sum::<f64>() / 100.0 * 100.0;
        assert!((m.mae - mae).abs() < 1e-12 && (m.rmse - rmse).abs() < 1e-12 && (m.mape - mape).abs() < 1e-12);
    }

    #[test]
    fn table_spot_values() {
        let ir = improvement_ratio(103.6, 116.7).unwrap();
        assert_eq!(format!("{ir:.1}"), "11.2");
        let ir = improvement_ratio(73.37, 89.67).unwrap();
        assert_eq!(format!("{ir:.1}"), "18.2");
        assert_eq!(improvement_ratio(5.0, 5.0), Some(0.0));
        assert_eq!(improvement_ratio(1.0, 0.0), None);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(v in proptest::collection::vec((-1e3f64..1e3, 0f64..1e3), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let m = metrics(&p, &t).unwrap();
            prop_assert!(m.rmse >= m.mae * (1.0 - 1e-12));
            prop_assert!(m.mae >= 0.0 && m.mape >= 0.0);
        }

        #[test]
        fn ir_is_monotone(w in 0.1f64..100.0, d in 0.01f64..10.0, base in 1.0f64..200.0) {
            let hi = improvement_ratio(w, base).unwrap();
            let lo = improvement_ratio(w + d, base).unwrap();
            prop_assert!(hi > lo);
        }
    }
}
