//! Paired significance testing over seed-matched episodes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-sided paired t-test of `a - b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value; 1 when the differences are all equal to zero.
    pub p_value: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> PairedTest {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean_diff = crate::util::mean(&d);
    if n < 2 {
        return PairedTest { n, mean_diff, t: f64::NAN, p_value: 1.0 };
    }
    let var = d.iter().map(|x| (x - mean_diff).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        let (t, p_value) = if mean_diff == 0.0 { (0.0, 1.0) } else { (mean_diff.signum() * f64::INFINITY, 0.0) };
        return PairedTest { n, mean_diff, t, p_value };
    }
    let t = mean_diff / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    PairedTest { n, mean_diff, t, p_value }
}
