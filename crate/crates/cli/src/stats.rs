use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-sided paired t-test of `before - after`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_before: f64,
    pub mean_after: f64,
    pub mean_reduction: f64,
    pub fraction_improved: f64,
    pub t: f64,
    pub p_value: f64,
}

pub fn paired_t_test(before: &[f64], after: &[f64]) -> Option<PairedTest> {
    let n = before.len();
    if n < 2 || after.len() != n {
        return None;
    }
    let diffs: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t, p_value) = if se == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?;
        (t, 2.0 * dist.sf(t.abs()))
    };
    Some(PairedTest {
        n,
        mean_before: before.iter().sum::<f64>() / n as f64,
        mean_after: after.iter().sum::<f64>() / n as f64,
        mean_reduction: mean,
        fraction_improved: diffs.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64,
        t,
        p_value,
    })
}

impl std::fmt::Display for PairedTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "paired t-test over {} images: L2 {:.5} -> {:.5} (mean reduction {:.5}), improved {:.1}%, t = {:.3}, p = {:.3e}",
            self.n,
            self.mean_before,
            self.mean_after,
            self.mean_reduction,
            100.0 * self.fraction_improved,
            self.t,
            self.p_value
        )
    }
}
