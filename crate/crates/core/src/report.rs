//! Result records shared by every experiment.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    /// Combines two verdicts: any failure dominates, then inconclusive.
    pub fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fail, _) | (_, Fail) => Fail,
            (Inconclusive, _) | (_, Inconclusive) => Inconclusive,
            _ => Pass,
        }
    }

    pub fn all(it: impl IntoIterator<Item = Verdict>) -> Verdict {
        it.into_iter().fold(Verdict::Pass, Verdict::and)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Whether a run sits inside the parameter range where the estimate is
/// claimed to hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Hypothesis {
    Inside,
    Outside,
}

/// Least-squares fit of `y = c * x^p` in log-log coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Option<PowerLawFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - icpt - slope * p.0).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res <= 1e-24 {
        1.0
    } else {
        0.0
    };
    Some(PowerLawFit { exponent: slope, prefactor: icpt.exp(), r_squared: r2, points: n })
}

/// One measured quantity with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    /// What was measured, when a report mixes several quantities.
    pub quantity: String,
    pub params: Vec<(String, f64)>,
    pub measured: f64,
    pub predicted: f64,
    pub verdict: Verdict,
    pub hypothesis: Hypothesis,
}

impl Row {
    pub fn new(params: &[(&str, f64)], measured: f64, predicted: f64, verdict: Verdict) -> Self {
        Row {
            quantity: String::new(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            measured,
            predicted,
            verdict,
            hypothesis: Hypothesis::Inside,
        }
    }

    pub fn named(mut self, quantity: impl Into<String>) -> Self {
        self.quantity = quantity.into();
        self
    }

    pub fn outside(mut self) -> Self {
        self.hypothesis = Hypothesis::Outside;
        self
    }

    pub fn residual(&self) -> f64 {
        if self.predicted.is_finite() {
            self.measured - self.predicted
        } else {
            f64::NAN
        }
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub experiment: String,
    pub rows: Vec<Row>,
    pub fit: Option<PowerLawFit>,
    /// Exponent or bound the measurement is compared against.
    pub predicted: Option<f64>,
    pub verdict: Verdict,
    pub hypothesis: Hypothesis,
    pub notes: Vec<String>,
    /// Points behind `fit`, for plotting.
    pub series: Vec<(f64, f64)>,
    pub axes: (String, String),
}

impl Report {
    pub fn new(experiment: impl Into<String>) -> Self {
        Report {
            experiment: experiment.into(),
            rows: Vec::new(),
            fit: None,
            predicted: None,
            verdict: Verdict::Pass,
            hypothesis: Hypothesis::Inside,
            notes: Vec::new(),
            series: Vec::new(),
            axes: (String::new(), String::new()),
        }
    }

    pub fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    /// Verdict label of a row in tabular output.
    pub fn label(&self, row: &Row) -> String {
        if self.hypothesis == Hypothesis::Outside || row.hypothesis == Hypothesis::Outside {
            "outside-hypothesis".to_string()
        } else {
            row.verdict.to_string()
        }
    }

    /// Records the fitted points and their axis names.
    pub fn set_series(&mut self, x: &str, y: &str, pts: Vec<(f64, f64)>) {
        self.axes = (x.to_string(), y.to_string());
        self.series = pts;
    }

    /// Verdict as counted for exit status: runs outside the hypothesis never
    /// fail.
    pub fn effective_verdict(&self) -> Verdict {
        match self.hypothesis {
            Hypothesis::Inside => self.verdict,
            Hypothesis::Outside => Verdict::Inconclusive,
        }
    }

    /// Column names: the union of row parameter keys in first-seen order.
    pub fn param_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = Vec::new();
        for r in &self.rows {
            for (k, _) in &r.params {
                if !keys.contains(k) {
                    keys.push(k.clone());
                }
            }
        }
        keys
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_synthetic_exponent() {
        let xs: Vec<f64> = (1..=8).map(|k| 2f64.powi(k)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.5 * x.powf(-0.37)).collect();
        let f = fit_power_law(&xs, &ys).unwrap();
        assert!((f.exponent + 0.37).abs() < 1e-12);
        assert!((f.prefactor - 3.5).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn verdict_combination() {
        use Verdict::*;
        assert_eq!(Verdict::all([Pass, Inconclusive, Pass]), Inconclusive);
        assert_eq!(Verdict::all([Pass, Inconclusive, Fail]), Fail);
        assert_eq!(Verdict::all([]), Pass);
    }
}
