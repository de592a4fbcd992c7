//! Experiment configuration, read from TOML with unknown keys rejected.

use lapwave::discretize::Operator;
use lapwave::metric::MetricFamily;
use lapwave::mourre::Regime;
use lapwave::spectral::Mode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Selftest,
    MourreCheck,
    KssScan,
    KssHigher,
    SourceScan,
    ResolventScan,
    Equivalences,
    LifespanSweep,
    SobolevCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Selftest => "selftest",
            Experiment::MourreCheck => "mourre-check",
            Experiment::KssScan => "kss-scan",
            Experiment::KssHigher => "kss-higher",
            Experiment::SourceScan => "source-scan",
            Experiment::ResolventScan => "resolvent-scan",
            Experiment::Equivalences => "equivalences",
            Experiment::LifespanSweep => "lifespan-sweep",
            Experiment::SobolevCheck => "sobolev-check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Flat,
    RadialBump,
    AnisotropicBump,
}

impl From<Family> for MetricFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Flat => MetricFamily::Flat,
            Family::RadialBump => MetricFamily::RadialBump,
            Family::AnisotropicBump => MetricFamily::AnisotropicBump,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricBlock {
    pub family: Family,
    pub d: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_rho() -> f64 {
    2.0
}

fn default_amplitude() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n: usize,
    pub l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralMode {
    Dense,
    Iterative,
}

impl From<SpectralMode> for Mode {
    fn from(m: SpectralMode) -> Self {
        match m {
            SpectralMode::Dense => Mode::DenseEig,
            SpectralMode::Iterative => Mode::Iterative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralBlock {
    pub mode: SpectralMode,
    pub dense_cap: usize,
    pub quadrature_nodes: usize,
    pub quadrature_tol: f64,
}

impl Default for SpectralBlock {
    fn default() -> Self {
        SpectralBlock { mode: SpectralMode::Dense, dense_cap: lapwave::spectral::DEFAULT_DENSE_CAP, quadrature_nodes: 40, quadrature_tol: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeName {
    Low,
    Intermediate,
    High,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MourreBlock {
    pub regime: RegimeName,
    /// Threshold of the high-frequency cutoff.
    pub threshold: f64,
    pub scales: Vec<f64>,
    pub interval: [f64; 2],
    pub n_max: usize,
    pub slack: f64,
    /// Weight exponent for the resolvent and smoothing checks; 0 skips them.
    pub mu: f64,
    pub samples: usize,
    pub eps: f64,
    /// Scale for the resolvent and smoothing checks; the first passing scale
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lap_scale: Option<f64>,
}

impl Default for MourreBlock {
    fn default() -> Self {
        MourreBlock {
            regime: RegimeName::Low,
            threshold: 4.0,
            scales: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            interval: [0.85, 1.2],
            n_max: 8,
            slack: lapwave::mourre::DEFAULT_SLACK,
            mu: 1.0,
            samples: 20,
            eps: 0.1,
            lap_scale: None,
        }
    }
}

impl MourreBlock {
    pub fn regime(&self) -> Regime {
        match self.regime {
            RegimeName::Low => Regime::Low,
            RegimeName::Intermediate => Regime::Intermediate,
            RegimeName::High => Regime::High { threshold: self.threshold },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeName {
    Gradient,
    SqrtP,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KssBlock {
    pub mu: f64,
    pub eps: f64,
    pub slack: f64,
    pub t_list: Vec<f64>,
    /// Number of vector fields for `kss-higher`.
    pub order: usize,
    /// Width of the Gaussian data and sources.
    pub width: f64,
    pub derivative: DerivativeName,
    pub panels_per_unit: usize,
    /// Source frequencies for `source-scan` (`sin(w t)` times the profile).
    pub omegas: Vec<f64>,
}

impl Default for KssBlock {
    fn default() -> Self {
        KssBlock {
            mu: 1.0,
            eps: 0.0,
            slack: 0.15,
            t_list: vec![1.0, 2.0, 3.0, 4.0, 6.0, 8.0],
            order: 1,
            width: 1.5,
            derivative: DerivativeName::Gradient,
            panels_per_unit: lapwave::estimates::DEFAULT_PANELS_PER_UNIT,
            omegas: vec![0.5, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorName {
    P,
    P0,
    Ptilde,
}

impl From<OperatorName> for Operator {
    fn from(o: OperatorName) -> Self {
        match o {
            OperatorName::P => Operator::P,
            OperatorName::P0 => Operator::P0,
            OperatorName::Ptilde => Operator::Ptilde,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventBlock {
    pub operator: OperatorName,
    pub beta: f64,
    pub gamma: f64,
    pub lambdas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub derivative_axis: Option<usize>,
    /// Second box half-width for the truncation comparison.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_l: Option<f64>,
    pub slack: f64,
}

impl Default for ResolventBlock {
    fn default() -> Self {
        ResolventBlock { operator: OperatorName::P, beta: 0.0, gamma: 0.5, lambdas: (0..9).map(|k| 2f64.powi(k)).collect(), derivative_axis: None, second_l: None, slack: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceBlock {
    pub mu_gradient: f64,
    pub mu_hardy: f64,
    pub max_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_l: Option<f64>,
}

impl Default for EquivalenceBlock {
    fn default() -> Self {
        let d = lapwave::estimates::EquivalenceOptions::default();
        EquivalenceBlock { mu_gradient: d.mu_gradient, mu_hardy: d.mu_hardy, max_ratio: d.max_ratio, second_l: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifespanBlock {
    pub deltas: Vec<f64>,
    /// Row-major `(1+d) x (1+d)` coefficients; `(d_t u)^2` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    pub n: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    pub blowup_factor: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub panels_per_unit: usize,
    pub refinements: usize,
    pub width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_order: Option<usize>,
    /// Data size and window for the contraction trace.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction_delta: Option<f64>,
    pub contraction_t: f64,
}

impl Default for LifespanBlock {
    fn default() -> Self {
        let p = lapwave::nonlinear::PicardOptions::default();
        LifespanBlock {
            deltas: vec![0.5, 0.25, 0.125, 0.0625],
            q: None,
            n: p.functional.n,
            t_max: None,
            blowup_factor: p.blowup_factor,
            max_iter: p.max_iter,
            tol: p.tol,
            panels_per_unit: p.panels_per_unit,
            refinements: 4,
            width: 2.0,
            data_order: None,
            contraction_delta: None,
            contraction_t: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SobolevBlock {
    /// Radii at which the test bumps are centred.
    pub centers: Vec<f64>,
    pub width: f64,
    pub slack: f64,
}

impl Default for SobolevBlock {
    fn default() -> Self {
        SobolevBlock { centers: vec![2.0, 4.0, 8.0], width: 1.0, slack: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: PathBuf,
    pub plot: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: PathBuf::from("out"), plot: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    pub metric: MetricBlock,
    pub grid: GridBlock,
    #[serde(default)]
    pub spectral: SpectralBlock,
    #[serde(default)]
    pub mourre: MourreBlock,
    #[serde(default)]
    pub kss: KssBlock,
    #[serde(default)]
    pub resolvent: ResolventBlock,
    #[serde(default)]
    pub equivalences: EquivalenceBlock,
    #[serde(default)]
    pub lifespan: LifespanBlock,
    #[serde(default)]
    pub sobolev: SobolevBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn range(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

fn positive_list(name: &str, xs: &[f64]) -> Result<(), CliError> {
    range(!xs.is_empty() && xs.iter().all(|x| x.is_finite() && *x > 0.0), || format!("{name} must be a non-empty list of positive numbers"))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Range checks for everything the chosen experiment reads.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = self.metric.d;
        range((1..=3).contains(&d), || format!("d = {d} is not supported"))?;
        range(self.metric.rho > 0.0, || "rho must be positive".into())?;
        range(self.grid.n >= 3, || "grid.n must be at least 3".into())?;
        range(self.grid.l > 0.0, || "grid.l must be positive".into())?;
        match self.experiment {
            Experiment::Selftest | Experiment::SobolevCheck => {}
            Experiment::MourreCheck => {
                let m = &self.mourre;
                positive_list("mourre.scales", &m.scales)?;
                range(m.interval[0] > 0.0 && m.interval[0] < m.interval[1], || "mourre.interval must satisfy 0 < lo < hi".into())?;
                range(m.n_max >= 1, || "mourre.n_max must be at least 1".into())?;
                range(m.mu >= 0.0, || "mourre.mu must be non-negative".into())?;
                if m.regime == RegimeName::Low {
                    range(m.scales.iter().all(|s| *s >= 1.0), || "low-frequency scales must be at least 1".into())?;
                }
            }
            Experiment::KssScan | Experiment::SourceScan | Experiment::KssHigher => {
                let k = &self.kss;
                range(k.mu > 0.0 && k.mu <= 1.0, || format!("kss.mu = {} must lie in (0, 1]", k.mu))?;
                if self.experiment == Experiment::KssHigher {
                    range(k.mu >= 0.5, || format!("kss.mu = {} must lie in [1/2, 1] for kss-higher", k.mu))?;
                    range(k.order <= 2, || "kss.order above 2 is not supported".into())?;
                }
                range(k.eps >= 0.0, || "kss.eps must be non-negative".into())?;
                positive_list("kss.t_list", &k.t_list)?;
                range(k.width > 0.0, || "kss.width must be positive".into())?;
                range(k.panels_per_unit >= 2, || "kss.panels_per_unit must be at least 2".into())?;
                if self.experiment == Experiment::SourceScan {
                    positive_list("kss.omegas", &k.omegas)?;
                }
            }
            Experiment::ResolventScan => {
                let r = &self.resolvent;
                positive_list("resolvent.lambdas", &r.lambdas)?;
                range(r.lambdas.iter().all(|l| *l >= 1.0), || "resolvent.lambdas must be at least 1".into())?;
                range(r.gamma >= 0.0, || "resolvent.gamma must be non-negative".into())?;
                if let Some(a) = r.derivative_axis {
                    range(a < d, || format!("derivative axis {a} out of range"))?;
                }
            }
            Experiment::Equivalences => {
                let e = &self.equivalences;
                range(e.mu_gradient > 0.1 && e.mu_hardy > 0.0 && e.max_ratio > 1.0, || "equivalence parameters out of range".into())?;
            }
            Experiment::LifespanSweep => {
                let l = &self.lifespan;
                positive_list("lifespan.deltas", &l.deltas)?;
                range(l.deltas.len() >= 4, || "lifespan.deltas needs at least four values".into())?;
                range(l.deltas.windows(2).all(|w| w[1] < w[0]), || "lifespan.deltas must be descending".into())?;
                if let Some(q) = &l.q {
                    range(q.len() == (d + 1) * (d + 1), || format!("lifespan.q needs {} entries", (d + 1) * (d + 1)))?;
                }
                range(l.n > 0.0 && l.blowup_factor > 1.0 && l.max_iter >= 2 && l.tol > 0.0, || "lifespan iteration parameters out of range".into())?;
                range(l.width > 0.0 && l.panels_per_unit >= 2, || "lifespan.width and panels_per_unit must be positive".into())?;
                if let Some(c) = l.contraction_delta {
                    range(c > 0.0 && l.contraction_t > 0.0, || "contraction parameters must be positive".into())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
experiment = "kss-scan"
[metric]
family = "flat"
d = 3
[grid]
n = 8
l = 4.0
[kss]
mu = 0.75
"#;

    #[test]
    fn round_trip_is_stable() {
        let c = ExperimentConfig::parse(BASIC).unwrap();
        let s = c.to_toml();
        let c2 = ExperimentConfig::parse(&s).unwrap();
        assert_eq!(c, c2);
        assert_eq!(s, c2.to_toml());
    }

    #[test]
    fn unknown_key_rejected() {
        let text = BASIC.replace("mu = 0.75", "mu = 0.75\nmoo = 1");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn mu_above_one_rejected() {
        let text = BASIC.replace("mu = 0.75", "mu = 1.5");
        let e = ExperimentConfig::parse(&text).unwrap_err();
        assert!(e.to_string().contains("(0, 1]"));
    }
}
