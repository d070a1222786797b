use std::fmt;
use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// An empirical statistic of the particle cloud that the coefficients may read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feature {
    Mean,
    SecondMoment,
    /// Linearly interpolated quantile of the sorted sample, `p` in `[0, 1]`.
    Quantile(f64),
}

impl Feature {
    pub fn name(&self) -> String {
        match self {
            Feature::Mean => "mean".into(),
            Feature::SecondMoment => "second_moment".into(),
            Feature::Quantile(p) => format!("quantile_{p}"),
        }
    }
}

/// Evaluates `features` on a sample. Sums run over the sorted sample, so the
/// result does not depend on the particle order.
pub fn empirical_features(features: &[Feature], sample: &[f64]) -> Vec<f64> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    features_of_sorted(features, &sorted)
}

pub(crate) fn features_of_sorted(features: &[Feature], sorted: &[f64]) -> Vec<f64> {
    let n = sorted.len() as f64;
    features
        .iter()
        .map(|f| match *f {
            Feature::Mean => sorted.iter().sum::<f64>() / n,
            Feature::SecondMoment => sorted.iter().map(|x| x * x).sum::<f64>() / n,
            Feature::Quantile(p) => {
                let pos = p * (sorted.len() - 1) as f64;
                let (a, b) = (pos.floor() as usize, pos.ceil() as usize);
                let w = pos - a as f64;
                (1.0 - w) * sorted[a] + w * sorted[b]
            }
        })
        .collect()
}

/// Initial law `mu_0`, sampled from one standard normal draw so that a
/// mirrored draw gives the mirrored sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialLaw {
    Dirac(f64),
    Normal { mean: f64, var: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InitialLaw {
    pub fn sample(&self, z: f64) -> f64 {
        match *self {
            InitialLaw::Dirac(x) => x,
            InitialLaw::Normal { mean, var } => mean + var.sqrt() * z,
            InitialLaw::Uniform { lo, hi } => {
                let u = Normal::standard().cdf(z);
                lo + (hi - lo) * u
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Dirac(x) => x,
            InitialLaw::Normal { mean, .. } => mean,
            InitialLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            InitialLaw::Dirac(_) => 0.0,
            InitialLaw::Normal { var, .. } => var,
            InitialLaw::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InitialLaw::Dirac(x) => x.is_finite(),
            InitialLaw::Normal { mean, var } => mean.is_finite() && var.is_finite() && var >= 0.0,
            InitialLaw::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid initial law {self:?}")))
        }
    }
}

pub type CoefFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
pub type DriverFn = Arc<dyn Fn(f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// A scalar interacting-particle model. Coefficients see the state and the
/// declared features of the current measure:
/// `b(t, x, m)`, `sigma(t, x, m)`, `f(t, x, y, z, m)` and `g(x, m)`.
#[derive(Clone)]
pub struct MeanFieldModel {
    name: String,
    features: Vec<Feature>,
    initial: InitialLaw,
    pub(crate) drift: CoefFn,
    pub(crate) diffusion: CoefFn,
    pub(crate) driver: DriverFn,
    pub(crate) terminal: TerminalFn,
}

impl fmt::Debug for MeanFieldModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeanFieldModel")
            .field("name", &self.name)
            .field("features", &self.features)
            .field("initial", &self.initial)
            .finish_non_exhaustive()
    }
}

impl MeanFieldModel {
    /// Starts from `b = 0`, `sigma = 1`, `f = 0`, `g = x`.
    pub fn new(name: impl Into<String>, features: Vec<Feature>, initial: InitialLaw) -> Result<Self> {
        initial.validate()?;
        for f in &features {
            if let Feature::Quantile(p) = f {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidArgument(format!("quantile level {p} outside [0, 1]")));
                }
            }
        }
        Ok(MeanFieldModel {
            name: name.into(),
            features,
            initial,
            drift: Arc::new(|_, _, _| 0.0),
            diffusion: Arc::new(|_, _, _| 1.0),
            driver: Arc::new(|_, _, _, _, _| 0.0),
            terminal: Arc::new(|x, _| x),
        })
    }

    pub fn with_drift(mut self, b: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(b);
        self
    }

    pub fn with_diffusion(mut self, s: impl Fn(f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(s);
        self
    }

    pub fn with_driver(mut self, f: impl Fn(f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Arc::new(f);
        self
    }

    pub fn with_terminal(mut self, g: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(g);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn initial_law(&self) -> InitialLaw {
        self.initial
    }

    pub fn drift(&self, t: f64, x: f64, m: &[f64]) -> f64 {
        (self.drift)(t, x, m)
    }

    pub fn diffusion(&self, t: f64, x: f64, m: &[f64]) -> f64 {
        (self.diffusion)(t, x, m)
    }

    pub fn driver(&self, t: f64, x: f64, y: f64, z: f64, m: &[f64]) -> f64 {
        (self.driver)(t, x, y, z, m)
    }

    pub fn terminal(&self, x: f64, m: &[f64]) -> f64 {
        (self.terminal)(x, m)
    }
}

/// Parameters of the linear model `b = a m + c x`, `sigma` constant,
/// `f = -kappa y + beta m`, `g = gx x + gm m`, where `m` is the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearMeanField {
    pub a: f64,
    pub c: f64,
    pub sigma: f64,
    pub kappa: f64,
    pub beta: f64,
    pub gx: f64,
    pub gm: f64,
    pub initial: InitialLaw,
}

impl LinearMeanField {
    pub fn model(&self, name: &str) -> Result<MeanFieldModel> {
        let p = *self;
        Ok(MeanFieldModel::new(name, vec![Feature::Mean], p.initial)?
            .with_drift(move |_, x, m| p.a * m[0] + p.c * x)
            .with_diffusion(move |_, _, _| p.sigma)
            .with_driver(move |_, _, y, _, m| -p.kappa * y + p.beta * m[0])
            .with_terminal(move |x, m| p.gx * x + p.gm * m[0]))
    }

    /// Mean flow `m(t) = m_0 e^{(a + c) t}`.
    pub fn mean_at(&self, t: f64) -> f64 {
        self.initial.mean() * ((self.a + self.c) * t).exp()
    }

    /// Derivative callbacks of the model along its mean-field path.
    pub fn fluctuation_coefficients(&self) -> super::FluctuationCoefficients {
        let p = *self;
        super::FluctuationCoefficients::new()
            .dx_b(move |_, _, _| p.c)
            .dmu_b(move |_, _, _, _| p.a)
            .dx_sigma(|_, _, _| 0.0)
            .dmu_sigma(|_, _, _, _| 0.0)
            .dx_f(|_, _, _, _, _| 0.0)
            .dy_f(move |_, _, _, _, _| -p.kappa)
            .dz_f(|_, _, _, _, _| 0.0)
            .dmu_f(move |_, _, _, _, _, _| p.beta)
            .dx_g(move |_, _| p.gx)
            .dmu_g(move |_, _, _| p.gm)
    }
}

/// Linear model used for the fixed-point and LLN checks.
pub const LINEAR_MEAN_FIELD: LinearMeanField = LinearMeanField {
    a: 0.5,
    c: 0.5,
    sigma: 0.2,
    kappa: 0.1,
    beta: 0.3,
    gx: 1.0,
    gm: 0.5,
    initial: InitialLaw::Dirac(1.0),
};

/// Linear-Gaussian model used for the fluctuation checks. Its limiting
/// forward fluctuation variance is `e^{2 c T} Var(U_0)`.
pub const LINEAR_GAUSSIAN_CLT: LinearMeanField = LinearMeanField {
    a: 0.2,
    c: 0.3,
    sigma: 0.2,
    kappa: 0.2,
    beta: 0.1,
    gx: 1.5,
    gm: 0.5,
    initial: InitialLaw::Normal { mean: 1.0, var: 0.04 },
};

/// Names accepted by [`builtin_model`].
pub const BUILTIN_MODELS: [&str; 4] = [
    "independent",
    "mean-reversion-to-crowd",
    "linear-gaussian-clt",
    "linear-mean-field",
];

/// Looks up a built-in model by name.
pub fn builtin_model(name: &str) -> Result<MeanFieldModel> {
    match name {
        "independent" => {
            Ok(
                MeanFieldModel::new(name, vec![Feature::Mean], InitialLaw::Normal { mean: 0.0, var: 1.0 })?
                    .with_drift(|_, x, _| -0.5 * x)
                    .with_diffusion(|_, _, _| 0.3)
                    .with_driver(|_, _, y, z, _| -0.1 * y - 0.5 * z * z)
                    .with_terminal(|x, _| x),
            )
        }
        "mean-reversion-to-crowd" => Ok(MeanFieldModel::new(
            name,
            vec![Feature::Mean, Feature::SecondMoment],
            InitialLaw::Normal { mean: 0.0, var: 1.0 },
        )?
        .with_drift(|_, x, m| m[0] - x)
        .with_diffusion(|_, _, _| 0.1)
        .with_driver(|_, _, _, z, _| -0.5 * z * z)
        .with_terminal(|x, m| (x - m[0]).powi(2) - (m[1] - m[0] * m[0]))),
        "linear-gaussian-clt" => LINEAR_GAUSSIAN_CLT.model(name),
        "linear-mean-field" => LINEAR_MEAN_FIELD.model(name),
        other => Err(Error::InvalidArgument(format!(
            "unknown mean-field model `{other}` (known: {})",
            BUILTIN_MODELS.join(", ")
        ))),
    }
}

/// Derivative callbacks for the built-in linear models.
pub fn builtin_fluctuation(name: &str) -> Result<super::FluctuationCoefficients> {
    match name {
        "linear-gaussian-clt" => Ok(LINEAR_GAUSSIAN_CLT.fluctuation_coefficients()),
        "linear-mean-field" => Ok(LINEAR_MEAN_FIELD.fluctuation_coefficients()),
        other => Err(Error::InvalidArgument(format!(
            "no fluctuation coefficients are built in for `{other}`"
        ))),
    }
}
