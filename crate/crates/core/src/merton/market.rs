use crate::error::{Error, Result};

/// Black-Scholes market with CRRA utility `U(x) = x^gamma / gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketParams {
    pub mu: f64,
    pub r: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub horizon: f64,
}

impl MarketParams {
    pub fn new(mu: f64, r: f64, sigma: f64, gamma: f64, horizon: f64) -> Result<Self> {
        let p = MarketParams {
            mu,
            r,
            sigma,
            gamma,
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.mu, self.r, self.sigma, self.gamma, self.horizon]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("market parameters must be finite".into()));
        }
        if !(self.mu > self.r) {
            return Err(Error::InvalidArgument(format!(
                "expected return {} must exceed the risk-free rate {}",
                self.mu, self.r
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "volatility must be positive, got {}",
                self.sigma
            )));
        }
        if self.gamma == 0.0 || self.gamma >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "risk aversion gamma must be below 1 and non-zero, got {}",
                self.gamma
            )));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn utility(&self, x: f64) -> f64 {
        x.powf(self.gamma) / self.gamma
    }

    /// `(mu - r) / (sigma^2 (1 - gamma))`.
    pub fn classical_fraction(&self) -> f64 {
        (self.mu - self.r) / (self.sigma * self.sigma * (1.0 - self.gamma))
    }

    /// Growth exponent of the classical value, `V = U(x) e^{rho (T - t)}`.
    pub fn classical_rho(&self) -> f64 {
        let ex = self.mu - self.r;
        self.gamma * (self.r + ex * ex / (2.0 * self.sigma * self.sigma * (1.0 - self.gamma)))
    }
}

/// Closed-form solution without ambiguity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalMerton {
    pub params: MarketParams,
    /// Optimal fraction of wealth in the risky asset, constant in `(t, x)`.
    pub fraction: f64,
    pub rho: f64,
}

impl ClassicalMerton {
    pub fn value(&self, t: f64, x: f64) -> f64 {
        self.params.utility(x) * (self.rho * (self.params.horizon - t)).exp()
    }
}

pub fn classical_merton(params: &MarketParams) -> Result<ClassicalMerton> {
    params.validate()?;
    Ok(ClassicalMerton {
        params: *params,
        fraction: params.classical_fraction(),
        rho: params.classical_rho(),
    })
}
