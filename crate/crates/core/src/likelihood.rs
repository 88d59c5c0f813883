//! Negative-binomial GLM with log link and multiplicative offset.
//!
//! Mean `μ = offset · exp(x·φ)` and variance `μ + θμ²`; `θ` is the
//! dispersion, not the "size" of the other common parameterization.

use serde::{Deserialize, Serialize};

use crate::posterior::ParameterPoint;
use crate::special::{ln_gamma, ln_rising, log1p_exp, normal_ln_pdf};
use crate::{Error, Result};

/// Linear predictors above this raise [`Error::LinearPredictorOverflow`].
pub const MAX_LINEAR_PREDICTOR: f64 = 700.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: u64,
    pub x: Vec<f64>,
    pub offset: f64,
}

impl Observation {
    pub fn new(y: u64, x: Vec<f64>, offset: f64) -> Result<Self> {
        let obs = Observation { y, x, offset };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "offset {} must be finite and > 0",
                self.offset
            )));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite covariate".into()));
        }
        Ok(())
    }

    /// `x·φ + ln(offset)`, the log of the mean.
    pub fn linear_predictor(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.x.len() {
            return Err(Error::InvalidParameter(format!(
                "coefficient length {} does not match covariate length {}",
                phi.len(),
                self.x.len()
            )));
        }
        let eta: f64 = self.x.iter().zip(phi).map(|(x, b)| x * b).sum::<f64>() + self.offset.ln();
        if !eta.is_finite() || eta > MAX_LINEAR_PREDICTOR {
            return Err(Error::LinearPredictorOverflow);
        }
        Ok(eta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionParams {
    pub phi: Vec<f64>,
    pub theta: f64,
}

impl RegressionParams {
    pub fn new(phi: Vec<f64>, theta: f64) -> Result<Self> {
        check_theta(theta)?;
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite coefficient".into()));
        }
        Ok(RegressionParams { phi, theta })
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "dispersion {theta} must be finite and > 0"
        )))
    }
}

/// Independent Gaussian priors on each coefficient and on the log of every
/// dispersion parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub phi_mean: Vec<f64>,
    pub phi_sd: Vec<f64>,
    pub log_theta_mean: f64,
    pub log_theta_sd: f64,
}

impl PriorSpec {
    /// `N(0, 10²)` per coefficient, `LogNormal(ln 0.5, 1)` per dispersion.
    pub fn weakly_informative(p: usize) -> Self {
        PriorSpec {
            phi_mean: vec![0.0; p],
            phi_sd: vec![10.0; p],
            log_theta_mean: 0.5f64.ln(),
            log_theta_sd: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_mean.len()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.phi_mean.len() != p || self.phi_sd.len() != p {
            return Err(Error::Config(format!(
                "prior has {} / {} coefficient entries, expected {p}",
                self.phi_mean.len(),
                self.phi_sd.len()
            )));
        }
        if self.phi_sd.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || !(self.log_theta_sd > 0.0 && self.log_theta_sd.is_finite())
        {
            return Err(Error::Config("prior standard deviations must be > 0".into()));
        }
        if self.phi_mean.iter().any(|m| !m.is_finite()) || !self.log_theta_mean.is_finite() {
            return Err(Error::Config("prior means must be finite".into()));
        }
        Ok(())
    }

    pub fn theta_median(&self) -> f64 {
        self.log_theta_mean.exp()
    }

    pub fn theta_mean(&self) -> f64 {
        (self.log_theta_mean + 0.5 * self.log_theta_sd * self.log_theta_sd).exp()
    }

    /// Log-normal log-density of one dispersion value, `-∞` for `θ <= 0`.
    pub fn ln_theta_density(&self, theta: f64) -> f64 {
        if !(theta > 0.0) {
            return f64::NEG_INFINITY;
        }
        let lt = theta.ln();
        normal_ln_pdf(lt, self.log_theta_mean, self.log_theta_sd) - lt
    }

    pub fn ln_phi_density(&self, phi: &[f64]) -> f64 {
        phi.iter()
            .zip(self.phi_mean.iter().zip(&self.phi_sd))
            .map(|(&b, (&m, &s))| normal_ln_pdf(b, m, s))
            .sum()
    }
}

/// Log-pmf from a precomputed log-mean; the shared kernel of every
/// likelihood evaluation in the crate.
#[inline]
pub fn nb_ln_pmf_log_mean(y: u64, ln_mu: f64, theta: f64) -> f64 {
    let r = 1.0 / theta;
    let ln_t = theta.ln() + ln_mu;
    let yf = y as f64;
    ln_rising(r, y) - ln_gamma(yf + 1.0) + yf * ln_t - (r + yf) * log1p_exp(ln_t)
}

pub fn nb_log_pmf(obs: &Observation, params: &RegressionParams) -> Result<f64> {
    check_theta(params.theta)?;
    let eta = obs.linear_predictor(&params.phi)?;
    Ok(nb_ln_pmf_log_mean(obs.y, eta, params.theta))
}

pub fn nb_mean_variance(params: &RegressionParams, x: &[f64], offset: f64) -> Result<(f64, f64)> {
    check_theta(params.theta)?;
    let obs = Observation {
        y: 0,
        x: x.to_vec(),
        offset,
    };
    obs.validate()?;
    let mu = obs.linear_predictor(&params.phi)?.exp();
    Ok((mu, mu + params.theta * mu * mu))
}

/// Summed log-likelihood of replicate observations at one location.
pub fn location_log_lik(data: &[Observation], params: &RegressionParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("observation list"));
    }
    data.iter().map(|obs| nb_log_pmf(obs, params)).sum()
}

/// Sum of the independent prior log-densities for coefficients, centre
/// dispersion and every auxiliary dispersion. Non-positive dispersions give
/// `-∞`.
pub fn log_prior(point: &ParameterPoint, prior: &PriorSpec) -> f64 {
    let thetas = std::iter::once(point.theta_centre).chain(point.theta_aux.values().copied());
    prior.ln_phi_density(&point.phi) + thetas.map(|t| prior.ln_theta_density(t)).sum::<f64>()
}
