//! Synthetic lattice data with spatially varying coefficients, and the
//! regression of estimates on truth that splits error into a systematic
//! and a random part.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::geo::Coordinate;
use crate::likelihood::Observation;
use crate::pipeline::FitResult;
use crate::posterior::{phi_name, Site, SpatialDataset};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeSpec {
    pub width: u32,
    pub height: u32,
    /// Replicates per site.
    pub m: usize,
    pub seed: u64,
    pub theta_mean: f64,
    pub theta_sd: f64,
    pub x2_range: (f64, f64),
    pub x3_range: (f64, f64),
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec {
            width: 40,
            height: 40,
            m: 100,
            seed: 0,
            theta_mean: 0.5,
            theta_sd: 0.01,
            x2_range: (0.0, 10.0),
            x3_range: (2.0, 7.0),
        }
    }
}

impl LatticeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.m == 0 {
            return Err(Error::Config("lattice width, height and m must be positive".into()));
        }
        if !(self.theta_sd > 0.0 && self.theta_sd.is_finite()) || !self.theta_mean.is_finite() {
            return Err(Error::Config("theta_sd must be > 0 and theta_mean finite".into()));
        }
        for (lo, hi) in [self.x2_range, self.x3_range] {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Config(format!("covariate range ({lo}, {hi}) is empty")));
            }
        }
        Ok(())
    }
}

/// `(φ0, φ1, φ2)` at lattice point `(u, v)`.
pub fn true_coefficients(u: u32, v: u32) -> [f64; 3] {
    let (uf, vf) = (f64::from(u), f64::from(v));
    let angle = PI / 2.0 + PI * (uf / 20.0);
    [
        3.0,
        0.1 + 0.01 * (uf * uf + vf * vf).sqrt(),
        0.05 * (angle.sin() + angle.cos() + 4.0),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthSite {
    pub site_id: String,
    pub u: u32,
    pub v: u32,
    pub phi: [f64; 3],
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthField {
    pub sites: Vec<TruthSite>,
}

impl TruthField {
    pub fn coefficient(&self, j: usize) -> Vec<f64> {
        self.sites.iter().map(|s| s.phi[j]).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["site_id", "u", "v", "phi0", "phi1", "phi2", "theta"])?;
        for s in &self.sites {
            w.write_record([
                s.site_id.clone(),
                s.u.to_string(),
                s.v.to_string(),
                s.phi[0].to_string(),
                s.phi[1].to_string(),
                s.phi[2].to_string(),
                s.theta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut sites = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Ingest {
                path: "truth".into(),
                line: i + 2,
                message: "malformed truth row".into(),
            };
            if rec.len() != 7 {
                return Err(bad());
            }
            let f = |k: usize| rec[k].parse::<f64>().map_err(|_| bad());
            sites.push(TruthSite {
                site_id: rec[0].to_string(),
                u: rec[1].parse().map_err(|_| bad())?,
                v: rec[2].parse().map_err(|_| bad())?,
                phi: [f(3)?, f(4)?, f(5)?],
                theta: f(6)?,
            });
        }
        Ok(TruthField { sites })
    }
}

/// One negative-binomial draw with mean `mu` and variance `mu + theta·mu²`,
/// as a Poisson count with a gamma-distributed rate.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, mu: f64, theta: f64) -> u64 {
    let rate = Gamma::new(1.0 / theta, theta * mu)
        .expect("positive gamma parameters")
        .sample(rng);
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive Poisson rate").sample(rng) as u64
}

/// Site id of lattice point `(u, v)`, numbered row by row from 0.
pub fn site_id(width: u32, u: u32, v: u32) -> String {
    ((v - 1) * width + (u - 1)).to_string()
}

pub fn generate(spec: &LatticeSpec) -> Result<(SpatialDataset, TruthField)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta_dist = Normal::new(spec.theta_mean, spec.theta_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut sites = Vec::with_capacity((spec.width * spec.height) as usize);
    let mut truth = Vec::with_capacity(sites.capacity());
    for v in 1..=spec.height {
        for u in 1..=spec.width {
            let phi = true_coefficients(u, v);
            let theta = loop {
                let t = theta_dist.sample(&mut rng);
                if t > 0.0 {
                    break t;
                }
            };
            let observations = (0..spec.m)
                .map(|_| {
                    let x2 = rng.random_range(spec.x2_range.0..spec.x2_range.1);
                    let x3 = rng.random_range(spec.x3_range.0..spec.x3_range.1);
                    let mu = (phi[0] + phi[1] * x2 + phi[2] * x3).exp();
                    Observation {
                        y: sample_nb(&mut rng, mu, theta),
                        x: vec![1.0, x2, x3],
                        offset: 1.0,
                    }
                })
                .collect();
            let id = site_id(spec.width, u, v);
            sites.push(Site {
                id: id.clone(),
                coord: Coordinate::planar(f64::from(u), f64::from(v)),
                observations,
            });
            truth.push(TruthSite {
                site_id: id,
                u,
                v,
                phi,
                theta,
            });
        }
    }
    Ok((SpatialDataset::new(sites, 3)?, TruthField { sites: truth }))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SquaredErrorReport {
    /// `(site_id, squared error of each coefficient)`.
    pub per_site: Vec<(String, Vec<f64>)>,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
}

/// Posterior-mean coefficient estimates in truth-site order.
pub fn estimated_coefficients(estimates: &FitResult, truth: &TruthField) -> Result<Vec<[f64; 3]>> {
    if estimates.sites.len() != truth.sites.len() {
        return Err(Error::SiteMismatch(format!(
            "{} fitted sites, {} truth sites",
            estimates.sites.len(),
            truth.sites.len()
        )));
    }
    truth
        .sites
        .iter()
        .map(|t| {
            let fit = estimates
                .site(&t.site_id)
                .ok_or_else(|| Error::SiteMismatch(format!("no estimate for site {}", t.site_id)))?;
            let mut out = [0.0; 3];
            for (j, o) in out.iter_mut().enumerate() {
                *o = fit
                    .mean_of(&phi_name(j))
                    .ok_or_else(|| Error::SiteMismatch(format!("site {} has no {}", t.site_id, phi_name(j))))?;
            }
            Ok(out)
        })
        .collect()
}

pub fn squared_error_report(estimates: &FitResult, truth: &TruthField) -> Result<SquaredErrorReport> {
    let est = estimated_coefficients(estimates, truth)?;
    let per_site: Vec<(String, Vec<f64>)> = truth
        .sites
        .iter()
        .zip(&est)
        .map(|(t, e)| (t.site_id.clone(), (0..3).map(|j| (e[j] - t.phi[j]).powi(2)).collect()))
        .collect();
    let column = |j: usize| per_site.iter().map(|(_, e)| e[j]).collect::<Vec<_>>();
    Ok(SquaredErrorReport {
        mean: (0..3).map(|j| mean(&column(j))).collect(),
        median: (0..3).map(|j| median(&column(j))).collect(),
        per_site,
    })
}

/// `estimate = a + b·truth + ε` by least squares.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub a: f64,
    pub b: f64,
    /// Residual standard deviation with divisor `n - 2`.
    pub sigma: f64,
    pub se_a: f64,
    pub se_b: f64,
}

pub fn error_decomposition(estimates: &[f64], truth: &[f64]) -> Result<Decomposition> {
    if estimates.len() != truth.len() {
        return Err(Error::SiteMismatch(format!(
            "{} estimates for {} true values",
            estimates.len(),
            truth.len()
        )));
    }
    let n = truth.len();
    if n < 3 {
        return Err(Error::InvalidParameter("decomposition needs at least 3 sites".into()));
    }
    let (mx, my) = (mean(truth), mean(estimates));
    let sxx: f64 = truth.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 1e-14 * mx.abs().max(1.0).powi(2) * n as f64) {
        return Err(Error::Unidentifiable);
    }
    let sxy: f64 = truth.iter().zip(estimates).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let rss: f64 = truth.iter().zip(estimates).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let sigma = (rss / (n - 2) as f64).sqrt();
    Ok(Decomposition {
        a,
        b,
        sigma,
        se_a: sigma * (1.0 / n as f64 + mx * mx / sxx).sqrt(),
        se_b: sigma / sxx.sqrt(),
    })
}

/// Spread of estimates around their mean (divisor `n - 1`), the only part
/// of the decomposition left when the truth is constant.
pub fn random_error_only(estimates: &[f64]) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::InvalidParameter("need at least 2 estimates".into()));
    }
    let m = mean(estimates);
    Ok((estimates.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (estimates.len() - 1) as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{SiteFit, SummaryRow};
    use crate::posterior::TruncationAudit;
    use std::time::Duration;

    #[test]
    fn coefficient_examples() {
        for (u, v) in [(1, 1), (7, 3), (40, 40)] {
            assert_eq!(true_coefficients(u, v)[0], 3.0);
        }
        assert!((true_coefficients(3, 4)[1] - 0.15).abs() < 1e-15);
        assert!((true_coefficients(20, 9)[2] - 0.15).abs() < 1e-15);
        // independent restatement for a sweep of points
        for u in 1..=40u32 {
            for v in [1u32, 17, 40] {
                let c = true_coefficients(u, v);
                let phi1 = 0.1 + 0.01 * ((u * u + v * v) as f64).sqrt();
                let t = std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * u as f64 / 20.0;
                let phi2 = 0.05 * (t.sin() + t.cos() + 4.0);
                assert!((c[1] - phi1).abs() <= 1e-15 && (c[2] - phi2).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = LatticeSpec {
            width: 3,
            height: 2,
            m: 5,
            seed: 4,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_ne!(
            a.0,
            generate(&LatticeSpec {
                seed: 5,
                ..spec.clone()
            })
            .unwrap()
            .0
        );
        assert_eq!(a.0.sites.len(), 6);
        assert_eq!(a.0.sites[4].id, "4");
        assert_eq!((a.1.sites[4].u, a.1.sites[4].v), (2, 2));

        let one = generate(&LatticeSpec {
            width: 1,
            height: 1,
            m: 3,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(one.0.sites.len(), 1);
    }

    #[test]
    fn theta_field_mean() {
        let spec = LatticeSpec {
            width: 20,
            height: 20,
            m: 1,
            seed: 8,
            ..Default::default()
        };
        let (_, truth) = generate(&spec).unwrap();
        let thetas: Vec<f64> = truth.sites.iter().map(|s| s.theta).collect();
        assert!((mean(&thetas) - 0.5).abs() < 3.0 * 0.01 / 20.0);
    }

    #[test]
    fn nb_draw_moments_at_fixed_covariates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mu, theta) = (3f64.exp(), 0.5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_nb(&mut rng, mu, theta) as f64).collect();
        let m = mean(&draws);
        let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = mu + theta * mu * mu;
        assert!((m - mu).abs() < 3.0 * (true_var / n as f64).sqrt(), "{m}");
        let ratio = var / m;
        assert!(
            (ratio - (1.0 + theta * mu)).abs() / (1.0 + theta * mu) < 0.05,
            "{ratio}"
        );
    }

    fn fit_from(est: &[[f64; 3]], truth: &TruthField) -> FitResult {
        FitResult {
            bandwidth: 1.0,
            elapsed: Duration::ZERO,
            sites: truth
                .sites
                .iter()
                .zip(est)
                .map(|(t, e)| SiteFit {
                    site_id: t.site_id.clone(),
                    summary: (0..3)
                        .map(|j| SummaryRow {
                            param: phi_name(j),
                            mean: e[j],
                            sd: 0.0,
                            q025: e[j],
                            q50: e[j],
                            q975: e[j],
                        })
                        .collect(),
                    acceptance_rate: 0.2,
                    n_active: 1,
                    evaluations: 0,
                    truncation: TruncationAudit {
                        value: 0.0,
                        absolute_fallback: false,
                    },
                    warnings: vec![],
                    chains: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn squared_errors() {
        let spec = LatticeSpec {
            width: 4,
            height: 3,
            m: 1,
            ..Default::default()
        };
        let (_, truth) = generate(&spec).unwrap();
        let exact: Vec<[f64; 3]> = truth.sites.iter().map(|s| s.phi).collect();
        let r = squared_error_report(&fit_from(&exact, &truth), &truth).unwrap();
        assert!(r.per_site.iter().all(|(_, e)| e.iter().all(|&v| v == 0.0)));

        let shifted: Vec<[f64; 3]> = exact.iter().map(|p| [p[0], p[1] + 0.25, p[2]]).collect();
        let r = squared_error_report(&fit_from(&shifted, &truth), &truth).unwrap();
        assert!(r.per_site.iter().all(|(_, e)| (e[1] - 0.0625).abs() < 1e-12));

        let noisy: Vec<[f64; 3]> = exact
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + 0.01 * i as f64, p[1], p[2]])
            .collect();
        let r = squared_error_report(&fit_from(&noisy, &truth), &truth).unwrap();
        let mse: f64 = (0..12).map(|i| (0.01 * i as f64).powi(2)).sum::<f64>() / 12.0;
        assert!((r.mean[0] - mse).abs() < 1e-15);

        let fewer = TruthField {
            sites: truth.sites[..5].to_vec(),
        };
        assert!(squared_error_report(&fit_from(&exact, &truth), &fewer).is_err());
    }

    #[test]
    fn decomposition_cases() {
        let truth: Vec<f64> = (0..10).map(|i| 0.1 + 0.01 * i as f64).collect();
        let d = error_decomposition(&truth, &truth).unwrap();
        assert!(d.a.abs() < 1e-12 && (d.b - 1.0).abs() < 1e-12 && d.sigma < 1e-12);

        let flat = vec![0.7; 10];
        let d = error_decomposition(&flat, &truth).unwrap();
        assert!(d.b.abs() < 1e-12 && (d.a - 0.7).abs() < 1e-12);

        assert!(matches!(
            error_decomposition(&truth, &[3.0; 10]),
            Err(Error::Unidentifiable)
        ));
        assert!(error_decomposition(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}
