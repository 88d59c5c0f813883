//! The geographically-powered posterior of one model and its sampler target.
//!
//! A model is a geographical centre plus a kernel. Every site with a
//! nonzero kernel weight contributes its likelihood raised to that weight.
//! The site at the centre uses the model's own dispersion; every other
//! active site has an auxiliary dispersion that is sampled and then
//! discarded.

use std::collections::BTreeMap;

use crate::geo::{active_locations, ActiveSite, Coordinate, Frame, KernelSpec, EARTH_RADIUS_KM};
use crate::likelihood::{location_log_lik, log_prior, Observation, PriorSpec, RegressionParams, MAX_LINEAR_PREDICTOR};
use crate::linalg;
use crate::mcmc::{
    derive_seed, pool_chains, run_chain_with, BlockProposal, BlockTarget, ChainOptions, ParamLayout, PosteriorSamples,
    SamplerConfig, Transform,
};
use crate::special::{ln_gamma, ln_gamma_large, ln_rising, normal_ln_pdf};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    pub id: String,
    pub coord: Coordinate,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDataset {
    pub sites: Vec<Site>,
    /// Covariate dimension.
    pub p: usize,
}

impl SpatialDataset {
    pub fn new(sites: Vec<Site>, p: usize) -> Result<Self> {
        let data = SpatialDataset { sites, p };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.sites.first().ok_or(Error::Empty("site list"))?;
        if self.p == 0 {
            return Err(Error::InvalidParameter("covariate dimension must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for site in &self.sites {
            if !seen.insert(site.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate site id {}", site.id)));
            }
            if site.coord.frame != first.coord.frame {
                return Err(Error::FrameMismatch);
            }
            site.coord.validate()?;
            if site.observations.is_empty() {
                return Err(Error::Empty("site observations").at_site(site.id.clone()));
            }
            for obs in &site.observations {
                if obs.x.len() != self.p {
                    return Err(Error::InvalidParameter(format!(
                        "site {}: covariate length {} differs from {}",
                        site.id,
                        obs.x.len(),
                        self.p
                    )));
                }
                obs.validate().map_err(|e| e.at_site(site.id.clone()))?;
            }
        }
        Ok(())
    }

    pub fn frame(&self) -> Frame {
        self.sites.first().map(|s| s.coord.frame).unwrap_or_default()
    }

    pub fn coordinates(&self) -> Vec<Coordinate> {
        self.sites.iter().map(|s| s.coord).collect()
    }

    pub fn site_index(&self, id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.id == id)
    }

    pub fn n_observations(&self) -> usize {
        self.sites.iter().map(|s| s.observations.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GwrModelSpec {
    pub centre: Coordinate,
    pub kernel: KernelSpec,
    pub prior: PriorSpec,
    pub earth_radius: f64,
}

impl GwrModelSpec {
    pub fn new(centre: Coordinate, kernel: KernelSpec, prior: PriorSpec) -> Self {
        GwrModelSpec {
            centre,
            kernel,
            prior,
            earth_radius: EARTH_RADIUS_KM,
        }
    }

    pub fn validate(&self, data: &SpatialDataset) -> Result<()> {
        self.kernel.validate()?;
        self.centre.validate()?;
        if self.centre.frame != data.frame() {
            return Err(Error::FrameMismatch);
        }
        self.prior.validate(data.p)
    }
}

/// Coefficients, the centre dispersion and one auxiliary dispersion per
/// active non-centre site, keyed by site index.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterPoint {
    pub phi: Vec<f64>,
    pub theta_centre: f64,
    pub theta_aux: BTreeMap<usize, f64>,
}

/// Which sites a model touches and with what power.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelStructure {
    pub active: Vec<ActiveSite>,
    /// The site whose likelihood carries `theta_centre`, if the centre is a
    /// sampling location.
    pub centre_site: Option<usize>,
}

impl ModelStructure {
    /// With `centre_site` unset, the first site at distance zero from the
    /// centre plays that role.
    pub fn new(spec: &GwrModelSpec, data: &SpatialDataset, centre_site: Option<usize>) -> Result<Self> {
        spec.validate(data)?;
        let active = active_locations(&spec.centre, &data.coordinates(), &spec.kernel, spec.earth_radius)?;
        let centre_site = match centre_site {
            Some(i) => {
                if i >= data.sites.len() {
                    return Err(Error::InvalidParameter(format!("centre site {i} out of range")));
                }
                Some(i)
            }
            None => active.iter().find(|a| a.weight == 1.0).and_then(|a| {
                let d = crate::geo::distance(&spec.centre, &data.sites[a.index].coord, spec.earth_radius);
                matches!(d, Ok(d) if d == 0.0).then_some(a.index)
            }),
        };
        Ok(ModelStructure { active, centre_site })
    }

    /// Active sites other than the centre, in site order.
    pub fn aux_sites(&self) -> impl Iterator<Item = &ActiveSite> {
        self.active.iter().filter(move |a| Some(a.index) != self.centre_site)
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Power on site `index`'s likelihood; the centre site always gets 1.
    fn power(&self, a: &ActiveSite) -> f64 {
        if Some(a.index) == self.centre_site {
            1.0
        } else {
            a.weight
        }
    }
}

fn check_aux_keys(point: &ParameterPoint, structure: &ModelStructure) -> Result<()> {
    let expected: Vec<usize> = structure.aux_sites().map(|a| a.index).collect();
    let got: Vec<usize> = point.theta_aux.keys().copied().collect();
    if expected != got {
        return Err(Error::LayoutMismatch(format!(
            "auxiliary dispersions for sites {got:?}, active neighbours are {expected:?}"
        )));
    }
    Ok(())
}

fn powered_value(
    point: &ParameterPoint,
    structure: &ModelStructure,
    prior: &PriorSpec,
    data: &SpatialDataset,
) -> Result<f64> {
    let mut total = log_prior(point, prior);
    for a in &structure.active {
        let theta = if Some(a.index) == structure.centre_site {
            point.theta_centre
        } else {
            point.theta_aux[&a.index]
        };
        let params = RegressionParams::new(point.phi.clone(), theta)?;
        let site = &data.sites[a.index];
        let ll = location_log_lik(&site.observations, &params).map_err(|e| e.at_site(site.id.clone()))?;
        total += structure.power(a) * ll;
    }
    Ok(total)
}

/// Unnormalized log-density of the geographically-powered posterior.
pub fn powered_log_posterior(point: &ParameterPoint, spec: &GwrModelSpec, data: &SpatialDataset) -> Result<f64> {
    let structure = ModelStructure::new(spec, data, None)?;
    check_aux_keys(point, &structure)?;
    if point.phi.len() != data.p {
        return Err(Error::LayoutMismatch(format!(
            "{} coefficients for {} covariates",
            point.phi.len(),
            data.p
        )));
    }
    powered_value(point, &structure, &spec.prior, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationAudit {
    /// Percentage change, or the absolute difference when the untruncated
    /// value is exactly zero.
    pub value: f64,
    pub absolute_fallback: bool,
}

/// Relative change of the powered log-posterior caused by kernel
/// truncation, in percent. Neighbours that only the untruncated kernel
/// keeps get their dispersion at the prior mean.
pub fn truncation_relative_change(
    point: &ParameterPoint,
    spec: &GwrModelSpec,
    data: &SpatialDataset,
) -> Result<TruncationAudit> {
    truncation_audit_at(point, spec, data, None)
}

pub(crate) fn truncation_audit_at(
    point: &ParameterPoint,
    spec: &GwrModelSpec,
    data: &SpatialDataset,
    centre_site: Option<usize>,
) -> Result<TruncationAudit> {
    let truncated = ModelStructure::new(spec, data, centre_site)?;
    check_aux_keys(point, &truncated)?;
    let v_trunc = powered_value(point, &truncated, &spec.prior, data)?;
    let full_spec = GwrModelSpec {
        kernel: spec.kernel.with_threshold(0.0),
        ..spec.clone()
    };
    let full = ModelStructure::new(&full_spec, data, truncated.centre_site)?;
    let mut full_point = point.clone();
    for a in full.aux_sites() {
        full_point.theta_aux.entry(a.index).or_insert(spec.prior.theta_mean());
    }
    let v_full = powered_value(&full_point, &full, &spec.prior, data)?;
    let diff = (v_trunc - v_full).abs();
    Ok(if v_full == 0.0 {
        TruncationAudit {
            value: diff,
            absolute_fallback: true,
        }
    } else {
        TruncationAudit {
            value: diff / v_full.abs() * 100.0,
            absolute_fallback: false,
        }
    })
}

/// The point with coefficients at their prior mean and every dispersion at
/// its prior mean.
pub fn prior_mean_point(structure: &ModelStructure, prior: &PriorSpec) -> ParameterPoint {
    let theta = prior.theta_mean();
    ParameterPoint {
        phi: prior.phi_mean.clone(),
        theta_centre: theta,
        theta_aux: structure.aux_sites().map(|a| (a.index, theta)).collect(),
    }
}

pub const THETA_CENTRE: &str = "theta_centre";

pub fn phi_name(j: usize) -> String {
    format!("phi[{j}]")
}

pub fn aux_name(site_id: &str) -> String {
    format!("theta_aux[{site_id}]")
}

/// Drops the auxiliary dispersion columns, leaving the coefficients and
/// the centre dispersion.
pub fn marginal_of_interest(samples: &PosteriorSamples) -> PosteriorSamples {
    let keep: Vec<usize> = samples
        .names
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.starts_with("theta_aux["))
        .map(|(j, _)| j)
        .collect();
    samples.select(&keep)
}

/// One site's block of observations inside the target.
struct Group {
    start: usize,
    end: usize,
    /// Power on this site's likelihood.
    weight: f64,
    /// Parameter index of the dispersion used by this group.
    theta: usize,
}

/// Sampler target for one model, with cached per-observation linear
/// predictors and per-site likelihood parts so a coefficient move costs
/// one exponential and one logarithm per observation and a dispersion
/// move touches only its own site.
pub struct PoweredTarget {
    layout: ParamLayout,
    p: usize,
    prior: PriorSpec,
    x: Vec<f64>,
    ln_offset: Vec<f64>,
    y: Vec<f64>,
    yi: Vec<u64>,
    ln_fact: Vec<f64>,
    groups: Vec<Group>,
    /// Groups using each dispersion parameter (indexed from 0 at `theta_centre`).
    group_of_theta: Vec<Option<usize>>,

    // current state
    z: Vec<f64>,
    eta: Vec<f64>,
    mu: Vec<f64>,
    /// Σ lnΓ(y + 1/θ) - lnΓ(1/θ) - lnΓ(y+1) per group.
    rising: Vec<f64>,
    /// Σ y ln(θμ) - (1/θ + y) ln(1 + θμ) per group.
    kernel: Vec<f64>,
    prior_phi: f64,
    prior_theta: Vec<f64>,
    total: f64,

    // pending proposal
    eta_new: Vec<f64>,
    mu_new: Vec<f64>,
    kernel_new: Vec<f64>,
    pending_theta: (f64, f64, f64, f64),
    pending_phi_prior: f64,
    pending_total: f64,

    evaluations: u64,
}

impl PoweredTarget {
    /// `exclude` lists observation indices of the centre site left out of
    /// the fit.
    pub fn new(
        data: &SpatialDataset,
        structure: &ModelStructure,
        prior: &PriorSpec,
        exclude: &[usize],
    ) -> Result<Self> {
        prior.validate(data.p)?;
        let p = data.p;
        let mut names: Vec<String> = (0..p).map(phi_name).collect();
        names.push(THETA_CENTRE.to_string());
        let mut transforms = vec![Transform::Identity; p];
        transforms.push(Transform::Log);
        let mut blocks = vec![0..p, p..p + 1];

        let mut target = PoweredTarget {
            layout: ParamLayout::new(vec![], vec![], vec![])?,
            p,
            prior: prior.clone(),
            x: Vec::new(),
            ln_offset: Vec::new(),
            y: Vec::new(),
            yi: Vec::new(),
            ln_fact: Vec::new(),
            groups: Vec::new(),
            group_of_theta: vec![None],
            z: Vec::new(),
            eta: Vec::new(),
            mu: Vec::new(),
            rising: Vec::new(),
            kernel: Vec::new(),
            prior_phi: 0.0,
            prior_theta: Vec::new(),
            total: 0.0,
            eta_new: Vec::new(),
            mu_new: Vec::new(),
            kernel_new: Vec::new(),
            pending_theta: (0.0, 0.0, 0.0, 0.0),
            pending_phi_prior: 0.0,
            pending_total: 0.0,
            evaluations: 0,
        };

        for a in &structure.active {
            let site = &data.sites[a.index];
            let is_centre = Some(a.index) == structure.centre_site;
            let theta = if is_centre {
                0
            } else {
                let k = names.len() - p;
                names.push(aux_name(&site.id));
                transforms.push(Transform::Log);
                blocks.push(p + k..p + k + 1);
                target.group_of_theta.push(None);
                k
            };
            let start = target.y.len();
            for (j, obs) in site.observations.iter().enumerate() {
                if is_centre && exclude.contains(&j) {
                    continue;
                }
                target.x.extend_from_slice(&obs.x);
                target.ln_offset.push(obs.offset.ln());
                target.y.push(obs.y as f64);
                target.yi.push(obs.y);
                target.ln_fact.push(ln_gamma(obs.y as f64 + 1.0));
            }
            target.group_of_theta[theta] = Some(target.groups.len());
            target.groups.push(Group {
                start,
                end: target.y.len(),
                weight: structure.power(a),
                theta,
            });
        }
        let n = target.y.len();
        target.eta = vec![0.0; n];
        target.eta_new = vec![0.0; n];
        target.mu = vec![0.0; n];
        target.mu_new = vec![0.0; n];
        target.rising = vec![0.0; target.groups.len()];
        target.kernel = vec![0.0; target.groups.len()];
        target.kernel_new = vec![0.0; target.groups.len()];
        target.prior_theta = vec![0.0; target.group_of_theta.len()];
        target.layout = ParamLayout::new(names, transforms, blocks)?;
        Ok(target)
    }

    /// Number of per-observation likelihood term evaluations so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn n_observations(&self) -> usize {
        self.y.len()
    }

    /// Fills log-means and means from `phi`; false on linear-predictor
    /// overflow.
    fn means(&self, phi: &[f64], eta_out: &mut [f64], mu_out: &mut [f64]) -> bool {
        let mut ok = true;
        let rows = self.x.chunks_exact(self.p).zip(&self.ln_offset);
        for ((row, ln_off), (e, m)) in rows.zip(eta_out.iter_mut().zip(mu_out.iter_mut())) {
            let eta = row.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>() + ln_off;
            ok &= eta <= MAX_LINEAR_PREDICTOR;
            *e = eta;
            *m = eta.exp();
        }
        ok
    }

    fn group_kernel(&self, g: &Group, ln_theta: f64, eta: &[f64], mu: &[f64]) -> f64 {
        let theta = ln_theta.exp();
        let r = 1.0 / theta;
        let mut s = 0.0;
        for i in g.start..g.end {
            let t = theta * mu[i];
            let l1p = if t > 1e-2 { (1.0 + t).ln() } else { t.ln_1p() };
            s += self.y[i] * (ln_theta + eta[i]) - (r + self.y[i]) * l1p;
        }
        s
    }

    fn group_rising(&self, g: &Group, ln_theta: f64) -> f64 {
        let r = (-ln_theta).exp();
        if r >= 10.0 {
            return (g.start..g.end)
                .map(|i| ln_rising(r, self.yi[i]) - self.ln_fact[i])
                .sum();
        }
        // lnΓ(r) is shared by the whole group, and r + y > 24 is already in
        // the Stirling range
        let lg_r = ln_gamma(r);
        (g.start..g.end)
            .map(|i| {
                let y = self.yi[i];
                let rise = if y <= 24 {
                    ln_rising(r, y)
                } else {
                    ln_gamma_large(r + self.y[i]) - lg_r
                };
                rise - self.ln_fact[i]
            })
            .sum()
    }

    fn theta_prior(&self, z: f64) -> f64 {
        normal_ln_pdf(z, self.prior.log_theta_mean, self.prior.log_theta_sd)
    }

    fn sum_total(&self, prior_phi: f64, kernel: &[f64]) -> f64 {
        let lik: f64 = self
            .groups
            .iter()
            .enumerate()
            .map(|(k, g)| g.weight * (self.rising[k] + kernel[k]))
            .sum();
        prior_phi + self.prior_theta.iter().sum::<f64>() + lik
    }

    /// A starting point and coefficient proposal shape from a few Fisher
    /// scoring steps on the weighted likelihood with every dispersion at
    /// its prior median.
    #[allow(clippy::needless_range_loop)]
    pub fn initial_state(&self) -> (Vec<f64>, Option<BlockProposal>) {
        let p = self.p;
        let theta0 = self.prior.theta_median();
        let weights: Vec<f64> = {
            let mut w = vec![0.0; self.y.len()];
            for g in &self.groups {
                w[g.start..g.end].iter_mut().for_each(|v| *v = g.weight);
            }
            w
        };
        let precision: Vec<f64> = self.prior.phi_sd.iter().map(|s| 1.0 / (s * s)).collect();

        // least squares on the log scale for a start
        let mut a = vec![0.0; p * p];
        let mut b = vec![0.0; p];
        for i in 0..self.y.len() {
            let row = &self.x[i * p..(i + 1) * p];
            let target = (self.y[i] + 0.5).ln() - self.ln_offset[i];
            for r in 0..p {
                b[r] += weights[i] * row[r] * target;
                for c in 0..p {
                    a[r * p + c] += weights[i] * row[r] * row[c];
                }
            }
        }
        for r in 0..p {
            a[r * p + r] += precision[r];
            b[r] += precision[r] * self.prior.phi_mean[r];
        }
        let mut phi = match linalg::cholesky(&a, p) {
            Some(l) => {
                linalg::cholesky_solve(&l, p, &mut b);
                b
            }
            None => self.prior.phi_mean.clone(),
        };

        let mut eta = vec![0.0; self.y.len()];
        let mut objective = |phi: &[f64], mu: &mut [f64]| -> f64 {
            if !self.means(phi, &mut eta, mu) {
                return f64::NEG_INFINITY;
            }
            let mut s = 0.0;
            for i in 0..mu.len() {
                s += weights[i] * (self.y[i] * eta[i] - (1.0 / theta0 + self.y[i]) * (theta0 * mu[i]).ln_1p());
            }
            s - 0.5
                * phi
                    .iter()
                    .zip(&self.prior.phi_mean)
                    .zip(&precision)
                    .map(|((x, m), q)| q * (x - m) * (x - m))
                    .sum::<f64>()
        };

        let mut mu = vec![0.0; self.y.len()];
        let mut current = objective(&phi, &mut mu);
        if !current.is_finite() {
            phi = self.prior.phi_mean.clone();
            current = objective(&phi, &mut mu);
        }
        let mut info = vec![0.0; p * p];
        for _ in 0..50 {
            let mut grad = vec![0.0; p];
            info.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..self.y.len() {
                let row = &self.x[i * p..(i + 1) * p];
                let denom = 1.0 + theta0 * mu[i];
                let g = weights[i] * (self.y[i] - mu[i]) / denom;
                let h = weights[i] * mu[i] / denom;
                for r in 0..p {
                    grad[r] += g * row[r];
                    for c in 0..=r {
                        info[r * p + c] += h * row[r] * row[c];
                    }
                }
            }
            for r in 0..p {
                grad[r] -= precision[r] * (phi[r] - self.prior.phi_mean[r]);
                info[r * p + r] += precision[r];
                for c in 0..r {
                    info[c * p + r] = info[r * p + c];
                }
            }
            let Some(l) = linalg::cholesky(&info, p) else { break };
            let mut step = grad;
            linalg::cholesky_solve(&l, p, &mut step);
            let mut scale = 1.0;
            let mut improved = false;
            let mut trial = phi.clone();
            for _ in 0..30 {
                for r in 0..p {
                    trial[r] = phi[r] + scale * step[r];
                }
                let value = objective(&trial, &mut mu);
                if value >= current {
                    improved = value - current > 1e-10 * current.abs().max(1.0);
                    current = value;
                    phi.copy_from_slice(&trial);
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                break;
            }
        }
        // refresh the information at the final point
        let mut eta = vec![0.0; self.y.len()];
        let ok = self.means(&phi, &mut eta, &mut mu);
        let proposal = ok
            .then(|| {
                info.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..self.y.len() {
                    let row = &self.x[i * p..(i + 1) * p];
                    let h = weights[i] * mu[i] / (1.0 + theta0 * mu[i]);
                    for r in 0..p {
                        for c in 0..p {
                            info[r * p + c] += h * row[r] * row[c];
                        }
                    }
                }
                for r in 0..p {
                    info[r * p + r] += precision[r];
                }
                linalg::spd_inverse(&info, p).and_then(|cov| linalg::cholesky(&cov, p))
            })
            .flatten()
            .map(|chol| BlockProposal {
                chol,
                step: 2.38 / (p as f64).sqrt(),
            });
        if !ok {
            phi = self.prior.phi_mean.clone();
        }

        let mut init = phi;
        init.extend(std::iter::repeat_n(theta0, self.group_of_theta.len()));
        (init, proposal)
    }
}

impl BlockTarget for PoweredTarget {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn reset(&mut self, z: &[f64]) -> f64 {
        self.z = z.to_vec();
        let p = self.p;
        let (mut eta, mut mu) = (std::mem::take(&mut self.eta), std::mem::take(&mut self.mu));
        let ok = self.means(&z[..p], &mut eta, &mut mu);
        self.eta = eta;
        self.mu = mu;
        self.evaluations += self.y.len() as u64;
        if !ok {
            self.total = f64::NEG_INFINITY;
            return self.total;
        }
        self.prior_phi = self.prior.ln_phi_density(&z[..p]);
        for k in 0..self.prior_theta.len() {
            self.prior_theta[k] = self.theta_prior(z[p + k]);
        }
        for (k, g) in self.groups.iter().enumerate() {
            let lt = z[p + g.theta];
            self.rising[k] = self.group_rising(g, lt);
            self.kernel[k] = self.group_kernel(g, lt, &self.eta, &self.mu);
        }
        self.total = self.sum_total(self.prior_phi, &self.kernel);
        self.total
    }

    fn propose(&mut self, block: usize, proposal: &[f64]) -> f64 {
        let p = self.p;
        if block == 0 {
            self.evaluations += self.y.len() as u64;
            let (mut eta_new, mut mu_new) = (std::mem::take(&mut self.eta_new), std::mem::take(&mut self.mu_new));
            let ok = self.means(&proposal[..p], &mut eta_new, &mut mu_new);
            if ok {
                for (k, g) in self.groups.iter().enumerate() {
                    self.kernel_new[k] = self.group_kernel(g, self.z[p + g.theta], &eta_new, &mu_new);
                }
            }
            self.eta_new = eta_new;
            self.mu_new = mu_new;
            if !ok {
                self.pending_total = f64::NEG_INFINITY;
                return f64::NEG_INFINITY;
            }
            self.pending_phi_prior = self.prior.ln_phi_density(&proposal[..p]);
            self.pending_total = self.sum_total(self.pending_phi_prior, &self.kernel_new);
            return self.pending_total;
        }
        let k = block - 1;
        let lt = proposal[p + k];
        let prior_new = self.theta_prior(lt);
        let mut total = self.total - self.prior_theta[k] + prior_new;
        let (mut rising, mut kern) = (0.0, 0.0);
        if let Some(gi) = self.group_of_theta[k] {
            let g = &self.groups[gi];
            self.evaluations += (g.end - g.start) as u64;
            rising = self.group_rising(g, lt);
            kern = self.group_kernel(g, lt, &self.eta, &self.mu);
            total += g.weight * (rising + kern - self.rising[gi] - self.kernel[gi]);
        }
        self.pending_theta = (lt, prior_new, rising, kern);
        self.pending_total = total;
        total
    }

    fn accept(&mut self, block: usize) {
        let p = self.p;
        if block == 0 {
            std::mem::swap(&mut self.eta, &mut self.eta_new);
            std::mem::swap(&mut self.mu, &mut self.mu_new);
            std::mem::swap(&mut self.kernel, &mut self.kernel_new);
            self.prior_phi = self.pending_phi_prior;
            self.total = self.pending_total;
            return;
        }
        let k = block - 1;
        let (lt, prior_new, rising, kern) = self.pending_theta;
        self.z[p + k] = lt;
        self.prior_theta[k] = prior_new;
        if let Some(gi) = self.group_of_theta[k] {
            self.rising[gi] = rising;
            self.kernel[gi] = kern;
        }
        self.total = self.pending_total;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    pub earth_radius: f64,
    /// Keep auxiliary dispersion draws instead of projecting them away.
    pub keep_auxiliary: bool,
}

impl FitSettings {
    pub fn new(prior: PriorSpec, sampler: SamplerConfig) -> Self {
        FitSettings {
            prior,
            sampler,
            earth_radius: EARTH_RADIUS_KM,
            keep_auxiliary: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelFit {
    pub site_id: String,
    pub n_active: usize,
    /// One entry per chain, projected to the parameters of interest unless
    /// `keep_auxiliary` was set.
    pub chains: Vec<PosteriorSamples>,
    pub warnings: Vec<String>,
    pub evaluations: u64,
}

impl ModelFit {
    pub fn pooled(&self) -> Result<PosteriorSamples> {
        pool_chains(&self.chains)
    }
}

/// Fits the model centred on site `centre`, leaving out the listed
/// observations of that site.
pub fn fit_model(
    data: &SpatialDataset,
    centre: usize,
    exclude: &[usize],
    kernel: &KernelSpec,
    settings: &FitSettings,
) -> Result<ModelFit> {
    let site = data
        .sites
        .get(centre)
        .ok_or_else(|| Error::InvalidParameter(format!("centre site {centre} out of range")))?;
    let fit = || -> Result<ModelFit> {
        settings.sampler.validate()?;
        let spec = GwrModelSpec {
            centre: site.coord,
            kernel: *kernel,
            prior: settings.prior.clone(),
            earth_radius: settings.earth_radius,
        };
        let structure = ModelStructure::new(&spec, data, Some(centre))?;
        let mut target = PoweredTarget::new(data, &structure, &settings.prior, exclude)?;
        let (init, phi_proposal) = target.initial_state();
        let mut chains = Vec::with_capacity(settings.sampler.chains);
        let mut warnings = Vec::new();
        for chain_id in 0..settings.sampler.chains as u32 {
            let options = ChainOptions {
                chain_id,
                seed: Some(derive_seed(settings.sampler.seed, &site.id, chain_id)),
                proposals: vec![phi_proposal.clone()],
            };
            let chain = run_chain_with(&mut target, &settings.sampler, &init, &options)?;
            warnings.extend(chain.warnings.into_iter().map(|w| format!("chain {chain_id}: {w}")));
            chains.push(if settings.keep_auxiliary {
                chain.samples
            } else {
                marginal_of_interest(&chain.samples)
            });
        }
        Ok(ModelFit {
            site_id: site.id.clone(),
            n_active: structure.n_active(),
            chains,
            warnings,
            evaluations: target.evaluations(),
        })
    };
    fit().map_err(|e| e.at_site(site.id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, m: usize, seed: u64) -> SpatialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = (0..n)
            .map(|i| Site {
                id: format!("s{i}"),
                coord: Coordinate::planar(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)),
                observations: (0..m)
                    .map(|_| {
                        Observation::new(
                            rng.random_range(0..40),
                            vec![1.0, rng.random_range(-1.0..1.0)],
                            rng.random_range(0.5..2.0),
                        )
                        .unwrap()
                    })
                    .collect(),
            })
            .collect();
        SpatialDataset::new(sites, 2).unwrap()
    }

    fn spec_at(data: &SpatialDataset, i: usize, eta: f64, w: f64) -> GwrModelSpec {
        GwrModelSpec::new(
            data.sites[i].coord,
            KernelSpec::new(eta, w).unwrap(),
            PriorSpec::weakly_informative(data.p),
        )
    }

    fn point_for(structure: &ModelStructure, rng: &mut ChaCha8Rng) -> ParameterPoint {
        ParameterPoint {
            phi: vec![rng.random_range(0.5..2.5), rng.random_range(-0.5..0.5)],
            theta_centre: rng.random_range(0.1..2.0),
            theta_aux: structure
                .aux_sites()
                .map(|a| (a.index, rng.random_range(0.1..2.0)))
                .collect(),
        }
    }

    fn oracle_ll(site: &Site, phi: &[f64], theta: f64) -> f64 {
        use statrs::function::gamma::ln_gamma as lg;
        site.observations
            .iter()
            .map(|o| {
                let mu = o.offset * (o.x[0] * phi[0] + o.x[1] * phi[1]).exp();
                let r = 1.0 / theta;
                let y = o.y as f64;
                lg(y + r) - lg(r) - lg(y + 1.0) - r * (1.0 + theta * mu).ln()
                    + y * (theta * mu / (1.0 + theta * mu)).ln()
            })
            .sum()
    }

    #[test]
    fn cut_limit() {
        let data = dataset(4, 3, 1);
        let spec = spec_at(&data, 2, 1e-8, 1e-2);
        let structure = ModelStructure::new(&spec, &data, None).unwrap();
        assert_eq!(structure.n_active(), 1);
        assert_eq!(structure.centre_site, Some(2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pt = point_for(&structure, &mut rng);
        let v = powered_log_posterior(&pt, &spec, &data).unwrap();
        let expected = log_prior(&pt, &spec.prior) + oracle_ll(&data.sites[2], &pt.phi, pt.theta_centre);
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn standard_limit() {
        let data = dataset(4, 3, 2);
        let spec = spec_at(&data, 0, 1e8, 0.0);
        let structure = ModelStructure::new(&spec, &data, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pt = point_for(&structure, &mut rng);
        let v = powered_log_posterior(&pt, &spec, &data).unwrap();
        let mut expected = log_prior(&pt, &spec.prior) + oracle_ll(&data.sites[0], &pt.phi, pt.theta_centre);
        for i in 1..4 {
            expected += oracle_ll(&data.sites[i], &pt.phi, pt.theta_aux[&i]);
        }
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }

    #[test]
    fn brute_force_three_sites() {
        let data = dataset(3, 2, 3);
        let spec = spec_at(&data, 1, 2.0, 0.0);
        let structure = ModelStructure::new(&spec, &data, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pt = point_for(&structure, &mut rng);
        let mut expected = log_prior(&pt, &spec.prior);
        for (i, site) in data.sites.iter().enumerate() {
            let d = crate::geo::euclidean_distance(&site.coord, &data.sites[1].coord).unwrap();
            let w = (-(d * d) / 4.0).exp();
            let theta = if i == 1 { pt.theta_centre } else { pt.theta_aux[&i] };
            expected += w * oracle_ll(site, &pt.phi, theta);
        }
        let v = powered_log_posterior(&pt, &spec, &data).unwrap();
        assert!((v - expected).abs() < 1e-9);
    }

    #[test]
    fn site_order_does_not_matter() {
        let data = dataset(5, 3, 4);
        let spec = spec_at(&data, 3, 2.5, 0.0);
        let structure = ModelStructure::new(&spec, &data, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pt = point_for(&structure, &mut rng);
        let v = powered_log_posterior(&pt, &spec, &data).unwrap();

        let order = [4, 2, 0, 3, 1];
        let shuffled = SpatialDataset::new(order.iter().map(|&i| data.sites[i].clone()).collect(), 2).unwrap();
        let new_index = |old: usize| order.iter().position(|&i| i == old).unwrap();
        let moved = ParameterPoint {
            theta_aux: pt.theta_aux.iter().map(|(&k, &t)| (new_index(k), t)).collect(),
            ..pt.clone()
        };
        let w = powered_log_posterior(&moved, &spec, &shuffled).unwrap();
        assert!((v - w).abs() < 1e-9 * v.abs());
    }

    #[test]
    fn aux_keys_must_match() {
        let data = dataset(3, 2, 5);
        let spec = spec_at(&data, 0, 1e8, 0.0);
        let pt = ParameterPoint {
            phi: vec![1.0, 0.0],
            theta_centre: 1.0,
            theta_aux: BTreeMap::from([(1, 1.0)]),
        };
        assert!(matches!(
            powered_log_posterior(&pt, &spec, &data),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn truncation_audit_edge_cases() {
        let data = dataset(4, 3, 6);
        let spec = spec_at(&data, 0, 2.0, 0.0);
        let structure = ModelStructure::new(&spec, &data, None).unwrap();
        let pt = prior_mean_point(&structure, &spec.prior);
        let audit = truncation_relative_change(&pt, &spec, &data).unwrap();
        assert_eq!(audit.value, 0.0);

        let single = SpatialDataset::new(vec![data.sites[0].clone()], 2).unwrap();
        let spec = spec_at(&single, 0, 2.0, 0.01);
        let structure = ModelStructure::new(&spec, &single, None).unwrap();
        let pt = prior_mean_point(&structure, &spec.prior);
        assert_eq!(truncation_relative_change(&pt, &spec, &single).unwrap().value, 0.0);
    }

    #[test]
    fn target_matches_direct_evaluation() {
        use crate::mcmc::BlockTarget;
        let data = dataset(4, 5, 9);
        let spec = spec_at(&data, 1, 3.0, 0.0);
        let structure = ModelStructure::new(&spec, &data, Some(1)).unwrap();
        let mut target = PoweredTarget::new(&data, &structure, &spec.prior, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pt = point_for(&structure, &mut rng);
        let mut nat = pt.phi.clone();
        nat.push(pt.theta_centre);
        nat.extend(pt.theta_aux.values());
        let z = target.layout().to_unconstrained(&nat);
        let jac: f64 = z[2..].iter().sum();
        let direct = powered_log_posterior(&pt, &spec, &data).unwrap();
        let lp = target.reset(&z);
        assert!((lp - (direct + jac)).abs() < 1e-9 * direct.abs());

        // a dispersion move, then a coefficient move
        let mut prop = z.clone();
        prop[3] += 0.3;
        let lp_theta = target.propose(2, &prop);
        target.accept(2);
        prop[0] -= 0.1;
        let lp_phi = target.propose(0, &prop);
        let mut fresh = PoweredTarget::new(&data, &structure, &spec.prior, &[]).unwrap();
        let mut z_theta = z.clone();
        z_theta[3] += 0.3;
        assert!((lp_theta - fresh.reset(&z_theta)).abs() < 1e-9 * lp.abs());
        assert!((lp_phi - fresh.reset(&prop)).abs() < 1e-9 * lp.abs());
    }

    #[test]
    fn marginal_projection() {
        let data = dataset(3, 4, 11);
        let settings = FitSettings {
            keep_auxiliary: true,
            ..FitSettings::new(
                PriorSpec::weakly_informative(2),
                SamplerConfig {
                    iterations: 300,
                    burn_in: 100,
                    chains: 1,
                    ..Default::default()
                },
            )
        };
        let kernel = KernelSpec::new(1e8, 0.0).unwrap();
        let fit = fit_model(&data, 0, &[], &kernel, &settings).unwrap();
        let full = &fit.chains[0];
        assert_eq!(full.n_params(), 2 + 1 + 2);
        let once = marginal_of_interest(full);
        assert_eq!(once.n_params(), 3);
        assert_eq!(once.n_draws(), full.n_draws());
        assert_eq!(marginal_of_interest(&once), once);
        assert_eq!(once.column(0), full.column(0));
        assert!(once.column(2).iter().all(|&t| t > 0.0));
    }
}
