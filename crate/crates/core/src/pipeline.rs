//! Per-location driver, run configuration and file formats.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elpd::{collect_all, evaluate_site, make_folds, select_bandwidth, Checkpoints, ElpdEntry, ElpdTable};
use crate::geo::{Coordinate, Frame, KernelSpec, EARTH_RADIUS_KM};
use crate::likelihood::{Observation, PriorSpec};
use crate::mcmc::{pool_chains, PosteriorSamples, SamplerConfig};
use crate::posterior::{
    fit_model, prior_mean_point, truncation_audit_at, FitSettings, GwrModelSpec, ModelStructure, Site, SpatialDataset,
    TruncationAudit,
};
use crate::{Error, Result};

pub const WORKERS_ENV: &str = "BGWR_WORKERS";

/// Maps `f` over `0..n` on a pool of `workers` threads, returning results
/// in index order. One worker runs inline on the calling thread.
pub fn parallel_map<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// A scalar applied to every coefficient, or one value per coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerCoefficient {
    All(f64),
    Each(Vec<f64>),
}

impl PerCoefficient {
    fn expand(&self, p: usize) -> Vec<f64> {
        match self {
            PerCoefficient::All(v) => vec![*v; p],
            PerCoefficient::Each(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub phi_mean: PerCoefficient,
    pub phi_sd: PerCoefficient,
    pub log_theta_mean: f64,
    pub log_theta_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        let d = PriorSpec::weakly_informative(1);
        PriorConfig {
            phi_mean: PerCoefficient::All(d.phi_mean[0]),
            phi_sd: PerCoefficient::All(d.phi_sd[0]),
            log_theta_mean: d.log_theta_mean,
            log_theta_sd: d.log_theta_sd,
        }
    }
}

impl PriorConfig {
    pub fn resolve(&self, p: usize) -> Result<PriorSpec> {
        let prior = PriorSpec {
            phi_mean: self.phi_mean.expand(p),
            phi_sd: self.phi_sd.expand(p),
            log_theta_mean: self.log_theta_mean,
            log_theta_sd: self.log_theta_sd,
        };
        prior.validate(p)?;
        Ok(prior)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Bandwidth of a fixed-bandwidth fit.
    pub bandwidth: Option<f64>,
    /// Candidate bandwidths for selection.
    pub candidates: Vec<f64>,
    pub threshold: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: None,
            candidates: Vec::new(),
            threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub folds: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Retained draws per chain between elpd checkpoints; 0 disables the
    /// stability check.
    pub checkpoint_every: usize,
    pub tolerance: f64,
    /// Sampler settings for the cross-validation fits, if different from
    /// the final fit.
    pub sampler: Option<SamplerConfig>,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            folds: 2,
            holdout_fraction: 0.5,
            seed: 0,
            checkpoint_every: 0,
            tolerance: 0.05,
            sampler: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub frame: Frame,
    pub earth_radius: f64,
    pub workers: usize,
    pub write_traces: bool,
    pub kernel: KernelConfig,
    pub prior: PriorConfig,
    pub sampler: SamplerConfig,
    pub cv: FoldConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            output_dir: PathBuf::from("bgwr-out"),
            frame: Frame::Planar,
            earth_radius: EARTH_RADIUS_KM,
            workers: 1,
            write_traces: false,
            kernel: KernelConfig::default(),
            prior: PriorConfig::default(),
            sampler: SamplerConfig::default(),
            cv: FoldConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the worker-count environment override.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            self.workers = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV}={v} is not a worker count")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if !(self.earth_radius > 0.0 && self.earth_radius.is_finite()) {
            return Err(Error::Config("earth_radius must be > 0".into()));
        }
        self.sampler.validate()?;
        if let Some(s) = &self.cv.sampler {
            s.validate()?;
        }
        for &eta in self.kernel.bandwidth.iter().chain(&self.kernel.candidates) {
            KernelSpec::new(eta, self.kernel.threshold).map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(0.0..1.0).contains(&self.kernel.threshold) {
            return Err(Error::Config(format!(
                "threshold {} must lie in [0, 1)",
                self.kernel.threshold
            )));
        }
        if self.cv.folds == 0 {
            return Err(Error::Config("cv.folds must be at least 1".into()));
        }
        if !(self.cv.holdout_fraction > 0.0 && self.cv.holdout_fraction < 1.0) {
            return Err(Error::Config("cv.holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Validation for commands that need the candidate list.
    pub fn validate_candidates(&self) -> Result<()> {
        self.validate()?;
        if self.kernel.candidates.is_empty() {
            return Err(Error::Config("candidate bandwidth list is empty".into()));
        }
        Ok(())
    }

    pub fn kernel_at(&self, bandwidth: f64) -> Result<KernelSpec> {
        KernelSpec::new(bandwidth, self.kernel.threshold)
    }

    pub fn fit_settings(&self, p: usize) -> Result<FitSettings> {
        Ok(FitSettings {
            earth_radius: self.earth_radius,
            ..FitSettings::new(self.prior.resolve(p)?, self.sampler.clone())
        })
    }

    fn cv_settings(&self, p: usize) -> Result<FitSettings> {
        let mut s = self.fit_settings(p)?;
        if let Some(cv) = &self.cv.sampler {
            s.sampler = cv.clone();
        }
        Ok(s)
    }

    fn checkpoints(&self) -> Option<Checkpoints> {
        (self.cv.checkpoint_every > 0).then_some(Checkpoints {
            every: self.cv.checkpoint_every,
            tol: self.cv.tolerance,
        })
    }
}

/// Reads a dataset in the `site_id,u,v,y,offset,x1..xp` schema.
pub fn ingest_csv(path: &Path, frame: Frame) -> Result<SpatialDataset> {
    let file = fs::File::open(path).map_err(|e| Error::Ingest {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    ingest_reader(file, frame, &path.display().to_string())
}

pub fn ingest_reader<R: Read>(input: R, frame: Frame, label: &str) -> Result<SpatialDataset> {
    let err = |line: usize, message: String| Error::Ingest {
        path: label.to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing column {name}")))
    };
    let (c_id, c_u, c_v, c_y, c_off) = (col("site_id")?, col("u")?, col("v")?, col("y")?, col("offset")?);
    let mut x_cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix('x')
                .and_then(|n| n.parse::<usize>().ok())
                .map(|n| (n, i))
        })
        .collect();
    x_cols.sort_unstable();
    if x_cols.is_empty() {
        return Err(err(1, "no covariate columns x1..xp".into()));
    }
    for (k, &(n, _)) in x_cols.iter().enumerate() {
        if n != k + 1 {
            return Err(err(1, format!("missing column x{}", k + 1)));
        }
    }

    let mut sites: Vec<Site> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let num = |c: usize, name: &str| -> Result<f64> {
            let cell = &record[c];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("column {name}: '{cell}' is not a finite number")))
        };
        let id = record[c_id].to_string();
        if id.is_empty() {
            return Err(err(line, "empty site_id".into()));
        }
        let (u, v) = (num(c_u, "u")?, num(c_v, "v")?);
        let y_cell = &record[c_y];
        let y: u64 = match y_cell.parse::<i64>() {
            Ok(y) if y >= 0 => y as u64,
            Ok(y) => return Err(err(line, format!("column y: count {y} must be >= 0"))),
            Err(_) => return Err(err(line, format!("column y: '{y_cell}' is not an integer count"))),
        };
        let offset = num(c_off, "offset")?;
        if offset <= 0.0 {
            return Err(err(line, format!("column offset: {offset} must be > 0")));
        }
        let x = x_cols
            .iter()
            .map(|&(n, c)| num(c, &format!("x{n}")))
            .collect::<Result<Vec<_>>>()?;
        let coord = Coordinate::new(u, v, frame).map_err(|e| err(line, e.to_string()))?;
        let obs = Observation { y, x, offset };
        match index.get(&id) {
            Some(&i) => {
                let site = &mut sites[i];
                if site.coord != coord {
                    return Err(err(
                        line,
                        format!(
                            "site {id} has coordinates ({u}, {v}) but earlier rows give ({}, {})",
                            site.coord.u, site.coord.v
                        ),
                    ));
                }
                site.observations.push(obs);
            }
            None => {
                index.insert(id.clone(), sites.len());
                sites.push(Site {
                    id,
                    coord,
                    observations: vec![obs],
                });
            }
        }
    }
    if sites.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    SpatialDataset::new(sites, x_cols.len()).map_err(|e| err(0, e.to_string()))
}

pub fn export_csv<W: Write>(data: &SpatialDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["site_id", "u", "v", "y", "offset"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=data.p).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for site in &data.sites {
        for obs in &site.observations {
            let mut rec = vec![
                site.id.clone(),
                site.coord.u.to_string(),
                site.coord.v.to_string(),
                obs.y.to_string(),
                obs.offset.to_string(),
            ];
            rec.extend(obs.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub param: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(samples: &PosteriorSamples) -> Result<Vec<SummaryRow>> {
    let n = samples.n_draws();
    if n == 0 {
        return Err(Error::Empty("posterior draws"));
    }
    Ok((0..samples.n_params())
        .map(|j| {
            let mut col = samples.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            col.sort_by(f64::total_cmp);
            SummaryRow {
                param: samples.names[j].clone(),
                mean,
                sd,
                q025: quantile(&col, 0.025),
                q50: quantile(&col, 0.5),
                q975: quantile(&col, 0.975),
            }
        })
        .collect())
}

pub const SUMMARY_HEADER: [&str; 7] = ["site_id", "param", "mean", "sd", "q2.5", "q50", "q97.5"];

#[derive(Clone, Debug)]
pub struct SiteFit {
    pub site_id: String,
    pub summary: Vec<SummaryRow>,
    pub acceptance_rate: f64,
    pub n_active: usize,
    pub evaluations: u64,
    pub truncation: TruncationAudit,
    pub warnings: Vec<String>,
    /// Per-chain draws of the coefficients and centre dispersion.
    pub chains: Vec<PosteriorSamples>,
}

impl SiteFit {
    pub fn mean_of(&self, param: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.param == param).map(|r| r.mean)
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub bandwidth: f64,
    pub sites: Vec<SiteFit>,
    pub elapsed: Duration,
}

impl FitResult {
    /// Largest truncation audit value over sites.
    pub fn truncation_relative_change(&self) -> f64 {
        self.sites.iter().map(|s| s.truncation.value).fold(0.0, f64::max)
    }

    pub fn site(&self, id: &str) -> Option<&SiteFit> {
        self.sites.iter().find(|s| s.site_id == id)
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SUMMARY_HEADER)?;
        for site in &self.sites {
            for r in &site.summary {
                w.write_record([
                    site.site_id.clone(),
                    r.param.clone(),
                    r.mean.to_string(),
                    r.sd.to_string(),
                    r.q025.to_string(),
                    r.q50.to_string(),
                    r.q975.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Acceptance, active-set size and audit value per site.
    pub fn write_diagnostics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "site_id",
            "acceptance_rate",
            "n_active",
            "evaluations",
            "truncation_change",
        ])?;
        for s in &self.sites {
            w.write_record([
                s.site_id.clone(),
                s.acceptance_rate.to_string(),
                s.n_active.to_string(),
                s.evaluations.to_string(),
                s.truncation.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One CSV per site and chain, `<site>_chain<k>.csv`.
    pub fn write_traces(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for site in &self.sites {
            for chain in &site.chains {
                let name = format!("{}_chain{}.csv", sanitize(&site.site_id), chain.chain_id);
                chain.write_csv(fs::File::create(dir.join(name))?)?;
            }
        }
        Ok(())
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Reads a `summary.csv` back into per-site rows.
pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<(String, SummaryRow)>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != SUMMARY_HEADER {
        return Err(Error::Ingest {
            path: "summary".into(),
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let f = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Ingest {
                path: "summary".into(),
                line: i + 2,
                message: format!("column {} is not a number", SUMMARY_HEADER[k]),
            })
        };
        rows.push((
            rec[0].to_string(),
            SummaryRow {
                param: rec[1].to_string(),
                mean: f(2)?,
                sd: f(3)?,
                q025: f(4)?,
                q50: f(5)?,
                q975: f(6)?,
            },
        ));
    }
    Ok(rows)
}

fn fit_site(data: &SpatialDataset, i: usize, kernel: &KernelSpec, settings: &FitSettings) -> Result<SiteFit> {
    let model = fit_model(data, i, &[], kernel, settings)?;
    let site = &data.sites[i];
    let context = |e: Error| e.at_site(site.id.clone());
    let pooled = pool_chains(&model.chains).map_err(context)?;
    let summary = summarize(&pooled).map_err(context)?;
    let spec = GwrModelSpec {
        centre: site.coord,
        kernel: *kernel,
        prior: settings.prior.clone(),
        earth_radius: settings.earth_radius,
    };
    let structure = ModelStructure::new(&spec, data, Some(i)).map_err(context)?;
    let point = prior_mean_point(&structure, &settings.prior);
    let truncation = truncation_audit_at(&point, &spec, data, Some(i)).map_err(context)?;
    for w in &model.warnings {
        log::warn!("site {}: {w}", site.id);
    }
    Ok(SiteFit {
        site_id: model.site_id,
        summary,
        acceptance_rate: pooled.acceptance_rate,
        n_active: model.n_active,
        evaluations: model.evaluations,
        truncation,
        warnings: model.warnings,
        chains: model.chains,
    })
}

/// Fits every site's model at one bandwidth.
pub fn fit_all(data: &SpatialDataset, config: &RunConfig, bandwidth: f64) -> Result<FitResult> {
    config.validate()?;
    let kernel = config.kernel_at(bandwidth)?;
    let settings = config.fit_settings(data.p)?;
    let (results, elapsed) = stopwatch(|| {
        parallel_map(config.workers, data.sites.len(), |i| {
            fit_site(data, i, &kernel, &settings)
        })
    });
    Ok(FitResult {
        bandwidth,
        sites: collect_all(results?)?,
        elapsed,
    })
}

/// `wasm32-unknown-unknown` has no clock; elapsed time reads as zero there.
fn stopwatch<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    #[cfg(not(target_arch = "wasm32"))]
    {
        let start = std::time::Instant::now();
        let out = f();
        (out, start.elapsed())
    }
    #[cfg(target_arch = "wasm32")]
    {
        (f(), Duration::ZERO)
    }
}

/// Cross-validated elpd for every candidate, fold and site.
pub fn cross_validate(data: &SpatialDataset, config: &RunConfig) -> Result<ElpdTable> {
    config.validate_candidates()?;
    let plan = make_folds(data, config.cv.folds, config.cv.holdout_fraction, config.cv.seed)?;
    let settings = config.cv_settings(data.p)?;
    let kernels = config
        .kernel
        .candidates
        .iter()
        .map(|&eta| config.kernel_at(eta))
        .collect::<Result<Vec<_>>>()?;
    let n = data.sites.len();
    let folds = config.cv.folds;
    let cells = kernels.len() * folds * n;
    let checkpoints = config.checkpoints();
    let results = parallel_map(config.workers, cells, |c| {
        let (r, rest) = (c / (folds * n), c % (folds * n));
        let (q, i) = (rest / n, rest % n);
        evaluate_site(data, i, &kernels[r], q, &plan, &settings, checkpoints).map(|s| (r, q, s))
    })?;
    let entries = collect_all(results)?
        .into_iter()
        .map(|(r, q, s)| {
            for w in &s.warnings {
                log::warn!("bandwidth {} site {}: {w}", kernels[r].bandwidth, s.site_id);
            }
            ElpdEntry {
                bandwidth: kernels[r].bandwidth,
                fold: q,
                site_id: s.site_id,
                elpd: s.elpd,
            }
        })
        .collect();
    Ok(ElpdTable { entries })
}

#[derive(Clone, Debug)]
pub struct SelectionOutcome {
    pub table: ElpdTable,
    pub bandwidth: f64,
    pub curve: Vec<(f64, f64)>,
    pub fit: FitResult,
}

/// Cross-validates the candidates, then refits every site at the winner.
/// A single candidate is fitted directly.
pub fn select_and_fit(data: &SpatialDataset, config: &RunConfig) -> Result<SelectionOutcome> {
    config.validate_candidates().map_err(|e| e.in_stage("config"))?;
    let (table, bandwidth, curve) = if let [only] = config.kernel.candidates[..] {
        (ElpdTable::default(), only, Vec::new())
    } else {
        let table = cross_validate(data, config).map_err(|e| e.in_stage("cross-validation"))?;
        let (eta, curve) = select_bandwidth(&table).map_err(|e| e.in_stage("selection"))?;
        (table, eta, curve)
    };
    let fit = fit_all(data, config, bandwidth).map_err(|e| e.in_stage("final fit"))?;
    Ok(SelectionOutcome {
        table,
        bandwidth,
        curve,
        fit,
    })
}

pub fn write_elpd_outputs(dir: &Path, table: &ElpdTable) -> Result<()> {
    fs::create_dir_all(dir)?;
    table.write_csv(fs::File::create(dir.join("elpd_table.csv"))?)?;
    table.write_means_csv(fs::File::create(dir.join("elpd_means.csv"))?)?;
    Ok(())
}

pub fn write_fit_outputs(dir: &Path, fit: &FitResult, traces: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fit.write_summary_csv(fs::File::create(dir.join("summary.csv"))?)?;
    fit.write_diagnostics_csv(fs::File::create(dir.join("diagnostics.csv"))?)?;
    if traces {
        fit.write_traces(&dir.join("traces"))?;
    }
    Ok(())
}

pub fn write_selection_outputs(dir: &Path, outcome: &SelectionOutcome, traces: bool) -> Result<()> {
    write_elpd_outputs(dir, &outcome.table)?;
    fs::write(dir.join("selected_bandwidth.txt"), format!("{}\n", outcome.bandwidth))?;
    write_fit_outputs(dir, &outcome.fit, traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "site_id,u,v,y,offset,x1,x2\n\
a,0,0,3,1,1,0.5\n\
a,0,0,0,2,1,-0.25\n\
a,0,0,7,1.5,1,1\n\
b,1,0,2,1,1,0\n\
b,1,0,4,1,1,0.125\n\
b,1,0,1,1,1,2\n";

    #[test]
    fn ingest_groups_rows() {
        let data = ingest_reader(SMALL.as_bytes(), Frame::Planar, "t").unwrap();
        assert_eq!(data.sites.len(), 2);
        assert_eq!(data.p, 2);
        assert!(data.sites.iter().all(|s| s.observations.len() == 3));
        assert_eq!(data.sites[0].observations[2].y, 7);
    }

    #[test]
    fn ingest_errors_name_rows() {
        let bad = SMALL.replace("b,1,0,4,", "b,1,0,-1,");
        let e = ingest_reader(bad.as_bytes(), Frame::Planar, "t").unwrap_err();
        assert!(matches!(e, Error::Ingest { line: 6, .. }), "{e}");
        let bad = SMALL.replace("a,0,0,0,2", "a,0,0,0,0");
        assert!(matches!(
            ingest_reader(bad.as_bytes(), Frame::Planar, "t"),
            Err(Error::Ingest { line: 3, .. })
        ));
        let bad = SMALL.replace("b,1,0,1,1", "b,1,9,1,1");
        assert!(matches!(
            ingest_reader(bad.as_bytes(), Frame::Planar, "t"),
            Err(Error::Ingest { line: 7, .. })
        ));
        let bad = SMALL.replace("1,0.125", "1,abc");
        assert!(matches!(
            ingest_reader(bad.as_bytes(), Frame::Planar, "t"),
            Err(Error::Ingest { line: 6, .. })
        ));
        let bad = SMALL.replace(",offset", ",off");
        assert!(matches!(
            ingest_reader(bad.as_bytes(), Frame::Planar, "t"),
            Err(Error::Ingest { line: 1, .. })
        ));
        assert!(ingest_reader(SMALL.as_bytes(), Frame::Spherical, "t").is_ok());
        let far = SMALL.replace("b,1,0,", "b,1,95,");
        assert!(ingest_reader(far.as_bytes(), Frame::Spherical, "t").is_err());
    }

    #[test]
    fn export_round_trips() {
        let data = ingest_reader(SMALL.as_bytes(), Frame::Planar, "t").unwrap();
        let mut buf = Vec::new();
        export_csv(&data, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), SMALL);
        assert_eq!(ingest_reader(&buf[..], Frame::Planar, "t").unwrap(), data);
    }

    fn column(values: &[f64]) -> PosteriorSamples {
        PosteriorSamples {
            names: vec!["c".into()],
            draws: values.to_vec(),
            acceptance_rate: 0.0,
            chain_id: 0,
            seed: 0,
        }
    }

    #[test]
    fn summaries() {
        let rows = summarize(&column(&[2.5; 7])).unwrap();
        let r = &rows[0];
        assert_eq!((r.mean, r.sd, r.q025, r.q50, r.q975), (2.5, 0.0, 2.5, 2.5, 2.5));
        let r = &summarize(&column(&[4.0, 1.0, 3.0, 2.0])).unwrap()[0];
        assert_eq!(r.q50, 2.5);
        assert!((r.q025 - 1.075).abs() < 1e-12);
        let r = &summarize(&column(&[-2.0, -1.0, 0.0, 1.0, 2.0])).unwrap()[0];
        assert_eq!(r.mean, r.q50);
        assert!(summarize(&column(&[])).is_err());
    }

    #[test]
    fn config_parsing_and_validation() {
        let cfg = RunConfig::from_toml(
            "workers = 3\n[kernel]\ncandidates = [0.5, 4.0]\nthreshold = 0.0\n[sampler]\niterations = 100\nburn_in = 10\n[prior]\nphi_sd = [1.0, 2.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.sampler.chains, 10);
        cfg.validate_candidates().unwrap();
        assert_eq!(cfg.prior.resolve(2).unwrap().phi_sd, vec![1.0, 2.0]);
        assert!(cfg.prior.resolve(3).is_err());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

        let empty = RunConfig::default();
        assert!(matches!(empty.validate_candidates(), Err(Error::Config(_))));
        let neg = RunConfig::from_toml("[kernel]\ncandidates = [-1.0]").unwrap();
        assert!(neg.validate().is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let zero = RunConfig {
            workers: 0,
            ..RunConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn golden_summary_header() {
        let fit = FitResult {
            bandwidth: 1.0,
            sites: vec![],
            elapsed: Duration::ZERO,
        };
        let mut buf = Vec::new();
        fit.write_summary_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "site_id,param,mean,sd,q2.5,q50,q97.5\n"
        );
    }

    #[test]
    fn parallel_map_keeps_order() {
        let seq = parallel_map(1, 50, |i| i * i).unwrap();
        let par = parallel_map(4, 50, |i| i * i).unwrap();
        assert_eq!(seq, par);
    }
}
