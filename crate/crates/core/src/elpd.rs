//! Expected log pointwise predictive density, fold plans and bandwidth
//! selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geo::KernelSpec;
use crate::likelihood::{nb_ln_pmf_log_mean, Observation};
use crate::mcmc::{derive_seed, elpd_trace_converged, pool_chains, PosteriorSamples};
use crate::pipeline::parallel_map;
use crate::posterior::{fit_model, phi_name, FitSettings, SpatialDataset, THETA_CENTRE};
use crate::{Error, Result};

/// `ln((1/n) Σ e^{v_i})` with the maximum shifted out.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// Columns of the coefficients and centre dispersion in `samples`.
fn predictive_columns(samples: &PosteriorSamples, p: usize) -> Result<(Vec<usize>, usize)> {
    let missing = |name: &str| Error::LayoutMismatch(format!("samples have no column {name}"));
    let phi = (0..p)
        .map(|j| {
            let name = phi_name(j);
            samples.column_index(&name).ok_or_else(|| missing(&name))
        })
        .collect::<Result<Vec<_>>>()?;
    let theta = samples
        .column_index(THETA_CENTRE)
        .ok_or_else(|| missing(THETA_CENTRE))?;
    Ok((phi, theta))
}

/// Mean over test points of the log of the posterior-averaged predictive
/// density, using the first `draws` rows of each chain.
fn elpd_from_chains(test: &[Observation], chains: &[&PosteriorSamples], draws: Option<usize>) -> Result<f64> {
    let first = test.first().ok_or(Error::Empty("test set"))?;
    let p = first.x.len();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for samples in chains {
        let (phi_cols, theta_col) = predictive_columns(samples, p)?;
        let n = draws.map_or(samples.n_draws(), |d| d.min(samples.n_draws()));
        for s in 0..n {
            let row = samples.row(s);
            rows.push((phi_cols.iter().map(|&j| row[j]).collect(), row[theta_col]));
        }
    }
    if rows.is_empty() {
        return Err(Error::Empty("posterior draws"));
    }
    let mut log_dens = vec![0.0; rows.len()];
    let mut total = 0.0;
    for obs in test {
        if obs.x.len() != p {
            return Err(Error::InvalidParameter("test covariate lengths differ".into()));
        }
        let ln_off = obs.offset.ln();
        for (ld, (phi, theta)) in log_dens.iter_mut().zip(&rows) {
            let eta = obs.x.iter().zip(phi).map(|(x, b)| x * b).sum::<f64>() + ln_off;
            *ld = nb_ln_pmf_log_mean(obs.y, eta, *theta);
        }
        total += log_mean_exp(&log_dens);
    }
    Ok(total / test.len() as f64)
}

/// Estimated elpd per test observation (nats), averaging the predictive
/// density over every draw.
pub fn elpd_hat(test: &[Observation], samples: &PosteriorSamples) -> Result<f64> {
    elpd_from_chains(test, &[samples], None)
}

/// elpd estimates after every `every` retained draws per chain.
pub fn elpd_trace(test: &[Observation], chains: &[PosteriorSamples], every: usize) -> Result<Vec<f64>> {
    if every == 0 {
        return Err(Error::Config("checkpoint spacing must be positive".into()));
    }
    let refs: Vec<&PosteriorSamples> = chains.iter().collect();
    let n = chains.iter().map(PosteriorSamples::n_draws).min().unwrap_or(0);
    (1..=n / every)
        .map(|c| elpd_from_chains(test, &refs, Some(c * every)))
        .collect()
}

/// Per-site random holdouts, one set per fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub folds: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// `tests[q][i]`: sorted held-out observation indices of site `i` in
    /// fold `q`.
    pub tests: Vec<Vec<Vec<usize>>>,
}

impl FoldPlan {
    pub fn test_set(&self, fold: usize, site: usize) -> &[usize] {
        &self.tests[fold][site]
    }
}

/// Each site's observations are shuffled once; fold `q` holds out the
/// next `round(fraction·m_i)` of them, wrapping around, so folds are
/// disjoint whenever `Q·round(fraction·m_i) <= m_i`.
pub fn make_folds(data: &SpatialDataset, folds: usize, holdout_fraction: f64, seed: u64) -> Result<FoldPlan> {
    if folds == 0 {
        return Err(Error::Fold("at least one fold is required".into()));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Fold(format!(
            "holdout fraction {holdout_fraction} must lie in (0, 1)"
        )));
    }
    let mut tests = vec![Vec::with_capacity(data.sites.len()); folds];
    for site in &data.sites {
        let m = site.observations.len();
        let k = (holdout_fraction * m as f64).round() as usize;
        if k == 0 || k >= m {
            return Err(Error::Fold(format!(
                "site {}: holding out {k} of {m} observations leaves no {}",
                site.id,
                if k == 0 { "test data" } else { "training data" }
            )));
        }
        let mut order: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &site.id, u32::MAX));
        order.shuffle(&mut rng);
        for (q, fold) in tests.iter_mut().enumerate() {
            let mut test: Vec<usize> = (0..k).map(|t| order[(q * k + t) % m]).collect();
            test.sort_unstable();
            fold.push(test);
        }
    }
    Ok(FoldPlan {
        folds,
        holdout_fraction,
        seed,
        tests,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElpdEntry {
    pub bandwidth: f64,
    pub fold: usize,
    pub site_id: String,
    pub elpd: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElpdTable {
    pub entries: Vec<ElpdEntry>,
}

fn distinct_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

impl ElpdTable {
    pub fn bandwidths(&self) -> Vec<f64> {
        distinct_sorted(self.entries.iter().map(|e| e.bandwidth))
    }

    /// Unweighted site mean for each (bandwidth, fold), by increasing
    /// bandwidth then fold.
    pub fn mean_elpd(&self) -> Vec<(f64, usize, f64)> {
        let mut out = Vec::new();
        for eta in self.bandwidths() {
            let mut folds: Vec<usize> = self
                .entries
                .iter()
                .filter(|e| e.bandwidth == eta)
                .map(|e| e.fold)
                .collect();
            folds.sort_unstable();
            folds.dedup();
            for q in folds {
                let cell: Vec<f64> = self
                    .entries
                    .iter()
                    .filter(|e| e.bandwidth == eta && e.fold == q)
                    .map(|e| e.elpd)
                    .collect();
                out.push((eta, q, cell.iter().sum::<f64>() / cell.len() as f64));
            }
        }
        out
    }

    /// Fold-averaged mean elpd per bandwidth.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let means = self.mean_elpd();
        self.bandwidths()
            .into_iter()
            .map(|eta| {
                let of: Vec<f64> = means.iter().filter(|m| m.0 == eta).map(|m| m.2).collect();
                (eta, of.iter().sum::<f64>() / of.len() as f64)
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bandwidth", "fold", "site_id", "elpd"])?;
        for e in &self.entries {
            w.write_record([
                e.bandwidth.to_string(),
                e.fold.to_string(),
                e.site_id.clone(),
                e.elpd.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_means_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bandwidth", "fold", "mean_elpd"])?;
        for (eta, q, m) in self.mean_elpd() {
            w.write_record([eta.to_string(), q.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut entries = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Ingest {
                path: "elpd table".into(),
                line: i + 2,
                message: format!("bad {what}"),
            };
            if rec.len() != 4 {
                return Err(bad("column count"));
            }
            entries.push(ElpdEntry {
                bandwidth: rec[0].parse().map_err(|_| bad("bandwidth"))?,
                fold: rec[1].parse().map_err(|_| bad("fold"))?,
                site_id: rec[2].to_string(),
                elpd: rec[3].parse().map_err(|_| bad("elpd"))?,
            });
        }
        Ok(ElpdTable { entries })
    }
}

/// The bandwidth with the highest fold-averaged mean elpd, ties going to
/// the smaller bandwidth, and the whole curve.
pub fn select_bandwidth(table: &ElpdTable) -> Result<(f64, Vec<(f64, f64)>)> {
    let curve = table.curve();
    let mut best: Option<(f64, f64)> = None;
    for &(eta, value) in &curve {
        match best {
            Some((_, v)) if value <= v => {}
            _ => best = Some((eta, value)),
        }
    }
    let (eta, _) = best.ok_or(Error::Empty("elpd table"))?;
    Ok((eta, curve))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteElpd {
    pub site_id: String,
    pub elpd: f64,
    /// Whether the last two checkpoint estimates agree to the tolerance;
    /// `None` without checkpoints.
    pub converged: Option<bool>,
    pub warnings: Vec<String>,
}

/// Checkpoint spacing (in retained draws per chain) and tolerance of the
/// elpd stability check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Checkpoints {
    pub every: usize,
    pub tol: f64,
}

/// Fits site `site`'s model without its fold-`fold` test set and scores
/// the held-out observations.
pub fn evaluate_site(
    data: &SpatialDataset,
    site: usize,
    kernel: &KernelSpec,
    fold: usize,
    plan: &FoldPlan,
    settings: &FitSettings,
    checkpoints: Option<Checkpoints>,
) -> Result<SiteElpd> {
    let test_idx = plan
        .tests
        .get(fold)
        .and_then(|f| f.get(site))
        .ok_or_else(|| Error::Fold(format!("plan has no fold {fold} for site {site}")))?;
    let model = fit_model(data, site, test_idx, kernel, settings)?;
    let obs = &data.sites[site].observations;
    let test: Vec<Observation> = test_idx.iter().map(|&j| obs[j].clone()).collect();
    let context = |e: Error| e.at_site(data.sites[site].id.clone());
    let pooled = pool_chains(&model.chains).map_err(context)?;
    let elpd = elpd_hat(&test, &pooled).map_err(context)?;
    let mut warnings = model.warnings;
    let converged = match checkpoints {
        Some(c) => {
            let trace = elpd_trace(&test, &model.chains, c.every).map_err(context)?;
            let ok = elpd_trace_converged(&trace, c.tol).map_err(context)?;
            if !ok {
                warnings.push(format!("elpd trace not stable to {} at fold {fold}", c.tol));
            }
            Some(ok)
        }
        None => None,
    };
    Ok(SiteElpd {
        site_id: model.site_id,
        elpd,
        converged,
        warnings,
    })
}

/// Runs every site for one bandwidth and fold across `workers` threads.
/// Errors from all failing sites are reported together.
pub fn evaluate_bandwidth(
    data: &SpatialDataset,
    kernel: &KernelSpec,
    fold: usize,
    plan: &FoldPlan,
    settings: &FitSettings,
    checkpoints: Option<Checkpoints>,
    workers: usize,
) -> Result<Vec<SiteElpd>> {
    let results = parallel_map(workers, data.sites.len(), |i| {
        evaluate_site(data, i, kernel, fold, plan, settings, checkpoints)
    })?;
    collect_all(results)
}

pub(crate) fn collect_all<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failed.push(e),
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        Err(Error::SiteFailures(failed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::Coordinate;
    use crate::posterior::Site;
    use proptest::prelude::*;

    fn samples(rows: &[[f64; 2]]) -> PosteriorSamples {
        PosteriorSamples {
            names: vec![phi_name(0), THETA_CENTRE.into()],
            draws: rows.iter().flatten().copied().collect(),
            acceptance_rate: 0.3,
            chain_id: 0,
            seed: 0,
        }
    }

    fn unit_obs(y: u64) -> Observation {
        Observation::new(y, vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn single_draw_is_mean_log_pmf() {
        let s = samples(&[[0.3, 0.7]]);
        let test = [unit_obs(0), unit_obs(4)];
        let expected = (nb_ln_pmf_log_mean(0, 0.3, 0.7) + nb_ln_pmf_log_mean(4, 0.3, 0.7)) / 2.0;
        assert!((elpd_hat(&test, &s).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn two_draw_average() {
        // μ=1, θ=1 gives P(0)=0.5; μ=3, θ=1 gives P(0)=0.25
        let s = samples(&[[0.0, 1.0], [3f64.ln(), 1.0]]);
        let v = elpd_hat(&[unit_obs(0)], &s).unwrap();
        assert!((v - 0.375f64.ln()).abs() < 1e-14);
        assert!((v + 0.980_829_25).abs() < 1e-8);
    }

    #[test]
    fn empty_inputs() {
        let s = samples(&[[0.0, 1.0]]);
        assert!(elpd_hat(&[], &s).is_err());
        let none = samples(&[]);
        assert!(elpd_hat(&[unit_obs(1)], &none).is_err());
    }

    #[test]
    fn log_mean_exp_extremes() {
        let v = log_mean_exp(&[-800.0, -800.0]);
        assert!((v + 800.0).abs() < 1e-12);
        let mixed = [0.0, (1e-300f64).ln()];
        assert!((log_mean_exp(&mixed) - ((1.0 + 1e-300) / 2.0f64).ln()).abs() < 1e-15);
        assert_eq!(log_mean_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    fn lattice(n: usize, m: usize) -> SpatialDataset {
        let sites = (0..n)
            .map(|i| Site {
                id: format!("s{i}"),
                coord: Coordinate::planar(i as f64, 0.0),
                observations: (0..m).map(|j| unit_obs(j as u64)).collect(),
            })
            .collect();
        SpatialDataset::new(sites, 1).unwrap()
    }

    #[test]
    fn fold_sizes_and_disjointness() {
        let data = lattice(2, 100);
        let plan = make_folds(&data, 2, 0.5, 1).unwrap();
        assert!(plan.tests.iter().flatten().all(|t| t.len() == 50));

        let data = lattice(3, 10);
        let plan = make_folds(&data, 2, 0.5, 1).unwrap();
        for i in 0..3 {
            let (a, b) = (plan.test_set(0, i), plan.test_set(1, i));
            assert_eq!(a.len(), 5);
            assert!(a.iter().all(|x| !b.contains(x)));
        }
        assert_eq!(plan, make_folds(&data, 2, 0.5, 1).unwrap());
        assert_ne!(plan, make_folds(&data, 2, 0.5, 2).unwrap());
    }

    #[test]
    fn folds_reject_empty_training() {
        let data = lattice(2, 1);
        let err = make_folds(&data, 2, 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("s0"), "{err}");
        assert!(make_folds(&lattice(2, 4), 2, 0.0, 0).is_err());
    }

    fn table(rows: &[(f64, usize, &str, f64)]) -> ElpdTable {
        ElpdTable {
            entries: rows
                .iter()
                .map(|&(bandwidth, fold, s, elpd)| ElpdEntry {
                    bandwidth,
                    fold,
                    site_id: s.into(),
                    elpd,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_rules() {
        let t = table(&[(4.0, 0, "a", -3.0)]);
        assert_eq!(select_bandwidth(&t).unwrap().0, 4.0);
        assert!(select_bandwidth(&ElpdTable::default()).is_err());

        let t = table(&[
            (1.0, 0, "a", -3.0),
            (1.0, 0, "b", -2.0),
            (4.0, 0, "a", -2.5),
            (4.0, 0, "b", -2.5),
            (9.0, 0, "a", -4.0),
            (9.0, 0, "b", -1.0),
        ]);
        // every bandwidth averages -2.5: ties go to the smallest
        let (eta, curve) = select_bandwidth(&t).unwrap();
        assert_eq!(eta, 1.0);
        assert_eq!(curve, vec![(1.0, -2.5), (4.0, -2.5), (9.0, -2.5)]);
    }

    #[test]
    fn means_are_site_averages() {
        let t = table(&[
            (2.0, 0, "a", -1.0),
            (2.0, 0, "b", -2.0),
            (2.0, 1, "a", -4.0),
            (2.0, 1, "b", -5.0),
        ]);
        assert_eq!(t.mean_elpd(), vec![(2.0, 0, -1.5), (2.0, 1, -4.5)]);
        assert_eq!(t.curve(), vec![(2.0, -3.0)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(ElpdTable::read_csv(&buf[..]).unwrap(), t);
    }

    #[test]
    fn enumeration_toy() {
        // three grid points treated as draws; test points y = 0, 1, 5
        let grid = [[0.2, 0.5], [-0.4, 1.3], [1.1, 0.2]];
        let s = samples(&grid);
        let test = [unit_obs(0), unit_obs(1), unit_obs(5)];
        let mut expected = 0.0;
        for o in &test {
            let avg: f64 = grid
                .iter()
                .map(|[phi, theta]| {
                    use statrs::function::gamma::ln_gamma as lg;
                    let mu = phi.exp();
                    let r = 1.0 / theta;
                    let y = o.y as f64;
                    (lg(y + r) - lg(r) - lg(y + 1.0) - r * (1.0 + theta * mu).ln()
                        + y * (theta * mu / (1.0 + theta * mu)).ln())
                    .exp()
                })
                .sum::<f64>()
                / 3.0;
            expected += avg.ln() / 3.0;
        }
        assert!((elpd_hat(&test, &s).unwrap() - expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariant_to_permutation_and_duplication(
            rows in proptest::collection::vec((-1.0f64..2.0, 0.05f64..3.0), 2..20),
            ys in proptest::collection::vec(0u64..30, 1..8),
        ) {
            let grid: Vec<[f64; 2]> = rows.iter().map(|&(a, b)| [a, b]).collect();
            let test: Vec<_> = ys.iter().map(|&y| unit_obs(y)).collect();
            let base = elpd_hat(&test, &samples(&grid)).unwrap();

            let mut rev = grid.clone();
            rev.reverse();
            let mut test_rev = test.clone();
            test_rev.reverse();
            let permuted = elpd_hat(&test_rev, &samples(&rev)).unwrap();
            prop_assert!((base - permuted).abs() < 1e-12);

            let doubled: Vec<_> = grid.iter().chain(grid.iter()).copied().collect();
            let dup = elpd_hat(&test, &samples(&doubled)).unwrap();
            prop_assert!((base - dup).abs() < 1e-12);

            // naive average of densities, fine when nothing underflows
            let naive: f64 = test.iter().map(|o| {
                (grid.iter().map(|[p, t]| nb_ln_pmf_log_mean(o.y, *p, *t).exp()).sum::<f64>() / grid.len() as f64).ln()
            }).sum::<f64>() / test.len() as f64;
            prop_assert!((base - naive).abs() < 1e-10);
        }
    }
}
