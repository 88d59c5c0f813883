//! Browser bindings for a small lattice demo.
//!
//! Every binding wraps a plain function of this crate so the same code
//! runs (and is tested) natively.

use bgwr::elpd::select_bandwidth;
use bgwr::geo::{active_locations, Coordinate, KernelSpec};
use bgwr::mcmc::SamplerConfig;
use bgwr::pipeline::{cross_validate, fit_all, RunConfig};
use bgwr::posterior::{phi_name, SpatialDataset};
use bgwr::simgen::{generate, true_coefficients, LatticeSpec, TruthField};
use bgwr::{Error, Result};
use wasm_bindgen::prelude::*;

/// Row-major kernel weights over a `width × height` lattice (1-based
/// coordinates) for a centre at `(cu, cv)`; truncated sites get 0.
pub fn kernel_grid(width: u32, height: u32, cu: f64, cv: f64, bandwidth: f64, threshold: f64) -> Result<Vec<f64>> {
    let spec = KernelSpec::new(bandwidth, threshold)?;
    let sites: Vec<Coordinate> = (1..=height)
        .flat_map(|v| (1..=width).map(move |u| Coordinate::planar(f64::from(u), f64::from(v))))
        .collect();
    let mut grid = vec![0.0; sites.len()];
    for a in active_locations(&Coordinate::planar(cu, cv), &sites, &spec, 1.0)? {
        grid[a.index] = a.weight;
    }
    Ok(grid)
}

/// Row-major true values of coefficient `j` over the lattice.
pub fn coefficient_grid(width: u32, height: u32, j: usize) -> Result<Vec<f64>> {
    if j > 2 {
        return Err(Error::InvalidParameter(format!("coefficient {j} out of range 0..3")));
    }
    Ok((1..=height)
        .flat_map(|v| (1..=width).map(move |u| true_coefficients(u, v)[j]))
        .collect())
}

/// A simulated lattice with a short-chain sampler configuration.
pub struct Lattice {
    data: SpatialDataset,
    truth: TruthField,
    config: RunConfig,
}

impl Lattice {
    pub fn simulate(width: u32, height: u32, m: usize, seed: u64, iterations: usize) -> Result<Self> {
        let (data, truth) = generate(&LatticeSpec {
            width,
            height,
            m,
            seed,
            ..LatticeSpec::default()
        })?;
        let mut config = RunConfig {
            sampler: SamplerConfig {
                iterations,
                burn_in: iterations / 4,
                chains: 1,
                seed,
                ..SamplerConfig::default()
            },
            ..RunConfig::default()
        };
        config.cv.seed = seed;
        config.validate()?;
        Ok(Lattice { data, truth, config })
    }

    pub fn n_sites(&self) -> usize {
        self.data.sites.len()
    }

    /// Posterior means of coefficient `j` per site, in lattice order.
    pub fn fit_means(&self, bandwidth: f64, j: usize) -> Result<Vec<f64>> {
        let fit = fit_all(&self.data, &self.config, bandwidth)?;
        let name = phi_name(j);
        fit.sites
            .iter()
            .map(|s| {
                s.mean_of(&name)
                    .ok_or_else(|| Error::InvalidParameter(format!("no coefficient {j}")))
            })
            .collect()
    }

    /// True values of coefficient `j` used to simulate this lattice.
    pub fn truth(&self, j: usize) -> Vec<f64> {
        self.truth.coefficient(j)
    }

    /// Mean cross-validated elpd per candidate, in candidate order.
    pub fn elpd_curve(&self, candidates: &[f64]) -> Result<Vec<f64>> {
        let mut config = self.config.clone();
        config.kernel.candidates = candidates.to_vec();
        let table = cross_validate(&self.data, &config)?;
        let (_, curve) = select_bandwidth(&table)?;
        candidates
            .iter()
            .map(|c| {
                curve
                    .iter()
                    .find(|(eta, _)| eta == c)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::InvalidParameter(format!("no elpd for bandwidth {c}")))
            })
            .collect()
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = kernelGrid)]
pub fn kernel_grid_js(
    width: u32,
    height: u32,
    cu: f64,
    cv: f64,
    bandwidth: f64,
    threshold: f64,
) -> std::result::Result<Vec<f64>, JsError> {
    kernel_grid(width, height, cu, cv, bandwidth, threshold).map_err(js)
}

#[wasm_bindgen(js_name = coefficientGrid)]
pub fn coefficient_grid_js(width: u32, height: u32, j: usize) -> std::result::Result<Vec<f64>, JsError> {
    coefficient_grid(width, height, j).map_err(js)
}

#[wasm_bindgen(js_name = Lattice)]
pub struct LatticeJs(Lattice);

#[wasm_bindgen(js_class = Lattice)]
impl LatticeJs {
    #[wasm_bindgen(constructor)]
    pub fn new(
        width: u32,
        height: u32,
        m: usize,
        seed: u64,
        iterations: usize,
    ) -> std::result::Result<LatticeJs, JsError> {
        Lattice::simulate(width, height, m, seed, iterations)
            .map(LatticeJs)
            .map_err(js)
    }

    #[wasm_bindgen(js_name = nSites)]
    pub fn n_sites(&self) -> usize {
        self.0.n_sites()
    }

    #[wasm_bindgen(js_name = fitMeans)]
    pub fn fit_means(&self, bandwidth: f64, j: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.0.fit_means(bandwidth, j).map_err(js)
    }

    pub fn truth(&self, j: usize) -> Vec<f64> {
        self.0.truth(j)
    }

    #[wasm_bindgen(js_name = elpdCurve)]
    pub fn elpd_curve(&self, candidates: Vec<f64>) -> std::result::Result<Vec<f64>, JsError> {
        self.0.elpd_curve(&candidates).map_err(js)
    }
}
