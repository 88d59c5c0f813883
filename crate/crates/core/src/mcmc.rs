//! Blocked adaptive random-walk Metropolis–Hastings.
//!
//! Each iteration sweeps the parameter blocks in order, proposing a
//! Gaussian random-walk move for one block at a time. Positive parameters
//! are moved on the log scale. During burn-in every block's step size
//! follows a Robbins–Monro recursion toward the target acceptance rate and
//! multi-dimensional blocks re-estimate their proposal covariance; both are
//! frozen once burn-in ends, so retained draws come from a fixed kernel.

use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Total iterations per chain, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
    pub initial_step: f64,
    pub target_accept: f64,
    pub adapt_window: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 4000,
            burn_in: 1000,
            chains: 10,
            seed: 0,
            initial_step: 0.1,
            target_accept: 0.234,
            adapt_window: 50,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in {} must be smaller than iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be positive".into()));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::Config(format!(
                "initial_step {} must be finite and > 0",
                self.initial_step
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target_accept {} must lie in (0, 1)",
                self.target_accept
            )));
        }
        if self.adapt_window == 0 {
            return Err(Error::Config("adapt_window must be positive".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.iterations - self.burn_in
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// The sampler works with `ln x`; draws are reported as `x`.
    Log,
}

/// Names, scale transforms and update blocks of a parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    names: Vec<String>,
    transforms: Vec<Transform>,
    blocks: Vec<Range<usize>>,
}

impl ParamLayout {
    pub fn new(names: Vec<String>, transforms: Vec<Transform>, blocks: Vec<Range<usize>>) -> Result<Self> {
        if names.len() != transforms.len() {
            return Err(Error::LayoutMismatch("names and transforms differ in length".into()));
        }
        let mut next = 0;
        for b in &blocks {
            if b.start != next || b.end <= b.start {
                return Err(Error::LayoutMismatch(
                    "blocks must be contiguous, non-empty and in order".into(),
                ));
            }
            next = b.end;
        }
        if next != names.len() {
            return Err(Error::LayoutMismatch("blocks do not cover every parameter".into()));
        }
        Ok(ParamLayout {
            names,
            transforms,
            blocks,
        })
    }

    /// One block per coordinate.
    pub fn scalar_blocks(names: Vec<String>, transforms: Vec<Transform>) -> Result<Self> {
        let blocks = (0..names.len()).map(|i| i..i + 1).collect();
        Self::new(names, transforms, blocks)
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn to_unconstrained(&self, natural: &[f64]) -> Vec<f64> {
        natural
            .iter()
            .zip(&self.transforms)
            .map(|(&x, t)| match t {
                Transform::Identity => x,
                Transform::Log => x.ln(),
            })
            .collect()
    }

    pub fn to_natural_into(&self, z: &[f64], out: &mut Vec<f64>) {
        out.extend(z.iter().zip(&self.transforms).map(|(&x, t)| match t {
            Transform::Identity => x,
            Transform::Log => x.exp(),
        }));
    }
}

/// A log-density over the sampler's unconstrained coordinates, evaluated
/// one block change at a time so implementations can cache partial sums.
///
/// The value must include the Jacobian of any [`Transform::Log`]
/// coordinates. Implementations hold mutable caches and are owned by a
/// single chain.
pub trait BlockTarget {
    fn layout(&self) -> &ParamLayout;

    /// Evaluates at `z` from scratch and makes `z` the current state.
    fn reset(&mut self, z: &[f64]) -> f64;

    /// Evaluates at `proposal`, which equals the current state outside
    /// `block`. The state does not change until [`BlockTarget::accept`].
    fn propose(&mut self, block: usize, proposal: &[f64]) -> f64;

    /// Makes the most recent proposal for `block` current.
    fn accept(&mut self, block: usize);
}

/// Wraps a closure giving the log-density in natural coordinates.
pub struct FnTarget<F> {
    layout: ParamLayout,
    f: F,
    natural: Vec<f64>,
}

impl<F: FnMut(&[f64]) -> f64> FnTarget<F> {
    pub fn new(layout: ParamLayout, f: F) -> Self {
        FnTarget {
            layout,
            f,
            natural: Vec::new(),
        }
    }

    fn eval(&mut self, z: &[f64]) -> f64 {
        self.natural.clear();
        self.layout.to_natural_into(z, &mut self.natural);
        let jacobian: f64 = z
            .iter()
            .zip(self.layout.transforms())
            .filter(|(_, t)| **t == Transform::Log)
            .map(|(x, _)| x)
            .sum();
        (self.f)(&self.natural) + jacobian
    }
}

impl<F: FnMut(&[f64]) -> f64> BlockTarget for FnTarget<F> {
    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn reset(&mut self, z: &[f64]) -> f64 {
        self.eval(z)
    }

    fn propose(&mut self, _block: usize, proposal: &[f64]) -> f64 {
        self.eval(proposal)
    }

    fn accept(&mut self, _block: usize) {}
}

/// Retained draws of one or more pooled chains, in natural coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    /// Row-major, one row per retained iteration.
    pub draws: Vec<f64>,
    pub acceptance_rate: f64,
    pub chain_id: u32,
    pub seed: u64,
}

impl PosteriorSamples {
    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        if self.names.is_empty() {
            0
        } else {
            self.draws.len() / self.names.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.n_params();
        &self.draws[i * k..(i + 1) * k]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|i| self.row(i)[j]).collect()
    }

    pub fn column_mean(&self, j: usize) -> f64 {
        let n = self.n_draws();
        (0..n).map(|i| self.row(i)[j]).sum::<f64>() / n as f64
    }

    /// Keeps the named columns, in the given order.
    pub fn select(&self, keep: &[usize]) -> PosteriorSamples {
        let mut draws = Vec::with_capacity(self.n_draws() * keep.len());
        for i in 0..self.n_draws() {
            let row = self.row(i);
            draws.extend(keep.iter().map(|&j| row[j]));
        }
        PosteriorSamples {
            names: keep.iter().map(|&j| self.names[j].clone()).collect(),
            draws,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> PosteriorSamples {
        PosteriorSamples {
            names: Vec::new(),
            draws: Vec::new(),
            acceptance_rate: self.acceptance_rate,
            chain_id: self.chain_id,
            seed: self.seed,
        }
    }

    /// CSV with `iteration` plus one column per parameter.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_draws() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Step sizes of every block at an iteration boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLogEntry {
    pub iteration: usize,
    pub steps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub samples: PosteriorSamples,
    /// Recorded at the end of every adaptation window, before and after
    /// burn-in alike.
    pub step_log: Vec<StepLogEntry>,
    /// Post-burn-in acceptance rate of each block.
    pub block_acceptance: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Initial random-walk shape for one block: a lower Cholesky factor of the
/// proposal covariance and the step multiplying it.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockProposal {
    pub chol: Vec<f64>,
    pub step: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ChainOptions {
    pub chain_id: u32,
    /// Overrides `SamplerConfig::seed`.
    pub seed: Option<u64>,
    /// Per-block initial proposals; `None` entries use the identity shape
    /// with `SamplerConfig::initial_step`.
    pub proposals: Vec<Option<BlockProposal>>,
}

pub fn run_chain<T: BlockTarget>(target: &mut T, config: &SamplerConfig, init: &[f64]) -> Result<Chain> {
    run_chain_with(target, config, init, &ChainOptions::default())
}

/// Runs one chain from `init`, given in natural coordinates.
pub fn run_chain_with<T: BlockTarget>(
    target: &mut T,
    config: &SamplerConfig,
    init: &[f64],
    options: &ChainOptions,
) -> Result<Chain> {
    config.validate()?;
    let layout = target.layout().clone();
    if init.len() != layout.dim() {
        return Err(Error::LayoutMismatch(format!(
            "initial point has {} entries, layout has {}",
            init.len(),
            layout.dim()
        )));
    }
    let seed = options.seed.unwrap_or(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut z = layout.to_unconstrained(init);
    let mut lp = target.reset(&z);
    if !lp.is_finite() {
        return Err(Error::InvalidInitialization);
    }

    let blocks = layout.blocks().to_vec();
    let mut states: Vec<BlockState> = blocks
        .iter()
        .enumerate()
        .map(|(b, range)| {
            let given = options.proposals.get(b).and_then(Option::as_ref);
            BlockState::new(range.len(), given, config.initial_step)
        })
        .collect();

    let retained = config.retained();
    let mut draws = Vec::with_capacity(retained * layout.dim());
    let mut step_log = Vec::new();
    let mut warnings = Vec::new();
    let mut proposal = z.clone();
    let mut noise = Vec::new();
    let mut delta = Vec::new();
    let mut window_accepts = 0usize;
    let mut kept_accepts = vec![0usize; blocks.len()];
    // burn-in history of multi-dimensional blocks, for covariance updates
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); blocks.len()];

    for t in 0..config.iterations {
        let adapting = t < config.burn_in;
        let gain = ((t + 1) as f64).powf(-0.6);
        for (b, range) in blocks.iter().enumerate() {
            let state = &mut states[b];
            let k = range.len();
            noise.clear();
            noise.extend((0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
            delta.resize(k, 0.0);
            match &state.chol {
                Some(l) => linalg::lower_mul(l, k, &noise, &mut delta),
                None => delta.copy_from_slice(&noise),
            }
            let step = state.log_step.exp();
            for (i, d) in range.clone().zip(&delta) {
                proposal[i] = z[i] + step * d;
            }
            let lp_new = target.propose(b, &proposal);
            let log_alpha = if lp_new.is_nan() {
                f64::NEG_INFINITY
            } else {
                lp_new - lp
            };
            let u: f64 = rng.random();
            let accepted = u.ln() < log_alpha;
            if accepted {
                z[range.clone()].copy_from_slice(&proposal[range.clone()]);
                lp = lp_new;
                target.accept(b);
                window_accepts += 1;
                if !adapting {
                    kept_accepts[b] += 1;
                }
            } else {
                proposal[range.clone()].copy_from_slice(&z[range.clone()]);
            }
            if adapting {
                let alpha = log_alpha.min(0.0).exp();
                state.log_step += gain * (alpha - config.target_accept);
                if k > 1 {
                    history[b].extend_from_slice(&z[range.clone()]);
                }
            }
        }

        if (t + 1) % config.adapt_window == 0 {
            if adapting {
                if window_accepts == 0 {
                    let msg = format!(
                        "iteration {}: every proposal rejected in the last {} iterations",
                        t + 1,
                        config.adapt_window
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                for (b, range) in blocks.iter().enumerate() {
                    if range.len() > 1 {
                        states[b].refresh_shape(&history[b], range.len());
                    }
                }
            }
            window_accepts = 0;
            step_log.push(StepLogEntry {
                iteration: t + 1,
                steps: states.iter().map(|s| s.log_step.exp()).collect(),
            });
        }

        if !adapting {
            layout.to_natural_into(&z, &mut draws);
        }
    }

    let total_kept: usize = kept_accepts.iter().sum();
    let block_acceptance = kept_accepts.iter().map(|&a| a as f64 / retained as f64).collect();
    Ok(Chain {
        samples: PosteriorSamples {
            names: layout.names().to_vec(),
            draws,
            acceptance_rate: total_kept as f64 / (retained * blocks.len()) as f64,
            chain_id: options.chain_id,
            seed,
        },
        step_log,
        block_acceptance,
        warnings,
    })
}

struct BlockState {
    log_step: f64,
    chol: Option<Vec<f64>>,
}

impl BlockState {
    fn new(k: usize, given: Option<&BlockProposal>, initial_step: f64) -> Self {
        match given {
            Some(p) if p.chol.len() == k * k => BlockState {
                log_step: p.step.ln(),
                chol: Some(p.chol.clone()),
            },
            _ => BlockState {
                log_step: initial_step.ln(),
                chol: None,
            },
        }
    }

    /// Re-estimates the proposal covariance from the later half of the
    /// burn-in history. Replacing the identity shape also resets the step
    /// to `2.38/√k`.
    fn refresh_shape(&mut self, history: &[f64], k: usize) {
        let n_all = history.len() / k;
        let n = n_all / 2;
        if n < 10 * k {
            return;
        }
        let rows = &history[(n_all - n) * k..];
        let mut mean = vec![0.0; k];
        for row in rows.chunks_exact(k) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; k * k];
        for row in rows.chunks_exact(k) {
            for i in 0..k {
                for j in 0..=i {
                    cov[i * k + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        let max_diag = (0..k).map(|i| cov[i * k + i]).fold(0.0, f64::max) / (n - 1) as f64;
        for i in 0..k {
            for j in 0..=i {
                let v = cov[i * k + j] / (n - 1) as f64;
                cov[i * k + j] = v;
                cov[j * k + i] = v;
            }
            cov[i * k + i] += 1e-10 * max_diag.max(1e-300);
        }
        if let Some(l) = linalg::cholesky(&cov, k) {
            if self.chol.is_none() {
                self.log_step = (2.38 / (k as f64).sqrt()).ln();
            }
            self.chol = Some(l);
        }
    }
}

/// Concatenates chains that share a parameter layout.
pub fn pool_chains(chains: &[PosteriorSamples]) -> Result<PosteriorSamples> {
    let first = chains.first().ok_or(Error::Empty("chain list"))?;
    if let Some(bad) = chains.iter().find(|c| c.names != first.names) {
        return Err(Error::LayoutMismatch(format!(
            "chain {} has a different parameter layout from chain {}",
            bad.chain_id, first.chain_id
        )));
    }
    let total: usize = chains.iter().map(PosteriorSamples::n_draws).sum();
    let weighted: f64 = chains.iter().map(|c| c.acceptance_rate * c.n_draws() as f64).sum();
    Ok(PosteriorSamples {
        names: first.names.clone(),
        draws: chains.iter().flat_map(|c| c.draws.iter().copied()).collect(),
        acceptance_rate: if total == 0 { 0.0 } else { weighted / total as f64 },
        chain_id: first.chain_id,
        seed: first.seed,
    })
}

/// True when the last two checkpoint estimates differ by strictly less
/// than `tol`.
pub fn elpd_trace_converged(trace: &[f64], tol: f64) -> Result<bool> {
    match trace {
        [.., prev, last] => Ok((last - prev).abs() < tol),
        _ => Err(Error::InvalidParameter(
            "convergence check needs at least 2 checkpoints".into(),
        )),
    }
}

/// Mixes a master seed, a key and a chain index into a chain seed, so every
/// chain's stream is fixed by what it computes rather than when it runs.
pub fn derive_seed(master: u64, key: &str, chain: u32) -> u64 {
    // FNV-1a over the key, then splitmix64 finalization
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut x = master ^ h.rotate_left(17) ^ (u64::from(chain) << 32 | u64::from(chain));
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
