//! Rejection sampling of latent vectors.
//!
//! The target is a Parzen (Gaussian kernel) density over the encoded seeds of
//! one bundle; the proposal is a diagonal Gaussian fitted to the same seeds.
//! All densities are handled in the log domain: in 32 dimensions the raw
//! values under- and overflow long before anything interesting happens.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AEModel, LatentVector};
use crate::error::{GestaError, Result};
use crate::geometry::Tractogram;
use crate::rng::{self, StreamRng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Lower bound on proposal variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// How `bandwidth_factor` turns into a kernel standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// The factor is the kernel standard deviation in latent units.
    Absolute,
    /// The factor scales Silverman's rule of thumb for the seeds.
    Silverman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Accepted latents drawn per bundle.
    pub n_samples: usize,
    pub bandwidth_factor: f64,
    pub bandwidth_mode: BandwidthMode,
    pub proposal_inflation: f64,
    /// Multiplies the largest observed p/q ratio.
    pub safety_margin: f64,
    /// Proposal draws used, with the seeds, to locate the largest p/q ratio.
    pub probe_draws: usize,
    /// Proposals tried for one candidate before giving up.
    pub max_attempts: u64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_samples: 2000,
            bandwidth_factor: 1.0,
            bandwidth_mode: BandwidthMode::Absolute,
            proposal_inflation: 1.5,
            safety_margin: 1.2,
            probe_draws: 10_000,
            max_attempts: 10_000,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_samples == 0 {
            problems.push("n_samples must be positive".to_string());
        }
        for (name, v) in [
            ("bandwidth_factor", self.bandwidth_factor),
            ("proposal_inflation", self.proposal_inflation),
            ("safety_margin", self.safety_margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.max_attempts == 0 {
            problems.push("max_attempts must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GestaError::Spec(problems))
        }
    }
}

/// A log-density over `dim`-dimensional points.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn ln_density(&self, z: &[f64]) -> f64;

    /// Cheap lower and upper bounds on `ln_density(z)`, letting the sampler
    /// skip the exact value when it cannot change the decision.
    fn ln_density_bounds(&self, z: &[f64]) -> (f64, f64) {
        let v = self.ln_density(z);
        (v, v)
    }
}

/// A log-density that can also be sampled from.
pub trait Proposal: LogDensity {
    fn draw(&self, rng: &mut StreamRng) -> Vec<f64>;
}

/// Equal-weight mixture of isotropic Gaussians centered on the seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenDensity {
    centers: Vec<f64>,
    dim: usize,
    bandwidth: f64,
    ln_norm: f64,
    centroid: Vec<f64>,
    /// Mean squared distance of the seeds from the centroid.
    spread: f64,
    /// Largest distance of a seed from the centroid.
    radius: f64,
}

impl ParzenDensity {
    pub fn new(latents: &[Vec<f64>], bandwidth: f64) -> Result<Self> {
        let dim = check_latents(latents)?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(GestaError::InvalidInput(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        let m = latents.len() as f64;
        let centroid: Vec<f64> = (0..dim)
            .map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / m)
            .collect();
        let sq: Vec<f64> = latents.iter().map(|z| squared_distance(z, &centroid)).collect();
        Ok(ParzenDensity {
            centers: latents.concat(),
            dim,
            bandwidth,
            ln_norm: -m.ln() - 0.5 * dim as f64 * (LN_2PI + 2.0 * bandwidth.ln()),
            spread: sq.iter().sum::<f64>() / m,
            radius: sq.iter().cloned().fold(0.0, f64::max).sqrt(),
            centroid,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn n_seeds(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn seeds(&self) -> impl Iterator<Item = &[f64]> {
        self.centers.chunks_exact(self.dim)
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        self.ln_density(z).exp()
    }

    /// Direct mixture draw: a uniformly chosen seed plus kernel noise.
    pub fn draw_direct(&self, rng: &mut StreamRng) -> Vec<f64> {
        let i = rng.random_range(0..self.n_seeds());
        self.centers[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&c| {
                let e: f64 = StandardNormal.sample(rng);
                c + self.bandwidth * e
            })
            .collect()
    }
}

impl LogDensity for ParzenDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ln_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        let inv = -0.5 / (self.bandwidth * self.bandwidth);
        let mut max = f64::NEG_INFINITY;
        let mut exps = Vec::with_capacity(self.n_seeds());
        for c in self.centers.chunks_exact(self.dim) {
            let d2: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = d2 * inv;
            max = max.max(e);
            exps.push(e);
        }
        let sum: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        self.ln_norm + max + sum.ln()
    }

    /// The mean kernel value is at least the kernel at the mean squared
    /// distance (Jensen) and at most the kernel at the nearest possible seed.
    fn ln_density_bounds(&self, z: &[f64]) -> (f64, f64) {
        let inv = -0.5 / (self.bandwidth * self.bandwidth);
        let ln_peak = self.ln_norm + (self.n_seeds() as f64).ln();
        let d2 = squared_distance(z, &self.centroid);
        let nearest = (d2.sqrt() - self.radius).max(0.0);
        let lower = ln_peak + (d2 + self.spread) * inv;
        let upper = ln_peak + nearest * nearest * inv;
        // rounding slack
        let slack = 1e-9 * (1.0 + lower.abs());
        (lower - slack, upper + slack)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProposal {
    mean: Vec<f64>,
    variance: Vec<f64>,
    ln_norm: f64,
}

impl GaussianProposal {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(GestaError::InvalidInput(
                "proposal mean and variance must be non-empty and of equal length".into(),
            ));
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(GestaError::InvalidInput(format!(
                "proposal variances must be positive and finite, got {v}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(GestaError::InvalidInput("proposal mean must be finite".into()));
        }
        let ln_norm = -0.5 * variance.iter().map(|v| LN_2PI + v.ln()).sum::<f64>();
        Ok(GaussianProposal {
            mean,
            variance,
            ln_norm,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }
}

impl LogDensity for GaussianProposal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn ln_density(&self, z: &[f64]) -> f64 {
        let q: f64 = z
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| (x - m) * (x - m) / v)
            .sum();
        self.ln_norm - 0.5 * q
    }
}

impl Proposal for GaussianProposal {
    fn draw(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            })
            .collect()
    }
}

fn check_latents(latents: &[Vec<f64>]) -> Result<usize> {
    if latents.len() < 2 {
        return Err(GestaError::InsufficientSeeds {
            found: latents.len(),
            required: 2,
        });
    }
    let dim = latents[0].len();
    if dim == 0 || latents.iter().any(|z| z.len() != dim) {
        return Err(GestaError::InvalidInput(
            "seed latents must share a non-zero dimension".into(),
        ));
    }
    if latents.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GestaError::InvalidInput("seed latents must be finite".into()));
    }
    Ok(dim)
}

fn mean_and_variance(latents: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = latents.len() as f64;
    let dim = latents[0].len();
    let mut mean = vec![0.0; dim];
    for z in latents {
        for (a, b) in mean.iter_mut().zip(z) {
            *a += b / m;
        }
    }
    let mut var = vec![0.0; dim];
    for z in latents {
        for ((v, x), mu) in var.iter_mut().zip(z).zip(&mean) {
            *v += (x - mu) * (x - mu) / (m - 1.0);
        }
    }
    (mean, var)
}

/// Kernel standard deviation for the seeds under `mode`.
pub fn bandwidth(latents: &[Vec<f64>], factor: f64, mode: BandwidthMode) -> Result<f64> {
    let dim = check_latents(latents)?;
    match mode {
        BandwidthMode::Absolute => Ok(factor),
        BandwidthMode::Silverman => {
            let (_, var) = mean_and_variance(latents);
            let sigma = var.iter().map(|v| v.sqrt()).sum::<f64>() / dim as f64;
            let d = dim as f64;
            let m = latents.len() as f64;
            let h = factor * sigma * (4.0 / ((d + 2.0) * m)).powf(1.0 / (d + 4.0));
            if h > 0.0 {
                Ok(h)
            } else {
                Err(GestaError::InvalidInput(
                    "Silverman bandwidth is zero: all seed latents coincide".into(),
                ))
            }
        }
    }
}

pub fn fit_parzen(latents: &[Vec<f64>], factor: f64, mode: BandwidthMode) -> Result<ParzenDensity> {
    ParzenDensity::new(latents, bandwidth(latents, factor, mode)?)
}

/// Seed mean, and per-dimension `inflation * (sample variance + h^2)` floored
/// at [`VARIANCE_FLOOR`].
pub fn fit_proposal(latents: &[Vec<f64>], bandwidth: f64, inflation: f64) -> Result<GaussianProposal> {
    check_latents(latents)?;
    let (mean, var) = mean_and_variance(latents);
    let variance = var
        .iter()
        .map(|v| (inflation * (v + bandwidth * bandwidth)).max(VARIANCE_FLOOR))
        .collect();
    GaussianProposal::new(mean, variance)
}

/// Envelope constant in the log domain: `ln(margin * max p/q)` over the seeds
/// and `probe_draws` proposal samples.
pub fn estimate_ln_k(
    p: &ParzenDensity,
    q: &impl Proposal,
    probe_draws: usize,
    safety_margin: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut points: Vec<Vec<f64>> = p.seeds().map(|s| s.to_vec()).collect();
    points.extend((0..probe_draws).map(|_| q.draw(rng)));
    let max = points
        .par_iter()
        .map(|z| p.ln_density(z) - q.ln_density(z))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let ln_k = max + safety_margin.ln();
    if ln_k.is_finite() {
        Ok(ln_k)
    } else {
        Err(GestaError::EnvelopeFailure(format!(
            "the largest density ratio p/q is not finite (ln ratio {max})"
        )))
    }
}

/// Outcome statistics of one rejection-sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingStats {
    pub n_requested: usize,
    pub n_accepted: usize,
    pub attempts: u64,
    pub acceptance_rate: f64,
    /// Proposals where `p > k q`; non-zero means `k` was underestimated.
    pub envelope_violations: u64,
}

/// Draws `n` latents from `p` using proposal `q` and envelope `exp(ln_k) q`.
///
/// Candidate `i` uses its own stream derived from `seed` and `path + [i]`, so
/// the result does not depend on scheduling. A candidate exceeding
/// `max_attempts` stalls the run; the error carries what was accepted.
pub fn rejection_sample(
    p: &impl LogDensity,
    q: &impl Proposal,
    ln_k: f64,
    n: usize,
    max_attempts: u64,
    seed: u64,
    path: &[u64],
) -> Result<(Vec<Vec<f64>>, SamplingStats)> {
    if p.dim() != q.dim() {
        return Err(GestaError::InvalidInput(format!(
            "target has dimension {} but proposal has {}",
            p.dim(),
            q.dim()
        )));
    }
    let draws: Vec<(Option<Vec<f64>>, u64, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sub = path.to_vec();
            sub.push(i as u64);
            let mut rng = rng::stream(seed, &sub);
            let mut violations = 0;
            for attempt in 1..=max_attempts {
                let z = q.draw(&mut rng);
                let ln_q = q.ln_density(&z);
                let u: f64 = rng.random();
                let ln_envelope = ln_k + ln_q;
                let threshold = u.ln() + ln_envelope;
                // Bounds settle most draws; the exact density is needed only
                // when they straddle the threshold or allow a violation.
                let (lower, upper) = p.ln_density_bounds(&z);
                if upper <= ln_envelope && threshold > upper {
                    continue;
                }
                if upper <= ln_envelope && threshold <= lower {
                    return (Some(z), attempt, violations);
                }
                let ln_p = p.ln_density(&z);
                if ln_p > ln_envelope {
                    violations += 1;
                }
                if threshold <= ln_p {
                    return (Some(z), attempt, violations);
                }
            }
            (None, max_attempts, violations)
        })
        .collect();

    let attempts: u64 = draws.iter().map(|d| d.1).sum();
    let envelope_violations = draws.iter().map(|d| d.2).sum();
    let accepted: Vec<Vec<f64>> = draws.into_iter().filter_map(|d| d.0).collect();
    let stats = SamplingStats {
        n_requested: n,
        n_accepted: accepted.len(),
        attempts,
        acceptance_rate: if attempts > 0 {
            accepted.len() as f64 / attempts as f64
        } else {
            0.0
        },
        envelope_violations,
    };
    if envelope_violations > 0 {
        log::warn!("{envelope_violations} envelope violations: k underestimates max p/q");
    }
    if accepted.len() < n {
        return Err(GestaError::SamplerStalled {
            requested: n,
            accepted: accepted.len(),
            attempts,
            acceptance_rate: stats.acceptance_rate,
            partial: accepted,
        });
    }
    Ok((accepted, stats))
}

/// Diagnostics of one bundle's sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub bundle: u32,
    pub bundle_name: Option<String>,
    pub n_seeds: usize,
    pub n_requested: usize,
    pub n_accepted: usize,
    pub attempts: u64,
    /// `None` when `k` overflows an f64; `ln_k` is always available.
    pub k: Option<f64>,
    pub ln_k: f64,
    pub acceptance_rate: f64,
    pub bandwidth: f64,
    pub envelope_violations: u64,
    /// Seeds whose encoding fell outside the training normalization range.
    pub extrapolated_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleFailure {
    pub bundle: u32,
    pub kind: String,
    pub message: String,
}

/// Candidates of every bundle that could be sampled, with per-bundle
/// diagnostics and the bundles that failed.
#[derive(Debug, Clone)]
pub struct SamplingOutcome {
    pub candidates: Tractogram,
    pub reports: Vec<SamplerReport>,
    pub failures: Vec<BundleFailure>,
}

/// Fitted target, proposal and envelope for one bundle's seeds.
#[derive(Debug, Clone)]
pub struct FittedSampler {
    pub target: ParzenDensity,
    pub proposal: GaussianProposal,
    pub ln_k: f64,
}

pub fn fit_sampler(latents: &[Vec<f64>], cfg: &SamplerConfig, bundle: u32) -> Result<FittedSampler> {
    cfg.validate()?;
    let target = fit_parzen(latents, cfg.bandwidth_factor, cfg.bandwidth_mode)?;
    let proposal = fit_proposal(latents, target.bandwidth(), cfg.proposal_inflation)?;
    let mut probe_rng = rng::stream(cfg.seed, &[rng::TAG_PROBE, bundle as u64]);
    let ln_k = estimate_ln_k(&target, &proposal, cfg.probe_draws, cfg.safety_margin, &mut probe_rng)?;
    Ok(FittedSampler { target, proposal, ln_k })
}

fn sample_one_bundle(
    model: &AEModel,
    seeds: &Tractogram,
    bundle: u32,
    cfg: &SamplerConfig,
) -> Result<(Tractogram, SamplerReport)> {
    let members: Vec<_> = seeds.bundle(bundle).into_iter().cloned().collect();
    let encodings = model.encode_batch(&members)?;
    let extrapolated_seeds = encodings.iter().filter(|e| e.extrapolated).count();
    let latents: Vec<Vec<f64>> = encodings.into_iter().map(|e| e.latent.into_inner()).collect();
    let fitted = fit_sampler(&latents, cfg, bundle)?;
    let (drawn, stats) = rejection_sample(
        &fitted.target,
        &fitted.proposal,
        fitted.ln_k,
        cfg.n_samples,
        cfg.max_attempts,
        cfg.seed,
        &[rng::TAG_SAMPLE, bundle as u64, rng::TAG_CANDIDATE],
    )?;
    let latents = drawn.into_iter().map(LatentVector::new).collect::<Result<Vec<_>>>()?;
    let streamlines = model.decode_batch(&latents)?;
    let n = streamlines.len();
    let mut candidates = Tractogram::with_labels(streamlines, vec![bundle; n])?;
    candidates.label_names = seeds.label_names.clone();
    candidates.space_tag = seeds.space_tag.clone();
    let k = fitted.ln_k.exp();
    let report = SamplerReport {
        bundle,
        bundle_name: seeds.label_names.get(&bundle).cloned(),
        n_seeds: members.len(),
        n_requested: stats.n_requested,
        n_accepted: stats.n_accepted,
        attempts: stats.attempts,
        k: k.is_finite().then_some(k),
        ln_k: fitted.ln_k,
        acceptance_rate: stats.acceptance_rate,
        bandwidth: fitted.target.bandwidth(),
        envelope_violations: stats.envelope_violations,
        extrapolated_seeds,
    };
    Ok((candidates, report))
}

/// Encodes the seeds of each bundle, fits the sampler and decodes
/// `cfg.n_samples` candidates per bundle, labelled with the bundle id.
/// A bundle that fails is recorded and skipped.
pub fn sample_bundles(model: &AEModel, seeds: &Tractogram, cfg: &SamplerConfig) -> Result<SamplingOutcome> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(GestaError::InvalidInput("no seed streamlines".into()));
    }
    let mut candidates = Tractogram {
        labels: Some(Vec::new()),
        label_names: seeds.label_names.clone(),
        space_tag: seeds.space_tag.clone(),
        ..Tractogram::default()
    };
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for bundle in seeds.bundle_ids() {
        match sample_one_bundle(model, seeds, bundle, cfg) {
            Ok((t, report)) => {
                log::info!(
                    "bundle {bundle}: {} candidates, acceptance rate {:.3e}",
                    report.n_accepted,
                    report.acceptance_rate
                );
                candidates.extend(t);
                reports.push(report);
            }
            Err(e) => {
                log::warn!("bundle {bundle}: sampling failed: {e}");
                failures.push(BundleFailure {
                    bundle,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(SamplingOutcome {
        candidates,
        reports,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(x: f64) -> f64 {
        x.ln()
    }

    #[test]
    fn two_seed_mixture_closed_form() {
        let p = ParzenDensity::new(&[vec![-1.0], vec![3.0]], 0.7).unwrap();
        let h = 0.7f64;
        let kernel = |d: f64| (-(d * d) / (2.0 * h * h)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
        let expected = 0.5 * kernel(2.0) + 0.5 * kernel(2.0);
        assert!((p.density(&[1.0]) - expected).abs() < 1e-12);
        let off = 0.5 * kernel(1.5) + 0.5 * kernel(2.5);
        assert!((p.density(&[1.5]) - off).abs() < 1e-12);
    }

    #[test]
    fn insufficient_seeds() {
        assert!(matches!(
            ParzenDensity::new(&[vec![0.0; 4]], 1.0),
            Err(GestaError::InsufficientSeeds { found: 1, required: 2 })
        ));
        assert!(fit_proposal(&[], 1.0, 1.5).is_err());
    }

    #[test]
    fn far_points_do_not_underflow() {
        let p = ParzenDensity::new(&[vec![0.0; 32], vec![1.0; 32]], 0.1).unwrap();
        let v = p.ln_density(&[50.0; 32]);
        assert!(v.is_finite() && v < -1e4);
    }

    #[test]
    fn unimodal_near_data() {
        let seeds: Vec<Vec<f64>> = (0..10).map(|i| vec![0.01 * i as f64, -0.02 * i as f64, 0.0]).collect();
        let p = ParzenDensity::new(&seeds, 0.5).unwrap();
        let (mean, _) = mean_and_variance(&seeds);
        let at = p.ln_density(&mean);
        for d in 0..3 {
            let mut z = mean.clone();
            z[d] += 10.0 * 0.5;
            assert!(at >= p.ln_density(&z));
        }
    }

    #[test]
    fn proposal_moments() {
        let seeds = vec![vec![1.0, -2.0], vec![-1.0, 2.0], vec![0.5, 0.0], vec![-0.5, 0.0]];
        let q = fit_proposal(&seeds, 0.5, 1.5).unwrap();
        assert!(q.mean().iter().all(|m| m.abs() < 1e-12));
        // sample variances 2.5/3 and 8/3
        assert!((q.variance()[0] - 1.5 * (2.5 / 3.0 + 0.25)).abs() < 1e-12);
        assert!((q.variance()[1] - 1.5 * (8.0 / 3.0 + 0.25)).abs() < 1e-12);
        let flat = fit_proposal(&[vec![2.0], vec![2.0]], 0.0 + 1e-9, 1.0).unwrap();
        assert_eq!(flat.variance(), &[VARIANCE_FLOOR]);
    }

    #[test]
    fn proposal_inflation_moment_check() {
        let mut r = rng::stream(3, &[]);
        let seeds: Vec<Vec<f64>> = (0..100_000)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let h = 0.5;
        let q = fit_proposal(&seeds, h, 1.5).unwrap();
        for v in q.variance() {
            // standard error of a unit sample variance at m = 1e5 is ~0.0045
            assert!((v - 1.5 * (1.0 + h * h)).abs() < 1.5 * 0.02, "{v}");
        }
    }

    #[test]
    fn identical_target_and_proposal_accept_everything() {
        let q = GaussianProposal::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        let (z, stats) = rejection_sample(&q, &q, 0.0, 2000, 10, 5, &[1]).unwrap();
        assert_eq!(z.len(), 2000);
        assert_eq!(stats.attempts, 2000);
        assert_eq!(stats.acceptance_rate, 1.0);
        assert_eq!(stats.envelope_violations, 0);
    }

    fn toy() -> (ParzenDensity, GaussianProposal) {
        let seeds = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 1.5], vec![2.0, -1.0]];
        let p = ParzenDensity::new(&seeds, 0.4).unwrap();
        let q = fit_proposal(&seeds, 0.4, 1.5).unwrap();
        (p, q)
    }

    #[test]
    fn k_matches_grid_scan() {
        let (p, q) = toy();
        let ln_k = estimate_ln_k(&p, &q, 10_000, 1.2, &mut rng::stream(1, &[])).unwrap();
        let mut grid_max = f64::NEG_INFINITY;
        for i in 0..=800 {
            for j in 0..=800 {
                let z = [-4.0 + 10.0 * i as f64 / 800.0, -4.0 + 10.0 * j as f64 / 800.0];
                grid_max = grid_max.max(p.ln_density(&z) - q.ln_density(&z));
            }
        }
        let found = (ln_k - ln(1.2)).exp();
        let truth = grid_max.exp();
        assert!(found <= truth * 1.0001 && found >= 0.95 * truth, "{found} vs {truth}");
    }

    #[test]
    fn k_is_stable_across_seeds() {
        let (p, q) = toy();
        let a = estimate_ln_k(&p, &q, 10_000, 1.2, &mut rng::stream(1, &[])).unwrap();
        let b = estimate_ln_k(&p, &q, 10_000, 1.2, &mut rng::stream(2, &[])).unwrap();
        assert!(((a - b).exp() - 1.0).abs() < 0.1);
    }

    #[test]
    fn acceptance_rate_is_one_over_k() {
        let (p, q) = toy();
        let ln_k = estimate_ln_k(&p, &q, 10_000, 1.2, &mut rng::stream(1, &[])).unwrap();
        let (_, stats) = rejection_sample(&p, &q, ln_k, 50_000, 10_000, 9, &[]).unwrap();
        let expected = (-ln_k).exp();
        assert!(
            ((stats.acceptance_rate - expected) / expected).abs() < 0.05,
            "{stats:?} vs {expected}"
        );
        assert_eq!(stats.envelope_violations, 0);
    }

    fn normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn accepted_marginals_match_the_mixture() {
        let (p, q) = toy();
        let ln_k = estimate_ln_k(&p, &q, 10_000, 1.2, &mut rng::stream(1, &[])).unwrap();
        let n = 20_000;
        let (z, _) = rejection_sample(&p, &q, ln_k, n, 10_000, 11, &[]).unwrap();
        let seeds: Vec<Vec<f64>> = p.seeds().map(|s| s.to_vec()).collect();
        for d in 0..2 {
            let mut xs: Vec<f64> = z.iter().map(|v| v[d]).collect();
            xs.sort_by(f64::total_cmp);
            let cdf = |x: f64| {
                seeds
                    .iter()
                    .map(|s| normal_cdf((x - s[d]) / p.bandwidth()))
                    .sum::<f64>()
                    / seeds.len() as f64
            };
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = cdf(x);
                    (f - i as f64 / n as f64)
                        .abs()
                        .max(((i + 1) as f64 / n as f64 - f).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks < 0.02, "dimension {d}: KS {ks}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_stalls_cleanly() {
        let (p, q) = toy();
        let ln_k = estimate_ln_k(&p, &q, 1000, 1.2, &mut rng::stream(1, &[])).unwrap();
        let a = rejection_sample(&p, &q, ln_k, 100, 10_000, 4, &[7]).unwrap();
        let b = rejection_sample(&p, &q, ln_k, 100, 10_000, 4, &[7]).unwrap();
        assert_eq!(a, b);
        // An absurd envelope makes acceptance practically impossible.
        match rejection_sample(&p, &q, 60.0, 5, 50, 4, &[7]) {
            Err(GestaError::SamplerStalled {
                requested,
                attempts,
                partial,
                ..
            }) => {
                assert_eq!((requested, attempts), (5, 250));
                assert!(partial.is_empty());
            }
            other => panic!("expected a stall, got {other:?}"),
        }
    }

    #[test]
    fn density_bounds_bracket_the_exact_value() {
        let mut r = rng::stream(8, &[]);
        for (spread, h) in [(0.05, 1.0), (1.0, 0.3), (3.0, 0.1)] {
            let seeds: Vec<Vec<f64>> = (0..40)
                .map(|_| {
                    (0..8)
                        .map(|_| spread * Distribution::<f64>::sample(&StandardNormal, &mut r))
                        .collect()
                })
                .collect();
            let p = ParzenDensity::new(&seeds, h).unwrap();
            for _ in 0..500 {
                let z: Vec<f64> = (0..8)
                    .map(|_| 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut r))
                    .collect();
                let (lo, hi) = p.ln_density_bounds(&z);
                let v = p.ln_density(&z);
                assert!(lo <= v && v <= hi, "{lo} {v} {hi}");
            }
        }
    }

    /// Hides the bounds so every draw takes the exact path.
    struct ExactOnly<'a>(&'a ParzenDensity);

    impl LogDensity for ExactOnly<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn ln_density(&self, z: &[f64]) -> f64 {
            self.0.ln_density(z)
        }
    }

    #[test]
    fn bounded_shortcut_matches_exact_sampling() {
        let mut r = rng::stream(12, &[]);
        let seeds: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                (0..16)
                    .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect();
        let p = ParzenDensity::new(&seeds, 0.5).unwrap();
        let q = fit_proposal(&seeds, 0.5, 1.5).unwrap();
        let ln_k = estimate_ln_k(&p, &q, 2000, 1.2, &mut rng::stream(1, &[])).unwrap();
        let fast = rejection_sample(&p, &q, ln_k, 300, 100_000, 3, &[]).unwrap();
        let exact = rejection_sample(&ExactOnly(&p), &q, ln_k, 300, 100_000, 3, &[]).unwrap();
        assert_eq!(fast, exact);
    }

    #[test]
    fn silverman_bandwidth() {
        let seeds = vec![vec![0.0, 0.0], vec![2.0, 2.0]];
        // per-dimension std sqrt(2), d = 2, m = 2: (4 / 8)^(1/6)
        let h = bandwidth(&seeds, 1.0, BandwidthMode::Silverman).unwrap();
        assert!((h - 2f64.sqrt() * 0.5f64.powf(1.0 / 6.0)).abs() < 1e-12);
        assert_eq!(bandwidth(&seeds, 3.0, BandwidthMode::Absolute).unwrap(), 3.0);
    }
}
