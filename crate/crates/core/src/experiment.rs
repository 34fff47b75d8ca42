//! The phantom experiment end to end: generate the phantom, train the
//! autoencoder on its streamlines, then for each seed percentage subsample
//! seeds, sample candidates, filter them and score coverage.

use serde::{Deserialize, Serialize};

use crate::autoencoder::{self, AEModel, TrainingConfig, TrainingReport};
use crate::error::{GestaError, Result};
use crate::geometry::Tractogram;
use crate::metrics::{self, ExperimentScores};
use crate::phantom::{self, PhantomDataset, PhantomSpec};
use crate::plausibility::{self, CriteriaConfig, Criterion, EvaluationMode, EvaluationReport, PreparedMasks};
use crate::rng;
use crate::sampler::{self, SamplerConfig, SamplingOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every stage seed is derived from this; seed fields of the stage
    /// configs are overwritten.
    pub master_seed: u64,
    pub phantom: PhantomSpec,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub criteria: CriteriaConfig,
    pub criteria_to_run: Vec<Criterion>,
    pub seed_percents: Vec<f64>,
    /// Score generated streamlines together with the seeds.
    pub union_scoring: bool,
    pub evaluation_mode: EvaluationMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            phantom: PhantomSpec::default(),
            training: TrainingConfig::default(),
            sampler: SamplerConfig::default(),
            criteria: CriteriaConfig::fiber_cup(),
            criteria_to_run: vec![Criterion::AdgB],
            seed_percents: vec![3.0, 5.0, 10.0, 100.0],
            union_scoring: true,
            evaluation_mode: EvaluationMode::Fast,
        }
    }
}

impl ExperimentConfig {
    /// Copy with the stage seeds derived from `master_seed`.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.phantom.seed = rng::derive_seed(self.master_seed, &[rng::TAG_PHANTOM]);
        c.training.seed = rng::derive_seed(self.master_seed, &[rng::TAG_TRAIN]);
        c.sampler.seed = rng::derive_seed(self.master_seed, &[rng::TAG_SAMPLE]);
        c
    }

    pub fn subsample_seed(&self) -> u64 {
        rng::derive_seed(self.master_seed, &[rng::TAG_SUBSAMPLE])
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [
            self.phantom.validate(),
            self.training.validate(),
            self.sampler.validate(),
            self.criteria.validate(),
        ] {
            match r {
                Err(GestaError::Spec(p)) => problems.extend(p),
                Err(e) => problems.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if self.criteria_to_run.is_empty() {
            problems.push("criteria_to_run is empty".into());
        }
        if self.seed_percents.is_empty() {
            problems.push("seed_percents is empty".into());
        }
        for p in &self.seed_percents {
            if !(*p > 0.0 && *p <= 100.0) {
                problems.push(format!("seed percentage {p} outside (0, 100]"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GestaError::Spec(problems))
        }
    }
}

/// Accepted streamlines, evaluation and scores under one criterion.
#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub criterion: Criterion,
    pub accepted: Tractogram,
    pub report: EvaluationReport,
    pub scores: ExperimentScores,
}

#[derive(Debug, Clone)]
pub struct SeedLevelResult {
    pub percent: f64,
    pub seeds: Tractogram,
    pub warnings: Vec<String>,
    pub sampling: SamplingOutcome,
    pub criteria: Vec<CriterionResult>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub dataset: PhantomDataset,
    pub model: AEModel,
    /// `None` when a pretrained model was supplied.
    pub training: Option<TrainingReport>,
    pub levels: Vec<SeedLevelResult>,
}

/// Prepared masks for the phantom under `criteria`.
pub fn phantom_masks(dataset: &PhantomDataset, criteria: &CriteriaConfig) -> Result<PreparedMasks> {
    plausibility::prepare_masks(&dataset.wm, &dataset.gm, &dataset.brain, criteria)
}

/// Subsample, sample, filter and score at one seed percentage. `cfg` must
/// already be [`ExperimentConfig::seeded`].
pub fn run_seed_level(
    cfg: &ExperimentConfig,
    dataset: &PhantomDataset,
    masks: &PreparedMasks,
    model: &AEModel,
    percent: f64,
) -> Result<SeedLevelResult> {
    let (seeds, warnings) = phantom::subsample_seeds(&dataset.tractogram, percent, cfg.subsample_seed())?;
    log::info!("P = {percent}%: {} seeds", seeds.len());
    let sampling = sampler::sample_bundles(model, &seeds, &cfg.sampler)?;
    let mut criteria = Vec::new();
    for &criterion in &cfg.criteria_to_run {
        let (accepted, report) = plausibility::evaluate(
            &sampling.candidates,
            masks,
            &dataset.peaks,
            &cfg.criteria,
            criterion,
            cfg.evaluation_mode,
        )?;
        log::info!(
            "P = {percent}%, {criterion}: {}/{} candidates accepted",
            report.accepted,
            report.total
        );
        let scores = metrics::score_experiment(
            &format!("P={percent} {criterion}"),
            &seeds,
            &accepted,
            &dataset.bundle_masks,
            cfg.union_scoring,
        )?;
        criteria.push(CriterionResult {
            criterion,
            accepted,
            report,
            scores,
        });
    }
    Ok(SeedLevelResult {
        percent,
        seeds,
        warnings,
        sampling,
        criteria,
    })
}

/// Runs the whole experiment. With `model` given, training is skipped.
pub fn run_experiment(cfg: &ExperimentConfig, model: Option<AEModel>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let dataset = phantom::generate(&cfg.phantom)?;
    let (model, training) = match model {
        Some(m) => (m, None),
        None => {
            let (m, r) = autoencoder::train(&dataset.tractogram, &cfg.training)?;
            (m, Some(r))
        }
    };
    let masks = phantom_masks(&dataset, &cfg.criteria)?;
    let levels = cfg
        .seed_percents
        .iter()
        .map(|&p| run_seed_level(&cfg, &dataset, &masks, &model, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        config: cfg,
        dataset,
        model,
        training,
        levels,
    })
}
