//! Streamline autoencoder: training, encoding to a 32-dimensional latent
//! vector and decoding back to a 256-vertex streamline.

mod format;
pub mod network;
mod optim;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GestaError, Result};
use crate::geometry::{Streamline, Tractogram, STREAMLINE_VERTICES};
use crate::rng;
use crate::vec3::Vec3;

pub use format::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use network::{Architecture, Network, ParamSpec};

pub const LATENT_DIM: usize = 32;

/// Relative margin beyond the training bounding box before an input is
/// reported as an extrapolation.
pub const EXTRAPOLATION_MARGIN: f64 = 0.2;

/// A point in the autoencoder latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != LATENT_DIM {
            return Err(GestaError::InvalidInput(format!(
                "latent vector has {} components, expected {LATENT_DIM}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GestaError::InvalidInput("non-finite latent component".into()));
        }
        Ok(LatentVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Result of encoding one streamline.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub latent: LatentVector,
    /// Set when the input reaches more than 20% of the box size beyond the
    /// training bounding box.
    pub extrapolated: bool,
}

/// Affine map from world millimeters into the unit cube, fit to the
/// training-set bounding box. A single isotropic scale keeps the loss in
/// proportion to millimeter error along every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: Vec3,
    pub max: Vec3,
    pub center: Vec3,
    pub scale: f64,
}

impl Normalization {
    pub fn fit<'a>(streamlines: impl IntoIterator<Item = &'a Streamline>) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for s in streamlines {
            for v in s.vertices() {
                for a in 0..3 {
                    min[a] = min[a].min(v[a]);
                    max[a] = max[a].max(v[a]);
                }
            }
        }
        if min.iter().any(|v| !v.is_finite()) {
            return Err(GestaError::InvalidInput("no vertices to normalize".into()));
        }
        let center = [
            0.5 * (min[0] + max[0]),
            0.5 * (min[1] + max[1]),
            0.5 * (min[2] + max[2]),
        ];
        let scale = (0..3).map(|a| 0.5 * (max[a] - min[a])).fold(0.0f64, f64::max).max(1e-6);
        Ok(Normalization {
            min,
            max,
            center,
            scale,
        })
    }

    #[inline]
    pub fn to_unit(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.center[0]) / self.scale,
            (p[1] - self.center[1]) / self.scale,
            (p[2] - self.center[2]) / self.scale,
        ]
    }

    #[inline]
    pub fn to_world(&self, u: Vec3) -> Vec3 {
        [
            u[0] * self.scale + self.center[0],
            u[1] * self.scale + self.center[1],
            u[2] * self.scale + self.center[2],
        ]
    }

    fn is_extrapolated(&self, s: &Streamline) -> bool {
        s.vertices().iter().any(|v| {
            (0..3).any(|a| {
                let margin = EXTRAPOLATION_MARGIN * (self.max[a] - self.min[a]).max(2.0 * self.scale);
                v[a] < self.min[a] - margin || v[a] > self.max[a] + margin
            })
        })
    }
}

/// Optimization settings for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Upper bound on passes over the training split.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Width of the first encoder stage; later stages double it.
    pub base_channels: usize,
    /// Probability of presenting a streamline in reversed vertex order.
    pub reverse_probability: f64,
    /// Epochs without validation improvement before the learning rate is
    /// multiplied by `lr_decay`; 0 keeps it constant.
    pub lr_plateau_patience: usize,
    pub lr_decay: f64,
    /// Cubic B-spline functions per coordinate spanning the decoder output;
    /// 0 leaves it unconstrained.
    pub output_basis: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 40,
            batch_size: 64,
            learning_rate: 2e-3,
            validation_fraction: 0.1,
            patience: 10,
            seed: 0,
            base_channels: 8,
            reverse_probability: 0.5,
            lr_plateau_patience: 3,
            lr_decay: 0.5,
            output_basis: 8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".to_string());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            problems.push("validation_fraction must lie in (0, 1)".to_string());
        }
        if self.patience == 0 {
            problems.push("patience must be positive".to_string());
        }
        if self.base_channels == 0 {
            problems.push("base_channels must be positive".to_string());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            problems.push("lr_decay must lie in (0, 1]".to_string());
        }
        if self.output_basis == 1 || self.output_basis > STREAMLINE_VERTICES {
            problems.push(format!("output_basis must be 0 or in 2..={STREAMLINE_VERTICES}"));
        }
        if !(0.0..=1.0).contains(&self.reverse_probability) {
            problems.push("reverse_probability must lie in [0, 1]".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GestaError::Spec(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// Per-epoch losses of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Trained encoder/decoder weights with the normalization they expect.
#[derive(Debug, Clone)]
pub struct AEModel {
    architecture: Architecture,
    normalization: Normalization,
    weights: Vec<f32>,
    params: Vec<f64>,
    network: Network,
}

impl PartialEq for AEModel {
    fn eq(&self, other: &Self) -> bool {
        self.architecture == other.architecture
            && self.normalization == other.normalization
            && self.weights == other.weights
    }
}

impl AEModel {
    pub fn from_weights(architecture: Architecture, normalization: Normalization, weights: Vec<f32>) -> Result<Self> {
        if architecture.latent_dim != LATENT_DIM || architecture.input_vertices != STREAMLINE_VERTICES {
            return Err(GestaError::InvalidInput(format!(
                "model must have latent_dim {LATENT_DIM} and input_vertices {STREAMLINE_VERTICES}"
            )));
        }
        let network = Network::autoencoder(&architecture);
        if weights.len() != network.n_params() {
            return Err(GestaError::InvalidInput(format!(
                "{} weights for a network with {} parameters",
                weights.len(),
                network.n_params()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(GestaError::InvalidInput("non-finite model weight".into()));
        }
        let params = weights.iter().map(|&w| w as f64).collect();
        Ok(AEModel {
            architecture,
            normalization,
            weights,
            params,
            network,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        self.network.param_specs()
    }

    pub fn latent_dim(&self) -> usize {
        self.architecture.latent_dim
    }

    pub fn input_vertices(&self) -> usize {
        self.architecture.input_vertices
    }

    pub fn encode(&self, s: &Streamline) -> Result<Encoding> {
        Ok(self.encode_batch(std::slice::from_ref(s))?.remove(0))
    }

    /// Encodes many streamlines in one pass; output order follows input order.
    pub fn encode_batch(&self, streamlines: &[Streamline]) -> Result<Vec<Encoding>> {
        let mut out = Vec::with_capacity(streamlines.len());
        for chunk in streamlines.chunks(256) {
            let resampled = chunk
                .iter()
                .map(|s| resample_if_needed(s, self.input_vertices()))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Streamline> = resampled.iter().collect();
            let input = pack_batch(&refs, &self.normalization, &vec![false; refs.len()]);
            let z = self.network.encoder.forward(&self.params, &input, refs.len(), None);
            for (b, s) in resampled.iter().enumerate() {
                let latent: Vec<f64> = (0..LATENT_DIM).map(|d| z[d * refs.len() + b]).collect();
                out.push(Encoding {
                    latent: LatentVector::new(latent)?,
                    extrapolated: self.normalization.is_extrapolated(s),
                });
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentVector) -> Result<Streamline> {
        Ok(self.decode_batch(std::slice::from_ref(z))?.remove(0))
    }

    /// Decodes latents to 256-vertex streamlines in world millimeters.
    pub fn decode_batch(&self, latents: &[LatentVector]) -> Result<Vec<Streamline>> {
        let mut out = Vec::with_capacity(latents.len());
        let n_vert = self.input_vertices();
        for chunk in latents.chunks(256) {
            let batch = chunk.len();
            let mut z = vec![0.0; LATENT_DIM * batch];
            for (b, lat) in chunk.iter().enumerate() {
                for (d, &v) in lat.as_slice().iter().enumerate() {
                    z[d * batch + b] = v;
                }
            }
            let y = self.network.decoder.forward(&self.params, &z, batch, None);
            for b in 0..batch {
                let vertices = (0..n_vert)
                    .map(|t| {
                        let u = [
                            y[b * n_vert + t],
                            y[(batch + b) * n_vert + t],
                            y[(2 * batch + b) * n_vert + t],
                        ];
                        self.normalization.to_world(u)
                    })
                    .collect();
                out.push(Streamline::new(vertices)?);
            }
        }
        Ok(out)
    }

    /// Encode then decode.
    pub fn reconstruct(&self, streamlines: &[Streamline]) -> Result<Vec<Streamline>> {
        let latents: Vec<LatentVector> = self.encode_batch(streamlines)?.into_iter().map(|e| e.latent).collect();
        self.decode_batch(&latents)
    }
}

fn resample_if_needed(s: &Streamline, n: usize) -> Result<Streamline> {
    if s.len() == n {
        Ok(s.clone())
    } else {
        s.resample(n)
    }
}

/// Packs streamlines into the network's `[channel][sample][vertex]` layout.
fn pack_batch(streamlines: &[&Streamline], norm: &Normalization, reverse: &[bool]) -> Vec<f64> {
    let batch = streamlines.len();
    let n = streamlines.first().map_or(0, |s| s.len());
    let mut x = vec![0.0; 3 * batch * n];
    for (b, s) in streamlines.iter().enumerate() {
        for (t, &v) in s.vertices().iter().enumerate() {
            let u = norm.to_unit(v);
            let pos = if reverse[b] { n - 1 - t } else { t };
            for c in 0..3 {
                x[(c * batch + b) * n + pos] = u[c];
            }
        }
    }
    x
}

/// Per-vertex root-mean-square distance (mm) between paired streamlines with
/// equal vertex counts.
pub fn rms_vertex_error(a: &[Streamline], b: &[Streamline]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.vertices().iter().zip(y.vertices()) {
            let d = crate::vec3::sub(*p, *q);
            sum += crate::vec3::dot(d, d);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Trains an autoencoder on `data`, returning the weights with the lowest
/// validation reconstruction error.
///
/// Fully deterministic for a given `cfg.seed`.
pub fn train(data: &Tractogram, cfg: &TrainingConfig) -> Result<(AEModel, TrainingReport)> {
    train_from(data, cfg, None)
}

/// Like [`train`], optionally starting from the weights of an existing model.
pub fn train_from(
    data: &Tractogram,
    cfg: &TrainingConfig,
    initial: Option<&AEModel>,
) -> Result<(AEModel, TrainingReport)> {
    cfg.validate()?;
    if data.len() < 100 {
        return Err(GestaError::InvalidInput(format!(
            "training needs at least 100 streamlines, got {}",
            data.len()
        )));
    }
    let streamlines = data
        .streamlines
        .iter()
        .map(|s| resample_if_needed(s, STREAMLINE_VERTICES))
        .collect::<Result<Vec<_>>>()?;

    let architecture = match initial {
        Some(m) => *m.architecture(),
        None => Architecture {
            base_channels: cfg.base_channels,
            output_basis: cfg.output_basis,
            ..Architecture::default()
        },
    };
    let normalization = match initial {
        Some(m) => m.normalization().clone(),
        None => Normalization::fit(&streamlines)?,
    };
    let network = Network::autoencoder(&architecture);

    let mut rng = rng::stream(cfg.seed, &[rng::TAG_TRAIN]);
    let mut params = match initial {
        Some(m) => m.params.clone(),
        None => network.init_params(&mut rng),
    };

    let mut order: Vec<usize> = (0..streamlines.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((streamlines.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, streamlines.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_refs: Vec<&Streamline> = val_idx.iter().map(|&i| &streamlines[i]).collect();

    let validation_loss = |params: &[f64]| -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in val_refs.chunks(256) {
            let x = pack_batch(chunk, &normalization, &vec![false; chunk.len()]);
            sum += network.loss(params, &x, &x, chunk.len()) * chunk.len() as f64;
            n += chunk.len();
        }
        sum / n as f64
    };

    let mut adam = optim::Adam::new(network.n_params(), cfg.learning_rate);
    let mut grad = vec![0.0; network.n_params()];
    let mut best_params = params.clone();
    let mut best_val = validation_loss(&params);
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let refs: Vec<&Streamline> = chunk.iter().map(|&i| &streamlines[i]).collect();
            let reverse: Vec<bool> = (0..refs.len())
                .map(|_| rng.random_bool(cfg.reverse_probability))
                .collect();
            let x = pack_batch(&refs, &normalization, &reverse);
            let loss = network.loss_and_grad(&params, &x, &x, refs.len(), &mut grad);
            if !loss.is_finite() {
                return Err(GestaError::TrainingFailure { epoch, loss });
            }
            sum += loss * refs.len() as f64;
            adam.step(&mut params, &grad);
        }
        let train_loss = sum / train_idx.len() as f64;
        let val = validation_loss(&params);
        if !val.is_finite() {
            return Err(GestaError::TrainingFailure { epoch, loss: val });
        }
        log::info!("epoch {epoch}: train loss {train_loss:.6e}, validation loss {val:.6e}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss: val,
        });
        if val < best_val {
            best_val = val;
            best_params.copy_from_slice(&params);
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if cfg.lr_plateau_patience > 0 && stale % cfg.lr_plateau_patience == 0 {
                adam.scale_learning_rate(cfg.lr_decay);
                log::info!("learning rate lowered to {:.3e}", adam.learning_rate());
            }
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let weights = best_params.iter().map(|&p| p as f32).collect();
    let model = AEModel::from_weights(architecture, normalization, weights)?;
    let report = TrainingReport {
        history,
        best_epoch,
        best_validation_loss: best_val,
        stopped_early,
        n_train: train_idx.len(),
        n_validation: val_refs.len(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arc_streamline(offset: f64, bend: f64) -> Streamline {
        let v = (0..STREAMLINE_VERTICES)
            .map(|i| {
                let t = i as f64 / (STREAMLINE_VERTICES - 1) as f64;
                [60.0 * t, offset + bend * (std::f64::consts::PI * t).sin(), 3.0]
            })
            .collect();
        Streamline::new(v).unwrap()
    }

    fn small_cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            batch_size: 32,
            base_channels: 4,
            patience: 50,
            ..TrainingConfig::default()
        }
    }

    fn untrained() -> AEModel {
        let arch = Architecture {
            base_channels: 4,
            ..Architecture::default()
        };
        let net = Network::autoencoder(&arch);
        let mut r = rng::stream(3, &[]);
        let w = net.init_params(&mut r).iter().map(|&p| p as f32).collect();
        let norm = Normalization::fit(&[arc_streamline(0.0, 10.0), arc_streamline(20.0, -5.0)]).unwrap();
        AEModel::from_weights(arch, norm, w).unwrap()
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let m = untrained();
        let s = arc_streamline(5.0, 3.0);
        let a = m.encode(&s).unwrap();
        let b = m.encode(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.latent.as_slice().len(), LATENT_DIM);
        assert!(!a.extrapolated);
        let d1 = m.decode(&a.latent).unwrap();
        let d2 = m.decode(&a.latent).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), STREAMLINE_VERTICES);
    }

    #[test]
    fn encode_resamples_and_flags_extrapolation() {
        let m = untrained();
        let s = arc_streamline(5.0, 3.0);
        let coarse = s.resample(40).unwrap();
        assert!(m.encode(&coarse).is_ok());
        let far = Streamline::new(vec![[500.0, 0.0, 0.0], [600.0, 0.0, 0.0]]).unwrap();
        assert!(m.encode(&far).unwrap().extrapolated);
    }

    #[test]
    fn decode_rejects_bad_latent() {
        assert!(LatentVector::new(vec![0.0; 31]).is_err());
        assert!(LatentVector::new(vec![f64::NAN; 32]).is_err());
    }

    #[test]
    fn training_needs_enough_streamlines() {
        let t = Tractogram::new(vec![arc_streamline(0.0, 1.0); 10]);
        assert!(matches!(train(&t, &small_cfg(1)), Err(GestaError::InvalidInput(_))));
    }

    #[test]
    fn diverging_learning_rate_reports_epoch() {
        let t = Tractogram::new((0..120).map(|i| arc_streamline(i as f64 * 0.1, 4.0)).collect());
        let cfg = TrainingConfig {
            learning_rate: 1e200,
            ..small_cfg(3)
        };
        match train(&t, &cfg) {
            Err(GestaError::TrainingFailure { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn memorizes_a_single_repeated_streamline() {
        let s = arc_streamline(10.0, 8.0);
        let t = Tractogram::new(vec![s.clone(); 128]);
        let cfg = TrainingConfig {
            reverse_probability: 0.0,
            lr_plateau_patience: 0,
            learning_rate: 3e-3,
            ..small_cfg(150)
        };
        let (model, report) = train(&t, &cfg).unwrap();
        let rec = model.reconstruct(std::slice::from_ref(&s)).unwrap();
        let err = rms_vertex_error(&[s], &rec);
        assert!(err < 0.5, "rms {err} mm, history {:?}", report.history.last());
    }

    #[test]
    fn training_is_reproducible() {
        let t = Tractogram::new((0..120).map(|i| arc_streamline(i as f64 * 0.1, 4.0)).collect());
        let (a, ra) = train(&t, &small_cfg(2)).unwrap();
        let (b, rb) = train(&t, &small_cfg(2)).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(ra, rb);
    }
}
