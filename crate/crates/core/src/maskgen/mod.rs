//! Universal per-identity mask training with a pipeline-aware protection
//! loss and an SSIM perceptibility hinge.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frcore::{embed, EmbeddingModel, Embedder, FrError};
use crate::imaging::{face_crop, ssim_var, CropSpec, Image, ImagingError};
use crate::numerics::{grad_check, Graph, NumericsError, Tensor, Var};
use crate::seed;
use crate::synthdata::{Dataset, Role};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("identity {identity} has {have} gallery-seen images, batch needs {need}")]
    InsufficientImages {
        identity: String,
        have: usize,
        need: usize,
    },
    #[error("unknown model id {0:?}")]
    UnknownModel(String),
    #[error("team is empty")]
    EmptyTeam,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("mask value {value} at index {index} exceeds epsilon {epsilon}")]
    Bound { index: usize, value: f64, epsilon: f64 },
    #[error("mask shape {0}")]
    Shape(String),
    #[error(transparent)]
    Fr(#[from] FrError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// A perturbation field in `[-epsilon, epsilon]`, subtracted from face crops.
#[derive(Clone, Debug, PartialEq)]
pub struct P3Mask {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub epsilon: f64,
    pub owner: String,
    /// Seed of the training run that produced the mask.
    pub seed: u64,
    /// `[height, width, channels]`, row-major.
    pub values: Vec<f64>,
}

impl P3Mask {
    pub fn zeros(height: usize, width: usize, channels: usize, epsilon: f64, owner: &str, seed: u64) -> Self {
        Self {
            height,
            width,
            channels,
            epsilon,
            owner: owner.to_string(),
            seed,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.values.clone())
            .expect("mask shape matches its values")
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(MaskError::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.height == 0 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(MaskError::Shape(format!(
                "{}x{}x{} is not a valid mask",
                self.height, self.width, self.channels
            )));
        }
        if self.values.len() != self.height * self.width * self.channels {
            return Err(MaskError::Shape(format!(
                "{} values for {}x{}x{}",
                self.values.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some((index, &value)) = self
            .values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.abs() <= self.epsilon))
        {
            return Err(MaskError::Bound {
                index,
                value,
                epsilon: self.epsilon,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch: usize,
    pub epsilon: f64,
    pub omega: f64,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_init: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Native mask side; resized to each crop.
    pub mask_size: usize,
    pub team: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            batch: 4,
            epsilon: 0.063,
            omega: 0.03,
            epochs: 50,
            seed: 0,
            lambda_init: 1.0,
            lambda_min: 0.25,
            lambda_max: 64.0,
            mask_size: 32,
            team: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        let bad = |m: String| Err(MaskError::Config(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be positive", self.eta));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(0.0..0.5).contains(&self.omega) {
            return bad(format!("omega {} outside [0, 0.5)", self.omega));
        }
        if !(self.lambda_min >= 0.0 && self.lambda_min <= self.lambda_init && self.lambda_init <= self.lambda_max) {
            return bad(format!(
                "need 0 <= lambda_min <= lambda_init <= lambda_max, got {} / {} / {}",
                self.lambda_min, self.lambda_init, self.lambda_max
            ));
        }
        if self.mask_size == 0 {
            return bad("mask size must be positive".into());
        }
        Ok(())
    }
}

/// Knobs of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub omega: f64,
    pub lambda: f64,
    /// Snap the resized mask to the 1/255 grid. Finite-difference checks turn
    /// this off, since the snapped forward pass is piecewise constant.
    pub quantize: bool,
}

/// Graph handles of the loss terms for one image.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub protect: Var,
    pub percept: Var,
    /// Arccos distance per team member.
    pub distances: Vec<Var>,
    /// Value of the perceptibility hinge before `max(., 0)`.
    pub hinge: f64,
}

/// Protected crop resized to `out x out`: `clamp(face - QR(mask), 0, 1)`.
pub fn protected_var(
    g: &mut Graph,
    face: Var,
    mask: Var,
    out: usize,
    quantize: bool,
) -> Result<Var, NumericsError> {
    let s = g.shape(face).to_vec();
    let mut m = g.resize_bilinear(mask, s[0], s[1])?;
    if quantize {
        m = g.quantize(m);
    }
    let d = g.sub(face, m)?;
    let d = g.clamp(d, 0.0, 1.0);
    g.resize_bilinear(d, out, out)
}

/// Build the total loss for one face crop. `clean[i]` is the embedding of
/// the unprotected crop under `team[i]`.
pub fn loss_vars(
    g: &mut Graph,
    face: &Image,
    mask: Var,
    team: &[&dyn Embedder],
    clean: &[Vec<f64>],
    p: &LossParams,
) -> Result<LossVars, NumericsError> {
    let (h, w, c) = face.dims();
    let fv = g.constant(Tensor::new(vec![h, w, c], face.pixels().to_vec())?);
    let mut distances = Vec::with_capacity(team.len());
    for (model, reference) in team.iter().zip(clean) {
        let x = protected_var(g, fv, mask, model.input_size(), p.quantize)?;
        let e = model.embed_var(g, x)?;
        let r = g.constant(Tensor::vector(reference.clone()));
        let cos = g.dot(e, r)?;
        distances.push(g.arccos(cos));
    }
    let mut sum = distances[0];
    for &d in &distances[1..] {
        sum = g.add(sum, d)?;
    }
    let protect = g.scale(sum, -1.0 / team.len() as f64);

    let side = h.max(w);
    let crop = protected_var(g, fv, mask, side, p.quantize)?;
    let s = ssim_var(g, fv, crop)?;
    let half = g.scale(s, -0.5);
    let shifted = g.add_scalar(half, 0.5 - p.omega);
    let hinge = g.value(shifted).item();
    let active = g.max_const(shifted, 0.0);
    let percept = g.scale(active, p.lambda);
    let total = g.add(protect, percept)?;
    Ok(LossVars {
        total,
        protect,
        percept,
        distances,
        hinge,
    })
}

/// Scalar form of the perceptibility term for a known SSIM value.
pub fn percept_hinge(ssim: f64, omega: f64, lambda: f64) -> f64 {
    lambda * ((1.0 - ssim) / 2.0 - omega).max(0.0)
}

/// Outcome of [`loss_gradient_error`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossGradCheck {
    pub max_rel_error: f64,
    pub points: usize,
    /// Draws discarded because a ReLU or clamp kink lay within `h`.
    pub redrawn: usize,
}

/// Worst relative error of the loss gradient against central differences
/// with step `h`, over `points` masks drawn from `[-epsilon, epsilon]` at
/// the face's own resolution. Quantization is forced off. A draw whose
/// smallest kink distance is below `h` is replaced, since the difference
/// quotient there straddles a non-differentiable point.
pub fn loss_gradient_error(
    face: &Image,
    team: &[&dyn Embedder],
    p: &LossParams,
    epsilon: f64,
    points: usize,
    h: f64,
    seed: u64,
) -> Result<LossGradCheck, MaskError> {
    if team.is_empty() {
        return Err(MaskError::EmptyTeam);
    }
    let clean = clean_embeddings(face, team)?;
    let p = LossParams { quantize: false, ..*p };
    let mut rng = seed::stream(seed, "gradcheck");
    let (rows, cols, c) = face.dims();
    let mut out = LossGradCheck {
        max_rel_error: 0.0,
        points: 0,
        redrawn: 0,
    };
    let max_draws = 100 * points.max(1);
    while out.points < points && out.points + out.redrawn < max_draws {
        let values = (0..rows * cols * c).map(|_| rng.random_range(-epsilon..=epsilon)).collect();
        let point = Tensor::new(vec![rows, cols, c], values)?;
        let check = grad_check(|g, m| Ok(loss_vars(g, face, m, team, &clean, &p)?.total), &point, h)?;
        if check.kink_margin < h {
            out.redrawn += 1;
            continue;
        }
        out.points += 1;
        out.max_rel_error = out.max_rel_error.max(check.max_rel_error);
    }
    if out.points < points {
        out.max_rel_error = f64::INFINITY;
    }
    Ok(out)
}

fn clean_embeddings(face: &Image, team: &[&dyn Embedder]) -> Result<Vec<Vec<f64>>, FrError> {
    team.iter().map(|m| embed(*m, face)).collect()
}

/// Loss terms `(total, protect, percept)` of one face crop at a fixed mask.
pub fn loss_terms(
    face: &Image,
    mask: &P3Mask,
    team: &[&dyn Embedder],
    omega: f64,
    lambda: f64,
) -> Result<(f64, f64, f64), MaskError> {
    if team.is_empty() {
        return Err(MaskError::EmptyTeam);
    }
    let clean = clean_embeddings(face, team)?;
    let mut g = Graph::new();
    let m = g.constant(mask.tensor());
    let p = LossParams {
        omega,
        lambda,
        quantize: true,
    };
    let v = loss_vars(&mut g, face, m, team, &clean, &p)?;
    Ok((g.value(v.total).item(), g.value(v.protect).item(), g.value(v.percept).item()))
}

/// Negative mean arccos distance between clean and protected embeddings.
pub fn loss_protect(face: &Image, mask: &P3Mask, team: &[&dyn Embedder]) -> Result<f64, MaskError> {
    Ok(loss_terms(face, mask, team, 0.0, 0.0)?.1)
}

pub fn loss_percept(face: &Image, mask: &P3Mask, omega: f64, lambda: f64) -> Result<f64, MaskError> {
    let mut g = Graph::new();
    let (h, w, c) = face.dims();
    let fv = g.constant(Tensor::new(vec![h, w, c], face.pixels().to_vec())?);
    let m = g.constant(mask.tensor());
    let crop = protected_var(&mut g, fv, m, h.max(w), true)?;
    let s = ssim_var(&mut g, fv, crop)?;
    Ok(percept_hinge(g.value(s).item(), omega, lambda))
}

pub fn loss_total(
    face: &Image,
    mask: &P3Mask,
    team: &[&dyn Embedder],
    omega: f64,
    lambda: f64,
) -> Result<f64, MaskError> {
    Ok(loss_terms(face, mask, team, omega, lambda)?.0)
}

/// The protected face crop of `x` as seen by a model with `size x size` input.
pub fn theta_protect(x: &Image, crop: Option<CropSpec>, mask: &P3Mask, size: usize) -> Result<Image, MaskError> {
    let face = face_crop(x, crop)?;
    let mut g = Graph::new();
    let (h, w, c) = face.dims();
    if c != mask.channels {
        return Err(MaskError::Shape(format!("{c}-channel face, {}-channel mask", mask.channels)));
    }
    let fv = g.constant(Tensor::new(vec![h, w, c], face.into_pixels())?);
    let m = g.constant(mask.tensor());
    let out = protected_var(&mut g, fv, m, size, true)?;
    Ok(Image::from_clamped(size, size, c, g.value(out).data().to_vec())?)
}

/// Dynamic weight of the perceptibility term: doubles when the hinge was
/// active in most evaluations, decays when it never was.
pub fn schedule_lambda(lambda: f64, active_fraction: f64, min: f64, max: f64) -> f64 {
    if active_fraction > 0.5 {
        (2.0 * lambda).min(max)
    } else if active_fraction == 0.0 {
        (0.9 * lambda).max(min)
    } else {
        lambda
    }
}

/// Per-image outcome of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTerms {
    pub total: f64,
    /// Mean arccos distance over the team.
    pub distance: f64,
    pub hinge_active: bool,
}

/// Gradient of the mean total loss over `faces` with respect to the mask.
/// Per-image work runs in parallel; gradients are summed in image order.
pub fn batch_gradient(
    faces: &[&Image],
    clean: &[&Vec<Vec<f64>>],
    mask: &Tensor,
    team: &[&dyn Embedder],
    p: &LossParams,
) -> Result<(Tensor, Vec<StepTerms>), MaskError> {
    let results = faces
        .par_iter()
        .zip(clean.par_iter())
        .map(|(face, refs)| {
            let mut g = Graph::new();
            let m = g.leaf(mask.clone());
            let v = loss_vars(&mut g, face, m, team, refs, p)?;
            let grads = g.backward(v.total)?;
            let distance = -g.value(v.protect).item();
            let terms = StepTerms {
                total: g.value(v.total).item(),
                distance,
                hinge_active: v.hinge > 0.0,
            };
            Ok((grads.wrt(m), terms))
        })
        .collect::<Result<Vec<_>, MaskError>>()?;
    let mut sum = Tensor::zeros(mask.shape());
    let mut terms = Vec::with_capacity(results.len());
    for (grad, t) in results {
        sum.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b);
        terms.push(t);
    }
    let n = faces.len() as f64;
    sum.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok((sum, terms))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `values <- clip(values - eta * sign(grad), -epsilon, epsilon)`.
pub fn sign_step(values: &mut [f64], grad: &[f64], eta: f64, epsilon: f64) {
    for (v, g) in values.iter_mut().zip(grad) {
        *v = (*v - eta * sign(*g)).clamp(-epsilon, epsilon);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean team arccos distance over the epoch's evaluations.
    pub mean_distance: f64,
    pub active_fraction: f64,
    /// Weight used during this epoch.
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRun {
    pub mask: P3Mask,
    pub history: Vec<EpochStats>,
}

/// Team members named in `ids`, ordered by model id.
pub fn resolve_team<'a>(pool: &'a [EmbeddingModel], ids: &[String]) -> Result<Vec<&'a EmbeddingModel>, MaskError> {
    let mut team = ids
        .iter()
        .map(|id| {
            pool.iter()
                .find(|m| &m.id == id)
                .ok_or_else(|| MaskError::UnknownModel(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    team.sort_by(|a, b| a.id.cmp(&b.id));
    team.dedup_by(|a, b| a.id == b.id);
    Ok(team)
}

/// Gallery-seen face crops of one identity, in manifest order.
pub fn seen_faces(ds: &Dataset, identity: &str) -> Result<Vec<Image>, MaskError> {
    ds.of(identity, Role::GallerySeen)
        .into_iter()
        .map(|s| Ok(face_crop(&s.image, Some(s.crop))?))
        .collect()
}

/// Train the mask of `identity` on its gallery-seen images against the
/// pool models named in `cfg.team`.
pub fn train_mask(ds: &Dataset, identity: &str, pool: &[EmbeddingModel], cfg: &TrainConfig) -> Result<MaskRun, MaskError> {
    cfg.validate()?;
    let team = resolve_team(pool, &cfg.team)?;
    let faces = seen_faces(ds, identity)?;
    if faces.len() < cfg.batch {
        return Err(MaskError::InsufficientImages {
            identity: identity.to_string(),
            have: faces.len(),
            need: cfg.batch,
        });
    }
    let team: Vec<&dyn Embedder> = team.into_iter().map(|m| m as &dyn Embedder).collect();
    train_mask_on(&faces, identity, &team, cfg)
}

/// Training loop over explicit face crops; the team is evaluated in the
/// given order.
pub fn train_mask_on(faces: &[Image], owner: &str, team: &[&dyn Embedder], cfg: &TrainConfig) -> Result<MaskRun, MaskError> {
    cfg.validate()?;
    if team.is_empty() {
        return Err(MaskError::EmptyTeam);
    }
    if faces.is_empty() {
        return Err(MaskError::InsufficientImages {
            identity: owner.to_string(),
            have: 0,
            need: cfg.batch,
        });
    }
    let channels = faces[0].channels();
    let mut mask = P3Mask::zeros(cfg.mask_size, cfg.mask_size, channels, cfg.epsilon, owner, cfg.seed);
    let clean = faces
        .par_iter()
        .map(|f| clean_embeddings(f, team))
        .collect::<Result<Vec<_>, FrError>>()?;
    let mut rng = seed::stream(cfg.seed, &format!("mask/{owner}"));
    let mut order: Vec<usize> = (0..faces.len()).collect();
    let mut lambda = cfg.lambda_init;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let p = LossParams {
            omega: cfg.omega,
            lambda,
            quantize: true,
        };
        let (mut loss, mut distance, mut active, mut n) = (0.0, 0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Image> = idx.iter().map(|&i| &faces[i]).collect();
            let refs: Vec<&Vec<Vec<f64>>> = idx.iter().map(|&i| &clean[i]).collect();
            let (grad, terms) = batch_gradient(&batch, &refs, &mask.tensor(), team, &p)?;
            let batch_loss = terms.iter().map(|t| t.total).sum::<f64>() / terms.len() as f64;
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(MaskError::NonFinite {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            for t in &terms {
                loss += t.total;
                distance += t.distance;
                active += usize::from(t.hinge_active);
                n += 1;
            }
            sign_step(&mut mask.values, grad.data(), cfg.eta, cfg.epsilon);
        }
        let active_fraction = active as f64 / n as f64;
        history.push(EpochStats {
            epoch,
            mean_loss: loss / n as f64,
            mean_distance: distance / n as f64,
            active_fraction,
            lambda,
        });
        lambda = schedule_lambda(lambda, active_fraction, cfg.lambda_min, cfg.lambda_max);
    }
    Ok(MaskRun { mask, history })
}

/// Masks for several identities with one configuration, keyed by owner.
pub fn train_masks(
    ds: &Dataset,
    identities: &[String],
    pool: &[EmbeddingModel],
    cfg: &TrainConfig,
) -> Result<std::collections::BTreeMap<String, MaskRun>, MaskError> {
    identities
        .par_iter()
        .map(|id| Ok((id.clone(), train_mask(ds, id, pool, cfg)?)))
        .collect()
}

/// Mean team arccos distance between clean and protected versions of each
/// face crop.
pub fn protection_distances(faces: &[Image], mask: &P3Mask, team: &[&dyn Embedder]) -> Result<Vec<f64>, MaskError> {
    faces
        .par_iter()
        .map(|f| Ok(-loss_protect(f, mask, team)?))
        .collect()
}
