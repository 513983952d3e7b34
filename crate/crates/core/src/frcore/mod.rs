//! Embedding models, galleries and nearest-neighbor identification.

mod arch;
mod checkpoint;
mod train;

pub use arch::{Arch, Layer, ARCH_COARSE, ARCH_FINE};
pub use checkpoint::{decode_model, encode_model, load_model, save_model, CHECKPOINT_VERSION};
pub use train::{
    admit_pool_model, attempt_seed, default_pool_specs, pool_specs, train_pool, train_pool_model, AdmittedModel,
    PoolModelSpec, TrainOptions, ADMISSION_ACCURACY, ADMISSION_ATTEMPTS,
};

use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{face_crop, resize_raw, Image, ImagingError};
use crate::numerics::{Graph, NumericsError, Tensor, Var};
use crate::synthdata::{Dataset, Role};

/// Allowed deviation from unit norm in [`arccos_dist`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FrError {
    #[error("architecture {0}")]
    Arch(String),
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("embedding norm {norm} is not unit")]
    NotUnit { norm: f64 },
    #[error("embedding lengths differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("training diverged (seed {seed}, step {step}): loss {loss}")]
    Diverged { seed: u64, step: usize, loss: f64 },
    #[error("model {model_id} not admitted after {attempts} attempts (best probe accuracy {best}%)")]
    NotAdmitted {
        model_id: String,
        attempts: usize,
        best: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Anything that maps a model-sized input to a unit embedding inside a graph.
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    /// Side of the square input the model expects.
    fn input_size(&self) -> usize;

    /// Unit-norm embedding of an `[input, input, c]` value.
    fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub id: String,
    pub arch: Arch,
    /// Weight and bias per parametrized layer, in layer order.
    pub params: Vec<Tensor>,
    /// Training-set accuracy of the discarded classifier head, final epoch.
    pub train_accuracy: f64,
}

impl EmbeddingModel {
    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    /// Unnormalized embedding with parameters supplied as graph values.
    pub(crate) fn forward_raw(
        &self,
        g: &mut Graph,
        x: Var,
        params: &[Var],
    ) -> Result<Var, NumericsError> {
        let mut h = g.add_scalar(x, -0.5);
        let mut p = params.iter();
        for layer in &self.arch.layers {
            h = match *layer {
                Layer::Conv { k, stride, .. } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    g.conv2d(h, w, b, stride, k / 2)?
                }
                Layer::Relu => g.relu(h),
                Layer::GlobalAvgPool => g.global_avg_pool(h)?,
                Layer::Dense { out } => {
                    let (w, b) = (*p.next().unwrap(), *p.next().unwrap());
                    let n = g.value(h).len();
                    let flat = g.reshape(h, &[1, n])?;
                    let y = g.matmul(flat, w)?;
                    let y = g.reshape(y, &[out])?;
                    g.add(y, b)?
                }
            };
        }
        Ok(h)
    }
}

impl Embedder for EmbeddingModel {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn input_size(&self) -> usize {
        self.arch.input
    }

    fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let params: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let raw = self.forward_raw(g, x, &params)?;
        Ok(g.l2_normalize(raw))
    }
}

/// Unit embedding of a face crop, resized to the model input first.
pub fn embed(model: &dyn Embedder, face: &Image) -> Result<Vec<f64>, FrError> {
    let n = model.input_size();
    let data = resize_raw(face.pixels(), face.dims(), n, n)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![n, n, face.channels()], data)?);
    let e = model.embed_var(&mut g, x)?;
    Ok(g.value(e).data().to_vec())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Angle between two unit vectors, in `[0, pi]`.
pub fn arccos_dist(e1: &[f64], e2: &[f64]) -> Result<f64, FrError> {
    if e1.len() != e2.len() {
        return Err(FrError::DimMismatch(e1.len(), e2.len()));
    }
    for e in [e1, e2] {
        let n = norm(e);
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(FrError::NotUnit { norm: n });
        }
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0).acos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub embedding: Vec<f64>,
    pub label: String,
    pub role: Role,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gallery {
    pub entries: Vec<GalleryEntry>,
}

impl Gallery {
    /// Embed labelled face crops with one model; entry order follows `faces`.
    pub fn build(model: &dyn Embedder, faces: &[(Image, String, Role)]) -> Result<Self, FrError> {
        let entries = faces
            .par_iter()
            .map(|(img, label, role)| {
                Ok(GalleryEntry {
                    embedding: embed(model, img)?,
                    label: label.clone(),
                    role: *role,
                })
            })
            .collect::<Result<_, FrError>>()?;
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the closest entry; the lowest index wins ties.
    pub fn nearest(&self, probe: &[f64]) -> Result<usize, FrError> {
        if self.entries.is_empty() {
            return Err(FrError::EmptyGallery);
        }
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let d = arccos_dist(probe, &e.embedding)?;
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }
}

pub fn fr_identify(probe: &Image, model: &dyn Embedder, gallery: &Gallery) -> Result<String, FrError> {
    if gallery.is_empty() {
        return Err(FrError::EmptyGallery);
    }
    let e = embed(model, probe)?;
    Ok(gallery.entries[gallery.nearest(&e)?].label.clone())
}

/// Correctly identified probes and probe count.
pub fn fr_counts(
    probes: &[(Image, String)],
    model: &dyn Embedder,
    gallery: &Gallery,
) -> Result<(usize, usize), FrError> {
    let hits = probes
        .par_iter()
        .map(|(img, label)| Ok(usize::from(&fr_identify(img, model, gallery)? == label)))
        .collect::<Result<Vec<_>, FrError>>()?;
    Ok((hits.iter().sum(), probes.len()))
}

/// Percentage of probes identified as their true label.
pub fn fr_accuracy(
    probes: &[(Image, String)],
    model: &dyn Embedder,
    gallery: &Gallery,
) -> Result<f64, FrError> {
    let (hits, total) = fr_counts(probes, model, gallery)?;
    if total == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Clean face crops of every gallery image (seen and unseen), in manifest order.
pub fn dataset_gallery(ds: &Dataset) -> Result<Vec<(Image, String, Role)>, FrError> {
    ds.samples
        .iter()
        .filter(|s| s.role.is_gallery())
        .map(|s| Ok((face_crop(&s.image, Some(s.crop))?, s.identity.clone(), s.role)))
        .collect()
}

/// Face crops of every probe with its true label, in manifest order.
pub fn dataset_probes(ds: &Dataset) -> Result<Vec<(Image, String)>, FrError> {
    ds.with_role(Role::Probe)
        .map(|s| Ok((face_crop(&s.image, Some(s.crop))?, s.identity.clone())))
        .collect()
}

#[cfg(test)]
mod tests;
