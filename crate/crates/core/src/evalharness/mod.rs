//! Protection experiments over a trained pool: protected galleries, unmask
//! restore, filtering adversaries, and a per-image reference optimizer.

mod report;

pub use report::{config_hash, emit_report, render_report, ReportFormat};

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frcore::{dataset_probes, fr_identify, EmbeddingModel, Embedder, FrError, Gallery};
use crate::imaging::{face_crop, gaussian_filter, jpeg_filter, median_filter, ssim, Image, ImagingError};
use crate::maskgen::{train_mask_on, MaskError, P3Mask, TrainConfig};
use crate::protect::{mask_apply, saturated_pixels, unmask, ProtectError};
use crate::synthdata::{Dataset, ImageSample};

/// Cap on per-image optimization steps.
pub const PER_IMAGE_MAX_STEPS: usize = 200;
/// Minimum clean-gallery accuracy (percent) for a filter to be evaluated.
pub const FILTER_GATE_ACCURACY: f64 = 80.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no mask for protected identity {0:?}")]
    MissingMask(String),
    #[error("mask owner {owner:?} is not in the dataset")]
    UnknownOwner { owner: String },
    #[error("need ≥ 2 masks, got {0}")]
    TooFewMasks(usize),
    #[error("invalid filter: {0}")]
    Filter(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Fr(#[from] FrError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Protect(#[from] ProtectError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Accuracy of one model on one slice of probes, kept as counts so the
/// accuracy and PSR columns always sum to exactly 100.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub model_id: String,
    /// Whether the model took part in mask training.
    pub known: bool,
    /// `None` for the aggregate over all evaluated identities.
    pub identity: Option<String>,
    pub hits: usize,
    pub total: usize,
}

impl Cell {
    /// Accuracy in hundredths of a percent, rounded half up.
    pub fn accuracy_bp(&self) -> u64 {
        if self.total == 0 {
            return 0;
        }
        let (c, t) = (self.hits as u64, self.total as u64);
        (20000 * c + t) / (2 * t)
    }

    pub fn psr_bp(&self) -> u64 {
        10000 - self.accuracy_bp()
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy_bp() as f64 / 100.0
    }

    pub fn psr(&self) -> f64 {
        self.psr_bp() as f64 / 100.0
    }
}

/// Two-decimal rendering of a hundredths value.
pub fn format_bp(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub cells: Vec<Cell>,
}

impl Scenario {
    /// Aggregate cell of each model, in pool order.
    pub fn totals(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.identity.is_none())
    }

    pub fn total_for(&self, model_id: &str) -> Option<&Cell> {
        self.totals().find(|c| c.model_id == model_id)
    }

    /// Mean and population standard deviation of aggregate PSR over the
    /// selected models.
    pub fn psr_stats(&self, known: Option<bool>) -> (f64, f64) {
        let v: Vec<f64> = self
            .totals()
            .filter(|c| known.is_none_or(|k| c.known == k))
            .map(Cell::psr)
            .collect();
        mean_std(&v)
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimStats {
    pub mean: f64,
    pub min: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Saturation {
    pub pixels: usize,
    pub crop_pixels: usize,
    /// Gallery images with at least one saturated pixel.
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    /// Hex digest of the configuration that produced the report.
    pub config_hash: String,
    pub scenarios: Vec<Scenario>,
    pub ssim: Option<SsimStats>,
    pub saturation: Option<Saturation>,
    pub gates: Vec<Gate>,
    /// Wall time; not emitted, so reports stay byte-stable.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl EvalReport {
    pub fn scenario(&self, label: &str) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.label == label)
    }

    pub fn gates_pass(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }
}

/// A transformation the intruder runs over gallery images before embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Filter {
    Identity,
    Jpeg { quality: u8 },
    Gaussian { sigma: f64 },
    Median { k: usize },
}

impl Filter {
    pub fn apply(&self, x: &Image) -> Result<Image, EvalError> {
        Ok(match *self {
            Filter::Identity => x.clone(),
            Filter::Jpeg { quality } => jpeg_filter(x, quality)?,
            Filter::Gaussian { sigma } => gaussian_filter(x, sigma)?,
            Filter::Median { k } => median_filter(x, k)?,
        })
    }

    pub fn label(&self) -> String {
        match *self {
            Filter::Identity => "identity".into(),
            Filter::Jpeg { quality } => format!("jpeg-q{quality}"),
            Filter::Gaussian { sigma } => format!("gaussian-s{sigma}"),
            Filter::Median { k } => format!("median-k{k}"),
        }
    }
}

impl std::str::FromStr for Filter {
    type Err = EvalError;

    /// `identity`, `jpeg:75`, `gaussian:1.0` or `median:3`.
    fn from_str(s: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::Filter(s.to_string());
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        Ok(match kind {
            "identity" if arg.is_empty() => Filter::Identity,
            "jpeg" => Filter::Jpeg {
                quality: arg.parse().map_err(|_| bad())?,
            },
            "gaussian" => Filter::Gaussian {
                sigma: arg.parse().map_err(|_| bad())?,
            },
            "median" => Filter::Median {
                k: arg.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        })
    }
}

/// How the gallery images of masked identities are prepared.
#[derive(Clone, Copy)]
enum Treatment<'a> {
    Clean,
    Protected,
    /// Protect with the owner's mask, then unmask with the mask of
    /// `swap[owner]` (the owner itself for a correct key).
    Restored(&'a BTreeMap<String, String>),
}

struct Setup<'a> {
    ds: &'a Dataset,
    masks: &'a BTreeMap<String, P3Mask>,
    probes: Vec<(Image, String)>,
}

impl<'a> Setup<'a> {
    fn new(ds: &'a Dataset, masks: &'a BTreeMap<String, P3Mask>) -> Result<Self, EvalError> {
        let known = ds.manifest.identity_ids();
        if let Some(owner) = masks.keys().find(|o| !known.contains(o)) {
            return Err(EvalError::UnknownOwner { owner: owner.clone() });
        }
        let mut probes = dataset_probes(ds)?;
        if !masks.is_empty() {
            probes.retain(|(_, id)| masks.contains_key(id));
        }
        Ok(Self { ds, masks, probes })
    }

    fn prepared(&self, s: &ImageSample, how: Treatment, filter: Filter) -> Result<Image, EvalError> {
        let Some(mask) = self.masks.get(&s.identity) else {
            return Ok(face_crop(&s.image, Some(s.crop))?);
        };
        let full = match how {
            Treatment::Clean => s.image.clone(),
            Treatment::Protected => mask_apply(&s.image, mask, Some(s.crop))?,
            Treatment::Restored(swap) => {
                let key = &self.masks[&swap[&s.identity]];
                unmask(&mask_apply(&s.image, mask, Some(s.crop))?, key, Some(s.crop))?
            }
        };
        filter.apply(&face_crop(&full, Some(s.crop))?)
    }

    fn gallery_faces(&self, how: Treatment, filter: Filter) -> Result<Vec<(Image, String, crate::synthdata::Role)>, EvalError> {
        self.ds
            .samples
            .par_iter()
            .filter(|s| s.role.is_gallery())
            .map(|s| Ok((self.prepared(s, how, filter)?, s.identity.clone(), s.role)))
            .collect()
    }

    fn scenario(
        &self,
        label: &str,
        pool: &[EmbeddingModel],
        team: &[String],
        how: Treatment,
        filter: Filter,
    ) -> Result<Scenario, EvalError> {
        let faces = self.gallery_faces(how, filter)?;
        let mut cells = Vec::new();
        for model in pool {
            let gallery = Gallery::build(model, &faces)?;
            let hits = self
                .probes
                .par_iter()
                .map(|(img, label)| Ok(&fr_identify(img, model, &gallery)? == label))
                .collect::<Result<Vec<bool>, FrError>>()?;
            let known = team.contains(&model.id);
            let mut by_id: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for ((_, id), &hit) in self.probes.iter().zip(&hits) {
                let e = by_id.entry(id.as_str()).or_default();
                e.0 += usize::from(hit);
                e.1 += 1;
            }
            cells.push(Cell {
                model_id: model.id.clone(),
                known,
                identity: None,
                hits: hits.iter().filter(|&&h| h).count(),
                total: hits.len(),
            });
            cells.extend(by_id.into_iter().map(|(id, (h, t))| Cell {
                model_id: model.id.clone(),
                known,
                identity: Some(id.to_string()),
                hits: h,
                total: t,
            }));
        }
        Ok(Scenario {
            label: label.to_string(),
            cells,
        })
    }

    fn ssim_stats(&self) -> Result<Option<SsimStats>, EvalError> {
        let values = self
            .ds
            .samples
            .par_iter()
            .filter(|s| s.role.is_gallery() && self.masks.contains_key(&s.identity))
            .map(|s| {
                let clean = face_crop(&s.image, Some(s.crop))?;
                let protected = self.prepared(s, Treatment::Protected, Filter::Identity)?;
                Ok(ssim(&clean, &protected)?)
            })
            .collect::<Result<Vec<f64>, EvalError>>()?;
        if values.is_empty() {
            return Ok(None);
        }
        let (mean, std) = mean_std(&values);
        Ok(Some(SsimStats {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            std,
            count: values.len(),
        }))
    }

    fn saturation(&self) -> Result<Saturation, EvalError> {
        let counts = self
            .ds
            .samples
            .par_iter()
            .filter(|s| s.role.is_gallery() && self.masks.contains_key(&s.identity))
            .map(|s| {
                let n = saturated_pixels(&s.image, &self.masks[&s.identity], Some(s.crop))?;
                Ok((n, s.crop.side * s.crop.side * s.image.channels()))
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(Saturation {
            pixels: counts.iter().map(|c| c.0).sum(),
            crop_pixels: counts.iter().map(|c| c.1).sum(),
            images: counts.iter().filter(|c| c.0 > 0).count(),
        })
    }
}

fn timed<F: FnOnce() -> Result<EvalReport, EvalError>>(f: F) -> Result<EvalReport, EvalError> {
    let start = Instant::now();
    let mut r = f()?;
    r.runtime_secs = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Gallery images of masked identities protected, everyone else clean,
/// probes clean. Accuracy is over the probes of masked identities, or of
/// every identity when no masks are given.
pub fn run_protection_eval(
    ds: &Dataset,
    masks: &BTreeMap<String, P3Mask>,
    pool: &[EmbeddingModel],
    team: &[String],
) -> Result<EvalReport, EvalError> {
    timed(|| {
        let setup = Setup::new(ds, masks)?;
        let scenario = setup.scenario("protected", pool, team, Treatment::Protected, Filter::Identity)?;
        Ok(EvalReport {
            title: "protection".into(),
            scenarios: vec![scenario],
            ssim: setup.ssim_stats()?,
            saturation: Some(setup.saturation()?),
            ..EvalReport::default()
        })
    })
}

/// Each owner's key paired with the next owner's (cyclic, id order).
pub fn wrong_keys(masks: &BTreeMap<String, P3Mask>) -> BTreeMap<String, String> {
    let owners: Vec<&String> = masks.keys().collect();
    owners
        .iter()
        .enumerate()
        .map(|(i, o)| ((*o).clone(), owners[(i + 1) % owners.len()].clone()))
        .collect()
}

/// No protection, protected, unmasked with the right key, and unmasked with
/// another owner's key.
pub fn run_unmask_eval(
    ds: &Dataset,
    masks: &BTreeMap<String, P3Mask>,
    pool: &[EmbeddingModel],
    team: &[String],
) -> Result<EvalReport, EvalError> {
    if masks.len() < 2 {
        return Err(EvalError::TooFewMasks(masks.len()));
    }
    timed(|| {
        let setup = Setup::new(ds, masks)?;
        let right: BTreeMap<String, String> = masks.keys().map(|k| (k.clone(), k.clone())).collect();
        let wrong = wrong_keys(masks);
        let scenarios = vec![
            setup.scenario("no-protection", pool, team, Treatment::Clean, Filter::Identity)?,
            setup.scenario("protected", pool, team, Treatment::Protected, Filter::Identity)?,
            setup.scenario("unmasked-correct", pool, team, Treatment::Restored(&right), Filter::Identity)?,
            setup.scenario("unmasked-wrong", pool, team, Treatment::Restored(&wrong), Filter::Identity)?,
        ];
        Ok(EvalReport {
            title: "unmask".into(),
            scenarios,
            ssim: setup.ssim_stats()?,
            saturation: Some(setup.saturation()?),
            ..EvalReport::default()
        })
    })
}

/// For each filter: a clean-gallery calibration scenario and the filtered
/// protected scenario. The gate requires every model to keep at least
/// [`FILTER_GATE_ACCURACY`] on the filtered clean gallery.
pub fn run_adaptive_eval(
    ds: &Dataset,
    masks: &BTreeMap<String, P3Mask>,
    pool: &[EmbeddingModel],
    team: &[String],
    filters: &[Filter],
) -> Result<EvalReport, EvalError> {
    timed(|| {
        let setup = Setup::new(ds, masks)?;
        let mut scenarios = vec![setup.scenario("protected/identity", pool, team, Treatment::Protected, Filter::Identity)?];
        let mut gates = Vec::new();
        for f in filters {
            let label = f.label();
            let clean = setup.scenario(&format!("clean/{label}"), pool, team, Treatment::Clean, *f)?;
            let worst = clean.totals().map(Cell::accuracy).fold(f64::INFINITY, f64::min);
            gates.push(Gate {
                name: format!("filter-calibration/{label}"),
                passed: worst >= FILTER_GATE_ACCURACY,
                detail: format!("lowest clean accuracy {worst:.2} (need {FILTER_GATE_ACCURACY:.2})"),
            });
            scenarios.push(clean);
            scenarios.push(setup.scenario(&format!("protected/{label}"), pool, team, Treatment::Protected, *f)?);
        }
        Ok(EvalReport {
            title: "adaptive".into(),
            scenarios,
            gates,
            ..EvalReport::default()
        })
    })
}

/// Epochs and steps per epoch of the per-image reference for an identity
/// with `n_seen` training images: the universal run's batches per epoch,
/// with whole epochs kept within `PER_IMAGE_MAX_STEPS`.
pub fn per_image_schedule(cfg: &TrainConfig, n_seen: usize) -> (usize, usize) {
    let per_epoch = n_seen.div_ceil(cfg.batch.max(1));
    if per_epoch == 0 {
        return (0, 0);
    }
    (cfg.epochs.min(PER_IMAGE_MAX_STEPS / per_epoch), per_epoch)
}

/// Total optimization steps of the per-image reference.
pub fn per_image_steps(cfg: &TrainConfig, n_seen: usize) -> usize {
    let (epochs, per_epoch) = per_image_schedule(cfg, n_seen);
    epochs * per_epoch
}

/// The sign-gradient update run on one face crop's own perturbation, at
/// crop resolution, under the same loss and budget; returns the protected
/// crop. Each epoch takes as many single-image steps as the universal run
/// has batches, so the SSIM weight is rescheduled at the same cadence.
pub fn per_image_baseline(
    face: &Image,
    owner: &str,
    team: &[&dyn Embedder],
    cfg: &TrainConfig,
    n_seen: usize,
) -> Result<(Image, P3Mask), EvalError> {
    let (epochs, per_epoch) = per_image_schedule(cfg, n_seen);
    let single = TrainConfig {
        batch: 1,
        epochs,
        mask_size: face.height(),
        ..cfg.clone()
    };
    let copies = vec![face.clone(); per_epoch.max(1)];
    let run = train_mask_on(&copies, owner, team, &single)?;
    let protected = mask_apply(face, &run.mask, None)?;
    Ok((protected, run.mask))
}
