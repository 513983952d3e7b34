use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    dataset_gallery, dataset_probes, fr_accuracy, Arch, EmbeddingModel, FrError, Gallery, ARCH_COARSE,
    ARCH_FINE,
};
use crate::imaging::{face_crop, resize_raw};
use crate::numerics::{Graph, Tensor, Var};
use crate::seed;
use crate::synthdata::{Dataset, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolModelSpec {
    pub model_id: String,
    pub arch: String,
    pub seed: u64,
    pub subset_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    /// Initial rate; decays linearly towards zero over the epochs.
    pub learning_rate: f64,
    pub momentum: f64,
}

/// Minimum probe accuracy (percent) for a model to join the pool.
pub const ADMISSION_ACCURACY: f64 = 90.0;
/// Training attempts per pool slot before admission gives up.
pub const ADMISSION_ATTEMPTS: usize = 4;

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

/// Two architectures, each at three (seed, subset) combinations.
pub fn default_pool_specs(seed: u64) -> Vec<PoolModelSpec> {
    pool_specs(seed, ARCH_FINE, ARCH_COARSE)
}

/// Pool layout of [`default_pool_specs`] with the two architectures given.
pub fn pool_specs(seed: u64, fine: &str, coarse: &str) -> Vec<PoolModelSpec> {
    let mut out = Vec::new();
    for (name, arch) in [("fine", fine), ("coarse", coarse)] {
        for (j, frac) in [1.0, 0.85, 0.7].into_iter().enumerate() {
            let model_id = format!("{name}{j}");
            out.push(PoolModelSpec {
                seed: seed::derive_seed(seed, &format!("model/{model_id}")),
                model_id,
                arch: arch.to_string(),
                subset_fraction: frac,
            });
        }
    }
    out
}

/// He-normal weights, zero biases.
fn init_params(shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            if s.len() == 1 {
                return Tensor::zeros(s);
            }
            let fan_in: usize = s[..s.len() - 1].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let n = s.iter().product();
            Tensor::new(s.clone(), (0..n).map(|_| normal.sample(rng)).collect())
                .expect("shape matches")
        })
        .collect()
}

impl EmbeddingModel {
    /// Untrained model with He-normal weights drawn from `seed`.
    pub fn initialized(id: &str, arch: Arch, seed: u64) -> Self {
        let mut rng = seed::stream(seed, "init");
        let params = init_params(&arch.param_shapes(), &mut rng);
        Self {
            id: id.to_string(),
            arch,
            params,
            train_accuracy: 0.0,
        }
    }
}

/// Gallery-seen images of every identity, reduced to a seeded per-identity
/// subset; returns model-sized inputs and class indices.
fn training_set(
    ds: &Dataset,
    input: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, usize)>, FrError> {
    let mut out = Vec::new();
    for (class, ident) in ds.manifest.identities.iter().enumerate() {
        let mut seen = ds.of(&ident.id, Role::GallerySeen);
        seen.shuffle(rng);
        let keep = ((fraction * seen.len() as f64).round() as usize).clamp(1, seen.len());
        for s in &seen[..keep] {
            let face = face_crop(&s.image, Some(s.crop))?;
            let data = resize_raw(face.pixels(), face.dims(), input, input)?;
            out.push((Tensor::new(vec![input, input, face.channels()], data)?, class));
        }
    }
    Ok(out)
}

/// Loss, gradients for every parameter (head last), and whether the
/// prediction was right, for one sample.
fn sample_step(
    model: &EmbeddingModel,
    head: &[Tensor; 2],
    x: &Tensor,
    label: usize,
) -> Result<(f64, Vec<Tensor>, bool), FrError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let params: Vec<Var> = model.params.iter().map(|t| g.leaf(t.clone())).collect();
    let hw = g.leaf(head[0].clone());
    let hb = g.leaf(head[1].clone());
    let emb = model.forward_raw(&mut g, xv, &params)?;
    let d = g.value(emb).len();
    let row = g.reshape(emb, &[1, d])?;
    let logits = g.matmul(row, hw)?;
    let logits = g.reshape(logits, &[head[1].len()])?;
    let logits = g.add(logits, hb)?;
    let lv = g.value(logits).data();
    let predicted = (0..lv.len()).fold(0, |best, i| if lv[i] > lv[best] { i } else { best });
    let loss = g.softmax_cross_entropy(logits, label)?;
    let grads = g.backward(loss)?;
    let mut out: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
    out.push(grads.wrt(hw));
    out.push(grads.wrt(hb));
    Ok((g.value(loss).item(), out, predicted == label))
}

/// Train one pool model with a softmax head over the identities, then drop
/// the head.
pub fn train_pool_model(
    ds: &Dataset,
    spec: &PoolModelSpec,
    opts: &TrainOptions,
) -> Result<EmbeddingModel, FrError> {
    if ds.manifest.identities.len() < 4 {
        return Err(FrError::InvalidParameter(format!(
            "need at least 4 identities, got {}",
            ds.manifest.identities.len()
        )));
    }
    if !(spec.subset_fraction > 0.5 && spec.subset_fraction <= 1.0) {
        return Err(FrError::InvalidParameter(format!(
            "subset fraction {} outside (0.5, 1]",
            spec.subset_fraction
        )));
    }
    if opts.batch == 0 || !(opts.learning_rate > 0.0) {
        return Err(FrError::InvalidParameter("batch and learning rate must be positive".into()));
    }
    let arch: Arch = spec.arch.parse()?;
    let mut rng = seed::stream(spec.seed, "train");
    let data = training_set(ds, arch.input, spec.subset_fraction, &mut rng)?;
    let n_classes = ds.manifest.identities.len();

    let params = init_params(&arch.param_shapes(), &mut rng);
    let dim = arch.embedding_dim();
    let mut model = EmbeddingModel {
        id: spec.model_id.clone(),
        arch,
        params,
        train_accuracy: 0.0,
    };
    let mut head = {
        let mut h = init_params(&[vec![dim, n_classes], vec![n_classes]], &mut rng);
        let b = h.pop().unwrap();
        [h.pop().unwrap(), b]
    };

    let mut velocity: Vec<Tensor> = model
        .params
        .iter()
        .chain(head.iter())
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..opts.epochs {
        let decay = 1.0 - epoch as f64 / opts.epochs as f64;
        order.shuffle(&mut rng);
        let mut correct = 0;
        for batch in order.chunks(opts.batch) {
            let results = batch
                .par_iter()
                .map(|&i| sample_step(&model, &head, &data[i].0, data[i].1))
                .collect::<Result<Vec<_>, FrError>>()?;
            let mut sum: Option<Vec<Tensor>> = None;
            let mut loss = 0.0;
            for (l, grads, hit) in results {
                loss += l;
                correct += usize::from(hit);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                        }
                    }
                }
            }
            if !loss.is_finite() {
                return Err(FrError::Diverged {
                    seed: spec.seed,
                    step,
                    loss,
                });
            }
            let rate = opts.learning_rate * decay / batch.len() as f64;
            let grads = sum.expect("non-empty batch");
            let targets = model.params.iter_mut().chain(head.iter_mut());
            for ((p, v), g) in targets.zip(&mut velocity).zip(&grads) {
                let v = v.data_mut();
                for ((p, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *v = opts.momentum * *v + g;
                    *p -= rate * *v;
                }
            }
            step += 1;
        }
        model.train_accuracy = if data.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / data.len() as f64
        };
    }
    Ok(model)
}

/// A pool model that passed the admission gate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittedModel {
    pub model: EmbeddingModel,
    /// Seed of the attempt that was admitted.
    pub seed: u64,
    pub attempts: usize,
    /// Probe accuracy against the full clean gallery.
    pub probe_accuracy: f64,
}

/// Seed of the given training attempt; the first attempt uses the model's own seed.
pub fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        seed::derive_seed(seed, &format!("retry{attempt}"))
    }
}

/// Train `spec` until a model reaches [`ADMISSION_ACCURACY`] on the probes,
/// re-deriving the seed after each rejected or diverged attempt.
pub fn admit_pool_model(
    ds: &Dataset,
    spec: &PoolModelSpec,
    opts: &TrainOptions,
) -> Result<AdmittedModel, FrError> {
    let faces = dataset_gallery(ds)?;
    let probes = dataset_probes(ds)?;
    let mut best = f64::NAN;
    for attempt in 0..ADMISSION_ATTEMPTS {
        let seed = attempt_seed(spec.seed, attempt);
        let try_spec = PoolModelSpec {
            seed,
            ..spec.clone()
        };
        let model = match train_pool_model(ds, &try_spec, opts) {
            Ok(m) => m,
            Err(FrError::Diverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let gallery = Gallery::build(&model, &faces)?;
        let acc = fr_accuracy(&probes, &model, &gallery)?;
        if acc >= ADMISSION_ACCURACY {
            return Ok(AdmittedModel {
                model,
                seed,
                attempts: attempt + 1,
                probe_accuracy: acc,
            });
        }
        best = best.max(acc);
    }
    Err(FrError::NotAdmitted {
        model_id: spec.model_id.clone(),
        attempts: ADMISSION_ATTEMPTS,
        best,
    })
}

/// Admit every spec, in parallel; output order follows `specs`.
pub fn train_pool(
    ds: &Dataset,
    specs: &[PoolModelSpec],
    opts: &TrainOptions,
) -> Result<Vec<AdmittedModel>, FrError> {
    specs.par_iter().map(|s| admit_pool_model(ds, s, opts)).collect()
}
