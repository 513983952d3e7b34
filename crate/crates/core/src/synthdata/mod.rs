//! Procedural identities and their image variations, written as PPM files
//! with a TOML manifest.
//!
//! An identity is a smooth composition: a two-color vertical background
//! gradient with three soft Gaussian blobs on top. Variations shift, scale
//! and brighten the pattern and add pixel noise.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{load_image, save_image, CropSpec, Image, ImagingError};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;
pub const N_PARAMS: usize = 24;
const N_BLOBS: usize = 3;

const BRIGHTNESS: f64 = 0.15;
const SHIFT: f64 = 0.10;
const NOISE_SIGMA: f64 = 0.02;
const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
/// Half-width of the face region in pattern coordinates; covers every blob
/// center with margin.
const FACE_HALF: f64 = 0.35;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset parameter: {0}")]
    InvalidParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Probe,
    GallerySeen,
    GalleryUnseen,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Probe => "probe",
            Role::GallerySeen => "gallery-seen",
            Role::GalleryUnseen => "gallery-unseen",
        }
    }

    pub fn is_gallery(self) -> bool {
        self != Role::Probe
    }
}

/// `(probe, seen, unseen)` image counts for `n` images of one identity.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let probe = ((0.1 * n as f64).round() as usize).max(1);
    let unseen = ((0.2 * n as f64).round() as usize).max(1);
    (probe, n - probe - unseen, unseen)
}

/// Seeded base pattern of one identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identity {
    pub id: String,
    /// Background top and bottom colors (6), then per blob
    /// `center_x, center_y, radius, r, g, b` in normalized coordinates.
    pub params: Vec<f64>,
}

impl Identity {
    pub fn label(index: usize) -> String {
        format!("id{index}")
    }

    /// Identity `index` of the corpus generated from `seed`.
    ///
    /// Identities come in look-alike pairs (`2k`, `2k + 1`): both draw their
    /// colors and blob layout orientation from a shared family stream, and
    /// the second member's layout is rotated by 60 degrees. Blob positions
    /// and radii are then jittered from the identity's own stream.
    pub fn generate(seed: u64, index: usize) -> Self {
        let id = Self::label(index);
        let mut own = seed::stream(seed, &id);
        let mut family = seed::stream(seed, &format!("family{}", index / 2));
        let mut p = vec![0.0; N_PARAMS];
        for v in &mut p[..6] {
            *v = family.random_range(0.2..0.8);
        }
        // Blob colors keep at least 0.2 contrast against the mean background.
        for b in 0..N_BLOBS {
            for ch in 0..3 {
                let bg = 0.5 * (p[ch] + p[3 + ch]);
                let step = family.random_range(0.2..0.4);
                let c = if family.random_bool(0.5) { bg + step } else { bg - step };
                p[9 + 6 * b + ch] = if (0.05..=0.95).contains(&c) { c } else { 2.0 * bg - c };
            }
        }
        let rotation = family.random_range(0.0..TAU) + (index % 2) as f64 * TAU / 6.0;
        for b in 0..N_BLOBS {
            let angle = rotation + b as f64 * TAU / N_BLOBS as f64;
            p[6 + 6 * b] = 0.5 + 0.25 * angle.cos() + own.random_range(-0.08..0.08);
            p[7 + 6 * b] = 0.5 + 0.25 * angle.sin() + own.random_range(-0.08..0.08);
            p[8 + 6 * b] = own.random_range(0.12..0.20);
        }
        Self { id, params: p }
    }

    /// Pattern color at normalized position `(u, v)`, `u` horizontal.
    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        let p = &self.params;
        let t = v.clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for ch in 0..3 {
            c[ch] = p[ch] + t * (p[3 + ch] - p[ch]);
        }
        for b in 0..N_BLOBS {
            let q = &p[6 + 6 * b..12 + 6 * b];
            let d2 = (u - q[0]).powi(2) + (v - q[1]).powi(2);
            let alpha = (-d2 / (2.0 * q[2] * q[2])).exp();
            for ch in 0..3 {
                c[ch] += alpha * (q[3 + ch] - c[ch]);
            }
        }
        c
    }

    /// The unvaried pattern at `size x size`.
    pub fn base_image(&self, size: usize) -> Result<Image, ImagingError> {
        render(self, &Variation::identity(), None, size)
    }
}

/// Geometric and photometric change applied to a base pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variation {
    pub brightness: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
}

impl Variation {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            scale: 1.0,
        }
    }

    /// Square box around the face region of an image rendered with this
    /// variation, as a face detector would report it. Shifted inward if it
    /// would leave the image.
    pub fn face_box(&self, size: usize) -> CropSpec {
        let n = size as f64;
        let side = ((2.0 * FACE_HALF * self.scale * n).round() as usize).clamp(1, size);
        let place = |shift: f64| {
            let start = ((0.5 + shift) * n - side as f64 / 2.0).round();
            (start.max(0.0) as usize).min(size - side)
        };
        CropSpec {
            top: place(self.shift_y),
            left: place(self.shift_x),
            side,
        }
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            brightness: rng.random_range(-BRIGHTNESS..=BRIGHTNESS),
            shift_x: rng.random_range(-SHIFT..=SHIFT),
            shift_y: rng.random_range(-SHIFT..=SHIFT),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        }
    }
}

fn render(
    identity: &Identity,
    var: &Variation,
    noise: Option<&mut ChaCha8Rng>,
    size: usize,
) -> Result<Image, ImagingError> {
    let mut px = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 + 0.5) / size as f64 - 0.5 - var.shift_x) / var.scale + 0.5;
            let v = ((y as f64 + 0.5) / size as f64 - 0.5 - var.shift_y) / var.scale + 0.5;
            px.extend(identity.color(u, v).iter().map(|c| c + var.brightness));
        }
    }
    if let Some(rng) = noise {
        let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        px.iter_mut().for_each(|p| *p += normal.sample(rng));
    }
    Ok(Image::from_clamped(size, size, CHANNELS, px)?.quantized())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the dataset root.
    pub path: String,
    pub identity: String,
    pub role: Role,
    pub crop: CropSpec,
    pub variation: Variation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub images_per_identity: usize,
    pub identities: Vec<Identity>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn identity_ids(&self) -> Vec<String> {
        self.identities.iter().map(|i| i.id.clone()).collect()
    }

    /// Position of `id` in the identity list, the class index used in training.
    pub fn class_of(&self, id: &str) -> Option<usize> {
        self.identities.iter().position(|i| i.id == id)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let m: Self = toml::from_str(text).map_err(|e| SynthError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(SynthError::Manifest(format!(
                "unsupported version {}, expected {MANIFEST_VERSION}",
                m.version
            )));
        }
        m.validate()?;
        Ok(m)
    }

    /// Unique paths, known identity labels, and the split rule per identity.
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut paths: Vec<&str> = self.images.iter().map(|r| r.path.as_str()).collect();
        paths.sort_unstable();
        if let Some(w) = paths.windows(2).find(|w| w[0] == w[1]) {
            return Err(SynthError::Manifest(format!("duplicate path {}", w[0])));
        }
        for ident in &self.identities {
            let count = |role| {
                self.images
                    .iter()
                    .filter(|r| r.identity == ident.id && r.role == role)
                    .count()
            };
            let got = (count(Role::Probe), count(Role::GallerySeen), count(Role::GalleryUnseen));
            let n = got.0 + got.1 + got.2;
            if got != split_counts(n) {
                return Err(SynthError::Manifest(format!(
                    "identity {} has role counts {got:?}, expected {:?}",
                    ident.id,
                    split_counts(n)
                )));
            }
        }
        if let Some(r) = self.images.iter().find(|r| self.class_of(&r.identity).is_none()) {
            return Err(SynthError::Manifest(format!("unknown identity {}", r.identity)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImageSample {
    pub image: Image,
    pub identity: String,
    pub role: Role,
    pub crop: CropSpec,
    pub variation: Variation,
}

/// A manifest together with its decoded images, `samples[i]` matching
/// `manifest.images[i]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(move |s| s.role == role)
    }

    pub fn of(&self, identity: &str, role: Role) -> Vec<&ImageSample> {
        self.samples
            .iter()
            .filter(|s| s.identity == identity && s.role == role)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub size: usize,
    pub seed: u64,
}

impl GenParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_identities < 4 {
            return Err(SynthError::InvalidParameter(format!(
                "need at least 4 identities, got {}",
                self.n_identities
            )));
        }
        if self.images_per_identity < 10 {
            return Err(SynthError::InvalidParameter(format!(
                "need at least 10 images per identity, got {}",
                self.images_per_identity
            )));
        }
        if self.size < 16 {
            return Err(SynthError::InvalidParameter(format!(
                "image size must be at least 16, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Render the whole corpus in memory. Each identity draws from its own
/// stream, so the parallel map cannot change the result.
pub fn render_dataset(p: &GenParams) -> Result<Dataset, SynthError> {
    p.validate()?;
    let (n_probe, n_seen, _) = split_counts(p.images_per_identity);
    let per_identity: Vec<(Identity, Vec<ImageSample>)> = (0..p.n_identities)
        .into_par_iter()
        .map(|i| {
            let id = Identity::label(i);
            let ident = Identity::generate(p.seed, i);
            let mut rng = seed::stream(p.seed, &format!("{id}/images"));
            let samples = (0..p.images_per_identity)
                .map(|k| {
                    let role = if k < n_probe {
                        Role::Probe
                    } else if k < n_probe + n_seen {
                        Role::GallerySeen
                    } else {
                        Role::GalleryUnseen
                    };
                    let variation = Variation::sample(&mut rng);
                    let image = render(&ident, &variation, Some(&mut rng), p.size)?;
                    let crop = variation.face_box(p.size);
                    Ok(ImageSample {
                        image,
                        identity: id.clone(),
                        role,
                        crop,
                        variation,
                    })
                })
                .collect::<Result<Vec<_>, ImagingError>>()?;
            Ok((ident, samples))
        })
        .collect::<Result<_, SynthError>>()?;

    let mut identities = Vec::new();
    let mut images = Vec::new();
    let mut samples = Vec::new();
    for (ident, group) in per_identity {
        for (k, s) in group.into_iter().enumerate() {
            images.push(ImageRecord {
                path: format!("images/{}_{k:03}.ppm", ident.id),
                identity: s.identity.clone(),
                role: s.role,
                crop: s.crop,
                variation: s.variation,
            });
            samples.push(s);
        }
        identities.push(ident);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: p.seed,
        size: p.size,
        images_per_identity: p.images_per_identity,
        identities,
        images,
    };
    manifest.validate()?;
    Ok(Dataset { manifest, samples })
}

/// Write images and the manifest below `root`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<(), SynthError> {
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    for (rec, s) in ds.manifest.images.iter().zip(&ds.samples) {
        save_image(&s.image, root.join(&rec.path))?;
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, ds.manifest.to_toml()).map_err(io_err(&path))
}

pub fn gen_dataset(p: &GenParams, root: &Path) -> Result<Dataset, SynthError> {
    let ds = render_dataset(p)?;
    write_dataset(&ds, root)?;
    Ok(ds)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest, SynthError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    DatasetManifest::from_toml(&text)
}

pub fn load_dataset(root: &Path) -> Result<Dataset, SynthError> {
    let manifest = load_manifest(root)?;
    let samples = manifest
        .images
        .iter()
        .map(|rec| {
            let path: PathBuf = root.join(&rec.path);
            Ok(ImageSample {
                image: load_image(&path)?,
                identity: rec.identity.clone(),
                role: rec.role,
                crop: rec.crop,
                variation: rec.variation,
            })
        })
        .collect::<Result<_, SynthError>>()?;
    Ok(Dataset { manifest, samples })
}
