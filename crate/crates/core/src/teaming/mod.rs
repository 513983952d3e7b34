//! Team selection by focal diversity: how decorrelated the members' failures
//! are, measured with each member in turn as the focal model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frcore::{fr_identify, EmbeddingModel, Embedder, FrError, Gallery};
use crate::imaging::{face_crop, Image};
use crate::synthdata::{Dataset, Role};

#[derive(Debug, Error)]
pub enum TeamError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("team size {size} outside [2, {pool}]")]
    TeamSize { size: usize, pool: usize },
    #[error("no failure profile for model {0:?}")]
    MissingProfile(String),
    #[error("focal model {0:?} is not in the team")]
    FocalNotInTeam(String),
    #[error("model {0:?} appears twice")]
    Duplicate(String),
    #[error(transparent)]
    Fr(#[from] FrError),
}

/// Validation images one model misidentifies, as indices into the
/// validation list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureProfile {
    pub model_id: String,
    pub negatives: BTreeSet<usize>,
    pub validation_size: usize,
}

/// Indices of `validation` entries that `model` labels wrongly.
pub fn negative_samples(
    model: &dyn Embedder,
    validation: &[(Image, String)],
    gallery: &Gallery,
) -> Result<FailureProfile, TeamError> {
    if validation.is_empty() {
        return Err(TeamError::EmptyValidation);
    }
    let wrong = validation
        .par_iter()
        .map(|(img, label)| Ok(&fr_identify(img, model, gallery)? != label))
        .collect::<Result<Vec<bool>, FrError>>()?;
    Ok(FailureProfile {
        model_id: model.model_id().to_string(),
        negatives: (0..wrong.len()).filter(|&i| wrong[i]).collect(),
        validation_size: validation.len(),
    })
}

/// Gallery of gallery-seen crops and the validation set (probe and
/// gallery-unseen crops with labels), both in manifest order.
pub fn validation_split(ds: &Dataset) -> Result<(Vec<(Image, String, Role)>, Vec<(Image, String)>), TeamError> {
    let mut gallery = Vec::new();
    let mut validation = Vec::new();
    for s in &ds.samples {
        let face = face_crop(&s.image, Some(s.crop)).map_err(FrError::from)?;
        match s.role {
            Role::GallerySeen => gallery.push((face, s.identity.clone(), s.role)),
            Role::Probe | Role::GalleryUnseen => validation.push((face, s.identity.clone())),
        }
    }
    Ok((gallery, validation))
}

/// Failure profile of every pool model on the dataset's validation split.
pub fn pool_profiles(ds: &Dataset, pool: &[EmbeddingModel]) -> Result<Vec<FailureProfile>, TeamError> {
    let (faces, validation) = validation_split(ds)?;
    pool.iter()
        .map(|m| {
            let gallery = Gallery::build(m, &faces)?;
            negative_samples(m, &validation, &gallery)
        })
        .collect()
}

/// Correlation of the other members' failures on the focal model's negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalLambda {
    pub focal: String,
    pub lambda: f64,
    /// Set when the focal model has no negatives, in which case `lambda` is 0.
    pub never_fails: bool,
}

fn profile_map<'a>(profiles: &'a [FailureProfile]) -> BTreeMap<&'a str, &'a FailureProfile> {
    profiles.iter().map(|p| (p.model_id.as_str(), p)).collect()
}

fn lookup<'a>(map: &BTreeMap<&str, &'a FailureProfile>, id: &str) -> Result<&'a FailureProfile, TeamError> {
    map.get(id).copied().ok_or_else(|| TeamError::MissingProfile(id.to_string()))
}

/// `lambda` for `focal` within `team`.
///
/// Over the focal negatives, `n[i]` counts samples on which exactly `i` of
/// the other `S - 1` members also fail. For `S = 2` this is the partner's
/// failure rate on those samples; otherwise it is the ratio of the
/// pair-weighted to the single-weighted co-failure moments. All arithmetic
/// is on integer counts until the final division.
pub fn lambda_focal(team: &[String], focal: &str, profiles: &[FailureProfile]) -> Result<FocalLambda, TeamError> {
    let map = profile_map(profiles);
    if !team.iter().any(|t| t == focal) {
        return Err(TeamError::FocalNotInTeam(focal.to_string()));
    }
    let s = team.len();
    let f = lookup(&map, focal)?;
    let others = team
        .iter()
        .filter(|t| t.as_str() != focal)
        .map(|t| lookup(&map, t))
        .collect::<Result<Vec<_>, _>>()?;
    if f.negatives.is_empty() {
        return Ok(FocalLambda {
            focal: focal.to_string(),
            lambda: 0.0,
            never_fails: true,
        });
    }
    let mut counts = vec![0u64; s];
    for n in &f.negatives {
        let i = others.iter().filter(|o| o.negatives.contains(n)).count();
        counts[i] += 1;
    }
    let total: u64 = counts.iter().sum();
    let lambda = if s == 2 {
        counts[1] as f64 / total as f64
    } else {
        // p1w = sum i/(S-1) p_i, p2w = sum i(i-1)/((S-1)(S-2)) p_i.
        let n1: u64 = counts.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        let n2: u64 = counts.iter().enumerate().map(|(i, &c)| (i * i.saturating_sub(1)) as u64 * c).sum();
        if n1 == 0 {
            0.0
        } else {
            n2 as f64 / (n1 * (s as u64 - 2)) as f64
        }
    };
    Ok(FocalLambda {
        focal: focal.to_string(),
        lambda,
        never_fails: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Member ids, sorted.
    pub team: Vec<String>,
    pub focal: Vec<FocalLambda>,
    pub d_focal: f64,
}

/// Mean of `1 - lambda` with each member as focal model.
pub fn focal_diversity(team: &[String], profiles: &[FailureProfile]) -> Result<DiversityReport, TeamError> {
    let mut sorted = team.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(TeamError::Duplicate(w[0].clone()));
    }
    if sorted.len() < 2 {
        return Err(TeamError::TeamSize {
            size: sorted.len(),
            pool: profiles.len(),
        });
    }
    let focal = sorted
        .iter()
        .map(|f| lambda_focal(&sorted, f, profiles))
        .collect::<Result<Vec<_>, _>>()?;
    let d_focal = focal.iter().map(|l| 1.0 - l.lambda).sum::<f64>() / focal.len() as f64;
    Ok(DiversityReport {
        team: sorted,
        focal,
        d_focal,
    })
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Every size-`size` team from the profiled pool, most diverse first; ties
/// keep the lexicographically smaller sorted id list first.
pub fn rank_teams(profiles: &[FailureProfile], size: usize) -> Result<Vec<DiversityReport>, TeamError> {
    if size < 2 || size > profiles.len() {
        return Err(TeamError::TeamSize {
            size,
            pool: profiles.len(),
        });
    }
    let mut ids: Vec<String> = profiles.iter().map(|p| p.model_id.clone()).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(TeamError::Duplicate(w[0].clone()));
    }
    let mut reports = combinations(ids.len(), size)
        .par_iter()
        .map(|c| {
            let team: Vec<String> = c.iter().map(|&i| ids[i].clone()).collect();
            focal_diversity(&team, profiles)
        })
        .collect::<Result<Vec<_>, _>>()?;
    reports.sort_by(|a, b| b.d_focal.total_cmp(&a.d_focal).then_with(|| a.team.cmp(&b.team)));
    Ok(reports)
}

/// The most diverse team of `size` members.
pub fn select_team(profiles: &[FailureProfile], size: usize) -> Result<DiversityReport, TeamError> {
    Ok(rank_teams(profiles, size)?.remove(0))
}

/// Ranked plain-text listing, one team per line.
pub fn ranking_text(ranked: &[DiversityReport]) -> String {
    let mut out = String::from("rank\td_focal\tteam\tlambdas\n");
    for (i, r) in ranked.iter().enumerate() {
        let lambdas: Vec<String> = r
            .focal
            .iter()
            .map(|l| format!("{}={:.6}{}", l.focal, l.lambda, if l.never_fails { "*" } else { "" }))
            .collect();
        let _ = writeln!(out, "{}\t{:.6}\t{}\t{}", i + 1, r.d_focal, r.team.join(","), lambdas.join(" "));
    }
    out
}
