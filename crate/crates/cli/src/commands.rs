use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use p3mask_core::evalharness::{
    emit_report, run_adaptive_eval, run_protection_eval, run_unmask_eval, EvalError, Filter, ReportFormat,
};
use p3mask_core::frcore::{load_model, pool_specs, save_model, train_pool, EmbeddingModel, Embedder, FrError};
use p3mask_core::imaging::{load_image, save_image, CropSpec, Image};
use p3mask_core::maskgen::{loss_gradient_error, train_mask, LossParams, MaskError, P3Mask};
use p3mask_core::protect::{mask_apply, mask_load, mask_save, unmask};
use p3mask_core::seed;
use p3mask_core::synthdata::{gen_dataset, load_dataset, Dataset, MANIFEST_FILE};
use p3mask_core::teaming::{pool_profiles, rank_teams, ranking_text, FailureProfile};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{write_run, PipelineConfig};

/// Failure of an invariant or a calibration gate (exit status 2).
#[derive(Debug, Error)]
#[error("{0}")]
pub struct GateFailure(pub String);

pub const POOL_FILE: &str = "pool.toml";
pub const TEAM_FILE: &str = "team.toml";
pub const MASK_EXT: &str = "p3mk";
/// Largest relative gradient error the grad check accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_POINTS: usize = 20;
const GRAD_STEP: f64 = 1e-4;
const GRAD_ARCH: &str = "8x3:c3s1x6-relu-gap-d8";

fn fr_err(e: FrError) -> anyhow::Error {
    match e {
        FrError::NotAdmitted { .. } => GateFailure(e.to_string()).into(),
        e => e.into(),
    }
}

fn mask_err(e: MaskError) -> anyhow::Error {
    match e {
        MaskError::NonFinite { .. } | MaskError::Bound { .. } => GateFailure(e.to_string()).into(),
        e => e.into(),
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    id: String,
    file: String,
    arch: String,
    subset_fraction: f64,
    /// Hex, since TOML integers stop at `i64::MAX`.
    seed: String,
    attempts: usize,
    probe_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolIndex {
    models: Vec<PoolEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TeamFile {
    team: Vec<String>,
    d_focal: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfilesFile {
    profiles: Vec<FailureProfile>,
}

fn load_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = cfg.require_data()?;
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_pool(cfg: &PipelineConfig) -> Result<Vec<EmbeddingModel>> {
    let dir = cfg.require_models()?;
    let path = dir.join(POOL_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let index: PoolIndex = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    index
        .models
        .iter()
        .map(|e| load_model(&dir.join(&e.file)).with_context(|| format!("loading model {}", e.id)))
        .collect()
}

fn load_masks(dir: &Path) -> Result<BTreeMap<String, P3Mask>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == MASK_EXT));
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let m = mask_load(&p).with_context(|| format!("loading mask {}", p.display()))?;
        if out.insert(m.owner.clone(), m).is_some() {
            bail!("two masks for the same owner in {}", dir.display());
        }
    }
    Ok(out)
}

fn protected_ids(cfg: &PipelineConfig, ds: &Dataset) -> Vec<String> {
    if cfg.protected.is_empty() {
        let ids = ds.manifest.identity_ids();
        let half = ids.len() / 2;
        ids.into_iter().take(half).collect()
    } else {
        cfg.protected.clone()
    }
}

fn parse_crop(text: Option<&str>) -> Result<Option<CropSpec>> {
    let Some(text) = text else { return Ok(None) };
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("crop must be top,left,side, got {text:?}"))?;
    match parts[..] {
        [top, left, side] => Ok(Some(CropSpec { top, left, side })),
        _ => bail!("crop must be top,left,side, got {text:?}"),
    }
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let ds = gen_dataset(&cfg.gen_params(), out)?;
    println!(
        "{} identities, {} images -> {}",
        ds.manifest.identities.len(),
        ds.samples.len(),
        out.display()
    );
    write_run(out, "gen-data", cfg, vec![MANIFEST_FILE.into(), "images".into()])
}

pub fn train_models(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    prepare_out(out)?;
    let specs = pool_specs(cfg.seed, &cfg.pool.fine_arch, &cfg.pool.coarse_arch);
    let admitted = train_pool(&ds, &specs, &cfg.pool.options()).map_err(fr_err)?;
    let mut entries = Vec::new();
    for (spec, a) in specs.iter().zip(&admitted) {
        let file = format!("{}.ckpt", a.model.id);
        save_model(&a.model, &out.join(&file))?;
        println!(
            "{} probe accuracy {:.2} after {} attempt(s)",
            a.model.id, a.probe_accuracy, a.attempts
        );
        entries.push(PoolEntry {
            id: a.model.id.clone(),
            file,
            arch: spec.arch.clone(),
            subset_fraction: spec.subset_fraction,
            seed: format!("{:016x}", a.seed),
            attempts: a.attempts,
            probe_accuracy: a.probe_accuracy,
        });
    }
    let mut outputs: Vec<String> = entries.iter().map(|e| e.file.clone()).collect();
    fs::write(out.join(POOL_FILE), toml::to_string(&PoolIndex { models: entries })?)?;
    outputs.push(POOL_FILE.into());
    write_run(out, "train-models", cfg, outputs)
}

pub fn select_team(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let pool = load_pool(cfg)?;
    prepare_out(out)?;
    let profiles = pool_profiles(&ds, &pool)?;
    let ranked = rank_teams(&profiles, cfg.team_size)?;
    let best = &ranked[0];
    fs::write(out.join("ranking.txt"), ranking_text(&ranked))?;
    fs::write(out.join("profiles.toml"), toml::to_string(&ProfilesFile { profiles })?)?;
    let team = TeamFile {
        team: best.team.clone(),
        d_focal: best.d_focal,
    };
    fs::write(out.join(TEAM_FILE), toml::to_string(&team)?)?;
    println!("team {} d_focal {:.6}", best.team.join(","), best.d_focal);
    write_run(
        out,
        "select-team",
        cfg,
        vec!["ranking.txt".into(), "profiles.toml".into(), TEAM_FILE.into()],
    )
}

fn history_csv(run: &p3mask_core::maskgen::MaskRun) -> String {
    let mut s = String::from("epoch,mean_loss,mean_distance,active_fraction,lambda\n");
    for h in &run.history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            h.epoch, h.mean_loss, h.mean_distance, h.active_fraction, h.lambda
        );
    }
    s
}

pub fn train_masks(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    if cfg.mask.team.is_empty() {
        bail!("no team given (--team or mask.team)");
    }
    let ds = load_data(cfg)?;
    let pool = load_pool(cfg)?;
    prepare_out(out)?;
    let mut outputs = Vec::new();
    for id in protected_ids(cfg, &ds) {
        let run = train_mask(&ds, &id, &pool, &cfg.mask).map_err(mask_err)?;
        run.mask.validate().map_err(mask_err)?;
        let file = format!("{id}.{MASK_EXT}");
        mask_save(&run.mask, &out.join(&file))?;
        let hist = format!("{id}.history.csv");
        fs::write(out.join(&hist), history_csv(&run))?;
        let last = run.history.last().map_or(0.0, |h| h.mean_distance);
        println!("{id}: max |m| {:.6}, final mean distance {last:.6}", run.mask.max_abs());
        outputs.extend([file, hist]);
    }
    write_run(out, "train-mask", cfg, outputs)
}

pub fn apply(
    cfg: &PipelineConfig,
    out: &Path,
    image: &Path,
    mask: &Path,
    crop: Option<&str>,
    reverse: bool,
) -> Result<()> {
    let crop = parse_crop(crop)?;
    let x = load_image(image).with_context(|| format!("loading {}", image.display()))?;
    let m = mask_load(mask).with_context(|| format!("loading {}", mask.display()))?;
    prepare_out(out)?;
    let y = if reverse {
        unmask(&x, &m, crop)?
    } else {
        mask_apply(&x, &m, crop)?
    };
    let name = image
        .file_name()
        .ok_or_else(|| anyhow!("{} has no file name", image.display()))?
        .to_string_lossy()
        .into_owned();
    save_image(&y, out.join(&name))?;
    let command = if reverse { "unmask" } else { "protect" };
    write_run(out, command, cfg, vec![name])
}

pub fn evaluate(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    if cfg.mask.team.is_empty() {
        bail!("no team given (--team or mask.team)");
    }
    let format = match cfg.eval.format.as_str() {
        "text" => ReportFormat::Text,
        "csv" => ReportFormat::Csv,
        f => bail!("unknown report format {f:?}"),
    };
    let filters: Vec<Filter> = cfg
        .eval
        .filters
        .iter()
        .map(|f| f.parse())
        .collect::<Result<_, EvalError>>()?;
    let ds = load_data(cfg)?;
    let masks = load_masks(cfg.require_masks()?)?;
    let pool = load_pool(cfg)?;
    let team = &cfg.mask.team;
    let mut report = match cfg.eval.scenario.as_str() {
        "protection" => run_protection_eval(&ds, &masks, &pool, team)?,
        "unmask" => run_unmask_eval(&ds, &masks, &pool, team)?,
        "adaptive" => run_adaptive_eval(&ds, &masks, &pool, team, &filters)?,
        s => bail!("unknown scenario {s:?}"),
    };
    report.config_hash = cfg.hash();
    prepare_out(out)?;
    let name = match format {
        ReportFormat::Text => "report.txt",
        ReportFormat::Csv => "report.csv",
    };
    emit_report(&report, &out.join(name), format)?;
    write_run(out, "evaluate", cfg, vec![name.into()])?;
    println!("{} -> {}", report.title, out.join(name).display());
    if !report.gates_pass() {
        let failed: Vec<&str> = report.gates.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect();
        return Err(GateFailure(format!("gate failure: {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn grad_check(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let models: Vec<EmbeddingModel> = (0..2)
        .map(|i| {
            let id = format!("check{i}");
            let s = seed::derive_seed(cfg.seed, &format!("gradcheck/{id}"));
            Ok(EmbeddingModel::initialized(&id, GRAD_ARCH.parse()?, s))
        })
        .collect::<Result<_, FrError>>()?;
    let mut rng = seed::stream(cfg.seed, "gradcheck/face");
    let pixels = (0..8 * 8 * 3).map(|_| rng.random_range(0.15..0.85)).collect();
    let face = Image::new(8, 8, 3, pixels)?;
    let p = LossParams {
        omega: cfg.mask.omega,
        lambda: cfg.mask.lambda_init,
        quantize: false,
    };
    prepare_out(out)?;
    let mut text = String::new();
    let mut worst: f64 = 0.0;
    for size in [1, 2] {
        let team: Vec<&dyn Embedder> = models[..size].iter().map(|m| m as &dyn Embedder).collect();
        let s = seed::derive_seed(cfg.seed, &format!("gradcheck/team{size}"));
        let check = loss_gradient_error(&face, &team, &p, cfg.mask.epsilon, GRAD_POINTS, GRAD_STEP, s)?;
        let _ = writeln!(
            text,
            "team_size={size} points={} redrawn={} max_rel_error={:e}",
            check.points, check.redrawn, check.max_rel_error
        );
        worst = worst.max(check.max_rel_error);
    }
    fs::write(out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    write_run(out, "grad-check", cfg, vec!["gradcheck.txt".into()])?;
    if !(worst <= GRAD_TOLERANCE) {
        return Err(GateFailure(format!("gradient error {worst:e} exceeds {GRAD_TOLERANCE:e}")).into());
    }
    Ok(())
}
