//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when any criterion fails.
//!
//! Pools, teams and masks are built once per seed on the full corpus
//! (8 identities x 20 images x 32 px, six pool models) and shared.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use p3mask_core::evalharness::{
    per_image_baseline, run_adaptive_eval, run_protection_eval, run_unmask_eval, EvalReport, Filter,
    FILTER_GATE_ACCURACY,
};
use p3mask_core::frcore::{default_pool_specs, train_pool, Embedder, EmbeddingModel, TrainOptions};
use p3mask_core::imaging::{face_crop, ssim, CropSpec, Image, MIN_SIDE};
use p3mask_core::maskgen::{
    loss_gradient_error, protection_distances, resolve_team, train_mask, train_masks, LossParams, P3Mask,
    TrainConfig,
};
use p3mask_core::protect::{mask_apply, mask_load, mask_save, unmask};
use p3mask_core::seed;
use p3mask_core::synthdata::{render_dataset, Dataset, GenParams, Role};
use p3mask_core::teaming::{pool_profiles, rank_teams, select_team, DiversityReport, FailureProfile};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPSILON: f64 = 0.063;
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-4;
const GRAD_POINTS: usize = 20;
const SSIM_TOLERANCE: f64 = 1e-6;
const FILTERS: [&str; 5] = ["jpeg:75", "jpeg:50", "gaussian:0.5", "gaussian:1", "median:3"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Masks {
    team: Vec<String>,
    d_focal: f64,
    masks: BTreeMap<String, P3Mask>,
    train_secs: f64,
}

struct World {
    seed: u64,
    ds: Dataset,
    pool: Vec<EmbeddingModel>,
    pool_secs: f64,
    profiles: Vec<FailureProfile>,
    ranked: Vec<DiversityReport>,
    protected: Vec<String>,
    most: Masks,
    least: Masks,
}

fn mask_config(seed: u64, team: &[String]) -> TrainConfig {
    TrainConfig {
        seed,
        team: team.to_vec(),
        ..TrainConfig::default()
    }
}

fn train_team(w_ds: &Dataset, pool: &[EmbeddingModel], seed: u64, protected: &[String], r: &DiversityReport) -> Masks {
    let start = Instant::now();
    let runs = train_masks(w_ds, protected, pool, &mask_config(seed, &r.team)).expect("mask training");
    Masks {
        team: r.team.clone(),
        d_focal: r.d_focal,
        masks: runs.into_iter().map(|(k, v)| (k, v.mask)).collect(),
        train_secs: start.elapsed().as_secs_f64(),
    }
}

fn build_world(seed: u64) -> World {
    let ds = render_dataset(&GenParams {
        n_identities: 8,
        images_per_identity: 20,
        size: 32,
        seed,
    })
    .expect("corpus");
    let start = Instant::now();
    let pool: Vec<EmbeddingModel> = train_pool(&ds, &default_pool_specs(seed), &TrainOptions::default())
        .expect("pool admission")
        .into_iter()
        .map(|a| a.model)
        .collect();
    let pool_secs = start.elapsed().as_secs_f64();
    let profiles = pool_profiles(&ds, &pool).expect("profiles");
    let ranked = rank_teams(&profiles, 2).expect("ranking");
    // Least diverse: lowest score, ties to the lexicographically smallest team.
    let low = ranked.iter().map(|r| r.d_focal).fold(f64::INFINITY, f64::min);
    let least = ranked.iter().find(|r| r.d_focal == low).unwrap().clone();
    let ids = ds.manifest.identity_ids();
    let protected: Vec<String> = ids[..ids.len() / 2].to_vec();
    let most = train_team(&ds, &pool, seed, &protected, &ranked[0]);
    let least = train_team(&ds, &pool, seed, &protected, &least);
    World {
        seed,
        ds,
        pool,
        pool_secs,
        profiles,
        ranked,
        protected,
        most,
        least,
    }
}

fn world(seed: u64) -> &'static World {
    static WORLDS: [OnceLock<World>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    WORLDS[seed as usize].get_or_init(|| build_world(seed))
}

fn team_refs<'a>(w: &'a World, team: &[String]) -> Vec<&'a dyn Embedder> {
    resolve_team(&w.pool, team)
        .expect("team in pool")
        .into_iter()
        .map(|m| m as &dyn Embedder)
        .collect()
}

fn crops(w: &World, id: &str, role: Role) -> Vec<Image> {
    w.ds.of(id, role)
        .iter()
        .map(|s| face_crop(&s.image, Some(s.crop)).unwrap())
        .collect()
}

fn protection(w: &World, m: &Masks) -> EvalReport {
    run_protection_eval(&w.ds, &m.masks, &w.pool, &m.team).expect("protection eval")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Image {
    let px = (0..h * w * c).map(|_| rng.random_range(lo..hi)).collect();
    Image::new(h, w, c, px).unwrap()
}

// 1. Loss gradients against central differences on 8x8 inputs.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let arch = "8x3:c3s1x6-relu-gap-d8";
    let models: Vec<EmbeddingModel> = (0..2)
        .map(|i| {
            let id = format!("check{i}");
            EmbeddingModel::initialized(&id, arch.parse().unwrap(), seed::derive_seed(0, &id))
        })
        .collect();
    let mut rng = seed::stream(0, "acceptance/gradcheck");
    let face = random_image(&mut rng, 8, 8, 3, 0.15, 0.85);
    let p = LossParams {
        omega: 0.03,
        lambda: 1.0,
        quantize: false,
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for size in [1, 2] {
        let team: Vec<&dyn Embedder> = models[..size].iter().map(|m| m as &dyn Embedder).collect();
        let c = loss_gradient_error(&face, &team, &p, EPSILON, GRAD_POINTS, GRAD_STEP, size as u64).unwrap();
        worst = worst.max(c.max_rel_error);
        parts.push(format!(
            "S={size}: {} points ({} redrawn near kinks) max rel err {:.2e}",
            c.points, c.redrawn, c.max_rel_error
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= GRAD_TOLERANCE && secs < 60.0,
        format!("{}; {secs:.1}s (need <= {GRAD_TOLERANCE:e}, < 60s)", parts.join("; ")),
    )
}

// 2. Full-length training keeps the bound and is bit-reproducible.
fn mask_bound_and_determinism() -> Outcome {
    let w = world(0);
    let worst = w
        .most
        .masks
        .values()
        .chain(w.least.masks.values())
        .map(P3Mask::max_abs)
        .fold(0.0, f64::max);
    let owner = &w.protected[0];
    let start = Instant::now();
    let again = train_mask(&w.ds, owner, &w.pool, &mask_config(w.seed, &w.most.team)).unwrap().mask;
    let secs = start.elapsed().as_secs_f64();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.p3mk"), dir.path().join("b.p3mk"));
    mask_save(&w.most.masks[owner], &a).unwrap();
    mask_save(&again, &b).unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let reloaded = mask_load(&a).unwrap() == w.most.masks[owner];
    outcome(
        worst <= EPSILON && identical && reloaded && secs < 300.0,
        format!(
            "max |M| {worst} over {} masks; rerun of {owner} bit-identical: {identical}; reload equal: {reloaded}; {secs:.1}s per identity",
            w.most.masks.len() + w.least.masks.len()
        ),
    )
}

// 3. Team models fail on protected identities.
fn seen_model_protection() -> Outcome {
    let w = world(0);
    let start = Instant::now();
    let r = protection(w, &w.most);
    let total = w.pool_secs + w.most.train_secs + start.elapsed().as_secs_f64();
    let s = &r.scenarios[0];
    let team: Vec<(String, f64)> = s.totals().filter(|c| c.known).map(|c| (c.model_id.clone(), c.psr())).collect();
    let pass = team.len() == 2 && team.iter().all(|(_, p)| *p >= 95.0) && total < 600.0;
    let mut detail = format!("seed 0 team {:?} PSR {team:?}; pool+masks+eval {total:.0}s", w.most.team);
    for seed in &SEEDS[1..] {
        let o = world(*seed);
        let r = protection(o, &o.most);
        let psr: Vec<f64> = r.scenarios[0].totals().filter(|c| c.known).map(|c| c.psr()).collect();
        detail += &format!("; seed {seed} (info) {psr:?}");
    }
    outcome(pass, detail)
}

// 4. Masks carry over to gallery images they were not trained on.
fn cross_image_generalization() -> Outcome {
    let mut ratios = Vec::new();
    for seed in SEEDS {
        let w = world(seed);
        let team = team_refs(w, &w.most.team);
        let (mut seen, mut unseen) = (Vec::new(), Vec::new());
        for id in &w.protected {
            let m = &w.most.masks[id];
            seen.extend(protection_distances(&crops(w, id, Role::GallerySeen), m, &team).unwrap());
            unseen.extend(protection_distances(&crops(w, id, Role::GalleryUnseen), m, &team).unwrap());
        }
        ratios.push((mean(&seen), mean(&unseen)));
    }
    let pass = ratios.iter().all(|(s, u)| *u >= 0.8 * s);
    let text: Vec<String> = ratios
        .iter()
        .zip(SEEDS)
        .map(|((s, u), seed)| format!("seed {seed}: seen {s:.3} unseen {u:.3} ratio {:.3}", u / s))
        .collect();
    outcome(pass, text.join("; "))
}

// 5. The most diverse team transfers better than the least diverse one.
fn diversity_transfer() -> Outcome {
    let mut wins = 0;
    let mut text = Vec::new();
    for seed in SEEDS {
        let w = world(seed);
        let most = protection(w, &w.most).scenarios[0].psr_stats(Some(false)).0;
        let least = protection(w, &w.least).scenarios[0].psr_stats(Some(false)).0;
        if most > least {
            wins += 1;
        }
        let negatives: Vec<usize> = w.profiles.iter().map(|p| p.negatives.len()).collect();
        let mut scores: Vec<f64> = w.ranked.iter().map(|r| r.d_focal).collect();
        scores.dedup();
        text.push(format!(
            "seed {seed}: most {:?} d={:.3} -> {most:.2}, least {:?} d={:.3} -> {least:.2} (negatives per model {negatives:?}, {} distinct scores)",
            w.most.team,
            w.most.d_focal,
            w.least.team,
            w.least.d_focal,
            scores.len()
        ));
    }
    outcome(wins == SEEDS.len(), format!("{wins}/3 seeds; {}", text.join("; ")))
}

/// Focal diversity by explicit counting of co-failing members and ordered
/// co-failing pairs.
fn oracle_diversity(team: &[&FailureProfile]) -> f64 {
    let s = team.len();
    let mut sum = 0.0;
    for (f, focal) in team.iter().enumerate() {
        let others: Vec<&BTreeSet<usize>> = (0..s).filter(|&j| j != f).map(|j| &team[j].negatives).collect();
        let lambda = if focal.negatives.is_empty() {
            0.0
        } else if s == 2 {
            let both = focal.negatives.iter().filter(|n| others[0].contains(n)).count();
            both as f64 / focal.negatives.len() as f64
        } else {
            let (mut singles, mut pairs) = (0u64, 0u64);
            for n in &focal.negatives {
                for (a, sa) in others.iter().enumerate() {
                    if !sa.contains(n) {
                        continue;
                    }
                    singles += 1;
                    pairs += others.iter().enumerate().filter(|(b, sb)| *b != a && sb.contains(n)).count() as u64;
                }
            }
            if singles == 0 {
                0.0
            } else {
                pairs as f64 / (singles * (s as u64 - 2)) as f64
            }
        };
        sum += 1.0 - lambda;
    }
    sum / s as f64
}

fn subsets(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        subsets(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// Mismatches between the library ranking and brute force for one pool.
fn teaming_mismatches(profiles: &[FailureProfile], size: usize) -> (usize, usize) {
    let mut sorted: Vec<&FailureProfile> = profiles.iter().collect();
    sorted.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    let mut teams = Vec::new();
    subsets(sorted.len(), size, 0, &mut Vec::new(), &mut teams);
    let ranked = rank_teams(profiles, size).unwrap();
    let by_team: BTreeMap<Vec<String>, f64> = ranked.iter().map(|r| (r.team.clone(), r.d_focal)).collect();
    let mut bad = usize::from(ranked.len() != teams.len());
    let mut best: Option<(f64, Vec<String>)> = None;
    for t in &teams {
        let members: Vec<&FailureProfile> = t.iter().map(|&i| sorted[i]).collect();
        let ids: Vec<String> = members.iter().map(|p| p.model_id.clone()).collect();
        let d = oracle_diversity(&members);
        if by_team.get(&ids) != Some(&d) {
            bad += 1;
        }
        if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
            best = Some((d, ids));
        }
    }
    let chosen = select_team(profiles, size).unwrap();
    let (bd, bt) = best.unwrap();
    if chosen.team != bt || chosen.d_focal != bd {
        bad += 1;
    }
    (bad, teams.len())
}

fn random_profiles(rng: &mut impl Rng) -> Vec<FailureProfile> {
    (0..6)
        .map(|i| FailureProfile {
            model_id: format!("m{i}"),
            negatives: (0..48).filter(|_| rng.random_bool(0.15)).collect(),
            validation_size: 48,
        })
        .collect()
}

// 6. Team scoring and selection equal brute force.
fn teaming_oracle() -> Outcome {
    let mut bad = 0;
    let mut counts = Vec::new();
    for seed in SEEDS {
        for size in [2, 3] {
            let (b, n) = teaming_mismatches(&world(seed).profiles, size);
            bad += b;
            counts.push(n);
        }
    }
    let mut rng = seed::stream(0, "acceptance/profiles");
    for _ in 0..200 {
        let p = random_profiles(&mut rng);
        for size in [2, 3] {
            bad += teaming_mismatches(&p, size).0;
        }
    }
    let enumerated = counts.iter().all(|&n| n == 15 || n == 20) && counts.contains(&15) && counts.contains(&20);
    outcome(
        bad == 0 && enumerated,
        format!("{bad} mismatches; team counts {counts:?} on the trained pools plus 200 random pools"),
    )
}

// 7. Correct key restores accuracy; a wrong key does not.
fn unmask_restore() -> Outcome {
    let w = world(0);
    let r = run_unmask_eval(&w.ds, &w.most.masks, &w.pool, &w.most.team).unwrap();
    let get = |label: &str| r.scenario(label).unwrap();
    let (clean, prot, right, wrong) = (
        get("no-protection"),
        get("protected"),
        get("unmasked-correct"),
        get("unmasked-wrong"),
    );
    let mut pass = true;
    let mut rows = Vec::new();
    for c in clean.totals() {
        let id = &c.model_id;
        let (p, u, x) = (
            prot.total_for(id).unwrap(),
            right.total_for(id).unwrap(),
            wrong.total_for(id).unwrap(),
        );
        pass &= u.hits == c.hits && u.total == c.total;
        pass &= x.accuracy_bp() <= p.accuracy_bp() + 1000;
        rows.push(format!("{id} {}/{}/{}/{}", c.accuracy(), p.accuracy(), u.accuracy(), x.accuracy()));
    }
    let sat = r.saturation.unwrap();
    outcome(
        pass,
        format!(
            "clean/protected/right/wrong accuracy: {}; saturated {} of {} crop values in {} images",
            rows.join(", "),
            sat.pixels,
            sat.crop_pixels,
            sat.images
        ),
    )
}

// 8. Protected crops stay structurally similar to the originals.
fn perceptual_quality() -> Outcome {
    let w = world(0);
    let s = protection(w, &w.most).ssim.unwrap();
    outcome(
        s.mean >= 0.90,
        format!("mean SSIM {:.4} (min {:.4}, n {})", s.mean, s.min, s.count),
    )
}

/// Direct 2-D window sums over every valid position, variances taken about
/// the window mean.
fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w, c) = a.dims();
    let k = 11;
    let mut win = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let (dy, dx) = (y as f64 - 5.0, x as f64 - 5.0);
            win[y * k + x] = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut n = 0;
    for ch in 0..c {
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let at = |img: &Image, y: usize, x: usize| img.get(y0 + y, x0 + x, ch);
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        ma += win[y * k + x] * at(a, y, x);
                        mb += win[y * k + x] * at(b, y, x);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..k {
                    for x in 0..k {
                        let (da, db) = (at(a, y, x) - ma, at(b, y, x) - mb);
                        va += win[y * k + x] * da * da;
                        vb += win[y * k + x] * db * db;
                        cov += win[y * k + x] * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    acc / n as f64
}

// 9. SSIM against an independent reference.
fn ssim_oracle() -> Outcome {
    let mut rng = seed::stream(0, "acceptance/ssim");
    let mut worst: f64 = 0.0;
    let mut self_ok = true;
    for i in 0..50 {
        let (h, w) = (rng.random_range(11..=24), rng.random_range(11..=24));
        let c = if i % 2 == 0 { 3 } else { 1 };
        let a = random_image(&mut rng, h, w, c, 0.0, 1.0);
        // Half the pairs are mild perturbations, half unrelated images.
        let b = if i % 4 < 2 {
            let px = a.pixels().iter().map(|v| (v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)).collect();
            Image::new(h, w, c, px).unwrap()
        } else {
            random_image(&mut rng, h, w, c, 0.0, 1.0)
        };
        worst = worst.max((ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs());
        let (sh, sw) = (rng.random_range(MIN_SIDE..=24), rng.random_range(MIN_SIDE..=24));
        let small = random_image(&mut rng, sh, sw, c, 0.0, 1.0);
        self_ok &= ssim(&a, &a).unwrap() == 1.0 && ssim(&small, &small).unwrap() == 1.0;
    }
    outcome(
        worst <= SSIM_TOLERANCE && self_ok,
        format!("max |ssim - reference| {worst:.2e} over 50 pairs; ssim(x, x) == 1 exactly: {self_ok}"),
    )
}

/// Corner-aligned bilinear resample of a square `n x n x c` field to `m x m`.
fn oracle_resize(v: &[f64], n: usize, c: usize, m: usize) -> Vec<f64> {
    let src = |o: usize| -> (usize, usize, f64) {
        if m == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (n - 1) as f64 / (m - 1) as f64;
        let i0 = (s.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut out = vec![0.0; m * m * c];
    for oy in 0..m {
        let (y0, y1, ty) = src(oy);
        for ox in 0..m {
            let (x0, x1, tx) = src(ox);
            for ch in 0..c {
                let g = |y: usize, x: usize| v[(y * n + x) * c + ch];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bottom = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                out[(oy * m + ox) * c + ch] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

// 10. Unmasking inverts masking wherever no pixel clipped.
fn roundtrip_law() -> Outcome {
    let mut rng = seed::stream(0, "acceptance/roundtrip");
    let (mut checked, mut violations, mut saturated, mut ambiguous) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(MIN_SIDE..=24), rng.random_range(MIN_SIDE..=24));
        let c = if rng.random_bool(0.5) { 3 } else { 1 };
        let x = random_image(&mut rng, h, w, c, 0.0, 1.0);
        let side = rng.random_range(MIN_SIDE..=h.min(w));
        let crop = CropSpec {
            top: rng.random_range(0..=h - side),
            left: rng.random_range(0..=w - side),
            side,
        };
        let n = rng.random_range(2..=12);
        let mut mask = P3Mask::zeros(n, n, c, EPSILON, "owner", 0);
        mask.values.iter_mut().for_each(|v| *v = rng.random_range(-EPSILON..=EPSILON));
        let back = unmask(&mask_apply(&x, &mask, Some(crop)).unwrap(), &mask, Some(crop)).unwrap();
        let offsets = oracle_resize(&mask.values, n, c, side);
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let inside = (crop.top..crop.top + side).contains(&y) && (crop.left..crop.left + side).contains(&xx);
                    let v = x.get(y, xx, ch);
                    if inside {
                        let raw = offsets[((y - crop.top) * side + xx - crop.left) * c + ch] * 255.0;
                        // Skip values the oracle cannot round unambiguously.
                        if (raw - raw.floor() - 0.5).abs() < 1e-9 {
                            ambiguous += 1;
                            continue;
                        }
                        let d = v - raw.round() / 255.0;
                        if d.abs() < 1e-12 || (d - 1.0).abs() < 1e-12 {
                            ambiguous += 1;
                            continue;
                        }
                        if !(0.0..=1.0).contains(&d) {
                            saturated += 1;
                            continue;
                        }
                    }
                    checked += 1;
                    if back.get(y, xx, ch) != (v * 255.0).round() / 255.0 {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over {checked} pixel values ({saturated} saturated, {ambiguous} at rounding boundaries skipped)"),
    )
}

// 11. Wash-out filters that keep clean accuracy do not undo protection.
fn adaptive_adversary() -> Outcome {
    let w = world(0);
    let filters: Vec<Filter> = FILTERS.iter().map(|f| f.parse().unwrap()).collect();
    let r = run_adaptive_eval(&w.ds, &w.most.masks, &w.pool, &w.most.team, &filters).unwrap();
    let base = r.scenario("protected/identity").unwrap().psr_stats(Some(true)).0;
    let mut soft = Vec::new();
    for f in &filters {
        let psr = r.scenario(&format!("protected/{}", f.label())).unwrap().psr_stats(Some(true)).0;
        let flag = if psr >= 0.5 * base { "ok" } else { "below half" };
        soft.push(format!("{} {psr:.2} ({flag})", f.label()));
    }
    let gates: Vec<String> = r.gates.iter().filter(|g| !g.passed).map(|g| g.name.clone()).collect();
    outcome(
        r.gates_pass(),
        format!(
            "calibration gate (clean accuracy >= {FILTER_GATE_ACCURACY}) failed for {gates:?}; team PSR unfiltered {base:.2}, {}",
            soft.join(", ")
        ),
    )
}

// 12. Per-image optimization is at least as strong per image.
fn per_image_dominance() -> Outcome {
    let w = world(0);
    let team = team_refs(w, &w.most.team);
    let cfg = mask_config(w.seed, &w.most.team);
    let (mut wins, mut n) = (0, 0);
    let mut gaps = Vec::new();
    for id in &w.protected {
        let faces = crops(w, id, Role::GallerySeen);
        for face in &faces {
            let (_, own) = per_image_baseline(face, id, &team, &cfg, faces.len()).unwrap();
            let d_own = protection_distances(std::slice::from_ref(face), &own, &team).unwrap()[0];
            let d_uni = protection_distances(std::slice::from_ref(face), &w.most.masks[id], &team).unwrap()[0];
            wins += usize::from(d_own >= d_uni);
            n += 1;
            gaps.push(d_own - d_uni);
        }
    }
    outcome(
        wins * 10 >= n * 9,
        format!(
            "per-image >= universal on {wins}/{n} seen images ({:.1}%, need 90%); mean distance gap {:+.4}",
            100.0 * wins as f64 / n as f64,
            mean(&gaps)
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradient_correctness),
        ("mask bound and determinism", mask_bound_and_determinism),
        ("seen-model protection", seen_model_protection),
        ("cross-image generalization", cross_image_generalization),
        ("diversity transfer", diversity_transfer),
        ("teaming oracle equivalence", teaming_oracle),
        ("unmask restore", unmask_restore),
        ("perceptual quality", perceptual_quality),
        ("ssim oracle", ssim_oracle),
        ("roundtrip law", roundtrip_law),
        ("adaptive adversary", adaptive_adversary),
        ("per-image dominance", per_image_dominance),
    ];
    // `P3MASK_CRITERIA=9,10` runs a subset.
    let only: Option<Vec<usize>> = std::env::var("P3MASK_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let (mut ran, mut failed) = (0, Vec::new());
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {:>2} {verdict} {name} [{:.1}s]: {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
        ran += 1;
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {ran} criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of {ran} criteria failed: {failed:?}", failed.len());
        ExitCode::FAILURE
    }
}
