use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_face(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::new(side, side, 3, (0..side * side * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn small_model(seed: u64) -> EmbeddingModel {
    EmbeddingModel::initialized("m", "16x3:c3s2x4-relu-gap-d8".parse().unwrap(), seed)
}

/// Returns a fixed embedding chosen by the first pixel value, for exercising
/// identification without a trained network.
struct LookupModel {
    table: Vec<Vec<f64>>,
}

impl Embedder for LookupModel {
    fn model_id(&self) -> &str {
        "lookup"
    }

    fn input_size(&self) -> usize {
        8
    }

    fn embed_var(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let key = (g.value(x).data()[0] * 255.0).round() as usize;
        let e = g.constant(Tensor::vector(self.table[key].clone()));
        Ok(g.l2_normalize(e))
    }
}

fn keyed_image(key: usize) -> Image {
    Image::filled(8, 8, 3, key as f64 / 255.0).unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

#[test]
fn embeddings_are_unit_and_pure() {
    let m = small_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for side in [16, 32, 9] {
        let x = random_face(&mut rng, side.max(8));
        let e = embed(&m, &x).unwrap();
        assert_eq!(e.len(), 8);
        assert!((norm(&e) - 1.0).abs() <= 1e-9);
        assert_eq!(embed(&m, &x).unwrap(), e);
    }
}

#[test]
fn arccos_distance_examples() {
    assert_eq!(arccos_dist(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    assert_eq!(arccos_dist(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), FRAC_PI_2);
    assert_eq!(arccos_dist(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), PI);
    assert!(matches!(arccos_dist(&[1.0, 1.0], &[1.0, 0.0]), Err(FrError::NotUnit { .. })));
    assert!(arccos_dist(&[1.0 + 1e-7, 0.0], &[1.0, 0.0]).is_ok());
    assert!(matches!(arccos_dist(&[1.0], &[1.0, 0.0]), Err(FrError::DimMismatch(1, 2))));
}

#[test]
fn single_entry_gallery_always_wins() {
    let model = LookupModel {
        table: (0..4).map(|i| unit(&[1.0, i as f64])).collect(),
    };
    let gallery = Gallery::build(&model, &[(keyed_image(0), "a".into(), Role::GallerySeen)]).unwrap();
    for k in 0..4 {
        assert_eq!(fr_identify(&keyed_image(k), &model, &gallery).unwrap(), "a");
    }
    assert!(matches!(
        fr_identify(&keyed_image(0), &model, &Gallery::default()),
        Err(FrError::EmptyGallery)
    ));
}

#[test]
fn probe_equal_to_gallery_image_gets_its_label() {
    let m = small_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let faces: Vec<(Image, String, Role)> = (0..6)
        .map(|i| (random_face(&mut rng, 16), format!("id{i}"), Role::GallerySeen))
        .collect();
    let gallery = Gallery::build(&m, &faces).unwrap();
    for (img, label, _) in &faces {
        assert_eq!(&fr_identify(img, &m, &gallery).unwrap(), label);
    }
}

#[test]
fn ties_go_to_lowest_index() {
    let model = LookupModel {
        table: vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0]), unit(&[0.6, 0.8])],
    };
    let faces = vec![
        (keyed_image(2), "far".to_string(), Role::GallerySeen),
        (keyed_image(0), "first".to_string(), Role::GallerySeen),
        (keyed_image(1), "second".to_string(), Role::GallerySeen),
    ];
    let gallery = Gallery::build(&model, &faces).unwrap();
    assert_eq!(fr_identify(&keyed_image(0), &model, &gallery).unwrap(), "first");
}

#[test]
fn accuracy_extremes() {
    let model = LookupModel {
        table: vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
    };
    let faces = vec![
        (keyed_image(0), "a".to_string(), Role::GallerySeen),
        (keyed_image(1), "b".to_string(), Role::GallerySeen),
    ];
    let gallery = Gallery::build(&model, &faces).unwrap();
    let right = vec![(keyed_image(0), "a".to_string()), (keyed_image(1), "b".to_string())];
    let wrong = vec![(keyed_image(0), "b".to_string()), (keyed_image(1), "a".to_string())];
    assert_eq!(fr_accuracy(&right, &model, &gallery).unwrap(), 100.0);
    assert_eq!(fr_accuracy(&wrong, &model, &gallery).unwrap(), 0.0);
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let mut m = EmbeddingModel::initialized("fine0", ARCH_FINE.parse().unwrap(), 9);
    m.train_accuracy = 97.5;
    let bytes = encode_model(&m);
    assert_eq!(&bytes[..4], b"P3FM");
    assert_eq!(decode_model(&bytes).unwrap(), m);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.p3fm");
    save_model(&m, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), m);

    let err = |b: &[u8]| decode_model(b).unwrap_err().to_string();
    assert!(err(&bytes[..bytes.len() - 9]).contains("CRC"));
    let mut flipped = bytes.clone();
    flipped[40] ^= 1;
    assert!(err(&flipped).contains("CRC"));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(err(&magic).contains("magic"));
    let mut version = bytes[..bytes.len() - 4].to_vec();
    version[4] = 9;
    let crc = crc32fast::hash(&version);
    version.extend(crc.to_le_bytes());
    assert!(err(&version).contains("version"));
}

#[test]
fn default_pool_has_two_architectures() {
    let specs = default_pool_specs(0);
    assert_eq!(specs.len(), 6);
    let mut archs: Vec<&str> = specs.iter().map(|s| s.arch.as_str()).collect();
    archs.dedup();
    assert_eq!(archs, vec![ARCH_FINE, ARCH_COARSE]);
    let mut ids: Vec<&str> = specs.iter().map(|s| s.model_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 6);
    assert!(specs.iter().all(|s| s.subset_fraction > 0.5 && s.subset_fraction <= 1.0));
}

fn unit_vec(raw: Vec<f64>) -> Vec<f64> {
    let n = norm(&raw).max(1e-3);
    raw.iter().map(|x| x / n).collect()
}

proptest! {
    #[test]
    fn arccos_ranking_matches_euclidean(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 3)
    ) {
        prop_assume!(raw.iter().all(|v| norm(v) > 1e-2));
        let v: Vec<Vec<f64>> = raw.into_iter().map(unit_vec).collect();
        let eu = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (a1, a2) = (arccos_dist(&v[0], &v[1]).unwrap(), arccos_dist(&v[0], &v[2]).unwrap());
        let (e1, e2) = (eu(&v[0], &v[1]), eu(&v[0], &v[2]));
        if (a1 - a2).abs() > 1e-9 {
            prop_assert_eq!(a1 < a2, e1 < e2);
        }
    }

    #[test]
    fn identification_ignores_gallery_order(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..8),
        probe in prop::collection::vec(-1.0f64..1.0, 4),
        perm_seed in any::<u64>(),
    ) {
        prop_assume!(raw.iter().chain([&probe]).all(|v| norm(v) > 1e-2));
        let probe = unit_vec(probe);
        let entries: Vec<GalleryEntry> = raw
            .into_iter()
            .enumerate()
            .map(|(i, v)| GalleryEntry { embedding: unit_vec(v), label: format!("l{i}"), role: Role::GallerySeen })
            .collect();
        let mut dists: Vec<f64> = entries.iter().map(|e| arccos_dist(&probe, &e.embedding).unwrap()).collect();
        dists.sort_by(f64::total_cmp);
        prop_assume!(dists.len() < 2 || dists[1] - dists[0] > 1e-12);
        let g1 = Gallery { entries: entries.clone() };
        let mut shuffled = entries;
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let g2 = Gallery { entries: shuffled };
        let l1 = &g1.entries[g1.nearest(&probe).unwrap()].label;
        let l2 = &g2.entries[g2.nearest(&probe).unwrap()].label;
        prop_assert_eq!(l1, l2);
    }
}
