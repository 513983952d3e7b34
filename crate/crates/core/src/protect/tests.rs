use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn mask(side: usize, values: Vec<f64>) -> P3Mask {
    P3Mask {
        values,
        ..P3Mask::zeros(side, side, 3, 0.063, "id0", 42)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> P3Mask {
    mask(side, (0..side * side * 3).map(|_| rng.random_range(-0.063..=0.063)).collect())
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

#[test]
fn zero_mask_leaves_8bit_images_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_image(&mut rng, 20, 24).quantized();
    let z = P3Mask::zeros(32, 32, 3, 0.063, "a", 0);
    assert_eq!(mask_apply(&x, &z, None).unwrap(), x);
    assert_eq!(unmask(&x, &z, None).unwrap(), x);
}

#[test]
fn full_crop_subtracts_pointwise() {
    let x = Image::filled(8, 8, 3, 100.0 / 255.0).unwrap();
    let m = mask(8, (0..192).map(|i| (i % 7) as f64 / 255.0).collect());
    let y = mask_apply(&x, &m, None).unwrap();
    for (i, v) in y.pixels().iter().enumerate() {
        assert_eq!(*v, (100 - (i % 7) as i64) as f64 / 255.0);
    }
}

#[test]
fn saturation_examples() {
    let x = Image::filled(8, 8, 3, 0.01).unwrap();
    let m = mask(8, vec![0.05; 192]);
    let y = mask_apply(&x, &m, None).unwrap();
    assert!(y.pixels().iter().all(|&v| v == 0.0));
    let back = unmask(&y, &m, None).unwrap();
    let qm = quantize(&[0.05])[0];
    assert!(back.pixels().iter().all(|&v| v == qm));
    assert!((qm - 0.05).abs() < 0.5 / 255.0);
    assert_eq!(saturated_pixels(&x, &m, None).unwrap(), 192);
}

#[test]
fn pixels_outside_crop_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_image(&mut rng, 24, 30).quantized();
    let crop = CropSpec { top: 3, left: 5, side: 16 };
    let m = random_mask(&mut rng, 32);
    let y = mask_apply(&x, &m, Some(crop)).unwrap();
    for r in 0..24 {
        for c in 0..30 {
            let inside = (3..19).contains(&r) && (5..21).contains(&c);
            for ch in 0..3 {
                if !inside {
                    assert_eq!(y.get(r, c, ch), x.get(r, c, ch));
                }
            }
        }
    }
    assert_ne!(y, x);
    assert_eq!(mask_apply(&x, &m, Some(crop)).unwrap(), y);
    let bad = CropSpec { top: 10, left: 20, side: 16 };
    assert!(mask_apply(&x, &m, Some(bad)).is_err());
}

#[test]
fn wrong_mask_does_not_restore() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_image(&mut rng, 32, 32).quantized();
    let (a, b) = (random_mask(&mut rng, 32), random_mask(&mut rng, 32));
    let y = mask_apply(&x, &a, None).unwrap();
    let back = unmask(&y, &b, None).unwrap();
    let differ = back.pixels().iter().zip(x.pixels()).filter(|(p, q)| p != q).count();
    assert!(differ * 100 >= x.pixels().len(), "{differ}");
}

#[test]
fn key_file_roundtrip_and_rejections() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_mask(&mut rng, 32);
    let bytes = encode_mask(&m).unwrap();
    assert_eq!(&bytes[..4], b"P3MK");
    assert_eq!(bytes.len(), 4 + 2 + 2 + 2 + 1 + 8 + 2 + 3 + 8 + 32 * 32 * 3 * 8 + 4);
    let back = decode_mask(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(encode_mask(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("id0.p3mk");
    mask_save(&m, &path).unwrap();
    assert_eq!(mask_load(&path).unwrap(), m);

    assert!(matches!(decode_mask(&bytes[..bytes.len() - 10]), Err(ProtectError::Crc)));
    let mut magic = bytes.clone();
    magic[1] = b'Q';
    assert!(matches!(decode_mask(&magic), Err(ProtectError::Magic)));

    let reseal = |mut body: Vec<u8>| {
        let crc = crc32fast::hash(&body);
        body.extend(crc.to_le_bytes());
        body
    };
    let mut version = bytes[..bytes.len() - 4].to_vec();
    version[4] = 7;
    assert!(matches!(decode_mask(&reseal(version)), Err(ProtectError::Version(7))));

    let mut loud = bytes[..bytes.len() - 4].to_vec();
    let first_value = bytes.len() - 4 - 32 * 32 * 3 * 8;
    loud[first_value..first_value + 8].copy_from_slice(&0.07f64.to_le_bytes());
    let err = decode_mask(&reseal(loud)).unwrap_err();
    assert!(matches!(err, ProtectError::Mask(MaskError::Bound { index: 0, .. })), "{err}");
    assert!(matches!(mask_load(&dir.path().join("missing")), Err(ProtectError::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_restores_unsaturated_pixels(seed in any::<u64>(), side in 8usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(&mut rng, side, side + 3);
        let m = random_mask(&mut rng, 32);
        let back = unmask(&mask_apply(&x, &m, None).unwrap(), &m, None).unwrap();
        let q = x.quantized();
        let crop = CropSpec::centered(side, side + 3);
        let offsets = quantize(&resize_raw(&m.values, (32, 32, 3), side, side).unwrap());
        for r in 0..side {
            for c in 0..side + 3 {
                for ch in 0..3 {
                    let inside = c >= crop.left && c < crop.left + side;
                    let saturated = inside && {
                        let v = x.get(r, c, ch) - offsets[(r * side + c - crop.left) * 3 + ch];
                        !(0.0..=1.0).contains(&v)
                    };
                    if !saturated {
                        prop_assert_eq!(back.get(r, c, ch), q.get(r, c, ch));
                    }
                }
            }
        }
    }
}
