mod common;

use std::path::Path;

use acenet_core::data::{load_nifti_minimal, Dtype};
use acenet_core::eval::{hausdorff, mask_overlap, wilcoxon_signed_rank, wilcoxon_with_method, TestMethod};
use acenet_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn overlap_and_distance_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..500 {
        let dims = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8)];
        let n = dims.iter().product::<usize>();
        let (da, db) = (rng.random_range(0.02..0.9), rng.random_range(0.02..0.9));
        let mut a: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < da).collect();
        let mut b: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < db).collect();
        a[rng.random_range(0..n)] = true;
        b[rng.random_range(0..n)] = true;

        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let (na, nb) = (a.iter().filter(|x| **x).count(), b.iter().filter(|x| **x).count());
        let o = mask_overlap(&a, &b).unwrap();
        assert_eq!(o.dice, 2.0 * inter as f64 / (na + nb) as f64, "trial {trial}");
        assert_eq!(o.jaccard, inter as f64 / union as f64, "trial {trial}");

        let h = hausdorff(&a, &b, dims).unwrap();
        let oracle = common::brute_hausdorff(&a, &b, dims);
        assert!((h - oracle).abs() < 1e-9, "trial {trial}: {h} vs {oracle}");
    }
}

#[test]
fn empty_masks() {
    let o = mask_overlap(&[false; 4], &[false; 4]).unwrap();
    assert_eq!((o.dice, o.jaccard), (1.0, 1.0));
    assert_eq!(mask_overlap(&[true, false], &[false, false]).unwrap().dice, 0.0);
    assert!(matches!(hausdorff(&[false; 8], &[true; 8], [2, 2, 2]), Err(Error::Metric(_))));
}

/// Two-sided p by enumerating every sign assignment of the ranked differences.
fn enumerated_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for signs in 0u64..1 << n {
        let w: f64 = (0..n).filter(|&i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += u64::from(w <= observed + 1e-9);
        ge += u64::from(w >= observed - 1e-9);
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le.min(ge) as f64) / total).min(1.0)
}

#[test]
fn exact_wilcoxon_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..200 {
        let n = rng.random_range(2..=14);
        // Coarse values force ties and zeros.
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(-6i32..=6)) / 2.0).collect();
        let b = vec![0.0; n];
        let d: Vec<f64> = a.clone();
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        let got = wilcoxon_with_method(&a, &b, Some(TestMethod::Exact)).unwrap();
        let want = enumerated_p(&d);
        assert!((got.p_two_sided - want).abs() < 1e-12, "trial {trial}: {} vs {want} for {d:?}", got.p_two_sided);
    }
}

#[test]
fn six_positive_differences() {
    let a = [1.0, 2.5, 3.25, 4.0, 5.5, 6.75];
    let r = wilcoxon_signed_rank(&a, &[0.0; 6]).unwrap();
    assert_eq!(r.method, TestMethod::Exact);
    assert!((r.p_two_sided - 0.03125).abs() < 1e-12);
}

#[test]
fn normal_approximation_tracks_exact_at_twenty() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let shift = rng.random_range(-0.5..0.5);
        let a: Vec<f64> = (0..20).map(|_| rng.random::<f64>() + shift).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let exact = wilcoxon_with_method(&a, &b, Some(TestMethod::Exact)).unwrap();
        let approx = wilcoxon_with_method(&a, &b, Some(TestMethod::NormalApproximation)).unwrap();
        worst = worst.max((exact.p_two_sided - approx.p_two_sided).abs());
    }
    assert!(worst < 0.02, "max |exact - normal| = {worst}");
}

fn nifti(dims: [i16; 3], datatype: i16, payload: &[u8], slope: f32, inter: f32, magic: &[u8; 4]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, d) in [3, dims[0], dims[1], dims[2], 1, 1, 1, 1].iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(magic);
    h.extend_from_slice(payload);
    h
}

fn write(dir: &Path, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join("v.nii");
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn hand_built_nifti() {
    let dir = tempfile::tempdir().unwrap();
    let payload: Vec<u8> = (0..64).map(|i| (i * 3) as u8).collect();
    let v = load_nifti_minimal(&write(dir.path(), &nifti([4, 4, 4], 2, &payload, 0.0, 0.0, b"n+1\0"))).unwrap();
    assert_eq!(v.dims(), [4, 4, 4]);
    assert_eq!(v.dtype(), Dtype::U8);
    for x in 0..4 {
        for y in 0..4 {
            for z in 0..4 {
                assert_eq!(v.get(x, y, z), f64::from(payload[x + 4 * (y + 4 * z)]));
            }
        }
    }

    // Non-cubic i16 volume pins the axis mapping.
    let vals: Vec<i16> = (0..24).map(|i| i * 100 - 1200).collect();
    let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
    let v = load_nifti_minimal(&write(dir.path(), &nifti([2, 3, 4], 4, &bytes, 1.0, 0.0, b"n+1\0"))).unwrap();
    assert_eq!(v.dims(), [2, 3, 4]);
    assert_eq!(v.dtype(), Dtype::I16);
    assert_eq!(v.get(1, 2, 3), f64::from(vals[1 + 2 * (2 + 3 * 3)]));

    let v = load_nifti_minimal(&write(dir.path(), &nifti([1, 1, 1], 2, &[3], 2.0, 1.0, b"n+1\0"))).unwrap();
    assert_eq!(v.data(), &[7.0]);
    let f: Vec<u8> = 1.5f32.to_le_bytes().to_vec();
    let v = load_nifti_minimal(&write(dir.path(), &nifti([1, 1, 1], 16, &f, 0.0, 0.0, b"n+1\0"))).unwrap();
    assert_eq!(v.data(), &[1.5]);

    let field = |bytes: Vec<u8>| match load_nifti_minimal(&write(dir.path(), &bytes)) {
        Err(Error::Format { field, .. }) => field,
        other => panic!("expected a format error, got {other:?}"),
    };
    assert_eq!(field(nifti([1, 1, 1], 2, &[0], 0.0, 0.0, b"ni1\0")), "magic");
    assert_eq!(field(nifti([1, 1, 1], 8, &[0; 4], 0.0, 0.0, b"n+1\0")), "datatype");
    assert_eq!(field(vec![0x1f, 0x8b, 8, 0]), "compression");
}
