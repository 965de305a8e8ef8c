use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvbf_core::mask::*;
use tvbf_core::signal::Spectrogram;

fn spec_from(coeffs: Array3<Complex64>) -> Spectrogram {
    Spectrogram { coeffs, frame_len_samples: 4, hop_samples: 1, fft_size: 4, sample_rate: 1000 }
}

fn random_spec(seed: u64, t: usize, f: usize, c: usize) -> Spectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec_from(Array3::from_shape_fn((t, f, c), |_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))))
}

#[test]
fn wiener_mask_cases() {
    let s = spec_from(Array3::from_shape_vec((1, 3, 1), vec![
        Complex64::new(3.0, 4.0), Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0),
    ]).unwrap());
    let n = spec_from(Array3::from_shape_vec((1, 3, 1), vec![
        Complex64::new(0.0, 5.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0),
    ]).unwrap());
    let (ms, mn) = wiener_like_mask(&s, &n, 0).unwrap();
    assert_eq!(ms.values()[[0, 0]], 0.5);
    assert_eq!(ms.values()[[0, 1]], 1.0);
    assert_eq!(ms.values()[[0, 2]], 0.0);
    assert_eq!(mn.values()[[0, 2]], 1.0);
    assert!(wiener_like_mask(&s, &random_spec(0, 2, 3, 1), 0).is_err());
}

#[test]
fn iscm_scalar_case() {
    let y = spec_from(Array3::from_elem((1, 1, 1), Complex64::new(3.0, 4.0)));
    let psi = compute_iscm(&y, &TimeFrequencyMask::ones(1, 1)).unwrap();
    assert_eq!(psi.psi[[0, 0, 0, 0]], Complex64::new(25.0, 0.0));
    let zero = TimeFrequencyMask::new(Array2::zeros((1, 1))).unwrap();
    assert_eq!(compute_iscm(&y, &zero).unwrap().psi[[0, 0, 0, 0]], Complex64::new(0.0, 0.0));
}

fn hermitian_eigs(psi: &IscmSequence, t: usize, f: usize) -> Vec<f64> {
    let c = psi.channels();
    // real symmetric 2C x 2C embedding [[Re, -Im], [Im, Re]] carries each eigenvalue twice
    let m = DMatrix::from_fn(2 * c, 2 * c, |i, j| {
        let z = psi.psi[[t, f, i % c, j % c]];
        match (i < c, j < c) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    let mut e: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    e.sort_by(|a, b| b.partial_cmp(a).unwrap());
    e.into_iter().step_by(2).collect()
}

#[test]
fn half_mask_iscm_is_rank_one() {
    let y = random_spec(3, 2, 2, 4);
    let mask = TimeFrequencyMask::new(Array2::from_elem((2, 2), 0.5)).unwrap();
    let psi = compute_iscm(&y, &mask).unwrap();
    for t in 0..2 {
        for f in 0..2 {
            let norm2: f64 = (0..4).map(|c| y.coeffs[[t, f, c]].norm_sqr()).sum();
            let e = hermitian_eigs(&psi, t, f);
            assert!((e[0] - 0.5 * norm2).abs() < 1e-12);
            assert!(e[1..].iter().all(|v| v.abs() < 1e-12));
        }
    }
}

#[test]
fn mask_file_round_trip_and_clipping() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.tfmk");
    let vals = Array2::from_shape_fn((5, 3), |(t, f)| ((t * 3 + f) as f32 / 15.0) as f64);
    let m = TimeFrequencyMask::new(vals.clone()).unwrap();
    save_mask(&p, &m).unwrap();
    let (s, n) = load_external_masks(&p, (5, 3)).unwrap();
    assert_eq!(s.values(), &vals);
    assert!((s.values() + n.values()).iter().all(|v| (*v - 1.0).abs() < 1e-15));
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[0..4], b"TFMK");
    assert_eq!(bytes.len(), 16 + 4 * 15);

    // value 1.2 is clipped on load
    let mut raw = bytes.clone();
    raw[16..20].copy_from_slice(&1.2f32.to_le_bytes());
    std::fs::write(&p, &raw).unwrap();
    let (s, _) = load_external_masks(&p, (5, 3)).unwrap();
    assert_eq!(s.values()[[0, 0]], 1.0);

    assert!(matches!(load_external_masks(&p, (6, 3)), Err(tvbf_core::Error::ShapeMismatch(_))));
    std::fs::write(&p, &raw[..30]).unwrap();
    assert!(matches!(load_external_masks(&p, (5, 3)), Err(tvbf_core::Error::MalformedFile(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn iscms_are_hermitian_psd(seed in 0u64..10_000, c in 1usize..5) {
        let y = random_spec(seed, 3, 2, c);
        let n = random_spec(seed + 7, 3, 2, c);
        let (ms, mn) = wiener_like_mask(&y, &n, 0).unwrap();
        prop_assert!((ms.values() + mn.values()).iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let psi = compute_iscm(&y, &ms).unwrap();
        for t in 0..3 {
            for f in 0..2 {
                let mut tr = 0.0;
                for i in 0..c {
                    tr += psi.psi[[t, f, i, i]].re;
                    for j in 0..c {
                        prop_assert_eq!(psi.psi[[t, f, i, j]], psi.psi[[t, f, j, i]].conj());
                    }
                }
                let e = hermitian_eigs(&psi, t, f);
                prop_assert!(*e.last().unwrap() >= -1e-12 * tr.max(1e-300));
            }
        }
    }

    #[test]
    fn scaling_observation_scales_iscm_quadratically(seed in 0u64..10_000, g in -4.0f64..4.0) {
        let y = random_spec(seed, 2, 2, 3);
        let mask = TimeFrequencyMask::new(Array2::from_elem((2, 2), 0.3)).unwrap();
        let a = compute_iscm(&y, &mask).unwrap();
        let b = compute_iscm(&spec_from(y.coeffs.mapv(|z| z * g)), &mask).unwrap();
        for (p, q) in a.psi.iter().zip(b.psi.iter()) {
            prop_assert!((p * g * g - q).norm() < 1e-12 * (1.0 + g * g));
        }
    }
}
