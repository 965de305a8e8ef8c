use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvbf_core::signal::*;

fn random_wave(seed: u64, channels: usize, len: usize, sr: u32) -> MultichannelWaveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultichannelWaveform::new(Array2::from_shape_fn((channels, len), |_| rng.gen_range(-1.0..1.0)), sr).unwrap()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

#[test]
fn wideband_bin_count() {
    let w = random_wave(0, 1, 16_000, 16_000);
    let s = stft(&w, &StftConfig::wideband()).unwrap();
    assert_eq!(s.bins(), 513);
    assert_eq!(s.frames(), 16_000usize.div_ceil(256));
}

#[test]
fn sinusoid_matches_direct_dft_of_frame() {
    let cfg = StftConfig::wideband();
    let n = 1024;
    let k0 = 64; // bin-centred: 1 kHz at 16 kHz / 1024
    let len = 8000;
    let x: Vec<f64> = (0..len).map(|i| (2.0 * std::f64::consts::PI * k0 as f64 * i as f64 / n as f64).cos()).collect();
    let s = stft(&MultichannelWaveform::mono(x.clone(), 16_000).unwrap(), &cfg).unwrap();
    // interior frame: no padding involved
    let t = 10;
    let w = hann(n);
    let start = t * 256 - n / 2;
    for k in 0..513 {
        let direct: Complex64 = (0..n)
            .map(|i| Complex64::from_polar(x[start + i] * w[i], -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64))
            .sum();
        assert!((s.coeffs[[t, k, 0]] - direct).norm() < 1e-9, "bin {k}");
    }
    // Hann transform of a bin-centred tone: peak N/4 at k0, N/8 at k0 +- 1, nothing else
    let mag = |k: usize| s.coeffs[[t, k, 0]].norm();
    assert!((mag(k0) - n as f64 / 4.0).abs() < 1e-8);
    assert!((mag(k0 - 1) - n as f64 / 8.0).abs() < 1e-8);
    assert!((mag(k0 + 1) - n as f64 / 8.0).abs() < 1e-8);
    assert!(mag(k0 + 2) < 1e-8 && mag(k0 - 2) < 1e-8);
}

#[test]
fn zero_input_gives_zero_spectrogram() {
    let w = MultichannelWaveform::zeros(2, 16_000, 16_000).unwrap();
    let s = stft(&w, &StftConfig::wideband()).unwrap();
    assert_eq!(s.frames(), 63);
    assert!(s.coeffs.iter().all(|c| c.norm() == 0.0));
    let y = istft(&s, &StftConfig::wideband(), 16_000).unwrap();
    assert!(y.samples().iter().all(|v| *v == 0.0));
}

#[test]
fn round_trip_reconstructs_random_signals() {
    let cfg = StftConfig::wideband();
    for seed in 0..3 {
        let w = random_wave(seed, 2, 12_345, 16_000);
        let y = istft(&stft(&w, &cfg).unwrap(), &cfg, w.len()).unwrap();
        let err = (w.samples() - y.samples()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10 * w.peak(), "seed {seed}: {err}");
    }
}

#[test]
fn istft_truncates_to_requested_length() {
    let cfg = StftConfig::wideband();
    let w = random_wave(7, 1, 5000, 16_000);
    let s = stft(&w, &cfg).unwrap();
    let y = istft(&s, &cfg, 1234).unwrap();
    assert_eq!(y.len(), 1234);
    for i in 0..1234 {
        assert!((y.samples()[[0, i]] - w.samples()[[0, i]]).abs() < 1e-10);
    }
}

#[test]
fn istft_rejects_inconsistent_shapes() {
    let cfg = StftConfig::wideband();
    let s = stft(&random_wave(1, 1, 4000, 16_000), &cfg).unwrap();
    assert!(istft(&s, &StftConfig::new(32.0, 8.0, 16_000), 4000).is_err());
    assert!(istft(&s, &cfg, 1_000_000).is_err());
}

#[test]
fn stft_errors() {
    let empty = MultichannelWaveform::zeros(1, 0, 16_000).unwrap();
    assert!(stft(&empty, &StftConfig::wideband()).is_err());
    let w = random_wave(0, 1, 100, 16_000);
    assert!(stft(&w, &StftConfig::new(16.0, 32.0, 16_000)).is_err());
}

#[test]
fn short_signals_use_repeated_reflection() {
    let cfg = StftConfig::wideband();
    let w = random_wave(3, 1, 10, 16_000);
    let s = stft(&w, &cfg).unwrap();
    assert_eq!(s.frames(), 1);
    let y = istft(&s, &cfg, 10).unwrap();
    assert!((w.samples() - y.samples()).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn wav_float_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Array2::from_shape_fn((3, 500), |_| rng.gen_range(-1.0f32..1.0) as f64);
    let w = MultichannelWaveform::new(s, 16_000).unwrap();
    write_wav(&p, &w, WavEncoding::Float32).unwrap();
    assert_eq!(read_wav(&p).unwrap(), w);
}

#[test]
fn wav_int16_scaling_and_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("max.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut wr = hound::WavWriter::create(&p, spec).unwrap();
    wr.write_sample(0x7FFF_i16).unwrap();
    wr.finalize().unwrap();
    assert_eq!(read_wav(&p).unwrap().samples()[[0, 0]], 32767.0 / 32768.0);

    let q = dir.path().join("q.wav");
    let w = random_wave(9, 2, 400, 8000);
    let w = MultichannelWaveform::new(w.samples() * 0.9, 8000).unwrap();
    write_wav(&q, &w, WavEncoding::Int16).unwrap();
    let back = read_wav(&q).unwrap();
    let err = (w.samples() - back.samples()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    assert!(err <= 2f64.powi(-15));
}

#[test]
fn five_channel_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("five.wav");
    write_wav(&p, &random_wave(1, 5, 100, 16_000), WavEncoding::Float32).unwrap();
    assert_eq!(read_wav(&p).unwrap().channels(), 5);
}

#[test]
fn unsupported_and_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("i24.wav");
    let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 24, sample_format: hound::SampleFormat::Int };
    let mut wr = hound::WavWriter::create(&p, spec).unwrap();
    wr.write_sample(1_i32).unwrap();
    wr.finalize().unwrap();
    assert!(matches!(read_wav(&p), Err(tvbf_core::Error::UnsupportedFormat(_))));
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF0000WAVEjunkjunk").unwrap();
    assert!(read_wav(&junk).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perfect_reconstruction(seed in 0u64..10_000, len in 1usize..6000) {
        let cfg = StftConfig::wideband();
        let w = random_wave(seed, 1, len, 16_000);
        let y = istft(&stft(&w, &cfg).unwrap(), &cfg, len).unwrap();
        let err = (w.samples() - y.samples()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        prop_assert!(err < 1e-10 * w.peak().max(1e-300));
    }

    #[test]
    fn parseval_per_frame(seed in 0u64..10_000) {
        let cfg = StftConfig::new(32.0, 8.0, 8000);
        let n = 256;
        let w = random_wave(seed, 1, 3000, 8000);
        let s = stft(&w, &cfg).unwrap();
        let win = hann(n);
        let x = w.channel(0);
        for t in 2..s.frames() - 2 {
            let start = t * 64 - n / 2;
            let time: f64 = (0..n).map(|i| (x[start + i] * win[i]).powi(2)).sum();
            let f_count = s.bins();
            let freq: f64 = (0..f_count).map(|k| {
                let e = s.coeffs[[t, k, 0]].norm_sqr();
                if k == 0 || k == f_count - 1 { e } else { 2.0 * e }
            }).sum::<f64>() / n as f64;
            prop_assert!((time - freq).abs() <= 1e-8 * time.max(1e-12));
        }
    }

    #[test]
    fn linearity(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cfg = StftConfig::new(32.0, 8.0, 8000);
        let x = random_wave(seed, 2, 900, 8000);
        let y = random_wave(seed + 1, 2, 900, 8000);
        let z = MultichannelWaveform::new(x.samples() * a + y.samples() * b, 8000).unwrap();
        let (sx, sy, sz) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap(), stft(&z, &cfg).unwrap());
        for ((p, q), r) in sx.coeffs.iter().zip(sy.coeffs.iter()).zip(sz.coeffs.iter()) {
            prop_assert!((p * a + q * b - r).norm() < 1e-12 * 256.0);
        }
    }
}
