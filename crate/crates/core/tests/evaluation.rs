use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tvbf_core::evaluation::*;
use tvbf_core::mvdr::BeamformerFilters;
use tvbf_core::scene::{generate_scene, ArrayGeometry, SceneSampler, TrajectoryKind, SPEED_OF_SOUND};
use tvbf_core::signal::StftConfig;
use tvbf_core::training::reference_channel;
use tvbf_core::Error;

fn white(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn snr_closed_forms() {
    let s = white(1, 1000);
    assert_eq!(metric_snr(&s, &s).unwrap(), METRIC_CAP_DB);
    let half: Vec<f64> = s.iter().map(|x| 0.5 * x).collect();
    assert!((metric_snr(&half, &s).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
    let n = white(2, 1000);
    let scale = (s.iter().map(|x| x * x).sum::<f64>() / 100.0 / n.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let noisy: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + scale * b).collect();
    assert!((metric_snr(&noisy, &s).unwrap() - 20.0).abs() < 1e-9);
    assert!(matches!(metric_snr(&s, &vec![0.0; 1000]), Err(Error::UndefinedSnr(_))));
    assert!(matches!(metric_snr(&s[..10], &s), Err(Error::ShapeMismatch(_))));
}

/// Least squares against an explicit delay matrix, solved by SVD.
fn sdr_by_svd(estimate: &[f64], reference: &[f64], taps: usize) -> f64 {
    let n = reference.len();
    let a = DMatrix::from_fn(n, taps, |i, k| if i >= k { reference[i - k] } else { 0.0 });
    let b = DVector::from_column_slice(estimate);
    let g = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
    let p = &a * g;
    let e = &b - &p;
    10.0 * (p.norm_squared() / e.norm_squared()).log10()
}

#[test]
fn sdr_matches_direct_least_squares() {
    let s = white(3, 600);
    let n = white(4, 600);
    for (taps, mix) in [(1, 0.3), (8, 0.5), (32, 2.0)] {
        let est: Vec<f64> = s.iter().zip(&n).enumerate().map(|(i, (a, b))| a + mix * b + if i > 2 { 0.4 * s[i - 3] } else { 0.0 }).collect();
        let fast = metric_sdr_fir(&est, &s, taps).unwrap();
        let slow = sdr_by_svd(&est, &s, taps);
        assert!((fast - slow).abs() < 1e-6, "taps {taps}: {fast} vs {slow}");
    }
}

#[test]
fn sdr_absorbs_delays() {
    let s = white(5, 4000);
    let delayed: Vec<f64> = (0..4000).map(|i| if i >= 10 { 0.7 * s[i - 10] } else { 0.0 }).collect();
    assert!(metric_sdr_fir(&delayed, &s, 64).unwrap() >= 100.0);
    assert_eq!(metric_sdr_fir(&s, &s, 1).unwrap(), METRIC_CAP_DB);
    // the plain SNR does not forgive the delay
    assert!(metric_snr(&delayed, &s).unwrap() < 3.0);
}

#[test]
fn sdr_of_independent_noise() {
    let s = white(6, 400_000);
    let n = white(7, 400_000);
    assert!(metric_sdr_fir(&n, &s, 16).unwrap() <= -40.0);
}

#[test]
fn sdr_rejects_bad_inputs() {
    let s = white(8, 100);
    assert!(matches!(metric_sdr_fir(&s, &s, 0), Err(Error::InvalidInput(_))));
    assert!(matches!(metric_sdr_fir(&s, &s, 100), Err(Error::InvalidInput(_))));
    assert!(matches!(metric_sdr_fir(&s, &vec![0.0; 100], 4), Err(Error::UndefinedSnr(_))));
    assert!(matches!(metric_sdr_fir(&vec![0.0; 100], &s, 4), Err(Error::UndefinedSnr(_))));
}

fn two_mics(a: [f64; 2], b: [f64; 2]) -> ArrayGeometry {
    ArrayGeometry { mic_positions: vec![[a[0], a[1], 1.0], [b[0], b[1], 1.0]], reference_channel: 0 }
}

/// Delay-and-sum filter aligned to a plane wave from `az` at bin `bin`.
fn delay_and_sum(geometry: &ArrayGeometry, az: f64, bin: usize, bins: usize, sample_rate: u32) -> BeamformerFilters {
    let n_fft = 2 * (bins - 1);
    let f = bin as f64 * sample_rate as f64 / n_fft as f64;
    let p0 = geometry.center();
    let c = geometry.channels();
    let mut w = Array3::zeros((1, bins, c));
    for (ch, p) in geometry.mic_positions.iter().enumerate() {
        // arrival time relative to the centre, computed directly from geometry
        let lead = (az.to_radians().cos() * (p[0] - p0[0]) + az.to_radians().sin() * (p[1] - p0[1])) / SPEED_OF_SOUND;
        w[[0, bin, ch]] = Complex64::from_polar(1.0 / c as f64, 2.0 * std::f64::consts::PI * f * lead);
    }
    BeamformerFilters { w, reference: 0, degenerate: 0 }
}

#[test]
fn broadside_delay_and_sum_peaks_at_ninety_degrees() {
    let geo = two_mics([0.0, 0.0], [0.1, 0.0]);
    // 1 kHz is bin 64 of a 512-point transform at 8 kHz
    let w = delay_and_sum(&geo, 90.0, 64, 257, 8000);
    let p = beam_pattern(&w, &geo, 8000, 0, &[1000.0], 1.0).unwrap();
    assert_eq!(p.azimuths_deg.len(), 360);
    let lobe = p.main_lobe(0);
    assert!(angle_diff_deg(lobe, 90.0) <= 1.0 || angle_diff_deg(lobe, 270.0) <= 1.0, "{lobe}");
    assert!(p.gains_db[[90, 0]].abs() < 1e-9);
    assert!(p.gains_db[[0, 0]] < -0.5);
}

#[test]
fn single_microphone_is_omnidirectional() {
    let geo = ArrayGeometry::rectangle4([2.0, 2.0, 1.0]);
    let w = BeamformerFilters::passthrough(3, 257, 4, 0);
    let p = beam_pattern(&w, &geo, 8000, 2, &[1000.0, 2000.0], 5.0).unwrap();
    assert!(p.gains_db.iter().all(|g| g.abs() < 1e-12));
    assert!(p.azimuths_deg.iter().all(|a| (0.0..360.0).contains(a)));
}

#[test]
fn beam_pattern_rejects_mismatches() {
    let geo = ArrayGeometry::rectangle4([2.0, 2.0, 1.0]);
    let w = BeamformerFilters::passthrough(3, 257, 2, 0);
    assert!(beam_pattern(&w, &geo, 8000, 0, &[1000.0], 5.0).is_err());
    let w = BeamformerFilters::passthrough(3, 257, 4, 0);
    assert!(beam_pattern(&w, &geo, 8000, 3, &[1000.0], 5.0).is_err());
    assert!(beam_pattern(&w, &geo, 8000, 0, &[1000.0], 0.0).is_err());
}

#[test]
fn angles() {
    assert!((azimuth_deg([0.0, 0.0, 0.0], [0.0, 1.0, 5.0]) - 90.0).abs() < 1e-12);
    assert!((azimuth_deg([0.0, 0.0, 0.0], [0.0, -1.0, 0.0]) - 270.0).abs() < 1e-12);
    assert!((angle_diff_deg(350.0, 10.0) - 20.0).abs() < 1e-12);
    assert!((angle_diff_deg(10.0, 190.0) - 180.0).abs() < 1e-12);
}

#[test]
fn system_names_round_trip() {
    for s in System::ALL {
        assert_eq!(System::parse(s.name()).unwrap(), s);
    }
    assert_eq!(System::parse("blk").unwrap(), System::Blk);
    assert!(System::parse("gev").is_err());
}

fn small_report() -> (EvalReport, Vec<f64>) {
    let sampler = SceneSampler { duration: 1.0, max_order: 6, ..SceneSampler::default() };
    let utts: Vec<_> = (0..2).map(|i| generate_scene(&sampler.sample(40 + i, TrajectoryKind::Line).unwrap()).unwrap()).collect();
    let items: Vec<EvalItem> = utts.iter().enumerate().map(|(i, u)| EvalItem { id: format!("u{i}"), utterance: u, masks: None }).collect();
    let params = EvalParams { block: 10, stft: StftConfig::new(32.0, 8.0, 8000), ..EvalParams::default() };
    let report = compare_systems(&items, None, &params, "small", "abc").unwrap();
    let r = reference_channel(&utts[0]);
    let mix = utts[0].mixture.channel(r).to_vec();
    let clean = utts[0].clean_reverberant.channel(r).to_vec();
    let mixture_snr = metric_snr(&mix, &clean).unwrap();
    (report, vec![mixture_snr, metric_sdr_fir(&mix, &clean, params.sdr_taps).unwrap()])
}

#[test]
fn report_rows_and_means() {
    let (report, mixture) = small_report();
    // no networks: the attention system is skipped
    assert_eq!(report.systems(), [System::Mixture, System::Masking, System::Tiv, System::Onl, System::Blk]);
    assert_eq!(report.rows.len(), 10);
    assert_eq!(report.seeds.len(), 2);
    let first = &report.rows[0];
    assert_eq!((first.utterance.as_str(), first.system), ("u0", System::Mixture));
    assert_eq!([first.snr_db, first.sdr_db], mixture[..]);
    for s in report.systems() {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.system == s).collect();
        let snr = rows.iter().map(|r| r.snr_db).sum::<f64>() / rows.len() as f64;
        let (m, _) = report.mean(s).unwrap();
        assert!((snr - m).abs() < 1e-12);
    }
    assert!(report.mean(System::Att).is_none());
    let csv = report.to_csv();
    assert!(csv.starts_with("# dataset=small config_digest=abc sdr_taps=512\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("mean,")).count(), 5);
    // masking and beamforming both improve on the mixture
    let mix = report.mean(System::Mixture).unwrap().0;
    assert!(report.mean(System::Masking).unwrap().0 > mix);
    assert!(report.mean(System::Tiv).unwrap().0 > mix);
}

#[test]
fn report_is_deterministic() {
    assert_eq!(small_report().0, small_report().0);
}

#[test]
fn exports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let geo = ArrayGeometry::rectangle4([2.0, 2.0, 1.0]);
    let mut p = beam_pattern(&BeamformerFilters::passthrough(1, 257, 4, 0), &geo, 8000, 0, &[1000.0], 90.0).unwrap();
    p.true_azimuth_deg = Some(45.0);
    write_beam_pattern_csv(dir.path().join("bp.csv"), &p).unwrap();
    let text = std::fs::read_to_string(dir.path().join("bp.csv")).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), ["# frame=0 true_azimuth_deg=45", "azimuth_deg,gain_db_1000hz", "0,0", "90,0", "180,0", "270,0"]);
    write_grid_csv(dir.path().join("w.csv"), &ndarray::array![[0.5, 0.5], [0.0, 1.0]]).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("w.csv")).unwrap(), "0.5,0.5\n0,1\n");
    write_plot_script(dir.path().join("plot.py"), &["w.csv"], &["bp.csv"]).unwrap();
    let script = std::fs::read_to_string(dir.path().join("plot.py")).unwrap();
    assert!(script.contains("HEATMAPS = [\"w.csv\"]") && script.contains("PATTERNS = [\"bp.csv\"]"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delay_and_sum_peaks_at_steering(
        cx in 1.0f64..3.0, cy in 1.0f64..3.0, x in -0.06f64..0.06, y in -0.06f64..0.06, step in 0usize..72,
    ) {
        prop_assume!((x * x + y * y).sqrt() > 0.01);
        // spacing stays below half a wavelength at 1 kHz, so there are no grating lobes
        let geo = two_mics([cx + x, cy + y], [cx - x, cy - y]);
        let steer = step as f64 * 5.0;
        let w = delay_and_sum(&geo, steer, 64, 257, 8000);
        let p = beam_pattern(&w, &geo, 8000, 0, &[1000.0], 5.0).unwrap();
        let max = p.gains_db.column(0).iter().copied().fold(f64::MIN, f64::max);
        prop_assert!((p.gains_db[[step, 0]] - max).abs() < 1e-9);
        prop_assert!(p.gains_db[[step, 0]].abs() < 1e-9);
        // the peak is the steering azimuth or its mirror image about the array axis
        let axis = azimuth_deg(geo.mic_positions[0], geo.mic_positions[1]);
        let lobe = p.main_lobe(0);
        let mirror = (2.0 * axis - steer).rem_euclid(360.0);
        prop_assert!(angle_diff_deg(lobe, steer) <= 5.0 + 1e-9 || angle_diff_deg(lobe, mirror) <= 5.0 + 1e-9, "{lobe} {steer} {mirror}");
    }
}
