use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::rir::{RirOptions, RirSet};
use super::{inside, ArrayGeometry, NoiseSpec, SceneConfig, SimulatedUtterance, SourceSpec};
use crate::error::{Error, Result};
use crate::signal::{fft_convolve, read_wav, MultichannelWaveform};

pub(crate) const SOURCE_STREAM: u64 = 1;
pub(crate) const NOISE_STREAM: u64 = 2;

/// Ramp rising from 0 to 1 over `width` samples centred on `b`.
fn ramp(n: usize, b: f64, width: usize) -> f64 {
    if width == 0 {
        return if n as f64 >= b { 1.0 } else { 0.0 };
    }
    ((n as f64 + 0.5 - (b - width as f64 / 2.0)) / width as f64).clamp(0.0, 1.0)
}

/// Splits the dry signal into one segment per trajectory point, convolves
/// each with its impulse response and joins them with linear cross-fades of
/// `crossfade` samples. The segment gains sum to one at every sample.
pub fn render_moving_source(
    dry: &MultichannelWaveform,
    rirs: &RirSet,
    crossfade: usize,
) -> Result<MultichannelWaveform> {
    if dry.channels() != 1 {
        return Err(Error::InvalidInput(format!("dry source must be mono, got {} channels", dry.channels())));
    }
    let (points, channels, taps) = rirs.rirs.dim();
    let len = dry.len();
    if points == 0 {
        return Err(Error::InvalidInput("no trajectory points".into()));
    }
    if len < points {
        return Err(Error::InvalidInput(format!("{len} samples cannot cover {points} trajectory points")));
    }
    let x = dry.channel(0);
    let bounds: Vec<f64> = (0..=points).map(|p| (p * len / points) as f64).collect();
    let half = crossfade.div_ceil(2) + 1;
    let mut out = Array2::zeros((channels, len + taps - 1));
    for p in 0..points {
        let lo = (bounds[p] as usize).saturating_sub(if p == 0 { 0 } else { half });
        let hi = if p + 1 == points { len } else { (bounds[p + 1] as usize + half).min(len) };
        let seg: Vec<f64> = (lo..hi)
            .map(|n| {
                let rise = if p == 0 { 1.0 } else { ramp(n, bounds[p], crossfade) };
                let fall = if p + 1 == points { 0.0 } else { ramp(n, bounds[p + 1], crossfade) };
                x[n] * (rise - fall)
            })
            .collect();
        if seg.iter().all(|v| *v == 0.0) {
            continue;
        }
        for c in 0..channels {
            let h = rirs.rirs.slice(ndarray::s![p, c, ..]).to_vec();
            let y = fft_convolve(&seg, &h);
            let mut row = out.row_mut(c);
            for (i, v) in y.into_iter().enumerate() {
                row[lo + i] += v;
            }
        }
    }
    MultichannelWaveform::new(out, rirs.sample_rate)
}

/// Frame `t` of `frames` belongs to trajectory point `floor(t · P / T)`.
pub fn trajectory_frame_map(frames: usize, points: usize) -> Vec<usize> {
    (0..frames).map(|t| t * points / frames.max(1)).collect()
}

fn noise_positions(room: [f64; 3], spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let margin = 1e-3;
    let mut out = Vec::with_capacity(spec.num_sources);
    while out.len() < spec.num_sources {
        let p = [0, 1, 2].map(|a| rng.gen_range(margin..room[a] - margin));
        let wall_dist = (0..3).map(|a| p[a].min(room[a] - p[a])).fold(f64::INFINITY, f64::min);
        if wall_dist <= spec.shell {
            out.push(p);
        }
    }
    out
}

/// Sum of independent Gaussian point sources placed close to the walls, each
/// heard through its own room response.
pub fn generate_diffuse_noise(
    room: [f64; 3],
    t60: f64,
    geometry: &ArrayGeometry,
    opts: &RirOptions,
    spec: &NoiseSpec,
    num_samples: usize,
    seed: u64,
) -> Result<MultichannelWaveform> {
    if num_samples == 0 {
        return Err(Error::InvalidInput("noise duration must be positive".into()));
    }
    geometry.validate(room)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    let positions = noise_positions(room, spec, &mut rng);
    let warm = opts.length.saturating_sub(1);
    let mut out = Array2::zeros((geometry.channels(), num_samples));
    for pos in positions {
        debug_assert!(inside(room, pos));
        let h = super::simulate_rir(room, t60, pos, geometry, opts)?;
        let white: Vec<f64> = (0..num_samples + warm).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for c in 0..geometry.channels() {
            let y = fft_convolve(&white, &h.row(c).to_vec());
            let mut row = out.row_mut(c);
            for i in 0..num_samples {
                row[i] += y[warm + i];
            }
        }
    }
    MultichannelWaveform::new(out, opts.sample_rate)
}

/// Scales `noise` so the reference-channel SNR equals `snr_db` and adds it to
/// `clean`. Noise longer than the clean signal is truncated.
pub fn mix_at_snr(
    clean: &MultichannelWaveform,
    noise: &MultichannelWaveform,
    snr_db: f64,
    ref_channel: usize,
) -> Result<SimulatedUtterance> {
    if clean.channels() != noise.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} clean vs {} noise channels",
            clean.channels(),
            noise.channels()
        )));
    }
    if noise.len() < clean.len() {
        return Err(Error::ShapeMismatch(format!("noise has {} samples, clean {}", noise.len(), clean.len())));
    }
    if ref_channel >= clean.channels() {
        return Err(Error::InvalidInput(format!("reference channel {ref_channel} of {}", clean.channels())));
    }
    if !snr_db.is_finite() {
        return Err(Error::UndefinedSnr("target SNR is not finite".into()));
    }
    let noise = noise.truncated(clean.len());
    let es = clean.energy(ref_channel);
    let en = noise.energy(ref_channel);
    if es == 0.0 {
        return Err(Error::UndefinedSnr("clean reference channel is silent".into()));
    }
    if en == 0.0 {
        return Err(Error::UndefinedSnr("noise reference channel is silent".into()));
    }
    let gain = (es / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = MultichannelWaveform::new(noise.samples() * gain, noise.sample_rate())?;
    let mixture = MultichannelWaveform::new(clean.samples() + scaled.samples(), clean.sample_rate())?;
    Ok(SimulatedUtterance {
        mixture,
        clean_reverberant: clean.clone(),
        noise: scaled,
        config: None,
        trajectory_frame_map: Vec::new(),
    })
}

fn dry_source(cfg: &SceneConfig) -> Result<MultichannelWaveform> {
    let n = cfg.num_samples();
    match &cfg.source {
        SourceSpec::Synthetic(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(SOURCE_STREAM);
            MultichannelWaveform::mono(super::synthetic_source(s, cfg.sample_rate, n, &mut rng)?, cfg.sample_rate)
        }
        SourceSpec::Wav { path } => {
            let w = read_wav(path)?;
            if w.sample_rate() != cfg.sample_rate {
                return Err(Error::Config(format!(
                    "{} is sampled at {} Hz, scene at {} Hz",
                    path.display(),
                    w.sample_rate(),
                    cfg.sample_rate
                )));
            }
            let mut x = w.channel(0).to_vec();
            x.resize(n, 0.0);
            MultichannelWaveform::mono(x, cfg.sample_rate)
        }
    }
}

/// Renders the full utterance described by `cfg`. The reverberant tail past
/// the configured duration is dropped.
pub fn generate_scene(cfg: &SceneConfig) -> Result<SimulatedUtterance> {
    cfg.validate()?;
    let n = cfg.num_samples();
    let opts = RirOptions::for_room(cfg.room_dims, cfg.t60, cfg.sample_rate, cfg.max_order);
    let trajectory = cfg.rendered_trajectory();
    let rirs = RirSet::simulate(cfg.room_dims, cfg.t60, trajectory, &cfg.array, &opts)?;
    let dry = dry_source(cfg)?;
    let clean = render_moving_source(&dry, &rirs, cfg.hop_samples())?.truncated(n);
    let noise = generate_diffuse_noise(cfg.room_dims, cfg.t60, &cfg.array, &opts, &cfg.noise, n, cfg.seed)?;
    let mut utt = mix_at_snr(&clean, &noise, cfg.snr_db, cfg.array.reference_channel)?;
    let frames = n.div_ceil(cfg.hop_samples());
    utt.trajectory_frame_map = trajectory_frame_map(frames, trajectory.len());
    utt.config = Some(cfg.clone());
    Ok(utt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_gains_partition_unity() {
        let len = 1000;
        let points = 7;
        let bounds: Vec<f64> = (0..=points).map(|p| (p * len / points) as f64).collect();
        for n in 0..len {
            let total: f64 = (0..points)
                .map(|p| {
                    let rise = if p == 0 { 1.0 } else { ramp(n, bounds[p], 40) };
                    let fall = if p + 1 == points { 0.0 } else { ramp(n, bounds[p + 1], 40) };
                    rise - fall
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn frame_map_spans_all_points() {
        let m = trajectory_frame_map(10, 4);
        assert_eq!(m, vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3]);
    }
}
