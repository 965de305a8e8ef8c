use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voiced, speech-like test signal: harmonic bursts with random pitch
/// separated by silences, starting and ending silent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Shortest and longest on/off segment in seconds.
    pub segment_min: f64,
    pub segment_max: f64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { f0_min: 100.0, f0_max: 250.0, segment_min: 0.2, segment_max: 0.5 }
    }
}

impl SyntheticSource {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0_min > 0.0 && self.f0_min <= self.f0_max) {
            return Err(Error::Config(format!("invalid pitch range {}..{}", self.f0_min, self.f0_max)));
        }
        if !(self.segment_min > 0.0 && self.segment_min <= self.segment_max) {
            return Err(Error::Config("invalid segment length range".into()));
        }
        Ok(())
    }
}

pub fn synthetic_source<R: Rng>(spec: &SyntheticSource, sample_rate: u32, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    let fs = sample_rate as f64;
    let ramp_len = ((0.01 * fs) as usize).max(1);
    let mut out = vec![0.0; len];
    let mut pos = 0usize;
    let mut active = false;
    while pos < len {
        let seg = ((rng.gen_range(spec.segment_min..=spec.segment_max) * fs) as usize).max(1);
        let end = (pos + seg).min(len);
        // keep a trailing silence of at least one minimal segment
        let tail = (spec.segment_min * fs) as usize;
        let end_active = end.min(len.saturating_sub(tail));
        if active && end_active > pos {
            let f0 = rng.gen_range(spec.f0_min..=spec.f0_max);
            let glide: f64 = rng.gen_range(-0.1..0.1);
            let n_seg = end_active - pos;
            let harmonics = ((0.45 * fs / (f0 * (1.0 + glide.abs()))) as usize).max(1);
            let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
            let mut phase = 0.0;
            for i in 0..n_seg {
                let f = f0 * (1.0 + glide * i as f64 / n_seg as f64);
                phase += std::f64::consts::TAU * f / fs;
                let mut v = 0.0;
                for (k, ph) in phases.iter().enumerate() {
                    let k1 = (k + 1) as f64;
                    v += (k1 * phase + ph).sin() / k1;
                }
                let edge = i.min(n_seg - 1 - i);
                let gain = if edge < ramp_len {
                    0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp_len as f64).cos()
                } else {
                    1.0
                };
                out[pos + i] = v * gain;
            }
        }
        active = !active;
        pos = end;
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Ok(out)
}
