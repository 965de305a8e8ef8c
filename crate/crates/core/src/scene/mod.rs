//! Simulated moving-source utterances: image-method room responses along a
//! trajectory, spatially distributed noise and SNR-controlled mixing.

mod io;
mod render;
mod rir;
mod sampler;
mod source;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::MultichannelWaveform;

pub use io::{config_digest, load_utterance, read_manifest, write_manifest, write_utterance, ManifestEntry, UtteranceRecord};
pub use render::{generate_diffuse_noise, generate_scene, mix_at_snr, render_moving_source, trajectory_frame_map};
pub use rir::{sabine_beta, simulate_rir, RirOptions, RirSet};
pub use sampler::{circle_scene, SceneSampler};
pub use source::{synthetic_source, SyntheticSource};

pub const SPEED_OF_SOUND: f64 = 343.0;

pub(crate) fn inside(room: [f64; 3], p: [f64; 3]) -> bool {
    (0..3).all(|a| p[a].is_finite() && p[a] > 0.0 && p[a] < room[a])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    /// Microphone coordinates in metres.
    pub mic_positions: Vec<[f64; 3]>,
    #[serde(default)]
    pub reference_channel: usize,
}

impl ArrayGeometry {
    pub fn channels(&self) -> usize {
        self.mic_positions.len()
    }

    /// Mean microphone position.
    pub fn center(&self) -> [f64; 3] {
        let n = self.mic_positions.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for a in 0..3 {
                c[a] += p[a] / n;
            }
        }
        c
    }

    /// Four microphones on a 20 cm x 19 cm rectangle around `center`.
    pub fn rectangle4(center: [f64; 3]) -> Self {
        let [x, y, z] = center;
        Self {
            mic_positions: vec![
                [x - 0.10, y + 0.095, z],
                [x + 0.10, y + 0.095, z],
                [x - 0.10, y - 0.095, z],
                [x + 0.10, y - 0.095, z],
            ],
            reference_channel: 0,
        }
    }

    pub fn validate(&self, room: [f64; 3]) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::Config("array needs at least one microphone".into()));
        }
        if self.reference_channel >= self.channels() {
            return Err(Error::Config(format!(
                "reference channel {} of {} microphones",
                self.reference_channel,
                self.channels()
            )));
        }
        match self.mic_positions.iter().find(|p| !inside(room, **p)) {
            Some(p) => Err(Error::OutsideRoom(*p)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    Line,
    Circle,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SourceSpec {
    /// Mono WAV file at the scene sample rate.
    Wav { path: PathBuf },
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub num_sources: usize,
    /// Thickness in metres of the layer along the walls holding the sources.
    pub shell: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { num_sources: 8, shell: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub room_dims: [f64; 3],
    pub t60: f64,
    pub trajectory_kind: TrajectoryKind,
    pub source_trajectory: Vec<[f64; 3]>,
    pub snr_db: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Utterance length in seconds.
    pub duration: f64,
    /// Frame shift in milliseconds used to map frames to trajectory points.
    pub frame_hop: f64,
    pub max_order: usize,
    pub array: ArrayGeometry,
    pub source: SourceSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.05..=1.0).contains(&self.t60) {
            return Err(Error::Config(format!("t60 {} s outside [0.05, 1.0]", self.t60)));
        }
        if self.room_dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Config(format!("invalid room dimensions {:?}", self.room_dims)));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("SNR must be finite".into()));
        }
        if self.sample_rate == 0 || !(self.duration > 0.0) || !(self.frame_hop > 0.0) {
            return Err(Error::Config("sample rate, duration and frame hop must be positive".into()));
        }
        if self.source_trajectory.is_empty() {
            return Err(Error::Config("trajectory needs at least one point".into()));
        }
        if let Some(p) = self.source_trajectory.iter().find(|p| !inside(self.room_dims, **p)) {
            return Err(Error::OutsideRoom(*p));
        }
        if self.noise.num_sources == 0 || !(self.noise.shell > 0.0) {
            return Err(Error::Config("noise needs at least one source and a positive shell".into()));
        }
        self.array.validate(self.room_dims)
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        ((self.frame_hop * self.sample_rate as f64 / 1000.0).round() as usize).max(1)
    }

    /// Points actually rendered: only the start point for a fixed source.
    pub fn rendered_trajectory(&self) -> &[[f64; 3]] {
        match self.trajectory_kind {
            TrajectoryKind::Fixed => &self.source_trajectory[..1],
            _ => &self.source_trajectory,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedUtterance {
    pub mixture: MultichannelWaveform,
    pub clean_reverberant: MultichannelWaveform,
    pub noise: MultichannelWaveform,
    pub config: Option<SceneConfig>,
    /// Trajectory point index for every STFT frame.
    pub trajectory_frame_map: Vec<usize>,
}
