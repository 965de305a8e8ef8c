use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArrayGeometry, NoiseSpec, SceneConfig, SourceSpec, SyntheticSource, TrajectoryKind, SPEED_OF_SOUND};
use crate::error::{Error, Result};

const SAMPLER_STREAM: u64 = 3;

/// Distribution of random room/array/trajectory layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSampler {
    pub sample_rate: u32,
    pub duration: f64,
    pub frame_hop: f64,
    /// Candidate widths (= depths) of the square room, metres.
    pub room_widths: Vec<f64>,
    pub room_height: f64,
    pub t60: [f64; 2],
    pub snr_db: [f64; 2],
    pub source_height: [f64; 2],
    pub mic_height: f64,
    /// Trajectory endpoints keep at least this distance to every wall.
    pub wall_margin: f64,
    /// Half-width of the square around the room centre holding the array.
    pub array_region: f64,
    /// Minimum horizontal distance between the trajectory and the array.
    pub min_array_distance: f64,
    pub trajectory_points: usize,
    pub max_order: usize,
    pub source: SyntheticSource,
    pub noise: NoiseSpec,
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration: 3.0,
            frame_hop: 16.0,
            room_widths: vec![3.0, 3.5, 4.0, 4.5, 5.0],
            room_height: 2.5,
            t60: [0.1, 0.3],
            snr_db: [2.0, 8.0],
            source_height: [1.5, 1.9],
            mic_height: 1.0,
            wall_margin: 0.5,
            array_region: 0.5,
            min_array_distance: 0.5,
            trajectory_points: 32,
            max_order: 20,
            source: SyntheticSource::default(),
            noise: NoiseSpec::default(),
        }
    }
}

/// Shortest Sabine-feasible reverberation time of a room, with some headroom.
fn min_feasible_t60(room: [f64; 3]) -> f64 {
    let [w, d, h] = room;
    let sabine = 24.0 * std::f64::consts::LN_10 / SPEED_OF_SOUND;
    1.05 * sabine * w * d * h / (2.0 * (w * d + w * h + d * h))
}

fn segment_distance_2d(a: [f64; 3], b: [f64; 3], p: [f64; 3]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a[0] + s * dx - p[0], a[1] + s * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

impl SceneSampler {
    /// Draws a straight-line (or, with `Fixed`, a static) scene. The same seed
    /// yields the same layout for both kinds.
    pub fn sample(&self, seed: u64, kind: TrajectoryKind) -> Result<SceneConfig> {
        if kind == TrajectoryKind::Circle {
            return Err(Error::Config("circle scenes have a fixed layout, use circle_scene".into()));
        }
        if self.trajectory_points == 0 || self.room_widths.is_empty() {
            return Err(Error::Config("sampler needs trajectory points and room sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SAMPLER_STREAM);
        let w = *self.room_widths.choose(&mut rng).expect("non-empty");
        let room = [w, w, self.room_height];
        let t60_lo = self.t60[0].max(min_feasible_t60(room)).min(self.t60[1]);
        let t60 = rng.gen_range(t60_lo..=self.t60[1]);
        let snr_db = rng.gen_range(self.snr_db[0]..=self.snr_db[1]);
        let center = [
            w / 2.0 + rng.gen_range(-self.array_region..=self.array_region),
            w / 2.0 + rng.gen_range(-self.array_region..=self.array_region),
            self.mic_height,
        ];
        let array = ArrayGeometry::rectangle4(center);
        let height = rng.gen_range(self.source_height[0]..=self.source_height[1]);
        let endpoint = |rng: &mut ChaCha8Rng| {
            [
                rng.gen_range(self.wall_margin..w - self.wall_margin),
                rng.gen_range(self.wall_margin..w - self.wall_margin),
                height,
            ]
        };
        let (mut start, mut end) = (endpoint(&mut rng), endpoint(&mut rng));
        let mut tries = 0;
        while segment_distance_2d(start, end, center) < self.min_array_distance {
            tries += 1;
            if tries > 10_000 {
                return Err(Error::Config("could not place a trajectory away from the array".into()));
            }
            start = endpoint(&mut rng);
            end = endpoint(&mut rng);
        }
        let p = self.trajectory_points;
        let source_trajectory = (0..p)
            .map(|i| {
                let s = if p == 1 { 0.0 } else { i as f64 / (p - 1) as f64 };
                [0, 1, 2].map(|a| start[a] + s * (end[a] - start[a]))
            })
            .collect();
        let cfg = SceneConfig {
            room_dims: room,
            t60,
            trajectory_kind: kind,
            source_trajectory,
            snr_db,
            seed,
            sample_rate: self.sample_rate,
            duration: self.duration,
            frame_hop: self.frame_hop,
            max_order: self.max_order,
            array,
            source: SourceSpec::Synthetic(self.source.clone()),
            noise: self.noise.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Source circling the array once in a 6.5 m x 6.5 m x 3 m room, sampled at
/// `points` positions starting at azimuth 0 and turning counter-clockwise.
pub fn circle_scene(seed: u64, sample_rate: u32, duration: f64, points: usize, radius: f64) -> Result<SceneConfig> {
    let room = [6.5, 6.5, 3.0];
    let center = [3.25, 3.25, 1.0];
    let source_trajectory = (0..points)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / points as f64;
            [center[0] + radius * phi.cos(), center[1] + radius * phi.sin(), 1.7]
        })
        .collect();
    let cfg = SceneConfig {
        room_dims: room,
        t60: 0.2,
        trajectory_kind: TrajectoryKind::Circle,
        source_trajectory,
        snr_db: 5.0,
        seed,
        sample_rate,
        duration,
        frame_hop: 16.0,
        max_order: 20,
        array: ArrayGeometry::rectangle4(center),
        source: SourceSpec::Synthetic(SyntheticSource::default()),
        noise: NoiseSpec::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}
