//! Metrics, beam patterns, weight heatmaps and system comparisons.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::attention::{build_scms, AttentionNet};
use crate::error::{Error, Result};
use crate::mask::{compute_iscm, wiener_like_mask, TimeFrequencyMask};
use crate::mvdr::{apply_filters, mvdr_filters, BeamformerFilters, DEFAULT_LOADING};
use crate::scene::{ArrayGeometry, SimulatedUtterance, SPEED_OF_SOUND};
use crate::scm::{scm_blockwise, scm_online, scm_time_invariant, visualization_weights, ScmSequence};
use crate::signal::{istft, stft, MultichannelWaveform, Spectrogram, StftConfig};
use crate::training::reference_channel;

/// Upper bound of every reported ratio, reached by perfect estimates.
pub const METRIC_CAP_DB: f64 = 120.0;

fn capped_ratio_db(signal: f64, distortion: f64) -> f64 {
    let floor = signal * 10f64.powf(-METRIC_CAP_DB / 10.0);
    10.0 * (signal / distortion.max(floor)).log10()
}

fn check_lengths(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate {} vs reference {} samples",
            estimate.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// `10 log10(‖s‖² / ‖s − ŝ‖²)`, capped at 120 dB.
pub fn metric_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let es: f64 = reference.iter().map(|x| x * x).sum();
    if es == 0.0 {
        return Err(Error::UndefinedSnr("reference is silent".into()));
    }
    let ed: f64 = reference.iter().zip(estimate).map(|(s, e)| (s - e) * (s - e)).sum();
    Ok(capped_ratio_db(es, ed))
}

/// Relative ridge added to the normal equations of the SDR projection.
pub const SDR_RIDGE: f64 = 1e-10;
pub const DEFAULT_SDR_TAPS: usize = 512;

/// SDR allowing a time-invariant distortion: the estimate is projected onto
/// the span of `taps` delayed copies of the reference (least squares FIR
/// fit), and the projection counts as signal.
pub fn metric_sdr_fir(estimate: &[f64], reference: &[f64], taps: usize) -> Result<f64> {
    check_lengths(estimate, reference)?;
    let n = reference.len();
    if taps == 0 || n <= taps {
        return Err(Error::InvalidInput(format!("{taps} taps need a signal longer than {n} samples")));
    }
    if reference.iter().all(|x| *x == 0.0) {
        return Err(Error::UndefinedSnr("reference is silent".into()));
    }
    if estimate.iter().all(|x| *x == 0.0) {
        return Err(Error::UndefinedSnr("estimate is silent".into()));
    }
    let s = reference;
    // R[j][k] = Σ_n s[n−j] s[n−k] over the observed range; first row by
    // direct sums, the rest by peeling off the last sample.
    let mut r = DMatrix::<f64>::zeros(taps, taps);
    for l in 0..taps {
        let v: f64 = (0..n - l).map(|m| s[m] * s[m + l]).sum();
        r[(0, l)] = v;
        r[(l, 0)] = v;
    }
    for j in 1..taps {
        for k in j..taps {
            let v = r[(j - 1, k - 1)] - s[n - j] * s[n - k];
            r[(j, k)] = v;
            r[(k, j)] = v;
        }
    }
    let ridge = SDR_RIDGE * r[(0, 0)];
    for j in 0..taps {
        r[(j, j)] += ridge;
    }
    let b = DVector::from_iterator(taps, (0..taps).map(|j| (j..n).map(|i| estimate[i] * s[i - j]).sum::<f64>()));
    let g = r
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("SDR normal equations are not positive definite".into()))?
        .solve(&b);
    let mut proj = vec![0.0; n];
    for (i, p) in proj.iter_mut().enumerate() {
        *p = (0..taps.min(i + 1)).map(|k| g[k] * s[i - k]).sum();
    }
    let ep: f64 = proj.iter().map(|x| x * x).sum();
    let ed: f64 = proj.iter().zip(estimate).map(|(p, e)| (e - p) * (e - p)).sum();
    if ep == 0.0 {
        return Ok(-METRIC_CAP_DB);
    }
    Ok(capped_ratio_db(ep, ed).max(-METRIC_CAP_DB))
}

/// Directional response of one frame's filters in the horizontal plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamPattern {
    /// `[azimuth][frequency]`, dB.
    pub gains_db: Array2<f64>,
    pub azimuths_deg: Vec<f64>,
    pub freqs_hz: Vec<f64>,
    pub frame: usize,
    pub true_azimuth_deg: Option<f64>,
}

impl BeamPattern {
    /// Azimuth of the largest gain at frequency index `k`.
    pub fn main_lobe(&self, k: usize) -> f64 {
        let col = self.gains_db.column(k);
        let best = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
        self.azimuths_deg[best]
    }
}

/// Lowest reported gain, keeping patterns finite for null responses.
pub const GAIN_FLOOR_DB: f64 = -240.0;

/// Far-field response `20 log10 |wᴴ d(θ, f)|` of frame `frame`. The steering
/// vector holds each microphone's relative phase for a plane wave arriving
/// from azimuth θ (counter-clockwise from +x), using the nearest STFT bin of
/// every probe frequency.
pub fn beam_pattern(
    filters: &BeamformerFilters,
    geometry: &ArrayGeometry,
    sample_rate: u32,
    frame: usize,
    freqs_hz: &[f64],
    az_step_deg: f64,
) -> Result<BeamPattern> {
    let (t_count, f_count, c) = filters.w.dim();
    if geometry.channels() != c {
        return Err(Error::ShapeMismatch(format!("{} microphones for {c}-channel filters", geometry.channels())));
    }
    if frame >= t_count {
        return Err(Error::InvalidInput(format!("frame {frame} of {t_count}")));
    }
    if !(az_step_deg > 0.0 && az_step_deg <= 360.0) {
        return Err(Error::InvalidInput(format!("azimuth step {az_step_deg}")));
    }
    let n_fft = 2 * (f_count - 1);
    let p0 = geometry.center();
    let steps = (360.0 / az_step_deg).round().max(1.0) as usize;
    let azimuths_deg: Vec<f64> = (0..steps).map(|i| i as f64 * 360.0 / steps as f64).collect();
    let mut gains = Array2::zeros((steps, freqs_hz.len()));
    for (k, &fhz) in freqs_hz.iter().enumerate() {
        let bin = ((fhz * n_fft as f64 / sample_rate as f64).round() as usize).min(f_count - 1);
        let fb = bin as f64 * sample_rate as f64 / n_fft as f64;
        for (a, &az) in azimuths_deg.iter().enumerate() {
            let (ux, uy) = (az.to_radians().cos(), az.to_radians().sin());
            let mut resp = Complex64::new(0.0, 0.0);
            for ch in 0..c {
                let p = geometry.mic_positions[ch];
                // microphones further along the arrival direction hear the wave earlier
                let tau = -(ux * (p[0] - p0[0]) + uy * (p[1] - p0[1])) / SPEED_OF_SOUND;
                let d = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * fb * tau);
                resp += filters.w[[frame, bin, ch]].conj() * d;
            }
            gains[[a, k]] = (20.0 * resp.norm().log10()).max(GAIN_FLOOR_DB);
        }
    }
    Ok(BeamPattern { gains_db: gains, azimuths_deg, freqs_hz: freqs_hz.to_vec(), frame, true_azimuth_deg: None })
}

/// Horizontal azimuth of `point` seen from `origin`, degrees in `[0, 360)`.
pub fn azimuth_deg(origin: [f64; 3], point: [f64; 3]) -> f64 {
    (point[1] - origin[1]).atan2(point[0] - origin[0]).to_degrees().rem_euclid(360.0)
}

/// Smallest absolute difference of two angles in degrees.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Frames whose reference-channel clean energy reaches `rel` of the
/// loudest frame's.
pub fn speech_active_frames(clean: &Spectrogram, ref_channel: usize, rel: f64) -> Vec<bool> {
    let e: Vec<f64> =
        (0..clean.frames()).map(|t| (0..clean.bins()).map(|f| clean.coeffs[[t, f, ref_channel]].norm_sqr()).sum()).collect();
    let max = e.iter().copied().fold(0.0, f64::max);
    e.iter().map(|&x| max > 0.0 && x >= rel * max).collect()
}

pub const ACTIVE_FRAME_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Mixture,
    Masking,
    Tiv,
    Onl,
    Blk,
    Att,
}

impl System {
    pub const ALL: [System; 6] = [System::Mixture, System::Masking, System::Tiv, System::Onl, System::Blk, System::Att];

    pub fn name(self) -> &'static str {
        match self {
            System::Mixture => "mixture",
            System::Masking => "masking",
            System::Tiv => "tiv_mvdr",
            System::Onl => "onl_mvdr",
            System::Blk => "blk_mvdr",
            System::Att => "att_mvdr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "mixture" => System::Mixture,
            "masking" => System::Masking,
            "tiv" | "tiv_mvdr" => System::Tiv,
            "onl" | "onl_mvdr" => System::Onl,
            "blk" | "blk_mvdr" => System::Blk,
            "att" | "att_mvdr" => System::Att,
            other => return Err(Error::Config(format!("unknown system `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    pub alpha: f64,
    pub block: usize,
    pub smoothing: usize,
    pub loading: f64,
    pub sdr_taps: usize,
    pub systems: Vec<System>,
    pub stft: StftConfig,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            alpha: 0.999,
            block: 50,
            smoothing: 7,
            loading: DEFAULT_LOADING,
            sdr_taps: DEFAULT_SDR_TAPS,
            systems: System::ALL.to_vec(),
            stft: StftConfig::new(64.0, 16.0, 8000),
        }
    }
}

/// Oracle masks of an utterance, from the reference channel.
pub fn oracle_masks(
    utt: &SimulatedUtterance,
    stft_cfg: &StftConfig,
) -> Result<(TimeFrequencyMask, TimeFrequencyMask)> {
    let r = reference_channel(utt);
    wiener_like_mask(&stft(&utt.clean_reverberant, stft_cfg)?, &stft(&utt.noise, stft_cfg)?, r)
}

/// Speech and noise SCMs of one MVDR system.
pub fn system_scms(
    system: System,
    obs: &Spectrogram,
    masks: &(TimeFrequencyMask, TimeFrequencyMask),
    params: &EvalParams,
    nets: Option<(&AttentionNet, &AttentionNet)>,
) -> Result<(ScmSequence, ScmSequence)> {
    let iscm_s = compute_iscm(obs, &masks.0)?;
    let iscm_n = compute_iscm(obs, &masks.1)?;
    Ok(match system {
        System::Tiv => (scm_time_invariant(&iscm_s, &masks.0)?, scm_time_invariant(&iscm_n, &masks.1)?),
        System::Onl => (scm_online(&iscm_s, params.alpha)?, scm_online(&iscm_n, params.alpha)?),
        System::Blk => (scm_blockwise(&iscm_s, &masks.0, params.block)?, scm_blockwise(&iscm_n, &masks.1, params.block)?),
        System::Att => {
            let (ns, nn) = nets.ok_or_else(|| Error::Config("att_mvdr needs trained networks".into()))?;
            let s = build_scms(ns, nn, &iscm_s, &iscm_n, params.smoothing)?;
            (s.scm_s, s.scm_n)
        }
        System::Mixture | System::Masking => {
            return Err(Error::InvalidInput(format!("{} is not a beamformer", system.name())))
        }
    })
}

/// Reference-channel output of one system.
pub fn run_system(
    system: System,
    utt: &SimulatedUtterance,
    masks: &(TimeFrequencyMask, TimeFrequencyMask),
    params: &EvalParams,
    nets: Option<(&AttentionNet, &AttentionNet)>,
) -> Result<Vec<f64>> {
    enhance_mixture(system, &utt.mixture, reference_channel(utt), masks, params, nets)
}

/// Output of one system on a bare multichannel recording.
pub fn enhance_mixture(
    system: System,
    mixture: &MultichannelWaveform,
    reference: usize,
    masks: &(TimeFrequencyMask, TimeFrequencyMask),
    params: &EvalParams,
    nets: Option<(&AttentionNet, &AttentionNet)>,
) -> Result<Vec<f64>> {
    if reference >= mixture.channels() {
        return Err(Error::InvalidInput(format!("reference channel {reference} of {}", mixture.channels())));
    }
    let len = mixture.len();
    if system == System::Mixture {
        return Ok(mixture.channel(reference).to_vec());
    }
    let obs = stft(mixture, &params.stft)?;
    if masks.0.values().dim() != (obs.frames(), obs.bins()) {
        return Err(Error::ShapeMismatch(format!(
            "masks are {:?}, spectrogram is {:?}",
            masks.0.values().dim(),
            (obs.frames(), obs.bins())
        )));
    }
    let out = if system == System::Masking {
        let mut single = Spectrogram {
            coeffs: obs.coeffs.slice(ndarray::s![.., .., reference..reference + 1]).to_owned(),
            frame_len_samples: obs.frame_len_samples,
            hop_samples: obs.hop_samples,
            fft_size: obs.fft_size,
            sample_rate: obs.sample_rate,
        };
        for ((t, f, _), z) in single.coeffs.indexed_iter_mut() {
            *z *= masks.0.values()[[t, f]];
        }
        single
    } else {
        let (scm_s, scm_n) = system_scms(system, &obs, masks, params, nets)?;
        apply_filters(&mvdr_filters(&scm_s, &scm_n, reference, params.loading)?, &obs)?
    };
    Ok(istft(&out, &params.stft, len)?.channel(0).to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub utterance: String,
    pub system: System,
    pub snr_db: f64,
    pub sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub sdr_taps: usize,
}

impl EvalReport {
    /// Systems in first-appearance order.
    pub fn systems(&self) -> Vec<System> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.system) {
                out.push(r.system);
            }
        }
        out
    }

    /// Mean (SNR, SDR) of a system, if it has rows.
    pub fn mean(&self, system: System) -> Option<(f64, f64)> {
        let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.system == system).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|r| r.snr_db).sum::<f64>() / n, rows.iter().map(|r| r.sdr_db).sum::<f64>() / n))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(out, "# dataset={} config_digest={} sdr_taps={}", self.dataset, self.config_digest, self.sdr_taps).unwrap();
        writeln!(out, "# seeds={}", seeds.join(" ")).unwrap();
        writeln!(out, "utterance,system,snr_db,sdr_db").unwrap();
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.utterance, r.system.name(), r.snr_db, r.sdr_db).unwrap();
        }
        for s in self.systems() {
            let (snr, sdr) = self.mean(s).expect("system has rows");
            writeln!(out, "mean,{},{},{}", s.name(), snr, sdr).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Named utterance for [`compare_systems`].
pub struct EvalItem<'a> {
    pub id: String,
    pub utterance: &'a SimulatedUtterance,
    /// External masks; oracle masks when absent.
    pub masks: Option<(TimeFrequencyMask, TimeFrequencyMask)>,
}

/// Runs every requested system on every utterance. `att_mvdr` is skipped
/// with a warning when no networks are given.
pub fn compare_systems(
    items: &[EvalItem<'_>],
    nets: Option<(&AttentionNet, &AttentionNet)>,
    params: &EvalParams,
    dataset: &str,
    config_digest: &str,
) -> Result<EvalReport> {
    let mut systems = params.systems.clone();
    if nets.is_none() && systems.contains(&System::Att) {
        log::warn!("no trained networks given, skipping att_mvdr");
        systems.retain(|s| *s != System::Att);
    }
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    for item in items {
        let utt = item.utterance;
        if let Some(c) = &utt.config {
            seeds.push(c.seed);
        }
        let masks = match &item.masks {
            Some(m) => m.clone(),
            None => oracle_masks(utt, &params.stft)?,
        };
        let reference = utt.clean_reverberant.channel(reference_channel(utt)).to_vec();
        for &system in &systems {
            let est = run_system(system, utt, &masks, params, nets)?;
            rows.push(EvalRow {
                utterance: item.id.clone(),
                system,
                snr_db: metric_snr(&est, &reference)?,
                sdr_db: metric_sdr_fir(&est, &reference, params.sdr_taps)?,
            });
        }
        log::debug!("evaluated {}", item.id);
    }
    Ok(EvalReport {
        rows,
        dataset: dataset.to_string(),
        seeds,
        config_digest: config_digest.to_string(),
        sdr_taps: params.sdr_taps,
    })
}

/// How well one beamformer follows a source with a known trajectory.
#[derive(Debug, Clone)]
pub struct TrackingAnalysis {
    /// One pattern per frame, probe frequencies as given.
    pub patterns: Vec<BeamPattern>,
    pub active: Vec<bool>,
    /// Active frames whose main lobe at the first probe frequency lies
    /// within the tolerance of the true azimuth.
    pub lobe_hits: usize,
    /// Visualisation weights of the speech and noise networks (attention
    /// system only).
    pub visual_s: Option<Array2<f64>>,
    pub visual_n: Option<Array2<f64>>,
}

impl TrackingAnalysis {
    pub fn active_frames(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn lobe_fraction(&self) -> f64 {
        self.lobe_hits as f64 / self.active_frames().max(1) as f64
    }

    /// Mean share of the noise visualisation weights that falls on inactive
    /// frames, over rows with nonzero mass.
    pub fn noise_inactive_mass(&self) -> Option<f64> {
        let v = self.visual_n.as_ref()?;
        let mut sum = 0.0;
        let mut rows = 0usize;
        for row in v.rows() {
            let total: f64 = row.sum();
            if total > 0.0 {
                sum += row.iter().zip(&self.active).filter(|(_, a)| !**a).map(|(w, _)| w).sum::<f64>() / total;
                rows += 1;
            }
        }
        (rows > 0).then(|| sum / rows as f64)
    }
}

/// Beam patterns of every frame of an MVDR system on a simulated scene,
/// compared with the azimuth of the trajectory point active in that frame.
#[allow(clippy::too_many_arguments)]
pub fn analyze_tracking(
    system: System,
    utt: &SimulatedUtterance,
    masks: &(TimeFrequencyMask, TimeFrequencyMask),
    params: &EvalParams,
    nets: Option<(&AttentionNet, &AttentionNet)>,
    freqs_hz: &[f64],
    az_step_deg: f64,
    tolerance_deg: f64,
) -> Result<TrackingAnalysis> {
    let cfg = utt.config.as_ref().ok_or_else(|| Error::InvalidInput("utterance has no scene description".into()))?;
    if freqs_hz.is_empty() {
        return Err(Error::InvalidInput("no probe frequency".into()));
    }
    let r = reference_channel(utt);
    let obs = stft(&utt.mixture, &params.stft)?;
    let (scm_s, scm_n) = system_scms(system, &obs, masks, params, nets)?;
    let filters = mvdr_filters(&scm_s, &scm_n, r, params.loading)?;
    let clean = stft(&utt.clean_reverberant, &params.stft)?;
    let active = speech_active_frames(&clean, r, ACTIVE_FRAME_THRESHOLD);
    let points = cfg.rendered_trajectory();
    let map = crate::scene::trajectory_frame_map(obs.frames(), points.len());
    let center = cfg.array.center();
    let mut patterns = Vec::with_capacity(obs.frames());
    let mut lobe_hits = 0;
    for t in 0..obs.frames() {
        let mut p = beam_pattern(&filters, &cfg.array, obs.sample_rate, t, freqs_hz, az_step_deg)?;
        let truth = azimuth_deg(center, points[map[t]]);
        p.true_azimuth_deg = Some(truth);
        if active[t] && angle_diff_deg(p.main_lobe(0), truth) <= tolerance_deg {
            lobe_hits += 1;
        }
        patterns.push(p);
    }
    let (visual_s, visual_n) = match (system, nets) {
        (System::Att, Some((ns, nn))) => {
            let iscm_s = compute_iscm(&obs, &masks.0)?;
            let iscm_n = compute_iscm(&obs, &masks.1)?;
            let w = build_scms(ns, nn, &iscm_s, &iscm_n, params.smoothing)?;
            (
                Some(visualization_weights(&w.weights_s, &masks.0)?.0),
                Some(visualization_weights(&w.weights_n, &masks.1)?.0),
            )
        }
        _ => (None, None),
    };
    Ok(TrackingAnalysis { patterns, active, lobe_hits, visual_s, visual_n })
}

/// Writes a matrix as CSV, one row per line.
pub fn write_grid_csv(path: impl AsRef<Path>, grid: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in grid.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    Ok(std::fs::write(path, out)?)
}

/// Beam pattern as CSV with an `azimuth_deg` column and one column per
/// probe frequency.
pub fn write_beam_pattern_csv(path: impl AsRef<Path>, pattern: &BeamPattern) -> Result<()> {
    let mut out = String::new();
    if let Some(a) = pattern.true_azimuth_deg {
        writeln!(out, "# frame={} true_azimuth_deg={a}", pattern.frame).unwrap();
    } else {
        writeln!(out, "# frame={}", pattern.frame).unwrap();
    }
    let head: Vec<String> = pattern.freqs_hz.iter().map(|f| format!("gain_db_{f}hz")).collect();
    writeln!(out, "azimuth_deg,{}", head.join(",")).unwrap();
    for (i, az) in pattern.azimuths_deg.iter().enumerate() {
        let cells: Vec<String> = pattern.gains_db.row(i).iter().map(f64::to_string).collect();
        writeln!(out, "{az},{}", cells.join(",")).unwrap();
    }
    Ok(std::fs::write(path, out)?)
}

/// Writes a small matplotlib script that renders the given heatmap CSVs
/// (plain grids) and beam-pattern CSVs next to it.
pub fn write_plot_script(path: impl AsRef<Path>, heatmaps: &[&str], patterns: &[&str]) -> Result<()> {
    let list = |v: &[&str]| v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
    let script = format!(
        r##"# Renders the exported grids: python3 plot.py
import csv, os
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
HEATMAPS = [{heatmaps}]
PATTERNS = [{patterns}]

def rows(name):
    with open(os.path.join(HERE, name)) as f:
        return [r for r in csv.reader(f) if r and not r[0].startswith("#")]

for name in HEATMAPS:
    grid = [[float(x) for x in r] for r in rows(name)]
    plt.figure(figsize=(5, 4))
    plt.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    plt.xlabel("key frame")
    plt.ylabel("query frame")
    plt.colorbar()
    plt.title(name)
    plt.savefig(os.path.join(HERE, name.rsplit(".", 1)[0] + ".png"), dpi=120)
    plt.close()

for name in PATTERNS:
    r = rows(name)
    head, body = r[0], r[1:]
    az = [float(x[0]) for x in body]
    plt.figure(figsize=(5, 4))
    for k in range(1, len(head)):
        plt.plot(az, [float(x[k]) for x in body], label=head[k])
    plt.xlabel("azimuth [deg]")
    plt.ylabel("gain [dB]")
    plt.legend()
    plt.title(name)
    plt.savefig(os.path.join(HERE, name.rsplit(".", 1)[0] + ".png"), dpi=120)
    plt.close()
"##,
        heatmaps = list(heatmaps),
        patterns = list(patterns)
    );
    Ok(std::fs::write(path, script)?)
}
