//! End-to-end training of the speech and noise attention networks with
//! oracle masks, plus dataset generation.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvbf_autodiff::{Adam, AdamConfig, Graph, ParameterStore, Tensor};

use crate::attention::{build_scms, network_features, AttentionNet, AttentionNetConfig};
use crate::error::{Error, Result};
use crate::mask::{compute_iscm, wiener_like_mask, IscmSequence};
use crate::mvdr::{enhance, DEFAULT_LOADING};
use crate::pipeline::{pipeline_loss, snr_loss, StepInputs};
use crate::scene::{
    generate_scene, load_utterance, read_manifest, write_manifest, write_utterance, SceneConfig, SceneSampler,
    SimulatedUtterance, TrajectoryKind,
};
use crate::signal::{stft, Spectrogram, StftConfig, SynthesisPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain (0 = no limit).
    pub max_steps: usize,
    /// Longer utterances are cropped to a random window of this many frames.
    pub max_frames: usize,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    /// Weight smoothing half-width, used when evaluating only.
    pub smoothing: usize,
    /// Steps between checkpoints and dev evaluations (0 = end of training only).
    pub checkpoint_interval: usize,
    /// Frequency bins differentiated per utterance and step; all bins when
    /// the STFT has no more than this many.
    pub bins_per_step: usize,
    pub loading: f64,
    pub stft: StftConfig,
    pub net: AttentionNetConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            lr: 5e-5,
            epochs: 10,
            max_steps: 0,
            max_frames: 256,
            seed: 0,
            manifest: None,
            dev_manifest: None,
            smoothing: 0,
            checkpoint_interval: 0,
            bins_per_step: 64,
            loading: DEFAULT_LOADING,
            stft: StftConfig::new(64.0, 16.0, 8000),
            net: AttentionNetConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_frames == 0 || self.bins_per_step == 0 {
            return Err(Error::Config("max_frames and bins_per_step must be positive".into()));
        }
        if !(self.loading >= 0.0) {
            return Err(Error::Config("diagonal loading must be nonnegative".into()));
        }
        self.stft.validate()?;
        self.net.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: usize,
    pub net_s: AttentionNet,
    pub net_n: AttentionNet,
    pub adam_s: Adam,
    pub adam_n: Adam,
    pub best_dev_loss: f64,
}

impl TrainingState {
    /// Fresh networks sized for `input_dim` features. The noise network uses
    /// a different initialization seed than the speech network.
    pub fn new(config: &TrainingConfig, input_dim: usize) -> Result<Self> {
        let net_s = AttentionNet::new(config.net.clone(), input_dim)?;
        let net_n = AttentionNet::new(
            AttentionNetConfig { seed: config.net.seed.wrapping_add(1), ..config.net.clone() },
            input_dim,
        )?;
        let adam_s = Adam::new(config.adam(), net_s.params());
        let adam_n = Adam::new(config.adam(), net_n.params());
        Ok(Self { epoch: 0, step: 0, net_s, net_n, adam_s, adam_n, best_dev_loss: f64::INFINITY })
    }

    pub fn to_store(&self) -> Result<ParameterStore> {
        let mut out = ParameterStore::new();
        let mut put = |prefix: &str, store: &ParameterStore| -> Result<()> {
            for (i, name) in store.names().iter().enumerate() {
                out.insert(format!("{prefix}{name}"), store.value(i).clone())?;
            }
            Ok(())
        };
        put("s.", self.net_s.params())?;
        put("n.", self.net_n.params())?;
        put("adam_s.", &self.adam_s.state_store(self.net_s.params())?)?;
        put("adam_n.", &self.adam_n.state_store(self.net_n.params())?)?;
        out.insert("meta.epoch", Tensor::scalar(self.epoch as f64))?;
        out.insert("meta.step", Tensor::scalar(self.step as f64))?;
        out.insert("meta.best_dev_loss", Tensor::scalar(self.best_dev_loss))?;
        Ok(out)
    }

    pub fn from_store(config: &TrainingConfig, store: &ParameterStore) -> Result<Self> {
        let take = |prefix: &str| -> Result<ParameterStore> {
            let mut p = ParameterStore::new();
            for (i, name) in store.names().iter().enumerate() {
                if let Some(rest) = name.strip_prefix(prefix) {
                    p.insert(rest, store.value(i).clone())?;
                }
            }
            Ok(p)
        };
        let net_s = AttentionNet::from_params(config.net.clone(), take("s.")?)?;
        let net_n = AttentionNet::from_params(
            AttentionNetConfig { seed: config.net.seed.wrapping_add(1), ..config.net.clone() },
            take("n.")?,
        )?;
        let adam_s = Adam::from_state_store(config.adam(), net_s.params(), &take("adam_s.")?)?;
        let adam_n = Adam::from_state_store(config.adam(), net_n.params(), &take("adam_n.")?)?;
        Ok(Self {
            epoch: store.get("meta.epoch")?.item() as usize,
            step: store.get("meta.step")?.item() as usize,
            net_s,
            net_n,
            adam_s,
            adam_n,
            best_dev_loss: store.get("meta.best_dev_loss")?.item(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_store()?.save(path)?)
    }

    pub fn load(config: &TrainingConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(config, &ParameterStore::load(path)?)
    }
}

/// Spectra, oracle-mask ISCMs and network inputs of one utterance.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub obs: Spectrogram,
    pub iscm_s: IscmSequence,
    pub iscm_n: IscmSequence,
    /// Clean reverberant reference-channel signal.
    pub reference: Vec<f64>,
    pub ref_channel: usize,
}

impl PreparedUtterance {
    pub fn frames(&self) -> usize {
        self.obs.frames()
    }
}

pub fn reference_channel(utt: &SimulatedUtterance) -> usize {
    utt.config.as_ref().map_or(0, |c| c.array.reference_channel)
}

/// STFT, oracle masks from the reference channel, and ISCMs. `crop` is the
/// first frame of a `max_frames` window when the utterance is longer.
pub fn prepare_utterance(
    utt: &SimulatedUtterance,
    stft_cfg: &StftConfig,
    max_frames: usize,
    crop: usize,
) -> Result<PreparedUtterance> {
    let hop = stft_cfg.hop_samples()?;
    let (mix, clean, noise) = if stft_cfg.frames_for(utt.mixture.len())? > max_frames {
        let (start, len) = (crop * hop, max_frames * hop);
        (utt.mixture.segment(start, len), utt.clean_reverberant.segment(start, len), utt.noise.segment(start, len))
    } else {
        (utt.mixture.clone(), utt.clean_reverberant.clone(), utt.noise.clone())
    };
    let ref_channel = reference_channel(utt);
    let obs = stft(&mix, stft_cfg)?;
    let (mask_s, mask_n) = wiener_like_mask(&stft(&clean, stft_cfg)?, &stft(&noise, stft_cfg)?, ref_channel)?;
    Ok(PreparedUtterance {
        iscm_s: compute_iscm(&obs, &mask_s)?,
        iscm_n: compute_iscm(&obs, &mask_n)?,
        obs,
        reference: clean.channel(ref_channel).to_vec(),
        ref_channel,
    })
}

/// Uniformly drawn distinct bins in ascending order, or all bins when there
/// are at most `k`.
pub fn select_bins(bins: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if bins <= k {
        return (0..bins).collect();
    }
    let mut v = rand::seq::index::sample(rng, bins, k).into_vec();
    v.sort_unstable();
    v
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2 * step as u64 + 1);
    r
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(2 * epoch as u64 + 2);
    r
}

/// Per-step inputs for one utterance: random crop and bin subset.
pub fn step_inputs(
    utt: &SimulatedUtterance,
    config: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepInputs> {
    let frames = config.stft.frames_for(utt.mixture.len())?;
    let crop = if frames > config.max_frames { rand::Rng::gen_range(rng, 0..=frames - config.max_frames) } else { 0 };
    let prep = prepare_utterance(utt, &config.stft, config.max_frames, crop)?;
    let bins = select_bins(prep.obs.bins(), config.bins_per_step, rng);
    Ok(StepInputs::new(
        network_features(&prep.iscm_s).to_tensor(),
        network_features(&prep.iscm_n).to_tensor(),
        &prep.iscm_s.psi,
        &prep.iscm_n.psi,
        &prep.obs.coeffs,
        bins,
        prep.reference,
        prep.ref_channel,
        config.loading,
    ))
}

/// Loss of one utterance; with `accumulate`, its gradients are added to
/// both networks' stores.
pub fn utterance_loss(
    state: &mut TrainingState,
    plan: &Arc<SynthesisPlan>,
    inputs: &StepInputs,
    accumulate: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let vs = state.net_s.bind(&mut g, accumulate);
    let vn = state.net_n.bind(&mut g, accumulate);
    let loss = pipeline_loss(&mut g, plan, &state.net_s, &vs, &state.net_n, &vn, inputs)?;
    let value = g.value(loss).item();
    if accumulate && value.is_finite() {
        g.backward(loss)?;
        state.net_s.params_mut().accumulate_grads(&g, &vs);
        state.net_n.params_mut().accumulate_grads(&g, &vn);
    }
    Ok(value)
}

/// Mean loss over a batch without updating anything.
pub fn batch_loss(state: &mut TrainingState, plan: &Arc<SynthesisPlan>, batch: &[StepInputs]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut sum = 0.0;
    for inputs in batch {
        sum += utterance_loss(state, plan, inputs, false)?;
    }
    Ok(sum / batch.len() as f64)
}

/// One optimizer step; returns the batch loss and the gradient norms of the
/// speech and noise networks.
pub fn train_step(
    state: &mut TrainingState,
    plan: &Arc<SynthesisPlan>,
    batch: &[StepInputs],
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    state.net_s.params_mut().zero_grads();
    state.net_n.params_mut().zero_grads();
    let k = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    for inputs in batch {
        let l = utterance_loss(state, plan, inputs, true)?;
        if !l.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {l} at step {}", state.step + 1)));
        }
        sum += l;
    }
    state.net_s.params_mut().scale_grads(k);
    state.net_n.params_mut().scale_grads(k);
    let report = StepReport {
        step: state.step + 1,
        loss: sum * k,
        grad_norm_s: state.net_s.params().grad_norm(),
        grad_norm_n: state.net_n.params().grad_norm(),
    };
    if !(report.grad_norm_s.is_finite() && report.grad_norm_n.is_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient at step {}", report.step)));
    }
    state.adam_s.step(state.net_s.params_mut())?;
    state.adam_n.step(state.net_n.params_mut())?;
    state.step += 1;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm_s: f64,
    pub grad_norm_n: f64,
}

/// Mean SNR loss of full-band attention MVDR over `dev`, with smoothing.
pub fn dev_loss(state: &TrainingState, config: &TrainingConfig, dev: &[SimulatedUtterance]) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::InvalidInput("empty dev set".into()));
    }
    let mut sum = 0.0;
    for utt in dev {
        let prep = prepare_utterance(utt, &config.stft, usize::MAX, 0)?;
        let scms = build_scms(&state.net_s, &state.net_n, &prep.iscm_s, &prep.iscm_n, config.smoothing)?;
        let out = enhance(&prep.obs, &scms.scm_s, &scms.scm_n, prep.ref_channel, &config.stft, prep.reference.len())?;
        sum += snr_loss(out.channel(0).as_slice().expect("contiguous"), &prep.reference)?;
    }
    Ok(sum / dev.len() as f64)
}

/// Where training writes its artifacts; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainingOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainingOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";

/// Runs (or resumes) training until `epochs` or `max_steps` are exhausted.
/// Returns the final state and the per-step reports of this call.
pub fn train(
    config: &TrainingConfig,
    train_set: &[SimulatedUtterance],
    dev_set: &[SimulatedUtterance],
    resume: Option<TrainingState>,
    outputs: &TrainingOutputs,
) -> Result<(TrainingState, Vec<StepReport>)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let plan = Arc::new(SynthesisPlan::new(&config.stft)?);
    let mut state = match resume {
        Some(s) => s,
        None => {
            let c = train_set[0].mixture.channels();
            TrainingState::new(config, 2 * plan.bins() * c * c)?
        }
    };
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match outputs.path(LOG_FILE) {
        Some(p) => {
            let fresh = !p.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "step,epoch,loss,grad_norm_s,grad_norm_n,dev_loss,wall_time")?;
            }
            Some(f)
        }
        None => None,
    };

    let per_epoch = train_set.len().div_ceil(config.batch_size);
    let mut total = config.epochs.saturating_mul(per_epoch);
    if config.max_steps > 0 {
        total = total.min(config.max_steps);
    }
    let started = Instant::now();
    let mut reports = Vec::new();
    while state.step < total {
        let epoch = state.step / per_epoch;
        let pos = state.step % per_epoch;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        let ids = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(order.len())];
        let mut rng = step_rng(config.seed, state.step);
        let batch = ids.iter().map(|&i| step_inputs(&train_set[i], config, &mut rng)).collect::<Result<Vec<_>>>()?;
        state.epoch = epoch;
        let report = match train_step(&mut state, &plan, &batch) {
            Ok(r) => r,
            Err(e @ Error::Diverged(_)) => {
                if let Some(p) = outputs.path(DIVERGED_CHECKPOINT) {
                    state.save(&p)?;
                    log::error!("training diverged; state written to {}", p.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let boundary = config.checkpoint_interval > 0 && report.step % config.checkpoint_interval == 0;
        let mut dev = f64::NAN;
        if (boundary || report.step == total) && !dev_set.is_empty() {
            dev = dev_loss(&state, config, dev_set)?;
            if dev < state.best_dev_loss {
                state.best_dev_loss = dev;
                if let Some(p) = outputs.path(BEST_CHECKPOINT) {
                    state.save(p)?;
                }
            }
        }
        if boundary || report.step == total {
            if let Some(p) = outputs.path(LAST_CHECKPOINT) {
                state.save(p)?;
            }
        }
        log::info!(
            "step {} epoch {} loss {:.3} dB |g_s| {:.3e} |g_n| {:.3e}",
            report.step,
            epoch,
            report.loss,
            report.grad_norm_s,
            report.grad_norm_n
        );
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{},{:.3}",
                report.step,
                epoch,
                report.loss,
                report.grad_norm_s,
                report.grad_norm_n,
                dev,
                started.elapsed().as_secs_f64()
            )?;
        }
        reports.push(report);
    }
    Ok((state, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Eval => 2,
        }
    }
}

/// Largest utterance count per split for which seeds stay disjoint.
pub const MAX_SPLIT_SIZE: usize = 1 << 28;

/// Scene seed of utterance `i` of a split; distinct across splits and
/// utterances for one dataset seed.
pub fn split_seed(seed: u64, split: Split, i: usize) -> u64 {
    (seed << 32) | (split.index() << 28) | i as u64
}

/// Scene configurations of one split.
pub fn sample_split(
    sampler: &SceneSampler,
    split: Split,
    count: usize,
    seed: u64,
    kind: TrajectoryKind,
) -> Result<Vec<SceneConfig>> {
    if count > MAX_SPLIT_SIZE {
        return Err(Error::Config(format!("at most {MAX_SPLIT_SIZE} utterances per split")));
    }
    (0..count).map(|i| sampler.sample(split_seed(seed, split, i), kind)).collect()
}

/// Renders the scenes of one split in memory.
pub fn generate_split(
    sampler: &SceneSampler,
    split: Split,
    count: usize,
    seed: u64,
    kind: TrajectoryKind,
) -> Result<Vec<SimulatedUtterance>> {
    sample_split(sampler, split, count, seed, kind)?.iter().map(generate_scene).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

/// Writes `<split>/` audio plus `<split>.manifest` for the moving scenes and
/// `<split>_fixed.manifest` for dev and eval, where the fixed variant reuses
/// each scene's draws with a static source. Returns the manifest paths.
pub fn make_dataset(
    sampler: &SceneSampler,
    counts: SplitCounts,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    if counts.train == 0 || counts.dev == 0 || counts.eval == 0 {
        return Err(Error::Config("every split needs at least one utterance".into()));
    }
    let out = out_dir.as_ref();
    let mut manifests = Vec::new();
    let plan = [
        (Split::Train, counts.train, TrajectoryKind::Line),
        (Split::Dev, counts.dev, TrajectoryKind::Line),
        (Split::Dev, counts.dev, TrajectoryKind::Fixed),
        (Split::Eval, counts.eval, TrajectoryKind::Line),
        (Split::Eval, counts.eval, TrajectoryKind::Fixed),
    ];
    for (split, count, kind) in plan {
        let tag = match kind {
            TrajectoryKind::Fixed => format!("{}_fixed", split.name()),
            _ => split.name().to_string(),
        };
        let configs = sample_split(sampler, split, count, seed, kind)?;
        manifests.push(write_scenes(&configs, out, &tag)?);
    }
    Ok(manifests)
}

/// Renders `configs` into `<out_dir>/<tag>/` and writes `<out_dir>/<tag>.manifest`
/// with paths relative to `out_dir`. Returns the manifest path.
pub fn write_scenes(configs: &[SceneConfig], out_dir: impl AsRef<Path>, tag: &str) -> Result<PathBuf> {
    let out = out_dir.as_ref();
    let dir = out.join(tag);
    let mut entries = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let utt = generate_scene(cfg)?;
        entries.push(write_utterance(&dir, &format!("{tag}_{i:05}"), &utt)?);
        log::debug!("{tag}: rendered {}/{}", i + 1, configs.len());
    }
    for e in &mut entries {
        for p in [&mut e.mixture, &mut e.clean, &mut e.noise, &mut e.scene] {
            *p = Path::new(tag).join(&*p);
        }
    }
    let path = out.join(format!("{tag}.manifest"));
    write_manifest(&path, &entries)?;
    Ok(path)
}

/// Loads every utterance of a manifest; paths are relative to its directory.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<SimulatedUtterance>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|e| load_utterance(base, e)).collect()
}
