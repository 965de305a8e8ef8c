use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ndarray::Array2;
use toml::Value;
use tvbf_core::attention::AttentionNet;
use tvbf_core::evaluation::{
    analyze_tracking, compare_systems, enhance_mixture, oracle_masks, run_system, write_beam_pattern_csv,
    write_grid_csv, write_plot_script, EvalItem, System,
};
use tvbf_core::mask::load_external_masks;
use tvbf_core::pipeline::pipeline_gradcheck;
use tvbf_core::scene::{circle_scene, generate_scene, load_utterance, read_manifest, SimulatedUtterance, TrajectoryKind};
use tvbf_core::signal::{read_wav, stft, write_wav, MultichannelWaveform, WavEncoding};
use tvbf_core::training::{
    load_dataset, make_dataset, sample_split, split_seed, train, write_scenes, Split, TrainingOutputs, TrainingState,
    LAST_CHECKPOINT,
};
use tvbf_autodiff::gradcheck::op_suite;

use crate::config::CliConfig;
use crate::{Command, Common, Failure};

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<CliConfig, Failure> {
    let mut o = common.overrides();
    o.extend(extra);
    CliConfig::resolve(common.config.as_deref(), &o).map_err(usage)
}

fn toml_path(p: &Path) -> String {
    Value::String(p.display().to_string()).to_string()
}

fn parse_system(s: &str) -> Result<System, Failure> {
    System::parse(s).map_err(usage)
}

fn parse_systems(list: &str) -> Result<Vec<System>, Failure> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(parse_system).collect()
}

fn load_nets(cfg: &CliConfig, checkpoint: Option<&Path>) -> anyhow::Result<Option<(AttentionNet, AttentionNet)>> {
    let Some(path) = checkpoint else { return Ok(None) };
    let state =
        TrainingState::load(&cfg.training, path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Some((state.net_s, state.net_n)))
}

fn need_nets(system: System, checkpoint: Option<&Path>) -> Outcome {
    if system == System::Att && checkpoint.is_none() {
        return Err(usage(anyhow!("the att system needs --checkpoint")));
    }
    Ok(())
}

fn as_refs(nets: &Option<(AttentionNet, AttentionNet)>) -> Option<(&AttentionNet, &AttentionNet)> {
    nets.as_ref().map(|(s, n)| (s, n))
}

pub(crate) fn run(command: Command) -> Outcome {
    match command {
        Command::Simulate { common, out, n, split, trajectory } => {
            let cfg = resolve(&common, vec![])?;
            simulate(&cfg, &out, n, &split, &trajectory).map_err(runtime)
        }
        Command::Train { common, out, manifest, dev_manifest, resume } => {
            let mut extra = Vec::new();
            if let Some(m) = &manifest {
                extra.push(format!("training.manifest={}", toml_path(m)));
            }
            if let Some(m) = &dev_manifest {
                extra.push(format!("training.dev_manifest={}", toml_path(m)));
            }
            let cfg = resolve(&common, extra)?;
            if cfg.training.manifest.is_none() {
                return Err(usage(anyhow!("no training manifest: pass --manifest or set training.manifest")));
            }
            run_training(&cfg, &out, resume).map_err(runtime)
        }
        Command::Enhance { common, out, system, checkpoint, manifest, input, masks, reference } => {
            let cfg = resolve(&common, vec![])?;
            let system = parse_system(&system)?;
            need_nets(system, checkpoint.as_deref())?;
            let source = match (manifest, input, masks) {
                (Some(m), None, _) => Source::Manifest(m),
                (None, Some(i), Some(k)) => Source::Recording { input: i, masks: k, reference },
                _ => return Err(usage(anyhow!("pass either --manifest or --input with --masks"))),
            };
            enhance(&cfg, &out, system, checkpoint.as_deref(), source).map_err(runtime)
        }
        Command::Evaluate { common, out, manifest, checkpoint, systems, alpha, block, smooth } => {
            let mut extra = Vec::new();
            if let Some(a) = alpha {
                extra.push(format!("eval.alpha={a:?}"));
            }
            if let Some(b) = block {
                extra.push(format!("eval.block={b}"));
            }
            if let Some(l) = smooth {
                extra.push(format!("eval.smoothing={l}"));
            }
            let mut cfg = resolve(&common, extra)?;
            if let Some(list) = systems {
                cfg.eval.systems = parse_systems(&list)?;
                if cfg.eval.systems.is_empty() {
                    return Err(usage(anyhow!("--systems is empty")));
                }
            }
            evaluate(&cfg, &out, &manifest, checkpoint.as_deref()).map_err(runtime)
        }
        Command::Beampattern { common, out, system, checkpoint, manifest, utterance } => {
            let cfg = resolve(&common, vec![])?;
            let system = parse_system(&system)?;
            if matches!(system, System::Mixture | System::Masking) {
                return Err(usage(anyhow!("{} has no beam pattern", system.name())));
            }
            need_nets(system, checkpoint.as_deref())?;
            beampattern(&cfg, &out, system, checkpoint.as_deref(), manifest.as_deref(), utterance).map_err(runtime)
        }
        Command::Gradcheck { common, out } => {
            let cfg = resolve(&common, vec![])?;
            gradcheck(&cfg, out.as_deref())
        }
    }
}

fn simulate(cfg: &CliConfig, out: &Path, n: Option<usize>, split: &str, trajectory: &str) -> anyhow::Result<()> {
    cfg.write_snapshot(out)?;
    let Some(n) = n else {
        for p in make_dataset(&cfg.scene, cfg.dataset.counts(), cfg.seed, out)? {
            log::info!("wrote {}", p.display());
        }
        return Ok(());
    };
    let split = match split {
        "train" => Split::Train,
        "dev" => Split::Dev,
        _ => Split::Eval,
    };
    let (configs, tag) = match trajectory {
        "circle" => {
            let c = &cfg.beampattern.circle;
            let configs = (0..n)
                .map(|i| circle_scene(split_seed(cfg.seed, split, i), cfg.scene.sample_rate, c.duration, c.points, c.radius))
                .collect::<tvbf_core::Result<Vec<_>>>()?;
            (configs, format!("{}_circle", split.name()))
        }
        "fixed" => (sample_split(&cfg.scene, split, n, cfg.seed, TrajectoryKind::Fixed)?, format!("{}_fixed", split.name())),
        _ => (sample_split(&cfg.scene, split, n, cfg.seed, TrajectoryKind::Line)?, split.name().to_string()),
    };
    let path = write_scenes(&configs, out, &tag)?;
    log::info!("wrote {} scenes to {}", configs.len(), path.display());
    Ok(())
}

fn run_training(cfg: &CliConfig, out: &Path, resume: bool) -> anyhow::Result<()> {
    let t = &cfg.training;
    let manifest = t.manifest.as_ref().expect("checked by caller");
    let train_set = load_dataset(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let dev_set = match &t.dev_manifest {
        Some(m) => load_dataset(m).with_context(|| format!("loading {}", m.display()))?,
        None => Vec::new(),
    };
    let state = if resume {
        let ckpt = out.join(LAST_CHECKPOINT);
        Some(TrainingState::load(t, &ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?)
    } else {
        None
    };
    cfg.write_snapshot(out)?;
    log::info!("training on {} utterances ({} dev)", train_set.len(), dev_set.len());
    let (state, reports) = train(t, &train_set, &dev_set, state, &TrainingOutputs::in_dir(out))?;
    if let Some(last) = reports.last() {
        log::info!("finished at step {} with loss {:.3} dB", state.step, last.loss);
    }
    Ok(())
}

enum Source {
    Manifest(PathBuf),
    Recording { input: PathBuf, masks: PathBuf, reference: usize },
}

fn enhance(cfg: &CliConfig, out: &Path, system: System, checkpoint: Option<&Path>, source: Source) -> anyhow::Result<()> {
    let nets = load_nets(cfg, checkpoint)?;
    let digest = cfg.write_snapshot(out)?;
    log::debug!("configuration digest {digest}");
    let mono = |v: Vec<f64>, sr: u32| MultichannelWaveform::mono(v, sr);
    match source {
        Source::Manifest(m) => {
            let base = m.parent().unwrap_or(Path::new("."));
            for entry in read_manifest(&m)? {
                let utt = load_utterance(base, &entry)?;
                let masks = oracle_masks(&utt, &cfg.eval.stft)?;
                let y = run_system(system, &utt, &masks, &cfg.eval, as_refs(&nets))?;
                let path = out.join(format!("{}_{}.wav", entry.id, system.name()));
                write_wav(&path, &mono(y, utt.mixture.sample_rate())?, WavEncoding::Float32)?;
                log::info!("wrote {}", path.display());
            }
        }
        Source::Recording { input, masks, reference } => {
            let wave = read_wav(&input)?;
            let obs = stft(&wave, &cfg.eval.stft)?;
            let masks = load_external_masks(&masks, (obs.frames(), obs.bins()))?;
            let y = enhance_mixture(system, &wave, reference, &masks, &cfg.eval, as_refs(&nets))?;
            let stem = input.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
            let path = out.join(format!("{stem}_{}.wav", system.name()));
            write_wav(&path, &mono(y, wave.sample_rate())?, WavEncoding::Float32)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn evaluate(cfg: &CliConfig, out: &Path, manifest: &Path, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let nets = load_nets(cfg, checkpoint)?;
    let digest = cfg.write_snapshot(out)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let utts = entries.iter().map(|e| load_utterance(base, e)).collect::<tvbf_core::Result<Vec<_>>>()?;
    let items: Vec<EvalItem> =
        entries.iter().zip(&utts).map(|(e, u)| EvalItem { id: e.id.clone(), utterance: u, masks: None }).collect();
    let report = compare_systems(&items, as_refs(&nets), &cfg.eval, &manifest.display().to_string(), &digest)?;
    let path = out.join("report.csv");
    report.write_csv(&path)?;
    println!("{:<10} {:>10} {:>10}", "system", "snr_db", "sdr_db");
    for s in report.systems() {
        let (snr, sdr) = report.mean(s).expect("system has rows");
        println!("{:<10} {snr:>10.2} {sdr:>10.2}", s.name());
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

fn beampattern(
    cfg: &CliConfig,
    out: &Path,
    system: System,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    index: usize,
) -> anyhow::Result<()> {
    let nets = load_nets(cfg, checkpoint)?;
    cfg.write_snapshot(out)?;
    let utt: SimulatedUtterance = match manifest {
        Some(m) => {
            let entries = read_manifest(m)?;
            let e = entries.get(index).ok_or_else(|| anyhow!("{} has {} utterances", m.display(), entries.len()))?;
            load_utterance(m.parent().unwrap_or(Path::new(".")), e)?
        }
        None => {
            let c = &cfg.beampattern.circle;
            let seed = split_seed(cfg.seed, Split::Eval, index);
            generate_scene(&circle_scene(seed, cfg.scene.sample_rate, c.duration, c.points, c.radius)?)?
        }
    };
    let b = &cfg.beampattern;
    if b.freqs_hz.is_empty() {
        bail!("beampattern.freqs_hz is empty");
    }
    let masks = oracle_masks(&utt, &cfg.eval.stft)?;
    let a = analyze_tracking(system, &utt, &masks, &cfg.eval, as_refs(&nets), &b.freqs_hz, b.az_step_deg, b.tolerance_deg)?;

    let mut tracking = String::from("frame,active,true_azimuth_deg");
    for f in &b.freqs_hz {
        write!(tracking, ",main_lobe_deg_{f}hz")?;
    }
    tracking.push('\n');
    for (t, p) in a.patterns.iter().enumerate() {
        write!(tracking, "{t},{},{}", a.active[t] as u8, p.true_azimuth_deg.unwrap_or(f64::NAN))?;
        for k in 0..b.freqs_hz.len() {
            write!(tracking, ",{}", p.main_lobe(k))?;
        }
        tracking.push('\n');
    }
    std::fs::write(out.join("tracking.csv"), tracking)?;

    let mut heatmaps = Vec::new();
    let gains = Array2::from_shape_fn((a.patterns.len(), a.patterns[0].azimuths_deg.len()), |(t, i)| {
        a.patterns[t].gains_db[[i, 0]]
    });
    let gains_name = format!("beam_gains_{}hz.csv", b.freqs_hz[0]);
    write_grid_csv(out.join(&gains_name), &gains)?;
    heatmaps.push(gains_name);
    for (name, v) in [("weights_speech.csv", &a.visual_s), ("weights_noise.csv", &a.visual_n)] {
        if let Some(v) = v {
            write_grid_csv(out.join(name), v)?;
            heatmaps.push(name.to_string());
        }
    }
    let active: Vec<usize> = (0..a.active.len()).filter(|t| a.active[*t]).collect();
    let mut patterns = Vec::new();
    let count = b.export_frames.min(active.len());
    for j in 0..count {
        let t = active[(2 * j + 1) * active.len() / (2 * count)];
        let name = format!("pattern_frame{t:04}.csv");
        write_beam_pattern_csv(out.join(&name), &a.patterns[t])?;
        patterns.push(name);
    }
    let h: Vec<&str> = heatmaps.iter().map(String::as_str).collect();
    let p: Vec<&str> = patterns.iter().map(String::as_str).collect();
    write_plot_script(out.join("plot.py"), &h, &p)?;

    println!("active frames            {}", a.active_frames());
    println!("main lobe within {:>4}°   {:.3}", b.tolerance_deg, a.lobe_fraction());
    if let Some(m) = a.noise_inactive_mass() {
        println!("noise weight on silence  {m:.3}");
    }
    Ok(())
}

fn gradcheck(cfg: &CliConfig, out: Option<&Path>) -> Outcome {
    if let Some(dir) = out {
        cfg.write_snapshot(dir).map_err(runtime)?;
    }
    let g = &cfg.gradcheck;
    let ops = op_suite(cfg.seed).map_err(runtime)?;
    let mut failed = 0;
    println!("{:<24} {:>12}  status", "op", "max_rel_err");
    for op in &ops {
        let ok = op.max_rel_err < g.op_threshold;
        failed += usize::from(!ok);
        println!("{:<24} {:>12.3e}  {}", op.name, op.max_rel_err, if ok { "PASS" } else { "FAIL" });
    }
    let chain = pipeline_gradcheck(cfg.seed).map_err(runtime)?;
    let ok = chain < g.pipeline_threshold;
    failed += usize::from(!ok);
    println!("{:<24} {:>12.3e}  {}", "pipeline", chain, if ok { "PASS" } else { "FAIL" });
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} gradient checks failed")));
    }
    Ok(())
}
