use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SceneConfig, SimulatedUtterance};
use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav, WavEncoding};

/// Per-utterance metadata stored next to the audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub trajectory_frame_map: Vec<usize>,
    pub scene: SceneConfig,
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub scene: PathBuf,
    pub seed: u64,
    /// Hex SHA-256 prefix of the scene TOML, to detect edited or swapped files.
    pub digest: String,
}

const MANIFEST_HEADER: &str = "# id\tmixture\tclean\tnoise\tscene\tseed\tdigest";

/// Short content digest of a configuration text.
pub fn config_digest(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes `<id>_{mixture,clean,noise}.wav` and `<id>.toml` into `dir`.
pub fn write_utterance(dir: impl AsRef<Path>, id: &str, utt: &SimulatedUtterance) -> Result<ManifestEntry> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let scene = utt
        .config
        .clone()
        .ok_or_else(|| Error::InvalidInput("utterance has no scene configuration".into()))?;
    let record = UtteranceRecord { trajectory_frame_map: utt.trajectory_frame_map.clone(), scene };
    let text = toml::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
    let entry = ManifestEntry {
        id: id.to_string(),
        mixture: format!("{id}_mixture.wav").into(),
        clean: format!("{id}_clean.wav").into(),
        noise: format!("{id}_noise.wav").into(),
        scene: format!("{id}.toml").into(),
        seed: record.scene.seed,
        digest: config_digest(&text),
    };
    write_wav(dir.join(&entry.mixture), &utt.mixture, WavEncoding::Float32)?;
    write_wav(dir.join(&entry.clean), &utt.clean_reverberant, WavEncoding::Float32)?;
    write_wav(dir.join(&entry.noise), &utt.noise, WavEncoding::Float32)?;
    std::fs::write(dir.join(&entry.scene), text)?;
    Ok(entry)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for e in entries {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.mixture.display(),
            e.clean.display(),
            e.noise.display(),
            e.scene.display(),
            e.seed,
            e.digest
        )
        .expect("write to string");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::MalformedFile(format!("{}:{}: expected 7 tab-separated columns", path.display(), lineno + 1));
        if cols.len() != 7 {
            return Err(bad());
        }
        entries.push(ManifestEntry {
            id: cols[0].to_string(),
            mixture: cols[1].into(),
            clean: cols[2].into(),
            noise: cols[3].into(),
            scene: cols[4].into(),
            seed: cols[5].parse().map_err(|_| bad())?,
            digest: cols[6].to_string(),
        });
    }
    Ok(entries)
}

pub fn load_utterance(base_dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<SimulatedUtterance> {
    let dir = base_dir.as_ref();
    let text = std::fs::read_to_string(dir.join(&entry.scene))?;
    if config_digest(&text) != entry.digest {
        return Err(Error::MalformedFile(format!("scene file of {} does not match its manifest digest", entry.id)));
    }
    let record: UtteranceRecord = toml::from_str(&text)?;
    let mixture = read_wav(dir.join(&entry.mixture))?;
    let clean_reverberant = read_wav(dir.join(&entry.clean))?;
    let noise = read_wav(dir.join(&entry.noise))?;
    if mixture.samples().dim() != clean_reverberant.samples().dim() || mixture.samples().dim() != noise.samples().dim() {
        return Err(Error::ShapeMismatch(format!("utterance {} has inconsistent components", entry.id)));
    }
    Ok(SimulatedUtterance {
        mixture,
        clean_reverberant,
        noise,
        config: Some(record.scene),
        trajectory_frame_map: record.trajectory_frame_map,
    })
}
