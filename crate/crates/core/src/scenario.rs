//! TOML scenario files.
//!
//! ```toml
//! seed = 7
//! sample_rate_hz = 16000
//! input_sir_db = 10.0
//! soi_index = 0
//! ref_mic = 0
//! num_sources = 2        # positions taken from the default geometry
//! num_mics = 2
//!
//! [room]                 # optional, defaults to 7 x 5 x 2.75 m, rt60 0.2 s
//! dimensions = [7.0, 5.0, 2.75]
//! rt60 = 0.2
//!
//! [signals]              # or: kind = "files", paths = ["a.wav", "b.wav"]
//! kind = "synthetic"
//! duration_s = 10.0
//! ```
//!
//! Explicit `sources = [[x, y, z], ...]` and `mics = [...]` override the
//! default geometry. [`ScenarioFile::resolve`] expands every default and
//! returns the fully explicit file alongside the runnable [`Scenario`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roomsim::{default_geometry, synthetic_speech, Point, RoomSpec, Scenario};
use crate::stft::AudioBuffer;
use crate::wav::read_wav;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SignalSpec {
    /// Seeded speech-like noise, one independent stream per source.
    Synthetic { duration_s: f64 },
    /// Mono WAV files, relative to the scenario file. Truncated to the shortest.
    Files { paths: Vec<PathBuf> },
}

impl Default for SignalSpec {
    fn default() -> Self {
        SignalSpec::Synthetic { duration_s: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
    pub input_sir_db: f64,
    #[serde(default)]
    pub soi_index: usize,
    #[serde(default)]
    pub ref_mic: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_sources: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_mics: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mics: Option<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomSpec>,
    #[serde(default)]
    pub signals: SignalSpec,
}

fn default_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

/// Seed of the synthetic signal for source `index`.
pub fn source_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn pick(default: &[Point], count: Option<usize>, what: &str) -> Result<Vec<Point>> {
    let n = count.unwrap_or(2);
    if n == 0 || n > default.len() {
        return Err(Error::Scenario(format!(
            "default geometry provides 1..={} {what}, requested {n}",
            default.len()
        )));
    }
    Ok(default[..n].to_vec())
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    /// Expands defaults and loads or synthesizes the source signals. Relative
    /// signal paths are taken from `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<(ScenarioFile, Scenario)> {
        let geometry = default_geometry();
        let room = self.room.unwrap_or(geometry.room);
        let sources = match &self.sources {
            Some(s) => s.clone(),
            None => pick(&geometry.sources, self.num_sources, "sources")?,
        };
        let mics = match &self.mics {
            Some(m) => m.clone(),
            None => pick(&geometry.mics, self.num_mics, "microphones")?,
        };
        if self.num_sources.is_some_and(|n| n != sources.len()) || self.num_mics.is_some_and(|n| n != mics.len()) {
            return Err(Error::Scenario("num_sources/num_mics disagree with explicit positions".into()));
        }
        let fs = self.sample_rate_hz;
        let signals = match &self.signals {
            SignalSpec::Synthetic { duration_s } => {
                if !(*duration_s > 0.0) {
                    return Err(Error::Scenario(format!("duration must be positive, got {duration_s}")));
                }
                let len = (duration_s * fs as f64).round() as usize;
                (0..sources.len())
                    .map(|i| AudioBuffer::mono(synthetic_speech(len, fs, source_seed(self.seed, i)), fs))
                    .collect::<Result<Vec<_>>>()?
            }
            SignalSpec::Files { paths } => {
                if paths.len() != sources.len() {
                    return Err(Error::Scenario(format!(
                        "{} sources but {} signal files",
                        sources.len(),
                        paths.len()
                    )));
                }
                let raw = paths
                    .iter()
                    .map(|p| {
                        let audio = read_wav(&base_dir.join(p))?;
                        if audio.num_channels() != 1 {
                            return Err(Error::Scenario(format!("{} is not mono", p.display())));
                        }
                        Ok(audio)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let len = raw.iter().map(AudioBuffer::num_samples).min().unwrap_or(0);
                raw.into_iter()
                    .map(|a| {
                        let mut x = a.channel(0);
                        x.truncate(len);
                        AudioBuffer::mono(x, a.sample_rate_hz)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let scenario = Scenario {
            room,
            source_positions: sources.clone(),
            mic_positions: mics.clone(),
            source_signals: signals,
            soi_index: self.soi_index,
            input_sir_db: self.input_sir_db,
            ref_mic: self.ref_mic,
            seed: self.seed,
        };
        scenario.validate()?;
        let resolved = ScenarioFile {
            num_sources: None,
            num_mics: None,
            sources: Some(sources),
            mics: Some(mics),
            room: Some(room),
            ..self.clone()
        };
        Ok((resolved, scenario))
    }
}
