//! JSON-lines utterance manifests.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

/// The four emotion classes, in label-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Angry,
    Happy,
    Sad,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; 4] = [
        Emotion::Angry,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Neutral => "neutral",
        }
    }

    pub fn names() -> [&'static str; 4] {
        Self::ALL.map(Emotion::name)
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angry" => Ok(Emotion::Angry),
            "happy" => Ok(Emotion::Happy),
            "sad" => Ok(Emotion::Sad),
            "neutral" => Ok(Emotion::Neutral),
            "excited" => Err(CliError::Validation(
                "label \"excited\" is not accepted; remap it to \"happy\" when building the manifest"
                    .into(),
            )),
            other => Err(CliError::Validation(format!(
                "unknown label {other:?} (expected angry, happy, sad or neutral)"
            ))),
        }
    }
}

/// Which utterances an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFilter {
    /// Unscripted sessions only.
    Improvisation,
    /// Scripted sessions only.
    Script,
    Full,
}

impl DatasetFilter {
    pub fn keeps(self, record: &UtteranceRecord) -> bool {
        match self {
            DatasetFilter::Improvisation => !record.scripted,
            DatasetFilter::Script => record.scripted,
            DatasetFilter::Full => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFilter::Improvisation => "improvisation",
            DatasetFilter::Script => "script",
            DatasetFilter::Full => "full",
        }
    }

    pub fn apply(self, records: &[UtteranceRecord]) -> Vec<UtteranceRecord> {
        records.iter().filter(|r| self.keeps(r)).cloned().collect()
    }
}

impl fmt::Display for DatasetFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One manifest line as it appears on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub utterance_id: String,
    pub wav_path: String,
    pub label: String,
    pub session: String,
    pub scripted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub wav_path: PathBuf,
    pub label: Emotion,
    pub session: String,
    pub scripted: bool,
}

pub fn parse_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest_str(&text, path, base)
}

/// Parses manifest text. `source` only labels errors; `base` anchors
/// relative WAV paths.
pub fn parse_manifest_str(text: &str, source: &Path, base: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ManifestLine = serde_json::from_str(line).map_err(|e| CliError::Parse {
            path: source.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let label = raw.label.parse::<Emotion>().map_err(|e| match e {
            CliError::Validation(m) => {
                CliError::Validation(format!("{}:{line_no}: {m}", source.display()))
            }
            other => other,
        })?;
        if raw.utterance_id.is_empty() {
            return Err(CliError::Validation(format!(
                "{}:{line_no}: empty utterance_id",
                source.display()
            )));
        }
        if let Some(first) = seen.insert(raw.utterance_id.clone(), line_no) {
            return Err(CliError::Validation(format!(
                "{}:{line_no}: duplicate utterance_id {:?} (first on line {first})",
                source.display(),
                raw.utterance_id
            )));
        }
        let wav = PathBuf::from(&raw.wav_path);
        out.push(UtteranceRecord {
            utterance_id: raw.utterance_id,
            wav_path: if wav.is_absolute() {
                wav
            } else {
                base.join(wav)
            },
            label,
            session: raw.session,
            scripted: raw.scripted,
        });
    }
    Ok(out)
}
