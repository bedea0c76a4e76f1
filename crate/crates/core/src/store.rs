//! On-disk epoch store: one binary file per recording plus a JSON index.
//!
//! Epoch file layout (little-endian):
//!
//! ```text
//! magic   8 bytes "GSEPOCH1"
//! count   u32     epochs in the file
//! samples u32     samples per channel per epoch
//! epoch*  u32 ordinal, u8 stage index, samples f32 EEG, samples f32 EOG
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{segment_epochs, EpochRef, LabeledEpoch, RecordingInfo, StageCounts, EPOCH_SAMPLES, TARGET_RATE_HZ};
use crate::edf::{self, hypnogram, Annotation, Recording};
use crate::error::{Error, Result};
use crate::stage::StageLabel;

pub const MAGIC: &[u8; 8] = b"GSEPOCH1";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub subject: String,
    pub night: u32,
    /// Path relative to the store directory.
    pub file: String,
    pub epochs: Vec<(usize, StageLabel)>,
    pub counts: StageCounts,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub eeg_channel: String,
    pub eog_channel: String,
    pub recordings: Vec<StoreEntry>,
}

impl StoreIndex {
    pub fn infos(&self) -> Vec<RecordingInfo> {
        self.recordings
            .iter()
            .map(|r| RecordingInfo {
                id: r.id.clone(),
                subject: r.subject.clone(),
                night: r.night,
                epochs: r.epochs.clone(),
            })
            .collect()
    }

    pub fn census(&self) -> StageCounts {
        let mut c = StageCounts::default();
        for r in &self.recordings {
            for (a, b) in c.0.iter_mut().zip(r.counts.0) {
                *a += b;
            }
        }
        c
    }
}

pub fn encode_epochs(epochs: &[LabeledEpoch]) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + epochs.len() * (5 + 8 * EPOCH_SAMPLES));
    buf.extend(MAGIC);
    buf.extend((epochs.len() as u32).to_le_bytes());
    buf.extend((EPOCH_SAMPLES as u32).to_le_bytes());
    for e in epochs {
        if e.eeg.len() != EPOCH_SAMPLES || e.eog.len() != EPOCH_SAMPLES {
            return Err(Error::Data(format!("epoch {} of `{}` has the wrong length", e.index, e.recording)));
        }
        buf.extend(
            u32::try_from(e.index)
                .map_err(|_| Error::Data("epoch ordinal exceeds u32".into()))?
                .to_le_bytes(),
        );
        buf.push(e.label.index() as u8);
        for v in e.eeg.iter().chain(&e.eog) {
            buf.extend(v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_epochs(recording: &str, bytes: &[u8]) -> Result<Vec<LabeledEpoch>> {
    let bad = |m: &str| Error::Data(format!("epoch file of `{recording}`: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad header"));
    }
    let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (count, samples) = (word(8), word(12));
    if samples != EPOCH_SAMPLES {
        return Err(bad(&format!("{samples} samples per epoch, expected {EPOCH_SAMPLES}")));
    }
    let stride = 5 + 8 * samples;
    if bytes.len() != 16 + count * stride {
        return Err(bad("size does not match the header"));
    }
    let floats = |b: &[u8]| -> Vec<f32> { b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect() };
    (0..count)
        .map(|i| {
            let rec = &bytes[16 + i * stride..][..stride];
            let label = StageLabel::from_index(rec[4] as usize).ok_or_else(|| bad("stage index out of range"))?;
            Ok(LabeledEpoch {
                recording: recording.to_string(),
                index: word(16 + i * stride),
                label,
                eeg: floats(&rec[5..5 + 4 * samples]),
                eog: floats(&rec[5 + 4 * samples..]),
            })
        })
        .collect()
}

/// Where a recording's stage labels come from.
pub enum Labels<'a> {
    /// Stage annotations inside the recording itself.
    Embedded,
    /// Annotations from a separate hypnogram file.
    Annotations(&'a [Annotation]),
}

/// Selects the two channels, resamples them to 100 Hz and cuts labeled
/// epochs. Other channels are dropped.
pub fn prepare(mut rec: Recording, eeg: &str, eog: &str, labels: Labels<'_>) -> Result<Vec<LabeledEpoch>> {
    let raw = match labels {
        Labels::Embedded => rec.annotations.clone(),
        Labels::Annotations(a) => a.to_vec(),
    };
    let stages = hypnogram::stage_annotations(&raw);
    if stages.is_empty() {
        return Err(Error::Hypnogram(format!("recording `{}` has no stage annotations", rec.id)));
    }
    let labels = edf::map_hypnogram(&stages)?;
    let mut keep = Vec::with_capacity(2);
    for name in [eeg, eog] {
        let mut c = rec.channel(name)?.clone();
        if c.sample_rate_hz != TARGET_RATE_HZ {
            c.samples = edf::resample(&c.samples, c.sample_rate_hz, TARGET_RATE_HZ)?;
            c.sample_rate_hz = TARGET_RATE_HZ;
        }
        keep.push(c);
    }
    rec.channels = keep;
    segment_epochs(&rec, eeg, eog, &labels)
}

/// A store directory being filled by ingestion.
pub struct StoreWriter {
    dir: PathBuf,
    index: StoreIndex,
}

impl StoreWriter {
    pub fn create(dir: &Path, eeg_channel: &str, eog_channel: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(StoreWriter {
            dir: dir.to_path_buf(),
            index: StoreIndex {
                eeg_channel: eeg_channel.into(),
                eog_channel: eog_channel.into(),
                recordings: Vec::new(),
            },
        })
    }

    pub fn add(&mut self, id: &str, source: &str, epochs: &[LabeledEpoch]) -> Result<()> {
        if self.index.recordings.iter().any(|r| r.id == id) {
            return Err(Error::Data(format!("recording `{id}` ingested twice")));
        }
        if epochs.iter().any(|e| e.recording != id) {
            return Err(Error::Data(format!("epochs passed for `{id}` belong to another recording")));
        }
        let file = format!("{id}.epochs");
        std::fs::write(self.dir.join(&file), encode_epochs(epochs)?)?;
        let (subject, night) = RecordingInfo::identify(id);
        let refs: Vec<EpochRef> = epochs
            .iter()
            .map(|e| EpochRef {
                recording: id.into(),
                index: e.index,
                label: e.label,
            })
            .collect();
        self.index.recordings.push(StoreEntry {
            id: id.into(),
            subject,
            night,
            file,
            epochs: epochs.iter().map(|e| (e.index, e.label)).collect(),
            counts: StageCounts::of(&refs),
            source: source.into(),
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<StoreIndex> {
        self.index.recordings.sort_by(|a, b| a.id.cmp(&b.id));
        std::fs::write(self.dir.join(INDEX_FILE), serde_json::to_vec_pretty(&self.index)?)?;
        Ok(self.index)
    }
}

/// Read access to an ingested store.
pub struct EpochStore {
    pub dir: PathBuf,
    pub index: StoreIndex,
}

impl EpochStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(EpochStore {
            dir: dir.to_path_buf(),
            index: serde_json::from_slice(&text)?,
        })
    }

    pub fn load(&self, id: &str) -> Result<Vec<LabeledEpoch>> {
        let entry = self
            .index
            .recordings
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Data(format!("recording `{id}` is not in the store")))?;
        decode_epochs(id, &std::fs::read(self.dir.join(&entry.file))?)
    }

    /// The referenced epochs, in reference order.
    pub fn select(&self, refs: &[EpochRef]) -> Result<Vec<LabeledEpoch>> {
        let mut cache: std::collections::BTreeMap<&str, Vec<LabeledEpoch>> = Default::default();
        let mut out = Vec::with_capacity(refs.len());
        for r in refs {
            if !cache.contains_key(r.recording.as_str()) {
                cache.insert(&r.recording, self.load(&r.recording)?);
            }
            let e = cache[r.recording.as_str()]
                .iter()
                .find(|e| e.index == r.index)
                .ok_or_else(|| Error::Data(format!("epoch {} of `{}` is not in the store", r.index, r.recording)))?;
            if e.label != r.label {
                return Err(Error::Data(format!("epoch {} of `{}` changed label", r.index, r.recording)));
            }
            out.push(e.clone());
        }
        Ok(out)
    }

    /// Files making up the store, index first.
    pub fn files(&self) -> Vec<PathBuf> {
        std::iter::once(self.dir.join(INDEX_FILE))
            .chain(self.index.recordings.iter().map(|r| self.dir.join(&r.file)))
            .collect()
    }
}
