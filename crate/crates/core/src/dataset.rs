//! Epoch segmentation, train/validation/test splits and per-stage census.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edf::Recording;
use crate::error::{Error, Result};
use crate::stage::{StageLabel, NUM_STAGES};

pub const EPOCH_SAMPLES: usize = 3000;
pub const TARGET_RATE_HZ: f64 = 100.0;

/// One 30 s epoch of both input modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEpoch {
    pub recording: String,
    pub index: usize,
    pub label: StageLabel,
    pub eeg: Vec<f32>,
    pub eog: Vec<f32>,
}

/// Consecutive `EPOCH_SAMPLES` windows of one channel; the tail is dropped.
pub fn windows(samples: &[f64], count: usize) -> Result<Vec<&[f64]>> {
    if count * EPOCH_SAMPLES > samples.len() {
        return Err(Error::Segmentation(format!(
            "{count} labels need {} samples, channel has {}",
            count * EPOCH_SAMPLES,
            samples.len()
        )));
    }
    Ok(samples.chunks_exact(EPOCH_SAMPLES).take(count).collect())
}

/// Cuts the EEG/EOG channels into labeled epochs. Excluded (`None`) epochs
/// keep their ordinal but are not emitted; trailing excluded labels beyond the
/// end of the signal are ignored.
pub fn segment_epochs(rec: &Recording, eeg: &str, eog: &str, labels: &[Option<StageLabel>]) -> Result<Vec<LabeledEpoch>> {
    let (ce, co) = (rec.channel(eeg)?, rec.channel(eog)?);
    for c in [ce, co] {
        if c.sample_rate_hz != TARGET_RATE_HZ {
            return Err(Error::RateMismatch(format!(
                "`{}` is at {} Hz; resample to {TARGET_RATE_HZ} Hz first",
                c.name, c.sample_rate_hz
            )));
        }
    }
    let used = labels.iter().rposition(Option::is_some).map_or(0, |i| i + 1);
    let available = ce.samples.len().min(co.samples.len()) / EPOCH_SAMPLES;
    let count = if labels.len() > available && used <= available {
        available
    } else {
        labels.len()
    };
    let (we, wo) = (windows(&ce.samples, count)?, windows(&co.samples, count)?);
    Ok(labels[..count]
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.map(|label| LabeledEpoch {
                recording: rec.id.clone(),
                index: i,
                label,
                eeg: we[i].iter().map(|&v| v as f32).collect(),
                eog: wo[i].iter().map(|&v| v as f32).collect(),
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EpochRef {
    pub recording: String,
    pub index: usize,
    pub label: StageLabel,
}

/// What a split needs to know about one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingInfo {
    pub id: String,
    pub subject: String,
    pub night: u32,
    pub epochs: Vec<(usize, StageLabel)>,
}

impl RecordingInfo {
    /// Subject and night from a Sleep-EDF style name (`SC4ssN...`), falling
    /// back to one subject per recording.
    pub fn identify(id: &str) -> (String, u32) {
        let b = id.as_bytes();
        if id.len() >= 6 && (id.starts_with("SC4") || id.starts_with("ST7")) && b[3..6].iter().all(u8::is_ascii_digit) {
            return (id[..5].to_string(), (b[5] - b'0') as u32);
        }
        (id.to_string(), 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitStrategy {
    NightHoldout { k: usize },
    SubjectHoldout { k: usize },
    RecordHoldout,
    LeaveOneOut,
}

impl SplitStrategy {
    pub fn folds(&self, recordings: usize) -> usize {
        match *self {
            SplitStrategy::NightHoldout { k } | SplitStrategy::SubjectHoldout { k } => k,
            SplitStrategy::RecordHoldout => 1,
            SplitStrategy::LeaveOneOut => recordings,
        }
    }
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitStrategy::NightHoldout { k } => write!(f, "night:{k}"),
            SplitStrategy::SubjectHoldout { k } => write!(f, "subject:{k}"),
            SplitStrategy::RecordHoldout => f.write_str("record"),
            SplitStrategy::LeaveOneOut => f.write_str("loo"),
        }
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;

    /// `night[:k]`, `subject[:k]`, `record`, `loo`; k defaults to 5.
    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = match s.split_once(':') {
            Some((n, k)) => (n, Some(k.parse().map_err(|_| Error::Config(format!("bad fold count in `{s}`")))?)),
            None => (s, None),
        };
        Ok(match name {
            "night" => SplitStrategy::NightHoldout { k: k.unwrap_or(5) },
            "subject" => SplitStrategy::SubjectHoldout { k: k.unwrap_or(5) },
            "record" => SplitStrategy::RecordHoldout,
            "loo" => SplitStrategy::LeaveOneOut,
            _ => return Err(Error::Config(format!("unknown split strategy `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub strategy: SplitStrategy,
    pub fold: usize,
    pub seed: u64,
    pub train_recordings: Vec<String>,
    pub validation_recordings: Vec<String>,
    pub test_recordings: Vec<String>,
    pub train: Vec<EpochRef>,
    pub validation: Vec<EpochRef>,
    pub test: Vec<EpochRef>,
}

fn refs(recs: &[&RecordingInfo]) -> Vec<EpochRef> {
    recs.iter()
        .flat_map(|r| {
            r.epochs.iter().map(|&(index, label)| EpochRef {
                recording: r.id.clone(),
                index,
                label,
            })
        })
        .collect()
}

fn insufficient(msg: String) -> Error {
    Error::Split(msg)
}

/// Contiguous near-equal partition of `items` into `k` groups.
fn partition<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let n = items.len();
    (0..k).map(|g| items[g * n / k..(g + 1) * n / k].to_vec()).collect()
}

/// Builds a deterministic split. Recording order in the output follows the
/// input order.
pub fn build_split(recordings: &[RecordingInfo], strategy: SplitStrategy, fold: usize, seed: u64) -> Result<DatasetSplit> {
    let ids: BTreeSet<&str> = recordings.iter().map(|r| r.id.as_str()).collect();
    if ids.len() != recordings.len() {
        return Err(insufficient("recording ids must be unique".into()));
    }
    let folds = strategy.folds(recordings.len());
    if fold >= folds {
        return Err(Error::Split(format!("fold {fold} out of range for {folds} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = recordings.len();
    // Role per recording: 0 train, 1 validation, 2 test.
    let mut role = vec![0u8; n];

    match strategy {
        SplitStrategy::NightHoldout { k } | SplitStrategy::SubjectHoldout { k } => {
            if k < 2 {
                return Err(Error::Split("k-fold needs k >= 2".into()));
            }
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in recordings.iter().enumerate() {
                by_subject.entry(r.subject.as_str()).or_default().push(i);
            }
            let night_mode = matches!(strategy, SplitStrategy::NightHoldout { .. });
            let mut cohort: Vec<&str> = Vec::new();
            for (subject, recs) in &by_subject {
                if night_mode && recs.len() < 2 {
                    // Single-night subjects cannot be held out by night.
                    recs.iter().for_each(|&i| role[i] = 1);
                } else {
                    cohort.push(subject);
                }
            }
            if cohort.len() < k {
                return Err(insufficient(format!("{} eligible subjects for {k} folds", cohort.len())));
            }
            cohort.shuffle(&mut rng);
            let groups = partition(&cohort, k);
            for subject in &groups[fold] {
                let recs = &by_subject[subject];
                if night_mode {
                    role[recs[rng.random_range(0..recs.len())]] = 2;
                } else {
                    recs.iter().for_each(|&i| role[i] = 2);
                }
            }
            if !night_mode && role.iter().all(|&r| r != 1) {
                // Hold out one whole training subject for validation.
                let rest: Vec<&str> = groups
                    .iter()
                    .enumerate()
                    .filter(|(g, _)| *g != fold)
                    .flat_map(|(_, s)| s.clone())
                    .collect();
                if rest.len() > 1 {
                    let pick = rest[rng.random_range(0..rest.len())];
                    by_subject[pick].iter().for_each(|&i| role[i] = 1);
                }
            }
        }
        SplitStrategy::RecordHoldout => {
            if n < 3 {
                return Err(insufficient(format!("record holdout needs 3 recordings, got {n}")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let test = ((0.1 * n as f64).round() as usize).max(1);
            let val = ((0.02 * n as f64).round() as usize).max(1);
            order[..test].iter().for_each(|&i| role[i] = 2);
            order[test..test + val].iter().for_each(|&i| role[i] = 1);
        }
        SplitStrategy::LeaveOneOut => {
            if n < 3 {
                return Err(insufficient(format!("leave-one-out needs 3 recordings, got {n}")));
            }
            role[fold] = 2;
            let rest: Vec<usize> = (0..n).filter(|&i| i != fold).collect();
            role[rest[rng.random_range(0..rest.len())]] = 1;
        }
    }

    let pick = |want: u8| -> Vec<&RecordingInfo> {
        recordings
            .iter()
            .zip(&role)
            .filter(|(_, &r)| r == want)
            .map(|(rec, _)| rec)
            .collect()
    };
    let (tr, va, te) = (pick(0), pick(1), pick(2));
    if tr.is_empty() || te.is_empty() {
        return Err(insufficient("split leaves train or test empty".into()));
    }
    let names = |v: &[&RecordingInfo]| v.iter().map(|r| r.id.clone()).collect();
    Ok(DatasetSplit {
        strategy,
        fold,
        seed,
        train_recordings: names(&tr),
        validation_recordings: names(&va),
        test_recordings: names(&te),
        train: refs(&tr),
        validation: refs(&va),
        test: refs(&te),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts(pub [usize; NUM_STAGES]);

impl StageCounts {
    pub fn of(refs: &[EpochRef]) -> Self {
        let mut c = [0; NUM_STAGES];
        refs.iter().for_each(|r| c[r.label.index()] += 1);
        StageCounts(c)
    }

    pub fn get(&self, s: StageLabel) -> usize {
        self.0[s.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub train: StageCounts,
    pub validation: StageCounts,
    pub test: StageCounts,
}

pub fn epoch_census(split: &DatasetSplit) -> Census {
    Census {
        train: StageCounts::of(&split.train),
        validation: StageCounts::of(&split.validation),
        test: StageCounts::of(&split.test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::Channel;

    fn rec(len: usize) -> Recording {
        let ramp: Vec<f64> = (0..len).map(|i| i as f64).collect();
        Recording {
            id: "r".into(),
            patient: String::new(),
            channels: vec![Channel::new("eeg", 100.0, ramp.clone()), Channel::new("eog", 100.0, ramp)],
            duration_s: len as f64 / 100.0,
            annotations: vec![],
        }
    }

    fn wake(n: usize) -> Vec<Option<StageLabel>> {
        vec![Some(StageLabel::Wake); n]
    }

    #[test]
    fn segmentation_lengths() {
        assert_eq!(segment_epochs(&rec(9000), "eeg", "eog", &wake(3)).unwrap().len(), 3);
        let e = segment_epochs(&rec(9050), "eeg", "eog", &wake(3)).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[2].eeg[0], 6000.0);
        assert!(matches!(
            segment_epochs(&rec(6000), "eeg", "eog", &wake(3)),
            Err(Error::Segmentation(_))
        ));
    }

    #[test]
    fn excluded_epochs_keep_ordinals() {
        let labels = vec![Some(StageLabel::S2), None, Some(StageLabel::Rem), None, None];
        let e = segment_epochs(&rec(9000), "eeg", "eog", &labels).unwrap();
        assert_eq!(e.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn segmentation_requires_target_rate() {
        let mut r = rec(9000);
        r.channels[0].sample_rate_hz = 200.0;
        assert!(segment_epochs(&r, "eeg", "eog", &wake(1)).is_err());
    }

    #[test]
    fn sleep_edf_names() {
        assert_eq!(RecordingInfo::identify("SC4012E0"), ("SC401".to_string(), 2));
        assert_eq!(RecordingInfo::identify("night_a"), ("night_a".to_string(), 1));
    }

    #[test]
    fn census_counts() {
        let r = |label| EpochRef {
            recording: "x".into(),
            index: 0,
            label,
        };
        let test = vec![
            r(StageLabel::Wake),
            r(StageLabel::Rem),
            r(StageLabel::Wake),
            r(StageLabel::Rem),
            r(StageLabel::Wake),
        ];
        let c = StageCounts::of(&test);
        assert_eq!(c.0, [3, 0, 0, 0, 2]);
        assert_eq!(StageCounts::of(&[]).0, [0; 5]);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("night".parse::<SplitStrategy>().unwrap(), SplitStrategy::NightHoldout { k: 5 });
        assert_eq!(
            "subject:3".parse::<SplitStrategy>().unwrap(),
            SplitStrategy::SubjectHoldout { k: 3 }
        );
        assert!("bogus".parse::<SplitStrategy>().is_err());
    }
}
