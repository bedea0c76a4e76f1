//! Synthetic EEG/EOG generators with known ground truth.
//!
//! All signals are in microvolts at 100 Hz over white background noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledEpoch, EPOCH_SAMPLES, TARGET_RATE_HZ};
use crate::edf::{Annotation, Channel, Recording, EPOCH_S};
use crate::error::Result;
use crate::stage::{StageLabel, NUM_STAGES};

pub const EEG_CHANNEL: &str = "EEG Fpz-Cz";
pub const EOG_CHANNEL: &str = "EOG horizontal";
/// Background noise standard deviation (uV).
pub const NOISE_UV: f64 = 10.0;
pub const SPINDLE_HZ: f64 = 14.0;
pub const SLOW_WAVE_HZ: f64 = 1.0;

fn noise(rng: &mut ChaCha8Rng, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).expect("positive sd");
    (0..EPOCH_SAMPLES).map(|_| n.sample(rng)).collect()
}

fn time(i: usize) -> f64 {
    i as f64 / TARGET_RATE_HZ
}

fn add_sine(x: &mut [f64], rng: &mut ChaCha8Rng, hz: f64, amp: f64) {
    let phase = rng.random_range(0.0..2.0 * PI);
    for (i, v) in x.iter_mut().enumerate() {
        *v += amp * (2.0 * PI * hz * time(i) + phase).sin();
    }
}

/// Hann-windowed bursts of `hz`, each `len_s` long, at random positions.
fn add_bursts(x: &mut [f64], rng: &mut ChaCha8Rng, hz: f64, amp: f64, count: usize, len_s: f64) {
    let len = (len_s * TARGET_RATE_HZ) as usize;
    for _ in 0..count {
        let start = rng.random_range(0..x.len() - len);
        let phase = rng.random_range(0.0..2.0 * PI);
        for k in 0..len {
            let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (len - 1) as f64).cos();
            x[start + k] += amp * w * (2.0 * PI * hz * time(k) + phase).sin();
        }
    }
}

/// Smoothed step-like deflections, as produced by eye movements.
fn add_saccades(x: &mut [f64], rng: &mut ChaCha8Rng, amp: f64, count: usize) {
    for _ in 0..count {
        let start = rng.random_range(0..x.len() - 60);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        for k in 0..60 {
            // Rise over 10 samples, hold, decay back.
            let shape = if k < 10 {
                k as f64 / 10.0
            } else {
                (-(k as f64 - 10.0) / 15.0).exp()
            };
            x[start + k] += sign * amp * shape;
        }
    }
}

/// Classes of the three-class frequency task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyClass {
    SlowWave,
    Spindle,
    Noise,
}

impl ToyClass {
    pub const ALL: [ToyClass; 3] = [ToyClass::SlowWave, ToyClass::Spindle, ToyClass::Noise];

    /// Stage label the class is trained under.
    pub fn label(self) -> StageLabel {
        match self {
            ToyClass::SlowWave => StageLabel::Sws,
            ToyClass::Spindle => StageLabel::S2,
            ToyClass::Noise => StageLabel::Wake,
        }
    }

    /// The frequency that defines the class, if any.
    pub fn frequency_hz(self) -> Option<f64> {
        match self {
            ToyClass::SlowWave => Some(SLOW_WAVE_HZ),
            ToyClass::Spindle => Some(SPINDLE_HZ),
            ToyClass::Noise => None,
        }
    }

    pub fn labels() -> Vec<StageLabel> {
        Self::ALL.iter().map(|c| c.label()).collect()
    }
}

/// EEG and EOG of one epoch of `class`. The EOG carries noise only.
pub fn toy_epoch(class: ToyClass, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut eeg = noise(rng, NOISE_UV);
    match class {
        ToyClass::SlowWave => add_sine(&mut eeg, rng, SLOW_WAVE_HZ, 1.5 * NOISE_UV),
        ToyClass::Spindle => {
            let count = rng.random_range(4..=7);
            add_bursts(&mut eeg, rng, SPINDLE_HZ, 3.0 * NOISE_UV, count, 1.0)
        }
        ToyClass::Noise => {}
    }
    (eeg, noise(rng, NOISE_UV))
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// `per_class` epochs of every class, interleaved, in one recording `id`.
pub fn toy_dataset(id: &str, per_class: usize, seed: u64) -> Vec<LabeledEpoch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..per_class * 3)
        .map(|i| {
            let class = ToyClass::ALL[i % 3];
            let (eeg, eog) = toy_epoch(class, &mut rng);
            LabeledEpoch {
                recording: id.to_string(),
                index: i,
                label: class.label(),
                eeg: to_f32(&eeg),
                eog: to_f32(&eog),
            }
        })
        .collect()
}

/// EEG and EOG of one epoch with the signature of `stage`.
pub fn stage_epoch(stage: StageLabel, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut eeg = noise(rng, NOISE_UV);
    let mut eog = noise(rng, NOISE_UV);
    match stage {
        StageLabel::Wake => {
            add_sine(&mut eeg, rng, 10.0, 2.0 * NOISE_UV);
            let n = rng.random_range(3..=6);
            add_saccades(&mut eog, rng, 5.0 * NOISE_UV, n);
        }
        StageLabel::S1 => {
            add_sine(&mut eeg, rng, 6.0, 1.5 * NOISE_UV);
            add_sine(&mut eog, rng, 0.3, 3.0 * NOISE_UV);
        }
        StageLabel::S2 => {
            let n = rng.random_range(4..=7);
            add_bursts(&mut eeg, rng, 13.0, 3.0 * NOISE_UV, n, 1.0);
        }
        StageLabel::Sws => add_sine(&mut eeg, rng, SLOW_WAVE_HZ, 4.0 * NOISE_UV),
        StageLabel::Rem => {
            add_sine(&mut eeg, rng, 6.0, 1.2 * NOISE_UV);
            let n = rng.random_range(8..=14);
            add_saccades(&mut eog, rng, 6.0 * NOISE_UV, n);
        }
    }
    (eeg, eog)
}

/// A synthetic night with per-epoch truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecording {
    pub id: String,
    pub labels: Vec<StageLabel>,
    /// Epochs whose signal was drawn from a different stage than the label.
    pub corrupted: Vec<bool>,
    pub eeg: Vec<f64>,
    pub eog: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub subjects: usize,
    pub nights: usize,
    pub epochs: usize,
    /// Probability of staying in the same stage from one epoch to the next.
    pub persistence: f64,
    /// Fraction of epochs whose signal comes from another stage.
    pub corruption: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            subjects: 5,
            nights: 2,
            epochs: 120,
            persistence: 0.9,
            corruption: 0.1,
        }
    }
}

/// Stage sequence of a Markov chain starting awake: stay with probability
/// `persistence`, otherwise move to one of the other stages uniformly.
pub fn markov_labels(n: usize, persistence: f64, rng: &mut ChaCha8Rng) -> Vec<StageLabel> {
    let mut s = StageLabel::Wake;
    (0..n)
        .map(|i| {
            if i > 0 && !rng.random_bool(persistence) {
                let j = (s.index() + rng.random_range(1..NUM_STAGES)) % NUM_STAGES;
                s = StageLabel::ALL[j];
            }
            s
        })
        .collect()
}

/// Recordings named `SC4ssN` so that subject and night can be recovered.
pub fn markov_cohort(spec: &CohortSpec, seed: u64) -> Vec<SynthRecording> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.subjects * spec.nights);
    for subject in 0..spec.subjects {
        for night in 1..=spec.nights {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let labels = markov_labels(spec.epochs, spec.persistence, &mut rng);
            let mut rec = SynthRecording {
                id: format!("SC4{subject:02}{night}E0"),
                corrupted: Vec::with_capacity(labels.len()),
                eeg: Vec::with_capacity(labels.len() * EPOCH_SAMPLES),
                eog: Vec::with_capacity(labels.len() * EPOCH_SAMPLES),
                labels,
            };
            for &l in &rec.labels {
                let corrupt = rng.random_bool(spec.corruption);
                let shown = if corrupt {
                    StageLabel::ALL[(l.index() + rng.random_range(1..NUM_STAGES)) % NUM_STAGES]
                } else {
                    l
                };
                let (eeg, eog) = stage_epoch(shown, &mut rng);
                rec.corrupted.push(corrupt);
                rec.eeg.extend(eeg);
                rec.eog.extend(eog);
            }
            out.push(rec);
        }
    }
    out
}

/// Sleep-EDF style annotation text for a stage.
pub fn stage_text(s: StageLabel) -> &'static str {
    match s {
        StageLabel::Wake => "Sleep stage W",
        StageLabel::S1 => "Sleep stage 1",
        StageLabel::S2 => "Sleep stage 2",
        StageLabel::Sws => "Sleep stage 3",
        StageLabel::Rem => "Sleep stage R",
    }
}

/// Runs of equal labels as hypnogram annotations.
pub fn hypnogram(labels: &[StageLabel]) -> Vec<Annotation> {
    let mut out: Vec<Annotation> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(a) if a.text == stage_text(l) => a.duration_s += EPOCH_S,
            _ => out.push(Annotation::new(i as f64 * EPOCH_S, EPOCH_S, stage_text(l))),
        }
    }
    out
}

impl SynthRecording {
    pub fn to_recording(&self) -> Recording {
        Recording {
            id: self.id.clone(),
            patient: format!("synthetic {}", &self.id[..5]),
            duration_s: self.labels.len() as f64 * EPOCH_S,
            channels: vec![
                Channel::new(EEG_CHANNEL, TARGET_RATE_HZ, self.eeg.clone()),
                Channel::new(EOG_CHANNEL, TARGET_RATE_HZ, self.eog.clone()),
            ],
            annotations: hypnogram(&self.labels),
        }
    }

    pub fn to_epochs(&self) -> Vec<LabeledEpoch> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledEpoch {
                recording: self.id.clone(),
                index: i,
                label,
                eeg: to_f32(&self.eeg[i * EPOCH_SAMPLES..][..EPOCH_SAMPLES]),
                eog: to_f32(&self.eog[i * EPOCH_SAMPLES..][..EPOCH_SAMPLES]),
            })
            .collect()
    }
}

/// Convenience: all epochs of a cohort.
pub fn cohort_epochs(cohort: &[SynthRecording]) -> Vec<LabeledEpoch> {
    cohort.iter().flat_map(SynthRecording::to_epochs).collect()
}

/// Writes each recording of the cohort as an EDF+ file into `dir`.
pub fn write_cohort(cohort: &[SynthRecording], dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    cohort
        .iter()
        .map(|r| {
            let path = dir.join(format!("{}.edf", r.id));
            std::fs::write(&path, crate::edf::write_edf(&r.to_recording(), Default::default())?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edf::map_hypnogram;
    use crate::gabor::magnitude_spectrum;

    fn peak(x: &[f64]) -> f64 {
        magnitude_spectrum(x)
            .into_iter()
            .filter(|(f, _)| *f > 0.2)
            .fold((0.0, 0.0), |b, (f, m)| if m > b.1 { (f, m) } else { b })
            .0
    }

    #[test]
    fn toy_classes_carry_their_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, _) = toy_epoch(ToyClass::SlowWave, &mut rng);
        assert!((peak(&a) - 1.0).abs() < 0.5, "{}", peak(&a));
        let (b, _) = toy_epoch(ToyClass::Spindle, &mut rng);
        assert!((peak(&b) - 14.0).abs() < 1.0, "{}", peak(&b));
    }

    #[test]
    fn toy_dataset_is_balanced_and_seeded() {
        let d = toy_dataset("toy", 4, 2);
        assert_eq!(d.len(), 12);
        assert_eq!(d.iter().filter(|e| e.label == StageLabel::S2).count(), 4);
        assert_eq!(d, toy_dataset("toy", 4, 2));
        assert_ne!(d[0].eeg, toy_dataset("toy", 4, 3)[0].eeg);
    }

    #[test]
    fn cohort_shape() {
        let spec = CohortSpec {
            subjects: 2,
            nights: 2,
            epochs: 50,
            ..Default::default()
        };
        let c = markov_cohort(&spec, 5);
        assert_eq!(c.len(), 4);
        assert_eq!(c[3].id, "SC4012E0");
        assert_eq!(c[0].eeg.len(), 50 * EPOCH_SAMPLES);
        let rate = c.iter().flat_map(|r| &r.corrupted).filter(|&&b| b).count() as f64 / 200.0;
        assert!(rate > 0.03 && rate < 0.2, "{rate}");
        let labels = map_hypnogram(&c[0].to_recording().annotations).unwrap();
        assert_eq!(labels, c[0].labels.iter().map(|&l| Some(l)).collect::<Vec<_>>());
    }

    #[test]
    fn chain_persists() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = markov_labels(2000, 0.9, &mut rng);
        let changes = l.windows(2).filter(|w| w[0] != w[1]).count();
        assert!((150..250).contains(&changes), "{changes}");
        assert_eq!(l[0], StageLabel::Wake);
    }
}
