mod common;

use common::{annotation_signal, edf_fixture, edf_physical, FixtureSignal};
use gaborscope::dataset::StageCounts;
use gaborscope::edf::{map_hypnogram, parse_edf, write_edf, Channel, Recording, Scaling, WriteOptions};
use gaborscope::store::{prepare, EpochStore, Labels, StoreWriter};
use gaborscope::synth::{markov_cohort, write_cohort, CohortSpec, EEG_CHANNEL, EOG_CHANNEL};
use gaborscope::{Error, StageLabel};
use rand::Rng;

fn zero_signal(records: usize) -> FixtureSignal {
    FixtureSignal {
        label: "Fpz".into(),
        physical: (-1.0, 1.0),
        digital: (-32768, 32767),
        samples_per_record: 100,
        data: vec![0; 100 * records],
    }
}

#[test]
fn zero_digital_samples_sit_at_the_physical_midpoint() {
    let bytes = edf_fixture(&[zero_signal(1)], 1, 1, 1.0, false);
    let rec = parse_edf(&bytes).unwrap();
    assert_eq!(rec.channels.len(), 1);
    let ch = &rec.channels[0];
    assert_eq!((ch.name.as_str(), ch.sample_rate_hz, ch.samples.len()), ("Fpz", 100.0, 100));
    // -1 + (0 - -32768) * 2 / 65535: half a quantization step above zero.
    let expected: f64 = -1.0 + 32768.0 * 2.0 / 65535.0;
    assert!((expected - 1.0 / 65535.0).abs() < 1e-18);
    for &v in &ch.samples {
        assert!((v - expected).abs() < 1e-15, "{v}");
    }
}

#[test]
fn truncated_inputs_are_rejected() {
    assert!(matches!(parse_edf(&[]), Err(Error::Edf { .. })));
    let short = edf_fixture(&[zero_signal(1)], 1, 2, 1.0, false);
    assert!(matches!(parse_edf(&short), Err(Error::Edf { .. })));
    let full = edf_fixture(&[zero_signal(2)], 2, 2, 1.0, false);
    assert!(parse_edf(&full).is_ok());
    assert!(matches!(parse_edf(&full[..full.len() - 1]), Err(Error::Edf { .. })));
}

#[test]
fn mixed_rate_fixture_parses_sample_exact() {
    let mut rng = common::rng(8);
    let specs = [
        ("EEG Fpz-Cz", 100, (-200.0, 200.0), (-2048i16, 2047i16)),
        ("EOG horizontal", 50, (-500.0, 800.0), (-32768, 32767)),
    ];
    let records = 3;
    let signals: Vec<FixtureSignal> = specs
        .iter()
        .map(|&(label, spr, physical, digital)| FixtureSignal {
            label: label.into(),
            physical,
            digital,
            samples_per_record: spr,
            data: (0..spr * records).map(|_| rng.random_range(digital.0..=digital.1)).collect(),
        })
        .collect();
    let rec = parse_edf(&edf_fixture(&signals, records, records, 1.0, false)).unwrap();
    assert_eq!(rec.duration_s, 3.0);
    for (ch, sig) in rec.channels.iter().zip(&signals) {
        assert_eq!(ch.name, sig.label);
        assert_eq!(ch.sample_rate_hz, sig.samples_per_record as f64);
        assert_eq!(ch.samples.len(), sig.data.len());
        let scaling = ch.scaling.expect("parsed channels keep their scaling");
        for (&v, &d) in ch.samples.iter().zip(&sig.data) {
            assert_eq!(scaling.to_digital(v), d);
            assert!((v - edf_physical(d, sig.physical, sig.digital)).abs() < 1e-12);
        }
    }
}

#[test]
fn library_writer_round_trips_quantized_channels() {
    let mut rng = common::rng(9);
    let scaling = Scaling {
        physical_min: -187.5,
        physical_max: 187.5,
        digital_min: -32768,
        digital_max: 32767,
    };
    let grid = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| scaling.to_physical(rng.random())).collect() };
    let channel = |name: &str, rate: f64, samples: Vec<f64>| Channel {
        scaling: Some(scaling),
        ..Channel::new(name, rate, samples)
    };
    let rec = Recording {
        id: "rt".into(),
        patient: "X".into(),
        channels: vec![channel("a", 100.0, grid(6000, &mut rng)), channel("b", 1.0, grid(60, &mut rng))],
        duration_s: 60.0,
        annotations: gaborscope::synth::hypnogram(&[StageLabel::S1, StageLabel::Rem]),
    };
    let back = parse_edf(&write_edf(&rec, WriteOptions::default()).unwrap()).unwrap();
    for (a, b) in rec.channels.iter().zip(&back.channels) {
        assert_eq!(a.samples, b.samples, "{}", a.name);
    }
    assert_eq!(
        map_hypnogram(&back.annotations).unwrap(),
        vec![Some(StageLabel::S1), Some(StageLabel::Rem)]
    );
}

/// Five 30 s records, 3 Wake + 2 REM, with the hypnogram as EDF+ annotations.
fn hypnogram_fixture() -> Vec<u8> {
    let channel = |label: &str, phase: f64| FixtureSignal {
        label: label.into(),
        physical: (-100.0, 100.0),
        digital: (-32768, 32767),
        samples_per_record: 3000,
        data: (0..15_000).map(|i| (8000.0 * (i as f64 * 0.01 + phase).sin()) as i16).collect(),
    };
    let tals = vec![
        vec![(0.0, 60.0, "Sleep stage W")],
        vec![],
        vec![(60.0, 30.0, "Sleep stage W"), (90.0, 60.0, "Sleep stage R")],
        vec![],
        vec![],
    ];
    let signals = [
        channel(EEG_CHANNEL, 0.0),
        channel(EOG_CHANNEL, 1.0),
        annotation_signal(&tals, 30.0, 60),
    ];
    edf_fixture(&signals, 5, 5, 30.0, true)
}

#[test]
fn embedded_hypnogram_census() {
    let rec = parse_edf(&hypnogram_fixture()).unwrap();
    assert_eq!(rec.channels.len(), 2, "annotation signals are not data channels");
    let epochs = prepare(rec, EEG_CHANNEL, EOG_CHANNEL, Labels::Embedded).unwrap();
    let labels: Vec<StageLabel> = epochs.iter().map(|e| e.label).collect();
    use StageLabel::*;
    assert_eq!(labels, [Wake, Wake, Wake, Rem, Rem]);
    let refs: Vec<_> = epochs
        .iter()
        .map(|e| gaborscope::dataset::EpochRef {
            recording: e.recording.clone(),
            index: e.index,
            label: e.label,
        })
        .collect();
    assert_eq!(StageCounts::of(&refs).0, [3, 0, 0, 0, 2]);
}

#[test]
fn deep_sleep_stages_merge() {
    let anns = vec![gaborscope::edf::Annotation::new(0.0, 60.0, "Sleep stage 4")];
    assert_eq!(map_hypnogram(&anns).unwrap(), vec![Some(StageLabel::Sws); 2]);
}

#[test]
fn synthetic_cohort_census_matches_hand_counts() {
    let spec = CohortSpec {
        subjects: 3,
        nights: 2,
        epochs: 20,
        ..Default::default()
    };
    let cohort = markov_cohort(&spec, 5);
    let raw = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let files = write_cohort(&cohort, raw.path()).unwrap();
    let mut writer = StoreWriter::create(out.path(), EEG_CHANNEL, EOG_CHANNEL).unwrap();
    for (path, r) in files.iter().zip(&cohort) {
        let rec = parse_edf(&std::fs::read(path).unwrap()).unwrap();
        let epochs = prepare(rec, EEG_CHANNEL, EOG_CHANNEL, Labels::Embedded).unwrap();
        writer.add(&r.id, "synthetic", &epochs).unwrap();
    }
    let index = writer.finish().unwrap();
    let mut hand = [0usize; 5];
    for r in &cohort {
        for l in &r.labels {
            hand[l.index()] += 1;
        }
    }
    assert_eq!(index.census().0, hand);
    for (entry, r) in index.recordings.iter().zip(&cohort) {
        let mut own = [0usize; 5];
        r.labels.iter().for_each(|l| own[l.index()] += 1);
        assert_eq!(entry.counts.0, own, "{}", r.id);
    }
    let store = EpochStore::open(out.path()).unwrap();
    let loaded = store.load(&cohort[0].id).unwrap();
    assert_eq!(loaded.iter().map(|e| e.label).collect::<Vec<_>>(), cohort[0].labels);
}
