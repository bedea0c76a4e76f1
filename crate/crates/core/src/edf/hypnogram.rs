//! Hypnogram extraction: EDF+ time-stamped annotation lists (TALs), a CSV
//! fallback, and the R&K label vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::StageLabel;

pub const EPOCH_S: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset_s: f64,
    pub duration_s: f64,
    pub text: String,
}

impl Annotation {
    pub fn new(onset_s: f64, duration_s: f64, text: impl Into<String>) -> Self {
        Annotation {
            onset_s,
            duration_s,
            text: text.into(),
        }
    }
}

/// Parses one data record's worth of annotation-signal bytes.
/// `base` is the block's file offset, used in error reports.
pub(crate) fn parse_tal_block(block: &[u8], base: usize) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    let mut start = 0;
    for tal in block.split(|&b| b == 0) {
        let here = base + start;
        start += tal.len() + 1;
        if tal.is_empty() {
            continue;
        }
        let mut parts = tal.split(|&b| b == 0x14);
        let stamp = parts.next().unwrap_or_default();
        let stamp = std::str::from_utf8(stamp).map_err(|_| Error::edf(here, "annotation timestamp is not ASCII"))?;
        let (onset, duration) = match stamp.split_once('\x15') {
            Some((o, d)) => (o, Some(d)),
            None => (stamp, None),
        };
        let onset: f64 = onset
            .parse()
            .map_err(|_| Error::edf(here, format!("bad annotation onset `{onset}`")))?;
        let duration: f64 = match duration {
            Some(d) => d.parse().map_err(|_| Error::edf(here, format!("bad annotation duration `{d}`")))?,
            None => 0.0,
        };
        for text in parts {
            // Empty texts mark record timekeeping.
            if text.is_empty() {
                continue;
            }
            let text = String::from_utf8_lossy(text).trim().to_string();
            out.push(Annotation::new(onset, duration, text));
        }
    }
    Ok(out)
}

fn stamp(v: f64) -> String {
    format!("{v:+}")
}

/// Annotation-signal payload for each of `records` data records. Every record
/// opens with its timekeeping TAL; all annotations ride in the first record.
pub(crate) fn tal_blocks(annotations: &[Annotation], records: usize, record_s: f64) -> Vec<Vec<u8>> {
    (0..records.max(1))
        .map(|r| {
            let mut block = format!("{}\x14\x14\0", stamp(r as f64 * record_s)).into_bytes();
            if r == 0 {
                for a in annotations {
                    block.extend(format!("{}\x15{}\x14{}\x14\0", stamp(a.onset_s), a.duration_s, a.text).bytes());
                }
            }
            block
        })
        .collect()
}

/// Maps one R&K label to a stage. `Ok(None)` marks epochs that are dropped
/// (movement time and unscored).
pub fn classify(text: &str) -> Result<Option<StageLabel>> {
    let t = text.trim();
    let code = t.strip_prefix("Sleep stage ").unwrap_or(t);
    match code {
        "W" => Ok(Some(StageLabel::Wake)),
        "1" => Ok(Some(StageLabel::S1)),
        "2" => Ok(Some(StageLabel::S2)),
        "3" | "4" => Ok(Some(StageLabel::Sws)),
        "R" => Ok(Some(StageLabel::Rem)),
        "?" | "Movement time" | "M" | "MT" => Ok(None),
        _ => Err(Error::Hypnogram(format!("unknown label `{t}`"))),
    }
}

/// Keeps only annotations that carry a sleep stage or movement marker.
pub fn stage_annotations(all: &[Annotation]) -> Vec<Annotation> {
    all.iter()
        .filter(|a| a.text.starts_with("Sleep stage") || a.text.starts_with("Movement time"))
        .cloned()
        .collect()
}

fn epochs_of(seconds: f64, what: &str) -> Result<usize> {
    let n = seconds / EPOCH_S;
    if seconds < 0.0 || (n - n.round()).abs() > 1e-6 {
        return Err(Error::Hypnogram(format!("{what} {seconds} s is not a multiple of 30 s")));
    }
    Ok(n.round() as usize)
}

/// Expands stage annotations into one entry per 30 s epoch. Gaps between
/// annotations become excluded (`None`) epochs.
pub fn map_hypnogram(raw: &[Annotation]) -> Result<Vec<Option<StageLabel>>> {
    let mut labels = Vec::new();
    for a in raw {
        let stage = classify(&a.text)?;
        let start = epochs_of(a.onset_s, "onset")?;
        let count = epochs_of(a.duration_s, "duration")?;
        if start < labels.len() {
            return Err(Error::Hypnogram(format!(
                "annotation `{}` at {} s overlaps the previous one",
                a.text, a.onset_s
            )));
        }
        labels.resize(start, None);
        labels.extend(std::iter::repeat_n(stage, count));
    }
    Ok(labels)
}

/// Reads the CSV fallback format `onset_s,duration_s,label` (header optional).
pub fn parse_hypnogram_csv(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("onset")) {
            continue;
        }
        let mut f = line.splitn(3, ',');
        let (Some(o), Some(d), Some(l)) = (f.next(), f.next(), f.next()) else {
            return Err(Error::Hypnogram(format!("line {}: expected 3 fields", n + 1)));
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Hypnogram(format!("line {}: bad number `{s}`", n + 1)))
        };
        out.push(Annotation::new(num(o)?, num(d)?, l.trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use StageLabel::*;

    fn one(text: &str, dur: f64) -> Result<Vec<Option<StageLabel>>> {
        map_hypnogram(&[Annotation::new(0.0, dur, text)])
    }

    #[test]
    fn merges_deep_sleep() {
        assert_eq!(one("Sleep stage 4", 60.0).unwrap(), vec![Some(Sws), Some(Sws)]);
        assert_eq!(one("Sleep stage 3", 30.0).unwrap(), vec![Some(Sws)]);
        assert_eq!(one("Sleep stage W", 30.0).unwrap(), vec![Some(Wake)]);
    }

    #[test]
    fn excluded_and_unknown() {
        assert_eq!(one("Movement time", 30.0).unwrap(), vec![None]);
        assert_eq!(one("Sleep stage ?", 60.0).unwrap(), vec![None, None]);
        assert!(matches!(one("Sleep stage X", 30.0), Err(Error::Hypnogram(_))));
    }

    #[test]
    fn overlaps_and_bad_durations_fail() {
        let raw = [
            Annotation::new(0.0, 60.0, "Sleep stage W"),
            Annotation::new(30.0, 30.0, "Sleep stage 1"),
        ];
        assert!(map_hypnogram(&raw).is_err());
        assert!(one("Sleep stage 2", 45.0).is_err());
    }

    #[test]
    fn gaps_are_excluded() {
        let raw = [
            Annotation::new(0.0, 30.0, "Sleep stage W"),
            Annotation::new(60.0, 30.0, "Sleep stage R"),
        ];
        assert_eq!(map_hypnogram(&raw).unwrap(), vec![Some(Wake), None, Some(Rem)]);
    }

    #[test]
    fn tal_round_trip() {
        let anns = vec![
            Annotation::new(0.0, 90.0, "Sleep stage W"),
            Annotation::new(90.0, 30.0, "Sleep stage 1"),
        ];
        let blocks = tal_blocks(&anns, 2, 30.0);
        let mut parsed = parse_tal_block(&blocks[0], 0).unwrap();
        parsed.extend(parse_tal_block(&blocks[1], 0).unwrap());
        assert_eq!(parsed, anns);
    }

    #[test]
    fn csv_fallback() {
        let csv = "onset_s,duration_s,label\n0,30,Sleep stage W\n30,60,Sleep stage 2\n";
        let labels = map_hypnogram(&parse_hypnogram_csv(csv).unwrap()).unwrap();
        assert_eq!(labels, vec![Some(Wake), Some(S2), Some(S2)]);
        assert!(parse_hypnogram_csv("0,30").is_err());
    }
}
