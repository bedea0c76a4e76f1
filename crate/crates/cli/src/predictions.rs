//! Prediction and truth files: CSV keyed by `(recording, epoch)`.

use std::collections::BTreeMap;
use std::path::Path;

use gaborscope::stage::NUM_STAGES;
use gaborscope::StageLabel;

use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub recording: String,
    pub epoch: usize,
    pub stage: StageLabel,
    /// Single-epoch prediction, when the row comes from a two-stage model.
    pub single: Option<StageLabel>,
    pub probabilities: Option<[f64; NUM_STAGES]>,
}

pub fn write(rows: &[Row]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let with_single = rows.iter().any(|r| r.single.is_some());
    let with_probs = rows.iter().any(|r| r.probabilities.is_some());
    let mut header = vec!["recording".to_string(), "epoch".into(), "stage".into()];
    if with_single {
        header.push("single".into());
    }
    if with_probs {
        header.extend(StageLabel::ALL.iter().map(|s| format!("p_{s}")));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.recording.clone(), r.epoch.to_string(), r.stage.to_string()];
        if with_single {
            rec.push(r.single.map(|s| s.to_string()).unwrap_or_default());
        }
        if with_probs {
            let p = r.probabilities.unwrap_or([f64::NAN; NUM_STAGES]);
            rec.extend(p.iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(format!("csv buffer: {e}")))
}

fn data_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> CliError {
    gaborscope::Error::Data(format!("{}:{line}: {msg}", path.display())).into()
}

pub fn read(path: &Path) -> CliResult<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => CliError::Csv(e),
    })?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(rc), Some(ec), Some(sc)) = (col("recording"), col("epoch"), col("stage")) else {
        return Err(data_err(path, 1, "header must name recording, epoch and stage columns"));
    };
    let single = col("single");
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let epoch: usize = field(ec).parse().map_err(|_| data_err(path, line, "epoch is not a number"))?;
        let stage: StageLabel = field(sc).parse().map_err(|e| data_err(path, line, e))?;
        let single = match single.map(field) {
            Some(s) if !s.is_empty() => Some(s.parse::<StageLabel>().map_err(|e| data_err(path, line, e))?),
            _ => None,
        };
        let recording = field(rc).to_string();
        if !seen.insert((recording.clone(), epoch)) {
            return Err(data_err(path, line, format!("duplicate entry for {recording} epoch {epoch}")));
        }
        out.push(Row {
            recording,
            epoch,
            stage,
            single,
            probabilities: None,
        });
    }
    Ok(out)
}

/// Truth stage per `(recording, epoch)`.
pub fn truth_map(rows: &[Row]) -> BTreeMap<(String, usize), StageLabel> {
    rows.iter().map(|r| ((r.recording.clone(), r.epoch), r.stage)).collect()
}
