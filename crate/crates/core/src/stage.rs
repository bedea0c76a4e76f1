use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_STAGES: usize = 5;

/// Five-way sleep stage; raw S3 and S4 are merged into `Sws`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageLabel {
    Wake,
    S1,
    S2,
    #[serde(rename = "SWS", alias = "Sws")]
    Sws,
    #[serde(rename = "REM", alias = "Rem")]
    Rem,
}

impl StageLabel {
    pub const ALL: [StageLabel; NUM_STAGES] = [StageLabel::Wake, StageLabel::S1, StageLabel::S2, StageLabel::Sws, StageLabel::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageLabel::Wake => "Wake",
            StageLabel::S1 => "S1",
            StageLabel::S2 => "S2",
            StageLabel::Sws => "SWS",
            StageLabel::Rem => "REM",
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "WAKE" | "W" => Ok(StageLabel::Wake),
            "S1" | "N1" => Ok(StageLabel::S1),
            "S2" | "N2" => Ok(StageLabel::S2),
            "SWS" | "N3" => Ok(StageLabel::Sws),
            "REM" | "R" => Ok(StageLabel::Rem),
            other => Err(Error::Data(format!("unknown stage `{other}`"))),
        }
    }
}
