use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Binary frame or strip label. Fluorescent is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Fluorescent,
    NotFluorescent,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Fluorescent
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Fluorescent => "fluorescent",
            Label::NotFluorescent => "not_fluorescent",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Direction along the image axis that points away from the blood supply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistalDirection {
    IncreasingX,
    DecreasingX,
}

impl DistalDirection {
    pub fn flipped(self) -> Self {
        match self {
            DistalDirection::IncreasingX => DistalDirection::DecreasingX,
            DistalDirection::DecreasingX => DistalDirection::IncreasingX,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistalDirection::IncreasingX => "increasing_x",
            DistalDirection::DecreasingX => "decreasing_x",
        }
    }
}

impl FromStr for DistalDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "increasing_x" | "increasing" => Ok(DistalDirection::IncreasingX),
            "decreasing_x" | "decreasing" => Ok(DistalDirection::DecreasingX),
            other => Err(format!("unknown distal direction `{other}`")),
        }
    }
}

/// Image axis the colon's longitudinal axis is aligned with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[default]
    Horizontal,
    Vertical,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "horizontal" => Ok(Axis::Horizontal),
            "vertical" => Ok(Axis::Vertical),
            other => Err(format!("unknown axis `{other}`")),
        }
    }
}

/// Acquisition device of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Pinpoint,
    Stryker1688,
    Arthrex,
    Synthetic,
    Other,
}

impl CameraId {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::Pinpoint => "pinpoint",
            CameraId::Stryker1688 => "stryker1688",
            CameraId::Arthrex => "arthrex",
            CameraId::Synthetic => "synthetic",
            CameraId::Other => "other",
        }
    }
}

impl FromStr for CameraId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pinpoint" => Ok(CameraId::Pinpoint),
            "stryker1688" => Ok(CameraId::Stryker1688),
            "arthrex" => Ok(CameraId::Arthrex),
            "synthetic" => Ok(CameraId::Synthetic),
            "other" => Ok(CameraId::Other),
            other => Err(format!("unknown camera `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}
