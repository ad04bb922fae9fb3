use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// The eight supported input modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Image,
    Video,
    Audio,
    Point,
    Imu,
    Fmri,
    Depth,
    Normal,
}

impl ModalityId {
    pub const ALL: [ModalityId; 8] = [
        ModalityId::Image,
        ModalityId::Video,
        ModalityId::Audio,
        ModalityId::Point,
        ModalityId::Imu,
        ModalityId::Fmri,
        ModalityId::Depth,
        ModalityId::Normal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Short identifier used in parameter names and files.
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityId::Image => "image",
            ModalityId::Video => "video",
            ModalityId::Audio => "audio",
            ModalityId::Point => "point",
            ModalityId::Imu => "imu",
            ModalityId::Fmri => "fmri",
            ModalityId::Depth => "depth",
            ModalityId::Normal => "normal",
        }
    }

    /// Human-readable name used inside caption prompts.
    pub fn prompt_name(self) -> &'static str {
        match self {
            ModalityId::Image => "image",
            ModalityId::Video => "video",
            ModalityId::Audio => "audio",
            ModalityId::Point => "point cloud",
            ModalityId::Imu => "IMU data",
            ModalityId::Fmri => "fMRI data",
            ModalityId::Depth => "depth map",
            ModalityId::Normal => "normal map",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Argument(alloc::format!("unknown modality `{s}`")))
    }
}
