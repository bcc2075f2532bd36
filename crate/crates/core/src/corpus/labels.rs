use std::fmt;

use serde::{Deserialize, Serialize};

/// The fourteen canonical chest X-ray observations, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Observation {
    NoFinding,
    EnlargedCardiomediastinum,
    Cardiomegaly,
    LungLesion,
    LungOpacity,
    Edema,
    Consolidation,
    Pneumonia,
    Atelectasis,
    Pneumothorax,
    PleuralEffusion,
    PleuralOther,
    Fracture,
    SupportDevices,
}

pub const NUM_OBSERVATIONS: usize = 14;

impl Observation {
    pub const ALL: [Observation; NUM_OBSERVATIONS] = [
        Observation::NoFinding,
        Observation::EnlargedCardiomediastinum,
        Observation::Cardiomegaly,
        Observation::LungLesion,
        Observation::LungOpacity,
        Observation::Edema,
        Observation::Consolidation,
        Observation::Pneumonia,
        Observation::Atelectasis,
        Observation::Pneumothorax,
        Observation::PleuralEffusion,
        Observation::PleuralOther,
        Observation::Fracture,
        Observation::SupportDevices,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Observation::NoFinding => "No Finding",
            Observation::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            Observation::Cardiomegaly => "Cardiomegaly",
            Observation::LungLesion => "Lung Lesion",
            Observation::LungOpacity => "Lung Opacity",
            Observation::Edema => "Edema",
            Observation::Consolidation => "Consolidation",
            Observation::Pneumonia => "Pneumonia",
            Observation::Atelectasis => "Atelectasis",
            Observation::Pneumothorax => "Pneumothorax",
            Observation::PleuralEffusion => "Pleural Effusion",
            Observation::PleuralOther => "Pleural Other",
            Observation::Fracture => "Fracture",
            Observation::SupportDevices => "Support Devices",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|o| o.label() == label)
    }

    /// Reserved vocabulary token standing for this observation.
    pub fn token(self) -> String {
        format!("[OBS:{}]", self.label().replace(' ', "_"))
    }

    pub fn legal_labels() -> String {
        Self::ALL
            .iter()
            .map(|o| o.label())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEG")]
    Neg,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pos => "POS",
            Status::Neg => "NEG",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Status::Pos => "[POS]",
            Status::Neg => "[NEG]",
        }
    }
}

/// Four-valued status as emitted by rule-based report labelers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawStatus {
    Positive,
    Negative,
    Uncertain,
    Blank,
}

impl RawStatus {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Positive" => Some(RawStatus::Positive),
            "Negative" => Some(RawStatus::Negative),
            "Uncertain" => Some(RawStatus::Uncertain),
            "Blank" => Some(RawStatus::Blank),
            _ => None,
        }
    }
}

/// Uncertain findings count as positive; blank ones are dropped.
pub fn normalize_observation_status(raw: RawStatus) -> Option<Status> {
    match raw {
        RawStatus::Positive | RawStatus::Uncertain => Some(Status::Pos),
        RawStatus::Negative => Some(Status::Neg),
        RawStatus::Blank => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Progression {
    Better,
    Stable,
    Worse,
}

impl Progression {
    pub const ALL: [Progression; 3] = [Progression::Better, Progression::Stable, Progression::Worse];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Progression::Better => "Better",
            Progression::Stable => "Stable",
            Progression::Worse => "Worse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|p| p.as_str() == s)
    }
}

/// One labeled observation of a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObservationLabel {
    pub observation: Observation,
    pub status: Status,
}

impl ObservationLabel {
    pub fn new(observation: Observation, status: Status) -> Self {
        ObservationLabel {
            observation,
            status,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_normalization() {
        assert_eq!(normalize_observation_status(RawStatus::Uncertain), Some(Status::Pos));
        assert_eq!(normalize_observation_status(RawStatus::Positive), Some(Status::Pos));
        assert_eq!(normalize_observation_status(RawStatus::Negative), Some(Status::Neg));
        assert_eq!(normalize_observation_status(RawStatus::Blank), None);
    }

    #[test]
    fn labels_round_trip_and_order() {
        for (i, o) in Observation::ALL.iter().enumerate() {
            assert_eq!(o.index(), i);
            assert_eq!(Observation::from_label(o.label()), Some(*o));
        }
        assert_eq!(Observation::from_label("Cardiomgly"), None);
        assert_eq!(Observation::PleuralEffusion.token(), "[OBS:Pleural_Effusion]");
    }
}
