//! Visit records: ingestion from JSON lines, prior-visit linking, and the
//! token vocabulary.

pub mod image;
pub mod labels;
pub mod lexicon;
pub mod synth;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RecapError, Result};
use image::ImageRef;
use labels::{
    normalize_observation_status, Observation, ObservationLabel, Progression, RawStatus, Status,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One study of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRecord {
    pub subject_id: String,
    pub study_id: String,
    pub study_order: i64,
    pub image: ImageRef,
    pub report: String,
    /// Canonical label order, at most one entry per observation.
    pub observations: Vec<ObservationLabel>,
    pub progressions: BTreeSet<Progression>,
    /// Index of the previous study of the same subject within the same partition.
    pub prior: Option<usize>,
    /// Prior study id stated in the source file, checked during linking.
    pub declared_prior: Option<String>,
}

impl VisitRecord {
    pub fn report_tokens(&self) -> Vec<String> {
        vocab::tokenize(&self.report)
    }

    pub fn is_follow_up(&self) -> bool {
        self.prior.is_some()
    }

    pub fn status_of(&self, o: Observation) -> Option<Status> {
        self.observations
            .iter()
            .find(|l| l.observation == o)
            .map(|l| l.status)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<VisitRecord>,
    pub validation: Vec<VisitRecord>,
    pub test: Vec<VisitRecord>,
}

impl CorpusSplit {
    pub fn partition(&self, split: Split) -> &[VisitRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn partition_mut(&mut self, split: Split) -> &mut Vec<VisitRecord> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prior_of(&self, split: Split, record: &VisitRecord) -> Option<&VisitRecord> {
        record.prior.map(|i| &self.partition(split)[i])
    }
}

#[derive(Deserialize)]
struct RawObservation {
    label: String,
    status: String,
}

#[derive(Deserialize)]
struct RawRecord {
    subject_id: String,
    study_id: String,
    study_order: i64,
    split: String,
    image: String,
    report: String,
    #[serde(default)]
    observations: Vec<RawObservation>,
    #[serde(default)]
    progressions: Vec<String>,
    #[serde(default)]
    prior: Option<String>,
}

#[derive(Serialize)]
struct OutObservation<'a> {
    label: &'a str,
    status: &'a str,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    subject_id: &'a str,
    study_id: &'a str,
    study_order: i64,
    split: &'a str,
    image: String,
    report: &'a str,
    observations: Vec<OutObservation<'a>>,
    progressions: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<&'a str>,
}

fn parse_status(s: &str) -> Option<Option<Status>> {
    match s {
        "POS" => Some(Some(Status::Pos)),
        "NEG" => Some(Some(Status::Neg)),
        other => RawStatus::parse(other).map(normalize_observation_status),
    }
}

/// Parses one corpus line. `line` is 1-based and only used in diagnostics.
pub fn parse_record(text: &str, line: usize, base_dir: &Path) -> Result<(Split, VisitRecord)> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| RecapError::Parse {
        line,
        message: e.to_string(),
    })?;
    let split = Split::parse(&raw.split).ok_or_else(|| {
        RecapError::Validation(format!(
            "line {line}: split {:?} is not one of train, validation, test",
            raw.split
        ))
    })?;
    let mut by_obs: BTreeMap<Observation, Status> = BTreeMap::new();
    for o in &raw.observations {
        let obs = Observation::from_label(&o.label).ok_or_else(|| {
            RecapError::Validation(format!(
                "line {line}: unknown observation label {:?}; legal labels are: {}",
                o.label,
                Observation::legal_labels()
            ))
        })?;
        let status = parse_status(&o.status).ok_or_else(|| {
            RecapError::Validation(format!(
                "line {line}: unknown status {:?} for {}",
                o.status, o.label
            ))
        })?;
        if by_obs.contains_key(&obs) {
            return Err(RecapError::Validation(format!(
                "line {line}: observation {} listed twice",
                obs
            )));
        }
        if let Some(status) = status {
            by_obs.insert(obs, status);
        }
    }
    let mut progressions = BTreeSet::new();
    for p in &raw.progressions {
        let prog = Progression::parse(p).ok_or_else(|| {
            RecapError::Validation(format!(
                "line {line}: unknown progression {p:?}; expected Better, Stable or Worse"
            ))
        })?;
        progressions.insert(prog);
    }
    let image = ImageRef::parse(&raw.image, base_dir).map_err(|e| {
        RecapError::Validation(format!("line {line}: {e}"))
    })?;
    Ok((
        split,
        VisitRecord {
            subject_id: raw.subject_id,
            study_id: raw.study_id,
            study_order: raw.study_order,
            image,
            report: raw.report,
            observations: by_obs
                .into_iter()
                .map(|(o, s)| ObservationLabel::new(o, s))
                .collect(),
            progressions,
            prior: None,
            declared_prior: raw.prior,
        },
    ))
}

/// Reads a JSON-lines corpus. Prior links are left unresolved.
pub fn ingest_corpus(path: &Path) -> Result<CorpusSplit> {
    let text = fs::read_to_string(path).map_err(|e| RecapError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = CorpusSplit::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (split, rec) = parse_record(line, i + 1, base)?;
        out.partition_mut(split).push(rec);
    }
    Ok(out)
}

/// Points every non-first study at the subject's previous study in the same
/// partition. Subjects shared between partitions are rejected.
pub fn link_prior_visits(mut split: CorpusSplit) -> Result<CorpusSplit> {
    let mut owner: HashMap<&str, Split> = HashMap::new();
    for s in Split::ALL {
        for r in split.partition(s) {
            if let Some(prev) = owner.insert(r.subject_id.as_str(), s) {
                if prev != s {
                    return Err(RecapError::Validation(format!(
                        "subject {} appears in both {prev} and {s}; splits must be subject-disjoint",
                        r.subject_id
                    )));
                }
            }
        }
    }

    for s in Split::ALL {
        let records = split.partition_mut(s);
        let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_subject.entry(r.subject_id.clone()).or_default().push(i);
        }
        for (subject, mut idx) in by_subject {
            idx.sort_by_key(|&i| records[i].study_order);
            for w in idx.windows(2) {
                if records[w[0]].study_order == records[w[1]].study_order {
                    return Err(RecapError::Validation(format!(
                        "subject {subject} has two studies with study_order {}",
                        records[w[0]].study_order
                    )));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                let prior = if k == 0 { None } else { Some(idx[k - 1]) };
                let prior_study = prior.map(|p| records[p].study_id.clone());
                let rec = &mut records[i];
                if let Some(declared) = &rec.declared_prior {
                    if prior_study.as_ref() != Some(declared) {
                        return Err(RecapError::Validation(format!(
                            "study {} declares prior {declared} but the preceding study is {}",
                            rec.study_id,
                            prior_study.as_deref().unwrap_or("none")
                        )));
                    }
                }
                if prior.is_none() && !rec.progressions.is_empty() {
                    return Err(RecapError::Validation(format!(
                        "study {} is a first visit but carries progression labels",
                        rec.study_id
                    )));
                }
                rec.prior = prior;
            }
        }
    }
    Ok(split)
}

/// Ingest plus linking.
pub fn load_corpus(path: &Path) -> Result<CorpusSplit> {
    link_prior_visits(ingest_corpus(path)?)
}

pub fn record_to_json(split: Split, r: &VisitRecord, prior_study: Option<&str>) -> Result<String> {
    let out = OutRecord {
        subject_id: &r.subject_id,
        study_id: &r.study_id,
        study_order: r.study_order,
        split: split.as_str(),
        image: r.image.to_field(),
        report: &r.report,
        observations: r
            .observations
            .iter()
            .map(|l| OutObservation {
                label: l.observation.label(),
                status: l.status.as_str(),
            })
            .collect(),
        progressions: r.progressions.iter().map(|p| p.as_str()).collect(),
        prior: prior_study,
    };
    Ok(serde_json::to_string(&out)?)
}

/// Writes the corpus as JSON lines, train then validation then test.
pub fn write_corpus(split: &CorpusSplit, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in Split::ALL {
        let part = split.partition(s);
        for r in part {
            let prior = r.prior.map(|i| part[i].study_id.as_str());
            writeln!(buf, "{}", record_to_json(s, r, prior)?).expect("write to Vec");
        }
    }
    fs::write(path, buf).map_err(|e| RecapError::io(path, e))
}
