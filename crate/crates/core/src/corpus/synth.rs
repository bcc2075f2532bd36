//! Procedural corpus: label chains with persistence, templated reports whose
//! wording depends on the prior visit, and textured images.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::{ImageRef, PixelGrid};
use super::labels::{Observation, ObservationLabel, Progression, Status, NUM_OBSERVATIONS};
use super::lexicon::Lexicons;
use super::vocab::tokenize;
use super::{link_prior_visits, CorpusSplit, Split, VisitRecord};
use crate::error::{RecapError, Result};

/// Study count of the chest X-ray training partition the marginals come from.
const REFERENCE_STUDIES: f64 = 270_810.0;

/// (POS, NEG) study counts per observation, canonical order. No Finding is
/// derived from the others and carries no counts.
const REFERENCE_COUNTS: [(f64, f64); NUM_OBSERVATIONS] = [
    (0.0, 0.0),
    (49_806.0, 129_360.0),
    (70_561.0, 85_448.0),
    (11_717.0, 1_972.0),
    (67_714.0, 8_157.0),
    (33_034.0, 51_639.0),
    (14_449.0, 97_197.0),
    (23_945.0, 21_976.0),
    (68_273.0, 563.0),
    (8_707.0, 190_356.0),
    (56_972.0, 170_989.0),
    (7_296.0, 63.0),
    (11_070.0, 9_632.0),
    (60_455.0, 1_081.0),
];

/// (P(POS), P(NEG)) per observation.
pub fn reference_marginals() -> [(f64, f64); NUM_OBSERVATIONS] {
    REFERENCE_COUNTS.map(|(p, n)| (p / REFERENCE_STUDIES, n / REFERENCE_STUDIES))
}

const PHRASES: [&str; NUM_OBSERVATIONS] = [
    "acute cardiopulmonary process",
    "cardiomediastinal silhouette prominence",
    "cardiomegaly",
    "pulmonary nodule",
    "airspace opacity",
    "pulmonary edema",
    "focal consolidation",
    "pneumonia",
    "basilar atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural scarring",
    "rib fracture",
    "support tube",
];

const STABLE_WORDS: [&str; 3] = ["unchanged", "stable", "persistent"];
const WORSE_WORDS: [&str; 3] = ["increased", "worsened", "enlarged"];
const BETTER_WORDS: [&str; 3] = ["improved", "decreased", "reduced"];

pub const SEVERITY_LEVELS: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    /// Fraction of records that are follow-up visits.
    pub follow_up_ratio: f64,
    pub lexicons: Lexicons,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    /// Train/validation/test shares of the records, assigned per subject.
    pub split_fractions: [f64; 3],
    /// Probability that a follow-up keeps an observation's prior state.
    pub persistence: f64,
    pub noise_sd: f64,
    pub marginals: [(f64, f64); NUM_OBSERVATIONS],
}

impl SynthSpec {
    pub fn new(size: usize, follow_up_ratio: f64, lexicons: Lexicons, seed: u64) -> Self {
        SynthSpec {
            size,
            follow_up_ratio,
            lexicons,
            seed,
            image_size: 32,
            patch_size: 8,
            split_fractions: [0.8, 0.1, 0.1],
            persistence: 0.6,
            noise_sd: 6.0,
            marginals: reference_marginals(),
        }
    }

    /// Generator settings from the `[synth]` and `[model]` config sections.
    pub fn from_config(config: &crate::config::Config, lexicons: Lexicons) -> Self {
        let s = &config.synth;
        SynthSpec {
            image_size: config.model.image_size,
            patch_size: config.model.patch_size,
            split_fractions: s.split_fractions,
            persistence: s.persistence,
            noise_sd: s.noise_sd,
            ..SynthSpec::new(s.size, s.follow_up_ratio, lexicons, config.seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.follow_up_ratio) {
            return Err(RecapError::Validation(format!(
                "follow_up_ratio {} outside [0, 1]",
                self.follow_up_ratio
            )));
        }
        if self.lexicons.spatial.is_empty() || self.lexicons.temporal.is_empty() {
            return Err(RecapError::Validation(
                "synthetic corpus needs non-empty temporal and spatial lexicons".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(RecapError::Validation("persistence outside [0, 1]".into()));
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|f| *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(RecapError::Validation(
                "split fractions must be non-negative and sum to 1".into(),
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(RecapError::Validation(
                "image_size must be a multiple of patch_size".into(),
            ));
        }
        let patches = (self.image_size / self.patch_size).pow(2);
        if patches < NUM_OBSERVATIONS + 1 {
            return Err(RecapError::Validation(format!(
                "{patches} patches cannot hold {NUM_OBSERVATIONS} observation textures"
            )));
        }
        for (p, n) in self.marginals {
            if p < 0.0 || n < 0.0 || p + n > 1.0 {
                return Err(RecapError::Validation("marginals must be probabilities".into()));
            }
        }
        Ok(())
    }
}

/// Hidden state of one observation at one visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Finding {
    Absent,
    Neg,
    Pos(u8),
}

fn draw_finding(marg: (f64, f64), rng: &mut ChaCha8Rng) -> Finding {
    let u: f64 = rng.random();
    if u < marg.0 {
        Finding::Pos(rng.random_range(0..SEVERITY_LEVELS))
    } else if u < marg.0 + marg.1 {
        Finding::Neg
    } else {
        Finding::Absent
    }
}

fn draw_state(
    spec: &SynthSpec,
    prior: Option<&[Finding; NUM_OBSERVATIONS]>,
    rng: &mut ChaCha8Rng,
) -> [Finding; NUM_OBSERVATIONS] {
    let mut out = [Finding::Absent; NUM_OBSERVATIONS];
    for i in 1..NUM_OBSERVATIONS {
        out[i] = match prior {
            Some(p) if rng.random::<f64>() < spec.persistence => match p[i] {
                // a kept finding may still change severity
                Finding::Pos(_) if rng.random::<f64>() < 0.5 => {
                    Finding::Pos(rng.random_range(0..SEVERITY_LEVELS))
                }
                f => f,
            },
            _ => draw_finding(spec.marginals[i], rng),
        };
    }
    let any_pos = out[1..].iter().any(|f| matches!(f, Finding::Pos(_)));
    out[0] = if any_pos { Finding::Neg } else { Finding::Pos(0) };
    out
}

fn attribute(spatial: &[String], obs: usize, severity: u8) -> &str {
    &spatial[(obs * SEVERITY_LEVELS as usize + severity as usize) % spatial.len()]
}

fn progression_of(prior: Finding, cur: Finding) -> Option<Progression> {
    match (prior, cur) {
        (Finding::Pos(a), Finding::Pos(b)) => Some(match b.cmp(&a) {
            std::cmp::Ordering::Greater => Progression::Worse,
            std::cmp::Ordering::Less => Progression::Better,
            std::cmp::Ordering::Equal => Progression::Stable,
        }),
        (_, Finding::Pos(_)) => Some(Progression::Worse),
        (Finding::Pos(_), Finding::Neg) => Some(Progression::Better),
        _ => None,
    }
}

fn render_report(
    spatial: &[String],
    state: &[Finding; NUM_OBSERVATIONS],
    prior: Option<&[Finding; NUM_OBSERVATIONS]>,
) -> (String, BTreeSet<Progression>) {
    let mut sentences = Vec::new();
    let mut progressions = BTreeSet::new();
    if state[0] != Finding::Neg {
        sentences.push(format!("no {} .", PHRASES[0]));
    }
    for i in 1..NUM_OBSERVATIONS {
        let phrase = PHRASES[i];
        let before = prior.map(|p| p[i]);
        let prog = before.and_then(|b| progression_of(b, state[i]));
        if let Some(p) = prog {
            progressions.insert(p);
        }
        let s = match (state[i], before) {
            (Finding::Absent, _) => continue,
            (Finding::Neg, Some(Finding::Pos(_))) => format!("{phrase} has resolved ."),
            (Finding::Neg, _) => format!("no {phrase} ."),
            (Finding::Pos(sev), Some(Finding::Pos(_))) => {
                let attr = attribute(spatial, i, sev);
                match prog {
                    Some(Progression::Worse) => format!("{attr} {phrase} has {} .", WORSE_WORDS[i % 3]),
                    Some(Progression::Better) => format!("{attr} {phrase} has {} .", BETTER_WORDS[i % 3]),
                    _ => format!("{attr} {phrase} is {} .", STABLE_WORDS[i % 3]),
                }
            }
            (Finding::Pos(sev), Some(_)) => {
                format!("there is new {} {phrase} .", attribute(spatial, i, sev))
            }
            (Finding::Pos(sev), None) => {
                format!("there is {} {phrase} .", attribute(spatial, i, sev))
            }
        };
        sentences.push(s);
    }
    (sentences.join(" "), progressions)
}

/// Fixed ±1 texture of one observation, independent of the corpus seed.
fn texture(obs: usize, patch: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e87_0000 + obs as u64);
    (0..patch * patch)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn render_image(
    spec: &SynthSpec,
    state: &[Finding; NUM_OBSERVATIONS],
    textures: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> PixelGrid {
    let n = spec.image_size;
    let ps = spec.patch_size;
    let per_row = n / ps;
    let noise = Normal::new(0.0, spec.noise_sd).expect("finite noise sd");
    let mut pixels = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let patch = (r / ps) * per_row + c / ps;
            let mut v = 128.0;
            if (1..=NUM_OBSERVATIONS).contains(&patch) {
                let i = patch - 1;
                let amp = match state[i] {
                    Finding::Pos(s) => 1.0 + 0.5 * s as f64,
                    Finding::Neg => -1.0,
                    Finding::Absent => 0.0,
                };
                v += 24.0 * amp * textures[i][(r % ps) * ps + c % ps];
            }
            v += noise.sample(rng);
            pixels[r * n + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    PixelGrid::new(n, n, pixels).expect("sized buffer")
}

fn labels_of(state: &[Finding; NUM_OBSERVATIONS]) -> Vec<ObservationLabel> {
    Observation::ALL
        .iter()
        .zip(state)
        .filter_map(|(&o, f)| match f {
            Finding::Pos(_) => Some(ObservationLabel::new(o, Status::Pos)),
            Finding::Neg => Some(ObservationLabel::new(o, Status::Neg)),
            Finding::Absent => None,
        })
        .collect()
}

/// Deterministic for a given spec. Follow-up count is `round(size · ratio)`.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<CorpusSplit> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let follow_ups = (spec.size as f64 * spec.follow_up_ratio).round() as usize;
    let subjects = spec.size - follow_ups;
    if subjects == 0 && spec.size > 0 {
        return Err(RecapError::Validation(
            "follow_up_ratio 1 leaves no first visits to follow".into(),
        ));
    }

    let mut visits = vec![1usize; subjects];
    for _ in 0..follow_ups {
        let s = rng.random_range(0..subjects);
        visits[s] += 1;
    }
    let mut order: Vec<usize> = (0..subjects).collect();
    order.shuffle(&mut rng);

    let mut split_of = vec![Split::Train; subjects];
    let cut1 = spec.split_fractions[0] * spec.size as f64;
    let cut2 = cut1 + spec.split_fractions[1] * spec.size as f64;
    let mut assigned = 0usize;
    for &s in &order {
        let at = assigned as f64;
        split_of[s] = if at < cut1 {
            Split::Train
        } else if at < cut2 {
            Split::Validation
        } else {
            Split::Test
        };
        assigned += visits[s];
    }

    let textures: Vec<Vec<f64>> = (0..NUM_OBSERVATIONS)
        .map(|i| texture(i, spec.patch_size))
        .collect();
    let mut out = CorpusSplit::default();
    for s in 0..subjects {
        let subject_id = format!("s{s:05}");
        let mut prior: Option<[Finding; NUM_OBSERVATIONS]> = None;
        for v in 1..=visits[s] {
            let state = draw_state(spec, prior.as_ref(), &mut rng);
            let (report, progressions) = render_report(&spec.lexicons.spatial, &state, prior.as_ref());
            let grid = render_image(spec, &state, &textures, &mut rng);
            out.partition_mut(split_of[s]).push(VisitRecord {
                subject_id: subject_id.clone(),
                study_id: format!("{subject_id}_v{v}"),
                study_order: v as i64,
                image: ImageRef::Inline(grid),
                report,
                observations: labels_of(&state),
                progressions,
                prior: None,
                declared_prior: (v > 1).then(|| format!("{subject_id}_v{}", v - 1)),
            });
            prior = Some(state);
        }
    }
    link_prior_visits(out)
}

/// Inverse of the synthetic report templates: recovers observation labels
/// from report text. Deterministic and total over arbitrary strings.
#[derive(Debug, Clone)]
pub struct TemplateLabeler {
    phrases: Vec<Vec<String>>,
}

impl Default for TemplateLabeler {
    fn default() -> Self {
        TemplateLabeler {
            phrases: PHRASES.iter().map(|p| tokenize(p)).collect(),
        }
    }
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

impl TemplateLabeler {
    /// No Finding is POS when its sentence is present and NEG otherwise.
    pub fn label(&self, report: &str) -> Vec<ObservationLabel> {
        let tokens = tokenize(report);
        let mut status: [Option<Status>; NUM_OBSERVATIONS] = [None; NUM_OBSERVATIONS];
        for sentence in tokens.split(|t| t == ".") {
            for (i, phrase) in self.phrases.iter().enumerate() {
                if !contains_seq(sentence, phrase) {
                    continue;
                }
                let negated = sentence.first().is_some_and(|t| t == "no")
                    || sentence.iter().any(|t| t == "resolved");
                status[i] = Some(if i == 0 || !negated { Status::Pos } else { Status::Neg });
            }
        }
        if status[0].is_none() {
            status[0] = Some(Status::Neg);
        }
        Observation::ALL
            .iter()
            .zip(status)
            .filter_map(|(&o, s)| s.map(|s| ObservationLabel::new(o, s)))
            .collect()
    }

    /// POS indicator per observation.
    pub fn positives(&self, report: &str) -> [bool; NUM_OBSERVATIONS] {
        let mut out = [false; NUM_OBSERVATIONS];
        for l in self.label(report) {
            out[l.observation.index()] = l.status == Status::Pos;
        }
        out
    }
}
