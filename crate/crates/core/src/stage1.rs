//! Observation detection/classification and progression prediction.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::backbone::{PatchEncoder, VisualEncoder};
use crate::config::{ContextRule, ModelConfig};
use crate::corpus::labels::{Observation, ObservationLabel, Progression, Status, NUM_OBSERVATIONS};
use crate::corpus::VisitRecord;
use crate::error::{RecapError, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};

const NO_FINDING: usize = 0;

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: ModelConfig,
    pub backbone: PatchEncoder,
    detect: Linear,
    classify: Linear,
    progress: Linear,
}

/// Per-observation probabilities in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationProbs {
    pub p_d: [f64; NUM_OBSERVATIONS],
    pub p_c: [f64; NUM_OBSERVATIONS],
    pub p: [f64; NUM_OBSERVATIONS],
}

impl ObservationProbs {
    /// No Finding is present in every study, so its detection is fixed at 1.
    pub fn from_logits(det: &[f64], cls: &[f64]) -> Self {
        let sig = crate::autograd::sigmoid_scalar;
        let mut out = ObservationProbs {
            p_d: [0.0; NUM_OBSERVATIONS],
            p_c: [0.0; NUM_OBSERVATIONS],
            p: [0.0; NUM_OBSERVATIONS],
        };
        for i in 0..NUM_OBSERVATIONS {
            out.p_d[i] = if i == NO_FINDING { 1.0 } else { sig(det[i]) };
            out.p_c[i] = sig(cls[i]);
            out.p[i] = out.p_d[i] * out.p_c[i];
        }
        out
    }

    /// Abnormal (POS) calls at `threshold`.
    pub fn positives(&self, threshold: f64) -> [bool; NUM_OBSERVATIONS] {
        self.p.map(|p| p >= threshold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Prediction {
    pub observations: ObservationProbs,
    /// Better, Stable, Worse; absent for first visits.
    pub progressions: Option<[f64; 3]>,
}

/// Tape handles of one Stage-1 forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Stage1Outputs {
    pub det_logits: Var,
    pub cls_logits: Var,
    pub prog_logits: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Loss {
    pub detection: Var,
    pub classification: Var,
    pub progression: Option<Var>,
    pub total: Var,
}

/// Binary targets derived from a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Labels {
    pub detected: [bool; NUM_OBSERVATIONS],
    pub positive: [bool; NUM_OBSERVATIONS],
    pub progressions: Option<[bool; 3]>,
}

impl Stage1Labels {
    pub fn from_record(r: &VisitRecord) -> Self {
        let mut detected = [false; NUM_OBSERVATIONS];
        let mut positive = [false; NUM_OBSERVATIONS];
        for l in &r.observations {
            detected[l.observation.index()] = true;
            positive[l.observation.index()] = l.status == Status::Pos;
        }
        let progressions = r.is_follow_up().then(|| {
            let mut p = [false; 3];
            for q in &r.progressions {
                p[q.index()] = true;
            }
            p
        });
        Stage1Labels {
            detected,
            positive,
            progressions,
        }
    }
}

fn row(values: impl IntoIterator<Item = f64>) -> Mat {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Mat::from_shape_vec((1, n), v).expect("row vector")
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

impl Stage1Model {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let backbone = PatchEncoder::new(store, rng, cfg);
        let g = ParamGroup::Rest;
        Stage1Model {
            config: cfg.clone(),
            backbone,
            detect: Linear::new(store, rng, "stage1.detect", h, NUM_OBSERVATIONS, g),
            classify: Linear::new(store, rng, "stage1.classify", h, NUM_OBSERVATIONS, g),
            progress: Linear::new(store, rng, "stage1.progress", 2 * h, 3, g),
        }
    }

    pub fn observation_logits(&self, tape: &mut Tape, cls_c: Var) -> (Var, Var) {
        (self.detect.forward(tape, cls_c), self.classify.forward(tape, cls_c))
    }

    /// The concatenated class tokens enter as a constant, so this head never
    /// sends gradient into the visual encoder.
    pub fn progression_logits(&self, tape: &mut Tape, cls_p: Option<Var>, cls_c: Var) -> Result<Var> {
        let cls_p = cls_p.ok_or_else(|| {
            RecapError::Precondition("progression prediction needs a prior study".into())
        })?;
        let joint = tape.concat_cols(&[cls_p, cls_c]);
        let joint = tape.detach(joint);
        Ok(self.progress.forward(tape, joint))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        current: &Mat,
        prior: Option<&Mat>,
        dropout: f64,
    ) -> Result<Stage1Outputs> {
        let vc = self.backbone.encode(tape, current, dropout)?;
        let (det_logits, cls_logits) = self.observation_logits(tape, vc.cls);
        let prog_logits = match prior {
            Some(img) => {
                let vp = self.backbone.encode(tape, img, dropout)?;
                Some(self.progression_logits(tape, Some(vp.cls), vc.cls)?)
            }
            None => None,
        };
        Ok(Stage1Outputs {
            det_logits,
            cls_logits,
            prog_logits,
        })
    }

    pub fn predict(&self, store: &ParamStore, current: &Mat, prior: Option<&Mat>) -> Result<Stage1Prediction> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, current, prior, 0.0)?;
        let det: Vec<f64> = tape.value(out.det_logits).iter().copied().collect();
        let cls: Vec<f64> = tape.value(out.cls_logits).iter().copied().collect();
        let progressions = out.prog_logits.map(|v| {
            let x = tape.value(v);
            [0, 1, 2].map(|j| crate::autograd::sigmoid_scalar(x[[0, j]]))
        });
        Ok(Stage1Prediction {
            observations: ObservationProbs::from_logits(&det, &cls),
            progressions,
        })
    }
}

/// `L_d + L_c + L_p` for one study.
///
/// `L_d` weights positive detection targets by `alpha_d` and averages over
/// the 14 observations (No Finding contributes nothing since `p_d ≡ 1`).
/// `L_c` averages over detected observations only. `L_p` averages over the
/// three progressions and exists only for follow-ups.
pub fn stage1_loss(tape: &mut Tape, out: &Stage1Outputs, labels: &Stage1Labels, alpha_d: f64) -> Stage1Loss {
    let n = NUM_OBSERVATIONS;
    let live = |i: usize| bit(i != NO_FINDING);
    let det_t = row((0..n).map(|i| bit(labels.detected[i])));
    let det_wp = row((0..n).map(|i| alpha_d * live(i)));
    let det_wn = row((0..n).map(live));
    let l_d = tape.bce_with_logits(out.det_logits, det_t, det_wp, det_wn);
    let l_d = tape.scale(l_d, 1.0 / n as f64);

    let detected = labels.detected.iter().filter(|&&d| d).count();
    let mask = row((0..n).map(|i| bit(labels.detected[i])));
    let cls_t = row((0..n).map(|i| bit(labels.positive[i])));
    let l_c = tape.bce_with_logits(out.cls_logits, cls_t, mask.clone(), mask);
    let l_c = tape.scale(l_c, 1.0 / detected.max(1) as f64);

    let mut total = tape.add(l_d, l_c);
    let l_p = match (out.prog_logits, labels.progressions) {
        (Some(logits), Some(target)) => {
            let t = row(target.map(bit));
            let ones = Mat::ones((1, 3));
            let l = tape.bce_with_logits(logits, t, ones.clone(), ones);
            let l = tape.scale(l, 1.0 / 3.0);
            total = tape.add(total, l);
            Some(l)
        }
        _ => None,
    };
    Stage1Loss {
        detection: l_d,
        classification: l_c,
        progression: l_p,
        total,
    }
}

/// Observation context for Stage 2 in canonical order. Falls back to the
/// single most probable observation when nothing passes the threshold.
pub fn select_predicted_context(probs: &ObservationProbs, threshold: f64, rule: ContextRule) -> Vec<ObservationLabel> {
    let mut out = Vec::new();
    for (i, o) in Observation::ALL.iter().enumerate() {
        let keep = match rule {
            ContextRule::Detection => probs.p_d[i] >= threshold,
            ContextRule::Joint => probs.p[i] >= threshold,
        };
        if keep {
            let status = if probs.p_c[i] >= 0.5 { Status::Pos } else { Status::Neg };
            out.push(ObservationLabel::new(*o, status));
        }
    }
    if out.is_empty() {
        let best = (0..NUM_OBSERVATIONS)
            .max_by(|&a, &b| probs.p[a].total_cmp(&probs.p[b]).then(b.cmp(&a)))
            .expect("fourteen observations");
        let status = if probs.p_c[best] >= 0.5 { Status::Pos } else { Status::Neg };
        out.push(ObservationLabel::new(Observation::ALL[best], status));
    }
    out
}

pub fn select_progressions(p: &[f64; 3], threshold: f64) -> BTreeSet<Progression> {
    Progression::ALL
        .iter()
        .copied()
        .filter(|q| p[q.index()] >= threshold)
        .collect()
}
