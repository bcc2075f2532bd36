//! Disease progression graph: PMI-ranked observation/entity edges built from
//! the training corpus, plus per-sample subgraph retrieval.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::labels::{Observation, ObservationLabel, Progression, Status, NUM_OBSERVATIONS};
use crate::corpus::lexicon::Lexicons;
use crate::corpus::vocab::{tokenize, Vocabulary};
use crate::corpus::VisitRecord;
use crate::error::{RecapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Observation,
    TemporalEntity,
    SpatialEntity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Prior,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    S,
    B,
    W,
    #[serde(rename = "R_S")]
    RS,
    #[serde(rename = "R_O")]
    RO,
}

pub const NUM_RELATIONS: usize = 5;

impl Relation {
    pub const ALL: [Relation; NUM_RELATIONS] =
        [Relation::S, Relation::B, Relation::W, Relation::RS, Relation::RO];
    /// Relations scored by the progression-reasoning head.
    pub const ENTITY: [Relation; 4] = [Relation::S, Relation::B, Relation::W, Relation::RS];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of_progression(p: Progression) -> Self {
        match p {
            Progression::Stable => Relation::S,
            Progression::Better => Relation::B,
            Progression::Worse => Relation::W,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::S => "S",
            Relation::B => "B",
            Relation::W => "W",
            Relation::RS => "R_S",
            Relation::RO => "R_O",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Relation::S | Relation::B | Relation::W)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub label: String,
    pub status: Option<Status>,
    pub side: Option<Side>,
    pub token_id: u32,
}

impl GraphNode {
    pub fn is_entity(&self) -> bool {
        self.kind != NodeKind::Observation
    }

    pub fn observation(&self) -> Option<Observation> {
        match self.kind {
            NodeKind::Observation => Observation::from_label(&self.label),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedEdge {
    pub src: usize,
    pub rel: Relation,
    pub dst: usize,
    pub pmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<TypedEdge>,
    #[serde(rename = "K")]
    pub k: usize,
}

/// `ln(count_xy · n / (count_x · count_y))`. A zero joint count gives `-inf`,
/// which callers treat as "no candidate".
pub fn compute_pmi(count_xy: u64, count_x: u64, count_y: u64, n_docs: u64) -> Result<f64> {
    if n_docs == 0 {
        return Err(RecapError::Precondition("PMI needs at least one document".into()));
    }
    if count_x == 0 || count_y == 0 {
        return Err(RecapError::Precondition(format!(
            "PMI undefined for a pair with zero marginal count ({count_x}, {count_y})"
        )));
    }
    if count_x > n_docs || count_y > n_docs || count_xy > count_x.min(count_y) {
        return Err(RecapError::Precondition(format!(
            "inconsistent counts xy={count_xy} x={count_x} y={count_y} n={n_docs}"
        )));
    }
    if count_xy == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(((count_xy as f64) * (n_docs as f64) / ((count_x as f64) * (count_y as f64))).ln())
}

/// Single-token lexicon entity with its vocabulary id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub label: String,
    pub kind: NodeKind,
    pub token_id: u32,
}

/// Lexicon entries that tokenize to exactly one in-vocabulary token.
pub fn resolve_entities(lexicons: &Lexicons, vocab: &Vocabulary) -> Vec<Entity> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (words, kind) in [
        (&lexicons.temporal, NodeKind::TemporalEntity),
        (&lexicons.spatial, NodeKind::SpatialEntity),
    ] {
        for w in words {
            let toks = tokenize(w);
            if toks.len() != 1 {
                continue;
            }
            let Some(id) = vocab.id(&toks[0]) else { continue };
            if vocab.is_reserved(id) || !seen.insert(toks[0].clone()) {
                continue;
            }
            out.push(Entity {
                label: toks[0].clone(),
                kind,
                token_id: id,
            });
        }
    }
    out
}

/// One scored (observation, relation, entity) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub observation: ObservationLabel,
    pub relation: Relation,
    pub entity: usize,
    pub pmi: f64,
}

/// Document-level co-occurrence counts. Temporal entities pair with
/// (observation, progression); spatial entities pair with the observation alone.
pub fn pmi_candidates(train: &[VisitRecord], entities: &[Entity]) -> Result<Vec<Candidate>> {
    let n = train.len() as u64;
    let mut count_x: BTreeMap<(ObservationLabel, Relation), u64> = BTreeMap::new();
    let mut count_y = vec![0u64; entities.len()];
    let mut count_xy: BTreeMap<(ObservationLabel, Relation, usize), u64> = BTreeMap::new();
    for r in train {
        let tokens: HashSet<String> = r.report_tokens().into_iter().collect();
        let present: Vec<usize> = (0..entities.len())
            .filter(|&e| tokens.contains(&entities[e].label))
            .collect();
        for &e in &present {
            count_y[e] += 1;
        }
        for &obs in &r.observations {
            let mut keys: Vec<Relation> = r
                .progressions
                .iter()
                .map(|&p| Relation::of_progression(p))
                .collect();
            keys.push(Relation::RS);
            for rel in keys {
                *count_x.entry((obs, rel)).or_default() += 1;
                for &e in &present {
                    let spatial = entities[e].kind == NodeKind::SpatialEntity;
                    if spatial == (rel == Relation::RS) {
                        *count_xy.entry((obs, rel, e)).or_default() += 1;
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(count_xy.len());
    for ((obs, rel, e), cxy) in count_xy {
        let pmi = compute_pmi(cxy, count_x[&(obs, rel)], count_y[e], n)?;
        out.push(Candidate {
            observation: obs,
            relation: rel,
            entity: e,
            pmi,
        });
    }
    Ok(out)
}

const STATUSES: [Status; 2] = [Status::Pos, Status::Neg];
const OBS_NODES_PER_SIDE: usize = NUM_OBSERVATIONS * 2;
pub const NUM_OBSERVATION_NODES: usize = OBS_NODES_PER_SIDE * 2;

/// Index of an observation node in a freshly built graph.
pub fn observation_node(side: Side, label: ObservationLabel) -> usize {
    let s = match side {
        Side::Prior => 0,
        Side::Current => 1,
    };
    let st = match label.status {
        Status::Pos => 0,
        Status::Neg => 1,
    };
    s * OBS_NODES_PER_SIDE + label.observation.index() * 2 + st
}

/// Keeps, for every (observation, relation), the `k` best candidates by PMI
/// descending with ties broken by entity label ascending.
pub fn top_k(candidates: &[Candidate], entities: &[Entity], k: usize) -> Vec<Candidate> {
    let mut groups: BTreeMap<(ObservationLabel, Relation), Vec<&Candidate>> = BTreeMap::new();
    for c in candidates.iter().filter(|c| c.pmi.is_finite()) {
        groups.entry((c.observation, c.relation)).or_default().push(c);
    }
    let mut out = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| {
            b.pmi
                .total_cmp(&a.pmi)
                .then_with(|| entities[a.entity].label.cmp(&entities[b.entity].label))
        });
        out.extend(group.into_iter().take(k).cloned());
    }
    out
}

pub fn build_progression_graph(
    train: &[VisitRecord],
    lexicons: &Lexicons,
    k: usize,
    vocab: &Vocabulary,
) -> Result<ProgressionGraph> {
    if k == 0 {
        return Err(RecapError::Validation("K must be at least 1".into()));
    }
    let entities = resolve_entities(lexicons, vocab);
    let mut nodes = Vec::with_capacity(NUM_OBSERVATION_NODES + entities.len());
    for side in [Side::Prior, Side::Current] {
        for o in Observation::ALL {
            for status in STATUSES {
                nodes.push(GraphNode {
                    kind: NodeKind::Observation,
                    label: o.label().to_string(),
                    status: Some(status),
                    side: Some(side),
                    token_id: vocab.observation_id(o),
                });
            }
        }
    }
    let entity_base = nodes.len();
    nodes.extend(entities.iter().map(|e| GraphNode {
        kind: e.kind,
        label: e.label.clone(),
        status: None,
        side: None,
        token_id: e.token_id,
    }));

    let mut edges = Vec::new();
    let kept = if train.is_empty() {
        Vec::new()
    } else {
        top_k(&pmi_candidates(train, &entities)?, &entities, k)
    };
    for c in &kept {
        let e = entity_base + c.entity;
        let current = observation_node(Side::Current, c.observation);
        if c.relation.is_temporal() {
            edges.push(TypedEdge {
                src: e,
                rel: c.relation,
                dst: observation_node(Side::Prior, c.observation),
                pmi: Some(c.pmi),
            });
        }
        edges.push(TypedEdge {
            src: current,
            rel: c.relation,
            dst: e,
            pmi: Some(c.pmi),
        });
    }
    for o in Observation::ALL {
        for sp in STATUSES {
            for sc in STATUSES {
                edges.push(TypedEdge {
                    src: observation_node(Side::Prior, ObservationLabel::new(o, sp)),
                    rel: Relation::RO,
                    dst: observation_node(Side::Current, ObservationLabel::new(o, sc)),
                    pmi: None,
                });
            }
        }
    }
    edges.sort_by(|a, b| {
        (a.src, a.rel, a.dst).cmp(&(b.src, b.rel, b.dst))
    });
    Ok(ProgressionGraph { nodes, edges, k })
}

impl ProgressionGraph {
    pub fn empty(k: usize) -> Self {
        ProgressionGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn entity_indices(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_entity()).collect()
    }

    pub fn find_observation(&self, side: Side, label: ObservationLabel) -> Option<usize> {
        self.nodes.iter().position(|n| {
            n.kind == NodeKind::Observation
                && n.side == Some(side)
                && n.status == Some(label.status)
                && n.label == label.observation.label()
        })
    }

    /// Induced subgraph for one sample. Prior-side temporal edges are kept only
    /// for the queried progressions; current-side edges are kept regardless.
    pub fn retrieve(
        &self,
        prior_obs: &[ObservationLabel],
        current_obs: &[ObservationLabel],
        progressions: &BTreeSet<Progression>,
    ) -> ProgressionGraph {
        let prior: HashSet<usize> = prior_obs
            .iter()
            .filter_map(|&l| self.find_observation(Side::Prior, l))
            .collect();
        let current: HashSet<usize> = current_obs
            .iter()
            .filter_map(|&l| self.find_observation(Side::Current, l))
            .collect();
        let rels: HashSet<Relation> = progressions
            .iter()
            .map(|&p| Relation::of_progression(p))
            .collect();
        let mut keep_nodes: BTreeSet<usize> = prior.iter().chain(&current).copied().collect();
        let mut keep_edges = Vec::new();
        for (i, e) in self.edges.iter().enumerate() {
            let take = match e.rel {
                Relation::RO => prior.contains(&e.src) && current.contains(&e.dst),
                Relation::RS => current.contains(&e.src),
                _ => {
                    (prior.contains(&e.dst) && rels.contains(&e.rel)) || current.contains(&e.src)
                }
            };
            if take {
                keep_nodes.insert(e.src);
                keep_nodes.insert(e.dst);
                keep_edges.push(i);
            }
        }
        let remap: BTreeMap<usize, usize> = keep_nodes
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        ProgressionGraph {
            nodes: keep_nodes.iter().map(|&i| self.nodes[i].clone()).collect(),
            edges: keep_edges
                .into_iter()
                .map(|i| {
                    let e = &self.edges[i];
                    TypedEdge {
                        src: remap[&e.src],
                        rel: e.rel,
                        dst: remap[&e.dst],
                        pmi: e.pmi,
                    }
                })
                .collect(),
            k: self.k,
        }
    }

    /// Checks node/edge typing; used after loading untrusted files.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RecapError::Validation(m));
        for (i, n) in self.nodes.iter().enumerate() {
            let obs = n.kind == NodeKind::Observation;
            if obs != (n.status.is_some() && n.side.is_some()) {
                return bad(format!("node {i} has inconsistent status/side fields"));
            }
            if obs && n.observation().is_none() {
                return bad(format!("node {i} has unknown observation label {:?}", n.label));
            }
        }
        let mut seen = HashSet::new();
        let mut per_group: BTreeMap<(usize, Relation), usize> = BTreeMap::new();
        for e in &self.edges {
            let (Some(s), Some(d)) = (self.nodes.get(e.src), self.nodes.get(e.dst)) else {
                return bad(format!("edge {}->{} points outside the node list", e.src, e.dst));
            };
            if !seen.insert((e.src, e.rel, e.dst)) {
                return bad(format!("duplicate edge {} {:?} {}", e.src, e.rel, e.dst));
            }
            let ok = match e.rel {
                Relation::RO => {
                    s.side == Some(Side::Prior)
                        && d.side == Some(Side::Current)
                        && s.label == d.label
                        && e.pmi.is_none()
                }
                Relation::RS => {
                    s.side == Some(Side::Current) && d.kind == NodeKind::SpatialEntity
                }
                _ => {
                    (s.kind == NodeKind::TemporalEntity && d.side == Some(Side::Prior))
                        || (s.side == Some(Side::Current) && d.kind == NodeKind::TemporalEntity)
                }
            };
            if !ok {
                return bad(format!("edge {} {:?} {} violates relation typing", e.src, e.rel, e.dst));
            }
            if e.rel != Relation::RO {
                let obs = if s.kind == NodeKind::Observation { e.src } else { e.dst };
                let n = per_group.entry((obs, e.rel)).or_default();
                *n += 1;
                if *n > self.k {
                    return bad(format!("more than K={} edges for node {obs} relation {:?}", self.k, e.rel));
                }
            }
        }
        Ok(())
    }

    /// Entity nodes must still name the same vocabulary tokens.
    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        for n in &self.nodes {
            let expect = match n.kind {
                NodeKind::Observation => n.observation().map(|o| o.token()),
                _ => Some(n.label.clone()),
            };
            if expect.as_deref() != vocab.token(n.token_id) {
                return Err(RecapError::Validation(format!(
                    "graph node {:?} has token id {} which the vocabulary maps to {:?}",
                    n.label,
                    n.token_id,
                    vocab.token(n.token_id)
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: ProgressionGraph = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    /// Hex sha256 of the serialized form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| RecapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RecapError::io(path, e))?;
        ProgressionGraph::from_json(&text)
    }

    pub fn count_by_relation(&self) -> BTreeMap<Relation, usize> {
        let mut out = BTreeMap::new();
        for e in &self.edges {
            *out.entry(e.rel).or_default() += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::image::{ImageRef, PixelGrid};
    use proptest::prelude::*;

    pub(crate) fn record(obs: &[(Observation, Status)], progs: &[Progression], report: &str) -> VisitRecord {
        VisitRecord {
            subject_id: "s".into(),
            study_id: "s1".into(),
            study_order: 1,
            image: ImageRef::Inline(PixelGrid::new(1, 1, vec![0]).unwrap()),
            report: report.into(),
            observations: obs.iter().map(|&(o, s)| ObservationLabel::new(o, s)).collect(),
            progressions: progs.iter().copied().collect(),
            prior: None,
            declared_prior: None,
        }
    }

    #[test]
    fn pmi_worked_example() {
        assert!((compute_pmi(20, 25, 40, 100).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(compute_pmi(4, 20, 20, 100).unwrap(), 0.0);
        assert_eq!(compute_pmi(0, 5, 5, 10).unwrap(), f64::NEG_INFINITY);
        assert!(compute_pmi(0, 0, 5, 10).is_err());
    }

    proptest! {
        #[test]
        fn pmi_symmetric(n in 1u64..200, a in 0u64..200, b in 0u64..200, c in 0u64..200) {
            let x = 1 + a % n;
            let y = 1 + b % n;
            let xy = c % (x.min(y) + 1);
            prop_assert_eq!(compute_pmi(xy, x, y, n).unwrap(), compute_pmi(xy, y, x, n).unwrap());
        }
    }

    fn corpus() -> (Vec<VisitRecord>, Vocabulary) {
        use Observation::*;
        let recs = vec![
            record(&[(Cardiomegaly, Status::Pos)], &[Progression::Stable], "small cardiomegaly is unchanged ."),
            record(&[(Cardiomegaly, Status::Pos)], &[Progression::Worse], "cardiomegaly has enlarged , new ."),
            record(&[(Edema, Status::Neg)], &[], "no edema ."),
            record(&[(Cardiomegaly, Status::Pos), (Edema, Status::Pos)], &[Progression::Stable], "patchy edema , unchanged cardiomegaly ."),
        ];
        let toks: Vec<Vec<String>> = recs.iter().map(|r| r.report_tokens()).collect();
        let v = Vocabulary::build(&toks, 1).unwrap();
        (recs, v)
    }

    #[test]
    fn build_is_valid_and_deterministic() {
        let (recs, v) = corpus();
        let g = build_progression_graph(&recs, &Lexicons::default(), 30, &v).unwrap();
        g.validate().unwrap();
        g.check_vocabulary(&v).unwrap();
        let again = build_progression_graph(&recs, &Lexicons::default(), 30, &v).unwrap();
        assert_eq!(g.to_json().unwrap(), again.to_json().unwrap());
        let card = ObservationLabel::new(Observation::Cardiomegaly, Status::Pos);
        let prior = g.find_observation(Side::Prior, card).unwrap();
        let unchanged = g.nodes.iter().position(|n| n.label == "unchanged").unwrap();
        assert!(g.edges.iter().any(|e| e.src == unchanged && e.rel == Relation::S && e.dst == prior));
    }

    #[test]
    fn k_one_keeps_best() {
        let (recs, v) = corpus();
        let g = build_progression_graph(&recs, &Lexicons::default(), 1, &v).unwrap();
        let mut per: BTreeMap<(usize, Relation), usize> = BTreeMap::new();
        for e in g.edges.iter().filter(|e| e.rel != Relation::RO) {
            let o = if g.nodes[e.src].is_entity() { e.dst } else { e.src };
            *per.entry((o, e.rel)).or_default() += 1;
        }
        assert!(per.values().all(|&n| n == 1));
    }

    #[test]
    fn empty_lexicons_leave_observations_and_ro() {
        let (recs, v) = corpus();
        let g = build_progression_graph(&recs, &Lexicons::empty(), 3, &v).unwrap();
        assert_eq!(g.nodes.len(), NUM_OBSERVATION_NODES);
        assert!(g.edges.iter().all(|e| e.rel == Relation::RO));
        assert_eq!(g.edges.len(), NUM_OBSERVATIONS * 4);
    }

    #[test]
    fn retrieval_path_and_empty_query() {
        let (recs, v) = corpus();
        let g = build_progression_graph(&recs, &Lexicons::default(), 30, &v).unwrap();
        let card = ObservationLabel::new(Observation::Cardiomegaly, Status::Pos);
        let sub = g.retrieve(&[card], &[card], &[Progression::Stable].into());
        sub.validate().unwrap();
        let p = sub.find_observation(Side::Prior, card).unwrap();
        let c = sub.find_observation(Side::Current, card).unwrap();
        assert!(sub.edges.iter().any(|e| e.rel == Relation::S && e.dst == p));
        assert!(sub.edges.iter().any(|e| e.rel == Relation::RO && e.src == p && e.dst == c));
        assert!(sub.edges.iter().any(|e| e.src == c && e.rel != Relation::RO));
        assert!(!sub.edges.iter().any(|e| e.dst == p && e.rel == Relation::W));
        assert!(g.retrieve(&[], &[], &BTreeSet::new()).is_empty());
    }

    #[test]
    fn json_round_trip_and_tamper() {
        let (recs, v) = corpus();
        let g = build_progression_graph(&recs, &Lexicons::default(), 30, &v).unwrap();
        let json = g.to_json().unwrap();
        assert!(json.contains("\"K\":30"));
        let back = ProgressionGraph::from_json(&json).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.hash().unwrap(), g.hash().unwrap());
        let tampered = json.replacen("\"K\":30", "\"K\":31", 1);
        assert_ne!(ProgressionGraph::from_json(&tampered).unwrap().hash().unwrap(), g.hash().unwrap());
    }
}
