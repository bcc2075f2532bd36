//! Report generator: observation- and progression-aware encoders, a decoder
//! with a fusion gate, R-GCN graph encoding, progression reasoning over graph
//! entities and the vocabulary/graph mixture.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::backbone::{PatchEncoder, VisualEncoder, VisualSequence};
use crate::config::{Ablation, DecodeConfig, DecodeMode, ModelConfig};
use crate::corpus::labels::{ObservationLabel, Progression, Status};
use crate::corpus::vocab::{Vocabulary, BOS_ID, EOS_ID, FIRST_VISIT_ID, FOLLOW_UP_ID};
use crate::error::{RecapError, Result};
use crate::graph::{NodeKind, ProgressionGraph, Relation, Side, NUM_RELATIONS};
use crate::nn::{sinusoid, Encoder, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};

const PREFIX: &str = "stage2";

/// Prior study as seen by the progression encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorInput {
    pub image: Mat,
    pub report: Vec<u32>,
}

/// Graph-side tensors of one retrieved subgraph, precomputed once per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub subgraph: ProgressionGraph,
    /// Per relation, `A[i,k] = 1/c_i` for each edge `k → i`.
    pub adjacency: Vec<Mat>,
    obs_tokens: Vec<usize>,
    obs_states: Vec<usize>,
    entity_nodes: Vec<usize>,
    entity_tokens: Vec<u32>,
    /// Per entity relation: observation nodes, entity nodes, pair→entity mean matrix.
    pairs: Vec<(Relation, Vec<usize>, Vec<usize>, Mat)>,
    scatter: Mat,
}

fn state_index(status: Status, side: Side) -> usize {
    let s = match status {
        Status::Pos => 0,
        Status::Neg => 1,
    };
    let v = match side {
        Side::Prior => 0,
        Side::Current => 1,
    };
    s * 2 + v
}

/// In-degree-normalized adjacency per relation; `c_i` counts in-edges over all relations.
pub fn relation_adjacency(graph: &ProgressionGraph) -> Vec<Mat> {
    let n = graph.nodes.len();
    let mut indeg = vec![0usize; n];
    for e in &graph.edges {
        indeg[e.dst] += 1;
    }
    let mut adj = vec![Mat::zeros((n, n)); NUM_RELATIONS];
    for e in &graph.edges {
        adj[e.rel.index()][[e.dst, e.src]] += 1.0 / indeg[e.dst] as f64;
    }
    adj
}

impl GraphInputs {
    /// `None` when the subgraph has no entity nodes: the graph branch then has
    /// nothing to point at and the mixture reduces to the vocabulary.
    pub fn new(subgraph: ProgressionGraph, vocab_size: usize) -> Option<Self> {
        let entity_nodes = subgraph.entity_indices();
        if entity_nodes.is_empty() {
            return None;
        }
        let obs_count = subgraph.nodes.len() - entity_nodes.len();
        debug_assert!(entity_nodes.iter().all(|&i| i >= obs_count));
        let mut obs_tokens = Vec::with_capacity(obs_count);
        let mut obs_states = Vec::with_capacity(obs_count);
        for n in &subgraph.nodes[..obs_count] {
            obs_tokens.push(n.token_id as usize);
            obs_states.push(state_index(
                n.status.expect("observation node status"),
                n.side.expect("observation node side"),
            ));
        }
        let entity_pos: BTreeMap<usize, usize> =
            entity_nodes.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let entity_tokens: Vec<u32> = entity_nodes.iter().map(|&i| subgraph.nodes[i].token_id).collect();

        let mut by_rel: BTreeMap<Relation, Vec<(usize, usize)>> = BTreeMap::new();
        let mut degree = vec![0usize; entity_nodes.len()];
        for e in &subgraph.edges {
            let src = &subgraph.nodes[e.src];
            if src.kind == NodeKind::Observation && src.side == Some(Side::Current) {
                if let Some(&p) = entity_pos.get(&e.dst) {
                    by_rel.entry(e.rel).or_default().push((e.src, e.dst));
                    degree[p] += 1;
                }
            }
        }
        let pairs = by_rel
            .into_iter()
            .map(|(rel, list)| {
                let mut mean = Mat::zeros((list.len(), entity_nodes.len()));
                for (row, (_, e)) in list.iter().enumerate() {
                    let p = entity_pos[e];
                    mean[[row, p]] = 1.0 / degree[p] as f64;
                }
                let (o, e): (Vec<usize>, Vec<usize>) = list.into_iter().unzip();
                (rel, o, e, mean)
            })
            .collect();
        let mut scatter = Mat::zeros((entity_nodes.len(), vocab_size));
        for (p, &t) in entity_tokens.iter().enumerate() {
            scatter[[p, t as usize]] = 1.0;
        }
        Some(GraphInputs {
            adjacency: relation_adjacency(&subgraph),
            subgraph,
            obs_tokens,
            obs_states,
            entity_nodes,
            entity_tokens,
            pairs,
            scatter,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity_nodes.len()
    }

    pub fn entity_tokens(&self) -> &[u32] {
        &self.entity_tokens
    }

    pub fn is_entity_token(&self, id: u32) -> bool {
        self.entity_tokens.contains(&id)
    }
}

/// One generation instance with everything the model consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Sample {
    pub current: Mat,
    pub prior: Option<PriorInput>,
    pub follow_up: bool,
    /// `[OBS:x] [POS|NEG]` pairs in canonical order.
    pub context_tokens: Vec<u32>,
    pub graph: Option<GraphInputs>,
    /// Report ids without `[BOS]`/`[EOS]`.
    pub target: Vec<u32>,
}

/// Observation and progression context for one sample.
#[derive(Debug, Clone, Copy)]
pub struct SampleContext<'a> {
    pub observations: &'a [ObservationLabel],
    pub prior_observations: &'a [ObservationLabel],
    pub progressions: &'a BTreeSet<Progression>,
}

pub fn context_tokens(vocab: &Vocabulary, observations: &[ObservationLabel]) -> Vec<u32> {
    let mut sorted = observations.to_vec();
    sorted.sort_by_key(|l| l.observation.index());
    sorted
        .iter()
        .flat_map(|l| [vocab.observation_id(l.observation), vocab.status_id(l.status)])
        .collect()
}

/// Applies the ablation switches and retrieves the per-sample subgraph.
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample(
    vocab: &Vocabulary,
    graph: &ProgressionGraph,
    ablation: Ablation,
    max_prior_tokens: usize,
    current: Mat,
    prior: Option<(Mat, &[String])>,
    ctx: SampleContext<'_>,
    target: &[String],
) -> Stage2Sample {
    let follow_up = prior.is_some();
    let prior = if ablation.uses_prior() {
        prior.map(|(image, tokens)| {
            let mut report = vocab.encode(tokens);
            report.truncate(max_prior_tokens);
            PriorInput { image, report }
        })
    } else {
        None
    };
    let context = if ablation.uses_observations() {
        context_tokens(vocab, ctx.observations)
    } else {
        Vec::new()
    };
    let graph = if ablation.uses_graph() {
        let none = BTreeSet::new();
        let (prior_obs, progs) = if ablation.uses_prior() {
            (ctx.prior_observations, ctx.progressions)
        } else {
            (&[][..], &none)
        };
        GraphInputs::new(graph.retrieve(prior_obs, ctx.observations, progs), vocab.len())
    } else {
        None
    };
    Stage2Sample {
        current,
        prior,
        follow_up,
        context_tokens: context,
        graph,
        target: vocab.encode(target),
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_obs: LayerNorm,
    cross_obs: MultiHeadAttention,
    ln_pro: LayerNorm,
    cross_pro: MultiHeadAttention,
    alpha: Linear,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let (h, g) = (cfg.hidden, ParamGroup::Rest);
        let ln = |store: &mut ParamStore, s: &str| LayerNorm::new(store, &format!("{name}.{s}"), h, g);
        let mha = |store: &mut ParamStore, rng: &mut ChaCha8Rng, s: &str| {
            MultiHeadAttention::new(store, rng, &format!("{name}.{s}"), h, cfg.heads, g)
        };
        DecoderLayer {
            ln_self: ln(store, "ln_self"),
            self_attn: mha(store, rng, "self_attn"),
            ln_obs: ln(store, "ln_obs"),
            cross_obs: mha(store, rng, "cross_obs"),
            ln_pro: ln(store, "ln_pro"),
            cross_pro: mha(store, rng, "cross_pro"),
            alpha: Linear::new(store, rng, &format!("{name}.alpha"), h, 1, g),
            ln_ff: ln(store, "ln_ff"),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), h, cfg.ffn, g),
        }
    }

    /// Returns the layer output and the fusion gate column.
    fn forward(&self, tape: &mut Tape, x: Var, mem: &Memory, dropout: f64) -> (Var, Var) {
        let n = self.ln_self.forward(tape, x);
        let a = self.self_attn.forward(tape, n, n, true);
        let a = tape.dropout(a, dropout);
        let s = tape.add(x, a);

        let n = self.ln_obs.forward(tape, s);
        let a = self.cross_obs.forward(tape, n, mem.h_c, false);
        let a = tape.dropout(a, dropout);
        let obs = tape.add(s, a);

        let n = self.ln_pro.forward(tape, obs);
        let a = self.cross_pro.forward(tape, n, mem.h_p, false);
        let a = tape.dropout(a, dropout);
        let pro = tape.add(obs, a);

        let logit = self.alpha.forward(tape, obs);
        let alpha = tape.sigmoid(logit);
        let keep = tape.one_minus(alpha);
        let from_pro = tape.mul_col(pro, alpha);
        let from_obs = tape.mul_col(obs, keep);
        let fused = tape.add(from_pro, from_obs);

        let n = self.ln_ff.forward(tape, fused);
        let f = self.ff.forward(tape, n, dropout);
        let f = tape.dropout(f, dropout);
        (tape.add(fused, f), alpha)
    }
}

/// `L`-layer relational graph convolution with one weight per relation plus a self-loop.
#[derive(Debug, Clone)]
pub struct Rgcn {
    pub layers: Vec<RgcnLayer>,
}

#[derive(Debug, Clone)]
pub struct RgcnLayer {
    pub relations: Vec<ParamId>,
    pub self_loop: ParamId,
}

impl Rgcn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, layers: usize, h: usize) -> Self {
        let mut init = Init::new(rng);
        let layers = (0..layers)
            .map(|l| RgcnLayer {
                relations: Relation::ALL
                    .iter()
                    .map(|r| {
                        store.register(
                            format!("{name}.{l}.{}", r.as_str()),
                            init.xavier(h, h),
                            ParamGroup::Rest,
                        )
                    })
                    .collect(),
                self_loop: store.register(format!("{name}.{l}.self"), init.xavier(h, h), ParamGroup::Rest),
            })
            .collect();
        Rgcn { layers }
    }

    /// Rows of `h` are node states; messages flow along edge direction.
    pub fn forward(&self, tape: &mut Tape, adjacency: &[Mat], mut h: Var) -> Var {
        for layer in &self.layers {
            let w0 = tape.param(layer.self_loop);
            let mut acc = tape.matmul(h, w0);
            for (r, a) in adjacency.iter().enumerate() {
                if a.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let a = tape.constant(a.clone());
                let w = tape.param(layer.relations[r]);
                let msg = tape.matmul(a, h);
                let msg = tape.matmul(msg, w);
                acc = tape.add(acc, msg);
            }
            h = tape.relu(acc);
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub h_c: Var,
    pub h_p: Var,
}

/// Tape handles of a decoder pass over `T` positions.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub hidden: Var,
    pub p_vocab: Var,
    pub p_graph: Option<Var>,
    pub gate_logit: Option<Var>,
    pub gate: Option<Var>,
    /// Fusion gate of the last decoder layer.
    pub alpha: Var,
    pub p: Var,
}

/// Per-step distributions and gates.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub p_vocab: Vec<f64>,
    pub p_graph: Vec<f64>,
    pub entity_tokens: Vec<u32>,
    pub alpha: f64,
    pub g: f64,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Stage2Loss {
    pub nll: Var,
    pub gate: Option<Var>,
    pub total: Var,
    pub tokens: usize,
}

/// Encoder outputs detached from any tape, reused across decoding steps.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub h_c: Mat,
    pub h_p: Mat,
    pub nodes: Option<Mat>,
    pub graph: Option<GraphInputs>,
}

#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub backbone: PatchEncoder,
    embed: ParamId,
    enc_obs: Encoder,
    enc_pro: Encoder,
    null_memory: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    out: Linear,
    pub rgcn: Rgcn,
    state_embed: ParamId,
    pub prr_relations: BTreeMap<Relation, ParamId>,
    pub prr_self: ParamId,
    pub gate: Linear,
    pub gamma: f64,
}

impl Stage2Model {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig, vocab_size: usize) -> Self {
        let h = cfg.hidden;
        let g = ParamGroup::Rest;
        let backbone = PatchEncoder::new(store, rng, cfg);
        let name = |s: &str| format!("{PREFIX}.{s}");
        let embed = store.register(name("embed"), Init::new(rng).normal(vocab_size, h, 1.0), g);
        let enc_obs = Encoder::new(store, rng, &name("enc_obs"), cfg.encoder_layers, h, cfg.heads, cfg.ffn, g);
        let enc_pro = Encoder::new(store, rng, &name("enc_pro"), cfg.encoder_layers, h, cfg.heads, cfg.ffn, g);
        let null_memory = store.register(name("null_memory"), Init::new(rng).normal(1, h, 1.0), g);
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &name(&format!("dec.{i}")), cfg))
            .collect();
        let ln_out = LayerNorm::new(store, &name("dec.ln_out"), h, g);
        let out = Linear::new(store, rng, &name("vocab"), h, vocab_size, g);
        let rgcn = Rgcn::new(store, rng, &name("rgcn"), cfg.rgcn_layers, h);
        let state_embed = store.register(name("node_state"), Init::new(rng).normal(4, h, 1.0), g);
        let mut init = Init::new(rng);
        let prr_relations = Relation::ENTITY
            .iter()
            .map(|&r| {
                let id = store.register(name(&format!("prr.{}", r.as_str())), init.xavier(2 * h, h), g);
                (r, id)
            })
            .collect();
        let prr_self = store.register(name("prr.self"), init.xavier(h, h), g);
        let gate = Linear::new(store, rng, &name("gate"), h, 1, g);
        Stage2Model {
            config: cfg.clone(),
            vocab_size,
            backbone,
            embed,
            enc_obs,
            enc_pro,
            null_memory,
            layers,
            ln_out,
            out,
            rgcn,
            state_embed,
            prr_relations,
            prr_self,
            gate,
            gamma: cfg.gamma,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            Some(i) => Err(RecapError::Validation(format!(
                "token id {i} outside vocabulary of size {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Token embeddings plus sinusoidal positions.
    fn embed_tokens(&self, tape: &mut Tape, ids: &[u32]) -> Var {
        let table = tape.param(self.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let e = tape.gather_rows(table, &idx);
        let pos = tape.constant(sinusoid(ids.len(), self.config.hidden, 0));
        tape.add(e, pos)
    }

    /// `[patches; [FiV]|[FoV]; O^c]` through the observation encoder.
    pub fn encode_observation_context(
        &self,
        tape: &mut Tape,
        visual: &VisualSequence,
        observations: &[u32],
        follow_up: bool,
        dropout: f64,
    ) -> Result<Var> {
        self.check_ids(observations)?;
        let mut ids = vec![if follow_up { FOLLOW_UP_ID } else { FIRST_VISIT_ID }];
        ids.extend_from_slice(observations);
        let text = self.embed_tokens(tape, &ids);
        let x = tape.concat_rows(&[visual.patches, text]);
        Ok(self.enc_obs.forward(tape, x, dropout))
    }

    /// `[patches; Y^p]` through the progression encoder, or the null memory.
    pub fn encode_progression_context(
        &self,
        tape: &mut Tape,
        prior_visual: Option<&VisualSequence>,
        prior_report: Option<&[u32]>,
        dropout: f64,
    ) -> Result<Var> {
        match (prior_visual, prior_report) {
            (None, None) => Ok(tape.param(self.null_memory)),
            (Some(v), Some(report)) => {
                self.check_ids(report)?;
                let x = if report.is_empty() {
                    v.patches
                } else {
                    let text = self.embed_tokens(tape, report);
                    tape.concat_rows(&[v.patches, text])
                };
                Ok(self.enc_pro.forward(tape, x, dropout))
            }
            _ => Err(RecapError::Precondition(
                "prior image and prior report must be given together".into(),
            )),
        }
    }

    /// Initial node states: entities take their token row; observation nodes
    /// average their label token row with a learned status/side row.
    pub fn node_init(&self, tape: &mut Tape, g: &GraphInputs) -> Var {
        let table = tape.param(self.embed);
        let ents: Vec<usize> = g.entity_tokens.iter().map(|&t| t as usize).collect();
        let ent = tape.gather_rows(table, &ents);
        if g.obs_tokens.is_empty() {
            return ent;
        }
        let tok = tape.gather_rows(table, &g.obs_tokens);
        let states = tape.param(self.state_embed);
        let st = tape.gather_rows(states, &g.obs_states);
        let obs = tape.add(tok, st);
        let obs = tape.scale(obs, 0.5);
        tape.concat_rows(&[obs, ent])
    }

    pub fn encode_graph(&self, tape: &mut Tape, g: &GraphInputs) -> Var {
        let init = self.node_init(tape, g);
        self.rgcn.forward(tape, &g.adjacency, init)
    }

    pub fn encode_memory(&self, tape: &mut Tape, s: &Stage2Sample, dropout: f64) -> Result<(Memory, Option<Var>)> {
        let vc = self.backbone.encode(tape, &s.current, dropout)?;
        let h_c = self.encode_observation_context(tape, &vc, &s.context_tokens, s.follow_up, dropout)?;
        let h_p = match &s.prior {
            Some(p) => {
                let vp = self.backbone.encode(tape, &p.image, dropout)?;
                self.encode_progression_context(tape, Some(&vp), Some(&p.report), dropout)?
            }
            None => self.encode_progression_context(tape, None, None, dropout)?,
        };
        let nodes = s.graph.as_ref().map(|g| self.encode_graph(tape, g));
        Ok((Memory { h_c, h_p }, nodes))
    }

    /// Progression-reasoning scores `ŝp` (T×E) for decoder states `h` (T×h).
    pub fn prr_scores(&self, tape: &mut Tape, h: Var, nodes: Var, g: &GraphInputs) -> Var {
        let ent = tape.gather_rows(nodes, &g.entity_nodes);
        let ws = tape.param(self.prr_self);
        let q = tape.matmul(h, ws);
        let own = tape.matmul_t(q, ent);
        let mut score = tape.tanh(own);
        for (rel, obs, ents, mean) in &g.pairs {
            let ho = tape.gather_rows(nodes, obs);
            let he = tape.gather_rows(nodes, ents);
            let pair = tape.concat_cols(&[ho, he]);
            let w = tape.param(self.prr_relations[rel]);
            let keys = tape.matmul(pair, w);
            let s = tape.matmul_t(h, keys);
            let s = tape.tanh(s);
            let m = tape.constant(mean.clone());
            let ps = tape.matmul(s, m);
            let ps = tape.scale(ps, self.gamma);
            score = tape.add(score, ps);
        }
        score
    }

    /// Decoder over `inputs` (starting with `[BOS]`). With `last_only` the
    /// output heads run on the final position only.
    pub fn decode(
        &self,
        tape: &mut Tape,
        mem: &Memory,
        graph: Option<(&GraphInputs, Var)>,
        inputs: &[u32],
        dropout: f64,
        last_only: bool,
    ) -> Decoded {
        let x = self.embed_tokens(tape, inputs);
        let mut x = tape.dropout(x, dropout);
        let mut alpha = None;
        for layer in &self.layers {
            let (y, a) = layer.forward(tape, x, mem, dropout);
            x = y;
            alpha = Some(a);
        }
        let mut hidden = self.ln_out.forward(tape, x);
        let mut alpha = alpha.expect("at least one decoder layer");
        if last_only {
            let t = inputs.len() - 1;
            hidden = tape.slice_rows(hidden, t, 1);
            alpha = tape.slice_rows(alpha, t, 1);
        }
        let logits = self.out.forward(tape, hidden);
        let p_vocab = tape.softmax_rows(logits);
        match graph {
            Some((g, nodes)) => {
                let score = self.prr_scores(tape, hidden, nodes, g);
                let p_graph = tape.softmax_rows(score);
                let gate_logit = self.gate.forward(tape, hidden);
                let gate = tape.sigmoid(gate_logit);
                let scatter = tape.constant(g.scatter.clone());
                let graph_vocab = tape.matmul(p_graph, scatter);
                let rest = tape.one_minus(gate);
                let a = tape.mul_col(p_vocab, gate);
                let b = tape.mul_col(graph_vocab, rest);
                let p = tape.add(a, b);
                Decoded {
                    hidden,
                    p_vocab,
                    p_graph: Some(p_graph),
                    gate_logit: Some(gate_logit),
                    gate: Some(gate),
                    alpha,
                    p,
                }
            }
            None => Decoded {
                hidden,
                p_vocab,
                p_graph: None,
                gate_logit: None,
                gate: None,
                alpha,
                p: p_vocab,
            },
        }
    }

    /// Teacher-forced `L_NLL + λ·L_g`, both summed over target positions.
    /// `l_g` is 0 where the target is an entity token of the sample's subgraph.
    pub fn loss(&self, tape: &mut Tape, s: &Stage2Sample, lambda: f64, dropout: f64) -> Result<Stage2Loss> {
        self.check_ids(&s.target)?;
        let (mem, nodes) = self.encode_memory(tape, s, dropout)?;
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(&s.target);
        let mut targets: Vec<usize> = s.target.iter().map(|&t| t as usize).collect();
        targets.push(EOS_ID as usize);
        let graph = s.graph.as_ref().zip(nodes);
        let d = self.decode(tape, &mem, graph, &inputs, dropout, false);
        let picked = tape.pick(d.p, &targets);
        let logp = tape.log(picked);
        let sum = tape.sum_all(logp);
        let nll = tape.scale(sum, -1.0);
        let (gate, total) = match (d.gate_logit, &s.graph) {
            (Some(logit), Some(g)) => {
                let l = Mat::from_shape_fn((targets.len(), 1), |(t, _)| {
                    if g.is_entity_token(targets[t] as u32) {
                        0.0
                    } else {
                        1.0
                    }
                });
                let ones = Mat::ones((targets.len(), 1));
                let lg = tape.bce_with_logits(logit, l, ones.clone(), ones);
                let weighted = tape.scale(lg, lambda);
                (Some(lg), tape.add(nll, weighted))
            }
            _ => (None, nll),
        };
        Ok(Stage2Loss {
            nll,
            gate,
            total,
            tokens: targets.len(),
        })
    }

    pub fn encode(&self, store: &ParamStore, s: &Stage2Sample) -> Result<EncodedContext> {
        let mut tape = Tape::new(store);
        let (mem, nodes) = self.encode_memory(&mut tape, s, 0.0)?;
        Ok(EncodedContext {
            h_c: tape.value(mem.h_c).clone(),
            h_p: tape.value(mem.h_p).clone(),
            nodes: nodes.map(|n| tape.value(n).clone()),
            graph: s.graph.clone(),
        })
    }

    fn run(&self, store: &ParamStore, ctx: &EncodedContext, prefix: &[u32], last_only: bool) -> Result<Vec<StepDistribution>> {
        if prefix.is_empty() {
            return Err(RecapError::Precondition("decoder prefix must start with [BOS]".into()));
        }
        self.check_ids(prefix)?;
        let mut tape = Tape::new(store);
        let mem = Memory {
            h_c: tape.constant(ctx.h_c.clone()),
            h_p: tape.constant(ctx.h_p.clone()),
        };
        let nodes = ctx.nodes.as_ref().map(|n| tape.constant(n.clone()));
        let graph = ctx.graph.as_ref().zip(nodes);
        let d = self.decode(&mut tape, &mem, graph, prefix, 0.0, last_only);
        let rows = tape.shape(d.p).0;
        let row = |tape: &Tape, v: Var, r: usize| tape.value(v).row(r).to_vec();
        Ok((0..rows)
            .map(|r| StepDistribution {
                p_vocab: row(&tape, d.p_vocab, r),
                p_graph: d.p_graph.map_or_else(Vec::new, |v| row(&tape, v, r)),
                entity_tokens: ctx.graph.as_ref().map_or_else(Vec::new, |g| g.entity_tokens.clone()),
                alpha: tape.value(d.alpha)[[r, 0]],
                g: d.gate.map_or(1.0, |v| tape.value(v)[[r, 0]]),
                p: row(&tape, d.p, r),
            })
            .collect())
    }

    /// Distributions for every position of `prefix`.
    pub fn step_distributions(&self, store: &ParamStore, ctx: &EncodedContext, prefix: &[u32]) -> Result<Vec<StepDistribution>> {
        self.run(store, ctx, prefix, false)
    }

    /// Distribution for the token following `prefix`.
    pub fn next_distribution(&self, store: &ParamStore, ctx: &EncodedContext, prefix: &[u32]) -> Result<StepDistribution> {
        Ok(self.run(store, ctx, prefix, true)?.remove(0))
    }

    /// Generated ids without `[BOS]`/`[EOS]`.
    pub fn generate(&self, store: &ParamStore, ctx: &EncodedContext, cfg: &DecodeConfig, vocab: &Vocabulary) -> Result<Vec<u32>> {
        match cfg.mode {
            DecodeMode::Greedy => self.greedy(store, ctx, cfg.max_steps, vocab),
            DecodeMode::Beam => self.beam(store, ctx, cfg.max_steps, cfg.beam_size.max(1), vocab),
        }
    }

    fn greedy(&self, store: &ParamStore, ctx: &EncodedContext, max_steps: usize, vocab: &Vocabulary) -> Result<Vec<u32>> {
        let mut prefix = vec![BOS_ID];
        for _ in 0..max_steps {
            let d = self.next_distribution(store, ctx, &prefix)?;
            let next = argmax_token(&d.p, vocab);
            if next == EOS_ID {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }

    /// Beam search ranked by mean token log-probability.
    fn beam(&self, store: &ParamStore, ctx: &EncodedContext, max_steps: usize, width: usize, vocab: &Vocabulary) -> Result<Vec<u32>> {
        struct Hyp {
            ids: Vec<u32>,
            logp: f64,
            done: bool,
        }
        let score = |h: &Hyp| h.logp / (h.ids.len() as f64).max(1.0);
        let key = |ids: &[u32]| -> Vec<&str> { ids.iter().map(|&i| vocab.token(i).unwrap_or("")).collect() };
        let mut beams = vec![Hyp {
            ids: vec![BOS_ID],
            logp: 0.0,
            done: false,
        }];
        for _ in 0..max_steps {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut next = Vec::new();
            for b in beams {
                if b.done {
                    next.push(b);
                    continue;
                }
                let d = self.next_distribution(store, ctx, &b.ids)?;
                let mut order: Vec<usize> = (0..d.p.len()).collect();
                order.sort_by(|&x, &y| {
                    d.p[y]
                        .total_cmp(&d.p[x])
                        .then_with(|| vocab.token(x as u32).cmp(&vocab.token(y as u32)))
                });
                for &t in order.iter().take(width) {
                    let mut ids = b.ids.clone();
                    ids.push(t as u32);
                    next.push(Hyp {
                        ids,
                        logp: b.logp + d.p[t].max(f64::MIN_POSITIVE).ln(),
                        done: t as u32 == EOS_ID,
                    });
                }
            }
            next.sort_by(|a, b| score(b).total_cmp(&score(a)).then_with(|| key(&a.ids).cmp(&key(&b.ids))));
            next.truncate(width);
            beams = next;
        }
        let best = beams.into_iter().next().expect("beam never empty");
        Ok(best
            .ids
            .into_iter()
            .skip(1)
            .filter(|&i| i != EOS_ID)
            .collect())
    }
}

/// Highest-probability token; ties go to the lexicographically smallest token string.
pub fn argmax_token(p: &[f64], vocab: &Vocabulary) -> u32 {
    let mut best = 0usize;
    for i in 1..p.len() {
        let better = match p[i].total_cmp(&p[best]) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Equal => vocab.token(i as u32) < vocab.token(best as u32),
            std::cmp::Ordering::Less => false,
        };
        if better {
            best = i;
        }
    }
    best as u32
}
