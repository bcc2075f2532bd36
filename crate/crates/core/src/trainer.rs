//! Training loops, checkpoint selection and checkpoint directories for both stages.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Mat, Tape};
use crate::backbone;
use crate::config::{CheckpointMetric, Config};
use crate::corpus::image::augment;
use crate::corpus::labels::{ObservationLabel, Progression, Status, NUM_OBSERVATIONS};
use crate::corpus::lexicon::Lexicons;
use crate::corpus::synth::TemplateLabeler;
use crate::corpus::vocab::Vocabulary;
use crate::corpus::{CorpusSplit, Split, VisitRecord};
use crate::error::{RecapError, Result};
use crate::evaluator::{self, MetricsReport, ObservationLabeler};
use crate::graph::{build_progression_graph, ProgressionGraph};
use crate::optim::{AdamW, LinearSchedule};
use crate::params::{ParamGroup, ParamStore};
use crate::stage1::{
    select_predicted_context, select_progressions, stage1_loss, Stage1Labels, Stage1Model, Stage1Prediction,
};
use crate::stage2::{prepare_sample, SampleContext, Stage2Model, Stage2Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: f64,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| RecapError::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RecapError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| RecapError::io(path, e))
}

/// Pixel grids of every record in one partition, mapped to `[-1, 1]`.
pub fn load_images(records: &[VisitRecord]) -> Result<Vec<Mat>> {
    records.par_iter().map(|r| Ok(r.image.grid()?.to_mat())).collect()
}

pub fn build_vocabulary(corpus: &CorpusSplit, config: &Config) -> Result<Vocabulary> {
    let reports: Vec<Vec<String>> = corpus.train.iter().map(|r| r.report_tokens()).collect();
    Vocabulary::build(&reports, config.graph.min_count)
}

pub fn load_lexicons(config: &Config) -> Result<Lexicons> {
    Lexicons::load(
        config.graph.temporal_lexicon.as_deref(),
        config.graph.spatial_lexicon.as_deref(),
    )
}

/// Vocabulary and progression graph from the training partition.
pub fn build_graph(corpus: &CorpusSplit, config: &Config) -> Result<(Vocabulary, ProgressionGraph)> {
    let vocab = build_vocabulary(corpus, config)?;
    let lex = load_lexicons(config)?;
    let graph = build_progression_graph(&corpus.train, &lex, config.graph.k, &vocab)?;
    Ok((vocab, graph))
}

/// Sums per-sample `(loss, count, grads)` in input order, so the result does
/// not depend on how rayon schedules the work.
fn batch_gradients<T: Sync>(
    items: &[T],
    f: impl Fn(&T) -> Result<(f64, usize, Gradients)> + Sync + Send,
) -> Result<(f64, usize, Gradients)> {
    let parts: Vec<Result<(f64, usize, Gradients)>> = items.par_iter().map(f).collect();
    let mut grads = Gradients::default();
    let (mut loss, mut count) = (0.0, 0);
    for p in parts {
        let (l, n, g) = p?;
        loss += l;
        count += n;
        grads.accumulate(&g);
    }
    Ok((loss, count, grads))
}

fn selection_split(corpus: &CorpusSplit) -> Split {
    if corpus.validation.is_empty() {
        Split::Train
    } else {
        Split::Validation
    }
}

// ---------------------------------------------------------------- stage 1

#[derive(Debug, Clone)]
pub struct Stage1Bundle {
    pub config: Config,
    pub store: ParamStore,
    pub model: Stage1Model,
}

impl Stage1Bundle {
    pub fn new(config: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Stage1Model::new(&mut store, &mut rng, &config.model);
        Stage1Bundle {
            config: config.clone(),
            store,
            model,
        }
    }

    pub fn predict(&self, current: &Mat, prior: Option<&Mat>) -> Result<Stage1Prediction> {
        let c = self.model.backbone.prepare(current);
        let p = prior.map(|m| self.model.backbone.prepare(m));
        self.model.predict(&self.store, &c, p.as_ref())
    }

    /// Observation context and progressions handed to Stage 2.
    pub fn context(&self, pred: &Stage1Prediction) -> (Vec<ObservationLabel>, BTreeSet<Progression>) {
        let cfg = &self.config.stage1;
        let obs = select_predicted_context(&pred.observations, cfg.threshold, cfg.context_rule);
        let prog = pred
            .progressions
            .map(|p| select_progressions(&p, cfg.threshold))
            .unwrap_or_default();
        (obs, prog)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.store.save(dir, "params")?;
        write_file(&dir.join("config.toml"), self.config.to_toml()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = Config::from_toml(&read_string(&dir.join("config.toml"))?)?;
        let mut bundle = Stage1Bundle::new(&config);
        bundle.store.load_into(dir, "params")?;
        Ok(bundle)
    }
}

fn gold_positives(r: &VisitRecord) -> [bool; NUM_OBSERVATIONS] {
    let mut out = [false; NUM_OBSERVATIONS];
    for l in &r.observations {
        out[l.observation.index()] = l.status == Status::Pos;
    }
    out
}

struct Stage1Item {
    current: Mat,
    prior: Option<Mat>,
    labels: Stage1Labels,
    seed: u64,
}

pub struct Stage1Trainer<'c> {
    pub bundle: Stage1Bundle,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    corpus: &'c CorpusSplit,
    images: Vec<Vec<Mat>>,
    schedule: LinearSchedule,
    rng: ChaCha8Rng,
}

impl<'c> Stage1Trainer<'c> {
    pub fn new(corpus: &'c CorpusSplit, config: &Config) -> Result<Self> {
        config.validate()?;
        if corpus.train.is_empty() {
            return Err(RecapError::Precondition("training partition is empty".into()));
        }
        let images = Split::ALL
            .iter()
            .map(|&s| load_images(corpus.partition(s)))
            .collect::<Result<Vec<_>>>()?;
        let cfg = &config.stage1;
        let steps = cfg.epochs * corpus.train.len().div_ceil(cfg.batch_size);
        Ok(Stage1Trainer {
            bundle: Stage1Bundle::new(config),
            optimizer: AdamW::new(cfg.weight_decay),
            history: Vec::new(),
            corpus,
            images,
            schedule: LinearSchedule::new(steps as u64),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5171),
        })
    }

    fn image(&self, split: Split, i: usize) -> &Mat {
        &self.images[split as usize][i]
    }

    /// Same crop and flip for both studies of a pair.
    fn training_view(&mut self, img: &Mat, prior: Option<&Mat>) -> (Mat, Option<Mat>) {
        let cfg = self.bundle.config.stage1.clone();
        let size = self.bundle.model.backbone.image_size();
        if !cfg.augment {
            let bb = &self.bundle.model.backbone;
            return (bb.prepare(img), prior.map(|p| bb.prepare(p)));
        }
        let seed: u64 = self.rng.random();
        let view = |m: &Mat| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            augment(m, cfg.resize_to, size, cfg.flip_prob, &mut r)
        };
        (view(img), prior.map(view))
    }

    /// One pass over the shuffled training partition; returns the mean `L_S1`.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.corpus.train.len()).collect();
        order.shuffle(&mut self.rng);
        let dropout = self.bundle.config.model.dropout;
        let (bs, lr0, alpha_d) = {
            let c = &self.bundle.config.stage1;
            (c.batch_size, c.lr, c.alpha_d)
        };
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let r = &self.corpus.train[i];
                let cur = self.image(Split::Train, i).clone();
                let prior = r.prior.map(|p| self.image(Split::Train, p).clone());
                let (current, prior) = self.training_view(&cur, prior.as_ref());
                items.push(Stage1Item {
                    current,
                    prior,
                    labels: Stage1Labels::from_record(r),
                    seed: self.rng.random(),
                });
            }
            let model = &self.bundle.model;
            let store = &self.bundle.store;
            let (loss, n, mut grads) = batch_gradients(&items, |it| {
                let mut tape = Tape::training(store, it.seed);
                let out = model.forward(&mut tape, &it.current, it.prior.as_ref(), dropout)?;
                let l = stage1_loss(&mut tape, &out, &it.labels, alpha_d);
                Ok((tape.value(l.total)[[0, 0]], 1, tape.backward(l.total)))
            })?;
            grads.scale(1.0 / n as f64);
            let lr = self.schedule.lr(lr0, self.optimizer.step);
            self.optimizer.step(&mut self.bundle.store, &grads, |_| lr);
            epoch_loss += loss;
        }
        Ok(epoch_loss / self.corpus.train.len() as f64)
    }

    pub fn predictions(&self, split: Split) -> Result<Vec<Stage1Prediction>> {
        let records = self.corpus.partition(split);
        (0..records.len())
            .into_par_iter()
            .map(|i| {
                let prior = records[i].prior.map(|p| self.image(split, p));
                self.bundle.predict(self.image(split, i), prior)
            })
            .collect()
    }

    /// Macro-F1 of abnormal (POS) calls over the 14 observations.
    pub fn macro_f1(&self, split: Split) -> Result<f64> {
        let t = self.bundle.config.stage1.threshold;
        let pred: Vec<_> = self
            .predictions(split)?
            .iter()
            .map(|p| p.observations.positives(t))
            .collect();
        let gold: Vec<_> = self.corpus.partition(split).iter().map(gold_positives).collect();
        Ok(evaluator::macro_f1_abnormal(&pred, &gold))
    }
}

pub struct Stage1Outcome {
    pub best: Stage1Bundle,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamW,
}

impl Stage1Outcome {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.best.save(dir)?;
        self.optimizer.save(&self.best.store, dir)?;
        write_file(&dir.join("history.json"), serde_json::to_vec_pretty(&self.history)?)
    }
}

/// Trains Stage 1 and keeps the epoch with the best validation macro-F1.
pub fn train_stage1(
    corpus: &CorpusSplit,
    config: &Config,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Stage1Outcome> {
    let mut t = Stage1Trainer::new(corpus, config)?;
    let split = selection_split(corpus);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=config.stage1.epochs {
        let train_loss = t.run_epoch()?;
        let metric = t.macro_f1(split)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            metric,
        };
        on_epoch(&rec);
        t.history.push(rec);
        if best.as_ref().is_none_or(|b| metric > b.0) {
            best = Some((metric, epoch, t.bundle.store.clone()));
        }
    }
    let (best_epoch, bundle) = match best {
        Some((_, e, store)) => (e, Stage1Bundle { store, ..t.bundle.clone() }),
        None => (0, t.bundle.clone()),
    };
    Ok(Stage1Outcome {
        best: bundle,
        best_epoch,
        history: t.history,
        optimizer: t.optimizer,
    })
}

// ---------------------------------------------------------------- stage 2

/// Where the observation/progression context of a Stage-2 sample comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    Gold,
    Predicted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Stage2Meta {
    graph_hash: String,
    vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct Stage2Bundle {
    pub config: Config,
    pub vocab: Vocabulary,
    pub graph_hash: String,
    pub store: ParamStore,
    pub model: Stage2Model,
    pub stage1: Stage1Bundle,
}

impl Stage2Bundle {
    /// Fresh model whose visual encoder starts from the Stage-1 weights.
    pub fn new(config: &Config, vocab: Vocabulary, graph: &ProgressionGraph, stage1: Stage1Bundle) -> Result<Self> {
        graph.check_vocabulary(&vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5272);
        let mut store = ParamStore::new();
        let model = Stage2Model::new(&mut store, &mut rng, &config.model, vocab.len());
        store.copy_prefix_from(&stage1.store, backbone::PREFIX)?;
        Ok(Stage2Bundle {
            config: config.clone(),
            vocab,
            graph_hash: graph.hash()?,
            store,
            model,
            stage1,
        })
    }

    /// Builds the model input for record `i` of `split`.
    pub fn sample(
        &self,
        corpus: &CorpusSplit,
        split: Split,
        i: usize,
        images: &[Mat],
        graph: &ProgressionGraph,
        source: ContextSource,
    ) -> Result<Stage2Sample> {
        let records = corpus.partition(split);
        let r = &records[i];
        let prior = r.prior.map(|p| (&records[p], &images[p]));
        let (observations, progressions) = match source {
            ContextSource::Gold => (r.observations.clone(), r.progressions.clone()),
            ContextSource::Predicted => {
                let pred = self.stage1.predict(&images[i], prior.map(|p| p.1))?;
                self.stage1.context(&pred)
            }
        };
        let prior_obs = prior.map(|p| p.0.observations.clone()).unwrap_or_default();
        let prior_tokens = prior.map(|p| p.0.report_tokens());
        let bb = &self.model.backbone;
        Ok(prepare_sample(
            &self.vocab,
            graph,
            self.config.stage2.ablation,
            self.config.model.max_prior_tokens,
            bb.prepare(&images[i]),
            prior.map(|p| bb.prepare(p.1)).zip(prior_tokens.as_deref()),
            SampleContext {
                observations: &observations,
                prior_observations: &prior_obs,
                progressions: &progressions,
            },
            &r.report_tokens(),
        ))
    }

    /// Input for a study outside any corpus. All context comes from Stage 1;
    /// the prior study's observations are predicted from its image alone.
    pub fn sample_from_images(&self, graph: &ProgressionGraph, current: &Mat, prior: Option<(&Mat, &str)>) -> Result<Stage2Sample> {
        let pred = self.stage1.predict(current, prior.map(|p| p.0))?;
        let (observations, progressions) = self.stage1.context(&pred);
        let prior_obs = match prior {
            Some((img, _)) => self.stage1.context(&self.stage1.predict(img, None)?).0,
            None => Vec::new(),
        };
        let prior_tokens = prior.map(|p| crate::corpus::vocab::tokenize(p.1));
        let bb = &self.model.backbone;
        Ok(prepare_sample(
            &self.vocab,
            graph,
            self.config.stage2.ablation,
            self.config.model.max_prior_tokens,
            bb.prepare(current),
            prior.map(|p| bb.prepare(p.0)).zip(prior_tokens.as_deref()),
            SampleContext {
                observations: &observations,
                prior_observations: &prior_obs,
                progressions: &progressions,
            },
            &[],
        ))
    }

    pub fn generate_sample(&self, s: &Stage2Sample) -> Result<Vec<u32>> {
        let ctx = self.model.encode(&self.store, s)?;
        self.model.generate(&self.store, &ctx, &self.config.decode, &self.vocab)
    }

    /// Generated report text for every record of `split`, in record order.
    pub fn generate_split(
        &self,
        corpus: &CorpusSplit,
        split: Split,
        images: &[Mat],
        graph: &ProgressionGraph,
        source: ContextSource,
    ) -> Result<Vec<String>> {
        (0..corpus.partition(split).len())
            .into_par_iter()
            .map(|i| {
                let s = self.sample(corpus, split, i, images, graph, source)?;
                Ok(self.vocab.render(&self.generate_sample(&s)?))
            })
            .collect()
    }

    pub fn evaluate(
        &self,
        corpus: &CorpusSplit,
        split: Split,
        graph: &ProgressionGraph,
        source: ContextSource,
        labeler: &dyn ObservationLabeler,
    ) -> Result<(Vec<String>, MetricsReport)> {
        let records = corpus.partition(split);
        if records.is_empty() {
            return Err(RecapError::Precondition(format!("{split} partition is empty")));
        }
        let images = load_images(records)?;
        let generated = self.generate_split(corpus, split, &images, graph, source)?;
        let references: Vec<String> = records.iter().map(|r| r.report_tokens().join(" ")).collect();
        let lex = load_lexicons(&self.config)?;
        let report = MetricsReport::compute(&generated, &references, labeler, &lex.temporal)?;
        Ok((generated, report))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.store.save(dir, "params")?;
        write_file(&dir.join("config.toml"), self.config.to_toml()?)?;
        write_file(&dir.join("vocab.json"), self.vocab.to_json()?)?;
        let meta = Stage2Meta {
            graph_hash: self.graph_hash.clone(),
            vocab_size: self.vocab.len(),
        };
        write_file(&dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        self.stage1.save(&dir.join("stage1"))
    }

    /// Refuses to load against a graph other than the one trained with.
    pub fn load(dir: &Path, graph: &ProgressionGraph) -> Result<Self> {
        let meta: Stage2Meta = serde_json::from_str(&read_string(&dir.join("meta.json"))?)?;
        let found = graph.hash()?;
        if found != meta.graph_hash {
            return Err(RecapError::Checkpoint(format!(
                "graph hash mismatch: checkpoint was trained with {}, given graph hashes to {found}",
                meta.graph_hash
            )));
        }
        let config = Config::from_toml(&read_string(&dir.join("config.toml"))?)?;
        let vocab = Vocabulary::from_json(&read_string(&dir.join("vocab.json"))?)?;
        if vocab.len() != meta.vocab_size {
            return Err(RecapError::Checkpoint("vocabulary size differs from checkpoint metadata".into()));
        }
        let stage1 = Stage1Bundle::load(&dir.join("stage1"))?;
        let mut bundle = Stage2Bundle::new(&config, vocab, graph, stage1)?;
        bundle.store.load_into(dir, "params")?;
        Ok(bundle)
    }
}

pub struct Stage2Trainer<'c> {
    pub bundle: Stage2Bundle,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub epochs: usize,
    corpus: &'c CorpusSplit,
    graph: &'c ProgressionGraph,
    samples: Vec<Stage2Sample>,
    images: Vec<Vec<Mat>>,
    schedule: LinearSchedule,
    rng: ChaCha8Rng,
}

impl<'c> Stage2Trainer<'c> {
    pub fn new(corpus: &'c CorpusSplit, graph: &'c ProgressionGraph, stage1: Stage1Bundle, config: &Config) -> Result<Self> {
        config.validate()?;
        if corpus.train.is_empty() {
            return Err(RecapError::Precondition("training partition is empty".into()));
        }
        let vocab = build_vocabulary(corpus, config)?;
        let bundle = Stage2Bundle::new(config, vocab, graph, stage1)?;
        let images = Split::ALL
            .iter()
            .map(|&s| load_images(corpus.partition(s)))
            .collect::<Result<Vec<_>>>()?;
        let samples = (0..corpus.train.len())
            .into_par_iter()
            .map(|i| bundle.sample(corpus, Split::Train, i, &images[0], graph, ContextSource::Gold))
            .collect::<Result<Vec<_>>>()?;
        let cfg = &config.stage2;
        let epochs = if cfg.ablation.long_schedule() {
            cfg.ablation_epochs
        } else {
            cfg.epochs
        };
        let steps = epochs * corpus.train.len().div_ceil(cfg.batch_size);
        Ok(Stage2Trainer {
            bundle,
            optimizer: AdamW::new(cfg.weight_decay),
            history: Vec::new(),
            epochs,
            corpus,
            graph,
            samples,
            images,
            schedule: LinearSchedule::new(steps as u64),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5273),
        })
    }

    pub fn samples(&self) -> &[Stage2Sample] {
        &self.samples
    }

    /// One pass over the shuffled training samples; returns the mean per-token `L_S2`.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let cfg = self.bundle.config.stage2.clone();
        let dropout = self.bundle.config.model.dropout;
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, self.rng.random())).collect();
            let model = &self.bundle.model;
            let store = &self.bundle.store;
            let samples = &self.samples;
            let (loss, n, mut grads) = batch_gradients(&items, |&(i, seed)| {
                let mut tape = Tape::training(store, seed);
                let l = model.loss(&mut tape, &samples[i], cfg.lambda, dropout)?;
                Ok((tape.value(l.total)[[0, 0]], l.tokens, tape.backward(l.total)))
            })?;
            grads.scale(1.0 / n as f64);
            let step = self.optimizer.step;
            let (enc, rest) = (self.schedule.lr(cfg.lr_encoder, step), self.schedule.lr(cfg.lr_rest, step));
            self.optimizer.step(&mut self.bundle.store, &grads, |g| match g {
                ParamGroup::Encoder => enc,
                ParamGroup::Rest => rest,
            });
            total += loss;
            tokens += n;
        }
        Ok(total / tokens as f64)
    }

    /// Teacher-forced `L_NLL` per token on the training samples, without dropout.
    pub fn train_nll(&self) -> Result<f64> {
        let model = &self.bundle.model;
        let store = &self.bundle.store;
        let parts: Vec<Result<(f64, usize)>> = self
            .samples
            .par_iter()
            .map(|s| {
                let mut tape = Tape::new(store);
                let l = model.loss(&mut tape, s, 0.0, 0.0)?;
                Ok((tape.value(l.nll)[[0, 0]], l.tokens))
            })
            .collect();
        let (mut sum, mut n) = (0.0, 0);
        for p in parts {
            let (l, t) = p?;
            sum += l;
            n += t;
        }
        Ok(sum / n as f64)
    }

    pub fn generate(&self, split: Split, source: ContextSource) -> Result<Vec<String>> {
        self.bundle
            .generate_split(self.corpus, split, &self.images[split as usize], self.graph, source)
    }

    /// The configured selection metric on `split`.
    pub fn selection_metric(&self, split: Split) -> Result<f64> {
        let source = if self.bundle.config.stage2.gold_context_eval {
            ContextSource::Gold
        } else {
            ContextSource::Predicted
        };
        let generated = self.generate(split, source)?;
        let references: Vec<String> = self
            .corpus
            .partition(split)
            .iter()
            .map(|r| r.report_tokens().join(" "))
            .collect();
        Ok(match self.bundle.config.stage2.checkpoint_metric {
            CheckpointMetric::Bleu4 => {
                let c: Vec<_> = generated.iter().map(|s| evaluator::metric_tokens(s)).collect();
                let r: Vec<_> = references.iter().map(|s| evaluator::metric_tokens(s)).collect();
                evaluator::bleu(&c, &r, 4)?
            }
            CheckpointMetric::MacroF1Abnormal => {
                evaluator::ce_scores(&generated, &references, &TemplateLabeler::default())?
                    .macro_avg
                    .f1
            }
        })
    }
}

pub struct Stage2Outcome {
    pub best: Stage2Bundle,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamW,
}

impl Stage2Outcome {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.best.save(dir)?;
        self.optimizer.save(&self.best.store, dir)?;
        write_file(&dir.join("history.json"), serde_json::to_vec_pretty(&self.history)?)
    }
}

/// Trains Stage 2 on gold context and keeps the epoch with the best
/// validation score (BLEU-4 by default).
pub fn train_stage2(
    corpus: &CorpusSplit,
    graph: &ProgressionGraph,
    stage1: Stage1Bundle,
    config: &Config,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Stage2Outcome> {
    let mut t = Stage2Trainer::new(corpus, graph, stage1, config)?;
    let split = selection_split(corpus);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 1..=t.epochs {
        let train_loss = t.run_epoch()?;
        let metric = t.selection_metric(split)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            metric,
        };
        on_epoch(&rec);
        t.history.push(rec);
        if best.as_ref().is_none_or(|b| metric > b.0) {
            best = Some((metric, epoch, t.bundle.store.clone()));
        }
    }
    let (best_epoch, bundle) = match best {
        Some((_, e, store)) => (e, Stage2Bundle { store, ..t.bundle.clone() }),
        None => (0, t.bundle.clone()),
    };
    Ok(Stage2Outcome {
        best: bundle,
        best_epoch,
        history: t.history,
        optimizer: t.optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::lexicon::Lexicons;
    use crate::corpus::synth::{generate_synthetic_corpus, SynthSpec};

    fn tiny() -> (Config, CorpusSplit) {
        let mut c = Config::toy();
        c.model.hidden = 8;
        c.model.heads = 2;
        c.model.ffn = 16;
        c.model.vit_layers = 1;
        c.model.decoder_layers = 1;
        c.stage1.epochs = 2;
        c.stage2.epochs = 1;
        c.decode.max_steps = 6;
        let corpus = generate_synthetic_corpus(&SynthSpec::new(16, 0.4, Lexicons::default(), 3)).unwrap();
        (c, corpus)
    }

    #[test]
    fn stage1_runs_and_is_reproducible() {
        let (c, corpus) = tiny();
        let a = train_stage1(&corpus, &c, |_| {}).unwrap();
        let b = train_stage1(&corpus, &c, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (c, _) = tiny();
        assert!(Stage1Trainer::new(&CorpusSplit::default(), &c).is_err());
    }

    #[test]
    fn stage2_checkpoint_round_trip_and_graph_guard() {
        let (c, corpus) = tiny();
        let s1 = train_stage1(&corpus, &c, |_| {}).unwrap().best;
        let (_, graph) = build_graph(&corpus, &c).unwrap();
        let out = train_stage2(&corpus, &graph, s1, &c, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.save(dir.path()).unwrap();
        let loaded = Stage2Bundle::load(dir.path(), &graph).unwrap();
        let images = load_images(&corpus.train).unwrap();
        let s = out.best.sample(&corpus, Split::Train, 0, &images, &graph, ContextSource::Predicted).unwrap();
        let a = out.best.model.encode(&out.best.store, &s).unwrap();
        let b = loaded.model.encode(&loaded.store, &s).unwrap();
        assert_eq!(a.h_c, b.h_c);
        assert_eq!(out.best.generate_sample(&s).unwrap(), loaded.generate_sample(&s).unwrap());

        let mut other = graph.clone();
        other.k += 1;
        assert!(matches!(Stage2Bundle::load(dir.path(), &other), Err(RecapError::Checkpoint(_))));
        assert!(Stage2Bundle::load(&dir.path().join("missing"), &graph).is_err());
    }
}
