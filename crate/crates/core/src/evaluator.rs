//! Report metrics: corpus BLEU, ROUGE-L, clinical efficacy and temporal entity matching.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::labels::{Observation, NUM_OBSERVATIONS};
use crate::corpus::synth::TemplateLabeler;
use crate::error::{RecapError, Result};

/// Lowercased, punctuation-stripped whitespace tokens.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-n: clipped n-gram precisions pooled over the corpus, geometric
/// mean with uniform weights, one brevity penalty from total lengths. No smoothing.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    if references.is_empty() {
        return Err(RecapError::Validation("BLEU needs at least one reference".into()));
    }
    if candidates.len() != references.len() {
        return Err(RecapError::Validation(format!(
            "{} candidates against {} references",
            candidates.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(RecapError::Validation(format!("BLEU order {n} outside 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for k in 1..=n {
            let rc = ngram_counts(r, k);
            for (g, cnt) in ngram_counts(c, k) {
                matched[k - 1] += cnt.min(rc.get(g).copied().unwrap_or(0));
            }
            total[k - 1] += c.len().saturating_sub(k - 1);
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..n)
        .map(|k| (matched[k] as f64 / total[k] as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_p.exp())
}

pub fn bleu_1_to_4(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (n, slot) in out.iter_mut().enumerate() {
        *slot = bleu(candidates, references, n + 1)?;
    }
    Ok(out)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure of one pair.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean pairwise ROUGE-L over the corpus.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if references.is_empty() || candidates.len() != references.len() {
        return Err(RecapError::Validation(
            "ROUGE-L needs equally many candidates and references".into(),
        ));
    }
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c, r))
        .sum::<f64>()
        / references.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// A class never predicted and never present scores 1 on every measure.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf::from_pr(ratio(tp, tp + fp), ratio(tp, tp + fn_))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }

    pub fn mean(items: &[Prf]) -> Prf {
        let n = items.len().max(1) as f64;
        Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    }
}

/// Maps report text to per-observation abnormal (POS) flags.
pub trait ObservationLabeler {
    fn positives(&self, report: &str) -> Result<[bool; NUM_OBSERVATIONS]>;
}

impl ObservationLabeler for TemplateLabeler {
    fn positives(&self, report: &str) -> Result<[bool; NUM_OBSERVATIONS]> {
        Ok(TemplateLabeler::positives(self, report))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationScore {
    pub observation: String,
    #[serde(flatten)]
    pub score: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeReport {
    pub per_observation: Vec<ObservationScore>,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    pub skipped: usize,
}

/// Per-observation binary P/R/F1 of abnormal flags, macro-averaged over the 14 observations.
pub fn classification_scores(pred: &[[bool; NUM_OBSERVATIONS]], gold: &[[bool; NUM_OBSERVATIONS]]) -> CeReport {
    let per_observation: Vec<ObservationScore> = Observation::ALL
        .iter()
        .map(|o| {
            let i = o.index();
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, g) in pred.iter().zip(gold) {
                match (p[i], g[i]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            ObservationScore {
                observation: o.label().to_string(),
                score: Prf::from_counts(tp, fp, fn_),
            }
        })
        .collect();
    let scores: Vec<Prf> = per_observation.iter().map(|s| s.score).collect();
    CeReport {
        macro_avg: Prf::mean(&scores),
        per_observation,
        skipped: 0,
    }
}

pub fn macro_f1_abnormal(pred: &[[bool; NUM_OBSERVATIONS]], gold: &[[bool; NUM_OBSERVATIONS]]) -> f64 {
    classification_scores(pred, gold).macro_avg.f1
}

/// Labels generated and reference reports and compares them; samples the
/// labeler fails on are skipped and counted.
pub fn ce_scores(generated: &[String], references: &[String], labeler: &dyn ObservationLabeler) -> Result<CeReport> {
    if generated.len() != references.len() {
        return Err(RecapError::Validation(
            "clinical efficacy needs equally many generated and reference reports".into(),
        ));
    }
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let mut skipped = 0;
    for (g, r) in generated.iter().zip(references) {
        match (labeler.positives(g), labeler.positives(r)) {
            (Ok(p), Ok(l)) => {
                pred.push(p);
                gold.push(l);
            }
            _ => skipped += 1,
        }
    }
    let mut report = classification_scores(&pred, &gold);
    report.skipped = skipped;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemReport {
    #[serde(flatten)]
    pub score: Prf,
    pub n_included: usize,
}

fn temporal_set<'a>(text: &str, lexicon: &'a BTreeSet<String>) -> BTreeSet<&'a String> {
    metric_tokens(text)
        .into_iter()
        .filter_map(|t| lexicon.get(&t))
        .collect()
}

/// Set-level temporal entity matching averaged over samples whose reference
/// mentions at least one lexicon word.
pub fn tem(generated: &[String], references: &[String], lexicon: &[String]) -> Result<TemReport> {
    if lexicon.is_empty() {
        return Err(RecapError::Validation("temporal lexicon is empty".into()));
    }
    if generated.len() != references.len() {
        return Err(RecapError::Validation(
            "TEM needs equally many generated and reference reports".into(),
        ));
    }
    let lex: BTreeSet<String> = lexicon.iter().map(|w| w.to_lowercase()).collect();
    let mut scores = Vec::new();
    for (g, r) in generated.iter().zip(references) {
        let rs = temporal_set(r, &lex);
        if rs.is_empty() {
            continue;
        }
        let gs = temporal_set(g, &lex);
        let hit = gs.intersection(&rs).count() as f64;
        let p = if gs.is_empty() { 0.0 } else { hit / gs.len() as f64 };
        scores.push(Prf::from_pr(p, hit / rs.len() as f64));
    }
    Ok(TemReport {
        score: if scores.is_empty() { Prf::default() } else { Prf::mean(&scores) },
        n_included: scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub ce: CeReport,
    pub tem: TemReport,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn compute(
        generated: &[String],
        references: &[String],
        labeler: &dyn ObservationLabeler,
        temporal_lexicon: &[String],
    ) -> Result<Self> {
        let cand: Vec<Vec<String>> = generated.iter().map(|s| metric_tokens(s)).collect();
        let refs: Vec<Vec<String>> = references.iter().map(|s| metric_tokens(s)).collect();
        Ok(MetricsReport {
            bleu: bleu_1_to_4(&cand, &refs)?,
            rouge_l: rouge_l(&cand, &refs)?,
            ce: ce_scores(generated, references, labeler)?,
            tem: tem(generated, references, temporal_lexicon)?,
            n_samples: generated.len(),
        })
    }

    /// One-row table: BLEU-1..4, ROUGE-L, CE P/R/F1, TEM F1.
    pub fn to_table(&self) -> String {
        let head = format!(
            "{:>7} {:>7} {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7}",
            "B-1", "B-2", "B-3", "B-4", "R-L", "P", "R", "F1", "TEM"
        );
        let b = self.bleu;
        let ce = self.ce.macro_avg;
        let row = format!(
            "{:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} | {:>7.3} {:>7.3} {:>7.3} | {:>7.3}",
            b[0], b[1], b[2], b[3], self.rouge_l, ce.precision, ce.recall, ce.f1, self.tem.score.f1
        );
        format!("{head}\n{row}\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        metric_tokens(s)
    }

    #[test]
    fn bleu_worked_examples() {
        let c = vec![toks("a b c d")];
        let r = vec![toks("a b c e")];
        let want = (0.75f64 * (2.0 / 3.0)).sqrt();
        assert!((bleu(&c, &r, 2).unwrap() - want).abs() < 1e-12);
        assert_eq!(bleu(&c, &c, 4).unwrap(), 1.0);
        assert_eq!(bleu(&[toks("x y")], &[toks("a b")], 1).unwrap(), 0.0);
        assert!(bleu(&[], &[], 1).is_err());
    }

    #[test]
    fn brevity_penalty_applies() {
        let c = vec![toks("a b")];
        let r = vec![toks("a b c d")];
        assert!((bleu(&c, &r, 1).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_worked_example() {
        let v = rouge_l_pair(&toks("a c e"), &toks("a b c d e"));
        let (p, r, b2) = (1.0, 0.6, 1.44);
        assert!((v - (1.0 + b2) * p * r / (r + b2 * p)).abs() < 1e-12);
        assert!((v - 0.717_647_058_823_529_4).abs() < 1e-9);
        assert_eq!(rouge_l_pair(&[], &toks("a")), 0.0);
        assert_eq!(rouge_l_pair(&toks("a b"), &toks("a b")), 1.0);
    }

    #[test]
    fn counts_to_prf() {
        let s = Prf::from_counts(1, 1, 0);
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tem_worked_example() {
        let lex: Vec<String> = ["improved", "worsening", "unchanged"].iter().map(|s| s.to_string()).collect();
        let t = tem(
            &["heart size improved .".into()],
            &["effusion improved , edema worsening .".into()],
            &lex,
        )
        .unwrap();
        assert_eq!((t.score.precision, t.score.recall), (1.0, 0.5));
        assert_eq!(t.score.f1, 2.0 / 3.0);
        assert!(tem(&[], &[], &[]).is_err());
    }

    #[test]
    fn ce_identical_reports_score_one() {
        let reps: Vec<String> = vec![
            "there is mild cardiomegaly .".into(),
            "no pleural effusion .".into(),
        ];
        let r = ce_scores(&reps, &reps, &TemplateLabeler::default()).unwrap();
        assert_eq!(r.macro_avg.f1, 1.0);
        assert_eq!(r.per_observation.len(), 14);
    }

    #[test]
    fn tokenization_strips_punctuation() {
        assert_eq!(metric_tokens("No  Pleural, effusion."), ["no", "pleural", "effusion"]);
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
        let sent = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..8)
            .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
        prop::collection::vec((sent.clone(), sent), 1..6)
    }

    proptest! {
        #[test]
        fn metrics_ignore_sample_order(c in corpus(), rot in 0usize..6) {
            let (a, b): (Vec<_>, Vec<_>) = c.iter().cloned().unzip();
            let k = rot % a.len();
            let (mut a2, mut b2) = (a.clone(), b.clone());
            a2.rotate_left(k);
            b2.rotate_left(k);
            for n in 1..=4 {
                prop_assert!((bleu(&a, &b, n).unwrap() - bleu(&a2, &b2, n).unwrap()).abs() < 1e-12);
            }
            prop_assert!((rouge_l(&a, &b).unwrap() - rouge_l(&a2, &b2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn bleu_non_increasing_in_order(c in corpus()) {
            let (a, b): (Vec<_>, Vec<_>) = c.into_iter().unzip();
            let mut prec = Vec::new();
            for k in 1..=4 {
                let mut m = 0usize;
                let mut t = 0usize;
                for (x, y) in a.iter().zip(&b) {
                    let rc = ngram_counts(y, k);
                    for (g, cnt) in ngram_counts(x, k) {
                        m += cnt.min(rc.get(g).copied().unwrap_or(0));
                    }
                    t += x.len().saturating_sub(k - 1);
                }
                prec.push(if t == 0 { 0.0 } else { m as f64 / t as f64 });
            }
            prop_assume!(prec.windows(2).all(|w| w[1] <= w[0]));
            let s = bleu_1_to_4(&a, &b).unwrap();
            for w in s.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn tem_ignores_empty_reference_samples(c in corpus(), extra in "[a-d ]{0,10}") {
            let lex: Vec<String> = vec!["a".into(), "b".into()];
            let gen: Vec<String> = c.iter().map(|(x, _)| x.join(" ")).collect();
            let refs: Vec<String> = c.iter().map(|(_, y)| y.join(" ")).collect();
            let base = tem(&gen, &refs, &lex).unwrap();
            let mut g2 = gen.clone();
            let mut r2 = refs.clone();
            g2.push(extra);
            r2.push("c d".into());
            prop_assert_eq!(base.score, tem(&g2, &r2, &lex).unwrap().score);
        }
    }
}
