//! Beam-search decoding and the two corpus metrics, BLEU-4 and chrF.
//!
//! BLEU here is tokenized BLEU over the framework's own whitespace tokens
//! (no external detokenizer), which every report header states. chrF
//! follows the metric's standard definition: character n-grams of order
//! 1..=6 with whitespace removed and recall weighted by β = 2.

use std::collections::BTreeMap;

use crate::data::{detokenize, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::train::{check_corpus_fits, Checkpoint};
use crate::Tape;

pub const DEFAULT_BEAM_SIZE: usize = 5;
pub const DEFAULT_LENGTH_PENALTY: f64 = 1.0;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;
const BLEU_MAX_ORDER: usize = 4;

/// One decode candidate: BOS-prefixed token ids plus the cumulative
/// log-probability of the emitted tokens. `finished` is set when the
/// hypothesis ends with EOS or hit the length cap.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start(bos_id: usize) -> Self {
        Hypothesis { ids: vec![bos_id], logprob: 0.0, finished: false }
    }

    /// Emitted tokens (everything after BOS; EOS included once emitted).
    pub fn emitted(&self) -> &[usize] {
        &self.ids[1..]
    }

    pub fn len(&self) -> usize {
        self.ids.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length-normalized score Σ log p / len^penalty. An empty hypothesis
    /// scores negative infinity so anything emitted beats it.
    pub fn score(&self, length_penalty: f64) -> f64 {
        if self.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.logprob / (self.len() as f64).powf(length_penalty)
        }
    }

    /// Emitted tokens with the trailing EOS (if any) removed.
    pub fn content(&self, eos_id: usize) -> &[usize] {
        let e = self.emitted();
        match e.last() {
            Some(&last) if last == eos_id => &e[..e.len() - 1],
            _ => e,
        }
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - log_z).collect()
}

/// Rank key for hypotheses: higher normalized score first, ties broken by
/// lexicographically smaller ids so decoding is deterministic.
fn better(a: &Hypothesis, b: &Hypothesis, length_penalty: f64) -> std::cmp::Ordering {
    b.score(length_penalty)
        .total_cmp(&a.score(length_penalty))
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search over any autoregressive scorer. `next_logprobs` receives the
/// BOS-prefixed prefix and returns log-probabilities for the next token.
/// Each live hypothesis proposes its top `beam_size` continuations, the
/// pooled candidates are pruned to the global top `beam_size` by
/// length-normalized score, and hypotheses that emit EOS retire. Returns
/// the best EOS-finished hypothesis, or the best length-capped one when
/// nothing finished within `max_len` emitted tokens.
pub fn beam_search_fn(
    mut next_logprobs: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    bos_id: usize,
    eos_id: usize,
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam_size < 1 {
        return Err(Error::config(format!("beam size must be at least 1, got {beam_size}")));
    }
    let mut live = vec![Hypothesis::start(bos_id)];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut capped: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in live.drain(..) {
            if hyp.len() >= max_len {
                capped.push(Hypothesis { finished: true, ..hyp });
                continue;
            }
            let lp = next_logprobs(&hyp.ids)?;
            if lp.is_empty() {
                return Err(Error::contract("scorer returned an empty distribution"));
            }
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(beam_size) {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                candidates.push(Hypothesis {
                    ids,
                    logprob: hyp.logprob + lp[tok],
                    finished: tok == eos_id,
                });
            }
        }
        candidates.sort_by(|a, b| better(a, b, length_penalty));
        candidates.truncate(beam_size);
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        // Only the eventual argmax matters; keep the pools small.
        done.sort_by(|a, b| better(a, b, length_penalty));
        done.truncate(beam_size);
    }
    let pool = if done.is_empty() { &mut capped } else { &mut done };
    pool.sort_by(|a, b| better(a, b, length_penalty));
    if pool.is_empty() {
        return Err(Error::contract("beam search produced no hypotheses"));
    }
    Ok(pool.swap_remove(0))
}

/// Beam-search translation of one source sentence (ids ending with EOS).
/// `max_len` counts emitted target tokens and is clamped so the decoder
/// prefix (BOS + emitted) fits the model's positional table.
pub fn beam_search(
    model: &Seq2SeqModel,
    src_ids: &[usize],
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let cfg = model.config();
    if src_ids.is_empty() {
        return Err(Error::data("cannot translate an empty source"));
    }
    if src_ids.iter().any(|&id| id >= cfg.vocab_size) {
        return Err(Error::data("source contains an id outside the vocabulary"));
    }
    if src_ids.len() > cfg.max_seq_len {
        return Err(Error::data(format!(
            "source length {} exceeds max_seq_len {}",
            src_ids.len(),
            cfg.max_seq_len
        )));
    }
    let max_len = max_len.min(cfg.max_seq_len - 1);
    let tape = Tape::new();
    let binding = model.bind_eval(&tape);
    let (enc, layout) = binding.encode_pack(&[src_ids.to_vec()], None, None)?;
    beam_search_fn(
        |prefix| {
            let logits = binding.decode_pack(enc, layout.clone(), None, &[prefix.to_vec()], None)?;
            let v = logits.value();
            Ok(log_softmax(v.row(v.rows() - 1)))
        },
        cfg.bos_id,
        cfg.eos_id,
        beam_size,
        max_len,
        length_penalty,
    )
}

/// Decode every source in the corpus. `max_len` caps emitted tokens per
/// sentence (clamped to the model's positional table).
pub fn decode_corpus(
    model: &Seq2SeqModel,
    corpus: &ParallelCorpus,
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<Hypothesis>> {
    check_corpus_fits(model, corpus)?;
    corpus
        .pairs
        .iter()
        .map(|p| beam_search(model, &p.src_ids, beam_size, max_len, length_penalty))
        .collect()
}

/// Pooled corpus counts behind BLEU-4: clipped n-gram matches and totals
/// for n = 1..=4 plus hypothesis/reference token counts. The score is
/// recomputable from these fields alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BleuComponents {
    pub matched: [u64; BLEU_MAX_ORDER],
    pub total: [u64; BLEU_MAX_ORDER],
    pub hyp_tokens: u64,
    pub ref_tokens: u64,
}

impl BleuComponents {
    /// Modified n-gram precision for 1-based order n; None when the
    /// hypotheses contain no n-grams of that order at all.
    pub fn precision(&self, n: usize) -> Option<f64> {
        assert!((1..=BLEU_MAX_ORDER).contains(&n), "BLEU order out of range");
        if self.total[n - 1] == 0 {
            None
        } else {
            Some(self.matched[n - 1] as f64 / self.total[n - 1] as f64)
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_tokens == 0 {
            0.0
        } else if self.hyp_tokens >= self.ref_tokens {
            1.0
        } else {
            (1.0 - self.ref_tokens as f64 / self.hyp_tokens as f64).exp()
        }
    }

    /// 100 · BP · exp(mean of log precisions). Orders with no hypothesis
    /// n-grams at all are left out of the mean (so identical short
    /// sentences still score 100); any counted order with zero matches
    /// zeroes the score (no smoothing).
    pub fn score(&self) -> f64 {
        if self.hyp_tokens == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut counted = 0usize;
        for n in 1..=BLEU_MAX_ORDER {
            match self.precision(n) {
                None => {}
                Some(p) if p == 0.0 => return 0.0,
                Some(p) => {
                    log_sum += p.ln();
                    counted += 1;
                }
            }
        }
        if counted == 0 {
            return 0.0;
        }
        100.0 * self.brevity_penalty() * (log_sum / counted as f64).exp()
    }
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 counts: per-sentence clipped n-gram matches pooled
/// over the corpus, single reference per hypothesis.
pub fn bleu4_corpus<T: Ord>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuComponents> {
    if hyps.is_empty() {
        return Err(Error::contract("BLEU needs a nonempty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut out = BleuComponents {
        matched: [0; BLEU_MAX_ORDER],
        total: [0; BLEU_MAX_ORDER],
        hyp_tokens: 0,
        ref_tokens: 0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        out.hyp_tokens += h.len() as u64;
        out.ref_tokens += r.len() as u64;
        for n in 1..=BLEU_MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, &count) in &hc {
                out.total[n - 1] += count;
                out.matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    Ok(out)
}

/// Pooled corpus counts behind chrF: character n-gram matches and per-side
/// totals for n = 1..=6, whitespace removed. The score is recomputable
/// from these fields alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChrfComponents {
    pub matched: [u64; CHRF_MAX_ORDER],
    pub hyp_total: [u64; CHRF_MAX_ORDER],
    pub ref_total: [u64; CHRF_MAX_ORDER],
}

impl ChrfComponents {
    /// F_β for 1-based order n; None when neither side has any n-grams of
    /// that order (the order is skipped, it carries no evidence).
    pub fn f_score(&self, n: usize) -> Option<f64> {
        assert!((1..=CHRF_MAX_ORDER).contains(&n), "chrF order out of range");
        let (m, ht, rt) =
            (self.matched[n - 1], self.hyp_total[n - 1], self.ref_total[n - 1]);
        if ht == 0 && rt == 0 {
            return None;
        }
        if m == 0 {
            return Some(0.0);
        }
        let p = m as f64 / ht as f64;
        let r = m as f64 / rt as f64;
        let b2 = CHRF_BETA * CHRF_BETA;
        Some((1.0 + b2) * p * r / (b2 * p + r))
    }

    /// 100 · arithmetic mean of the per-order F-scores over orders where
    /// either side has n-grams; 0 when no order has any.
    pub fn score(&self) -> f64 {
        let mut sum = 0.0;
        let mut counted = 0usize;
        for n in 1..=CHRF_MAX_ORDER {
            if let Some(f) = self.f_score(n) {
                sum += f;
                counted += 1;
            }
        }
        if counted == 0 {
            0.0
        } else {
            100.0 * sum / counted as f64
        }
    }
}

/// Corpus-level chrF counts over character n-grams of order 1..=6 with all
/// whitespace removed, recall weighted by β = 2.
pub fn chrf_corpus<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<ChrfComponents> {
    if hyps.is_empty() {
        return Err(Error::contract("chrF needs a nonempty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let strip = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    let mut out = ChrfComponents {
        matched: [0; CHRF_MAX_ORDER],
        hyp_total: [0; CHRF_MAX_ORDER],
        ref_total: [0; CHRF_MAX_ORDER],
    };
    for (h, r) in hyps.iter().zip(refs) {
        let (hc, rc) = (strip(h.as_ref()), strip(r.as_ref()));
        for n in 1..=CHRF_MAX_ORDER {
            let hn = ngram_counts(&hc, n);
            let rn = ngram_counts(&rc, n);
            out.hyp_total[n - 1] += hn.values().sum::<u64>();
            out.ref_total[n - 1] += rn.values().sum::<u64>();
            for (gram, &count) in &hn {
                out.matched[n - 1] += count.min(rn.get(gram).copied().unwrap_or(0));
            }
        }
    }
    Ok(out)
}

/// Both corpus metrics plus the counts they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu: BleuComponents,
    pub chrf: ChrfComponents,
    pub n_sentences: usize,
}

const TOKENIZATION_NOTE: &str =
    "BLEU-4 is tokenized BLEU over the framework's own whitespace tokens (no external detokenizer)";

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# {TOKENIZATION_NOTE}\n"));
        s.push_str(&format!("sentences        {}\n", self.n_sentences));
        s.push_str(&format!("BLEU-4           {:.4}\n", self.bleu.score()));
        for n in 1..=BLEU_MAX_ORDER {
            let p = match self.bleu.precision(n) {
                Some(p) => format!("{:.6}", p),
                None => "-".to_string(),
            };
            s.push_str(&format!(
                "  p{} (clipped)   {} ({}/{})\n",
                n,
                p,
                self.bleu.matched[n - 1],
                self.bleu.total[n - 1]
            ));
        }
        s.push_str(&format!("  brevity        {:.6}\n", self.bleu.brevity_penalty()));
        s.push_str(&format!(
            "  lengths        hyp {} / ref {}\n",
            self.bleu.hyp_tokens, self.bleu.ref_tokens
        ));
        s.push_str(&format!("chrF             {:.4}\n", self.chrf.score()));
        s
    }

    /// One header line, one value line, tab-separated; a leading comment
    /// line carries the tokenization note.
    pub fn to_tsv(&self) -> String {
        let mut header = vec![
            "sentences".to_string(),
            "bleu4".to_string(),
            "brevity_penalty".to_string(),
        ];
        let mut row = vec![
            self.n_sentences.to_string(),
            format!("{:.4}", self.bleu.score()),
            format!("{:.6}", self.bleu.brevity_penalty()),
        ];
        for n in 1..=BLEU_MAX_ORDER {
            header.push(format!("bleu_p{n}"));
            row.push(match self.bleu.precision(n) {
                Some(p) => format!("{:.6}", p),
                None => "-".to_string(),
            });
        }
        header.push("chrf".to_string());
        row.push(format!("{:.4}", self.chrf.score()));
        format!("# {}\n{}\n{}\n", TOKENIZATION_NOTE, header.join("\t"), row.join("\t"))
    }
}

/// Decode the corpus with beam 5 and score both metrics against the
/// target side. The checkpoint must match the corpus vocabulary.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, corpus: &ParallelCorpus) -> Result<MetricReport> {
    if ckpt.config.vocab_size != corpus.vocab.len() {
        return Err(Error::config(format!(
            "checkpoint vocabulary size {} does not match corpus vocabulary size {}",
            ckpt.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let model = ckpt.clone().into_model(0)?;
    let max_len = model.config().max_seq_len - 1;
    let hyps = decode_corpus(&model, corpus, DEFAULT_BEAM_SIZE, max_len, DEFAULT_LENGTH_PENALTY)?;
    report_from_hypotheses(&hyps, corpus)
}

/// Score already-decoded hypotheses against the corpus target side.
pub fn report_from_hypotheses(
    hyps: &[Hypothesis],
    corpus: &ParallelCorpus,
) -> Result<MetricReport> {
    if hyps.len() != corpus.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} sentences",
            hyps.len(),
            corpus.len()
        )));
    }
    let eos = crate::data::EOS_ID;
    let hyp_tokens: Vec<Vec<usize>> =
        hyps.iter().map(|h| h.content(eos).to_vec()).collect();
    let ref_tokens: Vec<Vec<usize>> = corpus
        .pairs
        .iter()
        .map(|p| {
            let t = &p.tgt_ids;
            match t.last() {
                Some(&last) if last == eos => t[..t.len() - 1].to_vec(),
                _ => t.clone(),
            }
        })
        .collect();
    let bleu = bleu4_corpus(&hyp_tokens, &ref_tokens)?;
    let hyp_text: Vec<String> =
        hyp_tokens.iter().map(|ids| detokenize(ids, &corpus.vocab)).collect();
    let ref_text: Vec<String> =
        ref_tokens.iter().map(|ids| detokenize(ids, &corpus.vocab)).collect();
    let chrf = chrf_corpus(&hyp_text, &ref_text)?;
    Ok(MetricReport { bleu, chrf, n_sentences: corpus.len() })
}

/// Greedy-capable BLEU of a model on a corpus, used for training-time
/// monitoring. `max_len` is capped near the longest reference: hypotheses
/// past that length only lower BLEU, and the cap keeps a babbling early
/// model from stalling evaluation.
pub fn corpus_bleu4(
    model: &Seq2SeqModel,
    corpus: &ParallelCorpus,
    beam_size: usize,
) -> Result<f64> {
    let longest_ref = corpus.pairs.iter().map(|p| p.tgt_ids.len()).max().unwrap_or(0);
    let max_len = longest_ref + 2;
    let hyps = decode_corpus(model, corpus, beam_size, max_len, DEFAULT_LENGTH_PENALTY)?;
    Ok(report_from_hypotheses(&hyps, corpus)?.bleu.score())
}
