//! Corpora, vocabulary, batching, and the epoch partitioner.
//!
//! The vocabulary reserves five special ids (PAD=0, BOS=1, EOS=2, UNK=3,
//! MASK=4) followed by contiguous content ids. Tokenization is whitespace
//! splitting with an EOS appended; there is no sub-word segmentation.
//!
//! Synthetic bilingual corpora make the training recipe verifiable at desk
//! scale: the `cipher` task applies a fixed random bijective token
//! substitution to random source sentences, and `cipher+reverse` additionally
//! reverses token order. Both are exactly learnable, so an oracle translator
//! scores BLEU 100 and a trained model's quality is attributable.
//!
//! [`partition_epoch`] splits example indices into n+1 disjoint, exhaustive,
//! near-equal subsets per epoch, and [`ordering`] assigns teacher i at
//! timestep t to subset O(i,t) = i+t (wrapping past n+1), which covers
//! exactly the complement of the student's subset at every timestep.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::SentencePair;
use crate::rng::{derive_seed, seeded_rng, tags};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const MASK_ID: usize = 4;

/// Special token strings, indexed by their fixed ids.
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Token/id bijection with the five fixed specials first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const N_SPECIALS: usize = SPECIAL_TOKENS.len();
    /// First id available to content tokens.
    pub const FIRST_CONTENT_ID: usize = SPECIAL_TOKENS.len();

    /// Build from content tokens (specials are added automatically).
    pub fn new(content: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if tok.chars().any(char::is_whitespace) || tok.is_empty() {
                return Err(Error::data(format!("invalid vocabulary token {tok:?}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Write as TSV `token<TAB>id`, sorted by id, specials first.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(out, "{tok}\t{id}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::data(format!("vocabulary line {} lacks a tab: {line:?}", lineno + 1))
            })?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::data(format!("bad id on vocabulary line {}", lineno + 1)))?;
            if id != lineno {
                return Err(Error::data(format!(
                    "vocabulary ids must be contiguous from 0: line {} has id {id}",
                    lineno + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < Self::N_SPECIALS
            || tokens[..Self::N_SPECIALS] != SPECIAL_TOKENS.map(String::from)
        {
            return Err(Error::data("vocabulary file must start with the five special tokens"));
        }
        Vocabulary::new(tokens.into_iter().skip(Self::N_SPECIALS))
    }
}

/// Whitespace-tokenize one line: OOV maps to UNK, EOS is appended.
pub fn tokenize(line: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> =
        line.split_whitespace().map(|t| vocab.id(t).unwrap_or(UNK_ID)).collect();
    if ids.is_empty() {
        return Err(Error::data(format!("empty sentence: {line:?}")));
    }
    ids.push(EOS_ID);
    Ok(ids)
}

/// Inverse of [`tokenize`] for display: content tokens joined by single
/// spaces; PAD/BOS/EOS/MASK dropped, UNK rendered as its literal token.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut words = Vec::new();
    for &id in ids {
        if id == PAD_ID || id == BOS_ID || id == EOS_ID || id == MASK_ID {
            continue;
        }
        words.push(vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK_ID]));
    }
    words.join(" ")
}

/// Aligned source/target id sequences plus the vocabulary that made them.
#[derive(Clone, Debug)]
pub struct ParallelCorpus {
    pub vocab: Arc<Vocabulary>,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(vocab: Arc<Vocabulary>, pairs: Vec<SentencePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::data("empty corpus"));
        }
        let v = vocab.len();
        for (i, p) in pairs.iter().enumerate() {
            if p.src_ids.is_empty() || p.tgt_ids.is_empty() {
                return Err(Error::data(format!("sentence pair {i} has an empty side")));
            }
            if p.src_ids.iter().chain(&p.tgt_ids).any(|&id| id >= v) {
                return Err(Error::data(format!(
                    "sentence pair {i} contains an id outside the vocabulary (size {v})"
                )));
            }
        }
        Ok(ParallelCorpus { vocab, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Read `<prefix>.src` / `<prefix>.tgt` as an aligned corpus.
pub fn read_corpus(prefix: &Path, vocab: Arc<Vocabulary>) -> Result<ParallelCorpus> {
    let read_side = |ext: &str| -> Result<Vec<String>> {
        let path = prefix.with_extension(ext);
        let file = std::fs::File::open(&path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        Ok(BufReader::new(file).lines().collect::<std::io::Result<_>>()?)
    };
    let src = read_side("src")?;
    let tgt = read_side("tgt")?;
    if src.len() != tgt.len() {
        return Err(Error::data(format!(
            "misaligned corpus: {} source lines vs {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    let pairs = src
        .iter()
        .zip(&tgt)
        .map(|(s, t)| {
            Ok(SentencePair { src_ids: tokenize(s, &vocab)?, tgt_ids: tokenize(t, &vocab)? })
        })
        .collect::<Result<Vec<_>>>()?;
    ParallelCorpus::new(vocab, pairs)
}

/// Write a corpus as `<prefix>.src` / `<prefix>.tgt`, one sentence per line.
pub fn write_corpus(corpus: &ParallelCorpus, prefix: &Path) -> Result<()> {
    for (ext, side) in [("src", true), ("tgt", false)] {
        let path = prefix.with_extension(ext);
        let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
        for p in &corpus.pairs {
            let ids = if side { &p.src_ids } else { &p.tgt_ids };
            writeln!(out, "{}", detokenize(ids, &corpus.vocab))?;
        }
        out.flush()?;
    }
    Ok(())
}

/// One epoch's random split of example indices into n+1 disjoint,
/// exhaustive, near-equal subsets D_1..D_{n+1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPartition {
    pub epoch_seed: u64,
    pub n: usize,
    subsets: Vec<Vec<usize>>,
}

impl EpochPartition {
    /// Subset D_t, 1-based as in the schedule notation.
    pub fn subset(&self, t: usize) -> &[usize] {
        assert!(
            (1..=self.n + 1).contains(&t),
            "subset index {t} out of range 1..={}",
            self.n + 1
        );
        &self.subsets[t - 1]
    }

    pub fn n_subsets(&self) -> usize {
        self.subsets.len()
    }
}

/// Randomly permute `0..corpus_size` under `epoch_seed` and cut into n+1
/// contiguous chunks whose sizes differ by at most one (earlier chunks take
/// the remainder).
pub fn partition_epoch(corpus_size: usize, n: usize, epoch_seed: u64) -> Result<EpochPartition> {
    let k = n + 1;
    if corpus_size < k {
        return Err(Error::data(format!(
            "insufficient data: {corpus_size} examples cannot fill {k} subsets"
        )));
    }
    let mut perm: Vec<usize> = (0..corpus_size).collect();
    perm.shuffle(&mut seeded_rng(derive_seed(epoch_seed, &[tags::PARTITION])));
    let base = corpus_size / k;
    let rem = corpus_size % k;
    let mut subsets = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let size = base + usize::from(c < rem);
        subsets.push(perm[start..start + size].to_vec());
        start += size;
    }
    Ok(EpochPartition { epoch_seed, n, subsets })
}

/// Subset assignment O(i,t) for teacher i (1..=n) at timestep t (1..=n+1):
/// i+t, wrapped past n+1. Never equals t, and over i=1..n covers exactly
/// {1..n+1} minus {t}.
pub fn ordering(i: usize, t: usize, n: usize) -> Result<usize> {
    if i < 1 || i > n {
        return Err(Error::contract(format!("teacher index {i} outside 1..={n}")));
    }
    if t < 1 || t > n + 1 {
        return Err(Error::contract(format!("timestep {t} outside 1..={}", n + 1)));
    }
    let o = i + t;
    Ok(if o <= n + 1 { o } else { o - (n + 1) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Target = bijective token substitution of the source.
    Cipher,
    /// Target = substitution of the reversed source.
    CipherReverse,
}

impl SyntheticTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cipher" => Ok(SyntheticTask::Cipher),
            "cipher+reverse" => Ok(SyntheticTask::CipherReverse),
            other => Err(Error::config(format!(
                "unknown task {other:?} (expected cipher or cipher+reverse)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SyntheticTask::Cipher => "cipher",
            SyntheticTask::CipherReverse => "cipher+reverse",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Content-token count per sentence, inclusive bounds (EOS comes extra).
    pub len_range: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: SyntheticTask::Cipher,
            vocab_size: 64,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            len_range: (5, 12),
            seed: 17,
        }
    }
}

/// A generated task: three sentence-disjoint splits over one vocabulary,
/// plus the ground-truth substitution for oracle checks.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub task: SyntheticTask,
    pub vocab: Arc<Vocabulary>,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    /// Content id -> substituted content id (a bijection).
    pub cipher: BTreeMap<usize, usize>,
}

impl SyntheticCorpus {
    /// Ground-truth translation of a source sentence (with trailing EOS).
    pub fn oracle_translate(&self, src_ids: &[usize]) -> Vec<usize> {
        assert_eq!(src_ids.last(), Some(&EOS_ID), "source must end with EOS");
        let mut content: Vec<usize> =
            src_ids[..src_ids.len() - 1].iter().map(|id| self.cipher[id]).collect();
        if self.task == SyntheticTask::CipherReverse {
            content.reverse();
        }
        content.push(EOS_ID);
        content
    }
}

/// Generate a synthetic bilingual corpus. Source sentences are distinct
/// random content-token sequences; targets follow the task rule. Bit-
/// deterministic for a fixed spec.
pub fn make_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let n_content = spec.vocab_size.saturating_sub(Vocabulary::N_SPECIALS);
    if n_content < 2 {
        return Err(Error::config(format!(
            "vocab_size {} leaves {n_content} content tokens; need at least 2",
            spec.vocab_size
        )));
    }
    let (lo, hi) = spec.len_range;
    if lo < 1 || lo > hi {
        return Err(Error::config(format!("invalid length range {lo}..={hi}")));
    }
    if spec.n_train == 0 || spec.n_valid == 0 || spec.n_test == 0 {
        return Err(Error::config("every split must be nonempty"));
    }
    let vocab = Arc::new(Vocabulary::new((0..n_content).map(|i| format!("w{i}")))?);
    let content_ids: Vec<usize> =
        (Vocabulary::FIRST_CONTENT_ID..spec.vocab_size).collect();

    let mut rng = seeded_rng(derive_seed(spec.seed, &[tags::SYNTH]));
    let mut mapped = content_ids.clone();
    mapped.shuffle(&mut rng);
    let cipher: BTreeMap<usize, usize> =
        content_ids.iter().copied().zip(mapped.iter().copied()).collect();

    let needed = spec.n_train + spec.n_valid + spec.n_test;
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut sources: Vec<Vec<usize>> = Vec::with_capacity(needed);
    let mut attempts = 0usize;
    while sources.len() < needed {
        attempts += 1;
        if attempts > needed.saturating_mul(100) {
            return Err(Error::data(format!(
                "cannot generate {needed} distinct sentences from {n_content} tokens \
                 with lengths {lo}..={hi}"
            )));
        }
        let len = rng.gen_range(lo..=hi);
        let sent: Vec<usize> =
            (0..len).map(|_| *content_ids.as_slice().choose(&mut rng).unwrap()).collect();
        if seen.insert(sent.clone()) {
            sources.push(sent);
        }
    }

    let make_pair = |content: &[usize]| -> SentencePair {
        let mut tgt: Vec<usize> = content.iter().map(|id| cipher[id]).collect();
        if spec.task == SyntheticTask::CipherReverse {
            tgt.reverse();
        }
        let mut src = content.to_vec();
        src.push(EOS_ID);
        tgt.push(EOS_ID);
        SentencePair { src_ids: src, tgt_ids: tgt }
    };
    let pairs: Vec<SentencePair> = sources.iter().map(|s| make_pair(s)).collect();
    let (train, rest) = pairs.split_at(spec.n_train);
    let (valid, test) = rest.split_at(spec.n_valid);
    Ok(SyntheticCorpus {
        task: spec.task,
        vocab: vocab.clone(),
        train: ParallelCorpus::new(vocab.clone(), train.to_vec())?,
        valid: ParallelCorpus::new(vocab.clone(), valid.to_vec())?,
        test: ParallelCorpus::new(vocab.clone(), test.to_vec())?,
        cipher,
    })
}

/// One padded batch: rows right-padded with PAD to the batch's width on each
/// side. `lens` give the true (unpadded) lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn n_sentences(&self) -> usize {
        self.indices.len()
    }

    /// Padding-stripped source rows (the packed forward takes these).
    pub fn src_unpadded(&self) -> Vec<Vec<usize>> {
        self.src.iter().zip(&self.src_lens).map(|(row, &l)| row[..l].to_vec()).collect()
    }

    pub fn tgt_unpadded(&self) -> Vec<Vec<usize>> {
        self.tgt.iter().zip(&self.tgt_lens).map(|(row, &l)| row[..l].to_vec()).collect()
    }
}

/// Shuffle `indices` under `shuffle_seed` and pack greedily into batches of
/// at most `batch_tokens` target-side tokens, padding included. Every index
/// appears in exactly one batch.
pub fn batch_iter(
    indices: &[usize],
    corpus: &ParallelCorpus,
    batch_tokens: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = indices.to_vec();
    order.shuffle(&mut seeded_rng(derive_seed(shuffle_seed, &[tags::BATCH])));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max_tgt = 0usize;
    let flush = |cur: &mut Vec<usize>, batches: &mut Vec<Batch>| {
        if !cur.is_empty() {
            batches.push(pad_batch(std::mem::take(cur), corpus));
        }
    };
    for &idx in &order {
        let pair = corpus
            .pairs
            .get(idx)
            .ok_or_else(|| Error::contract(format!("index {idx} outside corpus")))?;
        let tlen = pair.tgt_ids.len();
        if tlen > batch_tokens {
            return Err(Error::config(format!(
                "sentence {idx} has {tlen} target tokens, exceeding batch_tokens {batch_tokens}"
            )));
        }
        let new_max = cur_max_tgt.max(tlen);
        if !cur.is_empty() && (cur.len() + 1) * new_max > batch_tokens {
            flush(&mut cur, &mut batches);
            cur_max_tgt = 0;
        }
        cur_max_tgt = cur_max_tgt.max(tlen);
        cur.push(idx);
    }
    flush(&mut cur, &mut batches);
    Ok(batches)
}

fn pad_batch(indices: Vec<usize>, corpus: &ParallelCorpus) -> Batch {
    let src_lens: Vec<usize> = indices.iter().map(|&i| corpus.pairs[i].src_ids.len()).collect();
    let tgt_lens: Vec<usize> = indices.iter().map(|&i| corpus.pairs[i].tgt_ids.len()).collect();
    let src_w = *src_lens.iter().max().unwrap();
    let tgt_w = *tgt_lens.iter().max().unwrap();
    let pad = |ids: &[usize], w: usize| {
        let mut row = ids.to_vec();
        row.resize(w, PAD_ID);
        row
    };
    let src = indices.iter().map(|&i| pad(&corpus.pairs[i].src_ids, src_w)).collect();
    let tgt = indices.iter().map(|&i| pad(&corpus.pairs[i].tgt_ids, tgt_w)).collect();
    Batch { src, tgt, src_lens, tgt_lens, indices }
}
