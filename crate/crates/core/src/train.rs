//! Optimizer, pre-CKD training stages, and checkpointing.
//!
//! Three stages precede distillation: masked-token encoder pretraining on
//! monolingual source text ([`pretrain_encoder_mlm`]), then decoder-only
//! translation training with the encoder frozen ([`train_base`]). The
//! generic entry [`train_translation`] also serves the ablation modes
//! (joint, from-scratch).
//!
//! Optimization is plain Adam (β1=0.9, β2=0.98, ε=1e-8, canonical bias
//! correction) at a constant learning rate: no warmup, decay, clipping, or
//! label smoothing. Training writes a TSV metrics log (update, split, NLL,
//! BLEU) and keeps the last k periodic checkpoints so the final model can be
//! a parameter average of them.
//!
//! Checkpoint files are fully specified for bit-exact round trips: magic,
//! version, a key=value text header (config, stage, update), parameter
//! count, then per parameter the name, rank, extents, and little-endian
//! 64-bit floats, in name order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Reduction;
use crate::data::{batch_iter, Batch, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{
    expected_param_shapes, group_of, ModelConfig, ParamBinding, Seq2SeqModel, TrainingMode,
};
use crate::rng::{derive_seed, seeded_rng, tags};
use crate::{Tape, Tensor};

/// Fraction of tokens selected for corruption during encoder pretraining.
pub const MLM_MASK_RATE: f64 = 0.15;

/// Adam state: per-parameter moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Drop all moments and restart the step counter (used when a model is
    /// reinitialized mid-run).
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }
}

/// One bias-corrected Adam update. Parameters in `frozen_groups` stay
/// bit-identical even when a gradient is supplied. A parameter without a
/// gradient entry is treated as having zero gradient (moments decay). The
/// gradient map is consumed.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
    state: &mut OptimState,
    frozen_groups: &BTreeSet<String>,
) -> Result<()> {
    for (name, g) in &grads {
        match params.get(name) {
            None => {
                return Err(Error::contract(format!("gradient for unknown parameter {name}")))
            }
            Some(p) if p.shape() != g.shape() => {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {name} of shape {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        if frozen_groups.contains(group_of(name)) {
            continue;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if m.shape() != p.shape() {
            return Err(Error::contract(format!("optimizer moment shape mismatch for {name}")));
        }
        let g = grads.get(name).map(Tensor::data);
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            md[i] = b1 * md[i] + (1.0 - b1) * gi;
            vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
            pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Mlm,
    Base,
    Ckd,
}

impl TrainStage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(TrainStage::Mlm),
            "base" => Ok(TrainStage::Base),
            "ckd" => Ok(TrainStage::Ckd),
            other => Err(Error::config(format!("unknown stage {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainStage::Mlm => "mlm",
            TrainStage::Base => "base",
            TrainStage::Ckd => "ckd",
        }
    }

    /// Seed-derivation sub-tag, so stages never share random streams. The
    /// values sit outside the [`tags`] registry range so a stage-qualified
    /// chain can never spell the same tag sequence as a purpose-tagged one.
    pub(crate) fn tag(self) -> u64 {
        match self {
            TrainStage::Mlm => 101,
            TrainStage::Base => 102,
            TrainStage::Ckd => 103,
        }
    }
}

/// Stage knobs shared by all training entries.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub lr: f64,
    pub max_updates: usize,
    /// Evaluation and checkpoint cadence, in updates.
    pub checkpoint_every: usize,
    pub keep_last_k: usize,
    /// KD interpolation weight (CKD stage only).
    pub alpha: f64,
    /// Teacher count n (CKD stage only).
    pub n_teachers: usize,
    /// Batch budget in target-side tokens, padding included.
    pub batch_tokens: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn base_defaults() -> Self {
        TrainConfig {
            mode: TrainingMode::DecoderOnly,
            lr: 5e-3,
            max_updates: 5000,
            checkpoint_every: 500,
            keep_last_k: 5,
            alpha: 0.95,
            n_teachers: 1,
            batch_tokens: 2048,
            seed: 17,
        }
    }

    pub fn mlm_defaults() -> Self {
        TrainConfig { max_updates: 2000, ..Self::base_defaults() }
    }

    pub fn ckd_defaults() -> Self {
        TrainConfig { lr: 1e-3, max_updates: 2000, ..Self::base_defaults() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.n_teachers < 1 {
            return Err(Error::config("n_teachers must be at least 1"));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::config("checkpoint_every must be at least 1"));
        }
        if self.keep_last_k < 1 {
            return Err(Error::config("keep_last_k must be at least 1"));
        }
        if self.batch_tokens < 1 {
            return Err(Error::config("batch_tokens must be at least 1"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base_defaults()
    }
}

/// A trained model snapshot: config, stage tag, update counter, parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: TrainStage,
    pub update: u64,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Seq2SeqModel, stage: TrainStage, update: u64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            stage,
            update,
            params: model.params().clone(),
        }
    }

    /// Rebuild a model (validates parameter names and shapes). `seed` only
    /// matters if the model is later re-randomized for from-scratch runs.
    pub fn into_model(self, seed: u64) -> Result<Seq2SeqModel> {
        Seq2SeqModel::from_params(self.config, self.params, seed)
    }
}

/// Fails with a config error when a checkpoint was produced under a
/// different model config than the caller expects.
pub fn check_config(ckpt: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    if &ckpt.config != expected {
        return Err(Error::config(format!(
            "checkpoint config mismatch: stored {:?}, expected {:?}",
            ckpt.config, expected
        )));
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"MNMTCKPT";
const CKPT_VERSION: u32 = 1;
/// Byte offset of the header text (magic, version, header length precede it).
const HEADER_TEXT_OFFSET: u64 = 16;

fn header_text(ckpt: &Checkpoint) -> String {
    let c = &ckpt.config;
    format!(
        "vocab_size={}\nd_model={}\nn_heads={}\nn_enc_layers={}\nn_dec_layers={}\nd_ff={}\n\
         max_seq_len={}\ndropout={}\npad_id={}\nbos_id={}\neos_id={}\nmask_id={}\n\
         stage={}\nupdate={}\n",
        c.vocab_size,
        c.d_model,
        c.n_heads,
        c.n_enc_layers,
        c.n_dec_layers,
        c.d_ff,
        c.max_seq_len,
        c.dropout,
        c.pad_id,
        c.bos_id,
        c.eos_id,
        c.mask_id,
        ckpt.stage.as_str(),
        ckpt.update,
    )
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

fn parse_header(text: &str) -> Result<(ModelConfig, TrainStage, u64)> {
    let err = |msg: String| format_err(HEADER_TEXT_OFFSET, msg);
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("header line {line:?} is not key=value")))?;
        if fields.insert(k, v).is_some() {
            return Err(err(format!("duplicate header key {k:?}")));
        }
    }
    const KEYS: [&str; 14] = [
        "vocab_size",
        "d_model",
        "n_heads",
        "n_enc_layers",
        "n_dec_layers",
        "d_ff",
        "max_seq_len",
        "dropout",
        "pad_id",
        "bos_id",
        "eos_id",
        "mask_id",
        "stage",
        "update",
    ];
    for k in fields.keys() {
        if !KEYS.contains(k) {
            return Err(err(format!("unknown header key {k:?}")));
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(format!("missing header key {k:?}")));
    let int = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| err(format!("header key {k:?} is not an integer")))
    };
    let config = ModelConfig {
        vocab_size: int("vocab_size")?,
        d_model: int("d_model")?,
        n_heads: int("n_heads")?,
        n_enc_layers: int("n_enc_layers")?,
        n_dec_layers: int("n_dec_layers")?,
        d_ff: int("d_ff")?,
        max_seq_len: int("max_seq_len")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| err("header key \"dropout\" is not a number".into()))?,
        pad_id: int("pad_id")?,
        bos_id: int("bos_id")?,
        eos_id: int("eos_id")?,
        mask_id: int("mask_id")?,
    };
    config.validate().map_err(|e| err(format!("stored config is invalid: {e}")))?;
    let stage = TrainStage::parse(get("stage")?)
        .map_err(|e| err(format!("stored stage is invalid: {e}")))?;
    let update =
        get("update")?.parse().map_err(|_| err("header key \"update\" is not an integer".into()))?;
    Ok((config, stage, update))
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let header = header_text(ckpt);
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Rd<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(self.pos as u64, "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serialize atomically (temp file + rename) at `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt);
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("checkpoint path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parse a checkpoint file; any malformation yields a format error carrying
/// the byte offset where parsing failed.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut rd = Rd { buf: &bytes, pos: 0 };
    if rd.take(8)? != CKPT_MAGIC {
        return Err(format_err(0, "bad magic (not a checkpoint file)"));
    }
    let version = rd.u32()?;
    if version != CKPT_VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let header_len = rd.u32()? as usize;
    let header = std::str::from_utf8(rd.take(header_len)?)
        .map_err(|_| format_err(HEADER_TEXT_OFFSET, "header is not UTF-8"))?;
    let (config, stage, update) = parse_header(header)?;
    let n_params = rd.u32()? as usize;
    let params_start = rd.pos as u64;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let at = rd.pos as u64;
        let name_len = rd.u32()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| format_err(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = rd.u64()? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| format_err(at, "parameter extent overflow"))?;
            shape.push(e);
        }
        let raw = rd.take(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if params.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(format_err(at, format!("duplicate parameter {name}")));
        }
    }
    if rd.pos != bytes.len() {
        return Err(format_err(rd.pos as u64, "trailing bytes after last parameter"));
    }
    let expected = expected_param_shapes(&config);
    let stored: BTreeMap<String, Vec<usize>> =
        params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    if stored != expected {
        return Err(format_err(params_start, "stored parameters do not match the stored config"));
    }
    Ok(Checkpoint { config, stage, update, params })
}

pub fn checkpoint_path(dir: &Path, update: u64) -> PathBuf {
    dir.join(format!("ckpt_{update:07}.bin"))
}

/// Checkpoints in `dir`, ascending by update counter.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(stem) = name.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(update) = stem.parse::<u64>() {
                found.push((update, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Delete all but the newest `keep_last_k` checkpoints in `dir`.
pub fn prune_checkpoints(dir: &Path, keep_last_k: usize) -> Result<()> {
    let found = list_checkpoints(dir)?;
    if found.len() > keep_last_k {
        for (_, path) in &found[..found.len() - keep_last_k] {
            std::fs::remove_file(path)?;
        }
    }
    Ok(())
}

/// Elementwise arithmetic mean of the parameters; metadata comes from the
/// input with the largest update counter. The addends of every element are
/// summed in sorted order, so the result is invariant to input permutation
/// bit for bit.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts.first().ok_or_else(|| Error::contract("no checkpoints to average"))?;
    let latest = ckpts.iter().enumerate().max_by_key(|(i, c)| (c.update, *i)).unwrap().1;
    for c in ckpts {
        if c.config != first.config {
            return Err(Error::contract("cannot average checkpoints with mismatched configs"));
        }
        if c.params.len() != first.params.len()
            || c.params
                .iter()
                .zip(&first.params)
                .any(|((an, at), (bn, bt))| an != bn || at.shape() != bt.shape())
        {
            return Err(Error::contract(
                "cannot average checkpoints with mismatched parameter names or shapes",
            ));
        }
    }
    let k = ckpts.len() as f64;
    let mut params = BTreeMap::new();
    let mut addends = vec![0.0; ckpts.len()];
    for (name, t0) in &first.params {
        let mut data = Vec::with_capacity(t0.numel());
        for i in 0..t0.numel() {
            for (j, c) in ckpts.iter().enumerate() {
                addends[j] = c.params[name].data()[i];
            }
            addends.sort_by(f64::total_cmp);
            // All-equal addends short-circuit so that averaging k copies of a
            // checkpoint reproduces it bit for bit.
            if addends[0].total_cmp(&addends[ckpts.len() - 1]).is_eq() {
                data.push(addends[0]);
            } else {
                data.push(addends.iter().sum::<f64>() / k);
            }
        }
        params.insert(name.clone(), Tensor::new(t0.shape().to_vec(), data));
    }
    Ok(Checkpoint {
        config: latest.config.clone(),
        stage: latest.stage,
        update: latest.update,
        params,
    })
}

/// Append-only TSV metrics log: update, split, NLL, BLEU ("-" when BLEU was
/// not computed for that row).
pub struct MetricsLog {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "update\tsplit\tnll\tbleu")?;
        out.flush()?;
        Ok(MetricsLog { out })
    }

    pub fn row(&mut self, update: u64, split: &str, nll: f64, bleu: Option<f64>) -> Result<()> {
        match bleu {
            Some(b) => writeln!(self.out, "{update}\t{split}\t{nll:.6}\t{b:.4}")?,
            None => writeln!(self.out, "{update}\t{split}\t{nll:.6}\t-")?,
        }
        self.out.flush()?;
        Ok(())
    }
}

/// A training output directory: checkpoints plus `metrics.tsv`.
pub struct RunDir {
    dir: PathBuf,
    pub metrics: MetricsLog,
}

impl RunDir {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let metrics = MetricsLog::create(&dir.join("metrics.tsv"))?;
        Ok(RunDir { dir, metrics })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}

/// Reject corpora that cannot run under this model: special-id conventions
/// must line up, ids must fit the model vocabulary, sentences must fit
/// max_seq_len.
pub fn check_corpus_fits(model: &Seq2SeqModel, corpus: &ParallelCorpus) -> Result<()> {
    let cfg = model.config();
    if cfg.pad_id != crate::data::PAD_ID
        || cfg.bos_id != crate::data::BOS_ID
        || cfg.eos_id != crate::data::EOS_ID
        || cfg.mask_id != crate::data::MASK_ID
    {
        return Err(Error::config(
            "model special-token ids do not follow the vocabulary convention",
        ));
    }
    if corpus.vocab.len() > cfg.vocab_size {
        return Err(Error::config(format!(
            "corpus vocabulary has {} entries but the model vocab_size is {}",
            corpus.vocab.len(),
            cfg.vocab_size
        )));
    }
    for (i, p) in corpus.pairs.iter().enumerate() {
        let longest = p.src_ids.len().max(p.tgt_ids.len());
        if longest > cfg.max_seq_len {
            return Err(Error::data(format!(
                "sentence pair {i} has length {longest}, exceeding max_seq_len {}",
                cfg.max_seq_len
            )));
        }
    }
    Ok(())
}

/// One NLL training step on a padded batch. Returns the token-mean loss and
/// the number of target tokens it covered.
pub(crate) fn translation_update(
    model: &mut Seq2SeqModel,
    batch: &Batch,
    opt: &mut OptimState,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let binding = model.bind(&tape);
    let loss =
        binding.seq2seq_loss(&batch.src_unpadded(), &batch.tgt_unpadded(), Some(dropout_rng))?;
    loss.backward();
    let grads = binding.collect_grads();
    let frozen = model.frozen_groups().clone();
    adam_step(model.params_mut(), grads, opt, &frozen)?;
    Ok((loss.scalar_value(), batch.tgt_lens.iter().sum()))
}

/// Token-mean translation NLL over a whole corpus, dropout off.
pub fn corpus_token_nll(
    model: &Seq2SeqModel,
    corpus: &ParallelCorpus,
    batch_tokens: usize,
) -> Result<f64> {
    let indices: Vec<usize> = (0..corpus.len()).collect();
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batch_iter(&indices, corpus, batch_tokens, 0)? {
        let tape = Tape::new();
        let binding = model.bind_eval(&tape);
        let loss = binding.seq2seq_loss(&b.src_unpadded(), &b.tgt_unpadded(), None)?;
        let n: usize = b.tgt_lens.iter().sum();
        total += loss.scalar_value() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

fn evaluate_and_checkpoint(
    model: &Seq2SeqModel,
    valid: Option<&ParallelCorpus>,
    config: &TrainConfig,
    stage: TrainStage,
    update: u64,
    train_nll: Option<f64>,
    run: &mut Option<&mut RunDir>,
) -> Result<()> {
    if let Some(run) = run.as_deref_mut() {
        if let Some(nll) = train_nll {
            run.metrics.row(update, "train", nll, None)?;
        }
        if let Some(valid) = valid {
            let nll = corpus_token_nll(model, valid, config.batch_tokens)?;
            // Greedy decode keeps the monitoring pass cheap; reports use
            // the full beam through evaluate_checkpoint.
            let bleu = crate::eval::corpus_bleu4(model, valid, 1)?;
            run.metrics.row(update, "valid", nll, Some(bleu))?;
        }
        save_checkpoint(
            &Checkpoint::from_model(model, stage, update),
            &checkpoint_path(run.path(), update),
        )?;
        prune_checkpoints(run.path(), config.keep_last_k)?;
    }
    Ok(())
}

/// Translation training under any mode; [`train_base`] is the stage-1 entry.
/// Runs exactly `max_updates` optimizer steps (zero steps returns the
/// initialization unchanged), evaluating and checkpointing every
/// `checkpoint_every` updates and at the end.
pub fn train_translation(
    model: &mut Seq2SeqModel,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    config: &TrainConfig,
    stage: TrainStage,
    mut run: Option<&mut RunDir>,
) -> Result<Checkpoint> {
    config.validate()?;
    model.set_training_mode(config.mode);
    check_corpus_fits(model, train)?;
    if let Some(v) = valid {
        check_corpus_fits(model, v)?;
    }
    let mut opt = OptimState::new(config.lr);
    let mut dropout_rng =
        seeded_rng(derive_seed(config.seed, &[tags::DROPOUT, stage.tag(), tags::STUDENT]));
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut update: u64 = 0;
    let mut pass: u64 = 0;
    let mut run_sum = 0.0;
    let mut run_tokens = 0usize;
    'outer: while (update as usize) < config.max_updates {
        let shuffle = derive_seed(config.seed, &[stage.tag(), pass]);
        for b in batch_iter(&indices, train, config.batch_tokens, shuffle)? {
            let (loss, toks) = translation_update(model, &b, &mut opt, &mut dropout_rng)?;
            update += 1;
            run_sum += loss * toks as f64;
            run_tokens += toks;
            if update as usize % config.checkpoint_every == 0
                || update as usize == config.max_updates
            {
                let train_nll =
                    (run_tokens > 0).then(|| run_sum / run_tokens as f64);
                evaluate_and_checkpoint(model, valid, config, stage, update, train_nll, &mut run)?;
                run_sum = 0.0;
                run_tokens = 0;
            }
            if update as usize >= config.max_updates {
                break 'outer;
            }
        }
        pass += 1;
    }
    Ok(Checkpoint::from_model(model, stage, update))
}

/// Stage-1 training: decoder groups learn plain NLL while the pretrained
/// encoder stays frozen. Other modes must go through [`train_translation`].
pub fn train_base(
    model: &mut Seq2SeqModel,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    config: &TrainConfig,
    run: Option<&mut RunDir>,
) -> Result<Checkpoint> {
    if config.mode != TrainingMode::DecoderOnly {
        return Err(Error::config(format!(
            "base training requires mode=decoder_only, got {}",
            config.mode.as_str()
        )));
    }
    train_translation(model, train, valid, config, TrainStage::Base, run)
}

/// Number of positions to mask in a sentence of `len` tokens.
pub fn mlm_mask_count(len: usize) -> usize {
    ((MLM_MASK_RATE * len as f64).round() as usize).max(1)
}

/// Result of encoder pretraining. Held-out NLLs (when a held-out corpus was
/// given) use identical mask draws before and after training.
pub struct MlmOutcome {
    pub checkpoint: Checkpoint,
    pub heldout_nll_before: Option<f64>,
    pub heldout_nll_after: Option<f64>,
}

/// Encoder parameters plus a zero output bias: the working set that
/// masked-token pretraining optimizes. The prediction head has no weight of
/// its own; tokens are scored against the transposed embedding table, so
/// confident predictions keep hidden states aligned with the embedding
/// geometry that the later frozen-encoder stages read through attention.
fn mlm_working_params(model: &Seq2SeqModel) -> BTreeMap<String, Tensor> {
    let mut map: BTreeMap<String, Tensor> = model
        .params()
        .iter()
        .filter(|(n, _)| matches!(group_of(n), "enc_embed" | "enc_layers"))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    map.insert(
        "mlm_head.bias".to_string(),
        Tensor::zeros(vec![model.config().vocab_size]),
    );
    map
}

/// Mask each row and compute the token-mean prediction loss over the masked
/// positions only. Returns the binding for gradient collection.
fn mlm_batch_loss<'t>(
    tape: &'t Tape,
    working: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    rows: &[Vec<usize>],
    mask_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
    trainable: bool,
) -> Result<(ParamBinding<'t>, crate::Var<'t>)> {
    let binding = ParamBinding::from_map(tape, working, cfg, move |_| trainable);
    let mut masked = rows.to_vec();
    let mut targets = Vec::new();
    let first_content = crate::data::Vocabulary::N_SPECIALS;
    for row in masked.iter_mut() {
        let picks = rand::seq::index::sample(mask_rng, row.len(), mlm_mask_count(row.len()));
        let mut row_targets = vec![cfg.pad_id; row.len()];
        for p in picks {
            row_targets[p] = row[p];
            // 80/10/10 MASK/random/keep split: the visible-token slices force
            // the encoder to keep every position's input token recoverable,
            // which the downstream frozen-encoder stages rely on.
            let u: f64 = mask_rng.gen();
            if u < 0.8 {
                row[p] = cfg.mask_id;
            } else if u < 0.9 {
                row[p] = mask_rng.gen_range(first_content..cfg.vocab_size);
            }
        }
        targets.extend(row_targets);
    }
    let (h, _) = binding.encode_pack(&masked, None, dropout_rng)?;
    let logits = h
        .matmul(binding.var("enc_embed.weight").transpose())
        .add_bias(binding.var("mlm_head.bias"));
    let loss = logits.cross_entropy(&targets, Some(cfg.pad_id), Reduction::TokenMean);
    Ok((binding, loss))
}

/// Selected positions per batch (weights for corpus-level aggregation).
fn mlm_masked_tokens(rows: &[Vec<usize>]) -> usize {
    rows.iter().map(|r| mlm_mask_count(r.len())).sum()
}

/// Source side of a corpus repackaged so target-token batch budgeting
/// applies to the monolingual text itself.
fn monolingual_view(corpus: &ParallelCorpus) -> ParallelCorpus {
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| crate::model::SentencePair { src_ids: p.src_ids.clone(), tgt_ids: p.src_ids.clone() })
        .collect();
    ParallelCorpus::new(corpus.vocab.clone(), pairs).expect("view of a valid corpus is valid")
}

fn mlm_corpus_nll(
    working: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    corpus: &ParallelCorpus,
    batch_tokens: usize,
    mask_seed: u64,
) -> Result<f64> {
    let view = monolingual_view(corpus);
    let indices: Vec<usize> = (0..view.len()).collect();
    let mut mask_rng = seeded_rng(mask_seed);
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batch_iter(&indices, &view, batch_tokens, 0)? {
        let rows = b.src_unpadded();
        let tape = Tape::new();
        let (_, loss) =
            mlm_batch_loss(&tape, working, cfg, &rows, &mut mask_rng, None, false)?;
        let n = mlm_masked_tokens(&rows);
        total += loss.scalar_value() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Masked-token encoder pretraining on the source side of `corpus`. Each
/// sentence has max(1, round(0.15 L)) positions selected; of those, 80% are
/// replaced by MASK, 10% by a random content token, and 10% left in place.
/// The encoder plus a temporary prediction head are trained to recover the
/// originals at the selected positions; the head is discarded afterwards.
/// Decoder parameters are untouched. The model is updated in place and the
/// returned checkpoint snapshots it.
pub fn pretrain_encoder_mlm(
    model: &mut Seq2SeqModel,
    corpus: &ParallelCorpus,
    heldout: Option<&ParallelCorpus>,
    config: &TrainConfig,
    mut run: Option<&mut RunDir>,
) -> Result<MlmOutcome> {
    config.validate()?;
    check_corpus_fits(model, corpus)?;
    if let Some(h) = heldout {
        check_corpus_fits(model, h)?;
    }
    let stage = TrainStage::Mlm;
    let cfg = model.config().clone();
    let mut working = mlm_working_params(model);
    let mut opt = OptimState::new(config.lr);
    let no_frozen = BTreeSet::new();
    let mut mask_rng = seeded_rng(derive_seed(config.seed, &[tags::MLM_MASK]));
    let mut dropout_rng =
        seeded_rng(derive_seed(config.seed, &[tags::DROPOUT, stage.tag(), tags::STUDENT]));
    let heldout_mask_seed = derive_seed(config.seed, &[tags::MLM_MASK, 1]);
    let nll_before = heldout
        .map(|h| mlm_corpus_nll(&working, &cfg, h, config.batch_tokens, heldout_mask_seed))
        .transpose()?;

    // Snapshot of the full model with the working encoder entries written in
    // (head excluded), for checkpoints and the final write-back.
    let merged = |model: &Seq2SeqModel, working: &BTreeMap<String, Tensor>| {
        let mut params = model.params().clone();
        for (name, t) in working {
            if group_of(name) != "mlm_head" {
                params.insert(name.clone(), t.clone());
            }
        }
        params
    };

    let view = monolingual_view(corpus);
    let indices: Vec<usize> = (0..view.len()).collect();
    let mut update: u64 = 0;
    let mut pass: u64 = 0;
    let mut run_sum = 0.0;
    let mut run_tokens = 0usize;
    'outer: while (update as usize) < config.max_updates {
        let shuffle = derive_seed(config.seed, &[stage.tag(), pass]);
        for b in batch_iter(&indices, &view, config.batch_tokens, shuffle)? {
            let rows = b.src_unpadded();
            let tape = Tape::new();
            let (binding, loss) = mlm_batch_loss(
                &tape,
                &working,
                &cfg,
                &rows,
                &mut mask_rng,
                Some(&mut dropout_rng),
                true,
            )?;
            loss.backward();
            adam_step(&mut working, binding.collect_grads(), &mut opt, &no_frozen)?;
            update += 1;
            let n = mlm_masked_tokens(&rows);
            run_sum += loss.scalar_value() * n as f64;
            run_tokens += n;
            if update as usize % config.checkpoint_every == 0
                || update as usize == config.max_updates
            {
                if let Some(run) = run.as_deref_mut() {
                    if run_tokens > 0 {
                        run.metrics.row(update, "train", run_sum / run_tokens as f64, None)?;
                    }
                    if let Some(h) = heldout {
                        let nll = mlm_corpus_nll(
                            &working,
                            &cfg,
                            h,
                            config.batch_tokens,
                            heldout_mask_seed,
                        )?;
                        run.metrics.row(update, "valid", nll, None)?;
                    }
                    let snap = Checkpoint {
                        config: cfg.clone(),
                        stage,
                        update,
                        params: merged(model, &working),
                    };
                    save_checkpoint(&snap, &checkpoint_path(run.path(), update))?;
                    prune_checkpoints(run.path(), config.keep_last_k)?;
                }
                run_sum = 0.0;
                run_tokens = 0;
            }
            if update as usize >= config.max_updates {
                break 'outer;
            }
        }
        pass += 1;
    }
    let nll_after = heldout
        .map(|h| mlm_corpus_nll(&working, &cfg, h, config.batch_tokens, heldout_mask_seed))
        .transpose()?;
    *model.params_mut() = merged(model, &working);
    Ok(MlmOutcome {
        checkpoint: Checkpoint::from_model(model, stage, update),
        heldout_nll_before: nll_before,
        heldout_nll_after: nll_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, SyntheticSpec};
    use crate::model::TrainingMode;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus() -> crate::data::SyntheticCorpus {
        make_synthetic_corpus(&SyntheticSpec {
            vocab_size: 16,
            n_train: 24,
            n_valid: 6,
            n_test: 6,
            len_range: (3, 6),
            seed: 5,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn tiny_train_config(updates: usize) -> TrainConfig {
        TrainConfig {
            max_updates: updates,
            batch_tokens: 64,
            checkpoint_every: 1000,
            seed: 11,
            ..TrainConfig::base_defaults()
        }
    }

    fn scalar_map(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::new(vec![1], vec![v]))])
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // m-hat and v-hat both bias-correct to exactly 1 on step one, so the
        // update is lr / (1 + eps).
        let mut params = scalar_map("p", 0.0);
        let grads = scalar_map("p", 1.0);
        let mut state = OptimState::new(0.1);
        adam_step(&mut params, grads, &mut state, &BTreeSet::new()).unwrap();
        let got = params["p"].data()[0];
        assert_eq!(got, -(0.1 / (1.0 + 1e-8)));
        assert!((got + 0.1).abs() < 1e-8);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_matches_scalar_reference_over_many_steps() {
        let mut rng = crate::rng::seeded_rng(99);
        let n = 7;
        let mut params = BTreeMap::from([(
            "w".to_string(),
            Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        )]);
        let mut state = OptimState::new(0.01);
        // Independent reference: scalar Adam per element.
        let mut p_ref: Vec<f64> = params["w"].data().to_vec();
        let mut m_ref = vec![0.0; n];
        let mut v_ref = vec![0.0; n];
        for step in 1..=10 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..n {
                m_ref[i] = 0.9 * m_ref[i] + 0.1 * g[i];
                v_ref[i] = 0.98 * v_ref[i] + 0.02 * g[i] * g[i];
                let mh = m_ref[i] / (1.0 - 0.9f64.powi(step));
                let vh = v_ref[i] / (1.0 - 0.98f64.powi(step));
                p_ref[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            let grads =
                BTreeMap::from([("w".to_string(), Tensor::new(vec![n], g))]);
            adam_step(&mut params, grads, &mut state, &BTreeSet::new()).unwrap();
        }
        for i in 0..n {
            assert!((params["w"].data()[i] - p_ref[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_leaves_gradientless_fresh_param_unchanged() {
        let mut params = scalar_map("a", 0.5);
        params.extend(scalar_map("b", 0.25));
        let grads = scalar_map("a", 1.0);
        let mut state = OptimState::new(0.1);
        adam_step(&mut params, grads, &mut state, &BTreeSet::new()).unwrap();
        assert_ne!(params["a"].data()[0], 0.5);
        assert_eq!(params["b"].data()[0], 0.25);
    }

    #[test]
    fn adam_ignores_frozen_groups_even_with_gradients() {
        let mut params = scalar_map("enc_embed.weight", 0.5);
        let grads = scalar_map("enc_embed.weight", 3.0);
        let mut state = OptimState::new(0.1);
        let frozen = BTreeSet::from(["enc_embed".to_string()]);
        adam_step(&mut params, grads, &mut state, &frozen).unwrap();
        assert_eq!(params["enc_embed.weight"].data()[0], 0.5);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = scalar_map("p", 0.0);
        let grads =
            BTreeMap::from([("p".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]))]);
        let mut state = OptimState::new(0.1);
        let err = adam_step(&mut params, grads, &mut state, &BTreeSet::new()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let ckpt = Checkpoint::from_model(&model, TrainStage::Base, 1234);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        // Save -> load -> save gives identical bytes.
        let path2 = dir.path().join("c2.bin");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_checkpoints_fail_with_format_errors() {
        let model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let ckpt = Checkpoint::from_model(&model, TrainStage::Mlm, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes[..bytes.len() - 5]).unwrap();
        match load_checkpoint(&bad).unwrap_err() {
            Error::Format { .. } => {}
            other => panic!("expected format error, got {other:?}"),
        }

        let mut flipped = bytes.clone();
        flipped[0] ^= 0xff;
        std::fs::write(&bad, &flipped).unwrap();
        match load_checkpoint(&bad).unwrap_err() {
            Error::Format { offset: 0, .. } => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }

        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&bad, &extended).unwrap();
        assert!(matches!(load_checkpoint(&bad).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let ckpt = Checkpoint::from_model(&model, TrainStage::Base, 0);
        let mut other = tiny_config();
        other.vocab_size = 32;
        assert!(matches!(check_config(&ckpt, &other).unwrap_err(), Error::Config(_)));
        assert!(check_config(&ckpt, &tiny_config()).is_ok());
    }

    #[test]
    fn averaging_matches_elementwise_oracle() {
        let base = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let mut ckpts = Vec::new();
        let mut rng = crate::rng::seeded_rng(4);
        for u in 1..=5u64 {
            let mut c = Checkpoint::from_model(&base, TrainStage::Base, u * 500);
            for t in c.params.values_mut() {
                for x in t.data_mut() {
                    *x = rng.gen_range(-1.0..1.0);
                }
            }
            ckpts.push(c);
        }
        let avg = average_checkpoints(&ckpts).unwrap();
        assert_eq!(avg.update, 2500);
        for (name, t) in &avg.params {
            for i in 0..t.numel() {
                let oracle: f64 =
                    ckpts.iter().map(|c| c.params[name].data()[i]).sum::<f64>() / 5.0;
                assert!((t.data()[i] - oracle).abs() < 1e-15);
            }
        }
        // Permutation invariance, bit for bit.
        let mut shuffled = ckpts.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(average_checkpoints(&shuffled).unwrap().params, avg.params);
    }

    #[test]
    fn averaging_simple_cases() {
        let model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let a = Checkpoint::from_model(&model, TrainStage::Base, 1);
        let avg = average_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(avg.params, a.params);

        let mut zero = a.clone();
        let mut two = a.clone();
        for t in zero.params.values_mut() {
            t.data_mut().fill(0.0);
        }
        for t in two.params.values_mut() {
            t.data_mut().fill(2.0);
        }
        let avg = average_checkpoints(&[zero, two]).unwrap();
        assert!(avg.params.values().all(|t| t.data().iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn averaging_rejects_mismatches() {
        let a = Checkpoint::from_model(&Seq2SeqModel::new(tiny_config(), 3).unwrap(), TrainStage::Base, 1);
        let mut other_cfg = tiny_config();
        other_cfg.d_ff = 64;
        let b = Checkpoint::from_model(&Seq2SeqModel::new(other_cfg, 3).unwrap(), TrainStage::Base, 2);
        assert!(matches!(
            average_checkpoints(&[a.clone(), b]).unwrap_err(),
            Error::Contract(_)
        ));
        assert!(matches!(average_checkpoints(&[]).unwrap_err(), Error::Contract(_)));
    }

    #[test]
    fn listing_and_pruning_keep_the_newest() {
        let model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for u in [500u64, 1000, 1500, 2000, 2500, 3000] {
            let c = Checkpoint::from_model(&model, TrainStage::Base, u);
            save_checkpoint(&c, &checkpoint_path(dir.path(), u)).unwrap();
        }
        prune_checkpoints(dir.path(), 5).unwrap();
        let left: Vec<u64> = list_checkpoints(dir.path()).unwrap().into_iter().map(|(u, _)| u).collect();
        assert_eq!(left, vec![1000, 1500, 2000, 2500, 3000]);
    }

    #[test]
    fn metrics_log_is_tab_separated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.tsv");
        let mut log = MetricsLog::create(&path).unwrap();
        log.row(500, "train", 1.25, None).unwrap();
        log.row(500, "valid", 1.5, Some(42.1234)).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "update\tsplit\tnll\tbleu");
        assert_eq!(lines[1], "500\ttrain\t1.250000\t-");
        assert_eq!(lines[2], "500\tvalid\t1.500000\t42.1234");
    }

    #[test]
    fn zero_updates_returns_initialization() {
        let c = tiny_corpus();
        let mut model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let before = model.params().clone();
        let ckpt =
            train_base(&mut model, &c.train, None, &tiny_train_config(0), None).unwrap();
        assert_eq!(ckpt.params, before);
        assert_eq!(ckpt.update, 0);
    }

    #[test]
    fn base_training_rejects_other_modes() {
        let c = tiny_corpus();
        let mut model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let cfg = TrainConfig { mode: TrainingMode::Joint, ..tiny_train_config(1) };
        assert!(matches!(
            train_base(&mut model, &c.train, None, &cfg, None).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn base_training_freezes_encoder_and_moves_decoder() {
        let c = tiny_corpus();
        let mut model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let before = model.params().clone();
        train_base(&mut model, &c.train, None, &tiny_train_config(5), None).unwrap();
        let mut dec_changed = false;
        for (name, t) in model.params() {
            match group_of(name) {
                "enc_embed" | "enc_layers" => {
                    assert_eq!(t, &before[name], "{name} moved despite freeze")
                }
                _ => dec_changed |= t != &before[name],
            }
        }
        assert!(dec_changed, "decoder parameters never moved");
    }

    #[test]
    fn training_reduces_validation_nll() {
        let c = tiny_corpus();
        let mut model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let before = corpus_token_nll(&model, &c.valid, 64).unwrap();
        train_base(&mut model, &c.train, Some(&c.valid), &tiny_train_config(40), None).unwrap();
        let after = corpus_token_nll(&model, &c.valid, 64).unwrap();
        assert!(after < before, "validation NLL did not improve: {before} -> {after}");
    }

    #[test]
    fn training_writes_cadenced_checkpoints_and_metrics() {
        let c = tiny_corpus();
        let mut model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path().join("run")).unwrap();
        let cfg = TrainConfig { checkpoint_every: 4, ..tiny_train_config(10) };
        let last =
            train_base(&mut model, &c.train, Some(&c.valid), &cfg, Some(&mut run)).unwrap();
        let found = list_checkpoints(run.path()).unwrap();
        let updates: Vec<u64> = found.iter().map(|(u, _)| *u).collect();
        assert_eq!(updates, vec![4, 8, 10]);
        let reloaded = load_checkpoint(&found.last().unwrap().1).unwrap();
        assert_eq!(reloaded, last);
        let text = std::fs::read_to_string(run.path().join("metrics.tsv")).unwrap();
        assert!(text.lines().count() >= 6, "expected train+valid rows per evaluation");
    }

    #[test]
    fn mask_count_is_fifteen_percent_rounded_with_floor_one() {
        assert_eq!(mlm_mask_count(20), 3);
        assert_eq!(mlm_mask_count(10), 2); // 1.5 rounds away from zero
        assert_eq!(mlm_mask_count(7), 1);
        assert_eq!(mlm_mask_count(3), 1);
        assert_eq!(mlm_mask_count(1), 1);
    }

    #[test]
    fn mlm_improves_heldout_loss_and_leaves_decoder_untouched() {
        let c = tiny_corpus();
        let mut model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let before = model.params().clone();
        let cfg = TrainConfig { lr: 5e-3, ..tiny_train_config(60) };
        let out = pretrain_encoder_mlm(&mut model, &c.train, Some(&c.valid), &cfg, None).unwrap();
        let (b, a) = (out.heldout_nll_before.unwrap(), out.heldout_nll_after.unwrap());
        assert!(a < b, "held-out MLM loss did not improve: {b} -> {a}");
        let mut enc_changed = false;
        for (name, t) in model.params() {
            match group_of(name) {
                "enc_embed" | "enc_layers" => enc_changed |= t != &before[name],
                _ => assert_eq!(t, &before[name], "{name} moved during encoder pretraining"),
            }
        }
        assert!(enc_changed, "encoder parameters never moved");
        assert!(!model.params().contains_key("mlm_head.weight"), "head must be discarded");
        assert_eq!(out.checkpoint.stage, TrainStage::Mlm);
    }
}
