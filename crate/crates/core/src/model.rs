//! Encoder-decoder transformer with named, grouped parameters.
//!
//! The model is a pre-LN transformer: token embedding scaled by sqrt(d_model)
//! plus sinusoidal positional encoding, self-attention (causal on the decoder
//! side), cross-attention from decoder to encoder states, and ReLU
//! feed-forward blocks. Positional encodings are deterministic and excluded
//! from the parameter map.
//!
//! Parameters live in a name-keyed map; the name's first dotted component is
//! its group (`enc_embed`, `enc_layers`, `dec_embed`, `dec_layers`,
//! `out_proj`). Training modes freeze whole groups; frozen parameters are
//! bound to the tape as constants, so no gradient work is spent on them.
//!
//! Batched training uses packed forwards ([`ParamBinding::encode_pack`],
//! [`ParamBinding::decode_pack`]): sentences are concatenated row-wise with
//! no padding, and attention respects sentence boundaries through
//! [`PackLayout`]. The per-sentence [`Seq2SeqModel::encode`] and
//! [`Seq2SeqModel::decode_logits`] are thin pack-of-one wrappers used by
//! decoding and tests.

use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{attention, AttentionSpec, PackLayout, Reduction};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, tags};
use crate::{Elem, Tape, Tensor, Var};

/// Layer-norm variance floor.
pub const LN_EPS: Elem = 1e-5;

/// Parameter group names, in canonical order.
pub const GROUPS: [&str; 5] = ["enc_embed", "enc_layers", "dec_embed", "dec_layers", "out_proj"];

/// Group of a parameter: the name's first dotted component.
pub fn group_of(name: &str) -> &str {
    match name.find('.') {
        Some(i) => &name[..i],
        None => name,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    pub mask_id: usize,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: CPU-trainable in minutes while exercising every
    /// code path of a full-size transformer.
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 256,
            max_seq_len: 64,
            dropout: 0.1,
            pad_id: 0,
            bos_id: 1,
            eos_id: 2,
            mask_id: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::config("layer counts must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        let specials = [self.pad_id, self.bos_id, self.eos_id, self.mask_id];
        let distinct: BTreeSet<usize> = specials.iter().copied().collect();
        if distinct.len() != specials.len() {
            return Err(Error::config("special token ids must be distinct"));
        }
        if specials.iter().any(|&s| s >= self.vocab_size) {
            return Err(Error::config(format!(
                "special token id out of range for vocab size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which parameter groups train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// Freeze `enc_embed` and `enc_layers`; train the decoder side only.
    DecoderOnly,
    /// Train everything, keeping the current (pretrained) initialization.
    Joint,
    /// Train everything from a fresh random initialization.
    FromScratch,
}

impl TrainingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decoder_only" => Ok(TrainingMode::DecoderOnly),
            "joint" => Ok(TrainingMode::Joint),
            "from_scratch" => Ok(TrainingMode::FromScratch),
            other => Err(Error::config(format!(
                "unknown training mode {other:?} (expected decoder_only, joint, or from_scratch)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainingMode::DecoderOnly => "decoder_only",
            TrainingMode::Joint => "joint",
            TrainingMode::FromScratch => "from_scratch",
        }
    }
}

/// One aligned sentence pair of token ids (both sides end with EOS).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src_ids: Vec<usize>,
    pub tgt_ids: Vec<usize>,
}

/// Decoder input row for teacher forcing: BOS followed by all target tokens
/// but the last (row t then predicts `tgt_ids[t]`).
pub fn decoder_inputs(tgt_ids: &[usize], bos_id: usize) -> Vec<usize> {
    let mut row = Vec::with_capacity(tgt_ids.len());
    row.push(bos_id);
    row.extend_from_slice(&tgt_ids[..tgt_ids.len() - 1]);
    row
}

/// Sinusoidal positional encoding table `[max_len x d]`.
pub fn positional_encoding(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    /// Dense weight or embedding: N(0, 0.02^2).
    Weight,
    /// Additive bias: zeros.
    Bias,
    /// Layer-norm gain: ones.
    Gain,
}

/// Creation-order parameter list for a config: (name, shape, kind).
fn param_spec(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let mut spec: Vec<(String, Vec<usize>, ParamKind)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
        spec.push((name, shape, kind));
    };

    push("enc_embed.weight".into(), vec![v, d], Weight);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc_layers.{l}");
        for ln in ["ln1", "ln2"] {
            push(format!("{p}.{ln}.gain"), vec![d], Gain);
            push(format!("{p}.{ln}.bias"), vec![d], Bias);
        }
        for proj in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.self_attn.{proj}.weight"), vec![d, d], Weight);
            push(format!("{p}.self_attn.{proj}.bias"), vec![d], Bias);
        }
        push(format!("{p}.ffn.w1.weight"), vec![d, f], Weight);
        push(format!("{p}.ffn.w1.bias"), vec![f], Bias);
        push(format!("{p}.ffn.w2.weight"), vec![f, d], Weight);
        push(format!("{p}.ffn.w2.bias"), vec![d], Bias);
    }
    push("enc_layers.final_ln.gain".into(), vec![d], Gain);
    push("enc_layers.final_ln.bias".into(), vec![d], Bias);

    push("dec_embed.weight".into(), vec![v, d], Weight);
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec_layers.{l}");
        for ln in ["ln1", "ln2", "ln3"] {
            push(format!("{p}.{ln}.gain"), vec![d], Gain);
            push(format!("{p}.{ln}.bias"), vec![d], Bias);
        }
        for attn in ["self_attn", "cross_attn"] {
            for proj in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.{attn}.{proj}.weight"), vec![d, d], Weight);
                push(format!("{p}.{attn}.{proj}.bias"), vec![d], Bias);
            }
        }
        push(format!("{p}.ffn.w1.weight"), vec![d, f], Weight);
        push(format!("{p}.ffn.w1.bias"), vec![f], Bias);
        push(format!("{p}.ffn.w2.weight"), vec![f, d], Weight);
        push(format!("{p}.ffn.w2.bias"), vec![d], Bias);
    }
    push("dec_layers.final_ln.gain".into(), vec![d], Gain);
    push("dec_layers.final_ln.bias".into(), vec![d], Bias);

    push("out_proj.weight".into(), vec![d, v], Weight);
    push("out_proj.bias".into(), vec![v], Bias);
    spec
}

/// Expected parameter shapes for a config, keyed by name.
pub fn expected_param_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    param_spec(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn init_params(cfg: &ModelConfig, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid init distribution");
    let mut params = BTreeMap::new();
    for (name, shape, kind) in param_spec(cfg) {
        let n: usize = shape.iter().product();
        let data = match kind {
            ParamKind::Weight => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            ParamKind::Bias => vec![0.0; n],
            ParamKind::Gain => vec![1.0; n],
        };
        params.insert(name, Tensor::new(shape, data));
    }
    params
}

/// Encoder-decoder model: named parameters, a freeze set, and the config.
#[derive(Clone)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    init_seed: u64,
}

impl Seq2SeqModel {
    /// Fresh model with N(0, 0.02) weights, zero biases, unit gains. Bit-
    /// deterministic for a fixed (config, seed).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, derive_seed(seed, &[tags::INIT]));
        Ok(Seq2SeqModel { config, params, frozen: BTreeSet::new(), init_seed: seed })
    }

    /// Rebuild a model from a checkpointed parameter map, validating names
    /// and shapes against the config.
    pub fn from_params(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let expected = expected_param_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: {} stored, {} expected for this config",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::config(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Seq2SeqModel { config, params, frozen: BTreeSet::new(), init_seed: seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Select the training regime; returns the set of trainable groups.
    /// `FromScratch` re-randomizes every parameter (seeded derivation of the
    /// model's construction seed, so it stays reproducible).
    pub fn set_training_mode(&mut self, mode: TrainingMode) -> BTreeSet<String> {
        self.frozen = match mode {
            TrainingMode::DecoderOnly => {
                ["enc_embed", "enc_layers"].iter().map(|s| s.to_string()).collect()
            }
            TrainingMode::Joint => BTreeSet::new(),
            TrainingMode::FromScratch => {
                self.params = init_params(&self.config, derive_seed(self.init_seed, &[tags::REINIT]));
                BTreeSet::new()
            }
        };
        GROUPS
            .iter()
            .filter(|g| !self.frozen.contains(**g))
            .map(|g| g.to_string())
            .collect()
    }

    /// Per-group parameter counts.
    pub fn count_parameters(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            GROUPS.iter().map(|g| (g.to_string(), 0)).collect();
        for (name, t) in &self.params {
            *counts.get_mut(group_of(name)).expect("parameter in unknown group") += t.numel();
        }
        counts
    }

    /// Bind parameters for training: frozen groups as constants, the rest as
    /// differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ParamBinding<'t> {
        let frozen = self.frozen.clone();
        ParamBinding::from_map(tape, &self.params, &self.config, move |name| {
            !frozen.contains(group_of(name))
        })
    }

    /// Bind every parameter as a constant (inference mode).
    pub fn bind_eval<'t>(&self, tape: &'t Tape) -> ParamBinding<'t> {
        ParamBinding::from_map(tape, &self.params, &self.config, |_| false)
    }

    /// Contextual encoder states `[S x d_model]` for one (possibly padded)
    /// sentence. `src_pad_mask[i]` is true at padding positions, which are
    /// excluded from attention; their output rows are meaningless.
    pub fn encode(&self, src_ids: &[usize], src_pad_mask: &[bool]) -> Result<Tensor> {
        if src_pad_mask.len() != src_ids.len() {
            return Err(Error::contract(format!(
                "pad mask has {} entries for {} tokens",
                src_pad_mask.len(),
                src_ids.len()
            )));
        }
        if src_pad_mask.iter().all(|&p| p) {
            return Err(Error::data("empty sentence: all positions are padding"));
        }
        let attendable: Vec<bool> = src_pad_mask.iter().map(|&p| !p).collect();
        let tape = Tape::new();
        let bound = self.bind_eval(&tape);
        let (h, _) =
            bound.encode_pack(&[src_ids.to_vec()], Some(Rc::new(attendable)), None)?;
        Ok(h.value())
    }

    /// Next-token logits `[T x V]` for a decoder prefix against precomputed
    /// encoder states (all rows attendable; pass only non-pad rows). Row `t`
    /// depends on `tgt_in[0..=t]` and the encoder states only.
    pub fn decode_logits(&self, enc_states: &Tensor, tgt_in: &[usize]) -> Result<Tensor> {
        if enc_states.rank() != 2 || enc_states.cols() != self.config.d_model {
            return Err(Error::contract(format!(
                "encoder states shape {:?} does not match d_model {}",
                enc_states.shape(),
                self.config.d_model
            )));
        }
        if tgt_in.first() != Some(&self.config.bos_id) {
            return Err(Error::contract("decoder input must begin with BOS"));
        }
        let tape = Tape::new();
        let bound = self.bind_eval(&tape);
        let enc_layout = Rc::new(PackLayout::new(vec![enc_states.shape()[0]]));
        let enc = tape.constant(enc_states.clone());
        let logits = bound.decode_pack(enc, enc_layout, None, &[tgt_in.to_vec()], None)?;
        Ok(logits.value())
    }
}

/// Tape-bound parameters plus the packed forward passes.
pub struct ParamBinding<'t> {
    tape: &'t Tape,
    cfg: ModelConfig,
    pe: Tensor,
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamBinding<'t> {
    /// Bind an arbitrary parameter map (used directly by stages that train
    /// extra temporary parameters alongside the model's).
    pub fn from_map(
        tape: &'t Tape,
        params: &BTreeMap<String, Tensor>,
        cfg: &ModelConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> ParamBinding<'t> {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        ParamBinding {
            tape,
            cfg: cfg.clone(),
            pe: positional_encoding(cfg.max_seq_len, cfg.d_model),
            vars,
        }
    }

    pub fn var(&self, name: &str) -> Var<'t> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Gradients of every differentiable bound parameter (zeros where the
    /// last backward pass did not reach).
    pub fn collect_grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, var)| var.grad().map(|g| (name.clone(), g)))
            .collect()
    }

    fn check_lens(&self, sents: &[Vec<usize>]) -> Result<()> {
        if sents.is_empty() {
            return Err(Error::contract("empty sentence pack"));
        }
        for s in sents {
            if s.is_empty() {
                return Err(Error::data("empty sentence in pack"));
            }
            if s.len() > self.cfg.max_seq_len {
                return Err(Error::data(format!(
                    "sequence-length error: sentence of length {} exceeds max_seq_len {}",
                    s.len(),
                    self.cfg.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// Embedding + scaled + positional encoding + dropout for a pack.
    fn embed(
        &self,
        table: &str,
        sents: &[Vec<usize>],
        layout: &Rc<PackLayout>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var<'t> {
        let ids: Vec<usize> = sents.iter().flatten().copied().collect();
        let d = self.cfg.d_model;
        let mut pe_data = Vec::with_capacity(ids.len() * d);
        for s in sents {
            pe_data.extend_from_slice(&self.pe.data()[..s.len() * d]);
        }
        let pe = self.tape.constant(Tensor::new(vec![ids.len(), d], pe_data));
        let x = self
            .var(table)
            .gather_rows(&ids)
            .scale((d as f64).sqrt())
            .add(pe);
        debug_assert_eq!(layout.total_rows(), ids.len());
        self.dropout(x, rng)
    }

    fn dropout(&self, x: Var<'t>, rng: &mut Option<&mut ChaCha8Rng>) -> Var<'t> {
        let p = self.cfg.dropout;
        let Some(r) = rng.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let scale = 1.0 / (1.0 - p);
        let data: Vec<f64> =
            (0..n).map(|_| if r.gen::<f64>() < p { 0.0 } else { scale }).collect();
        let mask = self.tape.constant(Tensor::new(shape, data));
        x.mul(mask)
    }

    fn linear(&self, x: Var<'t>, prefix: &str) -> Var<'t> {
        x.matmul(self.var(&format!("{prefix}.weight")))
            .add_bias(self.var(&format!("{prefix}.bias")))
    }

    fn layer_norm(&self, x: Var<'t>, prefix: &str) -> Var<'t> {
        x.layer_norm(
            self.var(&format!("{prefix}.gain")),
            self.var(&format!("{prefix}.bias")),
            LN_EPS,
        )
    }

    /// Pre-LN residual attention block. Queries come from `x`; keys/values
    /// from `kv` (equal to the normalized `x` when `kv` is None).
    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &self,
        x: Var<'t>,
        kv: Option<Var<'t>>,
        ln: &str,
        attn: &str,
        q_layout: Rc<PackLayout>,
        kv_layout: Rc<PackLayout>,
        causal: bool,
        key_mask: Option<Rc<Vec<bool>>>,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var<'t> {
        let y = self.layer_norm(x, ln);
        let kv_src = kv.unwrap_or(y);
        let q = self.linear(y, &format!("{attn}.wq"));
        let k = self.linear(kv_src, &format!("{attn}.wk"));
        let v = self.linear(kv_src, &format!("{attn}.wv"));
        let spec = AttentionSpec {
            n_heads: self.cfg.n_heads,
            scale: 1.0 / (self.cfg.head_dim() as f64).sqrt(),
            q_layout,
            kv_layout,
            causal,
            key_mask,
        };
        let o = self.linear(attention(q, k, v, spec), &format!("{attn}.wo"));
        x.add(self.dropout(o, rng))
    }

    fn ffn_block(
        &self,
        x: Var<'t>,
        prefix: &str,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var<'t> {
        let y = self.layer_norm(x, &format!("{prefix}.ln{}", if prefix.starts_with("enc") { 2 } else { 3 }));
        let h = self.linear(y, &format!("{prefix}.ffn.w1")).relu();
        let o = self.linear(h, &format!("{prefix}.ffn.w2"));
        x.add(self.dropout(o, rng))
    }

    /// Encoder forward over a pack of sentences. `key_mask` (one flag per
    /// packed row, true = attendable) supports padded single-sentence use;
    /// packed training passes None since packs carry no padding.
    pub fn encode_pack(
        &self,
        src: &[Vec<usize>],
        key_mask: Option<Rc<Vec<bool>>>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Rc<PackLayout>)> {
        self.check_lens(src)?;
        let layout = Rc::new(PackLayout::new(src.iter().map(|s| s.len()).collect()));
        let mut h = self.embed("enc_embed.weight", src, &layout, &mut rng);
        for l in 0..self.cfg.n_enc_layers {
            let p = format!("enc_layers.{l}");
            h = self.attn_block(
                h,
                None,
                &format!("{p}.ln1"),
                &format!("{p}.self_attn"),
                layout.clone(),
                layout.clone(),
                false,
                key_mask.clone(),
                &mut rng,
            );
            h = self.ffn_block(h, &p, &mut rng);
        }
        Ok((self.layer_norm(h, "enc_layers.final_ln"), layout))
    }

    /// Decoder forward over a pack of BOS-prefixed input rows, returning
    /// next-token logits `[total_rows x V]`. Sentence `s` of the target pack
    /// cross-attends to sentence `s` of the encoder pack.
    pub fn decode_pack(
        &self,
        enc: Var<'t>,
        enc_layout: Rc<PackLayout>,
        enc_key_mask: Option<Rc<Vec<bool>>>,
        tgt_in: &[Vec<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        self.check_lens(tgt_in)?;
        if tgt_in.len() != enc_layout.n_seqs() {
            return Err(Error::contract(format!(
                "decoder pack has {} sentences, encoder pack {}",
                tgt_in.len(),
                enc_layout.n_seqs()
            )));
        }
        let layout = Rc::new(PackLayout::new(tgt_in.iter().map(|s| s.len()).collect()));
        let mut h = self.embed("dec_embed.weight", tgt_in, &layout, &mut rng);
        for l in 0..self.cfg.n_dec_layers {
            let p = format!("dec_layers.{l}");
            h = self.attn_block(
                h,
                None,
                &format!("{p}.ln1"),
                &format!("{p}.self_attn"),
                layout.clone(),
                layout.clone(),
                true,
                None,
                &mut rng,
            );
            h = self.attn_block(
                h,
                Some(enc),
                &format!("{p}.ln2"),
                &format!("{p}.cross_attn"),
                layout.clone(),
                enc_layout.clone(),
                false,
                enc_key_mask.clone(),
                &mut rng,
            );
            h = self.ffn_block(h, &p, &mut rng);
        }
        let h = self.layer_norm(h, "dec_layers.final_ln");
        Ok(self.linear(h, "out_proj"))
    }

    /// Full training forward: encode, decode, token-mean NLL against the
    /// packed target ids.
    pub fn seq2seq_loss(
        &self,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let logits = self.seq2seq_logits(src, tgt, rng)?;
        let targets: Vec<usize> = tgt.iter().flatten().copied().collect();
        Ok(logits.cross_entropy(&targets, Some(self.cfg.pad_id), Reduction::TokenMean))
    }

    /// Next-token logits over the packed batch (teacher-forced).
    pub fn seq2seq_logits(
        &self,
        src: &[Vec<usize>],
        tgt: &[Vec<usize>],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        if src.len() != tgt.len() {
            return Err(Error::contract(format!(
                "{} source sentences vs {} target sentences",
                src.len(),
                tgt.len()
            )));
        }
        let (enc, enc_layout) = self.encode_pack(src, None, rng.as_deref_mut())?;
        let tgt_in: Vec<Vec<usize>> =
            tgt.iter().map(|t| decoder_inputs(t, self.cfg.bos_id)).collect();
        self.decode_pack(enc, enc_layout, None, &tgt_in, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_seq_len: 12,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let a = Seq2SeqModel::new(tiny_config(), 7).unwrap();
        let b = Seq2SeqModel::new(tiny_config(), 7).unwrap();
        let c = Seq2SeqModel::new(tiny_config(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn count_parameters_embedding_group_is_v_times_d() {
        let cfg = ModelConfig { vocab_size: 100, ..ModelConfig::default() };
        let m = Seq2SeqModel::new(cfg, 1).unwrap();
        let counts = m.count_parameters();
        assert_eq!(counts["enc_embed"], 6400);
        assert_eq!(counts["dec_embed"], 6400);
        let total: usize = counts.values().sum();
        let direct: usize = m.params().values().map(|t| t.numel()).sum();
        assert_eq!(total, direct);
    }

    #[test]
    fn every_parameter_belongs_to_a_known_group() {
        let m = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        for name in m.params().keys() {
            assert!(GROUPS.contains(&group_of(name)), "{name} in unknown group");
        }
    }

    #[test]
    fn encode_output_shape_is_len_by_d_model() {
        let m = Seq2SeqModel::new(tiny_config(), 5).unwrap();
        let h = m.encode(&[5, 6, 7, 2], &[false; 4]).unwrap();
        assert_eq!(h.shape(), &[4, 8]);
    }

    #[test]
    fn pad_positions_do_not_influence_real_states() {
        let m = Seq2SeqModel::new(tiny_config(), 5).unwrap();
        let mask = [false, false, false, true, true];
        let a = m.encode(&[5, 6, 2, 7, 9], &mask).unwrap();
        let b = m.encode(&[5, 6, 2, 9, 7], &mask).unwrap();
        assert_eq!(&a.data()[..3 * 8], &b.data()[..3 * 8], "pad contents leaked");
        let c = m.encode(&[5, 6, 2], &[false; 3]).unwrap();
        assert_eq!(&a.data()[..3 * 8], c.data(), "pad presence changed real states");
    }

    #[test]
    fn different_sources_give_different_states() {
        let m = Seq2SeqModel::new(tiny_config(), 5).unwrap();
        let a = m.encode(&[5, 6, 2], &[false; 3]).unwrap();
        let b = m.encode(&[6, 5, 2], &[false; 3]).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn decode_is_causal_bit_exactly() {
        let m = Seq2SeqModel::new(tiny_config(), 9).unwrap();
        let enc = m.encode(&[5, 6, 7, 2], &[false; 4]).unwrap();
        let base = m.decode_logits(&enc, &[1, 5, 6, 7]).unwrap();
        let perturbed = m.decode_logits(&enc, &[1, 5, 9, 7]).unwrap();
        let v = 16;
        assert_eq!(&base.data()[..2 * v], &perturbed.data()[..2 * v]);
        assert_ne!(&base.data()[2 * v..], &perturbed.data()[2 * v..]);
    }

    #[test]
    fn decode_single_token_prefix_gives_one_row() {
        let m = Seq2SeqModel::new(tiny_config(), 9).unwrap();
        let enc = m.encode(&[5, 2], &[false; 2]).unwrap();
        let logits = m.decode_logits(&enc, &[1]).unwrap();
        assert_eq!(logits.shape(), &[1, 16]);
        let p = crate::autodiff::Tape::new();
        let row = p.constant(logits).softmax(1).value();
        let sum: f64 = row.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_rejects_prefix_without_bos() {
        let m = Seq2SeqModel::new(tiny_config(), 9).unwrap();
        let enc = m.encode(&[5, 2], &[false; 2]).unwrap();
        let err = m.decode_logits(&enc, &[5, 6]).unwrap_err();
        assert!(err.to_string().contains("BOS"), "{err}");
    }

    #[test]
    fn overlength_input_is_a_data_error() {
        let m = Seq2SeqModel::new(tiny_config(), 9).unwrap();
        let ids = vec![5; 13];
        let err = m.encode(&ids, &vec![false; 13]).unwrap_err();
        assert!(err.to_string().contains("sequence-length"), "{err}");
    }

    #[test]
    fn training_modes_set_freeze_groups() {
        let mut m = Seq2SeqModel::new(tiny_config(), 4).unwrap();
        let trainable = m.set_training_mode(TrainingMode::DecoderOnly);
        assert!(m.frozen_groups().contains("enc_embed"));
        assert!(m.frozen_groups().contains("enc_layers"));
        assert_eq!(trainable.len(), 3);
        let before = m.params().clone();
        let trainable = m.set_training_mode(TrainingMode::Joint);
        assert!(m.frozen_groups().is_empty());
        assert_eq!(trainable.len(), 5);
        assert_eq!(&before, m.params(), "joint mode must keep parameters");
        m.set_training_mode(TrainingMode::FromScratch);
        assert_ne!(&before, m.params(), "from_scratch must re-randomize");
    }

    #[test]
    fn pack_forward_matches_per_sentence_forward() {
        let m = Seq2SeqModel::new(tiny_config(), 11).unwrap();
        let s1 = vec![5, 6, 7, 2];
        let s2 = vec![9, 10, 2];
        let tape = Tape::new();
        let bound = m.bind_eval(&tape);
        let (h, layout) = bound.encode_pack(&[s1.clone(), s2.clone()], None, None).unwrap();
        let packed = h.value();
        let a = m.encode(&s1, &[false; 4]).unwrap();
        let b = m.encode(&s2, &[false; 3]).unwrap();
        assert_eq!(layout.offset(1), 4);
        for (i, &x) in a.data().iter().enumerate() {
            assert!((packed.data()[i] - x).abs() < 1e-12);
        }
        for (i, &x) in b.data().iter().enumerate() {
            assert!((packed.data()[4 * 8 + i] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_draws_are_reproducible_and_off_at_eval() {
        let m = Seq2SeqModel::new(tiny_config(), 13).unwrap();
        let src = vec![vec![5, 6, 2]];
        let tgt = vec![vec![7, 8, 2]];
        let run = |seed: Option<u64>| {
            let tape = Tape::new();
            let bound = m.bind(&tape);
            let mut rng = seed.map(crate::rng::seeded_rng);
            bound.seq2seq_loss(&src, &tgt, rng.as_mut()).unwrap().scalar_value()
        };
        assert_eq!(run(Some(3)), run(Some(3)));
        assert_ne!(run(Some(3)), run(Some(4)), "dropout masks should differ across seeds");
        assert_eq!(run(None), run(None));
    }

    #[test]
    fn frozen_groups_receive_no_gradients() {
        let mut m = Seq2SeqModel::new(tiny_config(), 13).unwrap();
        m.set_training_mode(TrainingMode::DecoderOnly);
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let loss = bound.seq2seq_loss(&[vec![5, 6, 2]], &[vec![7, 2]], None).unwrap();
        loss.backward();
        let grads = bound.collect_grads();
        assert!(grads.keys().all(|k| !k.starts_with("enc_")));
        assert!(grads.contains_key("out_proj.weight"));
        let gnorm: f64 = grads["out_proj.weight"].data().iter().map(|g| g * g).sum();
        assert!(gnorm > 0.0);
    }

    #[test]
    fn positional_encoding_matches_closed_form() {
        let pe = positional_encoding(4, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        let pos = 3.0f64;
        assert!((pe.row(3)[0] - pos.sin()).abs() < 1e-15);
        assert!((pe.row(3)[1] - pos.cos()).abs() < 1e-15);
        let scaled = pos / 10000f64.powf(2.0 / 4.0);
        assert!((pe.row(3)[2] - scaled.sin()).abs() < 1e-15);
        assert!((pe.row(3)[3] - scaled.cos()).abs() < 1e-15);
    }

    #[test]
    fn from_params_validates_names_and_shapes() {
        let m = Seq2SeqModel::new(tiny_config(), 2).unwrap();
        let ok = Seq2SeqModel::from_params(tiny_config(), m.params().clone(), 2);
        assert!(ok.is_ok());
        let mut bad = m.params().clone();
        bad.remove("out_proj.bias");
        assert!(Seq2SeqModel::from_params(tiny_config(), bad, 2).is_err());
        let mut wrong_shape = m.params().clone();
        wrong_shape.insert("out_proj.bias".into(), Tensor::zeros(vec![3]));
        assert!(Seq2SeqModel::from_params(tiny_config(), wrong_shape, 2).is_err());
    }
}
