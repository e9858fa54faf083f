//! Complementary Knowledge Distillation.
//!
//! One student and n teachers, all initialized from the base model, rotate
//! over a fresh random partition D_1..D_{n+1} of the training data each
//! epoch. At timestep t, teacher i first trains with plain NLL on subset
//! O(i,t) = i+t (wrapped past n+1), so the teachers jointly cover exactly
//! the complement of D_t; the student then trains on D_t minimizing
//! α·L_KD + (1−α)·L_NLL, where L_KD distills from the teachers' averaged
//! next-token distribution. After the last timestep every teacher is
//! reinitialized to a copy of the student (with fresh optimizer state), so
//! knowledge flows both ways across epochs.
//!
//! Teacher distributions are computed batch-by-batch in inference mode
//! (dropout off) and enter the student's graph as constants, so no gradient
//! can reach a teacher. With α = 0 the student's trajectory is bit-identical
//! to plain sequential NLL training over D_1..D_{n+1}: every random stream
//! is keyed by (stage, epoch, timestep, model), never shared, so skipping
//! the teacher work cannot shift the student's draws.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Reduction;
use crate::data::{batch_iter, ordering, partition_epoch, Batch, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::rng::{derive_seed, seeded_rng, tags};
use crate::train::{
    adam_step, check_corpus_fits, checkpoint_path, corpus_token_nll, prune_checkpoints,
    save_checkpoint, Checkpoint, OptimState, RunDir, TrainConfig, TrainStage,
};
use crate::{Tape, Tensor, Var};

/// Row-stochastic softmax of a logits matrix: one teacher's next-token
/// distribution, computed outside any tape.
pub fn teacher_distribution(logits: &Tensor) -> Tensor {
    assert_eq!(logits.rank(), 2, "teacher logits must be rank 2");
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / sum));
    }
    Tensor::new(vec![rows, cols], out)
}

/// Distillation loss: cross-entropy of the student's log-probabilities
/// against the teachers' averaged distribution, token-averaged over counted
/// rows (`row_mask`, true = counted; None counts all). Matches the NLL
/// reduction so α-mixing stays scale-consistent. Teachers enter as plain
/// tensors, so gradients flow only to the student.
pub fn kd_loss<'t>(
    student_logits: Var<'t>,
    teacher_probs: &[Tensor],
    row_mask: Option<&[bool]>,
) -> Result<Var<'t>> {
    if teacher_probs.is_empty() {
        return Err(Error::contract("kd_loss needs at least one teacher distribution"));
    }
    let shape = student_logits.shape();
    for (i, q) in teacher_probs.iter().enumerate() {
        if q.shape() != shape.as_slice() {
            return Err(Error::contract(format!(
                "teacher {i} distribution shape {:?} does not match logits {:?}",
                q.shape(),
                shape
            )));
        }
        for r in 0..q.rows() {
            if row_mask.is_some_and(|m| !m[r]) {
                continue;
            }
            let sum: f64 = q.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "teacher {i} distribution row {r} sums to {sum}, not 1"
                )));
            }
        }
    }
    let n = teacher_probs.len() as f64;
    let mut avg = teacher_probs[0].clone();
    for q in &teacher_probs[1..] {
        for (a, &b) in avg.data_mut().iter_mut().zip(q.data()) {
            *a += b;
        }
    }
    for a in avg.data_mut() {
        *a /= n;
    }
    let mask = row_mask.map(|m| Rc::new(m.to_vec()));
    Ok(student_logits.soft_cross_entropy(avg, mask, Reduction::TokenMean))
}

/// The CKD objective α·L_KD + (1−α)·L_NLL over one batch of logits. The
/// endpoints are exact: α=0 returns the NLL node itself and never touches
/// the teachers, α=1 returns the KD node. Rows whose gold id is `pad_id`
/// are excluded from both terms.
pub fn combined_loss<'t>(
    student_logits: Var<'t>,
    teacher_probs: &[Tensor],
    gold_ids: &[usize],
    alpha: f64,
    pad_id: Option<usize>,
) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let nll = || student_logits.cross_entropy(gold_ids, pad_id, Reduction::TokenMean);
    if alpha == 0.0 {
        return Ok(nll());
    }
    let mask: Option<Vec<bool>> =
        pad_id.map(|p| gold_ids.iter().map(|&t| t != p).collect());
    let kd = kd_loss(student_logits, teacher_probs, mask.as_deref())?;
    if alpha == 1.0 {
        return Ok(kd);
    }
    Ok(kd.scale(alpha).add(nll().scale(1.0 - alpha)))
}

/// Who trained during a schedule slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelId {
    Student,
    /// 1-based teacher index.
    Teacher(usize),
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelId::Student => write!(f, "student"),
            ModelId::Teacher(i) => write!(f, "teacher_{i}"),
        }
    }
}

impl ModelId {
    /// Seed-derivation sub-tag: student 0, teacher i is i.
    fn tag(self) -> u64 {
        match self {
            ModelId::Student => tags::STUDENT,
            ModelId::Teacher(i) => i as u64,
        }
    }
}

/// One schedule slot: which model trained on which subset, and how it went.
/// The sequence of rows makes the complement invariant auditable.
#[derive(Clone, Debug)]
pub struct ScheduleRow {
    pub epoch: u64,
    /// Timestep 1..=n+1 within the epoch.
    pub t: usize,
    pub model: ModelId,
    /// 1-based subset index the model trained on.
    pub subset: usize,
    pub updates: usize,
    pub mean_loss: f64,
}

/// Append-only TSV schedule log: epoch, t, model, subset, updates, mean loss.
pub struct ScheduleLog {
    out: std::io::BufWriter<std::fs::File>,
}

impl ScheduleLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch\tt\tmodel\tsubset\tupdates\tmean_loss")?;
        out.flush()?;
        Ok(ScheduleLog { out })
    }

    pub fn row(&mut self, r: &ScheduleRow) -> Result<()> {
        writeln!(
            self.out,
            "{}\t{}\t{}\t{}\t{}\t{:.6}",
            r.epoch, r.t, r.model, r.subset, r.updates, r.mean_loss
        )?;
        self.out.flush()?;
        Ok(())
    }
}

/// Student, teachers, and their optimizers between epochs.
pub struct CkdState {
    pub student: Seq2SeqModel,
    pub teachers: Vec<Seq2SeqModel>,
    pub student_opt: OptimState,
    pub teacher_opts: Vec<OptimState>,
    pub epoch: u64,
    /// Timestep most recently entered within the current epoch (1-based,
    /// 0 before the first).
    pub timestep: usize,
    pub config: TrainConfig,
}

impl CkdState {
    /// Clone the (base-initialized) student into n teachers and apply the
    /// configured training mode to every model.
    pub fn new(mut student: Seq2SeqModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        student.set_training_mode(config.mode);
        let teachers: Vec<Seq2SeqModel> =
            (0..config.n_teachers).map(|_| student.clone()).collect();
        let n = config.n_teachers;
        Ok(CkdState {
            student,
            teachers,
            student_opt: OptimState::new(config.lr),
            teacher_opts: (0..n).map(|_| OptimState::new(config.lr)).collect(),
            epoch: 0,
            timestep: 0,
            config,
        })
    }

    pub fn n_teachers(&self) -> usize {
        self.teachers.len()
    }
}

/// Deep-copy the student's parameters into every teacher and reset the
/// teacher optimizers (moments and step counter to zero).
pub fn reinit_teachers(state: &mut CkdState) {
    for (teacher, opt) in state.teachers.iter_mut().zip(&mut state.teacher_opts) {
        *teacher.params_mut() = state.student.params().clone();
        opt.reset();
    }
}

/// Batches for one (epoch, timestep, model) training slot, with its own
/// derived shuffle stream.
fn slot_batches(
    corpus: &ParallelCorpus,
    subset: &[usize],
    state_seed: u64,
    epoch: u64,
    t: usize,
    model: ModelId,
    cycle: u64,
    batch_tokens: usize,
) -> Result<Vec<Batch>> {
    let seed = derive_seed(
        state_seed,
        &[TrainStage::Ckd.tag(), epoch, t as u64, model.tag(), cycle],
    );
    batch_iter(subset, corpus, batch_tokens, seed)
}

fn slot_dropout_rng(state_seed: u64, epoch: u64, t: usize, model: ModelId) -> ChaCha8Rng {
    seeded_rng(derive_seed(
        state_seed,
        &[tags::DROPOUT, TrainStage::Ckd.tag(), epoch, t as u64, model.tag()],
    ))
}

/// Train one model on one subset for the slot budget: `None` is a single
/// pass over the subset's batches, `Some(k)` exactly k updates (cycling
/// with re-shuffles). Returns (updates, token-weighted mean loss).
fn run_slot(
    corpus: &ParallelCorpus,
    subset: &[usize],
    budget: Option<usize>,
    epoch: u64,
    t: usize,
    model_id: ModelId,
    config: &TrainConfig,
    mut step: impl FnMut(&Batch, &mut ChaCha8Rng) -> Result<(f64, usize)>,
) -> Result<(usize, f64)> {
    let mut rng = slot_dropout_rng(config.seed, epoch, t, model_id);
    let mut updates = 0usize;
    let mut sum = 0.0;
    let mut tokens = 0usize;
    let mut cycle = 0u64;
    loop {
        let batches = slot_batches(
            corpus,
            subset,
            config.seed,
            epoch,
            t,
            model_id,
            cycle,
            config.batch_tokens,
        )?;
        for b in &batches {
            if budget.is_some_and(|k| updates >= k) {
                break;
            }
            let (loss, toks) = step(b, &mut rng)?;
            updates += 1;
            sum += loss * toks as f64;
            tokens += toks;
        }
        match budget {
            None => break,
            Some(k) if updates >= k => break,
            Some(_) => cycle += 1,
        }
    }
    let mean = if tokens > 0 { sum / tokens as f64 } else { 0.0 };
    Ok((updates, mean))
}

/// One plain-NLL step for a teacher.
fn teacher_step(
    teacher: &mut Seq2SeqModel,
    opt: &mut OptimState,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let tape = Tape::new();
    let binding = teacher.bind(&tape);
    let loss = binding.seq2seq_loss(&batch.src_unpadded(), &batch.tgt_unpadded(), Some(rng))?;
    loss.backward();
    let grads = binding.collect_grads();
    let frozen = teacher.frozen_groups().clone();
    adam_step(teacher.params_mut(), grads, opt, &frozen)?;
    Ok((loss.scalar_value(), batch.tgt_lens.iter().sum()))
}

/// One combined-objective step for the student. Teacher distributions are
/// produced on the fly in inference mode; with α = 0 the teachers are not
/// even run.
fn student_step(
    student: &mut Seq2SeqModel,
    teachers: &[Seq2SeqModel],
    opt: &mut OptimState,
    alpha: f64,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let src = batch.src_unpadded();
    let tgt = batch.tgt_unpadded();
    let mut teacher_probs = Vec::with_capacity(teachers.len());
    if alpha > 0.0 {
        for teacher in teachers {
            let tape = Tape::new();
            let logits = teacher.bind_eval(&tape).seq2seq_logits(&src, &tgt, None)?;
            teacher_probs.push(teacher_distribution(&logits.value()));
        }
    }
    let tape = Tape::new();
    let binding = student.bind(&tape);
    let logits = binding.seq2seq_logits(&src, &tgt, Some(rng))?;
    let gold: Vec<usize> = tgt.iter().flatten().copied().collect();
    let pad = Some(student.config().pad_id);
    let loss = combined_loss(logits, &teacher_probs, &gold, alpha, pad)?;
    loss.backward();
    let grads = binding.collect_grads();
    let frozen = student.frozen_groups().clone();
    adam_step(student.params_mut(), grads, opt, &frozen)?;
    Ok((loss.scalar_value(), batch.tgt_lens.iter().sum()))
}

/// The inner schedule over explicit subsets (1-based position = subset id):
/// for t = 1..=n+1, each teacher i trains on subset O(i,t), then the student
/// trains on subset t. No reinitialization happens here; the epoch wrapper
/// owns that. Returns one schedule row per (model, timestep) slot in
/// execution order.
pub fn run_ckd_timesteps(
    state: &mut CkdState,
    corpus: &ParallelCorpus,
    subsets: &[Vec<usize>],
    updates_per_subset: Option<usize>,
) -> Result<Vec<ScheduleRow>> {
    let n = state.n_teachers();
    if subsets.len() != n + 1 {
        return Err(Error::contract(format!(
            "{} subsets supplied for {n} teachers; need n+1 = {}",
            subsets.len(),
            n + 1
        )));
    }
    check_corpus_fits(&state.student, corpus)?;
    let epoch = state.epoch;
    let config = state.config.clone();
    let mut rows = Vec::new();
    for t in 1..=n + 1 {
        state.timestep = t;
        for i in 1..=n {
            let subset_id = ordering(i, t, n)?;
            let model_id = ModelId::Teacher(i);
            let (teacher, opt) =
                (&mut state.teachers[i - 1], &mut state.teacher_opts[i - 1]);
            let (updates, mean_loss) = run_slot(
                corpus,
                &subsets[subset_id - 1],
                updates_per_subset,
                epoch,
                t,
                model_id,
                &config,
                |b, rng| teacher_step(teacher, opt, b, rng),
            )?;
            rows.push(ScheduleRow { epoch, t, model: model_id, subset: subset_id, updates, mean_loss });
        }
        let (student, teachers) = (&mut state.student, &state.teachers);
        let opt = &mut state.student_opt;
        let alpha = config.alpha;
        let (updates, mean_loss) = run_slot(
            corpus,
            &subsets[t - 1],
            updates_per_subset,
            epoch,
            t,
            ModelId::Student,
            &config,
            |b, rng| student_step(student, teachers, opt, alpha, b, rng),
        )?;
        rows.push(ScheduleRow { epoch, t, model: ModelId::Student, subset: t, updates, mean_loss });
    }
    Ok(rows)
}

/// One full epoch: fresh random partition, the timestep schedule, then
/// teacher reinitialization from the student.
pub fn run_ckd_epoch(
    state: &mut CkdState,
    corpus: &ParallelCorpus,
    epoch_seed: u64,
    updates_per_subset: Option<usize>,
) -> Result<Vec<ScheduleRow>> {
    let partition = partition_epoch(corpus.len(), state.n_teachers(), epoch_seed)?;
    let subsets: Vec<Vec<usize>> =
        (1..=state.n_teachers() + 1).map(|t| partition.subset(t).to_vec()).collect();
    let rows = run_ckd_timesteps(state, corpus, &subsets, updates_per_subset)?;
    reinit_teachers(state);
    state.epoch += 1;
    state.timestep = 0;
    Ok(rows)
}

/// Plain sequential NLL training over the same subsets, deliberately drawing
/// the same derived random streams as the CKD student. This is the α = 0
/// reference trajectory and the baseline arm of the retention probe.
pub fn run_sequential_timesteps(
    model: &mut Seq2SeqModel,
    corpus: &ParallelCorpus,
    subsets: &[Vec<usize>],
    updates_per_subset: Option<usize>,
    config: &TrainConfig,
    opt: &mut OptimState,
    epoch: u64,
) -> Result<Vec<ScheduleRow>> {
    config.validate()?;
    model.set_training_mode(config.mode);
    check_corpus_fits(model, corpus)?;
    let mut rows = Vec::new();
    for t in 1..=subsets.len() {
        let (updates, mean_loss) = run_slot(
            corpus,
            &subsets[t - 1],
            updates_per_subset,
            epoch,
            t,
            ModelId::Student,
            config,
            |b, rng| {
                let tape = Tape::new();
                let binding = model.bind(&tape);
                let loss =
                    binding.seq2seq_loss(&b.src_unpadded(), &b.tgt_unpadded(), Some(rng))?;
                loss.backward();
                let grads = binding.collect_grads();
                let frozen = model.frozen_groups().clone();
                adam_step(model.params_mut(), grads, opt, &frozen)?;
                Ok((loss.scalar_value(), b.tgt_lens.iter().sum()))
            },
        )?;
        rows.push(ScheduleRow { epoch, t, model: ModelId::Student, subset: t, updates, mean_loss });
    }
    Ok(rows)
}

/// The full CKD stage: student and teachers start from the base checkpoint,
/// whole epochs run until the student-update budget is consumed, and the
/// result is the average of the last k student checkpoints (the base
/// checkpoint itself when the budget is zero). Checkpoints and metrics are
/// written at epoch boundaries each time another `checkpoint_every` student
/// updates have accumulated.
pub fn run_ckd(
    base: &Checkpoint,
    train: &ParallelCorpus,
    valid: Option<&ParallelCorpus>,
    config: &TrainConfig,
    mut run: Option<&mut RunDir>,
) -> Result<Checkpoint> {
    config.validate()?;
    let student = base.clone().into_model(config.seed)?;
    let mut state = CkdState::new(student, config.clone())?;
    check_corpus_fits(&state.student, train)?;
    if let Some(v) = valid {
        check_corpus_fits(&state.student, v)?;
    }
    let mut schedule_log = match run.as_deref_mut() {
        Some(r) => Some(ScheduleLog::create(&r.path().join("schedule.tsv"))?),
        None => None,
    };
    let mut snapshots: VecDeque<Checkpoint> = VecDeque::new();
    let mut student_updates: u64 = 0;
    let mut last_logged: u64 = 0;
    while (student_updates as usize) < config.max_updates {
        let epoch_seed = derive_seed(config.seed, &[TrainStage::Ckd.tag(), state.epoch]);
        let rows = run_ckd_epoch(&mut state, train, epoch_seed, None)?;
        for r in &rows {
            if r.model == ModelId::Student {
                student_updates += r.updates as u64;
            }
            if let Some(log) = schedule_log.as_mut() {
                log.row(r)?;
            }
        }
        let done = student_updates as usize >= config.max_updates;
        if student_updates - last_logged >= config.checkpoint_every as u64 || done {
            last_logged = student_updates;
            let snap = Checkpoint::from_model(&state.student, TrainStage::Ckd, student_updates);
            if let Some(r) = run.as_deref_mut() {
                if let Some(v) = valid {
                    let nll = corpus_token_nll(&state.student, v, config.batch_tokens)?;
                    let bleu = crate::eval::corpus_bleu4(&state.student, v, 1)?;
                    r.metrics.row(student_updates, "valid", nll, Some(bleu))?;
                }
                save_checkpoint(&snap, &checkpoint_path(r.path(), student_updates))?;
                prune_checkpoints(r.path(), config.keep_last_k)?;
            }
            snapshots.push_back(snap);
            if snapshots.len() > config.keep_last_k {
                snapshots.pop_front();
            }
        }
    }
    if snapshots.is_empty() {
        return Ok(Checkpoint {
            config: base.config.clone(),
            stage: TrainStage::Ckd,
            update: 0,
            params: base.params.clone(),
        });
    }
    let snaps: Vec<Checkpoint> = snapshots.into_iter().collect();
    crate::train::average_checkpoints(&snaps)
}

/// Outcome of the knowledge-retention probe: final token-mean NLL on the
/// earliest subset D_1 after a single ordered pass D_1 then D_2, for the
/// CKD student and the plain-sequential student, plus the shared starting
/// point's NLL for reference.
#[derive(Clone, Copy, Debug)]
pub struct RetentionOutcome {
    pub base_nll_d1: f64,
    pub ckd_nll_d1: f64,
    pub sequential_nll_d1: f64,
}

impl RetentionOutcome {
    /// True when distillation retained at least as much of D_1.
    pub fn ckd_retained(&self) -> bool {
        self.ckd_nll_d1 <= self.sequential_nll_d1
    }
}

/// Measure catastrophic forgetting under a deliberately ordered single-pass
/// stream with imbalanced training data. Every source token has two valid
/// targets; subset D_1 samples them 20/80 and subset D_2 samples them 80/20,
/// so the corpus-level knowledge at stake is the calibrated probability of
/// each alternative. A model is first trained on the balanced union, then
/// one arm runs a single CKD pass over [D_1, D_2] (n = 1) while the other
/// runs plain sequential NLL over the same subsets with the same derived
/// random streams, and both arms' final NLL on D_1 is reported. The
/// sequential student ends having just chased D_2's 80/20 gold labels, so
/// its calibration on D_1's 20/80 data degrades; the CKD student's D_2
/// phase distills from a teacher that had just re-calibrated on D_1, which
/// re-injects the early-subset statistics exactly where the sequential arm
/// forgets them.
pub fn knowledge_retention_probe(seed: u64) -> Result<RetentionOutcome> {
    use crate::data::{Vocabulary, EOS_ID};
    use crate::model::{ModelConfig, SentencePair, TrainingMode};
    use rand::seq::SliceRandom;
    use rand::Rng;

    let vocab_size = 32usize;
    let per_subset = 200usize;
    let len_range = (4usize, 7usize);
    let d1_primary_rate = 0.2f64;

    let n_content = vocab_size - Vocabulary::N_SPECIALS;
    let vocab = std::sync::Arc::new(Vocabulary::new(
        (0..n_content).map(|i| format!("w{i}")),
    )?);
    let content: Vec<usize> = (Vocabulary::FIRST_CONTENT_ID..vocab_size).collect();
    let mut rng = seeded_rng(derive_seed(seed, &[tags::SYNTH, 1]));
    let mut primary = content.clone();
    primary.shuffle(&mut rng);
    // Rotating the primary image by one yields a second bijection that
    // disagrees with the first on every token.
    let alternate: Vec<usize> = (0..primary.len())
        .map(|i| primary[(i + 1) % primary.len()])
        .collect();
    let sigma1: std::collections::BTreeMap<usize, usize> =
        content.iter().copied().zip(primary).collect();
    let sigma2: std::collections::BTreeMap<usize, usize> =
        content.iter().copied().zip(alternate).collect();

    let mut seen = std::collections::BTreeSet::new();
    let mut gen_subset = |primary_rate: f64| -> Vec<SentencePair> {
        let mut pairs = Vec::new();
        while pairs.len() < per_subset {
            let len = rng.gen_range(len_range.0..=len_range.1);
            let sent: Vec<usize> =
                (0..len).map(|_| *content.choose(&mut rng).unwrap()).collect();
            if !seen.insert(sent.clone()) {
                continue;
            }
            let mut src = sent.clone();
            let mut tgt: Vec<usize> = sent
                .iter()
                .map(|id| if rng.gen::<f64>() < primary_rate { sigma1[id] } else { sigma2[id] })
                .collect();
            src.push(EOS_ID);
            tgt.push(EOS_ID);
            pairs.push(SentencePair { src_ids: src, tgt_ids: tgt });
        }
        pairs
    };
    let d1_pairs = gen_subset(d1_primary_rate);
    let d2_pairs = gen_subset(1.0 - d1_primary_rate);
    let d1_corpus = ParallelCorpus::new(vocab.clone(), d1_pairs.clone())?;
    let mut all = d1_pairs;
    all.extend(d2_pairs);
    let corpus = ParallelCorpus::new(vocab, all)?;
    let subsets: Vec<Vec<usize>> =
        vec![(0..per_subset).collect(), (per_subset..2 * per_subset).collect()];

    let model_cfg = ModelConfig {
        vocab_size,
        d_model: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 64,
        max_seq_len: 16,
        ..ModelConfig::default()
    };
    // The union is balanced (the subsets' skews cancel), so the warm start
    // converges toward even calibration with no net bias toward either
    // subset.
    let warm_cfg = TrainConfig {
        mode: TrainingMode::Joint,
        lr: 5e-3,
        max_updates: 300,
        checkpoint_every: 1000,
        batch_tokens: 256,
        seed: derive_seed(seed, &[tags::SYNTH, 3]),
        ..TrainConfig::base_defaults()
    };
    let mut base = Seq2SeqModel::new(model_cfg, derive_seed(seed, &[tags::SYNTH, 4]))?;
    crate::train::train_translation(
        &mut base,
        &corpus,
        None,
        &warm_cfg,
        TrainStage::Base,
        None,
    )?;
    let base_nll_d1 = corpus_token_nll(&base, &d1_corpus, warm_cfg.batch_tokens)?;

    // Small batches stretch the single pass into enough updates for the
    // ordering to matter.
    let pass_cfg = TrainConfig {
        mode: TrainingMode::Joint,
        lr: 5e-3,
        alpha: 0.95,
        n_teachers: 1,
        batch_tokens: 64,
        seed: derive_seed(seed, &[tags::SYNTH, 5]),
        ..TrainConfig::base_defaults()
    };

    let mut state = CkdState::new(base.clone(), pass_cfg.clone())?;
    run_ckd_timesteps(&mut state, &corpus, &subsets, None)?;
    let ckd_nll_d1 = corpus_token_nll(&state.student, &d1_corpus, pass_cfg.batch_tokens)?;

    let mut seq_model = base;
    let mut seq_opt = OptimState::new(pass_cfg.lr);
    run_sequential_timesteps(
        &mut seq_model,
        &corpus,
        &subsets,
        None,
        &pass_cfg,
        &mut seq_opt,
        0,
    )?;
    let sequential_nll_d1 = corpus_token_nll(&seq_model, &d1_corpus, pass_cfg.batch_tokens)?;

    Ok(RetentionOutcome { base_nll_d1, ckd_nll_d1, sequential_nll_d1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, SyntheticSpec};
    use crate::model::{ModelConfig, TrainingMode};
    use rand::Rng;
    use std::collections::BTreeSet;

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

    fn tiny_ckd_config(n: usize, alpha: f64) -> TrainConfig {
        TrainConfig {
            mode: TrainingMode::Joint,
            lr: 1e-3,
            alpha,
            n_teachers: n,
            batch_tokens: 64,
            checkpoint_every: 8,
            max_updates: 16,
            seed: 11,
            ..TrainConfig::ckd_defaults()
        }
    }

    fn random_logits(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded_rng(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    fn one_hot(rows: &[usize], cols: usize) -> Tensor {
        let mut data = vec![0.0; rows.len() * cols];
        for (r, &c) in rows.iter().enumerate() {
            data[r * cols + c] = 1.0;
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    #[test]
    fn one_hot_teacher_collapses_kd_to_nll() {
        let gold = [1usize, 3, 0, 2, 2, 1];
        let logits_t = random_logits(6, 5, 7);
        let tape = Tape::new();
        let logits = tape.leaf(logits_t.clone());
        let kd = kd_loss(logits, &[one_hot(&gold, 5)], None).unwrap();
        let tape2 = Tape::new();
        let logits2 = tape2.leaf(logits_t);
        let nll = logits2.cross_entropy(&gold, None, Reduction::TokenMean);
        assert!((kd.scalar_value() - nll.scalar_value()).abs() < 1e-9);
    }

    #[test]
    fn kd_is_linear_in_the_teacher_average() {
        let q1 = teacher_distribution(&random_logits(4, 6, 1));
        let q2 = teacher_distribution(&random_logits(4, 6, 2));
        let logits_t = random_logits(4, 6, 3);
        let tape = Tape::new();
        let two = kd_loss(tape.leaf(logits_t.clone()), &[q1.clone(), q2.clone()], None).unwrap();
        let mut avg = q1.clone();
        for (a, &b) in avg.data_mut().iter_mut().zip(q2.data()) {
            *a = (*a + b) / 2.0;
        }
        let one = kd_loss(tape.leaf(logits_t), &[avg], None).unwrap();
        assert!((two.scalar_value() - one.scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn uniform_student_scores_ln_v() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 4]));
        let q = teacher_distribution(&random_logits(3, 4, 9));
        let loss = kd_loss(logits, &[q], None).unwrap();
        assert!((loss.scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kd_rejects_bad_rows_and_empty_teachers() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]));
        let bad = Tensor::new(vec![2, 3], vec![0.5, 0.2, 0.2, 0.4, 0.3, 0.3]);
        assert!(matches!(kd_loss(logits, &[bad], None).err().unwrap(), Error::Contract(_)));
        assert!(matches!(kd_loss(logits, &[], None).err().unwrap(), Error::Contract(_)));
        let wrong_shape = teacher_distribution(&random_logits(3, 3, 4));
        assert!(matches!(kd_loss(logits, &[wrong_shape], None).err().unwrap(), Error::Contract(_)));
    }

    #[test]
    fn masked_rows_are_exempt_from_row_sum_checks_and_loss() {
        let tape = Tape::new();
        let logits = tape.leaf(random_logits(3, 4, 11));
        let mut q = teacher_distribution(&random_logits(3, 4, 12));
        // Garbage in the masked row must not matter.
        q.data_mut()[4..8].fill(9.0);
        let mask = vec![true, false, true];
        let masked = kd_loss(logits, &[q.clone()], Some(&mask)).unwrap();
        let full_rows = Tensor::new(
            vec![2, 4],
            [logits.value().row(0), logits.value().row(2)].concat(),
        );
        let q_rows = Tensor::new(vec![2, 4], [q.row(0), q.row(2)].concat());
        let expect = kd_loss(tape.leaf(full_rows), &[q_rows], None).unwrap();
        assert!((masked.scalar_value() - expect.scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_endpoints_are_exact_and_affine_in_between() {
        let gold = [2usize, 0, 3, 1];
        let logits_t = random_logits(4, 5, 21);
        let q = teacher_distribution(&random_logits(4, 5, 22));
        let tape = Tape::new();
        let logits = tape.leaf(logits_t);

        let nll = logits.cross_entropy(&gold, None, Reduction::TokenMean);
        let kd = kd_loss(logits, &[q.clone()], None).unwrap();
        let at0 = combined_loss(logits, &[q.clone()], &gold, 0.0, None).unwrap();
        let at1 = combined_loss(logits, &[q.clone()], &gold, 1.0, None).unwrap();
        assert_eq!(at0.scalar_value(), nll.scalar_value());
        assert_eq!(at1.scalar_value(), kd.scalar_value());

        let mid = combined_loss(logits, &[q.clone()], &gold, 0.95, None).unwrap();
        let expect = 0.95 * kd.scalar_value() + 0.05 * nll.scalar_value();
        assert!((mid.scalar_value() - expect).abs() < 1e-15);

        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(
                combined_loss(logits, &[q.clone()], &gold, bad, None).err().unwrap(),
                Error::Config(_)
            ));
        }
    }

    #[test]
    fn one_hot_teachers_make_alpha_irrelevant() {
        let gold = [1usize, 2, 0, 3, 1];
        let logits_t = random_logits(5, 4, 31);
        let tape = Tape::new();
        let logits = tape.leaf(logits_t);
        let hot = one_hot(&gold, 4);
        let a0 = combined_loss(logits, &[hot.clone()], &gold, 0.0, None).unwrap();
        let a1 = combined_loss(logits, &[hot], &gold, 1.0, None).unwrap();
        assert!((a0.scalar_value() - a1.scalar_value()).abs() < 1e-9);
    }

    #[test]
    fn schedule_covers_complements_and_reinit_restores_equality() {
        let c = tiny_corpus();
        let base = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let mut state = CkdState::new(base, tiny_ckd_config(2, 0.95)).unwrap();
        let epoch_seed = 77;
        let rows = run_ckd_epoch(&mut state, &c.train, epoch_seed, Some(1)).unwrap();

        for t in 1..=3 {
            let teacher_subsets: BTreeSet<usize> = rows
                .iter()
                .filter(|r| r.t == t && r.model != ModelId::Student)
                .map(|r| r.subset)
                .collect();
            let want: BTreeSet<usize> = (1..=3).filter(|&s| s != t).collect();
            assert_eq!(teacher_subsets, want, "teacher complement broken at t={t}");
            let student_row =
                rows.iter().find(|r| r.t == t && r.model == ModelId::Student).unwrap();
            assert_eq!(student_row.subset, t);
        }
        // Teachers always run before the student within a timestep.
        for t in 1..=3 {
            let ids: Vec<ModelId> =
                rows.iter().filter(|r| r.t == t).map(|r| r.model).collect();
            assert_eq!(*ids.last().unwrap(), ModelId::Student);
            assert_eq!(ids.len(), 3);
        }
        for (teacher, opt) in state.teachers.iter().zip(&state.teacher_opts) {
            assert_eq!(teacher.params(), state.student.params(), "reinit must copy the student");
            assert_eq!(opt.step_count(), 0, "teacher optimizer must reset");
        }
        assert_eq!(state.epoch, 1);
        // Deep copy: mutating the student leaves teachers untouched.
        let before = state.teachers[0].params().clone();
        state.student.params_mut().get_mut("out_proj.bias").unwrap().data_mut()[0] += 1.0;
        assert_eq!(state.teachers[0].params(), &before);
    }

    #[test]
    fn student_updates_leave_teachers_bit_identical() {
        let c = tiny_corpus();
        let base = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let mut state = CkdState::new(base, tiny_ckd_config(1, 0.95)).unwrap();
        let teacher_before = state.teachers[0].params().clone();
        let student_before = state.student.params().clone();
        let subsets = vec![(0..12).collect::<Vec<_>>(), (12..24).collect()];
        // Only the student slot runs at t=1 thanks to a zero teacher budget.
        let indices = &subsets[0];
        let batches =
            slot_batches(&c.train, indices, 11, 0, 1, ModelId::Student, 0, 64).unwrap();
        let mut rng = slot_dropout_rng(11, 0, 1, ModelId::Student);
        student_step(
            &mut state.student,
            &state.teachers,
            &mut state.student_opt,
            0.95,
            &batches[0],
            &mut rng,
        )
        .unwrap();
        assert_eq!(state.teachers[0].params(), &teacher_before, "teacher params moved");
        assert_ne!(state.student.params(), &student_before, "student params did not move");
    }

    #[test]
    fn alpha_zero_trajectory_matches_sequential_nll_bit_for_bit() {
        let c = tiny_corpus();
        let base = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let cfg = tiny_ckd_config(1, 0.0);
        let subsets: Vec<Vec<usize>> = vec![(0..12).collect(), (12..24).collect()];

        let mut state = CkdState::new(base.clone(), cfg.clone()).unwrap();
        run_ckd_timesteps(&mut state, &c.train, &subsets, Some(3)).unwrap();

        let mut seq_model = base;
        let mut seq_opt = OptimState::new(cfg.lr);
        run_sequential_timesteps(
            &mut seq_model,
            &c.train,
            &subsets,
            Some(3),
            &cfg,
            &mut seq_opt,
            0,
        )
        .unwrap();
        assert_eq!(
            state.student.params(),
            seq_model.params(),
            "alpha=0 student must replay the sequential trajectory exactly"
        );
    }

    #[test]
    fn zero_budget_returns_base_parameters() {
        let c = tiny_corpus();
        let base_model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let base = Checkpoint::from_model(&base_model, TrainStage::Base, 100);
        let cfg = TrainConfig { max_updates: 0, ..tiny_ckd_config(1, 0.95) };
        let out = run_ckd(&base, &c.train, None, &cfg, None).unwrap();
        assert_eq!(out.params, base.params);
        assert_eq!(out.stage, TrainStage::Ckd);
        assert_eq!(out.update, 0);
    }

    #[test]
    fn run_ckd_emits_schedule_and_checkpoints() {
        let c = tiny_corpus();
        let base_model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let base = Checkpoint::from_model(&base_model, TrainStage::Base, 10);
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path().join("ckd")).unwrap();
        let cfg = tiny_ckd_config(1, 0.95);
        let out = run_ckd(&base, &c.train, Some(&c.valid), &cfg, Some(&mut run)).unwrap();
        assert_eq!(out.stage, TrainStage::Ckd);
        assert!(out.update as usize >= cfg.max_updates);
        let schedule = std::fs::read_to_string(run.path().join("schedule.tsv")).unwrap();
        assert!(schedule.lines().count() > 1, "schedule log should have rows");
        assert!(schedule.lines().next().unwrap().starts_with("epoch\tt\tmodel"));
        assert!(
            !crate::train::list_checkpoints(run.path()).unwrap().is_empty(),
            "ckd run should checkpoint"
        );
        // The returned checkpoint is an average, not the raw student.
        let metrics = std::fs::read_to_string(run.path().join("metrics.tsv")).unwrap();
        assert!(metrics.lines().count() > 1);
    }

    #[test]
    fn ckd_with_distillation_still_learns() {
        let c = tiny_corpus();
        let mut base_model = Seq2SeqModel::new(tiny_config(), 3).unwrap();
        let warm = TrainConfig {
            mode: TrainingMode::Joint,
            lr: 5e-3,
            max_updates: 30,
            batch_tokens: 64,
            checkpoint_every: 1000,
            seed: 11,
            ..TrainConfig::base_defaults()
        };
        crate::train::train_translation(
            &mut base_model,
            &c.train,
            None,
            &warm,
            TrainStage::Base,
            None,
        )
        .unwrap();
        let before = corpus_token_nll(&base_model, &c.valid, 64).unwrap();
        let base = Checkpoint::from_model(&base_model, TrainStage::Base, 30);
        let cfg = TrainConfig { max_updates: 24, ..tiny_ckd_config(1, 0.95) };
        let out = run_ckd(&base, &c.train, None, &cfg, None).unwrap();
        let student = out.into_model(0).unwrap();
        let after = corpus_token_nll(&student, &c.valid, 64).unwrap();
        assert!(
            after < before + 0.05,
            "CKD should not degrade the base model: {before} -> {after}"
        );
    }
}
