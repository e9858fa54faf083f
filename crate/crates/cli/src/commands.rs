//! The subcommand implementations.
//!
//! Stage order: `gen-data` writes the corpus, `pretrain` the encoder
//! checkpoint, `train-base` the frozen-encoder translation checkpoint,
//! `train-ckd` the distilled one; `translate`, `evaluate`, and `ablate`
//! consume them. Each stage loads its prerequisite from the previous
//! stage's `final.ckpt` and otherwise says which command to run first.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use minimt::ckd::run_ckd;
use minimt::data::{
    make_synthetic_corpus, read_corpus, tokenize, ParallelCorpus, SyntheticSpec, Vocabulary,
};
use minimt::error::{Error, Result};
use minimt::eval::{beam_search, evaluate_checkpoint, DEFAULT_LENGTH_PENALTY};
use minimt::model::{Seq2SeqModel, TrainingMode};
use minimt::train::{
    load_checkpoint, pretrain_encoder_mlm, save_checkpoint, train_base, train_translation,
    Checkpoint, RunDir, TrainConfig, TrainStage,
};

use crate::config::ExperimentConfig;

const FINAL_CKPT: &str = "final.ckpt";

fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut files = vec![dir.join("vocab.tsv")];
    for split in ["train", "valid", "test"] {
        for ext in ["src", "tgt"] {
            files.push(dir.join(format!("{split}.{ext}")));
        }
    }
    files
}

/// Generate and write the synthetic corpus (vocabulary TSV plus
/// `.src`/`.tgt` pairs for all three splits). Existing files are only
/// replaced under `--force`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = &cfg.data_dir;
    if !force {
        if let Some(existing) = data_files(dir).iter().find(|p| p.exists()) {
            return Err(Error::config(format!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            )));
        }
    }
    let spec = SyntheticSpec {
        task: cfg.task,
        vocab_size: cfg.model.vocab_size,
        n_train: cfg.n_train,
        n_valid: cfg.n_valid,
        n_test: cfg.n_test,
        len_range: (cfg.len_min, cfg.len_max),
        seed: cfg.seed,
    };
    let corpus = make_synthetic_corpus(&spec)?;
    std::fs::create_dir_all(dir)?;
    corpus.vocab.write_tsv(&dir.join("vocab.tsv"))?;
    for (name, split) in
        [("train", &corpus.train), ("valid", &corpus.valid), ("test", &corpus.test)]
    {
        minimt::data::write_corpus(split, &dir.join(name))?;
    }
    cfg.write_resolved(dir, "gen-data")?;
    println!(
        "wrote {}/{}/{} sentence pairs (task {}, vocabulary {}) under {}",
        cfg.n_train,
        cfg.n_valid,
        cfg.n_test,
        cfg.task.as_str(),
        corpus.vocab.len(),
        dir.display()
    );
    Ok(())
}

struct Data {
    vocab: Arc<Vocabulary>,
    train: ParallelCorpus,
    valid: ParallelCorpus,
    test: ParallelCorpus,
}

fn require_data(cfg: &ExperimentConfig) -> Result<Data> {
    if let Some(missing) = data_files(&cfg.data_dir).iter().find(|p| !p.exists()) {
        return Err(Error::data(format!(
            "missing {}: run gen-data first",
            missing.display()
        )));
    }
    let vocab = Arc::new(Vocabulary::read_tsv(&cfg.data_dir.join("vocab.tsv"))?);
    Ok(Data {
        vocab: vocab.clone(),
        train: read_corpus(&cfg.data_dir.join("train"), vocab.clone())?,
        valid: read_corpus(&cfg.data_dir.join("valid"), vocab.clone())?,
        test: read_corpus(&cfg.data_dir.join("test"), vocab)?,
    })
}

fn require_checkpoint(path: &Path, hint: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::data(format!(
            "no checkpoint at {}: run {hint} first",
            path.display()
        )));
    }
    load_checkpoint(path)
}

/// Masked-token pretraining of the encoder on the training sources, with
/// the validation sources as heldout.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let data = require_data(cfg)?;
    if cfg.model.vocab_size != data.vocab.len() {
        return Err(Error::config(format!(
            "model vocab_size {} does not match the corpus vocabulary size {}",
            cfg.model.vocab_size,
            data.vocab.len()
        )));
    }
    let dir = cfg.out_dir.join("mlm");
    let mut run = RunDir::create(&dir)?;
    cfg.write_resolved(&dir, "mlm")?;
    let mut model = Seq2SeqModel::new(cfg.model.clone(), cfg.seed)?;
    let outcome =
        pretrain_encoder_mlm(&mut model, &data.train, Some(&data.valid), &cfg.mlm, Some(&mut run))?;
    let path = dir.join(FINAL_CKPT);
    save_checkpoint(&outcome.checkpoint, &path)?;
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "pretraining done after {} updates: heldout masked-token NLL {} -> {}",
        outcome.checkpoint.update,
        fmt(outcome.heldout_nll_before),
        fmt(outcome.heldout_nll_after)
    );
    println!("saved {}", path.display());
    Ok(())
}

/// Stage-1 translation training: decoder learns on top of the frozen
/// pretrained encoder.
pub fn cmd_train_base(cfg: &ExperimentConfig) -> Result<()> {
    let data = require_data(cfg)?;
    let encoder = require_checkpoint(&cfg.out_dir.join("mlm").join(FINAL_CKPT), "pretrain")?;
    let dir = cfg.out_dir.join("base");
    let mut run = RunDir::create(&dir)?;
    cfg.write_resolved(&dir, "base")?;
    let mut model = encoder.into_model(cfg.seed)?;
    let ckpt = train_base(&mut model, &data.train, Some(&data.valid), &cfg.base, Some(&mut run))?;
    let path = dir.join(FINAL_CKPT);
    save_checkpoint(&ckpt, &path)?;
    println!("base training done after {} updates", ckpt.update);
    println!("saved {}", path.display());
    Ok(())
}

/// Stage-2 complementary knowledge distillation on top of the base
/// checkpoint. The saved checkpoint is the average of the last snapshots.
pub fn cmd_train_ckd(cfg: &ExperimentConfig) -> Result<()> {
    let data = require_data(cfg)?;
    let base = require_checkpoint(&cfg.out_dir.join("base").join(FINAL_CKPT), "train-base")?;
    let dir = cfg.out_dir.join("ckd");
    let mut run = RunDir::create(&dir)?;
    cfg.write_resolved(&dir, "ckd")?;
    let ckpt = run_ckd(&base, &data.train, Some(&data.valid), &cfg.ckd, Some(&mut run))?;
    let path = dir.join(FINAL_CKPT);
    save_checkpoint(&ckpt, &path)?;
    println!(
        "distillation done after {} student updates (alpha {}, {} teacher{})",
        ckpt.update,
        cfg.ckd.alpha,
        cfg.ckd.n_teachers,
        if cfg.ckd.n_teachers == 1 { "" } else { "s" }
    );
    println!("saved {}", path.display());
    Ok(())
}

fn default_eval_checkpoint(cfg: &ExperimentConfig, explicit: Option<PathBuf>) -> Result<Checkpoint> {
    match explicit {
        Some(path) => require_checkpoint(&path, "the producing stage"),
        None => {
            let path = cfg.out_dir.join("ckd").join(FINAL_CKPT);
            if !path.exists() {
                return Err(Error::data(format!(
                    "no checkpoint at {}: run train-ckd first or pass --checkpoint",
                    path.display()
                )));
            }
            load_checkpoint(&path)
        }
    }
}

/// Beam-search translate a plain-text file, one sentence per line; output
/// lines stay aligned with input lines. Without `--output` the
/// translations go to stdout and nothing else is printed.
pub fn cmd_translate(
    cfg: &ExperimentConfig,
    input: &Path,
    output: Option<&Path>,
    checkpoint: Option<PathBuf>,
    beam_size: usize,
    max_len: Option<usize>,
) -> Result<()> {
    let vocab_path = cfg.data_dir.join("vocab.tsv");
    if !vocab_path.exists() {
        return Err(Error::data(format!(
            "missing {}: run gen-data first",
            vocab_path.display()
        )));
    }
    let vocab = Vocabulary::read_tsv(&vocab_path)?;
    let ckpt = default_eval_checkpoint(cfg, checkpoint)?;
    if ckpt.config.vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "checkpoint vocabulary size {} does not match corpus vocabulary size {}",
            ckpt.config.vocab_size,
            vocab.len()
        )));
    }
    let model = ckpt.into_model(0)?;
    let max_len = max_len.unwrap_or(model.config().max_seq_len - 1);
    let text = std::fs::read_to_string(input)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", input.display())))?;
    let mut lines = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let src = tokenize(line, &vocab)
            .map_err(|e| Error::data(format!("{} line {}: {e}", input.display(), lineno + 1)))?;
        let hyp = beam_search(&model, &src, beam_size, max_len, DEFAULT_LENGTH_PENALTY)?;
        lines.push(minimt::data::detokenize(hyp.content(model.config().eos_id), &vocab));
    }
    match output {
        Some(path) => {
            let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
            for l in &lines {
                writeln!(out, "{l}")?;
            }
            out.flush()?;
            println!("translated {} sentences to {}", lines.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for l in &lines {
                writeln!(out, "{l}")?;
            }
        }
    }
    Ok(())
}

/// Decode a split with the default beam and report BLEU-4 and chrF.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: Option<PathBuf>,
    split: &str,
) -> Result<()> {
    let data = require_data(cfg)?;
    let corpus = match split {
        "valid" => &data.valid,
        "test" => &data.test,
        other => {
            return Err(Error::config(format!(
                "unknown split {other:?} (expected valid or test)"
            )))
        }
    };
    let ckpt = default_eval_checkpoint(cfg, checkpoint)?;
    let report = evaluate_checkpoint(&ckpt, corpus)?;
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    cfg.write_resolved(&dir, "evaluate")?;
    let path = dir.join(format!("report_{split}.tsv"));
    std::fs::write(&path, report.to_tsv())?;
    print!("{}", report.to_text());
    println!("report written to {}", path.display());
    Ok(())
}

/// Train the four variants under one seed and score them on the test
/// split: everything from random init, joint finetuning of the pretrained
/// encoder, decoder-only on the frozen encoder, and decoder-only followed
/// by complementary knowledge distillation.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let data = require_data(cfg)?;
    let encoder = require_checkpoint(&cfg.out_dir.join("mlm").join(FINAL_CKPT), "pretrain")?;
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let score = |name: &str, ckpt: &Checkpoint, rows: &mut Vec<(String, f64, f64)>| {
        let report = evaluate_checkpoint(ckpt, &data.test)?;
        println!("{name}: BLEU-4 {:.4}, chrF {:.4}", report.bleu.score(), report.chrf.score());
        rows.push((name.to_string(), report.bleu.score(), report.chrf.score()));
        Ok::<(), Error>(())
    };
    let mut decoder_only_ckpt = None;
    for (name, mode) in [
        ("from_scratch", TrainingMode::FromScratch),
        ("joint", TrainingMode::Joint),
        ("decoder_only", TrainingMode::DecoderOnly),
    ] {
        let mut model = encoder.clone().into_model(cfg.seed)?;
        let config = TrainConfig { mode, ..cfg.base.clone() };
        let ckpt = train_translation(
            &mut model,
            &data.train,
            Some(&data.valid),
            &config,
            TrainStage::Base,
            None,
        )?;
        score(name, &ckpt, &mut rows)?;
        if mode == TrainingMode::DecoderOnly {
            decoder_only_ckpt = Some(ckpt);
        }
    }
    let base = decoder_only_ckpt.expect("decoder_only variant ran");
    let distilled = run_ckd(&base, &data.train, Some(&data.valid), &cfg.ckd, None)?;
    score("decoder_only+ckd", &distilled, &mut rows)?;

    let dir = cfg.out_dir.join("ablate");
    std::fs::create_dir_all(&dir)?;
    cfg.write_resolved(&dir, "ablate")?;
    let mut table = format!("# minimt {}, seed = {}\n", env!("CARGO_PKG_VERSION"), cfg.seed);
    table.push_str("variant\tbleu4\tchrf\n");
    for (name, bleu, chrf) in &rows {
        table.push_str(&format!("{name}\t{bleu:.4}\t{chrf:.4}\n"));
    }
    let path = dir.join("report.tsv");
    std::fs::write(&path, &table)?;
    println!("report written to {}", path.display());
    Ok(())
}
