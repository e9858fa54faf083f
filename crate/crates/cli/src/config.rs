//! Experiment configuration: one flat key=value file covering data
//! generation, the model, and every training stage.
//!
//! Values resolve in layers: built-in defaults, then the `--config` file,
//! then repeated `--set key=value` flags, then the dedicated flags
//! (`--seed`, `--out`, stage-specific ones). Every run directory receives
//! the fully resolved configuration as `config.resolved`, which is itself
//! loadable, so any run can be reproduced from its artifacts alone.

use std::path::{Path, PathBuf};

use minimt::data::SyntheticTask;
use minimt::error::{Error, Result};
use minimt::model::ModelConfig;
use minimt::train::TrainConfig;

/// Everything a command needs: paths, generation knobs, model shape, and
/// per-stage training settings under one global seed.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Corpus and vocabulary directory.
    pub data_dir: PathBuf,
    /// Root for run outputs (checkpoints, metrics, reports).
    pub out_dir: PathBuf,
    /// Which stage produced a resolved file; informational.
    pub stage: Option<String>,
    pub task: SyntheticTask,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub model: ModelConfig,
    pub mlm: TrainConfig,
    pub base: TrainConfig,
    pub ckd: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            seed: 17,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            stage: None,
            task: SyntheticTask::Cipher,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            len_min: 5,
            len_max: 12,
            model: ModelConfig::default(),
            mlm: TrainConfig::mlm_defaults(),
            base: TrainConfig::base_defaults(),
            ckd: TrainConfig::ckd_defaults(),
        };
        cfg.set_seed(17);
        cfg
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for config key {key}")))
}

impl ExperimentConfig {
    /// One global seed; the stage tags inside the training code keep the
    /// stages' random streams apart.
    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.mlm.seed = seed;
        self.base.seed = seed;
        self.ckd.seed = seed;
    }

    fn stage_config_mut(&mut self, stage: &str) -> &mut TrainConfig {
        match stage {
            "mlm" => &mut self.mlm,
            "base" => &mut self.base,
            "ckd" => &mut self.ckd,
            _ => unreachable!("caller matched the stage prefix"),
        }
    }

    /// Apply one key=value setting. Unknown keys are config errors so a
    /// typo cannot silently fall back to a default.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some((stage, field)) = key.split_once('.') {
            if matches!(stage, "mlm" | "base" | "ckd") {
                match field {
                    "lr" => self.stage_config_mut(stage).lr = parse_num(key, value)?,
                    "max_updates" => {
                        self.stage_config_mut(stage).max_updates = parse_num(key, value)?
                    }
                    "checkpoint_every" => {
                        self.stage_config_mut(stage).checkpoint_every = parse_num(key, value)?
                    }
                    "keep_last_k" => {
                        self.stage_config_mut(stage).keep_last_k = parse_num(key, value)?
                    }
                    "batch_tokens" => {
                        self.stage_config_mut(stage).batch_tokens = parse_num(key, value)?
                    }
                    "alpha" if stage == "ckd" => self.ckd.alpha = parse_num(key, value)?,
                    "n_teachers" if stage == "ckd" => {
                        self.ckd.n_teachers = parse_num(key, value)?
                    }
                    _ => return Err(Error::config(format!("unknown config key {key}"))),
                }
                return Ok(());
            }
        }
        match key {
            "seed" => {
                let seed = parse_num(key, value)?;
                self.set_seed(seed);
            }
            "data" => self.data_dir = PathBuf::from(value),
            "out" => self.out_dir = PathBuf::from(value),
            "stage" => self.stage = Some(value.to_string()),
            "task" => self.task = SyntheticTask::parse(value)?,
            "n_train" => self.n_train = parse_num(key, value)?,
            "n_valid" => self.n_valid = parse_num(key, value)?,
            "n_test" => self.n_test = parse_num(key, value)?,
            "len_min" => self.len_min = parse_num(key, value)?,
            "len_max" => self.len_max = parse_num(key, value)?,
            "vocab_size" => self.model.vocab_size = parse_num(key, value)?,
            "d_model" => self.model.d_model = parse_num(key, value)?,
            "n_heads" => self.model.n_heads = parse_num(key, value)?,
            "n_enc_layers" => self.model.n_enc_layers = parse_num(key, value)?,
            "n_dec_layers" => self.model.n_dec_layers = parse_num(key, value)?,
            "d_ff" => self.model.d_ff = parse_num(key, value)?,
            "max_seq_len" => self.model.max_seq_len = parse_num(key, value)?,
            "dropout" => self.model.dropout = parse_num(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Parse key=value text: one setting per line, full-line `#` comments
    /// and blank lines allowed.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("{origin} line {}: expected key = value", lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("{origin} line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Serialize every key in a fixed order. The result parses back to an
    /// identical configuration.
    pub fn to_text(&self) -> String {
        let mut s = format!("# minimt {}\n", env!("CARGO_PKG_VERSION"));
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("seed", self.seed.to_string());
        if let Some(stage) = &self.stage {
            kv("stage", stage.clone());
        }
        kv("data", self.data_dir.display().to_string());
        kv("out", self.out_dir.display().to_string());
        kv("task", self.task.as_str().to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_valid", self.n_valid.to_string());
        kv("n_test", self.n_test.to_string());
        kv("len_min", self.len_min.to_string());
        kv("len_max", self.len_max.to_string());
        kv("vocab_size", self.model.vocab_size.to_string());
        kv("d_model", self.model.d_model.to_string());
        kv("n_heads", self.model.n_heads.to_string());
        kv("n_enc_layers", self.model.n_enc_layers.to_string());
        kv("n_dec_layers", self.model.n_dec_layers.to_string());
        kv("d_ff", self.model.d_ff.to_string());
        kv("max_seq_len", self.model.max_seq_len.to_string());
        kv("dropout", self.model.dropout.to_string());
        for (name, tc) in [("mlm", &self.mlm), ("base", &self.base), ("ckd", &self.ckd)] {
            kv(&format!("{name}.lr"), tc.lr.to_string());
            kv(&format!("{name}.max_updates"), tc.max_updates.to_string());
            kv(&format!("{name}.checkpoint_every"), tc.checkpoint_every.to_string());
            kv(&format!("{name}.keep_last_k"), tc.keep_last_k.to_string());
            kv(&format!("{name}.batch_tokens"), tc.batch_tokens.to_string());
        }
        kv("ckd.alpha", self.ckd.alpha.to_string());
        kv("ckd.n_teachers", self.ckd.n_teachers.to_string());
        s
    }

    /// Write `config.resolved` into `dir`, stamped with the stage name.
    pub fn write_resolved(&self, dir: &Path, stage: &str) -> Result<()> {
        let mut stamped = self.clone();
        stamped.stage = Some(stage.to_string());
        std::fs::write(dir.join("config.resolved"), stamped.to_text())?;
        Ok(())
    }
}
