//! Run configuration: `key=value` lines with `#` comments, unknown keys
//! rejected. Defaults carry the reference training settings (150 epochs,
//! batch 8, Adam at 1e-6 with weight decay 1e-5); desk-scale runs override
//! through the same keys.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gcn::GcnVariant;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Views are single-channel images for the built-in CNN.
    Image,
    /// Views are precomputed feature maps from an external backbone.
    Precomputed,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub graph: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub min_freq: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub feature_mode: FeatureMode,
    pub gcn_hidden: usize,
    pub n_gcn_layers: usize,
    pub gcn_variant: GcnVariant,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub max_sentences: usize,
    pub max_sentence_len: usize,
    pub stop_threshold: f64,
    pub lambda_stop: f64,
    pub max_steps: usize,
    pub stage2_max_steps: usize,
    pub random_embeddings: bool,
    pub stage2_eval_every: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            corpus: PathBuf::new(),
            graph: PathBuf::new(),
            embeddings: None,
            lexicon: None,
            out_dir: PathBuf::from("out"),
            epochs: 150,
            stage2_epochs: 150,
            batch_size: 8,
            lr: 1e-6,
            stage2_lr: 1e-6,
            weight_decay: 1e-5,
            seed: 0,
            noise_sigma: 0.0,
            min_freq: 3,
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
            feature_mode: FeatureMode::Image,
            gcn_hidden: 256,
            n_gcn_layers: 3,
            gcn_variant: GcnVariant::Full,
            decoder_hidden: 512,
            attention_dim: 128,
            embedding_dim: 200,
            max_sentences: 7,
            max_sentence_len: 30,
            stop_threshold: 0.5,
            lambda_stop: 1.0,
            max_steps: 0,
            stage2_max_steps: 0,
            random_embeddings: false,
            stage2_eval_every: 10,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::Parse {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key=value` assignment; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "corpus" => self.corpus = PathBuf::from(value),
            "graph" => self.graph = PathBuf::from(value),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "lexicon" => self.lexicon = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "epochs" => {
                self.epochs = num(key, value)?;
                self.stage2_epochs = self.epochs;
            }
            "stage2_epochs" => self.stage2_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => {
                self.lr = num(key, value)?;
                self.stage2_lr = self.lr;
            }
            "stage2_lr" => self.stage2_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "min_freq" => self.min_freq = num(key, value)?,
            "train_ratio" => self.train_ratio = num(key, value)?,
            "val_ratio" => self.val_ratio = num(key, value)?,
            "test_ratio" => self.test_ratio = num(key, value)?,
            "feature_mode" => {
                self.feature_mode = match value {
                    "image" => FeatureMode::Image,
                    "precomputed" => FeatureMode::Precomputed,
                    other => {
                        return Err(Error::Config(format!(
                            "feature_mode must be image|precomputed, got {other:?}"
                        )))
                    }
                }
            }
            "gcn_hidden" => self.gcn_hidden = num(key, value)?,
            "n_gcn_layers" => self.n_gcn_layers = num(key, value)?,
            "gcn_variant" => {
                self.gcn_variant = match value {
                    "full" => GcnVariant::Full,
                    "message-only" => GcnVariant::MessageOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "gcn_variant must be full|message-only, got {other:?}"
                        )))
                    }
                }
            }
            "decoder_hidden" => self.decoder_hidden = num(key, value)?,
            "attention_dim" => self.attention_dim = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "max_sentences" => self.max_sentences = num(key, value)?,
            "max_sentence_len" => self.max_sentence_len = num(key, value)?,
            "stop_threshold" => self.stop_threshold = num(key, value)?,
            "lambda_stop" => self.lambda_stop = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "stage2_max_steps" => self.stage2_max_steps = num(key, value)?,
            "random_embeddings" => self.random_embeddings = num(key, value)?,
            "stage2_eval_every" => self.stage2_eval_every = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stage2_eval_every == 0 {
            return Err(Error::Config("stage2_eval_every must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 150);
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.lr, 1e-6);
        assert_eq!(c.weight_decay, 1e-5);
        assert_eq!(c.embedding_dim, 200);
        assert_eq!(c.gcn_hidden, 256);
        assert_eq!(c.n_gcn_layers, 3);
    }

    #[test]
    fn parses_file_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(
            &p,
            "# toy setup\ncorpus=data/reports.jsonl\nepochs=12\nlr=0.001 # fast\nseed=9\nfeature_mode=image\n",
        )
        .unwrap();
        let c = TrainConfig::from_file(&p).unwrap();
        assert_eq!(c.epochs, 12);
        assert_eq!(c.stage2_epochs, 12);
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.seed, 9);
        assert_eq!(c.corpus, PathBuf::from("data/reports.jsonl"));
    }

    #[test]
    fn rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "learning_rate=0.1\n").unwrap();
        let err = TrainConfig::from_file(&p).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = TrainConfig::default();
        assert!(c.set("epochs", "many").is_err());
        assert!(c.set("feature_mode", "weird").is_err());
    }
}
