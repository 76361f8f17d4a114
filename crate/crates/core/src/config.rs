//! Run configuration as flat `key=value` text with dotted keys.
//!
//! ```text
//! # comment
//! model.embed_size = 64
//! train.epochs = 2
//! ```
//!
//! Every key has a default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decoder::GeneratorConfig;
use crate::encoder::{Activation, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub dataset: PathBuf,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub captions: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beams: usize,
    pub length_normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub rouge_beta: f64,
    pub bleu_smoothing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub decode: DecodeConfig,
    pub metrics: MetricsConfig,
    pub min_count: usize,
    pub max_caption_len: usize,
    pub synth_records: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            encoder: EncoderConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            },
            paths: Paths {
                dataset: "data/synth.jsonl".into(),
                vocab: "out/vocab.txt".into(),
                checkpoint: "out/model.kcap".into(),
                log: "out/train.log".into(),
                captions: "out/captions.txt".into(),
                report: "out/report.json".into(),
            },
            decode: DecodeConfig {
                beams: 3,
                length_normalize: false,
            },
            metrics: MetricsConfig {
                rouge_beta: 1.2,
                bleu_smoothing: false,
            },
            min_count: 2,
            max_caption_len: 50,
            synth_records: 64,
        }
    }
}

fn parse<T: FromStr>(entries: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = entries
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

/// Model-shape keys shared by the config file and the checkpoint echo.
pub fn model_entries(enc: &EncoderConfig, gen: &GeneratorConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("model.embed_size", enc.embed_size.to_string());
    put("model.hidden_size", enc.hidden_size.to_string());
    put("model.num_blocks", enc.num_blocks.to_string());
    put("model.num_heads", enc.num_heads.to_string());
    put("model.ffn_inner_size", enc.ffn_inner_size.to_string());
    put("model.max_keyword_len", enc.max_keyword_len.to_string());
    put("model.ln_eps", enc.eps.to_string());
    put("model.keyword_repr_size", enc.keyword_repr_size.to_string());
    put("model.reinforce_layers", enc.reinforce_layers.to_string());
    put("model.activation", enc.activation.name().to_string());
    put("model.residual", enc.residual.to_string());
    put("model.positional", enc.positional.to_string());
    put(
        "model.pooling",
        match enc.pooling {
            Pooling::Mean => "mean",
            Pooling::Last => "last",
        }
        .to_string(),
    );
    put("model.image_feature_size", gen.image_feature_size.to_string());
    put("model.word_embed_size", gen.word_embed_size.to_string());
    put("model.lstm_hidden", gen.lstm_hidden.to_string());
    put("model.bidirectional_training", gen.bidirectional_training.to_string());
    put("model.share_embeddings", gen.share_embeddings.to_string());
    put("model.pixel_input_size", gen.pixel_input_size.to_string());
    m
}

/// Inverse of [`model_entries`]. `vocab_size` and `max_gen_len` are not
/// model-shape keys and come from the caller.
pub fn model_from_entries(
    entries: &BTreeMap<String, String>,
    vocab_size: usize,
    max_gen_len: usize,
) -> Result<(EncoderConfig, GeneratorConfig)> {
    let activation: String = parse(entries, "model.activation")?;
    let pooling: String = parse(entries, "model.pooling")?;
    let enc = EncoderConfig {
        vocab_size,
        embed_size: parse(entries, "model.embed_size")?,
        hidden_size: parse(entries, "model.hidden_size")?,
        num_blocks: parse(entries, "model.num_blocks")?,
        num_heads: parse(entries, "model.num_heads")?,
        ffn_inner_size: parse(entries, "model.ffn_inner_size")?,
        max_keyword_len: parse(entries, "model.max_keyword_len")?,
        eps: parse(entries, "model.ln_eps")?,
        keyword_repr_size: parse(entries, "model.keyword_repr_size")?,
        reinforce_layers: parse(entries, "model.reinforce_layers")?,
        activation: Activation::parse(&activation)
            .ok_or_else(|| Error::Config(format!("unknown activation {activation:?}")))?,
        residual: parse(entries, "model.residual")?,
        positional: parse(entries, "model.positional")?,
        pooling: match pooling.as_str() {
            "mean" => Pooling::Mean,
            "last" => Pooling::Last,
            other => return Err(Error::Config(format!("unknown pooling {other:?}"))),
        },
    };
    let gen = GeneratorConfig {
        image_feature_size: parse(entries, "model.image_feature_size")?,
        word_embed_size: parse(entries, "model.word_embed_size")?,
        lstm_hidden: parse(entries, "model.lstm_hidden")?,
        max_gen_len,
        bidirectional_training: parse(entries, "model.bidirectional_training")?,
        share_embeddings: parse(entries, "model.share_embeddings")?,
        pixel_input_size: parse(entries, "model.pixel_input_size")?,
    };
    Ok((enc, gen))
}

impl RunConfig {
    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let mut m = model_entries(&self.encoder, &self.generator);
        let path = |p: &Path| p.display().to_string();
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data.path", path(&self.paths.dataset)),
            ("vocab.path", path(&self.paths.vocab)),
            ("checkpoint.path", path(&self.paths.checkpoint)),
            ("log.path", path(&self.paths.log)),
            ("captions.path", path(&self.paths.captions)),
            ("report.path", path(&self.paths.report)),
            ("vocab.min_count", self.min_count.to_string()),
            ("text.max_caption_len", self.max_caption_len.to_string()),
            ("synth.records", self.synth_records.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.grad_clip", t.grad_clip.unwrap_or(0.0).to_string()),
            ("decode.beams", self.decode.beams.to_string()),
            ("decode.max_len", self.generator.max_gen_len.to_string()),
            ("decode.length_normalize", self.decode.length_normalize.to_string()),
            ("metrics.rouge_beta", self.metrics.rouge_beta.to_string()),
            ("metrics.bleu_smoothing", self.metrics.bleu_smoothing.to_string()),
        ];
        for (k, v) in pairs {
            m.insert(k.to_string(), v);
        }
        m
    }

    pub fn from_entries(entries: &BTreeMap<String, String>) -> Result<Self> {
        let seed: u64 = parse(entries, "seed")?;
        let max_gen_len: usize = parse(entries, "decode.max_len")?;
        // The vocabulary size is only known once the vocabulary is built.
        let (encoder, generator) = model_from_entries(entries, EncoderConfig::default().vocab_size, max_gen_len)?;
        let grad_clip: f64 = parse(entries, "train.grad_clip")?;
        let cfg = RunConfig {
            seed,
            encoder,
            generator,
            train: TrainConfig {
                epochs: parse(entries, "train.epochs")?,
                batch_size: parse(entries, "train.batch_size")?,
                learning_rate: parse(entries, "train.learning_rate")?,
                beta1: parse(entries, "train.beta1")?,
                beta2: parse(entries, "train.beta2")?,
                eps: parse(entries, "train.eps")?,
                seed,
                grad_clip: (grad_clip > 0.0).then_some(grad_clip),
            },
            paths: Paths {
                dataset: parse::<String>(entries, "data.path")?.into(),
                vocab: parse::<String>(entries, "vocab.path")?.into(),
                checkpoint: parse::<String>(entries, "checkpoint.path")?.into(),
                log: parse::<String>(entries, "log.path")?.into(),
                captions: parse::<String>(entries, "captions.path")?.into(),
                report: parse::<String>(entries, "report.path")?.into(),
            },
            decode: DecodeConfig {
                beams: parse(entries, "decode.beams")?,
                length_normalize: parse(entries, "decode.length_normalize")?,
            },
            metrics: MetricsConfig {
                rouge_beta: parse(entries, "metrics.rouge_beta")?,
                bleu_smoothing: parse(entries, "metrics.bleu_smoothing")?,
            },
            min_count: parse(entries, "vocab.min_count")?,
            max_caption_len: parse(entries, "text.max_caption_len")?,
            synth_records: parse(entries, "synth.records")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decode.beams < 1 {
            return Err(Error::Config("decode.beams must be at least 1".into()));
        }
        if self.max_caption_len < 2 {
            return Err(Error::Config("text.max_caption_len must be at least 2".into()));
        }
        if self.min_count < 1 {
            return Err(Error::Config("vocab.min_count must be at least 1".into()));
        }
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()?;
        self.generator.validate()?;
        self.train.validate()
    }

    /// Parses config text on top of the defaults, then applies `overrides`
    /// (same keys, e.g. from the command line).
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries = RunConfig::default().to_entries();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            set_entry(&mut entries, k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        for (k, v) in overrides {
            set_entry(&mut entries, k, v)?;
        }
        RunConfig::from_entries(&entries)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?,
            None => String::new(),
        };
        RunConfig::parse(&text, overrides)
    }

    /// Serializes every key, sorted.
    pub fn to_text(&self) -> String {
        self.to_entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

fn set_entry(entries: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<()> {
    match entries.get_mut(key) {
        Some(slot) => {
            *slot = value.to_string();
            Ok(())
        }
        None => Err(Error::Config(format!("unknown configuration key {key:?}"))),
    }
}
