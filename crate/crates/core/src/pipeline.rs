//! The train / generate / evaluate / synth commands.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::{self, RunConfig};
use crate::data::{self, SampleRecord, Split};
use crate::decoder::ImageInput;
use crate::error::{Error, Result};
use crate::metrics::{corpus_report, MetricReport, ReportOptions};
use crate::model::{CaptionModel, PreparedSample};
use crate::tensor::SeededRng;
use crate::text::{preprocess, Vocabulary};
use crate::train::{self, LogRecord};

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn check_images(cfg: &RunConfig, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        let (found, key, expected) = match r.image() {
            ImageInput::Feature(f) => (f.len(), "model.image_feature_size", cfg.generator.image_feature_size),
            ImageInput::Pixels(p) => (p.len(), "model.pixel_input_size", cfg.generator.pixel_input_size),
        };
        if found != expected {
            return Err(Error::Config(format!(
                "record {} has {found} image values but {key} is {expected}",
                r.id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub vocab_size: usize,
    pub parameters: usize,
    pub log: Vec<LogRecord>,
}

/// Builds the vocabulary from the train split, trains, and writes the
/// vocabulary, the best-validation checkpoint and the training log.
pub fn cmd_train(cfg: &RunConfig, mut on_record: impl FnMut(&LogRecord)) -> Result<TrainSummary> {
    let records = data::load_dataset(&cfg.paths.dataset, cfg.seed)?;
    check_images(cfg, &records)?;
    let train_records = data::by_split(&records, Split::Train);
    let val_records = data::by_split(&records, Split::Val);
    if train_records.is_empty() || val_records.is_empty() {
        return Err(Error::Input(format!(
            "dataset {} needs nonempty train and val splits",
            cfg.paths.dataset.display()
        )));
    }
    let vocab = data::build_vocabulary(&train_records, cfg.min_count)?;
    vocab.save(&cfg.paths.vocab)?;

    let mut encoder = cfg.encoder.clone();
    encoder.vocab_size = vocab.len();
    let model = CaptionModel::new(encoder, cfg.generator.clone(), &mut SeededRng::new(cfg.seed))?;
    let parameters = model.parameter_count();
    let max_kw = cfg.encoder.max_keyword_len;
    let train_set = data::prepare(&train_records, &vocab, max_kw, cfg.max_caption_len);
    let val_set = data::prepare(&val_records, &vocab, max_kw, cfg.max_caption_len);

    let outcome = train::train(model, &train_set, &val_set, &cfg.train, &mut on_record)?;
    let log_text: String = outcome.log.iter().map(|r| format!("{r}\n")).collect();
    write_file(&cfg.paths.log, log_text.as_bytes())?;
    Checkpoint::capture(&outcome.best, &outcome.best_adam, &vocab.content_hash()).save(&cfg.paths.checkpoint)?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        vocab_size: vocab.len(),
        parameters,
        log: outcome.log,
    })
}

/// Loads the checkpoint and vocabulary named by `cfg`, checking that both
/// agree with each other and with the configured model dimensions.
pub fn load_trained(cfg: &RunConfig) -> Result<(CaptionModel, Vocabulary)> {
    let path = &cfg.paths.checkpoint;
    if !path.exists() {
        return Err(Error::Input(format!(
            "checkpoint {} does not exist; run `keycap train` first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let expected = config::model_entries(&cfg.encoder, &cfg.generator);
    for (key, want) in &expected {
        match ck.config.get(key) {
            Some(have) if have == want => {}
            Some(have) => {
                return Err(Error::Config(format!(
                    "config has {key}={want} but checkpoint {} has {key}={have}",
                    path.display()
                )))
            }
            None => {
                return Err(Error::Config(format!(
                    "config has {key}={want} but checkpoint {} lacks it",
                    path.display()
                )))
            }
        }
    }
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    if vocab.content_hash() != ck.vocab_hash {
        return Err(Error::Config(format!(
            "vocabulary {} does not match checkpoint {}",
            cfg.paths.vocab.display(),
            path.display()
        )));
    }
    let (model, _) = ck.restore(cfg.generator.max_gen_len)?;
    if model.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary size {} differs from vocabulary {} with {} tokens",
            model.vocab_size(),
            cfg.paths.vocab.display(),
            vocab.len()
        )));
    }
    Ok((model, vocab))
}

/// Beam-decodes every sample. Work is spread over threads; the output keeps
/// the input order.
pub fn decode_all(
    model: &CaptionModel,
    vocab: &Vocabulary,
    samples: &[PreparedSample],
    beams: usize,
    length_normalize: bool,
) -> Result<Vec<(String, String)>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len().max(1));
    let chunk = samples.len().div_ceil(threads).max(1);
    let decode_one = |s: &PreparedSample| -> Result<(String, String)> {
        let ctx = model.context(&s.image, &s.keywords)?;
        let out = model.beam(&ctx, beams, length_normalize)?;
        Ok((s.id.clone(), vocab.decode(&out.tokens).join(" ")))
    };
    let parts: Vec<Result<Vec<(String, String)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(decode_one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decoder thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn test_records(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let records = data::load_dataset(&cfg.paths.dataset, cfg.seed)?;
    check_images(cfg, &records)?;
    let mut test = data::by_split(&records, Split::Test);
    if test.is_empty() {
        return Err(Error::Input(format!("dataset {} has no test records", cfg.paths.dataset.display())));
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(test)
}

fn generate_captions(cfg: &RunConfig, test: &[SampleRecord]) -> Result<Vec<(String, String)>> {
    let (model, vocab) = load_trained(cfg)?;
    let samples = data::prepare(test, &vocab, model.encoder_cfg.max_keyword_len, cfg.max_caption_len);
    decode_all(&model, &vocab, &samples, cfg.decode.beams, cfg.decode.length_normalize)
}

pub fn captions_to_text(captions: &[(String, String)]) -> String {
    captions.iter().map(|(id, c)| format!("{id}\t{c}\n")).collect()
}

pub fn parse_captions(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, caption) = line.split_once('\t').ok_or_else(|| err("expected <id>\\t<caption>".into()))?;
        if out.insert(id.to_string(), caption.to_string()).is_some() {
            return Err(err(format!("duplicate id {id:?}")));
        }
    }
    Ok(out)
}

/// Decodes every test record with the configured beam width and writes
/// `<id>\t<caption>` lines ordered by id.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<(String, String)>> {
    let test = test_records(cfg)?;
    let captions = generate_captions(cfg, &test)?;
    write_file(&cfg.paths.captions, captions_to_text(&captions).as_bytes())?;
    Ok(captions)
}

/// Scores test-split captions against the ground-truth descriptions and
/// writes the report. Requires a checkpoint. If the captions file exists it
/// is scored as is; otherwise captions are generated and written first.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricReport> {
    let test = test_records(cfg)?;
    load_trained(cfg)?;
    let captions: BTreeMap<String, String> = if cfg.paths.captions.exists() {
        let text = std::fs::read_to_string(&cfg.paths.captions)
            .map_err(|e| Error::io(format!("reading {}", cfg.paths.captions.display()), e))?;
        parse_captions(&text, &cfg.paths.captions)?
    } else {
        let generated = generate_captions(cfg, &test)?;
        write_file(&cfg.paths.captions, captions_to_text(&generated).as_bytes())?;
        generated.into_iter().collect()
    };
    let refs = data::references(&test);
    let mut pairs = Vec::with_capacity(test.len());
    for (id, references) in refs {
        let caption = captions.get(&id).ok_or_else(|| {
            Error::Input(format!("{} has no caption for test record {id}", cfg.paths.captions.display()))
        })?;
        pairs.push((preprocess(caption), references));
    }
    let report = corpus_report(
        &pairs,
        ReportOptions {
            rouge_beta: cfg.metrics.rouge_beta,
            bleu_smoothing: cfg.metrics.bleu_smoothing,
        },
    )?;
    let mut json = serde_json::to_string_pretty(&report).map_err(|e| Error::Input(format!("encoding report: {e}")))?;
    json.push('\n');
    write_file(&cfg.paths.report, json.as_bytes())?;
    Ok(report)
}

/// Writes a synthetic dataset of `synth.records` records to `data.path`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    data::synth_generate(
        cfg.synth_records,
        cfg.seed,
        cfg.generator.image_feature_size,
        &cfg.paths.dataset,
    )
}
