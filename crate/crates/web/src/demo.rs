//! Target-independent demo logic. The wasm bindings in `lib.rs` are thin
//! wrappers so that everything here also runs (and is tested) natively.

use keycap::data::{self, SampleRecord, SYNTH_DISEASES, SYNTH_LOCATIONS, SYNTH_SEVERITIES};
use keycap::decoder::GeneratorConfig;
use keycap::encoder::{attention_maps, EncoderConfig};
use keycap::metrics::{self, CiderCorpus};
use keycap::model::DecodeContext;
use keycap::text::{preprocess, Vocabulary};
use keycap::train::{batch_gradients, AdamConfig, AdamState, TrainConfig};
use keycap::{CaptionModel, PreparedSample, SeededRng, Tensor};
use serde::Serialize;

const FEATURE_SIZE: usize = 12;
const MAX_KEYWORDS: usize = 8;
const MAX_CAPTION: usize = 40;

#[derive(Serialize)]
pub struct Scores {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
}

/// Scores one candidate against newline-separated references. CIDEr
/// treats each reference line as its own document for the idf weights.
pub fn score_caption(candidate: &str, references: &str) -> Result<Scores, String> {
    let cand = preprocess(candidate);
    let refs: Vec<Vec<String>> = references
        .lines()
        .map(preprocess)
        .filter(|r| !r.is_empty())
        .collect();
    if refs.is_empty() {
        return Err("enter at least one reference".into());
    }
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = metrics::bleu(&cand, &refs, n + 1).map_err(|e| e.to_string())?;
    }
    // Document frequencies come from every synthetic template combination
    // plus the typed references as one more image.
    let mut docs: Vec<Vec<Vec<String>>> = data::synth_records(SYNTH_DISEASES.len() * 15, 0, data::SYNTH_MIN_FEATURE)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| vec![r.description_tokens()])
        .collect();
    docs.push(refs.clone());
    let cider = CiderCorpus::new(&docs, 4)
        .and_then(|c| c.score(&cand, &refs))
        .map_err(|e| e.to_string())?;
    Ok(Scores {
        bleu,
        rouge_l: metrics::rouge_l(&cand, &refs, 1.2).map_err(|e| e.to_string())?,
        meteor: metrics::meteor_multi(&cand, &refs),
        cider,
    })
}

#[derive(Serialize)]
pub struct AttentionView {
    pub tokens: Vec<String>,
    /// `[block][head][query][key]`, trimmed to the real tokens.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Serialize)]
pub struct Options {
    pub diseases: Vec<&'static str>,
    pub severities: Vec<&'static str>,
    pub locations: Vec<&'static str>,
}

pub fn options() -> Options {
    Options {
        diseases: SYNTH_DISEASES.iter().map(|d| d.0).collect(),
        severities: SYNTH_SEVERITIES.iter().map(|s| s.0).collect(),
        locations: SYNTH_LOCATIONS.iter().map(|l| l.trim_start_matches("in the ")).collect(),
    }
}

/// A small captioner trained in place on the synthetic corpus.
pub struct Demo {
    model: CaptionModel,
    vocab: Vocabulary,
    adam: AdamState,
    adam_cfg: AdamConfig,
    samples: Vec<PreparedSample>,
    rng: SeededRng,
    epochs: usize,
}

impl Demo {
    pub fn new(seed: u64) -> Result<Demo, String> {
        let records = data::synth_records(60, seed, FEATURE_SIZE).map_err(|e| e.to_string())?;
        let vocab = data::build_vocabulary(&records, 1).map_err(|e| e.to_string())?;
        let enc = EncoderConfig {
            vocab_size: vocab.len(),
            embed_size: 16,
            hidden_size: 16,
            num_blocks: 1,
            num_heads: 2,
            ffn_inner_size: 32,
            max_keyword_len: MAX_KEYWORDS,
            keyword_repr_size: 16,
            ..EncoderConfig::default()
        };
        let gen = GeneratorConfig {
            image_feature_size: FEATURE_SIZE,
            word_embed_size: 16,
            lstm_hidden: 32,
            max_gen_len: MAX_CAPTION,
            ..GeneratorConfig::default()
        };
        let mut rng = SeededRng::new(seed);
        let model = CaptionModel::new(enc, gen, &mut rng).map_err(|e| e.to_string())?;
        let train_cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        Ok(Demo {
            adam: AdamState::new(&model),
            adam_cfg: AdamConfig::from(&train_cfg),
            samples: data::prepare(&records, &vocab, MAX_KEYWORDS, MAX_CAPTION),
            model,
            vocab,
            rng,
            epochs: 0,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Runs one epoch of Adam with batches of 8 and returns the mean batch
    /// loss.
    pub fn train_epoch(&mut self) -> Result<f64, String> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(8) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &self.samples[i]).collect();
            let (loss, grads) = batch_gradients(&self.model, &batch).map_err(|e| e.to_string())?;
            self.adam
                .apply(&mut self.model, &grads, &self.adam_cfg)
                .map_err(|e| e.to_string())?;
            total += loss;
            batches += 1;
        }
        self.epochs += 1;
        Ok(total / batches as f64)
    }

    /// Captions a synthetic image (disease + location basis vectors, no
    /// noise) with the given keywords. The switches zero the keyword
    /// representation or the image feature before decoding.
    pub fn caption(
        &self,
        disease: usize,
        location: usize,
        keywords: &str,
        beams: usize,
        drop_keywords: bool,
        drop_image: bool,
    ) -> Result<String, String> {
        if disease >= SYNTH_DISEASES.len() || location >= SYNTH_LOCATIONS.len() {
            return Err("unknown disease or location".into());
        }
        let mut feature = vec![0.0; FEATURE_SIZE];
        feature[disease] = 1.0;
        feature[SYNTH_DISEASES.len() + location] = 1.0;
        let record = SampleRecord {
            id: "demo".into(),
            image_feature: Some(feature),
            pixels: None,
            width: None,
            height: None,
            keywords: keywords.split(',').map(str::to_string).collect(),
            description: "unused".into(),
            split: None,
        };
        let kw = record.keyword_tokens();
        if kw.is_empty() {
            return Err("enter at least one keyword".into());
        }
        let sample = &data::prepare(std::slice::from_ref(&record), &self.vocab, MAX_KEYWORDS, MAX_CAPTION)[0];
        let DecodeContext {
            mut image_feature,
            mut keyword_repr,
        } = self.model.context(&sample.image, &sample.keywords).map_err(|e| e.to_string())?;
        if drop_keywords {
            keyword_repr = Tensor::zeros(keyword_repr.shape());
        }
        if drop_image {
            image_feature = Tensor::zeros(image_feature.shape());
        }
        let ctx = DecodeContext {
            image_feature,
            keyword_repr,
        };
        let out = self.model.beam(&ctx, beams.max(1), false).map_err(|e| e.to_string())?;
        Ok(self.vocab.decode(&out.tokens).join(" "))
    }

    /// Encoder attention weights for comma-separated keywords.
    pub fn attention(&self, keywords: &str) -> Result<AttentionView, String> {
        let kw: Vec<Vec<String>> = keywords.split(',').map(preprocess).filter(|k| !k.is_empty()).collect();
        if kw.is_empty() {
            return Err("enter at least one keyword".into());
        }
        let seq = self.vocab.encode_keywords(&kw, MAX_KEYWORDS);
        let maps = attention_maps(&self.model.encoder_cfg, &self.model.params.encoder, &seq).map_err(|e| e.to_string())?;
        let n = seq.true_length;
        let tokens = seq.ids[..n]
            .iter()
            .map(|&id| self.vocab.token(id).unwrap_or("?").to_string())
            .collect();
        let weights = maps
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|w| (0..n).map(|q| w.row_slice(q)[..n].to_vec()).collect())
                    .collect()
            })
            .collect();
        Ok(AttentionView { tokens, weights })
    }
}
