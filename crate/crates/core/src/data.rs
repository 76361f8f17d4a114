//! Dataset records (line-delimited JSON), split assignment, the synthetic
//! corpus generator and conversion to model inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::ImageInput;
use crate::error::{Error, Result};
use crate::model::PreparedSample;
use crate::tensor::SeededRng;
use crate::text::{preprocess, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    pub keywords: Vec<String>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl SampleRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("field id is empty".into());
        }
        match (&self.image_feature, &self.pixels) {
            (Some(_), Some(_)) => return Err("only one of image_feature and pixels may be present".into()),
            (None, None) => return Err("missing field image_feature or pixels".into()),
            (Some(f), None) if f.is_empty() => return Err("field image_feature is empty".into()),
            (None, Some(p)) => match (self.width, self.height) {
                (Some(w), Some(h)) if w * h == p.len() && !p.is_empty() => {}
                (Some(w), Some(h)) => {
                    return Err(format!("field pixels has {} values, width*height is {}", p.len(), w * h))
                }
                _ => return Err("pixels need width and height".into()),
            },
            _ => {}
        }
        let values = self.image_feature.iter().chain(&self.pixels).flatten();
        if values.clone().any(|v| !v.is_finite()) {
            return Err("image values must be finite".into());
        }
        if self.keywords.is_empty() || self.keywords.iter().all(|k| preprocess(k).is_empty()) {
            return Err("field keywords is empty".into());
        }
        if preprocess(&self.description).is_empty() {
            return Err("field description is empty".into());
        }
        Ok(())
    }

    pub fn image(&self) -> ImageInput {
        match (&self.image_feature, &self.pixels) {
            (Some(f), _) => ImageInput::Feature(f.clone()),
            (None, Some(p)) => ImageInput::Pixels(p.clone()),
            (None, None) => ImageInput::Feature(Vec::new()),
        }
    }

    pub fn keyword_tokens(&self) -> Vec<Vec<String>> {
        self.keywords.iter().map(|k| preprocess(k)).filter(|k| !k.is_empty()).collect()
    }

    pub fn description_tokens(&self) -> Vec<String> {
        preprocess(&self.description)
    }
}

/// Parses line-delimited records. Blank lines are skipped; `path` is only
/// used in error messages.
pub fn parse_dataset(text: &str, path: &Path, seed: u64) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |message: String| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| data_err(e.to_string()))?;
        record.validate().map_err(data_err)?;
        if !seen.insert(record.id.clone()) {
            return Err(data_err(format!("duplicate id {:?}", record.id)));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            line: 0,
            message: "dataset has no records".into(),
        });
    }
    assign_splits(&mut records, seed);
    Ok(records)
}

pub fn load_dataset(path: &Path, seed: u64) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading dataset {}", path.display()), e))?;
    parse_dataset(&text, path, seed)
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Gives every record without a split one of train/val/test: records are
/// ordered by a seeded hash of their id, then the first 60% (rounded down)
/// go to train, the next 20% (rounded down) to val and the rest to test.
pub fn assign_splits(records: &mut [SampleRecord], seed: u64) {
    let mut open: Vec<(usize, [u8; 32])> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split.is_none())
        .map(|(i, r)| (i, split_key(seed, &r.id)))
        .collect();
    open.sort_by(|a, b| a.1.cmp(&b.1).then(records[a.0].id.cmp(&records[b.0].id)));
    let n = open.len();
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    for (rank, (i, _)) in open.into_iter().enumerate() {
        records[i].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }
}

pub fn by_split(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == Some(split)).cloned().collect()
}

/// Vocabulary over the keywords and descriptions of `records`.
pub fn build_vocabulary(records: &[SampleRecord], min_count: usize) -> Result<Vocabulary> {
    let mut corpus = Vec::new();
    for r in records {
        corpus.push(r.description_tokens());
        corpus.extend(r.keyword_tokens());
    }
    Vocabulary::build(&corpus, min_count)
}

pub fn prepare(
    records: &[SampleRecord],
    vocab: &Vocabulary,
    max_keyword_len: usize,
    max_caption_len: usize,
) -> Vec<PreparedSample> {
    records
        .iter()
        .map(|r| PreparedSample {
            id: r.id.clone(),
            image: r.image(),
            keywords: vocab.encode_keywords(&r.keyword_tokens(), max_keyword_len),
            caption: vocab.encode(&r.description_tokens(), max_caption_len, true),
        })
        .collect()
}

/// Disease keyword and its description phrase.
pub const SYNTH_DISEASES: [(&str, &str); 4] = [
    ("retinopathy", "the fundus shows diabetic retinopathy with scattered microaneurysms"),
    ("glaucoma", "the optic disc shows glaucoma with an enlarged cup"),
    ("degeneration", "the macula shows degeneration with drusen deposits"),
    ("detachment", "the retina shows a detachment with a visible fold"),
];

/// Severity keyword and its phrase. Severity appears only in the keywords.
pub const SYNTH_SEVERITIES: [(&str, &str); 3] = [
    ("mild", "early changes so routine review is advised"),
    ("moderate", "progressing damage so closer monitoring is advised"),
    ("severe", "advanced damage so urgent referral is required"),
];

/// Location phrases. Location appears only in the image feature.
pub const SYNTH_LOCATIONS: [&str; 5] = [
    "in the superior region",
    "in the inferior region",
    "in the temporal region",
    "in the nasal region",
    "in the central region",
];

/// Smallest image feature size accepted by [`synth_records`].
pub const SYNTH_MIN_FEATURE: usize = SYNTH_DISEASES.len() + SYNTH_LOCATIONS.len();

/// Builds `n` synthetic records. Record `i` has disease `i mod 4`, severity
/// `i mod 3` and location `i mod 5`. The image feature is the disease basis
/// vector plus the location basis vector plus N(0, 0.05²) noise; the
/// keywords are the disease and severity keywords.
pub fn synth_records(n: usize, seed: u64, feature_size: usize) -> Result<Vec<SampleRecord>> {
    if n < 4 {
        return Err(Error::Input(format!("synthetic corpus needs at least 4 records, got {n}")));
    }
    if feature_size < SYNTH_MIN_FEATURE {
        return Err(Error::Config(format!(
            "synthetic image features need at least {SYNTH_MIN_FEATURE} dimensions, got {feature_size}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let width = n.to_string().len().max(4);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (disease, disease_text) = SYNTH_DISEASES[i % SYNTH_DISEASES.len()];
        let (severity, severity_text) = SYNTH_SEVERITIES[i % SYNTH_SEVERITIES.len()];
        let loc = i % SYNTH_LOCATIONS.len();
        let mut feature: Vec<f64> = (0..feature_size).map(|_| rng.normal(0.0, 0.05)).collect();
        feature[i % SYNTH_DISEASES.len()] += 1.0;
        feature[SYNTH_DISEASES.len() + loc] += 1.0;
        out.push(SampleRecord {
            id: format!("s{i:0width$}"),
            image_feature: Some(feature),
            pixels: None,
            width: None,
            height: None,
            keywords: vec![disease.to_string(), severity.to_string()],
            description: format!("{disease_text} {} {severity_text}", SYNTH_LOCATIONS[loc]),
            split: None,
        });
    }
    Ok(out)
}

pub fn records_to_jsonl(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Input(format!("encoding record {}: {e}", r.id)))?;
        writeln!(out, "{line}").expect("writing to a String");
    }
    Ok(out)
}

/// Writes [`synth_records`] to `path` in the dataset format.
pub fn synth_generate(n: usize, seed: u64, feature_size: usize, path: &Path) -> Result<()> {
    let text = records_to_jsonl(&synth_records(n, seed, feature_size)?)?;
    crate::pipeline::write_file(path, text.as_bytes())
}

/// Reference token lists per record id.
pub fn references(records: &[SampleRecord]) -> BTreeMap<String, Vec<Vec<String>>> {
    records
        .iter()
        .map(|r| (r.id.clone(), vec![r.description_tokens()]))
        .collect()
}
