//! Caption metrics: BLEU, CIDEr, ROUGE-L and METEOR over token sequences.
//!
//! All maps are ordered so that floating-point reductions happen in a fixed
//! order and reports are bit-stable across runs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tokens = [String];

/// Counts of all n-grams of one order in a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramCounts {
    pub order: usize,
    pub counts: BTreeMap<Vec<String>, usize>,
}

impl NGramCounts {
    pub fn new(tokens: &Tokens, order: usize) -> Self {
        let mut counts = BTreeMap::new();
        if order > 0 && tokens.len() >= order {
            for w in tokens.windows(order) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        NGramCounts { order, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }
}

/// Sufficient statistics for BLEU, summable across a corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BleuStats {
    /// Clipped matches per order (index 0 is unigrams).
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

/// Length of the reference closest to `cand_len`; ties go to the shorter.
pub fn effective_reference_length(cand_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(cand_len), r))
        .unwrap_or(0)
}

impl BleuStats {
    pub fn new(candidate: &Tokens, references: &[Vec<String>], max_n: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Input("BLEU needs at least one reference".into()));
        }
        if max_n == 0 {
            return Err(Error::Input("BLEU order must be at least 1".into()));
        }
        let mut matches = Vec::with_capacity(max_n);
        let mut totals = Vec::with_capacity(max_n);
        for n in 1..=max_n {
            let cand = NGramCounts::new(candidate, n);
            let refs: Vec<NGramCounts> = references.iter().map(|r| NGramCounts::new(r, n)).collect();
            let clipped: usize = cand
                .counts
                .iter()
                .map(|(g, &c)| c.min(refs.iter().map(|r| r.get(g)).max().unwrap_or(0)))
                .sum();
            matches.push(clipped);
            totals.push(cand.total());
        }
        Ok(BleuStats {
            matches,
            totals,
            candidate_len: candidate.len(),
            reference_len: effective_reference_length(candidate.len(), references),
        })
    }

    pub fn accumulate(&mut self, other: &BleuStats) {
        if self.matches.len() < other.matches.len() {
            self.matches.resize(other.matches.len(), 0);
            self.totals.resize(other.totals.len(), 0);
        }
        for (i, (&m, &t)) in other.matches.iter().zip(&other.totals).enumerate() {
            self.matches[i] += m;
            self.totals[i] += t;
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if self.candidate_len == 0 {
            0.0
        } else if c > r {
            1.0
        } else {
            (1.0 - r / c).exp()
        }
    }

    /// Cumulative BLEU-`n` with uniform weights over orders `1..=n`.
    /// Without smoothing, any zero precision gives 0; with smoothing, a zero
    /// match count is replaced by 0.1.
    pub fn score(&self, n: usize, smoothing: bool) -> f64 {
        if self.candidate_len == 0 || n == 0 || n > self.matches.len() {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            let (m, t) = (self.matches[k] as f64, self.totals[k] as f64);
            if t == 0.0 {
                return 0.0;
            }
            let m = if m == 0.0 {
                if !smoothing {
                    return 0.0;
                }
                0.1
            } else {
                m
            };
            log_sum += (m / t).ln();
        }
        self.brevity_penalty() * (log_sum / n as f64).exp()
    }
}

/// Sentence-level BLEU-`max_n`.
pub fn bleu(candidate: &Tokens, references: &[Vec<String>], max_n: usize) -> Result<f64> {
    Ok(BleuStats::new(candidate, references, max_n)?.score(max_n, false))
}

/// Corpus-level BLEU-`max_n`: clipped counts and lengths are summed over all
/// items before precisions and the brevity penalty are formed.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize, smoothing: bool) -> Result<f64> {
    let mut total = BleuStats::default();
    for (cand, refs) in pairs {
        total.accumulate(&BleuStats::new(cand, refs, max_n)?);
    }
    Ok(total.score(max_n, smoothing))
}

/// Document frequencies of n-grams over per-image reference sets.
#[derive(Debug, Clone)]
pub struct CiderCorpus {
    max_n: usize,
    num_docs: usize,
    doc_freq: HashMap<Vec<String>, usize>,
}

impl CiderCorpus {
    /// `corpus_refs[i]` is the reference set of image `i`.
    pub fn new(corpus_refs: &[Vec<Vec<String>>], max_n: usize) -> Result<Self> {
        if corpus_refs.is_empty() {
            return Err(Error::Input("CIDEr needs a reference corpus of at least one item".into()));
        }
        let mut doc_freq = HashMap::new();
        for refs in corpus_refs {
            let mut seen = BTreeMap::new();
            for r in refs {
                for n in 1..=max_n {
                    for g in NGramCounts::new(r, n).counts.into_keys() {
                        seen.insert(g, ());
                    }
                }
            }
            for g in seen.into_keys() {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Ok(CiderCorpus {
            max_n,
            num_docs: corpus_refs.len(),
            doc_freq,
        })
    }

    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.doc_freq.get(gram).copied().unwrap_or(0).max(1);
        (self.num_docs as f64 / df as f64).ln()
    }

    /// TF-IDF vector of one order, with term frequency normalized by the
    /// number of n-grams in the sentence.
    pub fn tfidf(&self, tokens: &Tokens, n: usize) -> BTreeMap<Vec<String>, f64> {
        let counts = NGramCounts::new(tokens, n);
        let total = counts.total() as f64;
        counts
            .counts
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 / total * self.idf(&g);
                (g, w)
            })
            .collect()
    }

    pub fn score(&self, candidate: &Tokens, references: &[Vec<String>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::Input("CIDEr needs at least one reference".into()));
        }
        let mut total = 0.0;
        for n in 1..=self.max_n {
            let c = self.tfidf(candidate, n);
            let mut per_n = 0.0;
            for r in references {
                per_n += cosine(&c, &self.tfidf(r, n));
            }
            total += per_n / references.len() as f64;
        }
        Ok(total / self.max_n as f64)
    }
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr of one candidate with document frequencies from `corpus_refs`.
pub fn cider(candidate: &Tokens, references: &[Vec<String>], corpus_refs: &[Vec<Vec<String>>], max_n: usize) -> Result<f64> {
    CiderCorpus::new(corpus_refs, max_n)?.score(candidate, references)
}

pub fn lcs_length(a: &Tokens, b: &Tokens) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure, maximized over references. Recall is relative to the
/// reference length, precision to the candidate length.
pub fn rouge_l(candidate: &Tokens, references: &[Vec<String>], beta: f64) -> Result<f64> {
    if references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::Input("ROUGE-L needs nonempty references".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    let best = references
        .iter()
        .map(|r| {
            let lcs = lcs_length(r, candidate) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let rec = lcs / r.len() as f64;
            let prec = lcs / candidate.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// Exact-match alignment with the most matches and, among those, the
/// fewest chunks. Returns `(matches, chunks)`.
pub fn meteor_alignment(candidate: &Tokens, reference: &Tokens) -> (usize, usize) {
    if reference.len() > 64 {
        return monotone_alignment(candidate, reference);
    }
    let mut memo = HashMap::new();
    let (m, neg_chunks) = align_search(candidate, reference, 0, 0, None, &mut memo);
    (m, (-neg_chunks) as usize)
}

type AlignKey = (usize, u64, Option<usize>);

// Best (matches, -chunks) for candidate[i..] given used reference positions
// and the reference position matched by candidate[i-1], if any.
fn align_search(
    cand: &Tokens,
    reference: &Tokens,
    i: usize,
    used: u64,
    prev: Option<usize>,
    memo: &mut HashMap<AlignKey, (usize, i64)>,
) -> (usize, i64) {
    if i == cand.len() {
        return (0, 0);
    }
    if let Some(&v) = memo.get(&(i, used, prev)) {
        return v;
    }
    let mut best = align_search(cand, reference, i + 1, used, None, memo);
    for (j, r) in reference.iter().enumerate() {
        if used & (1 << j) != 0 || *r != cand[i] {
            continue;
        }
        let continues = prev.is_some_and(|p| p + 1 == j);
        let (m, c) = align_search(cand, reference, i + 1, used | (1 << j), Some(j), memo);
        let option = (m + 1, c - if continues { 0 } else { 1 });
        if option > best {
            best = option;
        }
    }
    memo.insert((i, used, prev), best);
    best
}

// Left-to-right first-unused matching for references too long for the
// exact search.
fn monotone_alignment(cand: &Tokens, reference: &Tokens) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for c in cand {
        let hit = reference.iter().enumerate().position(|(j, r)| !used[j] && r == c);
        match hit {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if prev.is_none_or(|p| p + 1 != j) {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

/// METEOR against a single reference with exact surface matching.
pub fn meteor(candidate: &Tokens, reference: &Tokens) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, chunks) = meteor_alignment(candidate, reference);
    meteor_from_counts(m, chunks, candidate.len(), reference.len())
}

pub fn meteor_from_counts(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / cand_len as f64;
    let r = matches as f64 / ref_len as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f * (1.0 - penalty)
}

/// Best METEOR over several references.
pub fn meteor_multi(candidate: &Tokens, references: &[Vec<String>]) -> f64 {
    references.iter().map(|r| meteor(candidate, r)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub bleu_avg: f64,
    pub cider: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub rouge_beta: f64,
    pub bleu_smoothing: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            rouge_beta: 1.2,
            bleu_smoothing: false,
        }
    }
}

/// Corpus BLEU plus per-item averages of CIDEr, ROUGE-L and METEOR. CIDEr
/// document frequencies come from the reference sets of `pairs`.
pub fn corpus_report(pairs: &[(Vec<String>, Vec<Vec<String>>)], opts: ReportOptions) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot score an empty corpus".into()));
    }
    let mut stats = BleuStats::default();
    for (cand, refs) in pairs {
        stats.accumulate(&BleuStats::new(cand, refs, 4)?);
    }
    let b: Vec<f64> = (1..=4).map(|n| stats.score(n, opts.bleu_smoothing)).collect();
    let corpus_refs: Vec<Vec<Vec<String>>> = pairs.iter().map(|(_, r)| r.clone()).collect();
    let cider_corpus = CiderCorpus::new(&corpus_refs, 4)?;
    let (mut cider_sum, mut rouge_sum, mut meteor_sum) = (0.0, 0.0, 0.0);
    for (cand, refs) in pairs {
        cider_sum += cider_corpus.score(cand, refs)?;
        rouge_sum += rouge_l(cand, refs, opts.rouge_beta)?;
        meteor_sum += meteor_multi(cand, refs);
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        bleu_1: b[0],
        bleu_2: b[1],
        bleu_3: b[2],
        bleu_4: b[3],
        bleu_avg: (b[0] + b[1] + b[2] + b[3]) / 4.0,
        cider: cider_sum / n,
        rouge_l: rouge_sum / n,
        meteor: meteor_sum / n,
        count: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn clipped_unigram_precision() {
        let score = bleu(&t("the the the"), &[t("the cat")], 1).unwrap();
        assert!((score - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn brevity_penalty_for_short_candidate() {
        let score = bleu(&t("a b"), &[t("a b c d")], 1).unwrap();
        assert!((score - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn identical_sentences_score_one() {
        let s = t("the lesion is in the left eye");
        for n in 1..=4 {
            assert!((bleu(&s, std::slice::from_ref(&s), n).unwrap() - 1.0).abs() < 1e-15);
        }
        assert_eq!(rouge_l(&s, std::slice::from_ref(&s), 3.0).unwrap(), 1.0);
    }

    #[test]
    fn rouge_l_hand_value() {
        let f = rouge_l(&t("a c d"), &[t("a b c d")], 1.2).unwrap();
        let expected = 2.44 * 0.75 / (0.75 + 1.44);
        assert!((f - expected).abs() < 1e-15);
        assert!((f - 0.8356).abs() < 1e-4);
    }

    #[test]
    fn meteor_identical_six_tokens() {
        let s = t("a b c d e f");
        assert!((meteor(&s, &s) - (1.0 - 0.5 / 216.0)).abs() < 1e-15);
    }

    #[test]
    fn meteor_prefers_fewer_chunks() {
        // "a" can align to either occurrence; the one next to "b" wins.
        assert_eq!(meteor_alignment(&t("a b"), &t("a x a b")), (2, 1));
        assert_eq!(meteor_alignment(&t("a c b d"), &t("a b c d")), (4, 4));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(bleu(&[], &[t("a")], 1).unwrap(), 0.0);
        assert!(bleu(&t("a"), &[], 1).is_err());
        assert!(rouge_l(&t("a"), &[vec![]], 1.2).is_err());
        assert_eq!(rouge_l(&[], &[t("a")], 1.2).unwrap(), 0.0);
        assert_eq!(meteor(&t("a"), &t("b")), 0.0);
        assert!(cider(&t("a"), &[t("a")], &[], 4).is_err());
    }

    #[test]
    fn cider_duplicate_reference_is_neutral() {
        let corpus = vec![vec![t("a b c")], vec![t("d e f")]];
        let one = cider(&t("a b x"), &[t("a b c")], &corpus, 4).unwrap();
        let two = cider(&t("a b x"), &[t("a b c"), t("a b c")], &corpus, 4).unwrap();
        assert!((one - two).abs() < 1e-15);
    }
}
