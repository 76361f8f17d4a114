//! Independent oracles shared by the integration and acceptance suites.
//! Nothing here calls the code it is used to check, except to build inputs.

#![allow(dead_code)]

use keycap::decoder::{GeneratorConfig, StepModel};
use keycap::encoder::{Activation, EncoderConfig, Pooling};
use keycap::model::PreparedSample;
use keycap::text::{EncodedSequence, END, PAD, START};
use keycap::{CaptionModel, Graph, SeededRng, Tensor, Var};

// ---------------------------------------------------------------------------
// Finite differences

const FD_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding do not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Largest relative error between the autodiff gradient of `f` with respect
/// to every input and a central difference.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).expect("grad").clone()).collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).value().item().expect("scalar")
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Contracts `out` with fixed pseudo-random weights so every output entry
/// reaches the loss with a distinct coefficient.
pub fn contract<'g>(g: &'g Graph, out: Var<'g>) -> Var<'g> {
    let shape = out.shape();
    let mut rng = SeededRng::new(991 + shape.iter().product::<usize>() as u64);
    let w = Tensor::random_uniform(&shape, -1.0, 1.0, &mut rng);
    out.mul(g.constant(w)).expect("same shape").sum()
}

pub fn rand_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

/// Model loss with every parameter flattened in visit order.
pub fn flat_params(model: &CaptionModel) -> Vec<f64> {
    let mut out = Vec::new();
    model.params.visit(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn set_flat_params(model: &mut CaptionModel, values: &[f64]) {
    let mut at = 0;
    model.params.visit_mut(&mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[at..at + n]);
        at += n;
    });
}

pub fn model_loss(model: &CaptionModel, batch: &[&PreparedSample]) -> f64 {
    let g = Graph::new();
    let p = model.params.map(&mut |t| g.constant(t.clone()));
    model.batch_loss(&p, batch).unwrap().value().item().unwrap()
}

// ---------------------------------------------------------------------------
// Tiny models

pub fn micro_encoder(vocab: usize, residual: bool, num_blocks: usize, num_heads: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        embed_size: 8,
        hidden_size: 8,
        num_blocks,
        num_heads,
        ffn_inner_size: 6,
        max_keyword_len: 6,
        eps: 1e-5,
        keyword_repr_size: 5,
        reinforce_layers: 2,
        activation: Activation::Gelu,
        residual,
        positional: true,
        pooling: Pooling::Mean,
    }
}

pub fn micro_generator(bidirectional: bool) -> GeneratorConfig {
    GeneratorConfig {
        image_feature_size: 4,
        word_embed_size: 8,
        lstm_hidden: 6,
        max_gen_len: 8,
        bidirectional_training: bidirectional,
        share_embeddings: true,
        pixel_input_size: 0,
    }
}

/// A model whose positional table and biases are random rather than zero,
/// so every parameter matters in gradient checks.
pub fn randomized_model(enc: EncoderConfig, gen: GeneratorConfig, seed: u64) -> CaptionModel {
    let mut rng = SeededRng::new(seed);
    let mut model = CaptionModel::new(enc, gen, &mut rng).unwrap();
    model.params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v = rng.uniform(-0.6, 0.6);
        }
    });
    model
}

/// A random sample with `kw_len` keyword tokens and a caption of
/// `cap_len` tokens between START and END, padded to 6 and 9.
pub fn random_sample(vocab: usize, feature: usize, kw_len: usize, cap_len: usize, rng: &mut SeededRng) -> PreparedSample {
    let mut kw: Vec<usize> = (0..kw_len).map(|_| 4 + rng.below(vocab - 4)).collect();
    let kw_true = kw.len();
    kw.resize(6, PAD);
    let mut cap = vec![START];
    cap.extend((0..cap_len).map(|_| 4 + rng.below(vocab - 4)));
    cap.push(END);
    let cap_true = cap.len();
    cap.resize(9, PAD);
    PreparedSample {
        id: format!("r{}", rng.next_u64()),
        image: keycap::decoder::ImageInput::Feature((0..feature).map(|_| rng.uniform(-1.0, 1.0)).collect()),
        keywords: EncodedSequence {
            ids: kw,
            true_length: kw_true,
        },
        caption: EncodedSequence {
            ids: cap,
            true_length: cap_true,
        },
    }
}

// ---------------------------------------------------------------------------
// Toy decoding model and exhaustive search

/// Next-token distributions drawn from a seeded generator keyed by the full
/// prefix, so the model has long-range structure beam search can exploit.
pub struct ToyModel {
    pub seed: u64,
    pub vocab: usize,
    pub sharpness: f64,
}

impl StepModel for ToyModel {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial_state(&self) -> keycap::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, state: &Vec<usize>, token: usize) -> keycap::Result<(Vec<f64>, Vec<usize>)> {
        let mut prefix = state.clone();
        prefix.push(token);
        let mut key = self.seed;
        for &t in &prefix {
            key = key.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64 + 1);
        }
        let mut rng = SeededRng::new(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * rng.normal(0.0, 1.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok((e.iter().map(|v| v / s).collect(), prefix))
    }
}

/// Best complete-or-capped sequence by exhaustive enumeration: highest
/// cumulative log-probability, then shorter, then lexicographically smaller.
pub fn exhaustive_best<M: StepModel>(model: &M, max_len: usize) -> (Vec<usize>, f64) {
    fn walk<M: StepModel>(
        model: &M,
        state: &M::State,
        last: usize,
        tokens: &mut Vec<usize>,
        lp: f64,
        max_len: usize,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let (probs, next) = model.step(state, last).unwrap();
        for (tok, p) in probs.iter().enumerate() {
            let score = lp + p.ln();
            tokens.push(tok);
            if tok == END || tokens.len() == max_len {
                let better = match best {
                    None => true,
                    Some((bt, bs)) => {
                        score > *bs || (score == *bs && (tokens.len(), &tokens[..]) < (bt.len(), &bt[..]))
                    }
                };
                if better {
                    *best = Some((tokens.clone(), score));
                }
            } else {
                walk(model, &next, tok, tokens, score, max_len, best);
            }
            tokens.pop();
        }
    }
    let mut best = None;
    let init = model.initial_state().unwrap();
    walk(model, &init, START, &mut Vec::new(), 0.0, max_len, &mut best);
    best.unwrap()
}

// ---------------------------------------------------------------------------
// Encoder transcription: one head, one block, no positional table, written
// with the column-vector convention x' = W x + b and plain loops.

pub struct BlockWeights {
    /// `E×V`, column `k` embeds token `k`.
    pub w_e: Vec<Vec<f64>>,
    /// `H×E`.
    pub w_q: Vec<Vec<f64>>,
    pub b_q: Vec<f64>,
    pub w_k: Vec<Vec<f64>>,
    pub b_k: Vec<f64>,
    pub w_v: Vec<Vec<f64>>,
    pub b_v: Vec<f64>,
    pub gain: Vec<f64>,
    pub beta: Vec<f64>,
    /// `I×H`.
    pub w_1: Vec<Vec<f64>>,
    pub b_1: Vec<f64>,
    /// `H×I`.
    pub w_2: Vec<Vec<f64>>,
    pub b_2: Vec<f64>,
    pub eps: f64,
}

fn affine(w: &[Vec<f64>], x: &[f64], b: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(row, bias)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bias)
        .collect()
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Block output rows for token ids `k` (all non-PAD).
pub fn transcribe_block(w: &BlockWeights, k: &[usize]) -> Vec<Vec<f64>> {
    let n = k.len();
    let e_rows = w.w_e.len();
    let x: Vec<Vec<f64>> = k.iter().map(|&id| (0..e_rows).map(|r| w.w_e[r][id]).collect()).collect();
    let q: Vec<Vec<f64>> = x.iter().map(|xn| affine(&w.w_q, xn, &w.b_q)).collect();
    let kk: Vec<Vec<f64>> = x.iter().map(|xn| affine(&w.w_k, xn, &w.b_k)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|xn| affine(&w.w_v, xn, &w.b_v)).collect();
    let d_k = q[0].len() as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Only positions j <= i survive the mask.
        let scores: Vec<f64> = (0..=i)
            .map(|j| q[i].iter().zip(&kk[j]).map(|(a, b)| a * b).sum::<f64>() / d_k.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = ex.iter().sum();
        let mut att = vec![0.0; v[0].len()];
        for j in 0..=i {
            for (a, vv) in att.iter_mut().zip(&v[j]) {
                *a += ex[j] / total * vv;
            }
        }
        let mean = att.iter().sum::<f64>() / att.len() as f64;
        let var = att.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / att.len() as f64;
        let z: Vec<f64> = att
            .iter()
            .zip(w.gain.iter().zip(&w.beta))
            .map(|(a, (g, b))| g * (a - mean) / (var + w.eps).sqrt() + b)
            .collect();
        let hidden: Vec<f64> = affine(&w.w_1, &z, &w.b_1).into_iter().map(gelu_tanh).collect();
        out.push(affine(&w.w_2, &hidden, &w.b_2));
    }
    out
}

/// Rows of a `rows×cols` row-major tensor, transposed.
pub fn transposed(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| t.data()[i * c + j]).collect()).collect()
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles over short token lists.

pub type Sent = Vec<String>;

fn occurrences(s: &[String], gram: &[String]) -> usize {
    if gram.len() > s.len() {
        return 0;
    }
    (0..=s.len() - gram.len()).filter(|&i| &s[i..i + gram.len()] == gram).count()
}

/// Distinct n-grams of `s`, in first-occurrence order.
fn distinct_grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    if n == 0 || n > s.len() {
        return out;
    }
    for i in 0..=s.len() - n {
        let g = s[i..i + n].to_vec();
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

pub fn bleu_oracle(cand: &Sent, refs: &[Sent], max_n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=max_n {
        let total = if cand.len() >= n { cand.len() - n + 1 } else { 0 };
        if total == 0 {
            return 0.0;
        }
        let mut clipped = 0;
        for g in distinct_grams(cand, n) {
            let c = occurrences(cand, &g);
            let r = refs.iter().map(|r| occurrences(r, &g)).max().unwrap_or(0);
            clipped += c.min(r);
        }
        if clipped == 0 {
            return 0.0;
        }
        product *= clipped as f64 / total as f64;
    }
    let c = cand.len();
    let mut r = refs[0].len();
    for x in refs {
        let (d, bd) = (x.len().abs_diff(c), r.abs_diff(c));
        if d < bd || (d == bd && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / max_n as f64)
}

fn is_subsequence(small: &[String], big: &[String]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

/// LCS by trying every subsequence of the shorter sentence.
pub fn lcs_oracle(a: &Sent, b: &Sent) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<String> = (0..short.len()).filter(|i| mask & (1 << i) != 0).map(|i| short[i].clone()).collect();
        if sub.len() > best && is_subsequence(&sub, long) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(cand: &Sent, refs: &[Sent], beta: f64) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for r in refs {
        let l = lcs_oracle(r, cand) as f64;
        if l == 0.0 {
            continue;
        }
        let rec = l / r.len() as f64;
        let prec = l / cand.len() as f64;
        best = best.max((1.0 + beta * beta) * rec * prec / (rec + beta * beta * prec));
    }
    best
}

/// All exact-match alignments; returns (max matches, min chunks among those).
pub fn meteor_alignment_oracle(cand: &Sent, reference: &Sent) -> (usize, usize) {
    fn go(cand: &Sent, reference: &Sent, i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == cand.len() {
            let m = pairs.len();
            let mut chunks = 0;
            for (k, &(ci, rj)) in pairs.iter().enumerate() {
                let continues = k > 0 && pairs[k - 1].0 + 1 == ci && pairs[k - 1].1 + 1 == rj;
                if !continues {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        go(cand, reference, i + 1, used, pairs, best);
        for j in 0..reference.len() {
            if !used[j] && reference[j] == cand[i] {
                used[j] = true;
                pairs.push((i, j));
                go(cand, reference, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    go(cand, reference, 0, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

pub fn meteor_oracle(cand: &Sent, reference: &Sent) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, ch) = meteor_alignment_oracle(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}

/// CIDEr with explicit TF-IDF vectors over the union of all n-grams.
pub fn cider_oracle(cand: &Sent, refs: &[Sent], corpus: &[Vec<Sent>]) -> f64 {
    let docs = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let mut vocab: Vec<Vec<String>> = distinct_grams(cand, n);
        for r in refs {
            for g in distinct_grams(r, n) {
                if !vocab.contains(&g) {
                    vocab.push(g);
                }
            }
        }
        let idf: Vec<f64> = vocab
            .iter()
            .map(|g| {
                let df = corpus
                    .iter()
                    .filter(|doc| doc.iter().any(|r| occurrences(r, g) > 0))
                    .count()
                    .max(1);
                (docs / df as f64).ln()
            })
            .collect();
        let vec_of = |s: &Sent| -> Vec<f64> {
            let count = if s.len() >= n { s.len() - n + 1 } else { 0 };
            vocab
                .iter()
                .zip(&idf)
                .map(|(g, w)| if count == 0 { 0.0 } else { occurrences(s, g) as f64 / count as f64 * w })
                .collect()
        };
        let c = vec_of(cand);
        let mut acc = 0.0;
        for r in refs {
            let rv = vec_of(r);
            let dot: f64 = c.iter().zip(&rv).map(|(a, b)| a * b).sum();
            let nc = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nr = rv.iter().map(|a| a * a).sum::<f64>().sqrt();
            acc += if nc == 0.0 || nr == 0.0 { 0.0 } else { dot / (nc * nr) };
        }
        total += acc / refs.len() as f64;
    }
    total / 4.0
}

pub fn random_sentence(rng: &mut SeededRng, min_len: usize, max_len: usize) -> Sent {
    const WORDS: [&str; 4] = ["a", "b", "c", "d"];
    let len = min_len + rng.below(max_len - min_len + 1);
    (0..len).map(|_| WORDS[rng.below(WORDS.len())].to_string()).collect()
}

pub fn words(s: &str) -> Sent {
    s.split_whitespace().map(String::from).collect()
}
