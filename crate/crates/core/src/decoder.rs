//! Caption generator: image projection, multi-modal fusion and a recurrent
//! decoder fed `[e_t, k_fused, x_t]` at every step.
//!
//! The image feature `φ(I)` is projected once to `e = φ(I)·W_d` and re-fed at
//! each step together with the fused context `k_fused = [keyword ; φ(I)]` and
//! the embedding of the previous token.
//!
//! With `bidirectional_training` a second LSTM runs right-to-left over the
//! teacher-forced inputs and its state is concatenated before the output
//! projection. That direction needs the future tokens, so inference always
//! runs forward-only with the backward half of the feature set to zero.

use std::cmp::Ordering;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{param_group, Dense};
use crate::tensor::{SeededRng, Tensor};
use crate::text::{EncodedSequence, END, START};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_feature_size: usize,
    pub word_embed_size: usize,
    pub lstm_hidden: usize,
    pub max_gen_len: usize,
    pub bidirectional_training: bool,
    /// Caption tokens use the keyword encoder's embedding table.
    pub share_embeddings: bool,
    /// When non-zero, records carry raw pixels of this length and a small
    /// dense layer maps them to the image feature.
    pub pixel_input_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_feature_size: 16,
            word_embed_size: 64,
            lstm_hidden: 256,
            max_gen_len: 50,
            bidirectional_training: false,
            share_embeddings: true,
            pixel_input_size: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_feature_size == 0 || self.word_embed_size == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config("generator sizes must be at least 1".into()));
        }
        if self.max_gen_len < 2 {
            return Err(Error::Config("max_gen_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of the feature feeding the output projection.
    pub fn output_input_size(&self) -> usize {
        if self.bidirectional_training {
            2 * self.lstm_hidden
        } else {
            self.lstm_hidden
        }
    }
}

param_group! {
    /// LSTM weights with gates packed as `[input, forget, cell, output]`:
    /// `w_input: in×4H`, `w_hidden: H×4H`, `bias: 4H`.
    pub struct LstmParams { w_input, w_hidden, bias }
}

impl LstmParams {
    pub fn init(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        LstmParams {
            w_input: Tensor::xavier(input, 4 * hidden, rng),
            w_hidden: Tensor::xavier(hidden, 4 * hidden, rng),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T = Tensor> {
    /// `W_d`, stored `F_img×E` (no bias).
    pub image_proj: T,
    pub pixel_encoder: Option<Dense<T>>,
    /// Caption embedding table, `V×E`; `None` when shared with the encoder.
    pub word_embedding: Option<T>,
    pub lstm: LstmParams<T>,
    pub lstm_backward: Option<LstmParams<T>>,
    pub output: Dense<T>,
}

impl<T> GeneratorParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GeneratorParams<U> {
        GeneratorParams {
            image_proj: f(&self.image_proj),
            pixel_encoder: self.pixel_encoder.as_ref().map(|d| d.map(f)),
            word_embedding: self.word_embedding.as_ref().map(&mut *f),
            lstm: self.lstm.map(f),
            lstm_backward: self.lstm_backward.as_ref().map(|l| l.map(f)),
            output: self.output.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.image_proj"), &self.image_proj);
        if let Some(d) = &self.pixel_encoder {
            d.visit(&format!("{prefix}.pixel_encoder"), f);
        }
        if let Some(w) = &self.word_embedding {
            f(format!("{prefix}.word_embedding"), w);
        }
        self.lstm.visit(&format!("{prefix}.lstm"), f);
        if let Some(l) = &self.lstm_backward {
            l.visit(&format!("{prefix}.lstm_backward"), f);
        }
        self.output.visit(&format!("{prefix}.output"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}.image_proj"), &mut self.image_proj);
        if let Some(d) = &mut self.pixel_encoder {
            d.visit_mut(&format!("{prefix}.pixel_encoder"), f);
        }
        if let Some(w) = &mut self.word_embedding {
            f(format!("{prefix}.word_embedding"), w);
        }
        self.lstm.visit_mut(&format!("{prefix}.lstm"), f);
        if let Some(l) = &mut self.lstm_backward {
            l.visit_mut(&format!("{prefix}.lstm_backward"), f);
        }
        self.output.visit_mut(&format!("{prefix}.output"), f);
    }
}

impl GeneratorParams {
    pub fn init(cfg: &GeneratorConfig, keyword_repr_size: usize, vocab_size: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.word_embed_size;
        let f_img = cfg.image_feature_size;
        let input = 2 * e + keyword_repr_size + f_img;
        Ok(GeneratorParams {
            image_proj: Tensor::xavier(f_img, e, rng),
            pixel_encoder: (cfg.pixel_input_size > 0).then(|| Dense::init(cfg.pixel_input_size, f_img, rng)),
            word_embedding: (!cfg.share_embeddings).then(|| Tensor::xavier(vocab_size, e, rng)),
            lstm: LstmParams::init(input, cfg.lstm_hidden, rng),
            lstm_backward: cfg
                .bidirectional_training
                .then(|| LstmParams::init(input, cfg.lstm_hidden, rng)),
            output: Dense::init(cfg.output_input_size(), vocab_size, rng),
        })
    }
}

/// The raw image input of one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    /// A precomputed feature vector of length `F_img`.
    Feature(Vec<f64>),
    /// Flattened pixels, mapped to a feature by the pixel encoder.
    Pixels(Vec<f64>),
}

/// `φ(I)` as a `1×F_img` row.
pub fn image_feature<'g>(
    cfg: &GeneratorConfig,
    p: &GeneratorParams<Var<'g>>,
    graph: &'g Graph,
    image: &ImageInput,
) -> Result<Var<'g>> {
    match image {
        ImageInput::Feature(values) => {
            if values.len() != cfg.image_feature_size {
                return Err(Error::Input(format!(
                    "image feature has {} values, model expects {}",
                    values.len(),
                    cfg.image_feature_size
                )));
            }
            Ok(graph.constant(Tensor::row(values.clone())?))
        }
        ImageInput::Pixels(values) => {
            let enc = p
                .pixel_encoder
                .as_ref()
                .ok_or_else(|| Error::Input("pixel input given but the model has no pixel encoder".into()))?;
            if values.len() != cfg.pixel_input_size {
                return Err(Error::Input(format!(
                    "pixel input has {} values, model expects {}",
                    values.len(),
                    cfg.pixel_input_size
                )));
            }
            let x = graph.constant(Tensor::row(values.clone())?);
            Ok(x.linear(enc.weight, enc.bias)?.tanh())
        }
    }
}

/// `e = φ(I) · W_d`, `1×F_img → 1×E`.
pub fn project_image<'g>(image_proj: Var<'g>, phi: Var<'g>) -> Result<Var<'g>> {
    Ok(phi.matmul(image_proj)?)
}

/// `k_fused = [keyword_repr ; φ(I)]`.
pub fn fuse<'g>(keyword_repr: Var<'g>, phi: Var<'g>) -> Result<Var<'g>> {
    Ok(Var::concat_lastdim(&[keyword_repr, phi])?)
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState<'g> {
    pub h: Var<'g>,
    pub c: Var<'g>,
}

impl<'g> LstmState<'g> {
    pub fn zeros(graph: &'g Graph, hidden: usize) -> Self {
        LstmState {
            h: graph.constant(Tensor::zeros(&[1, hidden])),
            c: graph.constant(Tensor::zeros(&[1, hidden])),
        }
    }
}

pub fn lstm_cell<'g>(p: &LstmParams<Var<'g>>, hidden: usize, input: Var<'g>, state: LstmState<'g>) -> Result<LstmState<'g>> {
    let z = input
        .matmul(p.w_input)?
        .add(state.h.matmul(p.w_hidden)?)?
        .add_bias(p.bias)?;
    let i = z.slice_lastdim(0, hidden)?.sigmoid();
    let f = z.slice_lastdim(hidden, hidden)?.sigmoid();
    let g = z.slice_lastdim(2 * hidden, hidden)?.tanh();
    let o = z.slice_lastdim(3 * hidden, hidden)?.sigmoid();
    let c = f.mul(state.c)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh())?;
    Ok(LstmState { h, c })
}

/// One forward-direction generation step. Returns `P_t` as a `1×V` row and
/// the new state.
pub fn decode_step<'g>(
    cfg: &GeneratorConfig,
    p: &GeneratorParams<Var<'g>>,
    state: LstmState<'g>,
    e: Var<'g>,
    k_fused: Var<'g>,
    x_t: Var<'g>,
) -> Result<(Var<'g>, LstmState<'g>)> {
    let input = Var::concat_lastdim(&[e, k_fused, x_t])?;
    let next = lstm_cell(&p.lstm, cfg.lstm_hidden, input, state)?;
    let feature = if cfg.bidirectional_training {
        let zeros = x_t.graph().constant(Tensor::zeros(&[1, cfg.lstm_hidden]));
        Var::concat_lastdim(&[next.h, zeros])?
    } else {
        next.h
    };
    let logits = feature.linear(p.output.weight, p.output.bias)?;
    logits.value().ensure_finite("decode_step logits")?;
    Ok((logits.softmax_lastdim()?, next))
}

/// Per-position distributions for a teacher-forced caption.
pub struct TeacherForced<'g> {
    /// `T×V`, row `t` predicts caption token `t + 1`.
    pub probs: Var<'g>,
    pub targets: Vec<Option<usize>>,
}

pub fn teacher_forced_forward<'g>(
    cfg: &GeneratorConfig,
    p: &GeneratorParams<Var<'g>>,
    word_table: Var<'g>,
    e: Var<'g>,
    k_fused: Var<'g>,
    caption: &EncodedSequence,
) -> Result<TeacherForced<'g>> {
    if caption.true_length < 2 {
        return Err(Error::Input(format!(
            "caption needs at least 2 tokens, has {}",
            caption.true_length
        )));
    }
    let graph = e.graph();
    let steps = caption.true_length - 1;
    let inputs_ids = &caption.ids[..steps];
    let x = word_table.embedding_lookup(inputs_ids)?;
    let inputs: Vec<Var<'g>> = (0..steps)
        .map(|t| Var::concat_lastdim(&[e, k_fused, x.slice_rows(t, 1)?]))
        .collect::<std::result::Result<_, _>>()?;

    let mut state = LstmState::zeros(graph, cfg.lstm_hidden);
    let mut forward = Vec::with_capacity(steps);
    for input in &inputs {
        state = lstm_cell(&p.lstm, cfg.lstm_hidden, *input, state)?;
        forward.push(state.h);
    }

    let features = if cfg.bidirectional_training {
        let bw = p
            .lstm_backward
            .as_ref()
            .ok_or_else(|| Error::Config("bidirectional training without backward LSTM weights".into()))?;
        let mut state = LstmState::zeros(graph, cfg.lstm_hidden);
        let mut backward = vec![None; steps];
        for t in (0..steps).rev() {
            state = lstm_cell(bw, cfg.lstm_hidden, inputs[t], state)?;
            backward[t] = Some(state.h);
        }
        forward
            .iter()
            .zip(backward)
            .map(|(f, b)| Var::concat_lastdim(&[*f, b.expect("filled")]))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        forward
    };

    let stacked = Var::stack_rows(&features)?;
    let logits = stacked.linear(p.output.weight, p.output.bias)?;
    logits.value().ensure_finite("teacher_forced logits")?;
    let targets = caption.ids[1..caption.true_length].iter().map(|&t| Some(t)).collect();
    Ok(TeacherForced {
        probs: logits.softmax_lastdim()?,
        targets,
    })
}

/// Anything that can be decoded token by token.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> Result<Self::State>;

    /// Feeds `token` and returns the next-token distribution.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)>;
}

/// A generated sequence: tokens after START, ending in END when finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Decoded {
    /// Tokens with the trailing END removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Argmax decoding, ties broken toward the lowest token id. Stops after END
/// or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &M, max_len: usize) -> Result<Decoded> {
    let mut state = model.initial_state()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut last = START;
    for _ in 0..max_len {
        let (probs, next) = model.step(&state, last)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, p) in probs.iter().enumerate() {
            let score = log_prob + p.ln();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((tok, score));
            }
        }
        let (tok, score) = best.ok_or_else(|| Error::Input("empty vocabulary".into()))?;
        tokens.push(tok);
        log_prob = score;
        state = next;
        last = tok;
        if tok == END {
            return Ok(Decoded {
                tokens,
                log_prob,
                finished: true,
            });
        }
    }
    Ok(Decoded {
        tokens,
        log_prob,
        finished: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamOptions {
    pub beams: usize,
    pub max_len: usize,
    /// Rank final hypotheses by log-probability per token instead of the
    /// raw sum.
    pub length_normalize: bool,
}

struct Hypothesis<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

fn score(log_prob: f64, len: usize, normalize: bool) -> f64 {
    if normalize && len > 0 {
        log_prob / len as f64
    } else {
        log_prob
    }
}

/// Higher score first, then shorter, then lexicographically smaller ids.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

/// Length-capped beam search over cumulative log-probabilities.
/// Hypotheses that emit END are retired from the beam; the result is the
/// best of the retired and length-capped hypotheses.
pub fn beam_search<M: StepModel>(model: &M, opts: BeamOptions) -> Result<Decoded> {
    if opts.beams < 1 {
        return Err(Error::Input("beam width must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.initial_state()?,
    }];
    let mut done: Vec<Decoded> = Vec::new();

    for _ in 0..opts.max_len {
        // (parent, token, cumulative log-prob, parent's next state)
        let mut expansions = Vec::with_capacity(live.len());
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let last = hyp.tokens.last().copied().unwrap_or(START);
            let (probs, next) = model.step(&hyp.state, last)?;
            for (tok, p) in probs.iter().enumerate() {
                candidates.push((pi, tok, hyp.log_prob + p.ln()));
            }
            expansions.push(next);
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| live[a.0].tokens.cmp(&live[b.0].tokens))
                .then_with(|| a.1.cmp(&b.1))
        });
        candidates.truncate(opts.beams);

        let mut next_live = Vec::with_capacity(candidates.len());
        for (pi, tok, lp) in candidates {
            let mut tokens = live[pi].tokens.clone();
            tokens.push(tok);
            if tok == END {
                done.push(Decoded {
                    tokens,
                    log_prob: lp,
                    finished: true,
                });
            } else {
                next_live.push(Hypothesis {
                    tokens,
                    log_prob: lp,
                    state: expansions[pi].clone(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if !opts.length_normalize {
            let best_done = done.iter().map(|d| d.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            // Log-probabilities only decrease as tokens are appended.
            if best_done >= best_live {
                break;
            }
        }
    }

    done.extend(live.into_iter().map(|h| Decoded {
        tokens: h.tokens,
        log_prob: h.log_prob,
        finished: false,
    }));
    done.into_iter()
        .min_by(|a, b| {
            rank(
                (score(a.log_prob, a.tokens.len(), opts.length_normalize), &a.tokens),
                (score(b.log_prob, b.tokens.len(), opts.length_normalize), &b.tokens),
            )
        })
        .ok_or_else(|| Error::Input("beam search produced no hypothesis".into()))
}

/// Generator bound to one image/keyword context, ready for decoding.
pub struct GeneratorSession<'g> {
    cfg: GeneratorConfig,
    params: GeneratorParams<Var<'g>>,
    word_table: Var<'g>,
    e: Var<'g>,
    k_fused: Var<'g>,
    vocab_size: usize,
}

impl<'g> GeneratorSession<'g> {
    /// `phi` is `φ(I)` and `keyword_repr` the keyword representation, both
    /// as flat vectors.
    pub fn new(
        graph: &'g Graph,
        cfg: &GeneratorConfig,
        params: &GeneratorParams,
        word_table: &Tensor,
        phi: &Tensor,
        keyword_repr: &Tensor,
    ) -> Result<Self> {
        let p = params.map(&mut |t| graph.constant(t.clone()));
        let phi = graph.constant(phi.reshape(&[1, phi.len()])?);
        let kw = graph.constant(keyword_repr.reshape(&[1, keyword_repr.len()])?);
        let e = project_image(p.image_proj, phi)?;
        let k_fused = fuse(kw, phi)?;
        Ok(GeneratorSession {
            cfg: cfg.clone(),
            vocab_size: params.output.bias.len(),
            word_table: graph.constant(word_table.clone()),
            params: p,
            e,
            k_fused,
        })
    }
}

impl<'g> StepModel for GeneratorSession<'g> {
    type State = LstmState<'g>;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn initial_state(&self) -> Result<Self::State> {
        Ok(LstmState::zeros(self.e.graph(), self.cfg.lstm_hidden))
    }

    fn step(&self, state: &Self::State, token: usize) -> Result<(Vec<f64>, Self::State)> {
        let x = self.word_table.embedding_lookup(&[token])?;
        let (probs, next) = decode_step(&self.cfg, &self.params, *state, self.e, self.k_fused, x)?;
        Ok((probs.value().into_data(), next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table indexed by the previous token.
    struct Table(Vec<Vec<f64>>);

    impl StepModel for Table {
        type State = ();
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn initial_state(&self) -> Result<()> {
            Ok(())
        }
        fn step(&self, _: &(), token: usize) -> Result<(Vec<f64>, ())> {
            Ok((self.0[token].clone(), ()))
        }
    }

    #[test]
    fn greedy_ties_go_to_lowest_id() {
        // START (2) → uniform over ids 0..4 except END; argmax tie → id 0.
        let mut rows = vec![vec![0.0, 0.0, 0.0, 1.0, 0.0]; 5];
        rows[START] = vec![0.25, 0.25, 0.25, 0.0, 0.25];
        let d = greedy_decode(&Table(rows), 4).unwrap();
        assert_eq!(d.tokens, vec![0, END]);
        assert!(d.finished);
    }

    #[test]
    fn beam_beats_greedy_on_garden_path() {
        // Greedy takes token 4 (p=0.6) then is forced into a flat tail;
        // token 0 (p=0.4) leads to END with certainty.
        let mut rows = vec![vec![0.0; 5]; 5];
        rows[START] = vec![0.4, 0.0, 0.0, 0.0, 0.6];
        rows[0] = vec![0.0, 0.0, 0.0, 1.0, 0.0];
        rows[4] = vec![0.25, 0.25, 0.25, 0.25, 0.0];
        rows[1] = vec![0.0, 0.0, 0.0, 1.0, 0.0];
        let model = Table(rows);
        let greedy = greedy_decode(&model, 4).unwrap();
        assert_eq!(greedy.tokens, vec![4, 0, END]);
        let beam = beam_search(
            &model,
            BeamOptions {
                beams: 2,
                max_len: 4,
                length_normalize: false,
            },
        )
        .unwrap();
        assert_eq!(beam.tokens, vec![0, END]);
        assert!(beam.log_prob > greedy.log_prob);
    }

    #[test]
    fn zero_beams_is_an_error() {
        let model = Table(vec![vec![0.2; 5]; 5]);
        let opts = BeamOptions {
            beams: 0,
            max_len: 3,
            length_normalize: false,
        };
        assert!(matches!(beam_search(&model, opts), Err(Error::Input(_))));
    }

    #[test]
    fn capped_hypotheses_are_returned_unfinished() {
        let mut rows = vec![vec![0.0, 0.0, 0.0, 0.0, 1.0]; 5];
        rows[START] = vec![0.0, 0.0, 0.0, 0.0, 1.0];
        let d = greedy_decode(&Table(rows.clone()), 3).unwrap();
        assert_eq!(d.tokens, vec![4, 4, 4]);
        assert!(!d.finished);
        let opts = BeamOptions {
            beams: 3,
            max_len: 3,
            length_normalize: false,
        };
        assert_eq!(beam_search(&Table(rows), opts).unwrap().tokens, vec![4, 4, 4]);
    }
}
