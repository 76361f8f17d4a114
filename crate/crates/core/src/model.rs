//! The full captioning model: keyword encoder + caption generator.

use crate::autograd::{Graph, Var};
use crate::decoder::{
    self, beam_search, greedy_decode, BeamOptions, Decoded, GeneratorConfig, GeneratorParams, GeneratorSession,
    ImageInput,
};
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};
use crate::text::EncodedSequence;

/// One training/inference example in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub image: ImageInput,
    pub keywords: EncodedSequence,
    pub caption: EncodedSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub generator: GeneratorParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            generator: self.generator.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.encoder.visit("encoder", f);
        self.generator.visit("generator", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.encoder.visit_mut("encoder", f);
        self.generator.visit_mut("generator", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    /// Table used to embed caption tokens.
    pub fn word_table(&self) -> &T {
        self.generator.word_embedding.as_ref().unwrap_or(&self.encoder.embedding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub encoder_cfg: EncoderConfig,
    pub generator_cfg: GeneratorConfig,
    pub params: ModelParams,
}

/// Inputs to the generator after the encoders have run.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeContext {
    /// `φ(I)`, length `F_img`.
    pub image_feature: Tensor,
    /// Keyword representation, length `F_k`.
    pub keyword_repr: Tensor,
}

impl CaptionModel {
    pub fn new(encoder_cfg: EncoderConfig, generator_cfg: GeneratorConfig, rng: &mut SeededRng) -> Result<Self> {
        encoder_cfg.validate()?;
        generator_cfg.validate()?;
        if generator_cfg.share_embeddings && generator_cfg.word_embed_size != encoder_cfg.embed_size {
            return Err(Error::Config(format!(
                "shared embeddings need word_embed_size ({}) == embed_size ({})",
                generator_cfg.word_embed_size, encoder_cfg.embed_size
            )));
        }
        let encoder = EncoderParams::init(&encoder_cfg, rng)?;
        let generator = GeneratorParams::init(
            &generator_cfg,
            encoder_cfg.keyword_repr_size,
            encoder_cfg.vocab_size,
            rng,
        )?;
        Ok(CaptionModel {
            encoder_cfg,
            generator_cfg,
            params: ModelParams { encoder, generator },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder_cfg.vocab_size
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.len());
        n
    }

    /// Binds all parameters as trainable leaves.
    pub fn bind<'g>(&self, graph: &'g Graph) -> ModelParams<Var<'g>> {
        self.params.map(&mut |t| graph.param(t.clone()))
    }

    /// Teacher-forced categorical cross-entropy for one sample, plus the
    /// number of predicted tokens it averages over.
    pub fn sample_loss<'g>(&self, p: &ModelParams<Var<'g>>, sample: &PreparedSample) -> Result<(Var<'g>, usize)> {
        let tf = self.teacher_forced(p, sample)?;
        let n = tf.targets.len();
        Ok((tf.probs.cross_entropy(&tf.targets)?, n))
    }

    pub fn teacher_forced<'g>(
        &self,
        p: &ModelParams<Var<'g>>,
        sample: &PreparedSample,
    ) -> Result<decoder::TeacherForced<'g>> {
        let graph = p.encoder.embedding.graph();
        let kw = encoder::encode_keywords(&self.encoder_cfg, &p.encoder, &sample.keywords)?;
        let phi = decoder::image_feature(&self.generator_cfg, &p.generator, graph, &sample.image)?;
        let e = decoder::project_image(p.generator.image_proj, phi)?;
        let k_fused = decoder::fuse(kw, phi)?;
        decoder::teacher_forced_forward(&self.generator_cfg, &p.generator, *p.word_table(), e, k_fused, &sample.caption)
    }

    /// Token-weighted mean cross-entropy over a batch: every predicted token
    /// in the batch counts once.
    pub fn batch_loss<'g>(&self, p: &ModelParams<Var<'g>>, batch: &[&PreparedSample]) -> Result<Var<'g>> {
        let mut parts = Vec::with_capacity(batch.len());
        let mut total = 0usize;
        for sample in batch {
            let (loss, n) = self.sample_loss(p, sample)?;
            parts.push((loss, n));
            total += n;
        }
        let mut acc: Option<Var<'g>> = None;
        for (loss, n) in parts {
            let weighted = loss.scale(n as f64 / total as f64);
            acc = Some(match acc {
                Some(a) => a.add(weighted)?,
                None => weighted,
            });
        }
        acc.ok_or_else(|| Error::Input("empty batch".into()))
    }

    /// Runs the image and keyword encoders.
    pub fn context(&self, image: &ImageInput, keywords: &EncodedSequence) -> Result<DecodeContext> {
        let graph = Graph::new();
        let p = self.params.map(&mut |t| graph.constant(t.clone()));
        let kw = encoder::encode_keywords(&self.encoder_cfg, &p.encoder, keywords)?.value();
        let phi = decoder::image_feature(&self.generator_cfg, &p.generator, &graph, image)?.value();
        Ok(DecodeContext {
            image_feature: phi.reshape(&[phi.len()])?,
            keyword_repr: kw.reshape(&[kw.len()])?,
        })
    }

    pub fn greedy(&self, ctx: &DecodeContext) -> Result<Decoded> {
        let graph = Graph::new();
        let session = self.session(&graph, ctx)?;
        greedy_decode(&session, self.generator_cfg.max_gen_len)
    }

    pub fn beam(&self, ctx: &DecodeContext, beams: usize, length_normalize: bool) -> Result<Decoded> {
        let graph = Graph::new();
        let session = self.session(&graph, ctx)?;
        beam_search(
            &session,
            BeamOptions {
                beams,
                max_len: self.generator_cfg.max_gen_len,
                length_normalize,
            },
        )
    }

    pub fn session<'g>(&self, graph: &'g Graph, ctx: &DecodeContext) -> Result<GeneratorSession<'g>> {
        GeneratorSession::new(
            graph,
            &self.generator_cfg,
            &self.params.generator,
            self.params.word_table(),
            &ctx.image_feature,
            &ctx.keyword_repr,
        )
    }
}
