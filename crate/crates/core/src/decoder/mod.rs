//! Report and location-question decoder: twin spatial packers feed a tiny
//! causal language model through a marked visual prefix; fine-tuning
//! trains low-rank adapters, the packers and the marker embeddings while
//! the base language model stays frozen.

pub mod lora;
mod model;
pub mod templates;

pub use lora::LowRankAdapter;
pub use model::{argmax_lowest, generate_greedy, generation_loss, Decoder, ADAPTER_ROLES};

use candle_core::{Tensor, D};

use crate::config::Config;
use crate::encoders::VisionTokens;
use crate::error::{Error, Result};
use crate::packer::{PackedTokens, TwinPackers};
use crate::params::ParamStore;
use crate::tokenizer::{TokenIds, BOS, EOS, PAD};

pub const DECODER_PREFIX: &str = "dec.";
pub const LM_NAME: &str = "dec.lm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    GlobalVisual,
    LocalVisual,
    Text,
}

/// Decoder input embeddings with one segment tag per position.
#[derive(Debug, Clone)]
pub struct PromptSequence {
    /// `(1, T, d_t)`.
    pub embeddings: Tensor,
    pub segments: Vec<Segment>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// `[<img_g>, F_G, <img_l>, F_L]` for a batch: `(B, 2 + 2·N', d_t)`.
pub fn visual_prefix(decoder: &Decoder, f_g: &PackedTokens, f_l: &PackedTokens) -> Result<Tensor> {
    let (b, _, dg) = f_g.tokens.dims3()?;
    let (bl, _, dl) = f_l.tokens.dims3()?;
    let d = decoder.width();
    if dg != d || dl != d {
        return Err(Error::Config(format!(
            "visual tokens have widths {dg}/{dl}, decoder expects {d}"
        )));
    }
    if b != bl {
        return Err(Error::Shape(format!("stream batch sizes differ: {b} vs {bl}")));
    }
    let marker = |m: &Tensor| -> Result<Tensor> { Ok(m.reshape((1, 1, d))?.broadcast_as((b, 1, d))?) };
    Ok(Tensor::cat(
        &[&marker(&decoder.marker_g)?, &f_g.tokens, &marker(&decoder.marker_l)?, &f_l.tokens],
        1,
    )?)
}

/// Single-sample prompt `[<img_g>, F_G, <img_l>, F_L, instruction]`.
pub fn build_prompt(
    decoder: &Decoder,
    f_g: &PackedTokens,
    f_l: &PackedTokens,
    instruction: &TokenIds,
) -> Result<PromptSequence> {
    let prefix = visual_prefix(decoder, f_g, f_l)?;
    if prefix.dims3()?.0 != 1 {
        return Err(Error::Input("build_prompt takes a single sample".into()));
    }
    let n_g = f_g.len()?;
    let n_l = f_l.len()?;
    let mut segments = vec![Segment::GlobalVisual; 1 + n_g];
    segments.extend(std::iter::repeat(Segment::LocalVisual).take(1 + n_l));
    segments.extend(std::iter::repeat(Segment::Text).take(instruction.len()));
    let embeddings = if instruction.is_empty() {
        prefix
    } else {
        Tensor::cat(&[&prefix, &decoder.embed_ids(&[instruction.clone()])?], 1)?
    };
    Ok(PromptSequence { embeddings, segments })
}

/// Attaches adapters of rank `rank` to every decoder linear map whose role is
/// listed in `targets`. Returns the adapter parameter names; rank 0 is a
/// no-op.
pub fn apply_low_rank_adapters(
    store: &mut ParamStore,
    decoder: &mut Decoder,
    targets: &[String],
    rank: usize,
    alpha: f64,
) -> Result<Vec<String>> {
    if let Some(bad) = targets.iter().find(|t| !ADAPTER_ROLES.contains(&t.as_str())) {
        return Err(Error::Config(format!(
            "unknown adapter target {bad}; known targets: {}",
            ADAPTER_ROLES.join(", ")
        )));
    }
    lora::attach(store, decoder.linears_mut(), targets, rank, alpha)
}

/// Instruction-tuning examples with cached encoder features.
#[derive(Debug, Clone)]
pub struct InstructionBatch {
    /// `(B, N_p, d_v)` global-stream patch features.
    pub global: Tensor,
    /// `(B, N_p, d_v)` local-stream patch features.
    pub local: Tensor,
    pub grid_dims: [usize; 3],
    pub instructions: Vec<TokenIds>,
    pub answers: Vec<TokenIds>,
}

impl InstructionBatch {
    fn stream(&self, t: &Tensor) -> Result<VisionTokens> {
        let (b, _, d) = t.dims3()?;
        Ok(VisionTokens {
            tokens: t.clone(),
            cls: Tensor::zeros((b, d), t.dtype(), t.device())?,
            grid_dims: self.grid_dims,
        })
    }
}

/// Packers plus decoder.
#[derive(Debug, Clone)]
pub struct VisionLanguageModel {
    pub packers: TwinPackers,
    pub decoder: Decoder,
    pub adapters: Vec<String>,
}

/// Text rows `instruction <bos> answer <eos>` padded to a common length,
/// and the mask selecting the answer and `<eos>`.
pub fn text_rows(instructions: &[TokenIds], answers: &[TokenIds]) -> (Vec<TokenIds>, Vec<Vec<bool>>) {
    let rows: Vec<TokenIds> = instructions
        .iter()
        .zip(answers)
        .map(|(i, a)| {
            let mut r = i.clone();
            r.push(BOS);
            r.extend_from_slice(a);
            r.push(EOS);
            r
        })
        .collect();
    let len = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .zip(instructions)
        .map(|(r, i)| (0..len).map(|k| k > i.len() && k < r.len()).collect())
        .collect();
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.resize(len, PAD);
            r
        })
        .collect();
    (rows, masks)
}

impl VisionLanguageModel {
    pub fn new(store: &mut ParamStore, cfg: &Config, vocab_size: usize) -> Result<Self> {
        Ok(Self {
            packers: TwinPackers::new(store, "dec", cfg)?,
            decoder: Decoder::new(
                store,
                LM_NAME,
                vocab_size,
                cfg.d_t,
                cfg.decoder_layers,
                cfg.decoder_heads,
                cfg.decoder_max_len,
            )?,
            adapters: Vec::new(),
        })
    }

    pub fn attach_adapters(&mut self, store: &mut ParamStore, cfg: &Config) -> Result<()> {
        if !self.adapters.is_empty() {
            return Err(Error::State("adapters already attached".into()));
        }
        self.adapters = apply_low_rank_adapters(
            store,
            &mut self.decoder,
            &cfg.adapter_targets,
            cfg.adapter_rank,
            cfg.adapter_alpha,
        )?;
        Ok(())
    }

    /// Names updated by fine-tuning: adapters, both packers, both markers.
    pub fn finetune_trainable(&self, store: &ParamStore) -> Vec<String> {
        store
            .names()
            .filter(|n| {
                n.starts_with("dec.packer_")
                    || n.contains(".lora_")
                    || *n == format!("{LM_NAME}.marker_g")
                    || *n == format!("{LM_NAME}.marker_l")
            })
            .map(String::from)
            .collect()
    }

    /// Base language-model parameters (frozen during fine-tuning).
    pub fn base_names(&self, store: &ParamStore) -> Vec<String> {
        let trainable = self.finetune_trainable(store);
        store
            .names()
            .filter(|n| n.starts_with(LM_NAME) && !trainable.iter().any(|t| t == n))
            .map(String::from)
            .collect()
    }

    pub fn visual_tokens(&self, global: &VisionTokens, local: &VisionTokens) -> Result<(PackedTokens, PackedTokens)> {
        Ok((self.packers.global.pack(global)?, self.packers.local.pack(local)?))
    }

    /// Prefix with packed features, or with zeroed visual blocks when
    /// `blank` is set (text-only language-model warmup).
    pub fn prefix(&self, batch: &InstructionBatch, blank: bool) -> Result<Tensor> {
        let (g, l) = self.visual_tokens(&batch.stream(&batch.global)?, &batch.stream(&batch.local)?)?;
        if blank {
            let z = PackedTokens { tokens: g.tokens.zeros_like()?.detach() };
            return visual_prefix(&self.decoder, &z, &z);
        }
        visual_prefix(&self.decoder, &g, &l)
    }

    /// Answer-only generation loss for a batch.
    pub fn loss(&self, batch: &InstructionBatch, blank: bool) -> Result<Tensor> {
        let prefix = self.prefix(batch, blank)?;
        let p = prefix.dims3()?.1;
        let (rows, mask) = text_rows(&batch.instructions, &batch.answers);
        let lt = rows[0].len();
        let text = self.decoder.embed_ids(&rows)?;
        let input = Tensor::cat(&[&prefix, &text.narrow(1, 0, lt - 1)?], 1)?;
        let logits = self.decoder.forward(&input)?.narrow(1, p - 1, lt)?;
        generation_loss(&logits, &rows, &mask)
    }

    /// Greedy answer for one sample.
    pub fn generate(
        &self,
        global: &VisionTokens,
        local: &VisionTokens,
        instruction: &TokenIds,
        max_len: usize,
    ) -> Result<TokenIds> {
        let (g, l) = self.visual_tokens(global, local)?;
        let mut prompt = instruction.clone();
        prompt.push(BOS);
        let p = build_prompt(&self.decoder, &g, &l, &prompt)?;
        generate_greedy(&self.decoder, &p.embeddings, max_len)
    }
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?
        .abs()?
        .flatten_all()?
        .max(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cfg() -> Config {
        let mut c = Config::desk();
        c.grid = [2, 2, 2];
        c.strides = [1, 2, 2];
        c.d_v = 8;
        c.d_t = 8;
        c.packer_heads = 2;
        c.decoder_layers = 1;
        c.decoder_heads = 2;
        c.decoder_max_len = 32;
        c.adapter_rank = 2;
        c
    }

    fn packed(n: usize, d: usize, v: f64) -> PackedTokens {
        PackedTokens {
            tokens: Tensor::full(v, (1, n, d), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn prompt_layout() {
        let mut s = ParamStore::new(0, DType::F64);
        let m = VisionLanguageModel::new(&mut s, &cfg(), 20).unwrap();
        let p = build_prompt(&m.decoder, &packed(4, 8, 1.0), &packed(4, 8, 2.0), &vec![7; 10]).unwrap();
        assert_eq!(p.len(), 2 + 8 + 10);
        assert_eq!(p.embeddings.dims(), &[1, 20, 8]);
        assert_eq!(p.segments[0], Segment::GlobalVisual);
        assert_eq!(p.segments[5], Segment::LocalVisual);
        assert_eq!(p.segments[10], Segment::Text);
        let empty = build_prompt(&m.decoder, &packed(4, 8, 1.0), &packed(4, 8, 2.0), &vec![]).unwrap();
        assert_eq!(empty.len(), 10);
        let bad = build_prompt(&m.decoder, &packed(4, 6, 1.0), &packed(4, 8, 2.0), &vec![]);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn unknown_adapter_target_is_rejected() {
        let mut s = ParamStore::new(0, DType::F64);
        let mut m = VisionLanguageModel::new(&mut s, &cfg(), 20).unwrap();
        let r = apply_low_rank_adapters(&mut s, &mut m.decoder, &["attn.x".to_string()], 2, 4.0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn rank_zero_and_zero_init_are_identity() {
        let c = cfg();
        let mut s = ParamStore::new(0, DType::F64);
        let mut m = VisionLanguageModel::new(&mut s, &c, 20).unwrap();
        let x = m.decoder.embed_ids(&[vec![3, 8, 9, 10]]).unwrap();
        let base = m.decoder.forward(&x).unwrap();
        let none = apply_low_rank_adapters(&mut s, &mut m.decoder, &c.adapter_targets, 0, 16.0).unwrap();
        assert!(none.is_empty());
        assert_eq!(max_abs_diff(&base, &m.decoder.forward(&x).unwrap()).unwrap(), 0.0);
        m.attach_adapters(&mut s, &c).unwrap();
        assert_eq!(m.adapters.len(), 2 * 4);
        assert_eq!(max_abs_diff(&base, &m.decoder.forward(&x).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn text_rows_mask_answer_and_eos() {
        let (rows, mask) = text_rows(&[vec![9, 9], vec![8]], &[vec![11], vec![12, 13]]);
        assert_eq!(rows[0], vec![9, 9, BOS, 11, EOS]);
        assert_eq!(rows[1], vec![8, BOS, 12, 13, EOS]);
        assert_eq!(mask[0], vec![false, false, false, true, true]);
        assert_eq!(mask[1], vec![false, false, true, true, true]);
    }

    #[test]
    fn loss_is_conditioned_on_instruction() {
        let c = cfg();
        let mut s = ParamStore::new(0, DType::F64);
        let m = VisionLanguageModel::new(&mut s, &c, 20).unwrap();
        let feats = Tensor::randn(0f64, 1.0, (1, 8, 8), &Device::Cpu).unwrap();
        let mut batch = InstructionBatch {
            global: feats.clone(),
            local: feats,
            grid_dims: [2, 2, 2],
            instructions: vec![vec![9, 10]],
            answers: vec![vec![11, 12]],
        };
        let a = m.loss(&batch, false).unwrap().to_scalar::<f64>().unwrap();
        assert!(a.is_finite() && a > 0.0);
        batch.instructions[0][0] = 15;
        let b = m.loss(&batch, false).unwrap().to_scalar::<f64>().unwrap();
        assert_ne!(a, b);
    }
}
