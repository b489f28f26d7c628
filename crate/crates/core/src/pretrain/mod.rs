//! Two-stage contrastive alignment of volumes with their reports.
//!
//! Stage 1 trains the global 3D ViT, a text encoder and two projection heads
//! with symmetric InfoNCE. Stage 2 freezes all of that, trains the 2E3
//! encoder and a second text encoder with InfoNCE plus a semantic
//! consistency term anchoring paired similarities to the stage-1 ones.

mod loss;

pub use loss::{
    cosine_similarity_matrix, info_nce_symmetric, semantic_consistency_loss, stage2_loss, temperature,
    SimilarityBatch, UNIT_NORM_TOLERANCE,
};

use std::collections::BTreeSet;

use candle_core::{DType, Tensor};

use crate::config::Config;
use crate::encoders::{project_to_shared, Encoder2e3, HeadId, LatentEmbedding, ProjectionHead, TextEncoder, Vit3d};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tokenizer::TokenIds;
use crate::train::Optimizer;

pub const STAGE1_PREFIX: &str = "s1.";
pub const STAGE2_PREFIX: &str = "s2.";
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

/// A batch of paired volumes and reports in encoder-ready form.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `(B, N_p, patch_len)`.
    pub patches: Tensor,
    /// `(B, N_s, tokens, slice_patch_len)`; required by stage 2.
    pub slices: Option<Tensor>,
    pub texts: Vec<TokenIds>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    fn slices(&self) -> Result<&Tensor> {
        self.slices
            .as_ref()
            .ok_or_else(|| Error::Input("stage-2 batch is missing slice patches".into()))
    }
}

/// `exp(log τ)` clamped to `[TAU_MIN, TAU_MAX]`.
pub fn tau_from_log(log_tau: &Tensor) -> Result<Tensor> {
    Ok(log_tau.exp()?.clamp(TAU_MIN, TAU_MAX)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stage-1 models: global 3D ViT, text encoder, both heads and `log τ`.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub vision: Vit3d,
    pub text: TextEncoder,
    pub head_vision: ProjectionHead,
    pub head_text: ProjectionHead,
    pub log_tau: Tensor,
}

impl Stage1Model {
    pub fn new(store: &mut ParamStore, cfg: &Config, vocab_size: usize) -> Result<Self> {
        let p = "s1";
        Ok(Self {
            vision: Vit3d::new(
                store,
                &format!("{p}.vision"),
                cfg.patch_len(),
                cfg.grid,
                cfg.d_v,
                cfg.vit_depth,
                cfg.heads,
            )?,
            text: TextEncoder::new(
                store,
                &format!("{p}.text"),
                vocab_size,
                cfg.text_max_len,
                cfg.d_v,
                cfg.text_layers,
                cfg.heads,
            )?,
            head_vision: ProjectionHead::new(store, p, HeadId::Stage1Vision, cfg.d_v, cfg.d_l)?,
            head_text: ProjectionHead::new(store, p, HeadId::Stage1Text, cfg.d_v, cfg.d_l)?,
            log_tau: store.get_or_init(&format!("{p}.log_tau"), &[], Init::Const(cfg.tau_init.ln()))?,
        })
    }

    pub fn tau(&self) -> Result<Tensor> {
        tau_from_log(&self.log_tau)
    }

    pub fn embed_volumes(&self, patches: &Tensor) -> Result<LatentEmbedding> {
        project_to_shared(&self.vision.encode(patches)?.cls, &self.head_vision)
    }

    pub fn embed_texts(&self, texts: &[TokenIds]) -> Result<LatentEmbedding> {
        project_to_shared(&self.text.encode(texts)?.cls, &self.head_text)
    }

    pub fn similarities(&self, batch: &PairBatch) -> Result<SimilarityBatch> {
        let v = self.embed_volumes(&batch.patches)?;
        let t = self.embed_texts(&batch.texts)?;
        SimilarityBatch::new(cosine_similarity_matrix(&v.vectors, &t.vectors)?, self.tau()?)
    }

    pub fn loss(&self, batch: &PairBatch) -> Result<Tensor> {
        info_nce_symmetric(&self.similarities(batch)?)
    }
}

/// Stage-2 models: 2E3 encoder (with its slice encoder), second text
/// encoder, stage-2 heads and their own `log τ`.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub vision: Encoder2e3,
    pub text: TextEncoder,
    pub head_vision: ProjectionHead,
    pub head_text: ProjectionHead,
    pub log_tau: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Losses {
    pub total: f64,
    pub contrastive: f64,
    pub consistency: f64,
}

impl Stage2Model {
    pub fn new(store: &mut ParamStore, cfg: &Config, vocab_size: usize) -> Result<Self> {
        let p = "s2";
        Ok(Self {
            vision: Encoder2e3::new(store, &format!("{p}.vision"), cfg)?,
            text: TextEncoder::new(
                store,
                &format!("{p}.text"),
                vocab_size,
                cfg.text_max_len,
                cfg.d_v,
                cfg.text_layers,
                cfg.heads,
            )?,
            head_vision: ProjectionHead::new(store, p, HeadId::Stage2Vision, cfg.d_v, cfg.d_l)?,
            head_text: ProjectionHead::new(store, p, HeadId::Stage2Text, cfg.d_v, cfg.d_l)?,
            log_tau: store.get_or_init(&format!("{p}.log_tau"), &[], Init::Const(cfg.tau_init.ln()))?,
        })
    }

    pub fn tau(&self) -> Result<Tensor> {
        tau_from_log(&self.log_tau)
    }

    pub fn embed_volumes(&self, patches: &Tensor, slices: &Tensor) -> Result<LatentEmbedding> {
        project_to_shared(&self.vision.encode(patches, slices)?.tokens.cls, &self.head_vision)
    }

    pub fn embed_texts(&self, texts: &[TokenIds]) -> Result<LatentEmbedding> {
        project_to_shared(&self.text.encode(texts)?.cls, &self.head_text)
    }

    pub fn similarities(&self, batch: &PairBatch) -> Result<SimilarityBatch> {
        let v = self.embed_volumes(&batch.patches, batch.slices()?)?;
        let t = self.embed_texts(&batch.texts)?;
        SimilarityBatch::new(cosine_similarity_matrix(&v.vectors, &t.vectors)?, self.tau()?)
    }

    /// Stage-2 objective against the frozen stage-1 model. Returns the loss
    /// tensor and its components.
    pub fn loss(&self, stage1: &Stage1Model, batch: &PairBatch, lambda_s: f64) -> Result<(Tensor, Stage2Losses)> {
        let anchor = stage1.similarities(batch)?;
        let s1_pairs = anchor.diagonal()?.detach();
        let tau1 = scalar(&anchor.temperature)?;
        let sims = self.similarities(batch)?;
        let cl = info_nce_symmetric(&sims)?;
        let sa = semantic_consistency_loss(&s1_pairs, &sims.diagonal()?, tau1)?;
        let total = stage2_loss(&cl, &sa, lambda_s)?;
        let parts = Stage2Losses {
            total: scalar(&total)?,
            contrastive: scalar(&cl)?,
            consistency: scalar(&sa)?,
        };
        Ok((total, parts))
    }

    /// Copies every stage-1 parameter with a stage-2 counterpart of the same
    /// role and shape (patch embedding, transformer blocks, text encoder,
    /// heads, temperature). The slice encoder and scorer keep their values.
    pub fn warm_start(store: &ParamStore) -> Result<usize> {
        let s1: Vec<String> = store.names().filter(|n| n.starts_with(STAGE1_PREFIX)).map(String::from).collect();
        let mut copied = 0;
        for name in s1 {
            let target = format!("{STAGE2_PREFIX}{}", &name[STAGE1_PREFIX.len()..]);
            if let (Some(src), Some(dst)) = (store.get(&name), store.get(&target)) {
                if src.dims() == dst.dims() {
                    dst.set(&src.as_tensor().copy()?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}

/// Which parameters a stage may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageState {
    pub stage: u8,
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl StageState {
    pub fn for_stage(stage: u8, store: &ParamStore) -> Result<Self> {
        let (train_prefix, frozen_prefix) = match stage {
            1 => (STAGE1_PREFIX, None),
            2 => (STAGE2_PREFIX, Some(STAGE1_PREFIX)),
            other => return Err(Error::State(format!("no pretraining stage {other}"))),
        };
        let names = store.name_set();
        Ok(Self {
            stage,
            trainable: names.iter().filter(|n| n.starts_with(train_prefix)).cloned().collect(),
            frozen: match frozen_prefix {
                Some(p) => names.iter().filter(|n| n.starts_with(p)).cloned().collect(),
                None => BTreeSet::new(),
            },
        })
    }
}

/// Owns parameters, models and optimizer state for one pretraining stage.
pub struct Pretrainer {
    pub cfg: Config,
    pub store: ParamStore,
    pub stage1: Stage1Model,
    pub stage2: Option<Stage2Model>,
    pub state: StageState,
    optimizer: Optimizer,
}

impl Pretrainer {
    /// Fresh stage-1 trainer.
    pub fn stage1(cfg: &Config, vocab_size: usize, dtype: DType, total_steps: usize) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed, dtype);
        let stage1 = Stage1Model::new(&mut store, cfg, vocab_size)?;
        let state = StageState::for_stage(1, &store)?;
        let optimizer = Optimizer::new(store.vars_matching(&[STAGE1_PREFIX]), cfg.lr, cfg.weight_decay, total_steps)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stage1,
            stage2: None,
            state,
            optimizer,
        })
    }

    /// Stage-2 trainer on top of trained stage-1 parameters. `stage1_params`
    /// must contain every stage-1 parameter.
    pub fn stage2(
        cfg: &Config,
        vocab_size: usize,
        stage1_params: Option<&std::collections::BTreeMap<String, Tensor>>,
        dtype: DType,
        total_steps: usize,
        warm_start: bool,
    ) -> Result<Self> {
        let params = stage1_params
            .ok_or_else(|| Error::State("stage 2 requires a stage-1 checkpoint".into()))?;
        let mut s1_store = ParamStore::new(cfg.seed, dtype);
        let stage1 = Stage1Model::new(&mut s1_store, cfg, vocab_size)?;
        s1_store.load_from(params)?;
        let mut store = s1_store;
        let stage2 = Stage2Model::new(&mut store, cfg, vocab_size)?;
        if warm_start {
            Stage2Model::warm_start(&store)?;
        }
        let state = StageState::for_stage(2, &store)?;
        let optimizer = Optimizer::new(store.vars_matching(&[STAGE2_PREFIX]), cfg.lr, cfg.weight_decay, total_steps)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stage1,
            stage2: Some(stage2),
            state,
            optimizer,
        })
    }

    pub fn stage(&self) -> u8 {
        self.state.stage
    }

    pub fn steps_taken(&self) -> usize {
        self.optimizer.steps_taken()
    }

    pub fn stage1_step(&mut self, batch: &PairBatch) -> Result<f64> {
        if self.state.stage != 1 {
            return Err(Error::State(format!(
                "stage-1 step requested while in stage {}",
                self.state.stage
            )));
        }
        let loss = self.stage1.loss(batch)?;
        let value = scalar(&loss)?;
        self.optimizer.step(&loss)?;
        Ok(value)
    }

    pub fn stage2_step(&mut self, batch: &PairBatch) -> Result<Stage2Losses> {
        let stage2 = match (&self.stage2, self.state.stage) {
            (Some(m), 2) => m,
            _ => {
                return Err(Error::State(format!(
                    "stage-2 step requested while in stage {}",
                    self.state.stage
                )))
            }
        };
        let (loss, parts) = stage2.loss(&self.stage1, batch, self.cfg.lambda_s)?;
        self.optimizer.step(&loss)?;
        Ok(parts)
    }

    /// Stage-2 losses without an update.
    pub fn stage2_eval(&self, batch: &PairBatch, lambda_s: f64) -> Result<Stage2Losses> {
        let m = self
            .stage2
            .as_ref()
            .ok_or_else(|| Error::State("no stage-2 model".into()))?;
        Ok(m.loss(&self.stage1, batch, lambda_s)?.1)
    }
}
