//! Drivers over a generated corpus: loading, both pretraining stages,
//! instruction tuning, evaluation and patch-score dumps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::Serialize;

use crate::config::Config;
use crate::decoder::templates::{fill, Task, TemplateBank};
use crate::decoder::{InstructionBatch, VisionLanguageModel, LM_NAME};
use crate::encoders::{patch_tensor, slice_tensor, PreparedVolume, VisionTokens};
use crate::error::{Error, Result};
use crate::eval::{
    bleu, corpus_nlg, map_at_k, recall_at_k, shared_label_relevance, vqa_accuracy, MetricReport, RankedRetrieval,
    VqaLevel,
};
use crate::params::ParamStore;
use crate::pretrain::{PairBatch, Pretrainer, Stage1Model, Stage2Losses, Stage2Model, STAGE1_PREFIX, STAGE2_PREFIX};
use crate::synthdata::{read_sample, CorpusManifest, Lesion, QaRecord, Split, VOCAB_FILE};
use crate::tokenizer::{TokenIds, Vocabulary};
use crate::train::{epoch_order, LossLog, Optimizer};
use crate::volumetrics::{extract_slices, normalize_volume, patchify, resize_volume, Volume};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const MAP_KS: [usize; 3] = [5, 10, 50];

/// Resizes, normalises, patchifies and slices one volume.
pub fn prepare_volume(vol: &Volume, cfg: &Config) -> Result<PreparedVolume> {
    if vol.channels() != cfg.channels {
        return Err(Error::Config(format!(
            "volume has {} channels, config expects {}",
            vol.channels(),
            cfg.channels
        )));
    }
    let mut v = if vol.spatial_dims() == cfg.volume_dims {
        vol.clone()
    } else {
        resize_volume(vol, cfg.volume_dims)?
    };
    if !v.is_normalized() {
        v = normalize_volume(&v)?;
    }
    let patches = patchify(&v, cfg.grid)?;
    let slices = extract_slices(&v, cfg.n_slices)?.resized(cfg.slice_size[0], cfg.slice_size[1])?;
    PreparedVolume::new(&patches, &slices, cfg.slice_patch)
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub split: Split,
    pub volume: PreparedVolume,
    pub report: String,
    pub report_ids: TokenIds,
    pub vqa: Vec<QaRecord>,
    pub lesions: Vec<Lesion>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest_sha256: String,
    pub vocab: Vocabulary,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn load(dir: &Path, cfg: &Config) -> Result<Self> {
        let manifest = CorpusManifest::load(dir)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let mut items = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let s = read_sample(dir, &rec.id)?;
            let volume = prepare_volume(&s.volume, cfg)?;
            let report_ids = vocab.encode(&s.report)?;
            items.push(CorpusItem {
                id: rec.id.clone(),
                split: rec.split,
                volume,
                report: s.report,
                report_ids,
                vqa: s.vqa,
                lesions: s.lesions,
            });
        }
        if items.is_empty() {
            return Err(Error::Input(format!("corpus at {} is empty", dir.display())));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest_sha256: manifest.sha256()?,
            vocab,
            items,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn find(&self, id: &str) -> Result<usize> {
        self.items
            .iter()
            .position(|it| it.id == id)
            .ok_or_else(|| Error::Input(format!("sample {id} is not in the corpus")))
    }

    pub fn pair_batch(&self, idx: &[usize], dtype: DType, with_slices: bool) -> Result<PairBatch> {
        let vols: Vec<&PreparedVolume> = idx.iter().map(|&i| &self.items[i].volume).collect();
        Ok(PairBatch {
            patches: patch_tensor(&vols, dtype)?,
            slices: if with_slices { Some(slice_tensor(&vols, dtype)?) } else { None },
            texts: idx.iter().map(|&i| self.items[i].report_ids.clone()).collect(),
        })
    }
}

/// Shuffled batches for one epoch; trailing batches of one are dropped since
/// a contrastive batch needs a negative.
pub fn contrastive_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    epoch_order(indices.len(), seed, epoch)
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.iter().map(|&k| indices[k]).collect())
        .collect()
}

pub fn train_stage1(cfg: &Config, corpus: &Corpus, log: &mut LossLog) -> Result<Pretrainer> {
    let train = corpus.indices(Split::Train);
    let per_epoch = contrastive_batches(&train, cfg.batch_size, cfg.seed, 0).len();
    let mut tr = Pretrainer::stage1(cfg, corpus.vocab.len(), DType::F32, cfg.stage1_epochs * per_epoch)?;
    for epoch in 0..cfg.stage1_epochs {
        for b in contrastive_batches(&train, cfg.batch_size, cfg.seed, epoch) {
            let batch = corpus.pair_batch(&b, DType::F32, false)?;
            let loss = tr.stage1_step(&batch)?;
            log.push("stage1", epoch, tr.steps_taken(), loss)?;
        }
        log::info!("stage 1 epoch {epoch}: mean loss {:.4}", log.epoch_means("stage1")[epoch]);
    }
    Ok(tr)
}

pub fn train_stage2(
    cfg: &Config,
    corpus: &Corpus,
    stage1_params: Option<&BTreeMap<String, Tensor>>,
    log: &mut LossLog,
) -> Result<Pretrainer> {
    let train = corpus.indices(Split::Train);
    let per_epoch = contrastive_batches(&train, cfg.batch_size, cfg.seed, 0).len();
    let mut tr = Pretrainer::stage2(
        cfg,
        corpus.vocab.len(),
        stage1_params,
        DType::F32,
        cfg.stage2_epochs * per_epoch,
        cfg.stage2_warm_start,
    )?;
    for epoch in 0..cfg.stage2_epochs {
        for b in contrastive_batches(&train, cfg.batch_size, cfg.seed ^ 0x2e3, epoch) {
            let batch = corpus.pair_batch(&b, DType::F32, true)?;
            let parts = tr.stage2_step(&batch)?;
            let step = tr.steps_taken();
            log.push("stage2", epoch, step, parts.total)?;
            log.push("stage2_contrastive", epoch, step, parts.contrastive)?;
            log.push("stage2_consistency", epoch, step, parts.consistency)?;
        }
        log::info!("stage 2 epoch {epoch}: mean loss {:.4}", log.epoch_means("stage2")[epoch]);
    }
    Ok(tr)
}

/// Fixed (unshuffled) batches of the held-out split.
pub fn validation_batches(corpus: &Corpus, batch_size: usize) -> Vec<Vec<usize>> {
    corpus
        .indices(Split::Test)
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Mean stage-2 losses over the held-out split.
pub fn stage2_validation(tr: &Pretrainer, corpus: &Corpus, lambda_s: f64) -> Result<Stage2Losses> {
    let batches = validation_batches(corpus, tr.cfg.batch_size);
    if batches.is_empty() {
        return Err(Error::Input("held-out split too small for validation".into()));
    }
    let mut acc = Stage2Losses {
        total: 0.0,
        contrastive: 0.0,
        consistency: 0.0,
    };
    for b in &batches {
        let l = tr.stage2_eval(&corpus.pair_batch(b, DType::F32, true)?, lambda_s)?;
        acc.total += l.total;
        acc.contrastive += l.contrastive;
        acc.consistency += l.consistency;
    }
    let n = batches.len() as f64;
    Ok(Stage2Losses {
        total: acc.total / n,
        contrastive: acc.contrastive / n,
        consistency: acc.consistency / n,
    })
}

/// A model that maps volumes and reports into the shared latent space.
pub trait Retriever {
    fn needs_slices(&self) -> bool;
    fn volume_embeddings(&self, batch: &PairBatch) -> Result<Tensor>;
    fn text_embeddings(&self, texts: &[TokenIds]) -> Result<Tensor>;
}

impl Retriever for Stage1Model {
    fn needs_slices(&self) -> bool {
        false
    }

    fn volume_embeddings(&self, batch: &PairBatch) -> Result<Tensor> {
        Ok(self.embed_volumes(&batch.patches)?.vectors)
    }

    fn text_embeddings(&self, texts: &[TokenIds]) -> Result<Tensor> {
        Ok(self.embed_texts(texts)?.vectors)
    }
}

impl Retriever for Stage2Model {
    fn needs_slices(&self) -> bool {
        true
    }

    fn volume_embeddings(&self, batch: &PairBatch) -> Result<Tensor> {
        let slices = batch
            .slices
            .as_ref()
            .ok_or_else(|| Error::Input("2E3 retrieval needs slice patches".into()))?;
        Ok(self.embed_volumes(&batch.patches, slices)?.vectors)
    }

    fn text_embeddings(&self, texts: &[TokenIds]) -> Result<Tensor> {
        Ok(self.embed_texts(texts)?.vectors)
    }
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2()?)
}

const EMBED_CHUNK: usize = 16;

/// Queries are held-out volumes; the gallery is every report in the corpus,
/// with the query's own report as gold.
pub fn retrieval_scores<R: Retriever>(model: &R, corpus: &Corpus) -> Result<RankedRetrieval> {
    let queries = corpus.indices(Split::Test);
    if queries.is_empty() {
        return Err(Error::Input("no held-out samples to query".into()));
    }
    let mut q_emb = Vec::new();
    for chunk in queries.chunks(EMBED_CHUNK) {
        let b = corpus.pair_batch(chunk, DType::F32, model.needs_slices())?;
        q_emb.extend(rows_f64(&model.volume_embeddings(&b)?)?);
    }
    let all: Vec<usize> = (0..corpus.items.len()).collect();
    let mut g_emb = Vec::new();
    for chunk in all.chunks(EMBED_CHUNK) {
        let texts: Vec<TokenIds> = chunk.iter().map(|&i| corpus.items[i].report_ids.clone()).collect();
        g_emb.extend(rows_f64(&model.text_embeddings(&texts)?)?);
    }
    let scores: Vec<Vec<f64>> = q_emb
        .iter()
        .map(|q| g_emb.iter().map(|g| q.iter().zip(g).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let majors = |i: usize| -> Vec<usize> { corpus.items[i].lesions.iter().map(|l| l.major_region).collect() };
    let q_labels: Vec<Vec<usize>> = queries.iter().map(|&i| majors(i)).collect();
    let g_labels: Vec<Vec<usize>> = all.iter().map(|&i| majors(i)).collect();
    RankedRetrieval::new(scores, queries.clone())?.with_relevance(shared_label_relevance(&q_labels, &g_labels))
}

/// R@K and MAP@K for the volume → report direction. `K` larger than the
/// gallery is clipped to the gallery size.
pub fn retrieval_report<R: Retriever>(model: &R, corpus: &Corpus, task: &str) -> Result<MetricReport> {
    let r = retrieval_scores(model, corpus)?;
    let g = r.gallery_size();
    let mut rep = MetricReport::new(task, r.num_queries());
    for k in RECALL_KS {
        rep.insert(format!("r@{k}"), recall_at_k(&r, k.min(g))?);
    }
    for k in MAP_KS {
        match map_at_k(&r, k.min(g)) {
            Ok(v) => rep.insert(format!("map@{k}"), v),
            Err(e) => log::warn!("map@{k} unavailable: {e}"),
        }
    }
    rep.insert("gallery", g as f64);
    Ok(rep)
}

/// Frozen-encoder patch features of every corpus item.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub global: Vec<Vec<f32>>,
    pub local: Vec<Vec<f32>>,
    pub num_patches: usize,
    pub dim: usize,
    pub grid_dims: [usize; 3],
}

impl FeatureCache {
    pub fn build(s1: &Stage1Model, s2: &Stage2Model, corpus: &Corpus) -> Result<Self> {
        let mut global = Vec::with_capacity(corpus.items.len());
        let mut local = Vec::with_capacity(corpus.items.len());
        let mut shape = (0, 0, [0; 3]);
        let all: Vec<usize> = (0..corpus.items.len()).collect();
        for chunk in all.chunks(EMBED_CHUNK) {
            let b = corpus.pair_batch(chunk, DType::F32, true)?;
            let g = s1.vision.encode(&b.patches)?;
            let slices = b.slices.as_ref().expect("slices requested");
            let l = s2.vision.encode(&b.patches, slices)?.tokens;
            let (_, n, d) = g.tokens.dims3()?;
            shape = (n, d, g.grid_dims);
            for i in 0..chunk.len() {
                global.push(g.tokens.get(i)?.detach().flatten_all()?.to_vec1::<f32>()?);
                local.push(l.tokens.get(i)?.detach().flatten_all()?.to_vec1::<f32>()?);
            }
        }
        Ok(Self {
            global,
            local,
            num_patches: shape.0,
            dim: shape.1,
            grid_dims: shape.2,
        })
    }

    fn tensor(&self, rows: &[&Vec<f32>]) -> Result<Tensor> {
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::from_vec(data, (rows.len(), self.num_patches, self.dim), &Device::Cpu)?)
    }

    pub fn streams(&self, item: usize) -> Result<(VisionTokens, VisionTokens)> {
        let mk = |t: Tensor| -> Result<VisionTokens> {
            Ok(VisionTokens {
                cls: Tensor::zeros((1, self.dim), DType::F32, &Device::Cpu)?,
                tokens: t,
                grid_dims: self.grid_dims,
            })
        };
        Ok((
            mk(self.tensor(&[&self.global[item]])?)?,
            mk(self.tensor(&[&self.local[item]])?)?,
        ))
    }
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub item: usize,
    pub instruction: TokenIds,
    pub answer: TokenIds,
    pub answer_text: String,
}

fn instruction_for(bank: &TemplateBank, vocab: &Vocabulary, template: &str, qa: Option<&QaRecord>) -> Result<TokenIds> {
    let text = match (bank.task, qa) {
        (Task::Vqa, Some(q)) => fill(template, q.shape.adjective()),
        _ => template.to_string(),
    };
    vocab.encode(&text)
}

/// Examples of `task` for `items`. With `epoch = None` the canonical
/// template is used (evaluation); otherwise templates are drawn per
/// `(seed, item, epoch)`.
pub fn task_examples(
    corpus: &Corpus,
    items: &[usize],
    bank: &TemplateBank,
    seed: u64,
    epoch: Option<usize>,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for &i in items {
        let it = &corpus.items[i];
        match bank.task {
            Task::Report => {
                let t = epoch.map_or(bank.canonical(), |e| bank.pick(seed, i, e));
                out.push(Example {
                    item: i,
                    instruction: instruction_for(bank, &corpus.vocab, t, None)?,
                    answer: it.report_ids.clone(),
                    answer_text: it.report.clone(),
                });
            }
            Task::Vqa => {
                for (k, qa) in it.vqa.iter().enumerate() {
                    let t = epoch.map_or(bank.canonical(), |e| bank.pick(seed, i * 8 + k, e));
                    out.push(Example {
                        item: i,
                        instruction: instruction_for(bank, &corpus.vocab, t, Some(qa))?,
                        answer: corpus.vocab.encode(&qa.answer)?,
                        answer_text: qa.answer.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Encoders (frozen), packers and decoder sharing one parameter store.
pub struct Finetuner {
    pub cfg: Config,
    pub store: ParamStore,
    pub stage1: Stage1Model,
    pub stage2: Stage2Model,
    pub vlm: VisionLanguageModel,
}

impl Finetuner {
    /// Builds every module and loads the stage-1 and stage-2 parameters.
    pub fn new(cfg: &Config, vocab_size: usize, encoder_params: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed, DType::F32);
        let stage1 = Stage1Model::new(&mut store, cfg, vocab_size)?;
        let stage2 = Stage2Model::new(&mut store, cfg, vocab_size)?;
        let vlm = VisionLanguageModel::new(&mut store, cfg, vocab_size)?;
        let encoder_names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(STAGE1_PREFIX) || n.starts_with(STAGE2_PREFIX))
            .map(String::from)
            .collect();
        for name in &encoder_names {
            let value = encoder_params
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks encoder parameter {name}")))?;
            store.set(name, value).map_err(|e| Error::Compatibility(format!("{name}: {e}")))?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stage1,
            stage2,
            vlm,
        })
    }

    pub fn features(&self, corpus: &Corpus) -> Result<FeatureCache> {
        FeatureCache::build(&self.stage1, &self.stage2, corpus)
    }

    pub fn attach_adapters(&mut self) -> Result<()> {
        let cfg = self.cfg.clone();
        self.vlm.attach_adapters(&mut self.store, &cfg)
    }

    fn batch(&self, examples: &[&Example], cache: &FeatureCache) -> Result<InstructionBatch> {
        let g: Vec<&Vec<f32>> = examples.iter().map(|e| &cache.global[e.item]).collect();
        let l: Vec<&Vec<f32>> = examples.iter().map(|e| &cache.local[e.item]).collect();
        Ok(InstructionBatch {
            global: cache.tensor(&g)?,
            local: cache.tensor(&l)?,
            grid_dims: cache.grid_dims,
            instructions: examples.iter().map(|e| e.instruction.clone()).collect(),
            answers: examples.iter().map(|e| e.answer.clone()).collect(),
        })
    }

    pub fn loss(&self, examples: &[&Example], cache: &FeatureCache, blank: bool) -> Result<Tensor> {
        self.vlm.loss(&self.batch(examples, cache)?, blank)
    }

    /// Trains with `trainable` for `epochs` over examples regenerated per
    /// epoch by `make`. `blank` hides the visual tokens.
    #[allow(clippy::too_many_arguments)]
    fn train_loop(
        &mut self,
        phase: &str,
        trainable: Vec<String>,
        lr: f64,
        epochs: usize,
        blank: bool,
        cache: &FeatureCache,
        make: &dyn Fn(usize) -> Result<Vec<Example>>,
        log: &mut LossLog,
    ) -> Result<()> {
        let per_epoch = make(0)?.len().div_ceil(self.cfg.batch_size.max(1));
        let vars = trainable
            .iter()
            .map(|n| self.store.get(n).cloned().ok_or_else(|| Error::Config(format!("unknown parameter {n}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut opt = Optimizer::new(vars, lr, self.cfg.weight_decay, epochs * per_epoch)?;
        for epoch in 0..epochs {
            let examples = make(epoch)?;
            let order = epoch_order(examples.len(), self.cfg.seed ^ 0xdec, epoch);
            for chunk in order.chunks(self.cfg.batch_size.max(1)) {
                let batch: Vec<&Example> = chunk.iter().map(|&k| &examples[k]).collect();
                let loss = self.loss(&batch, cache, blank)?;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                opt.step(&loss)?;
                log.push(phase, epoch, opt.steps_taken(), value)?;
            }
            log::info!("{phase} epoch {epoch}: mean loss {:.4}", log.epoch_means(phase)[epoch]);
        }
        Ok(())
    }

    /// Text-only warmup of the base language model (visual blocks zeroed).
    pub fn warmup_language_model(
        &mut self,
        corpus: &Corpus,
        cache: &FeatureCache,
        bank: &TemplateBank,
        log: &mut LossLog,
    ) -> Result<()> {
        if !self.vlm.adapters.is_empty() {
            return Err(Error::State("language-model warmup must precede adapter attachment".into()));
        }
        let train = corpus.indices(Split::Train);
        let names: Vec<String> = self
            .store
            .names()
            .filter(|n| n.starts_with(&format!("{LM_NAME}.")))
            .map(String::from)
            .collect();
        let seed = self.cfg.seed;
        let make = |e: usize| task_examples(corpus, &train, bank, seed, Some(e));
        let (lr, epochs) = (self.cfg.lm_lr, self.cfg.lm_epochs);
        self.train_loop("lm", names, lr, epochs, true, cache, &make, log)
    }

    /// Adapter, packer and marker training with the base model frozen.
    pub fn finetune(
        &mut self,
        corpus: &Corpus,
        cache: &FeatureCache,
        bank: &TemplateBank,
        epochs: usize,
        lr: f64,
        log: &mut LossLog,
    ) -> Result<()> {
        if self.vlm.adapters.is_empty() && self.cfg.adapter_rank > 0 {
            self.attach_adapters()?;
        }
        let train = corpus.indices(Split::Train);
        let names = self.vlm.finetune_trainable(&self.store);
        let seed = self.cfg.seed;
        let make = |e: usize| task_examples(corpus, &train, bank, seed, Some(e));
        let phase = match bank.task {
            Task::Report => "report",
            Task::Vqa => "vqa",
        };
        self.train_loop(phase, names, lr, epochs, false, cache, &make, log)
    }

    /// Fine-tunes on a single example until greedy decoding reproduces its
    /// answer. Returns the number of steps taken, or `None` after
    /// `max_steps`.
    pub fn overfit(&mut self, example: &Example, cache: &FeatureCache, max_steps: usize, lr: f64, check_every: usize) -> Result<Option<usize>> {
        if self.vlm.adapters.is_empty() && self.cfg.adapter_rank > 0 {
            self.attach_adapters()?;
        }
        let vars = self
            .vlm
            .finetune_trainable(&self.store)
            .iter()
            .filter_map(|n| self.store.get(n).cloned())
            .collect();
        let mut opt = Optimizer::new(vars, lr, 0.0, 0)?;
        for step in 1..=max_steps {
            let loss = self.loss(&[example], cache, false)?;
            opt.step(&loss)?;
            if step % check_every.max(1) == 0 && self.generate(cache, example.item, &example.instruction)? == example.answer {
                return Ok(Some(step));
            }
        }
        Ok(None)
    }

    pub fn generate(&self, cache: &FeatureCache, item: usize, instruction: &TokenIds) -> Result<TokenIds> {
        let (g, l) = cache.streams(item)?;
        self.vlm.generate(&g, &l, instruction, self.cfg.generate_max_len)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Prediction {
    pub id: String,
    pub instruction: String,
    pub prediction: String,
    pub reference: String,
}

/// Greedy answers for held-out examples under the canonical template.
pub fn predict(ft: &Finetuner, corpus: &Corpus, cache: &FeatureCache, bank: &TemplateBank) -> Result<Vec<Prediction>> {
    let test = corpus.indices(Split::Test);
    task_examples(corpus, &test, bank, 0, None)?
        .iter()
        .map(|ex| {
            let out = ft.generate(cache, ex.item, &ex.instruction)?;
            Ok(Prediction {
                id: corpus.items[ex.item].id.clone(),
                instruction: corpus.vocab.decode(&ex.instruction),
                prediction: corpus.vocab.decode(&out),
                reference: ex.answer_text.clone(),
            })
        })
        .collect()
}

/// Mean BLEU-1 of predictions against the references of the next sample
/// (a fixed derangement), the pairing-free baseline.
pub fn shuffled_bleu1(preds: &[Prediction]) -> f64 {
    let n = preds.len();
    if n < 2 {
        return 0.0;
    }
    (0..n).map(|i| bleu(&preds[i].prediction, &preds[(i + 1) % n].reference, 1)).sum::<f64>() / n as f64
}

pub fn generation_report(preds: &[Prediction]) -> Result<MetricReport> {
    let c: Vec<String> = preds.iter().map(|p| p.prediction.clone()).collect();
    let r: Vec<String> = preds.iter().map(|p| p.reference.clone()).collect();
    let mut rep = MetricReport::new("generation", preds.len());
    for (k, v) in corpus_nlg(&c, &r) {
        rep.insert(k, v);
    }
    rep.insert("bleu1_shuffled", shuffled_bleu1(preds));
    rep.insert("exact_match", 100.0 * c.iter().zip(&r).filter(|(a, b)| a == b).count() as f64 / preds.len().max(1) as f64);
    Ok(rep)
}

pub fn vqa_report(preds: &[Prediction]) -> Result<MetricReport> {
    let p: Vec<String> = preds.iter().map(|p| p.prediction.clone()).collect();
    let g: Vec<String> = preds.iter().map(|p| p.reference.clone()).collect();
    let mut rep = MetricReport::new("vqa", preds.len());
    rep.insert("major_acc", vqa_accuracy(&p, &g, VqaLevel::Major)?);
    rep.insert("minor_acc", vqa_accuracy(&p, &g, VqaLevel::Minor)?);
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreDump {
    pub id: String,
    pub grid_dims: [usize; 3],
    /// Row-major over `(D̂, Ŵ, Ĥ)`.
    pub scores: Vec<f32>,
}

/// Per-patch 2E3 scores for one sample.
pub fn dump_scores(stage2: &Stage2Model, corpus: &Corpus, id: &str) -> Result<ScoreDump> {
    let i = corpus.find(id)?;
    let b = corpus.pair_batch(&[i], DType::F32, true)?;
    let enc = stage2.vision.encode(&b.patches, b.slices.as_ref().expect("slices requested"))?;
    Ok(ScoreDump {
        id: id.to_string(),
        grid_dims: enc.tokens.grid_dims,
        scores: enc.scores.scores.detach().flatten_all()?.to_vec1()?,
    })
}
