//! Subcommand bodies. Each validates its inputs first; with `dry_run` set
//! it stops there and creates no run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use hsenet::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointManifest, Stage};
use hsenet::decoder::templates::{Task, TemplateBank};
use hsenet::error::{Error, Result};
use hsenet::eval::MetricReport;
use hsenet::packer::stride_sweep;
use hsenet::pipeline::{
    dump_scores, generation_report, predict, retrieval_report, stage2_validation, train_stage1, train_stage2, vqa_report,
    Corpus, FeatureCache, Finetuner, Prediction,
};
use hsenet::pretrain::Pretrainer;
use hsenet::synthdata::{build_corpus, CorpusManifest, MANIFEST_FILE as CORPUS_MANIFEST};
use hsenet::train::LossLog;
use hsenet::Config;

use crate::run::{RunDir, RunManifest, CHECKPOINT_FILE};

/// Resolved global options shared by every subcommand.
pub struct Ctx {
    pub cfg: Config,
    pub command: String,
    pub argv: Vec<String>,
    pub run_root: PathBuf,
    pub dry_run: bool,
    pub allow_mismatch: bool,
}

impl Ctx {
    fn manifest(&self) -> RunManifest {
        RunManifest::new(&self.command, self.argv.clone(), &self.cfg)
    }

    fn check_corpus(&self, dir: &Path) -> Result<CorpusManifest> {
        let m = CorpusManifest::load(dir)?;
        if m.records.is_empty() {
            return Err(Error::Input(format!("corpus at {} is empty", dir.display())));
        }
        Ok(m)
    }

    fn check_checkpoint(&self, path: Option<&Path>, allowed: &[Stage]) -> Result<PathBuf> {
        let consumer = self.command.as_str();
        let path = path.ok_or_else(|| {
            let names: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
            Error::State(format!("{consumer} requires a {} checkpoint (--checkpoint)", names.join(" or ")))
        })?;
        let m = read_manifest(path)?;
        let probe = Checkpoint {
            manifest: m.clone(),
            tensors: Default::default(),
        };
        probe.require_stage(allowed, consumer)?;
        if m.config_hash != self.cfg.hash() && !self.allow_mismatch {
            return Err(Error::Compatibility(format!(
                "{} was written with config {}, current config is {} (pass --allow-config-mismatch to override)",
                path.display(),
                m.config_hash,
                self.cfg.hash()
            )));
        }
        Ok(path.to_path_buf())
    }

    fn load(&self, path: &Path) -> Result<Checkpoint> {
        load_checkpoint(path, Some(&self.cfg.hash()), self.allow_mismatch)
    }

    fn dry(&self, what: &str) -> Result<Option<PathBuf>> {
        println!("dry run: {} would {what} ({})", self.command, self.cfg.summary());
        Ok(None)
    }

    fn open_run(&self, corpus: Option<&Path>, checkpoint: Option<&Path>) -> Result<(RunDir, Option<Corpus>)> {
        let mut m = self.manifest();
        let loaded = match corpus {
            Some(dir) => {
                let c = Corpus::load(dir, &self.cfg)?;
                m.corpus = Some(dir.display().to_string());
                m.corpus_manifest_sha256 = Some(c.manifest_sha256.clone());
                m.add_input(&dir.join(CORPUS_MANIFEST))?;
                Some(c)
            }
            None => None,
        };
        if let Some(p) = checkpoint {
            m.add_input(p)?;
        }
        Ok((RunDir::create(&self.run_root, m)?, loaded))
    }

    fn save(&self, run: &mut RunDir, stage: Stage, epoch: usize, tensors: &BTreeMap<String, Tensor>, metrics: &[MetricReport]) -> Result<()> {
        let mut man = CheckpointManifest::new(stage, epoch, &self.cfg.hash(), self.cfg.seed);
        for r in metrics {
            for (k, v) in &r.values {
                man.metrics.insert(format!("{}.{k}", r.task), *v);
            }
        }
        save_checkpoint(&run.file(CHECKPOINT_FILE), tensors, &man)?;
        run.record(CHECKPOINT_FILE)
    }
}

fn print_reports(reports: &[MetricReport]) {
    for r in reports {
        println!("{}", r.table());
    }
}

fn finish(run: RunDir) -> Result<Option<PathBuf>> {
    let path = run.finish()?;
    println!("run directory: {}", path.display());
    Ok(Some(path))
}

pub fn gen_data(ctx: &Ctx, out: Option<&Path>, n: Option<usize>) -> Result<Option<PathBuf>> {
    let n = n.unwrap_or(ctx.cfg.corpus_size);
    if n == 0 {
        return Err(Error::Input("corpus size must be positive".into()));
    }
    if ctx.dry_run {
        return ctx.dry(&format!("generate {n} samples at {:?}", ctx.cfg.volume_dims));
    }
    let mut run = RunDir::create(&ctx.run_root, ctx.manifest())?;
    let dir = out.map_or_else(|| run.file("corpus"), Path::to_path_buf);
    let m = build_corpus(n, ctx.cfg.seed, ctx.cfg.volume_dims, ctx.cfg.max_lesions, &dir)?;
    run.manifest.corpus_manifest_sha256 = Some(m.sha256()?);
    match out {
        Some(p) => run.manifest.corpus = Some(p.display().to_string()),
        None => {
            run.manifest.corpus = Some("corpus".into());
            run.record(&format!("corpus/{CORPUS_MANIFEST}"))?;
        }
    }
    let mut rep = MetricReport::new("corpus", n);
    for split in [hsenet::synthdata::Split::Train, hsenet::synthdata::Split::Test] {
        rep.insert(format!("{split:?}").to_lowercase(), m.ids(split).len() as f64);
    }
    run.write_metrics(&[rep])?;
    println!("corpus: {}", dir.display());
    finish(run)
}

pub fn pretrain_stage1(ctx: &Ctx, corpus: &Path) -> Result<Option<PathBuf>> {
    ctx.check_corpus(corpus)?;
    if ctx.dry_run {
        return ctx.dry("train the 3D ViT and text encoder contrastively");
    }
    let (mut run, c) = ctx.open_run(Some(corpus), None)?;
    let c = c.expect("corpus loaded");
    let mut log = LossLog::default();
    let tr = train_stage1(&ctx.cfg, &c, &mut log)?;
    run.write_losses(&log)?;
    let reports = vec![retrieval_report(&tr.stage1, &c, "retrieval")?];
    ctx.save(&mut run, Stage::Stage1, ctx.cfg.stage1_epochs, &tr.store.tensors(), &reports)?;
    run.write_metrics(&reports)?;
    print_reports(&reports);
    finish(run)
}

pub fn pretrain_stage2(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>) -> Result<Option<PathBuf>> {
    ctx.check_corpus(corpus)?;
    let ck = ctx.check_checkpoint(checkpoint, &[Stage::Stage1])?;
    if ctx.dry_run {
        return ctx.dry("train the 2E3 encoder against the frozen stage-1 model");
    }
    let (mut run, c) = ctx.open_run(Some(corpus), Some(&ck))?;
    let c = c.expect("corpus loaded");
    let s1 = ctx.load(&ck)?;
    let mut log = LossLog::default();
    let tr = train_stage2(&ctx.cfg, &c, Some(&s1.tensors), &mut log)?;
    run.write_losses(&log)?;
    let stage2 = tr.stage2.as_ref().ok_or_else(|| Error::State("stage-2 model missing".into()))?;
    let mut val = MetricReport::new("validation", 1);
    let v = stage2_validation(&tr, &c, ctx.cfg.lambda_s)?;
    val.insert("total", v.total);
    val.insert("contrastive", v.contrastive);
    val.insert("consistency", v.consistency);
    let reports = vec![retrieval_report(stage2, &c, "retrieval")?, val];
    ctx.save(&mut run, Stage::Stage2, ctx.cfg.stage2_epochs, &tr.store.tensors(), &reports)?;
    run.write_metrics(&reports)?;
    print_reports(&reports);
    finish(run)
}

fn write_predictions(run: &mut RunDir, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    run.write_output("predictions.jsonl", out.as_bytes())
}

/// A fine-tuner with every parameter of `ck` loaded, adapters included when
/// the checkpoint carries them.
fn restore(ctx: &Ctx, c: &Corpus, ck: &Checkpoint) -> Result<Finetuner> {
    let mut ft = Finetuner::new(&ctx.cfg, c.vocab.len(), &ck.tensors)?;
    if matches!(ck.manifest.stage, Stage::Report | Stage::Vqa) {
        if ctx.cfg.adapter_rank > 0 {
            ft.attach_adapters()?;
        }
        ft.store.load_from(&ck.tensors)?;
    }
    Ok(ft)
}

fn finetune(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>, task: Task) -> Result<Option<PathBuf>> {
    ctx.check_corpus(corpus)?;
    let (allowed, stage, epochs, lr): (&[Stage], Stage, usize, f64) = match task {
        Task::Report => (&[Stage::Stage2], Stage::Report, ctx.cfg.report_epochs, ctx.cfg.report_lr),
        Task::Vqa => (&[Stage::Stage2, Stage::Report], Stage::Vqa, ctx.cfg.vqa_epochs, ctx.cfg.vqa_lr),
    };
    let ck = ctx.check_checkpoint(checkpoint, allowed)?;
    if ctx.dry_run {
        return ctx.dry("instruction-tune the packers and decoder adapters");
    }
    let (mut run, c) = ctx.open_run(Some(corpus), Some(&ck))?;
    let c = c.expect("corpus loaded");
    let loaded = ctx.load(&ck)?;
    let mut ft = restore(ctx, &c, &loaded)?;
    let cache = ft.features(&c)?;
    let bank = TemplateBank::builtin(task);
    let mut log = LossLog::default();
    if loaded.manifest.stage == Stage::Stage2 {
        ft.warmup_language_model(&c, &cache, &TemplateBank::builtin(Task::Report), &mut log)?;
    }
    ft.finetune(&c, &cache, &bank, epochs, lr, &mut log)?;
    run.write_losses(&log)?;
    let preds = predict(&ft, &c, &cache, &bank)?;
    write_predictions(&mut run, &preds)?;
    let reports = vec![match task {
        Task::Report => generation_report(&preds)?,
        Task::Vqa => vqa_report(&preds)?,
    }];
    ctx.save(&mut run, stage, epochs, &ft.store.tensors(), &reports)?;
    run.write_metrics(&reports)?;
    print_reports(&reports);
    finish(run)
}

pub fn finetune_report(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>) -> Result<Option<PathBuf>> {
    finetune(ctx, corpus, checkpoint, Task::Report)
}

pub fn finetune_vqa(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>) -> Result<Option<PathBuf>> {
    finetune(ctx, corpus, checkpoint, Task::Vqa)
}

/// Without a checkpoint the freshly initialised stage-1 model is scored,
/// the untrained baseline.
pub fn eval_retrieval(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>) -> Result<Option<PathBuf>> {
    ctx.check_corpus(corpus)?;
    let ck = match checkpoint {
        Some(p) => Some(ctx.check_checkpoint(Some(p), &[Stage::Stage1, Stage::Stage2])?),
        None => None,
    };
    if ctx.dry_run {
        return ctx.dry("score volume-to-report retrieval on the held-out split");
    }
    let (mut run, c) = ctx.open_run(Some(corpus), ck.as_deref())?;
    let c = c.expect("corpus loaded");
    let report = match &ck {
        None => {
            let tr = Pretrainer::stage1(&ctx.cfg, c.vocab.len(), DType::F32, 0)?;
            retrieval_report(&tr.stage1, &c, "retrieval")?
        }
        Some(p) => {
            let loaded = ctx.load(p)?;
            match loaded.manifest.stage {
                Stage::Stage1 => {
                    let tr = Pretrainer::stage1(&ctx.cfg, c.vocab.len(), DType::F32, 0)?;
                    tr.store.load_from(&loaded.tensors)?;
                    retrieval_report(&tr.stage1, &c, "retrieval")?
                }
                _ => {
                    let tr = Pretrainer::stage2(&ctx.cfg, c.vocab.len(), Some(&loaded.tensors), DType::F32, 0, false)?;
                    tr.store.load_from(&loaded.tensors)?;
                    let s2 = tr.stage2.as_ref().ok_or_else(|| Error::State("stage-2 model missing".into()))?;
                    retrieval_report(s2, &c, "retrieval")?
                }
            }
        }
    };
    let reports = vec![report];
    run.write_metrics(&reports)?;
    print_reports(&reports);
    finish(run)
}

fn eval_task(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>, task: Task) -> Result<Option<PathBuf>> {
    ctx.check_corpus(corpus)?;
    let allowed: &[Stage] = match task {
        Task::Report => &[Stage::Report],
        Task::Vqa => &[Stage::Vqa],
    };
    let ck = ctx.check_checkpoint(checkpoint, allowed)?;
    if ctx.dry_run {
        return ctx.dry("decode the held-out split and score it");
    }
    let (mut run, c) = ctx.open_run(Some(corpus), Some(&ck))?;
    let c = c.expect("corpus loaded");
    let ft = restore(ctx, &c, &ctx.load(&ck)?)?;
    let cache: FeatureCache = ft.features(&c)?;
    let preds = predict(&ft, &c, &cache, &TemplateBank::builtin(task))?;
    write_predictions(&mut run, &preds)?;
    let reports = vec![match task {
        Task::Report => generation_report(&preds)?,
        Task::Vqa => vqa_report(&preds)?,
    }];
    run.write_metrics(&reports)?;
    print_reports(&reports);
    finish(run)
}

pub fn eval_generation(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>) -> Result<Option<PathBuf>> {
    eval_task(ctx, corpus, checkpoint, Task::Report)
}

pub fn eval_vqa(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>) -> Result<Option<PathBuf>> {
    eval_task(ctx, corpus, checkpoint, Task::Vqa)
}

pub fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad integer in {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated integers, got {s:?}"))
}

pub const TABLE5: [[usize; 3]; 4] = [[8, 2, 2], [4, 4, 4], [8, 4, 4], [4, 8, 8]];
pub const TABLE5_GRID: [usize; 3] = [8, 16, 16];

/// Without explicit strides the default table is swept on its own reference
/// grid; otherwise the configured grid applies.

pub fn stride_sweep_cmd(ctx: &Ctx, grid: Option<[usize; 3]>, strides: &[[usize; 3]]) -> Result<Option<PathBuf>> {
    let (grid, strides) = if strides.is_empty() {
        (grid.unwrap_or(TABLE5_GRID), TABLE5.to_vec())
    } else {
        (grid.unwrap_or(ctx.cfg.grid), strides.to_vec())
    };
    let rows = stride_sweep(grid, &strides)?;
    if ctx.dry_run {
        return ctx.dry(&format!("tabulate {} stride settings on grid {grid:?}", rows.len()));
    }
    let mut run = RunDir::create(&ctx.run_root, ctx.manifest())?;
    let fmt = |t: [usize; 3]| format!("{}x{}x{}", t[0], t[1], t[2]);
    let mut table = String::from("strides\tvoxel_dims\ttokens\n");
    let mut rep = MetricReport::new("stride_sweep", rows.len());
    for r in &rows {
        table.push_str(&format!("{}\t{}\t{}\n", fmt(r.strides), fmt(r.voxel_dims), r.tokens));
        rep.insert(format!("tokens@{}", fmt(r.strides)), r.tokens as f64);
    }
    print!("{table}");
    run.write_output("stride_sweep.tsv", table.as_bytes())?;
    run.write_metrics(&[rep])?;
    finish(run)
}

pub fn dump_scores_cmd(ctx: &Ctx, corpus: &Path, checkpoint: Option<&Path>, id: &str) -> Result<Option<PathBuf>> {
    let m = ctx.check_corpus(corpus)?;
    if !m.records.iter().any(|r| r.id == id) {
        return Err(Error::Input(format!("sample {id} is not in the corpus")));
    }
    let ck = ctx.check_checkpoint(checkpoint, &[Stage::Stage2, Stage::Report, Stage::Vqa])?;
    if ctx.dry_run {
        return ctx.dry(&format!("write per-patch 2E3 scores for {id}"));
    }
    let (mut run, c) = ctx.open_run(Some(corpus), Some(&ck))?;
    let c = c.expect("corpus loaded");
    let loaded = ctx.load(&ck)?;
    let tr = Pretrainer::stage2(&ctx.cfg, c.vocab.len(), Some(&loaded.tensors), DType::F32, 0, false)?;
    tr.store.load_from(&loaded.tensors)?;
    let s2 = tr.stage2.as_ref().ok_or_else(|| Error::State("stage-2 model missing".into()))?;
    let dump = dump_scores(s2, &c, id)?;
    let mut rep = MetricReport::new("scores", dump.scores.len());
    let n = dump.scores.len().max(1) as f64;
    rep.insert("mean", dump.scores.iter().map(|&s| s as f64).sum::<f64>() / n);
    rep.insert("max", dump.scores.iter().fold(f64::NEG_INFINITY, |a, &s| a.max(s as f64)));
    rep.insert("min", dump.scores.iter().fold(f64::INFINITY, |a, &s| a.min(s as f64)));
    run.write_output(&format!("scores-{id}.json"), serde_json::to_string_pretty(&dump)?.as_bytes())?;
    run.write_metrics(&[rep])?;
    finish(run)
}
