mod oracles;
mod support;

use hsenet::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, Stage};
use hsenet::decoder::templates::{Task, TemplateBank};
use hsenet::pipeline::{
    dump_scores, generation_report, predict, retrieval_report, stage2_validation, train_stage1, train_stage2, vqa_report,
    Corpus, Finetuner,
};
use hsenet::synthdata::build_corpus;
use hsenet::train::LossLog;
use hsenet::Error;

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let cfg = support::tiny_pipeline_config();
    cfg.validate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus");
    build_corpus(cfg.corpus_size, cfg.seed, cfg.volume_dims, cfg.max_lesions, &data).unwrap();
    let corpus = Corpus::load(&data, &cfg).unwrap();
    let mut log = LossLog::default();

    let s1 = train_stage1(&cfg, &corpus, &mut log).unwrap();
    let r1 = retrieval_report(&s1.stage1, &corpus, "retrieval").unwrap();
    r1.validate().unwrap();
    let g = r1.get("gallery").unwrap();
    assert_eq!(g, cfg.corpus_size as f64);
    assert_eq!(r1.get("r@50"), Some(100.0));

    let ck = dir.path().join("stage1.safetensors");
    save_checkpoint(&ck, &s1.store.tensors(), &CheckpointManifest::new(Stage::Stage1, 0, &cfg.hash(), cfg.seed)).unwrap();
    let loaded = load_checkpoint(&ck, Some(&cfg.hash()), false).unwrap();
    assert!(matches!(loaded.require_stage(&[Stage::Stage2], "finetune-report"), Err(Error::State(_))));

    let s2 = train_stage2(&cfg, &corpus, Some(&loaded.tensors), &mut log).unwrap();
    let stage2 = s2.stage2.as_ref().unwrap();
    retrieval_report(stage2, &corpus, "retrieval").unwrap().validate().unwrap();
    let v = stage2_validation(&s2, &corpus, cfg.lambda_s).unwrap();
    assert!(v.total.is_finite() && v.consistency >= 0.0);
    let id = corpus.items[0].id.clone();
    let dump = dump_scores(stage2, &corpus, &id).unwrap();
    assert_eq!(dump.scores.len(), cfg.grid.iter().product::<usize>());
    assert!(dump.scores.iter().all(|s| *s > 0.0 && *s < 1.0));

    let mut ft = Finetuner::new(&cfg, corpus.vocab.len(), &s2.store.tensors()).unwrap();
    let cache = ft.features(&corpus).unwrap();
    let report = TemplateBank::builtin(Task::Report);
    ft.warmup_language_model(&corpus, &cache, &report, &mut log).unwrap();
    ft.finetune(&corpus, &cache, &report, cfg.report_epochs, cfg.report_lr, &mut log).unwrap();
    let preds = predict(&ft, &corpus, &cache, &report).unwrap();
    generation_report(&preds).unwrap().validate().unwrap();
    let vqa = TemplateBank::builtin(Task::Vqa);
    ft.finetune(&corpus, &cache, &vqa, cfg.vqa_epochs, cfg.vqa_lr, &mut log).unwrap();
    vqa_report(&predict(&ft, &corpus, &cache, &vqa).unwrap()).unwrap().validate().unwrap();

    for phase in ["stage1", "stage2", "lm", "report", "vqa"] {
        assert_eq!(log.epoch_means(phase).len(), 1, "{phase}");
    }
    assert!(log.entries.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn stage2_without_stage1_is_a_state_error() {
    let cfg = support::tiny_pipeline_config();
    let dir = tempfile::tempdir().unwrap();
    build_corpus(4, 1, cfg.volume_dims, 1, dir.path()).unwrap();
    let corpus = Corpus::load(dir.path(), &cfg).unwrap();
    let err = train_stage2(&cfg, &corpus, None, &mut LossLog::default()).err().unwrap();
    assert!(matches!(err, Error::State(_)));
}
