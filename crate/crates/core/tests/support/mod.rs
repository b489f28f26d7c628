//! Criterion scenarios shared by the integration tests and the acceptance
//! runner. Each returns measurements; callers decide pass or fail.
#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use hsenet::config::Config;
use hsenet::decoder::{generation_loss, InstructionBatch, VisionLanguageModel};
use hsenet::encoders::VisionTokens;
use hsenet::eval::{bleu, map_at_k, meteor_simplified, recall_at_k, rouge, vqa_accuracy, RankedRetrieval, RougeVariant, VqaLevel};
use hsenet::gradcheck::{check_gradients, worst};
use hsenet::nn::l2_normalize;
use hsenet::packer::{merge_voxels, partition_voxels, reshape_to_grid, stride_sweep, voxel_index, SpatialPacker};
use hsenet::params::ParamStore;
use hsenet::pretrain::{
    cosine_similarity_matrix, info_nce_symmetric, semantic_consistency_loss, stage2_loss, PairBatch, Pretrainer,
    SimilarityBatch,
};
use hsenet::train::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles;

pub const LAMBDA_S: f64 = 0.1;
pub const TABLE5_STRIDES: [[usize; 3]; 4] = [[8, 2, 2], [4, 4, 4], [8, 4, 4], [4, 8, 8]];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossErrors {
    pub info_nce: f64,
    pub consistency: f64,
    pub combined: f64,
}

/// Worst deviations of the library losses from the brute-force oracles over
/// random instances with `B ≤ 8`, `d_l ≤ 16`. InfoNCE is compared in
/// absolute terms, the consistency and combined losses relative to
/// `max(1, |oracle|)`.
pub fn loss_oracle_errors(cases: usize, seed: u64) -> LossErrors {
    let mut r = rng(seed);
    let mut out = LossErrors::default();
    for _ in 0..cases {
        let b = r.random_range(1..=8usize);
        let d = r.random_range(1..=16usize);
        let tau = r.random_range(0.05..1.0);
        let v = oracles::unit_rows(&(0..b).map(|_| random_vec(&mut r, d)).collect::<Vec<_>>());
        let t = oracles::unit_rows(&(0..b).map(|_| random_vec(&mut r, d)).collect::<Vec<_>>());
        let vt = tensor(v.concat(), &[b, d]);
        let tt = tensor(t.concat(), &[b, d]);
        let sims = SimilarityBatch::new(cosine_similarity_matrix(&vt, &tt).unwrap(), tensor(vec![tau], &[])).unwrap();
        let cl = info_nce_symmetric(&sims).unwrap();
        let cl_oracle = oracles::info_nce(&oracles::dot_matrix(&v, &t), tau);
        out.info_nce = out.info_nce.max((scalar(&cl) - cl_oracle).abs());

        let s1 = random_vec(&mut r, b);
        let s2 = random_vec(&mut r, b);
        let sa = semantic_consistency_loss(&tensor(s1.clone(), &[b]), &tensor(s2.clone(), &[b]), tau).unwrap();
        let sa_oracle = oracles::consistency(&s1, &s2, tau);
        out.consistency = out.consistency.max(rel(scalar(&sa), sa_oracle));

        let total = stage2_loss(&cl, &sa, LAMBDA_S).unwrap();
        out.combined = out.combined.max(rel(scalar(&total), cl_oracle + LAMBDA_S * sa_oracle));
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub params: usize,
    pub worst: f64,
}

fn var(r: &mut ChaCha8Rng, shape: &[usize]) -> Var {
    Var::from_tensor(&tensor(random_vec(r, shape.iter().product()), shape)).unwrap()
}

fn report(name: &'static str, vars: &[(String, Var)], loss: impl Fn() -> hsenet::Result<Tensor>) -> GradReport {
    let params = vars.iter().map(|(_, v)| v.elem_count()).sum();
    let checks = check_gradients(vars, 1e-5, loss).unwrap();
    GradReport {
        name,
        params,
        worst: worst(&checks).map_or(0.0, |w| w.1),
    }
}

fn sims_of(v: &Var, t: &Var, tau: &Tensor) -> hsenet::Result<SimilarityBatch> {
    let m = cosine_similarity_matrix(&l2_normalize(v.as_tensor())?, &l2_normalize(t.as_tensor())?)?;
    SimilarityBatch::new(m, tau.clone())
}

/// Central-difference checks at f64 for the generation loss, symmetric
/// InfoNCE, the consistency loss, their composition and the full pack.
pub fn gradient_reports(seed: u64) -> Vec<GradReport> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let hidden = var(&mut r, &[4, 3]);
    let w = var(&mut r, &[3, 6]);
    let bias = var(&mut r, &[6]);
    let (h, wt, bt) = (hidden.as_tensor().clone(), w.as_tensor().clone(), bias.as_tensor().clone());
    let gen_vars = vec![("hidden".into(), hidden), ("w".into(), w), ("b".into(), bias)];
    out.push(report("generation loss", &gen_vars, || {
        let logits = h.matmul(&wt)?.broadcast_add(&bt)?.reshape((1, 4, 6))?;
        generation_loss(&logits, &[vec![2, 5, 0, 3]], &[vec![false, true, true, true]])
    }));

    let v = var(&mut r, &[4, 3]);
    let t = var(&mut r, &[4, 3]);
    let log_tau = Var::from_tensor(&tensor(vec![0.3f64.ln()], &[])).unwrap();
    let (vc, tc, lt) = (v.clone(), t.clone(), log_tau.as_tensor().clone());
    let nce_vars = vec![("v".into(), v), ("t".into(), t), ("log_tau".into(), log_tau)];
    out.push(report("symmetric InfoNCE", &nce_vars, || {
        info_nce_symmetric(&sims_of(&vc, &tc, &lt.exp()?)?)
    }));

    let s1 = var(&mut r, &[4]);
    let s2 = var(&mut r, &[4]);
    let (a, b) = (s1.as_tensor().clone(), s2.as_tensor().clone());
    let sa_vars = vec![("s1".into(), s1), ("s2".into(), s2)];
    out.push(report("consistency loss", &sa_vars, || semantic_consistency_loss(&a, &b, 0.3)));

    let v = var(&mut r, &[3, 3]);
    let t = var(&mut r, &[3, 3]);
    let anchor = var(&mut r, &[3]);
    let (vc, tc, an) = (v.clone(), t.clone(), anchor.as_tensor().clone());
    let tau = tensor(vec![0.4], &[]);
    let comb_vars = vec![("v".into(), v), ("t".into(), t), ("anchor".into(), anchor)];
    out.push(report("combined stage-2 loss", &comb_vars, || {
        let sims = sims_of(&vc, &tc, &tau)?;
        let sa = semantic_consistency_loss(&an, &sims.diagonal()?, 0.4)?;
        stage2_loss(&info_nce_symmetric(&sims)?, &sa, LAMBDA_S)
    }));

    let mut store = ParamStore::new(seed, DType::F64);
    let packer = SpatialPacker::new(&mut store, "p", 3, 2, 1, [1, 1, 2]).unwrap();
    let tokens = var(&mut r, &[1, 4, 3]);
    let weights = tensor(random_vec(&mut r, 4), &[1, 2, 2]);
    let tk = tokens.as_tensor().clone();
    let mut pack_vars = store.named_vars(&["p."]);
    pack_vars.push(("tokens".into(), tokens));
    out.push(report("spatial pack", &pack_vars, || {
        let vt = VisionTokens {
            tokens: tk.clone(),
            cls: Tensor::zeros((1, 3), DType::F64, &Device::Cpu)?,
            grid_dims: [1, 2, 2],
        };
        Ok((packer.pack(&vt)?.tokens * &weights)?.sum_all()?)
    }));
    out
}

#[derive(Debug, Clone)]
pub struct Geometry {
    pub voxels: usize,
    pub voxel_dims: [usize; 3],
    pub packed_tokens: usize,
    pub sweep_tokens: Vec<usize>,
    pub round_trip_exact: bool,
}

fn random_tokens(r: &mut ChaCha8Rng, n: usize, d: usize, grid: [usize; 3], dtype: DType) -> VisionTokens {
    VisionTokens {
        tokens: tensor(random_vec(r, n * d), &[1, n, d]).to_dtype(dtype).unwrap(),
        cls: Tensor::zeros((1, d), dtype, &Device::Cpu).unwrap(),
        grid_dims: grid,
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap().iter().map(|x| x.to_bits()).collect()
}

/// Packing geometry at grid (8,16,16) with strides (8,4,4), the stride
/// sweep, and the partition → merge round trip.
pub fn packer_geometry(seed: u64) -> Geometry {
    let grid = [8, 16, 16];
    let strides = [8, 4, 4];
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed, DType::F32);
    let packer = SpatialPacker::new(&mut store, "p", 8, 8, 2, strides).unwrap();
    let tokens = random_tokens(&mut r, 2048, 8, grid, DType::F32);
    let fgrid = reshape_to_grid(&tokens).unwrap();
    let part = partition_voxels(&fgrid, strides).unwrap();
    let packed = packer.pack(&tokens).unwrap();
    let mut exact = bits(&merge_voxels(&part).unwrap().data) == bits(&fgrid.data);
    let t64 = random_tokens(&mut r, 2048, 3, grid, DType::F64);
    let g64 = reshape_to_grid(&t64).unwrap();
    for s in TABLE5_STRIDES {
        exact &= bits(&merge_voxels(&partition_voxels(&g64, s).unwrap()).unwrap().data) == bits(&g64.data);
    }
    Geometry {
        voxels: part.num_voxels(),
        voxel_dims: part.voxel_dims,
        packed_tokens: packed.len().unwrap(),
        sweep_tokens: stride_sweep(grid, &TABLE5_STRIDES).unwrap().iter().map(|r| r.tokens).collect(),
        round_trip_exact: exact,
    }
}

/// One perturbation of the packer input and the output tokens it changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    pub voxel: usize,
    pub changed: Vec<usize>,
}

/// Exhaustive perturbations on a grid of (2,2,2) voxels: each voxel as a
/// whole, then each single cell.
pub fn v2p_locality(seed: u64) -> Vec<Perturbation> {
    let grid = [4, 4, 4];
    let strides = [2, 2, 2];
    let d = 4;
    let mut r = rng(seed);
    let mut store = ParamStore::new(seed, DType::F64);
    let packer = SpatialPacker::new(&mut store, "p", d, 6, 2, strides).unwrap();
    let base = random_tokens(&mut r, 64, d, grid, DType::F64);
    let base_out = packer.pack(&base).unwrap().tokens.to_vec3::<f64>().unwrap();
    let base_rows = base.tokens.to_vec3::<f64>().unwrap();
    let voxel_of = |cell: usize| voxel_index([cell / 16 / 2, (cell / 4) % 4 / 2, cell % 4 / 2], strides);
    let run = |cells: &[usize], r: &mut ChaCha8Rng| -> Vec<usize> {
        let mut rows = base_rows[0].clone();
        for &c in cells {
            for x in rows[c].iter_mut() {
                *x += r.random_range(0.1..1.0);
            }
        }
        let t = VisionTokens {
            tokens: tensor(rows.concat(), &[1, 64, d]),
            cls: base.cls.clone(),
            grid_dims: grid,
        };
        let out = packer.pack(&t).unwrap().tokens.to_vec3::<f64>().unwrap();
        (0..out[0].len()).filter(|&k| out[0][k] != base_out[0][k]).collect()
    };
    let mut results = Vec::new();
    for v in 0..8 {
        let cells: Vec<usize> = (0..64).filter(|&c| voxel_of(c) == v).collect();
        results.push(Perturbation { voxel: v, changed: run(&cells, &mut r) });
    }
    for c in 0..64 {
        results.push(Perturbation { voxel: voxel_of(c), changed: run(&[c], &mut r) });
    }
    results
}

/// Names whose values differ bit for bit between two snapshots.
pub fn changed_names(before: &BTreeMap<String, Vec<f64>>, after: &BTreeMap<String, Vec<f64>>, names: &[String]) -> Vec<String> {
    names
        .iter()
        .filter(|n| {
            let (a, b) = (&before[*n], &after[*n]);
            a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone)]
pub struct FreezeReport {
    pub frozen: usize,
    pub frozen_changed: Vec<String>,
    pub trainable: usize,
    pub trainable_changed: usize,
}

pub fn tiny_pretrain_config() -> Config {
    let mut c = Config::desk();
    c.volume_dims = [4, 4, 4];
    c.grid = [2, 2, 2];
    c.strides = [1, 1, 1];
    c.d_v = 8;
    c.d_l = 4;
    c.heads = 2;
    c.vit_depth = 1;
    c.text_layers = 1;
    c.text_max_len = 16;
    c.slice_size = [4, 4];
    c.slice_patch = 2;
    c.slice_depth = 1;
    c.n_slices = 2;
    c.lr = 1e-2;
    c
}

pub fn tiny_pair_batch(c: &Config, b: usize, seed: u64) -> PairBatch {
    let mut r = rng(seed);
    let tokens = (c.slice_size[0] / c.slice_patch) * (c.slice_size[1] / c.slice_patch);
    let slice_len = c.slice_patch * c.slice_patch * c.channels;
    let n = b * c.num_patches() * c.patch_len();
    let s = b * c.n_slices * tokens * slice_len;
    PairBatch {
        patches: tensor(random_vec(&mut r, n), &[b, c.num_patches(), c.patch_len()]).to_dtype(DType::F32).unwrap(),
        slices: Some(tensor(random_vec(&mut r, s), &[b, c.n_slices, tokens, slice_len]).to_dtype(DType::F32).unwrap()),
        texts: (0..b).map(|i| vec![7 + i as u32, 8, 9 + (i % 2) as u32]).collect(),
    }
}

/// Runs `steps` stage-2 updates and reports which stage-1 parameters moved.
pub fn stage2_freeze(steps: usize) -> FreezeReport {
    let c = tiny_pretrain_config();
    let vocab = 14;
    let mut s1 = Pretrainer::stage1(&c, vocab, DType::F32, 0).unwrap();
    s1.stage1_step(&tiny_pair_batch(&c, 4, 1)).unwrap();
    let params = s1.store.tensors().into_iter().map(|(k, v)| (k, v.copy().unwrap())).collect();
    let mut t = Pretrainer::stage2(&c, vocab, Some(&params), DType::F32, steps, c.stage2_warm_start).unwrap();
    let before = t.store.snapshot().unwrap();
    for k in 0..steps {
        t.stage2_step(&tiny_pair_batch(&c, 4, 10 + k as u64)).unwrap();
    }
    let after = t.store.snapshot().unwrap();
    let frozen: Vec<String> = t.state.frozen.iter().cloned().collect();
    let trainable: Vec<String> = t.state.trainable.iter().cloned().collect();
    FreezeReport {
        frozen: frozen.len(),
        frozen_changed: changed_names(&before, &after, &frozen),
        trainable: trainable.len(),
        trainable_changed: changed_names(&before, &after, &trainable).len(),
    }
}

pub fn tiny_decoder_config() -> Config {
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

/// Runs `steps` fine-tuning updates and reports which base decoder weights
/// moved.
pub fn finetune_freeze(steps: usize) -> FreezeReport {
    let c = tiny_decoder_config();
    let mut r = rng(5);
    let mut store = ParamStore::new(3, DType::F32);
    let mut vlm = VisionLanguageModel::new(&mut store, &c, 14).unwrap();
    vlm.attach_adapters(&mut store, &c).unwrap();
    let trainable = vlm.finetune_trainable(&store);
    let base = vlm.base_names(&store);
    let vars = trainable.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let mut opt = Optimizer::new(vars, 1e-2, c.weight_decay, 0).unwrap();
    let feats = |r: &mut ChaCha8Rng| tensor(random_vec(r, 2 * 8 * 8), &[2, 8, 8]).to_dtype(DType::F32).unwrap();
    let batch = InstructionBatch {
        global: feats(&mut r),
        local: feats(&mut r),
        grid_dims: c.grid,
        instructions: vec![vec![7, 8], vec![8, 7, 9]],
        answers: vec![vec![9, 10, 11], vec![12]],
    };
    let before = store.snapshot().unwrap();
    for _ in 0..steps {
        opt.step(&vlm.loss(&batch, false).unwrap()).unwrap();
    }
    let after = store.snapshot().unwrap();
    FreezeReport {
        frozen: base.len(),
        frozen_changed: changed_names(&before, &after, &base),
        trainable: trainable.len(),
        trainable_changed: changed_names(&before, &after, &trainable).len(),
    }
}

const WORDS: [&str; 5] = ["lesion", "left", "small", "heart", "lung"];

fn sentence(r: &mut ChaCha8Rng, distinct: bool) -> String {
    let n = r.random_range(1..=5usize);
    let mut pool: Vec<&str> = WORDS.to_vec();
    let mut out = Vec::new();
    for _ in 0..n {
        if distinct {
            if pool.is_empty() {
                break;
            }
            let k = r.random_range(0..pool.len());
            out.push(pool.remove(k));
        } else {
            out.push(WORDS[r.random_range(0..3usize)]);
        }
    }
    out.join(" ")
}

const ANSWERS: [&str; 5] = ["superior left lung", "inferior left lung", "middle heart", "not present", "superior heart"];

fn major_oracle(s: &str) -> String {
    let w: Vec<&str> = s.split_whitespace().collect();
    if w.len() > 1 && ["superior", "middle", "inferior"].contains(&w[0]) {
        w[1..].join(" ")
    } else {
        w.join(" ")
    }
}

/// Random ≤ 5-item instances of every metric against the brute-force
/// oracles. Returns a description of each disagreement.
pub fn metric_oracle_mismatches(cases: usize, seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let mut bad = Vec::new();
    let mut check = |what: String, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            bad.push(format!("{what}: got {got}, oracle {want}"));
        }
    };
    for case in 0..cases {
        let q = r.random_range(1..=5usize);
        let g = r.random_range(1..=5usize);
        let scores: Vec<Vec<f64>> = (0..q).map(|_| (0..g).map(|_| r.random_range(0..4) as f64 * 0.25).collect()).collect();
        let gold: Vec<usize> = (0..q).map(|_| r.random_range(0..g)).collect();
        let relevance: Vec<Vec<usize>> = (0..q).map(|_| (0..g).filter(|_| r.random_bool(0.4)).collect()).collect();
        let rr = RankedRetrieval::new(scores.clone(), gold.clone()).unwrap().with_relevance(relevance.clone()).unwrap();
        for k in 1..=g {
            check(format!("case {case} R@{k}"), recall_at_k(&rr, k).unwrap(), oracles::recall(&scores, &gold, k), 0.0);
            if let Some(m) = oracles::map(&scores, &relevance, k) {
                check(format!("case {case} MAP@{k}"), map_at_k(&rr, k).unwrap(), m, 1e-9);
            }
        }
        check(format!("case {case} R@G"), recall_at_k(&rr, g).unwrap(), 100.0, 0.0);

        let (c, t) = (sentence(&mut r, false), sentence(&mut r, false));
        for n in 1..=4 {
            check(format!("case {case} BLEU-{n} '{c}' vs '{t}'"), bleu(&c, &t, n), oracles::bleu(&c, &t, n), 1e-9);
        }
        check(format!("case {case} ROUGE-1"), rouge(&c, &t, RougeVariant::One), oracles::rouge1(&c, &t), 1e-9);
        check(format!("case {case} ROUGE-L"), rouge(&c, &t, RougeVariant::L), oracles::rouge_l(&c, &t), 1e-9);
        let (c, t) = (sentence(&mut r, true), sentence(&mut r, true));
        check(format!("case {case} METEOR '{c}' vs '{t}'"), meteor_simplified(&c, &t), oracles::meteor(&c, &t), 1e-9);

        let n = r.random_range(1..=5usize);
        let preds: Vec<String> = (0..n).map(|_| ANSWERS[r.random_range(0..ANSWERS.len())].to_string()).collect();
        let golds: Vec<String> = (0..n).map(|_| ANSWERS[r.random_range(0..ANSWERS.len())].to_string()).collect();
        let p: Vec<&str> = preds.iter().map(String::as_str).collect();
        let gg: Vec<&str> = golds.iter().map(String::as_str).collect();
        check(format!("case {case} VQA minor"), vqa_accuracy(&preds, &golds, VqaLevel::Minor).unwrap(), oracles::accuracy(&p, &gg), 1e-9);
        let pm: Vec<String> = preds.iter().map(|s| major_oracle(s)).collect();
        let gm: Vec<String> = golds.iter().map(|s| major_oracle(s)).collect();
        let pm: Vec<&str> = pm.iter().map(String::as_str).collect();
        let gm: Vec<&str> = gm.iter().map(String::as_str).collect();
        check(format!("case {case} VQA major"), vqa_accuracy(&preds, &golds, VqaLevel::Major).unwrap(), oracles::accuracy(&pm, &gm), 1e-9);
    }
    bad
}

/// A configuration small enough to run every pipeline stage in seconds.
pub fn tiny_pipeline_config() -> Config {
    let mut c = Config::desk();
    c.volume_dims = [8, 16, 16];
    c.grid = [2, 4, 4];
    c.strides = [2, 2, 2];
    c.d_v = 16;
    c.d_l = 8;
    c.d_t = 16;
    c.vit_depth = 1;
    c.heads = 2;
    c.packer_heads = 2;
    c.n_slices = 4;
    c.slice_size = [16, 16];
    c.slice_patch = 8;
    c.text_layers = 1;
    c.decoder_layers = 1;
    c.decoder_heads = 2;
    c.stage1_epochs = 1;
    c.stage2_epochs = 1;
    c.lm_epochs = 1;
    c.report_epochs = 1;
    c.vqa_epochs = 1;
    c.batch_size = 8;
    c.adapter_rank = 2;
    c.corpus_size = 20;
    c.generate_max_len = 8;
    c
}
