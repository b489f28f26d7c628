//! Experiment configuration: named presets, a `key = value` file format,
//! `HSENET_*` environment overrides and a content hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv;

pub const ENV_PREFIX: &str = "HSENET_";

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: String,
    /// Resize target `(D, W, H)`; corpus volumes are generated at this size.
    pub volume_dims: [usize; 3],
    pub channels: usize,
    /// Patch grid `(D̂, Ŵ, Ĥ)`.
    pub grid: [usize; 3],
    /// Packer voxel counts `(S_d, S_w, S_h)`.
    pub strides: [usize; 3],
    pub d_v: usize,
    pub d_l: usize,
    pub d_t: usize,
    pub vit_depth: usize,
    pub heads: usize,
    pub packer_heads: usize,
    pub n_slices: usize,
    /// 2D encoder input `(W, H)`.
    pub slice_size: [usize; 2],
    pub slice_patch: usize,
    pub slice_depth: usize,
    pub text_layers: usize,
    pub text_max_len: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_max_len: usize,
    pub lambda_s: f64,
    /// Initialise stage-2 encoders from the trained stage-1 weights.
    pub stage2_warm_start: bool,
    pub tau_init: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lm_epochs: usize,
    pub lm_lr: f64,
    pub report_epochs: usize,
    pub report_lr: f64,
    pub vqa_epochs: usize,
    pub vqa_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub adapter_targets: Vec<String>,
    pub corpus_size: usize,
    pub max_lesions: usize,
    pub generate_max_len: usize,
    pub deterministic: bool,
}

impl Config {
    /// CPU-sized preset used by tests and the smoke pipeline.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            volume_dims: [16, 32, 32],
            channels: 1,
            grid: [4, 4, 4],
            strides: [2, 2, 2],
            d_v: 64,
            d_l: 32,
            d_t: 64,
            vit_depth: 2,
            heads: 4,
            packer_heads: 4,
            n_slices: 16,
            slice_size: [32, 32],
            slice_patch: 8,
            slice_depth: 1,
            text_layers: 2,
            text_max_len: 512,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_max_len: 160,
            lambda_s: 0.1,
            stage2_warm_start: true,
            tau_init: 0.2,
            lr: 3e-4,
            weight_decay: 0.01,
            stage1_epochs: 30,
            stage2_epochs: 10,
            lm_epochs: 20,
            lm_lr: 3e-3,
            report_epochs: 20,
            report_lr: 2e-3,
            vqa_epochs: 10,
            vqa_lr: 1e-3,
            batch_size: 16,
            seed: 0,
            adapter_rank: 8,
            adapter_alpha: 16.0,
            adapter_targets: ["attn.q", "attn.k", "attn.v", "attn.o"]
                .map(String::from)
                .to_vec(),
            corpus_size: 256,
            max_lesions: 3,
            generate_max_len: 64,
            deterministic: true,
        }
    }

    /// Published hyperparameters. Not CPU-trainable; used for shape checks.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            volume_dims: [32, 256, 256],
            channels: 1,
            grid: [8, 16, 16],
            strides: [8, 4, 4],
            d_v: 768,
            d_l: 512,
            d_t: 3072,
            vit_depth: 12,
            heads: 12,
            packer_heads: 8,
            n_slices: 32,
            slice_size: [224, 224],
            slice_patch: 16,
            slice_depth: 12,
            text_layers: 12,
            text_max_len: 512,
            decoder_layers: 4,
            decoder_heads: 24,
            decoder_max_len: 1024,
            lambda_s: 0.1,
            stage2_warm_start: true,
            tau_init: 0.07,
            lr: 1e-4,
            weight_decay: 0.01,
            stage1_epochs: 50,
            stage2_epochs: 50,
            lm_epochs: 0,
            lm_lr: 1e-4,
            report_epochs: 6,
            report_lr: 1e-4,
            vqa_epochs: 4,
            vqa_lr: 5e-5,
            batch_size: 8,
            seed: 0,
            adapter_rank: 8,
            adapter_alpha: 16.0,
            adapter_targets: ["attn.q", "attn.k", "attn.v", "attn.o"]
                .map(String::from)
                .to_vec(),
            corpus_size: 256,
            max_lesions: 3,
            generate_max_len: 256,
            deterministic: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected \"desk\" or \"paper\")"
            ))),
        }
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let triple = |t: [usize; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        vec![
            ("preset", self.preset.clone()),
            ("volume_dims", triple(self.volume_dims)),
            ("channels", self.channels.to_string()),
            ("grid", triple(self.grid)),
            ("strides", triple(self.strides)),
            ("d_v", self.d_v.to_string()),
            ("d_l", self.d_l.to_string()),
            ("d_t", self.d_t.to_string()),
            ("vit_depth", self.vit_depth.to_string()),
            ("heads", self.heads.to_string()),
            ("packer_heads", self.packer_heads.to_string()),
            ("n_slices", self.n_slices.to_string()),
            ("slice_size", format!("{},{}", self.slice_size[0], self.slice_size[1])),
            ("slice_patch", self.slice_patch.to_string()),
            ("slice_depth", self.slice_depth.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("text_max_len", self.text_max_len.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("decoder_max_len", self.decoder_max_len.to_string()),
            ("lambda_s", format!("{:?}", self.lambda_s)),
            ("stage2_warm_start", self.stage2_warm_start.to_string()),
            ("tau_init", format!("{:?}", self.tau_init)),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("stage1_epochs", self.stage1_epochs.to_string()),
            ("stage2_epochs", self.stage2_epochs.to_string()),
            ("lm_epochs", self.lm_epochs.to_string()),
            ("lm_lr", format!("{:?}", self.lm_lr)),
            ("report_epochs", self.report_epochs.to_string()),
            ("report_lr", format!("{:?}", self.report_lr)),
            ("vqa_epochs", self.vqa_epochs.to_string()),
            ("vqa_lr", format!("{:?}", self.vqa_lr)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("adapter_rank", self.adapter_rank.to_string()),
            ("adapter_alpha", format!("{:?}", self.adapter_alpha)),
            ("adapter_targets", self.adapter_targets.join(",")),
            ("corpus_size", self.corpus_size.to_string()),
            ("max_lesions", self.max_lesions.to_string()),
            ("generate_max_len", self.generate_max_len.to_string()),
            ("deterministic", self.deterministic.to_string()),
        ]
    }

    /// Canonical text form: one `key = value` line per field in a fixed order.
    pub fn to_text(&self) -> String {
        kv::render(self.entries())
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(&mut self, overrides: &BTreeMap<String, String>, origin: &Path) -> Result<()> {
        fn triple(v: &str) -> Option<[usize; 3]> {
            let p: Vec<usize> = v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
            (p.len() == 3).then(|| [p[0], p[1], p[2]])
        }
        fn pair(v: &str) -> Option<[usize; 2]> {
            let p: Vec<usize> = v.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
            (p.len() == 2).then(|| [p[0], p[1]])
        }
        for (key, value) in overrides {
            let bad = || Error::format(origin, format!("bad value for `{key}`: {value:?}"));
            macro_rules! num {
                ($field:expr) => {
                    $field = value.parse().map_err(|_| bad())?
                };
            }
            match key.as_str() {
                "preset" => {}
                "volume_dims" => self.volume_dims = triple(value).ok_or_else(bad)?,
                "grid" => self.grid = triple(value).ok_or_else(bad)?,
                "strides" => self.strides = triple(value).ok_or_else(bad)?,
                "slice_size" => self.slice_size = pair(value).ok_or_else(bad)?,
                "channels" => num!(self.channels),
                "d_v" => num!(self.d_v),
                "d_l" => num!(self.d_l),
                "d_t" => num!(self.d_t),
                "vit_depth" => num!(self.vit_depth),
                "heads" => num!(self.heads),
                "packer_heads" => num!(self.packer_heads),
                "n_slices" => num!(self.n_slices),
                "slice_patch" => num!(self.slice_patch),
                "slice_depth" => num!(self.slice_depth),
                "text_layers" => num!(self.text_layers),
                "text_max_len" => num!(self.text_max_len),
                "decoder_layers" => num!(self.decoder_layers),
                "decoder_heads" => num!(self.decoder_heads),
                "decoder_max_len" => num!(self.decoder_max_len),
                "lambda_s" => num!(self.lambda_s),
                "stage2_warm_start" => num!(self.stage2_warm_start),
                "tau_init" => num!(self.tau_init),
                "lr" => num!(self.lr),
                "weight_decay" => num!(self.weight_decay),
                "stage1_epochs" => num!(self.stage1_epochs),
                "stage2_epochs" => num!(self.stage2_epochs),
                "lm_epochs" => num!(self.lm_epochs),
                "lm_lr" => num!(self.lm_lr),
                "report_epochs" => num!(self.report_epochs),
                "report_lr" => num!(self.report_lr),
                "vqa_epochs" => num!(self.vqa_epochs),
                "vqa_lr" => num!(self.vqa_lr),
                "batch_size" => num!(self.batch_size),
                "seed" => num!(self.seed),
                "adapter_rank" => num!(self.adapter_rank),
                "adapter_alpha" => num!(self.adapter_alpha),
                "adapter_targets" => {
                    self.adapter_targets = value
                        .split(',')
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect()
                }
                "corpus_size" => num!(self.corpus_size),
                "max_lesions" => num!(self.max_lesions),
                "generate_max_len" => num!(self.generate_max_len),
                "deterministic" => num!(self.deterministic),
                other => {
                    return Err(Error::format(origin, format!("unknown key `{other}`")));
                }
            }
        }
        Ok(())
    }

    /// Parses a config file. The `preset` key (default `desk`) selects the
    /// base values; every other key overrides one field.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let map = kv::parse(text, origin)?;
        let mut cfg = Self::preset(map.get("preset").map_or("desk", String::as_str))?;
        cfg.apply(&map, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Applies `HSENET_<KEY>` overrides from the given environment pairs.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let overrides: BTreeMap<String, String> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|key| (key.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        self.apply(&overrides, Path::new("<environment>"))
    }

    /// First 16 hex digits of SHA-256 over the canonical text form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn patch_dims(&self) -> [usize; 3] {
        [
            self.volume_dims[0] / self.grid[0].max(1),
            self.volume_dims[1] / self.grid[1].max(1),
            self.volume_dims[2] / self.grid[2].max(1),
        ]
    }

    pub fn patch_len(&self) -> usize {
        self.patch_dims().iter().product::<usize>() * self.channels
    }

    pub fn num_patches(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn num_packed_tokens(&self) -> usize {
        self.strides.iter().product()
    }

    /// Lists every violated precondition; empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let axes = ["depth", "width", "height"];
        for i in 0..3 {
            if self.volume_dims[i] == 0 || self.grid[i] == 0 || self.strides[i] == 0 {
                v.push(format!("{} dims, grid and strides must be >= 1", axes[i]));
                continue;
            }
            if self.volume_dims[i] % self.grid[i] != 0 {
                v.push(format!(
                    "volume {} {} not divisible by grid {}",
                    axes[i], self.volume_dims[i], self.grid[i]
                ));
            }
            if self.grid[i] % self.strides[i] != 0 {
                v.push(format!(
                    "grid {} {} not divisible by stride {}",
                    axes[i], self.grid[i], self.strides[i]
                ));
            }
        }
        let mut check_heads = |what: &str, dim: usize, heads: usize| {
            if heads == 0 || dim % heads != 0 {
                v.push(format!("{what} width {dim} not divisible by {heads} heads"));
            }
        };
        check_heads("encoder", self.d_v, self.heads);
        check_heads("packer", self.d_v, self.packer_heads);
        check_heads("decoder", self.d_t, self.decoder_heads);
        if self.channels == 0 {
            v.push("channels must be >= 1".into());
        }
        for (name, val) in [("d_v", self.d_v), ("d_l", self.d_l), ("d_t", self.d_t)] {
            if val == 0 {
                v.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_slices == 0 {
            v.push("n_slices must be >= 1".into());
        }
        if self.slice_patch == 0
            || self.slice_size[0] % self.slice_patch != 0
            || self.slice_size[1] % self.slice_patch != 0
        {
            v.push(format!(
                "slice size {:?} not divisible by slice patch {}",
                self.slice_size, self.slice_patch
            ));
        }
        if self.text_max_len < 1 {
            v.push("text_max_len must be >= 1".into());
        }
        if self.decoder_max_len < 2 * self.num_packed_tokens() + 4 {
            v.push(format!(
                "decoder_max_len {} cannot hold {} visual tokens",
                self.decoder_max_len,
                2 * self.num_packed_tokens() + 2
            ));
        }
        if !(self.lambda_s >= 0.0) {
            v.push(format!("lambda_s must be >= 0, got {}", self.lambda_s));
        }
        if !(1e-3..=10.0).contains(&self.tau_init) {
            v.push(format!("tau_init {} outside [1e-3, 10]", self.tau_init));
        }
        for (name, lr) in [
            ("lr", self.lr),
            ("lm_lr", self.lm_lr),
            ("report_lr", self.report_lr),
            ("vqa_lr", self.vqa_lr),
        ] {
            if !(lr > 0.0) {
                v.push(format!("{name} must be > 0"));
            }
        }
        if self.batch_size == 0 {
            v.push("batch_size must be >= 1".into());
        }
        if self.max_lesions > 3 {
            v.push("max_lesions must be <= 3 (one lesion per shape)".into());
        }
        if self.generate_max_len == 0 {
            v.push("generate_max_len must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Human-readable summary used in run manifests.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "preset={} hash={}", self.preset, self.hash());
        s
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}
