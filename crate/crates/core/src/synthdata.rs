//! Procedural phantom corpus: smooth background volumes with up to three
//! geometric lesions, templated reports, and location questions labelled
//! by a fixed region atlas.
//!
//! Randomness comes from SplitMix64 (state initialised to the seed, the
//! standard `0x9e3779b97f4a7c15` increment and finaliser). Uniform reals are
//! `(u >> 11)·2⁻⁵³` and integers in `[0, n)` are `floor(real·n)`, so a corpus
//! can be reproduced from this description alone.
//!
//! Atlas: with axes `(z, y, x)` over dims `(D, W, H)`, the major region of an
//! integer centre is `row·5 + col` with `col = ⌊5y/W⌋`, `row = ⌊2x/H⌋`,
//! and the minor region is `⌊3z/D⌋` (superior, middle, inferior).

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::templates::{fill, REPORT_TEMPLATES, VQA_TEMPLATES};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;
use crate::volumetrics::Volume;

pub const GENERATOR_VERSION: &str = "phantom-v1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SAMPLES_DIR: &str = "samples";
pub const REPORT_FILE: &str = "report.txt";
pub const VQA_FILE: &str = "vqa.jsonl";
pub const LESIONS_FILE: &str = "lesions.json";
pub const NOT_PRESENT: &str = "not present";
pub const EMPTY_REPORT: &str = "No focal lesions are observed.";
pub const CLOSING_SENTENCE: &str = "The remaining structures are unremarkable.";

pub const MAJOR_REGIONS: [&str; 10] = [
    "right chest wall",
    "right lung",
    "mediastinum",
    "left lung",
    "left chest wall",
    "right pleura",
    "right hilum",
    "heart",
    "left hilum",
    "left pleura",
];

pub const MINOR_REGIONS: [&str; 3] = ["superior", "middle", "inferior"];

const MAX_PLACEMENT_ATTEMPTS: usize = 200;

/// Portable random stream over SplitMix64.
#[derive(Debug, Clone)]
pub struct PhantomRng(SplitMix64);

impl PhantomRng {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Ellipsoid,
    Box,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sphere, Shape::Ellipsoid, Shape::Box];

    /// Adjective used in reports and questions.
    pub fn adjective(self) -> &'static str {
        match self {
            Shape::Sphere => "spherical",
            Shape::Ellipsoid => "ellipsoidal",
            Shape::Box => "box-shaped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }

    /// In-plane radius in units of `W/32` voxels.
    fn radius(self) -> f64 {
        match self {
            SizeClass::Small => 2.0,
            SizeClass::Medium => 3.0,
            SizeClass::Large => 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub shape: Shape,
    pub size: SizeClass,
    /// `(z, y, x)` voxel indices.
    pub center: [usize; 3],
    /// Semi-axes (or half-extents for boxes) along `(z, y, x)`.
    pub semi_axes: [f64; 3],
    pub intensity: f64,
    pub major_region: usize,
    pub minor_region: usize,
}

impl Lesion {
    pub fn major_name(&self) -> &'static str {
        MAJOR_REGIONS[self.major_region]
    }

    pub fn minor_label(&self) -> String {
        format!("{} {}", MINOR_REGIONS[self.minor_region], self.major_name())
    }

    /// Whether voxel `(z, y, x)` lies inside the lesion.
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let d = [
            z as f64 - self.center[0] as f64,
            y as f64 - self.center[1] as f64,
            x as f64 - self.center[2] as f64,
        ];
        match self.shape {
            Shape::Box => (0..3).all(|i| d[i].abs() <= self.semi_axes[i]),
            Shape::Sphere | Shape::Ellipsoid => {
                (0..3).map(|i| (d[i] / self.semi_axes[i]).powi(2)).sum::<f64>() <= 1.0
            }
        }
    }

    fn extent(&self) -> [usize; 3] {
        self.semi_axes.map(|a| a.ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub shape: Shape,
    pub major: String,
    pub minor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub volume: Volume,
    pub lesions: Vec<Lesion>,
    pub report: String,
    pub vqa: Vec<QaRecord>,
}

/// `(major, minor)` region of an integer centre.
pub fn atlas_lookup(center: [usize; 3], dims: [usize; 3]) -> (usize, usize) {
    let [z, y, x] = center;
    let [d, w, h] = dims;
    let col = 5 * y / w;
    let row = 2 * x / h;
    (row * 5 + col, 3 * z / d)
}

fn background(z: usize, y: usize, x: usize, dims: [usize; 3]) -> f64 {
    let [d, w, h] = dims;
    let (fz, fy, fx) = (z as f64 / d as f64, y as f64 / w as f64, x as f64 / h as f64);
    0.15 + 0.1 * fy + 0.05 * fx + 0.05 * fz + 0.04 * (std::f64::consts::PI * fy).sin() * (std::f64::consts::PI * fx).sin()
}

fn overlaps(a: &Lesion, b: &Lesion) -> bool {
    let (ea, eb) = (a.extent(), b.extent());
    (0..3).all(|i| a.center[i].abs_diff(b.center[i]) <= ea[i] + eb[i] + 1)
}

fn draw_lesion(rng: &mut PhantomRng, shape: Shape, dims: [usize; 3]) -> Result<Lesion> {
    let [d, w, h] = dims;
    let size = SizeClass::ALL[rng.below(3)];
    let r = size.radius() * w as f64 / 32.0;
    let rz = (r * d as f64 / w as f64).max(1.0);
    let semi_axes = match shape {
        Shape::Sphere => [rz, r, r],
        Shape::Ellipsoid => [rz, r * rng.range_f64(1.2, 1.6), r * rng.range_f64(0.5, 0.8)],
        Shape::Box => [rz * 0.8, r * 0.8, r * 0.8],
    };
    let extent = semi_axes.map(|a| a.ceil() as usize);
    let mut center = [0; 3];
    for i in 0..3 {
        let dim = dims[i];
        if 2 * extent[i] + 1 > dim {
            return Err(Error::Generation(format!(
                "{} {} lesion does not fit in dims {dims:?}",
                size.word(),
                shape.adjective()
            )));
        }
        center[i] = extent[i] + rng.below(dim - 2 * extent[i]);
    }
    let (major_region, minor_region) = atlas_lookup(center, [d, w, h]);
    Ok(Lesion {
        shape,
        size,
        center,
        semi_axes,
        intensity: rng.range_f64(0.4, 0.6),
        major_region,
        minor_region,
    })
}

/// Phantom with `n_lesions` lesions of distinct shapes (at most three).
pub fn make_phantom(seed: u64, n_lesions: usize, dims: [usize; 3]) -> Result<SyntheticSample> {
    if n_lesions > Shape::ALL.len() {
        return Err(Error::Generation(format!(
            "at most {} lesions (one per shape), requested {n_lesions}",
            Shape::ALL.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Dimension(format!("phantom dims must be >= 1, got {dims:?}")));
    }
    let mut rng = PhantomRng::new(seed);
    let mut shapes = Shape::ALL.to_vec();
    let mut chosen = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        chosen.push(shapes.remove(rng.below(shapes.len())));
    }
    let mut lesions: Vec<Lesion> = Vec::with_capacity(n_lesions);
    for shape in chosen {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = draw_lesion(&mut rng, shape, dims)?;
            if !lesions.iter().any(|l| overlaps(l, &cand)) {
                placed = Some(cand);
                break;
            }
        }
        lesions.push(placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place a {} lesion without overlap after {MAX_PLACEMENT_ATTEMPTS} attempts",
                shape.adjective()
            ))
        })?);
    }
    let [d, w, h] = dims;
    let mut data = Vec::with_capacity(d * w * h);
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let mut v = background(z, y, x, dims) + 0.02 * (rng.uniform() - 0.5);
                for l in &lesions {
                    if l.contains(z, y, x) {
                        v += l.intensity;
                    }
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let volume = Volume::new(data, [d, w, h, 1], true, &format!("{GENERATOR_VERSION}:seed={seed}"))?;
    Ok(SyntheticSample {
        report: render_report(&lesions),
        vqa: make_vqa(&lesions),
        volume,
        lesions,
    })
}

pub fn finding_sentence(l: &Lesion) -> String {
    format!(
        "A {} {} lesion is seen in the {}.",
        l.size.word(),
        l.shape.adjective(),
        l.minor_label()
    )
}

/// One sentence per lesion in atlas order, then a closing sentence.
pub fn render_report(lesions: &[Lesion]) -> String {
    if lesions.is_empty() {
        return EMPTY_REPORT.to_string();
    }
    let mut sorted: Vec<&Lesion> = lesions.iter().collect();
    sorted.sort_by_key(|l| (l.major_region, l.minor_region, l.shape));
    let mut parts: Vec<String> = sorted.into_iter().map(finding_sentence).collect();
    parts.push(CLOSING_SENTENCE.to_string());
    parts.join(" ")
}

/// One location question per shape; absent shapes are answered
/// "not present".
pub fn make_vqa(lesions: &[Lesion]) -> Vec<QaRecord> {
    Shape::ALL
        .iter()
        .map(|&shape| {
            let question = fill(VQA_TEMPLATES[0], shape.adjective());
            match lesions.iter().find(|l| l.shape == shape) {
                Some(l) => QaRecord {
                    question,
                    answer: l.minor_label(),
                    shape,
                    major: l.major_name().to_string(),
                    minor: l.minor_label(),
                },
                None => QaRecord {
                    question,
                    answer: NOT_PRESENT.to_string(),
                    shape,
                    major: NOT_PRESENT.to_string(),
                    minor: NOT_PRESENT.to_string(),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub n_lesions: usize,
    pub generator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Seed of sample `i`: the `i`-th output of SplitMix64 seeded with the
/// corpus seed.
pub fn sample_seeds(corpus_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = PhantomRng::new(corpus_seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Lesion count for a sample: 0 with probability 1/10, otherwise uniform
/// over `1..=max_lesions`.
pub fn lesion_count(seed: u64, max_lesions: usize) -> usize {
    let mut rng = PhantomRng::new(seed ^ 0x5bd1_e995);
    if max_lesions == 0 || rng.below(10) == 0 {
        0
    } else {
        1 + rng.below(max_lesions)
    }
}

/// Sorting ids by the SHA-256 of the id, the first `round(n/10)` are test.
pub fn assign_splits(ids: &[String]) -> Vec<Split> {
    let mut order: Vec<(String, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (hex::encode(Sha256::digest(id.as_bytes())), i))
        .collect();
    order.sort();
    let n_test = (ids.len() as f64 / 10.0).round() as usize;
    let mut splits = vec![Split::Train; ids.len()];
    for (_, i) in order.into_iter().take(n_test) {
        splits[i] = Split::Test;
    }
    splits
}

/// Every text the models can see: reports, questions under every template
/// and shape, answers and report instructions.
pub fn corpus_texts<'a>(samples: impl IntoIterator<Item = &'a SyntheticSample>) -> Vec<String> {
    let mut texts: Vec<String> = REPORT_TEMPLATES.iter().map(|s| s.to_string()).collect();
    for t in VQA_TEMPLATES {
        for s in Shape::ALL {
            texts.push(fill(t, s.adjective()));
        }
    }
    texts.push(NOT_PRESENT.to_string());
    for s in samples {
        texts.push(s.report.clone());
        texts.extend(s.vqa.iter().map(|q| q.answer.clone()));
    }
    texts
}

/// Vocabulary covering every possible sentence of the generator, so it does
/// not depend on which samples were drawn.
pub fn full_vocabulary() -> Vocabulary {
    let mut texts = corpus_texts(std::iter::empty());
    texts.push(EMPTY_REPORT.to_string());
    texts.push(CLOSING_SENTENCE.to_string());
    for size in SizeClass::ALL {
        for shape in Shape::ALL {
            for major in 0..MAJOR_REGIONS.len() {
                for minor in 0..MINOR_REGIONS.len() {
                    let l = Lesion {
                        shape,
                        size,
                        center: [0; 3],
                        semi_axes: [1.0; 3],
                        intensity: 0.5,
                        major_region: major,
                        minor_region: minor,
                    };
                    texts.push(finding_sentence(&l));
                    texts.push(l.minor_label());
                }
            }
        }
    }
    Vocabulary::build(texts)
}

pub fn write_sample(dir: &Path, sample: &SyntheticSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    sample.volume.write(dir)?;
    let report = dir.join(REPORT_FILE);
    std::fs::write(&report, format!("{}\n", sample.report)).map_err(|e| Error::io(&report, e))?;
    let mut vqa = String::new();
    for q in &sample.vqa {
        vqa.push_str(&serde_json::to_string(q)?);
        vqa.push('\n');
    }
    let vqa_path = dir.join(VQA_FILE);
    std::fs::write(&vqa_path, vqa).map_err(|e| Error::io(&vqa_path, e))?;
    let lesions = dir.join(LESIONS_FILE);
    std::fs::write(&lesions, serde_json::to_string_pretty(&sample.lesions)?).map_err(|e| Error::io(&lesions, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRecord>,
    pub path: PathBuf,
}

impl CorpusManifest {
    pub fn to_jsonl(records: &[ManifestRecord]) -> Result<String> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(Self::to_jsonl(&self.records)?.as_bytes())))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Self { records, path })
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.as_str())
            .collect()
    }
}

/// Generates and writes `n` samples plus the manifest and vocabulary.
pub fn build_corpus(n: usize, seed: u64, dims: [usize; 3], max_lesions: usize, out_dir: &Path) -> Result<CorpusManifest> {
    let ids: Vec<String> = (0..n).map(sample_id).collect();
    let splits = assign_splits(&ids);
    let seeds = sample_seeds(seed, n);
    let samples_dir = out_dir.join(SAMPLES_DIR);
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for ((id, split), s) in ids.iter().zip(&splits).zip(&seeds) {
        let k = lesion_count(*s, max_lesions.min(Shape::ALL.len()));
        let sample = make_phantom(*s, k, dims).map_err(|e| Error::Generation(format!("sample {id}: {e}")))?;
        write_sample(&samples_dir.join(id), &sample).map_err(|e| match e {
            Error::Io { path, source } => Error::Io { path, source },
            other => Error::Generation(format!("sample {id}: {other}")),
        })?;
        records.push(ManifestRecord {
            id: id.clone(),
            seed: *s,
            split: *split,
            n_lesions: k,
            generator: GENERATOR_VERSION.to_string(),
        });
    }
    let path = out_dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(CorpusManifest::to_jsonl(&records)?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    full_vocabulary().save(&out_dir.join(VOCAB_FILE))?;
    Ok(CorpusManifest { records, path })
}

/// Reads a sample directory back.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub id: String,
    pub volume: Volume,
    pub report: String,
    pub vqa: Vec<QaRecord>,
    pub lesions: Vec<Lesion>,
}

pub fn read_sample(corpus: &Path, id: &str) -> Result<StoredSample> {
    let dir = corpus.join(SAMPLES_DIR).join(id);
    let volume = Volume::read(&dir)?;
    let rp = dir.join(REPORT_FILE);
    let report = std::fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?.trim().to_string();
    let vp = dir.join(VQA_FILE);
    let vqa = std::fs::read_to_string(&vp)
        .map_err(|e| Error::io(&vp, e))?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(&vp, e.to_string())))
        .collect::<Result<Vec<QaRecord>>>()?;
    let lp = dir.join(LESIONS_FILE);
    let lesions = serde_json::from_str(&std::fs::read_to_string(&lp).map_err(|e| Error::io(&lp, e))?)
        .map_err(|e| Error::format(&lp, e.to_string()))?;
    Ok(StoredSample {
        id: id.to_string(),
        volume,
        report,
        vqa,
        lesions,
    })
}

/// Distinct major regions of a lesion list.
pub fn major_set(lesions: &[Lesion]) -> BTreeSet<usize> {
    lesions.iter().map(|l| l.major_region).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // published SplitMix64 outputs for state 1234567
        let mut r = PhantomRng::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
    }

    #[test]
    fn empty_phantom_reports_no_findings() {
        let s = make_phantom(9, 0, [8, 16, 16]).unwrap();
        assert_eq!(s.report, EMPTY_REPORT);
        assert!(s.vqa.iter().all(|q| q.answer == NOT_PRESENT));
        assert_eq!(s.vqa.len(), 3);
    }

    #[test]
    fn phantom_is_deterministic() {
        assert_eq!(make_phantom(4, 3, [16, 32, 32]).unwrap(), make_phantom(4, 3, [16, 32, 32]).unwrap());
    }

    #[test]
    fn too_many_lesions_is_generation_error() {
        assert!(matches!(make_phantom(1, 4, [16, 32, 32]), Err(Error::Generation(_))));
        assert!(matches!(make_phantom(1, 1, [1, 2, 2]), Err(Error::Generation(_))));
    }

    #[test]
    fn report_sentence_for_one_sphere() {
        let l = Lesion {
            shape: Shape::Sphere,
            size: SizeClass::Small,
            center: [0; 3],
            semi_axes: [1.0; 3],
            intensity: 0.5,
            major_region: 3,
            minor_region: 0,
        };
        assert_eq!(
            render_report(&[l]),
            "A small spherical lesion is seen in the superior left lung. The remaining structures are unremarkable."
        );
    }

    #[test]
    fn atlas_boundaries_are_half_open() {
        let dims = [3, 10, 4];
        assert_eq!(atlas_lookup([0, 1, 1], dims), (0, 0));
        assert_eq!(atlas_lookup([1, 2, 1], dims), (1, 1));
        assert_eq!(atlas_lookup([2, 9, 2], dims), (9, 2));
    }

    #[test]
    fn splits_are_ninety_ten() {
        let ids: Vec<String> = (0..256).map(sample_id).collect();
        let s = assign_splits(&ids);
        assert_eq!(s.iter().filter(|&&x| x == Split::Test).count(), 26);
    }

    #[test]
    fn vocabulary_covers_generated_text() {
        let v = full_vocabulary();
        for seed in 0..20 {
            let s = make_phantom(seed, (seed % 4) as usize, [16, 32, 32]).unwrap();
            v.encode(&s.report).unwrap();
            for q in &s.vqa {
                v.encode(&q.question).unwrap();
                v.encode(&q.answer).unwrap();
            }
        }
    }
}
