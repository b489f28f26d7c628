//! Text-overlap metrics on lowercased word tokens; punctuation-only tokens
//! are dropped before scoring.

use std::collections::HashMap;

use rust_stemmers::{Algorithm, Stemmer};

use crate::tokenizer::split_words;

pub fn metric_tokens(text: &str) -> Vec<String> {
    split_words(text)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .map(|w| w.to_lowercase())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate total for order `n`.
pub fn clipped_ngram_matches(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU-`n_max` in `[0, 100]`: uniform-weight geometric mean of
/// clipped precisions with add-one smoothing for orders above one, times
/// the brevity penalty.
pub fn bleu(candidate: &str, reference: &str, n_max: usize) -> f64 {
    assert!((1..=4).contains(&n_max), "BLEU order must be in 1..=4");
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() {
        log::warn!("empty candidate scores BLEU 0");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let (m, total) = clipped_ngram_matches(&c, &r, n);
        let p = if n == 1 {
            m as f64 / total as f64
        } else {
            (m as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    100.0 * bp * (log_sum / n_max as f64).exp()
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    L,
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-1 (clipped unigram F1) or ROUGE-L (LCS F1), in `[0, 100]`.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() && r.is_empty() {
        log::warn!("both texts empty; ROUGE is 0");
        return 0.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let overlap = match variant {
        RougeVariant::One => clipped_ngram_matches(&c, &r, 1).0,
        RougeVariant::L => lcs_len(&c, &r),
    };
    100.0 * f1(overlap as f64 / c.len() as f64, overlap as f64 / r.len() as f64)
}

/// Candidate → reference alignment: exact matches first, then Snowball stem
/// matches among the leftovers. Each candidate token, left to right, takes
/// the unused reference position right after the previous alignment when it
/// matches, otherwise the lowest matching unused position.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<Option<usize>> {
    let stemmer = Stemmer::create(Algorithm::English);
    let cs: Vec<String> = candidate.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let rs: Vec<String> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let mut align: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut used = vec![false; reference.len()];
    let stages: [(&[String], &[String]); 2] = [(candidate, reference), (&cs, &rs)];
    for (cw, rw) in stages {
        let mut last: Option<usize> = None;
        for i in 0..cw.len() {
            if let Some(j) = align[i] {
                last = Some(j);
                continue;
            }
            let next = last.map(|j| j + 1).filter(|&j| j < rw.len() && !used[j] && rw[j] == cw[i]);
            let pick = next.or_else(|| (0..rw.len()).find(|&j| !used[j] && rw[j] == cw[i]));
            if let Some(j) = pick {
                used[j] = true;
                align[i] = Some(j);
                last = Some(j);
            } else {
                last = None;
            }
        }
    }
    align
}

/// Number of maximal runs of aligned candidate tokens that map to
/// consecutive reference positions.
pub fn chunk_count(align: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in align {
        match (prev, a) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    chunks
}

/// METEOR from match count, chunk count and lengths.
pub fn meteor_score(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / cand_len as f64;
    let r = matches as f64 / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    100.0 * fmean * (1.0 - penalty)
}

/// METEOR with exact and stem matching only, in `[0, 100]`.
pub fn meteor_simplified(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let align = meteor_alignment(&c, &r);
    let m = align.iter().flatten().count();
    meteor_score(m, chunk_count(&align), c.len(), r.len())
}

/// Corpus means of BLEU-1..4, ROUGE-1/L and METEOR over paired texts.
pub fn corpus_nlg(candidates: &[String], references: &[String]) -> Vec<(String, f64)> {
    assert_eq!(candidates.len(), references.len());
    let n = candidates.len().max(1) as f64;
    let mean = |f: &dyn Fn(&str, &str) -> f64| -> f64 {
        candidates.iter().zip(references).map(|(c, r)| f(c, r)).sum::<f64>() / n
    };
    let mut out: Vec<(String, f64)> = (1..=4)
        .map(|k| (format!("bleu{k}"), mean(&|c, r| bleu(c, r, k))))
        .collect();
    out.push(("rouge1".into(), mean(&|c, r| rouge(c, r, RougeVariant::One))));
    out.push(("rougeL".into(), mean(&|c, r| rouge(c, r, RougeVariant::L))));
    out.push(("meteor".into(), mean(&meteor_simplified)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_spec_cases() {
        for n in 1..=4 {
            assert!((bleu("a b c d e", "a b c d e", n) - 100.0).abs() < 1e-9);
        }
        assert!((bleu("a b c", "a b d", 1) - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(bleu("a b", "c d", 2), 0.0);
        assert_eq!(bleu("", "c d", 2), 0.0);
    }

    #[test]
    fn rouge_l_reordered() {
        assert!((rouge("a b c d", "a c b d", RougeVariant::L) - 75.0).abs() < 1e-9);
        assert_eq!(rouge("x y", "a b", RougeVariant::One), 0.0);
        assert_eq!(rouge("", "", RougeVariant::L), 0.0);
    }

    #[test]
    fn meteor_identical_single_chunk() {
        let m = 4.0f64;
        let expect = 100.0 * (1.0 - 0.5 * (1.0 / m).powi(3));
        assert!((meteor_simplified("a b c d", "a b c d") - expect).abs() < 1e-9);
        assert!(meteor_simplified("d c b a", "a b c d") < meteor_simplified("a b c d", "a b c d"));
        assert_eq!(meteor_simplified("x", "y"), 0.0);
    }

    #[test]
    fn meteor_stem_stage() {
        let c = metric_tokens("lesions seen");
        let r = metric_tokens("lesion seen");
        assert_eq!(meteor_alignment(&c, &r), vec![Some(0), Some(1)]);
    }

    #[test]
    fn punctuation_is_dropped() {
        assert_eq!(metric_tokens("A lesion, seen."), vec!["a", "lesion", "seen"]);
    }
}
