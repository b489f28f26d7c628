mod oracles;

use hsenet::eval::nlg::{chunk_count, meteor_alignment};
use hsenet::eval::{
    bleu, map_at_k, meteor_simplified, metric_tokens, recall_at_k, rouge, vqa_accuracy, RankedRetrieval, RougeVariant,
    VqaLevel,
};
use proptest::prelude::*;

const WORDS: [&str; 4] = ["lesion", "left", "small", "heart"];

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len(), 1..=max).prop_map(|ix| ix.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" "))
}

fn distinct_sentence(max: usize) -> impl Strategy<Value = String> {
    Just((0..WORDS.len()).collect::<Vec<_>>())
        .prop_shuffle()
        .prop_flat_map(move |p| (1..=max.min(WORDS.len())).prop_map(move |n| p[..n].iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")))
}

fn score_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(q, g)| {
        (
            prop::collection::vec(prop::collection::vec((0i32..4).prop_map(|v| v as f64 * 0.25), g), q),
            prop::collection::vec(0..g, q),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recall_matches_permutation_oracle((scores, gold) in score_matrix(), k in 1usize..=5) {
        let g = scores[0].len();
        let k = k.min(g);
        let r = RankedRetrieval::new(scores.clone(), gold.clone()).unwrap();
        prop_assert_eq!(recall_at_k(&r, k).unwrap(), oracles::recall(&scores, &gold, k));
        prop_assert_eq!(recall_at_k(&r, g).unwrap(), 100.0);
        for q in 0..scores.len() {
            prop_assert_eq!(r.ranking(q), oracles::ranking(&scores[q]));
        }
    }

    #[test]
    fn map_matches_permutation_oracle((scores, gold) in score_matrix(), k in 1usize..=5, seed in any::<u64>()) {
        let g = scores[0].len();
        let k = k.min(g);
        let rel: Vec<Vec<usize>> = (0..scores.len())
            .map(|q| (0..g).filter(|j| (seed >> ((q * 5 + j) % 64)) & 1 == 1).collect())
            .collect();
        let r = RankedRetrieval::new(scores.clone(), gold).unwrap().with_relevance(rel.clone()).unwrap();
        match oracles::map(&scores, &rel, k) {
            Some(v) => prop_assert!((map_at_k(&r, k).unwrap() - v).abs() < 1e-9),
            None => prop_assert!(map_at_k(&r, k).is_err()),
        }
    }

    #[test]
    fn ranking_metrics_invariant_under_monotone_map((scores, gold) in score_matrix()) {
        let g = scores[0].len();
        let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| (3.0 * s).exp() - 7.0).collect()).collect();
        let a = RankedRetrieval::new(scores, gold.clone()).unwrap();
        let b = RankedRetrieval::new(warped, gold).unwrap();
        let mut prev = 0.0;
        for k in 1..=g {
            let ra = recall_at_k(&a, k).unwrap();
            prop_assert_eq!(ra, recall_at_k(&b, k).unwrap());
            prop_assert!(ra >= prev);
            prev = ra;
        }
    }

    #[test]
    fn bleu_matches_oracle(c in sentence(5), r in sentence(5), n in 1usize..=4) {
        prop_assert!((bleu(&c, &r, n) - oracles::bleu(&c, &r, n)).abs() < 1e-9);
    }

    #[test]
    fn rouge_matches_oracle(c in sentence(5), r in sentence(5)) {
        prop_assert!((rouge(&c, &r, RougeVariant::One) - oracles::rouge1(&c, &r)).abs() < 1e-9);
        prop_assert!((rouge(&c, &r, RougeVariant::L) - oracles::rouge_l(&c, &r)).abs() < 1e-9);
    }

    #[test]
    fn meteor_matches_oracle_on_distinct_tokens(c in distinct_sentence(5), r in distinct_sentence(5)) {
        prop_assert!((meteor_simplified(&c, &r) - oracles::meteor(&c, &r)).abs() < 1e-9);
    }

    #[test]
    fn meteor_alignment_is_maximal(c in sentence(5), r in sentence(5)) {
        let (m, min_chunks) = oracles::meteor_alignment_stats(&c, &r);
        let align = meteor_alignment(&metric_tokens(&c), &metric_tokens(&r));
        prop_assert_eq!(align.iter().flatten().count(), m);
        prop_assert!(chunk_count(&align) >= min_chunks);
        prop_assert!(meteor_simplified(&c, &r) <= oracles::meteor(&c, &r) + 1e-9);
    }

    #[test]
    fn identical_texts_score_full(c in sentence(6)) {
        for n in 1..=4 {
            prop_assert!((bleu(&c, &c, n) - 100.0).abs() < 1e-9);
        }
        prop_assert!((rouge(&c, &c, RougeVariant::L) - 100.0).abs() < 1e-9);
        prop_assert!((rouge(&c, &c, RougeVariant::One) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn vqa_matches_counting_oracle(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..=5)) {
        let labels = ["left lung", "Left  Lung", "heart"];
        let p: Vec<String> = pairs.iter().map(|(a, _)| labels[*a].to_string()).collect();
        let g: Vec<String> = pairs.iter().map(|(_, b)| labels[*b].to_string()).collect();
        let pr: Vec<&str> = p.iter().map(String::as_str).collect();
        let gr: Vec<&str> = g.iter().map(String::as_str).collect();
        prop_assert!((vqa_accuracy(&p, &g, VqaLevel::Minor).unwrap() - oracles::accuracy(&pr, &gr)).abs() < 1e-9);
    }
}

#[test]
fn spec_hand_cases() {
    let r = RankedRetrieval::diagonal(vec![vec![0.9, 0.1, 0.2], vec![0.3, 0.8, 0.1], vec![0.2, 0.9, 0.5]]).unwrap();
    assert!((recall_at_k(&r, 1).unwrap() - 66.666_666_666_666_67).abs() < 1e-9);
    assert!((rouge("a b c d", "a c b d", RougeVariant::L) - 75.0).abs() < 1e-9);
    assert!((bleu("a b c", "a b d", 1) - 66.666_666_666_666_67).abs() < 1e-9);
    let all = RankedRetrieval::diagonal(vec![vec![0.3, 0.2], vec![0.1, 0.4]])
        .unwrap()
        .with_relevance(vec![vec![0, 1], vec![0, 1]])
        .unwrap();
    assert_eq!(map_at_k(&all, 2).unwrap(), 100.0);
}
