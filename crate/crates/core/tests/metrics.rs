mod support;

use keycap::metrics::*;
use proptest::prelude::*;
use support::{bleu_oracle, cider_oracle, meteor_alignment_oracle, words};

fn sentence(min: usize, max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), min..=max)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn refs() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(sentence(1, 7), 1..4)
}

proptest! {
    #[test]
    fn scores_are_in_range(cand in sentence(0, 7), refs in refs()) {
        for n in 1..=4 {
            let b = bleu(&cand, &refs, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let r = rouge_l(&cand, &refs, 1.2).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        let m = meteor_multi(&cand, &refs);
        prop_assert!((0.0..1.0).contains(&m));
        let corpus = vec![refs.clone(), vec![words("x y z")]];
        prop_assert!(cider(&cand, &refs, &corpus, 4).unwrap() >= 0.0);
    }

    #[test]
    fn identical_candidate_scores_one(s in sentence(4, 7)) {
        let refs = vec![s.clone()];
        for n in 1..=4 {
            prop_assert!((bleu(&s, &refs, n).unwrap() - 1.0).abs() < 1e-12);
        }
        prop_assert!((rouge_l(&s, &refs, 0.5).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((rouge_l(&s, &refs, 3.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unigram_bleu_ignores_word_order(cand in sentence(1, 6), refs in refs(), seed in any::<u64>()) {
        let mut shuffled = cand.clone();
        keycap::SeededRng::new(seed).shuffle(&mut shuffled);
        let a = BleuStats::new(&cand, &refs, 2).unwrap();
        let b = BleuStats::new(&shuffled, &refs, 2).unwrap();
        prop_assert_eq!(a.matches[0], b.matches[0]);
        prop_assert!((a.score(1, false) - b.score(1, false)).abs() < 1e-15);
    }

    #[test]
    fn corpus_of_one_equals_sentence(cand in sentence(1, 6), refs in refs()) {
        let pair = vec![(cand.clone(), refs.clone())];
        for n in 1..=4 {
            let s = bleu(&cand, &refs, n).unwrap();
            let c = corpus_bleu(&pair, n, false).unwrap();
            prop_assert!((s - c).abs() < 1e-15);
            prop_assert!((s - bleu_oracle(&cand, &refs, n)).abs() < 1e-10);
        }
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(a in sentence(0, 8), b in sentence(0, 8)) {
        let l = lcs_length(&a, &b);
        prop_assert_eq!(l, lcs_length(&b, &a));
        prop_assert!(l <= a.len().min(b.len()));
    }

    #[test]
    fn meteor_alignment_matches_enumeration(a in sentence(1, 6), b in sentence(1, 6)) {
        prop_assert_eq!(meteor_alignment(&a, &b), meteor_alignment_oracle(&a, &b));
    }

    #[test]
    fn cider_matches_dense_vectors(cand in sentence(1, 6), refs in refs(), other in refs()) {
        let corpus = vec![refs.clone(), other];
        let got = cider(&cand, &refs, &corpus, 4).unwrap();
        prop_assert!((got - cider_oracle(&cand, &refs, &corpus)).abs() < 1e-10);
    }

    #[test]
    fn report_is_composed_of_parts(items in prop::collection::vec((sentence(1, 6), refs()), 1..5)) {
        let report = corpus_report(&items, ReportOptions::default()).unwrap();
        let b: Vec<f64> = (1..=4).map(|n| corpus_bleu(&items, n, false).unwrap()).collect();
        prop_assert_eq!(report.bleu_1, b[0]);
        prop_assert_eq!(report.bleu_4, b[3]);
        prop_assert!((report.bleu_avg - b.iter().sum::<f64>() / 4.0).abs() < 1e-15);
        let corpus: Vec<Vec<Vec<String>>> = items.iter().map(|(_, r)| r.clone()).collect();
        let n = items.len() as f64;
        let cider_mean = items.iter().map(|(c, r)| cider(c, r, &corpus, 4).unwrap()).sum::<f64>() / n;
        let rouge_mean = items.iter().map(|(c, r)| rouge_l(c, r, 1.2).unwrap()).sum::<f64>() / n;
        let meteor_mean = items.iter().map(|(c, r)| meteor_multi(c, r)).sum::<f64>() / n;
        prop_assert!((report.cider - cider_mean).abs() < 1e-12);
        prop_assert!((report.rouge_l - rouge_mean).abs() < 1e-12);
        prop_assert!((report.meteor - meteor_mean).abs() < 1e-12);
        prop_assert_eq!(report.count, items.len());
    }
}

#[test]
fn short_candidate_pays_brevity_penalty() {
    let b = bleu(&words("a b"), &[words("a b c d")], 1).unwrap();
    assert!((b - (-1.0f64).exp()).abs() < 1e-15);
}

#[test]
fn degenerate_inputs() {
    assert_eq!(bleu(&[], &[words("a")], 4).unwrap(), 0.0);
    assert!(bleu(&words("a"), &[], 1).is_err());
    assert!(rouge_l(&words("a"), &[vec![]], 1.2).is_err());
    assert_eq!(rouge_l(&[], &[words("a")], 1.2).unwrap(), 0.0);
    assert_eq!(rouge_l(&words("a b"), &[words("c d")], 1.2).unwrap(), 0.0);
    assert_eq!(meteor(&[], &words("a")), 0.0);
    assert_eq!(meteor(&words("a b"), &words("c d")), 0.0);
    assert!(corpus_report(&[], ReportOptions::default()).is_err());
}

#[test]
fn swapped_words_break_every_chunk() {
    let (m, ch) = meteor_alignment(&words("a c b d"), &words("a b c d"));
    assert_eq!((m, ch), (4, 4));
    assert_eq!((m, ch), meteor_alignment_oracle(&words("a c b d"), &words("a b c d")));
}

#[test]
fn smoothing_only_rescues_zero_matches() {
    let pairs = vec![(words("a b x y"), vec![words("a b c d")])];
    assert_eq!(corpus_bleu(&pairs, 4, false).unwrap(), 0.0);
    let smoothed = corpus_bleu(&pairs, 4, true).unwrap();
    let want = (0.5f64 * (1.0 / 3.0) * (0.1 / 2.0) * (0.1 / 1.0)).powf(0.25);
    assert!((smoothed - want).abs() < 1e-12);
}
