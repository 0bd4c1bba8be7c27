mod common;

use proptest::prelude::*;
use rerank_core::metrics::{corpus_bleu, meteor, rouge_l, sentence_bleu, tokenize};

const WORDS: [&str; 8] = ["the", "cat", "sat", "mat", "run", "runs", "running", "a"];

fn sentence(max: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..=max)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sentence_bleu_matches_oracle(c in sentence(9), r in sentence(9)) {
        let got = sentence_bleu(&tokenize(&c.join(" ")), &tokenize(&r.join(" "))).unwrap();
        prop_assert!(close(got, common::bleu(&c, &r)), "{got} vs {}", common::bleu(&c, &r));
    }

    #[test]
    fn corpus_bleu_matches_oracle(pairs in prop::collection::vec((sentence(7), sentence(7)), 1..5)) {
        let toks: Vec<_> = pairs
            .iter()
            .map(|(c, r)| (tokenize(&c.join(" ")), tokenize(&r.join(" "))))
            .collect();
        let got = corpus_bleu(toks.iter().map(|(c, r)| (c, r))).unwrap();
        prop_assert!(close(got, common::corpus_bleu(&pairs)));
    }

    #[test]
    fn rouge_matches_oracle(c in sentence(9), r in sentence(9)) {
        let got = rouge_l(&tokenize(&c.join(" ")), &tokenize(&r.join(" "))).unwrap();
        prop_assert!(close(got, common::rouge_l(&c, &r)));
    }

    #[test]
    fn meteor_matches_oracle(c in sentence(6), r in sentence(6)) {
        let got = meteor(&tokenize(&c.join(" ")), &tokenize(&r.join(" "))).unwrap();
        prop_assert!(close(got, common::meteor(&c, &r)), "{c:?} / {r:?}: {got} vs {}", common::meteor(&c, &r));
    }
}

#[test]
fn hand_values() {
    let t = tokenize;
    let e = std::f64::consts::E;
    assert!(close(sentence_bleu(&t("a b c d"), &t("a b c d e")).unwrap(), e.powf(-0.25)));
    let pairs = [(t("a b c d"), t("a b c d e")), (t("a b c d"), t("a b c d"))];
    assert!(close(corpus_bleu(pairs.iter().map(|(c, r)| (c, r))).unwrap(), e.powf(-0.125)));
    assert!(close(rouge_l(&t("a b c"), &t("a c b")).unwrap(), 2.0 / 3.0));
    let m = meteor(&t("the cat sat"), &t("the cat sat")).unwrap();
    assert!((m - (1.0 - 0.5 / 27.0)).abs() < 1e-12 && (m - 0.98148).abs() < 5e-6);
}
