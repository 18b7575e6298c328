use proptest::prelude::*;
use tmlevt::tm_index::{edit_distance, edit_distance_within, similarity, NGramIndex, Window};
use tmlevt::SentenceRecord;

fn toks(v: &[u8]) -> Vec<String> {
    v.iter().map(|b| format!("w{b}")).collect()
}

fn sentence(alpha: u8, max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0..alpha, 0..=max_len)
}

fn naive_ed(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive_ed(ra, rb) + usize::from(x != y);
            sub.min(naive_ed(ra, b) + 1).min(naive_ed(a, rb) + 1)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn indexed_retrieval_equals_scan(
        corpus in prop::collection::vec(sentence(5, 9), 1..40),
        queries in prop::collection::vec(sentence(5, 9), 1..8),
        n in 1usize..4,
        k in 1usize..5,
        lo in 0.0f64..0.9,
        exact in any::<bool>(),
        exclude in any::<bool>(),
    ) {
        let records: Vec<SentenceRecord> = corpus
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, s)| SentenceRecord { id: i as u64 * 3, domain: "d".into(), src: toks(s), tgt: toks(s) })
            .collect();
        prop_assume!(!records.is_empty());
        let index = NGramIndex::build(&records, n).unwrap();
        let window = Window::new(k, lo, if exact { 1.5 } else { 1.0 }).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let q = toks(q);
            let ex = exclude.then_some(qi as u64 * 3);
            prop_assert_eq!(index.retrieve(&q, window, ex), index.exhaustive(&q, window, ex));
        }
    }

    #[test]
    fn similarity_properties(a in sentence(3, 8), b in sentence(3, 8)) {
        prop_assume!(!(a.is_empty() && b.is_empty()));
        let s = similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, similarity(&b, &a).unwrap());
        prop_assert_eq!(s == 1.0, a == b);
    }

    #[test]
    fn edit_distance_matches_recursion(a in sentence(3, 6), b in sentence(3, 6), max in 0usize..8) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, naive_ed(&a, &b));
        prop_assert_eq!(edit_distance_within(&a, &b, max), (d <= max).then_some(d));
    }

    #[test]
    fn triangle_inequality(a in sentence(3, 7), b in sentence(3, 7), c in sentence(3, 7)) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }
}

#[test]
fn both_empty_is_an_error() {
    let e: [u8; 0] = [];
    assert!(similarity(&e, &e).is_err());
}
