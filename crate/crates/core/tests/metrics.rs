use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmlevt::eval::{bucket_edges, bucket_index, bucketed_eval, corpus_bleu, unrelated_rate};

fn sent(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..8, 1..=max_len)
}

/// Walk every TM occurrence; an occurrence is unrelated once the reference's
/// copies of that word are used up, and survives if the hypothesis still has
/// a copy beyond the reference's.
fn counting_oracle(hyps: &[Vec<u8>], tms: &[Vec<u8>], refs: &[Vec<u8>]) -> Option<f64> {
    let (mut total, mut kept) = (0usize, 0usize);
    for ((h, t), r) in hyps.iter().zip(tms).zip(refs) {
        let mut ref_left = [0usize; 256];
        let mut hyp_extra = [0isize; 256];
        for &w in r {
            ref_left[w as usize] += 1;
            hyp_extra[w as usize] -= 1;
        }
        for &w in h {
            hyp_extra[w as usize] += 1;
        }
        for &w in t {
            let w = w as usize;
            if ref_left[w] > 0 {
                ref_left[w] -= 1;
                continue;
            }
            total += 1;
            if hyp_extra[w] > 0 {
                hyp_extra[w] -= 1;
                kept += 1;
            }
        }
    }
    (total > 0).then(|| 100.0 * kept as f64 / total as f64)
}

#[test]
fn unrelated_rate_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let n = rng.gen_range(0..8);
        (0..n).map(|_| rng.gen_range(0..6)).collect()
    };
    for _ in 0..1000 {
        let n = rng.gen_range(1..4);
        let (mut h, mut t, mut r) = (vec![], vec![], vec![]);
        for _ in 0..n {
            h.push(draw(&mut rng));
            t.push(draw(&mut rng));
            r.push(draw(&mut rng));
        }
        assert_eq!(unrelated_rate(&h, &t, &r).unwrap(), counting_oracle(&h, &t, &r));
    }
}

proptest! {
    #[test]
    fn bleu_of_identity_is_100(x in prop::collection::vec(sent(12), 1..6)) {
        prop_assert!((corpus_bleu(&x, &x).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_bounded_and_order_free(pairs in prop::collection::vec((sent(10), sent(10)), 1..8), seed in any::<u64>()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let b = corpus_bleu(&h, &r).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert!((corpus_bleu(&h2, &r2).unwrap() - b).abs() < 1e-9);
    }

    #[test]
    fn copy_keeps_every_unrelated_token(tms in prop::collection::vec(sent(8), 1..5), refs in prop::collection::vec(sent(8), 1..5)) {
        let n = tms.len().min(refs.len());
        let (tms, refs) = (&tms[..n], &refs[..n]);
        if let Some(rate) = unrelated_rate(tms, tms, refs).unwrap() {
            prop_assert_eq!(rate, 100.0);
        }
    }

    #[test]
    fn buckets_partition(sims in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let edges = bucket_edges(0.3, 0.1);
        let refs: Vec<Vec<u8>> = sims.iter().map(|_| vec![1, 2]).collect();
        let rows = bucketed_eval(&sims, &refs, &refs, None, None, &edges).unwrap();
        prop_assert_eq!(rows.iter().map(|r| r.n).sum::<usize>(), sims.len());
        for &s in &sims {
            let (lo, hi) = edges[bucket_index(&edges, s)];
            prop_assert!(s >= lo && (s < hi || hi == 1.0));
        }
    }
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(corpus_bleu(&[vec![1u8]], &[vec![1u8], vec![2]]).is_err());
    assert!(unrelated_rate(&[vec![1u8]], &[], &[vec![1u8]]).is_err());
}
