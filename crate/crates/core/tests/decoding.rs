use proptest::prelude::*;
use tmlevt::decoder::{batch_decode, refine_once, Convergence, DecodeItem};
use tmlevt::policy::{CopyPolicy, OraclePolicy};
use tmlevt::{decode, DecodeConfig, DecoderState, EditPolicy};

const VOCAB: usize = 16;

fn ids(max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(6u32..VOCAB as u32, 0..=max_len)
}

fn item(id: u64, src: Vec<u32>, init: Vec<u32>, reference: Vec<u32>) -> DecodeItem {
    DecodeItem {
        id,
        encoder_input: src,
        init,
        reference: Some(reference),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn copy_returns_init(init in ids(12), max_iter in 1usize..12) {
        let p = CopyPolicy::new(VOCAB, 8);
        let cfg = DecodeConfig { max_iter, ..Default::default() };
        let (hyp, trace) = decode(&p, &item(0, vec![6], init.clone(), vec![7]), &cfg).unwrap();
        prop_assert_eq!(hyp, init);
        prop_assert_eq!(trace.iterations, 1);
        prop_assert_eq!(trace.convergence, Convergence::Fixpoint);
    }

    #[test]
    fn oracle_reaches_reference(init in ids(10), reference in ids(10)) {
        let p = OraclePolicy::new(VOCAB, 16);
        let (hyp, trace) = decode(&p, &item(0, vec![6], init, reference.clone()), &DecodeConfig::default()).unwrap();
        prop_assert_eq!(hyp, reference);
        prop_assert!(trace.iterations <= 2);
        prop_assert_eq!(trace.convergence, Convergence::Fixpoint);
    }

    #[test]
    fn fixpoints_are_stable_and_runs_terminate(init in ids(10), reference in ids(10), max_iter in 1usize..5) {
        for p in [&OraclePolicy::new(VOCAB, 16) as &dyn EditPolicy, &CopyPolicy::new(VOCAB, 16)] {
            let it = item(0, vec![6, 7], init.clone(), reference.clone());
            let cfg = DecodeConfig { max_iter, ..Default::default() };
            let (hyp, trace) = decode(p, &it, &cfg).unwrap();
            prop_assert!(trace.iterations >= 1 && trace.iterations <= max_iter);
            prop_assert_eq!(trace.steps.len(), trace.iterations);
            if trace.convergence == Convergence::Fixpoint {
                let mut s = p.session(&it.encoder_input, it.reference.as_deref()).unwrap();
                let state = DecoderState::new(it.encoder_input.clone(), &hyp);
                let (again, _) = refine_once(s.as_mut(), &state, false).unwrap();
                prop_assert_eq!(again, state);
            }
        }
    }

    #[test]
    fn batch_equals_sequential(pairs in prop::collection::vec((ids(8), ids(8)), 1..12)) {
        let items: Vec<DecodeItem> = pairs
            .iter()
            .enumerate()
            .map(|(i, (a, b))| item(i as u64, vec![6], a.clone(), b.clone()))
            .collect();
        let p = OraclePolicy::new(VOCAB, 16);
        let cfg = DecodeConfig::default();
        let batch = batch_decode(&p, &items, &cfg).unwrap();
        let seq: Vec<_> = items.iter().map(|it| decode(&p, it, &cfg).unwrap()).collect();
        prop_assert_eq!(batch, seq);
    }
}

#[test]
fn empty_start_omits_first_deletion_only() {
    let p = OraclePolicy::new(VOCAB, 16);
    let (_, trace) = decode(&p, &item(0, vec![6], vec![], vec![7, 8]), &DecodeConfig::default()).unwrap();
    assert!(!trace.steps[0].deletion_called);
    assert!(trace.steps[1..].iter().all(|s| s.deletion_called));
    let (_, trace) = decode(&p, &item(0, vec![6], vec![9], vec![7, 8]), &DecodeConfig::default()).unwrap();
    assert!(trace.steps[0].deletion_called);
    assert_eq!(trace.steps[0].deletions, 1);
}

#[test]
fn zero_iterations_rejected() {
    let p = CopyPolicy::new(VOCAB, 4);
    let cfg = DecodeConfig {
        max_iter: 0,
        ..Default::default()
    };
    assert!(decode(&p, &item(0, vec![6], vec![], vec![]), &cfg).is_err());
}

#[test]
fn oracle_without_reference_is_an_error() {
    let p = OraclePolicy::new(VOCAB, 4);
    let it = DecodeItem {
        id: 0,
        encoder_input: vec![6],
        init: vec![],
        reference: None,
    };
    assert!(decode(&p, &it, &DecodeConfig::default()).is_err());
}
