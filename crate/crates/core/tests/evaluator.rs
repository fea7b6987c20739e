use moelab::evaluator::{evaluate, score, FormatSpec};
use moelab::model::{ModelConfig, MoEModel, Token};
use moelab::workbench::vocab::{CLOSE, OPEN};
use moelab::workbench::{generate_split, Split, TaskSpec};
use proptest::prelude::*;

fn spec() -> FormatSpec {
    FormatSpec { open: OPEN, close: CLOSE, max_len: 3, alphabet: (0..10).collect() }
}

/// Outputs biased toward answer-like shapes so every branch is exercised.
fn output() -> impl Strategy<Value = Vec<Token>> {
    let token = prop_oneof![0u32..10, Just(OPEN), Just(CLOSE), 10u32..29];
    prop::collection::vec(token, 0..8)
}

fn gold() -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(0u32..10, 1..4)
}

proptest! {
    #[test]
    fn ica_never_exceeds_pia(rows in prop::collection::vec((output(), gold()), 1..40)) {
        let (outs, golds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let r = score(&outs, &golds, &spec()).unwrap();
        prop_assert!(r.ica <= r.pia);
        prop_assert!((0.0..=1.0).contains(&r.ica) && (0.0..=1.0).contains(&r.pia));
        prop_assert!(r.records.iter().all(|s| !s.format_ok || s.content_ok));
        prop_assert_eq!(score(&outs, &golds, &spec()).unwrap(), r);
    }

    #[test]
    fn permutation_moves_records_not_aggregates(
        rows in prop::collection::vec((output(), gold()), 1..30),
        rot in any::<usize>(),
    ) {
        let (outs, golds): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let k = rot % outs.len();
        let mut po = outs.clone();
        let mut pg = golds.clone();
        po.rotate_left(k);
        pg.rotate_left(k);
        let a = score(&outs, &golds, &spec()).unwrap();
        let b = score(&po, &pg, &spec()).unwrap();
        prop_assert_eq!((a.ica, a.pia), (b.ica, b.pia));
        let mut rec = a.records.clone();
        rec.rotate_left(k);
        prop_assert_eq!(rec, b.records);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let model = MoEModel::init(ModelConfig::default(), 3).unwrap();
    let data = generate_split(&TaskSpec::copy_reverse(5, 2), 40, Split::Eval).unwrap();
    let a = evaluate(&model, &data, true).unwrap();
    let b = evaluate(&model, &data, true).unwrap();
    assert_eq!(a, b);
    assert!(a.outcome.ica <= a.outcome.pia);
    a.log.unwrap().check_conservation().unwrap();
}
