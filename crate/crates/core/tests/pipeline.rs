use proptest::prelude::*;

use prepserve::pipeline::{
    bucket_for, optimize, DatasetGraph, ElementStream, FunctionRegistry, Item, Pipeline,
};

#[derive(Debug, Clone)]
enum Step {
    Map(&'static str, u64),
    Filter(&'static str, u64),
    Shuffle(u64, u64),
    Repeat(u64),
    Take(u64),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        Just(Step::Map("identity", 0)),
        (0u64..256).prop_map(|a| Step::Map("xor_payload", a)),
        (0u64..4).prop_map(|a| Step::Map("burn", a)),
        Just(Step::Filter("always_true", 0)),
        Just(Step::Filter("even_key", 0)),
        (0u64..100).prop_map(|n| Step::Filter("key_lt", n)),
        (1u64..16, any::<u64>()).prop_map(|(b, s)| Step::Shuffle(b, s)),
        (1u64..3).prop_map(Step::Repeat),
        (0u64..80).prop_map(Step::Take),
    ]
}

prop_compose! {
    fn graph()(
        end in 0u64..60,
        steps in prop::collection::vec(step(), 0..6),
        batch in prop::option::of(1u64..8),
        prefetch in any::<bool>(),
    ) -> DatasetGraph {
        let mut p = Pipeline::range(0, end);
        for s in steps {
            p = match s {
                Step::Map(f, a) => p.map_with(f, a, 1),
                Step::Filter(f, a) => p.then(
                    prepserve::pipeline::OperatorSpec::new(prepserve::pipeline::OpKind::Filter)
                        .with_str("fn", f)
                        .with_u64("arg", a),
                ),
                Step::Shuffle(b, seed) => p.shuffle(b, seed),
                Step::Repeat(n) => p.repeat(n),
                Step::Take(n) => p.take(n),
            };
        }
        if let Some(b) = batch {
            p = p.batch(b);
        }
        if prefetch {
            p = p.prefetch(2);
        }
        p.build(&FunctionRegistry::default()).unwrap()
    }
}

fn elements(g: &DatasetGraph) -> (usize, Vec<(u64, Vec<u8>)>) {
    let reg = FunctionRegistry::default();
    let items = ElementStream::for_range_graph(g, 7, &reg)
        .unwrap()
        .collect_all()
        .unwrap();
    let n = items.len();
    let mut out: Vec<(u64, Vec<u8>)> = items
        .into_iter()
        .flat_map(Item::into_batches)
        .flat_map(|b| b.elements)
        .map(|e| (e.key, e.payload))
        .collect();
    out.sort();
    (n, out)
}

proptest! {
    #[test]
    fn optimize_preserves_output_multiset(g in graph()) {
        let o = optimize(&g);
        let (n_raw, raw) = elements(&g);
        let (n_opt, opt) = elements(&o);
        prop_assert_eq!(raw, opt);
        prop_assert_eq!(n_raw, n_opt);
        prop_assert_eq!(optimize(&o), o);
    }

    #[test]
    fn bucket_matches_interval_oracle(
        len in 0u64..2000,
        mut bounds in prop::collection::btree_set(1u64..1500, 1..6),
    ) {
        let b: Vec<u64> = std::mem::take(&mut bounds).into_iter().collect();
        let expected = if len <= b[0] {
            0
        } else {
            (1..=b.len())
                .find(|&i| i == b.len() || (b[i - 1] < len && len <= b[i]))
                .unwrap()
        };
        prop_assert_eq!(bucket_for(len, &b), expected);
    }
}
