use std::collections::HashMap;

use proptest::prelude::*;
use tmr::replay::{ReplayBuffer, SumTree};
use tmr::rng::seeded;
use tmr::verify::placeholder_example;

#[derive(Debug, Clone)]
enum Op {
    Add(f64),
    Update(usize, f64),
    Sample(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0.01f64..10.0).prop_map(Op::Add),
        // Coarse weights make ties frequent.
        1 => (1u32..4).prop_map(|w| Op::Add(w as f64)),
        2 => (any::<usize>(), 0.01f64..10.0).prop_map(|(i, w)| Op::Update(i, w)),
        1 => (1usize..8).prop_map(Op::Sample),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sum_tree_prefix_search_matches_linear_scan(
        weights in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..5.0], 1..70),
        us in prop::collection::vec(0.0f64..1.0, 1..20),
    ) {
        let mut tree = SumTree::new(weights.len());
        for (i, &w) in weights.iter().enumerate() {
            tree.set(i, w).unwrap();
        }
        let total: f64 = weights.iter().sum();
        prop_assert!((tree.total() - total).abs() <= 1e-12 * total.max(1.0));
        prop_assert!(tree.max_consistency_error() <= 1e-12);
        if total == 0.0 {
            prop_assert!(tree.find_prefix(0.0).is_err());
            return Ok(());
        }
        for u in us {
            let u = u * tree.total();
            let leaf = tree.find_prefix(u).unwrap();
            prop_assert!(weights[leaf] > 0.0);
            let before: f64 = weights[..leaf].iter().sum();
            let slack = 1e-9 * total;
            prop_assert!(before <= u + slack && u < before + weights[leaf] + slack,
                "u {} leaf {} interval [{}, {})", u, leaf, before, before + weights[leaf]);
        }
    }

    #[test]
    fn buffer_matches_reference_model(
        capacity in 1usize..20,
        alpha in prop_oneof![Just(0.0), Just(0.5), Just(1.0), Just(2.0)],
        ops in prop::collection::vec(op(), 1..120),
        seed in any::<u64>(),
    ) {
        let mut buf = ReplayBuffer::new(capacity, alpha).unwrap();
        let mut rng = seeded(seed);
        // id -> (weight, insert step)
        let mut model: HashMap<u64, (f64, u64)> = HashMap::new();
        for (step, op) in ops.into_iter().enumerate() {
            let step = step as u64;
            match op {
                Op::Add(w) => {
                    let expected = (model.len() == capacity).then(|| {
                        *model
                            .iter()
                            .min_by(|a, b| {
                                let (ka, kb) = ((a.1 .0, a.1 .1, *a.0), (b.1 .0, b.1 .1, *b.0));
                                ka.partial_cmp(&kb).unwrap()
                            })
                            .unwrap()
                            .0
                    });
                    let (id, evicted) = buf.add_with_eviction(placeholder_example(), w, step).unwrap();
                    prop_assert_eq!(evicted.map(|e| e.entry_id), expected);
                    if let Some(gone) = expected {
                        model.remove(&gone);
                    }
                    model.insert(id, (w, step));
                }
                Op::Update(i, w) => {
                    if model.is_empty() {
                        continue;
                    }
                    let mut ids: Vec<u64> = model.keys().copied().collect();
                    ids.sort_unstable();
                    let id = ids[i % ids.len()];
                    buf.update(id, w).unwrap();
                    model.get_mut(&id).unwrap().0 = w;
                }
                Op::Sample(k) => {
                    if model.is_empty() {
                        prop_assert!(buf.sample(k, &mut rng).is_err());
                        continue;
                    }
                    let z: f64 = model.values().map(|(w, _)| w.powf(alpha)).sum();
                    for d in buf.sample(k, &mut rng).unwrap() {
                        let (w, s) = model[&d.entry_id];
                        prop_assert!((d.probability - w.powf(alpha) / z).abs() <= 1e-9);
                        prop_assert_eq!(d.insert_step, s);
                    }
                }
            }
            prop_assert!(buf.live_count() <= capacity);
            prop_assert_eq!(buf.live_count(), model.len());
            for (id, (w, _)) in &model {
                prop_assert_eq!(buf.get(*id).map(|e| e.weight), Some(*w));
            }
            let z: f64 = model.values().map(|(w, _)| w.powf(alpha)).sum();
            prop_assert!((buf.total_priority() - z).abs() <= 1e-9 * z.max(1.0));
        }
    }

    #[test]
    fn updates_to_evicted_entries_are_stale(extra in 1usize..10) {
        let mut buf = ReplayBuffer::new(4, 1.0).unwrap();
        let first = buf.add(placeholder_example(), 0.5, 0).unwrap();
        for s in 0..(3 + extra) {
            buf.add(placeholder_example(), 1.0, s as u64 + 1).unwrap();
        }
        let err = buf.update(first, 2.0).unwrap_err();
        prop_assert!(err.is_stale());
        prop_assert!(buf.get(first).is_none());
    }
}
