use proptest::prelude::*;

use dtta_core::data::{corrupt, Corruption, CorruptionKind};
use dtta_core::nn::{load_checkpoint, save_checkpoint, ParamStore};
use dtta_core::rng::seeded;
use dtta_core::tensor::{Graph, Tensor};
use dtta_core::tta::{baseline_ensemble, build_condition_classification};

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in 0u64..1000) {
        let data: Vec<f64> = dtta_core::rng::normal_vec(&mut seeded(seed), rows * cols)
            .into_iter().map(|v: f64| 10.0 * v).collect();
        let mut g = Graph::new();
        let x = g.constant(vec![rows, cols], data).unwrap();
        let y = g.softmax(x);
        for row in g.value(y).chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn product_gradient_is_the_other_factor(a in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let b: Vec<f64> = a.iter().map(|v| 1.5 - v).collect();
        let mut g = Graph::new();
        let va = g.variable(vec![a.len()], a.clone()).unwrap();
        let vb = g.constant(vec![b.len()], b.clone()).unwrap();
        let p = g.mul(va, vb).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        prop_assert_eq!(grads.get(va).unwrap(), b.as_slice());
    }

    #[test]
    fn ensemble_is_a_distribution(y in distribution(6), z in distribution(6)) {
        let e = baseline_ensemble(&y, &z).unwrap();
        prop_assert!(e.iter().all(|&p| p >= 0.0));
        prop_assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn class_condition_lies_in_table_hull(y in distribution(4), seed in 0u64..100) {
        let table: Vec<f64> = dtta_core::rng::normal_vec(&mut seeded(seed), 4 * 3);
        let mut g = Graph::new();
        let yv = g.constant(vec![1, 4], y.clone()).unwrap();
        let tv = g.constant(vec![4, 3], table.clone()).unwrap();
        let c = build_condition_classification(&mut g, yv, tv).unwrap();
        for (k, &ck) in g.value(c.var()).iter().enumerate() {
            let col: Vec<f64> = (0..4).map(|j| table[j * 3 + k]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(ck >= lo - 1e-12 && ck <= hi + 1e-12);
        }
    }

    #[test]
    fn corruptions_stay_in_range_and_repeat(kind in 0usize..5, severity in 0u8..=5, seed in 0u64..50) {
        let img: Vec<f32> = dtta_core::rng::normal_vec::<f32>(&mut seeded(seed + 7), 64)
            .into_iter().map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0)).collect();
        let c = Corruption::new(CorruptionKind::ALL[kind], severity).unwrap();
        let a = corrupt(&img, 8, c, &mut seeded(seed)).unwrap();
        let b = corrupt(&img, 8, c, &mut seeded(seed)).unwrap();
        prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let mut store = ParamStore::new();
        store.insert("net/fc0/weight", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        store.insert("net/fc0/bias", Tensor::new(vec![1, 1], vec![values[0]]).unwrap()).unwrap();
        let bytes = save_checkpoint(&store);
        let back: ParamStore<f64> = load_checkpoint(&bytes).unwrap();
        prop_assert_eq!(save_checkpoint(&back), bytes);
        prop_assert_eq!(back.tensor("net/fc0/weight").unwrap().data(), values.as_slice());
    }
}
