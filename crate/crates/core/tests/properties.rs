use proptest::prelude::*;

use pilot_core::aggregation::{euclidean_distance, fedavg_aggregate, select_neighbors, ClientUpdate};
use pilot_core::checkpoint::Checkpoint;
use pilot_core::losses::{difference_loss, load_balance_loss, router_z_loss, Stage};
use pilot_core::numerics::{gelu, Graph};
use pilot_core::{ParamSet, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn shaped() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn ce(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let v = g.cross_entropy(x, targets).unwrap();
    g.value(v).item()
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = t.dims2();
    let mut d = Vec::with_capacity(r * c);
    for i in 0..r {
        for &j in perm {
            d.push(t.at(i, j));
        }
    }
    Tensor::new(vec![r, c], d).unwrap()
}

fn text_set(values: &[f64]) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::vector(values.to_vec()));
    p
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in shaped(), shift in -50.0f64..50.0) {
        let s = t.softmax(1).unwrap();
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = t.map(|v| v + shift).softmax(1).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_ignores_row_shifts(t in (1usize..5, 2usize..7).prop_flat_map(|(r, c)| matrix(r, c)), shift in -30.0f64..30.0, seed in 0usize..1000) {
        let targets: Vec<usize> = (0..t.rows()).map(|i| (seed + 7 * i) % t.cols()).collect();
        let a = ce(&t, &targets);
        let b = ce(&t.map(|v| v + shift), &targets);
        prop_assert!(a >= 0.0);
        prop_assert!(close(a, b, 1e-10), "{a} vs {b}");
    }

    #[test]
    fn difference_loss_symmetric_and_quadratic(a in matrix(4, 3), b in matrix(4, 3), s in -3.0f64..3.0) {
        let ab = difference_loss(&a, &b).unwrap();
        let ba = difference_loss(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(close(ab, ba, 1e-10));
        let scaled = difference_loss(&a.scale(s), &b).unwrap();
        prop_assert!(close(scaled, s * s * ab, 1e-10), "{scaled} vs {}", s * s * ab);
    }

    #[test]
    fn router_losses_ignore_adapter_order(t in (1usize..6, 2usize..6).prop_flat_map(|(r, c)| matrix(r, c)), k in 0usize..100) {
        let c = t.cols();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.rotate_left(k % c);
        let z = router_z_loss(&t).unwrap();
        let zp = router_z_loss(&permute_cols(&t, &perm)).unwrap();
        prop_assert!(close(z, zp, 1e-12));
        let p = t.softmax(1).unwrap();
        let lb = load_balance_loss(&p).unwrap();
        let lbp = load_balance_loss(&permute_cols(&p, &perm)).unwrap();
        prop_assert!(close(lb, lbp, 1e-12));
        // at least the uniform value, at most T
        prop_assert!(lb <= c as f64 + 1e-12);
        prop_assert!(lb > 0.0);
    }

    #[test]
    fn neighbor_choice_ignores_upload_order(points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 3..9), m in 1usize..8, rot in 0usize..9) {
        let sets: Vec<(usize, ParamSet)> = points.iter().enumerate().map(|(i, p)| (i, text_set(p))).collect();
        let refs: Vec<(usize, &ParamSet)> = sets.iter().map(|(i, p)| (*i, p)).collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot % refs.len());
        for k in 0..refs.len() {
            let a = select_neighbors(k, &refs, m).unwrap();
            let b = select_neighbors(k, &rotated, m).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), m.min(refs.len() - 1));
            prop_assert!(a.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!(a.iter().all(|(id, _)| *id != k));
        }
    }

    #[test]
    fn distance_is_a_metric(a in prop::collection::vec(-3.0f64..3.0, 5), b in prop::collection::vec(-3.0f64..3.0, 5), c in prop::collection::vec(-3.0f64..3.0, 5)) {
        let (pa, pb, pc) = (text_set(&a), text_set(&b), text_set(&c));
        let ab = euclidean_distance(&pa, &pb).unwrap();
        prop_assert_eq!(ab, euclidean_distance(&pb, &pa).unwrap());
        prop_assert_eq!(euclidean_distance(&pa, &pa).unwrap(), 0.0);
        let ac = euclidean_distance(&pa, &pc).unwrap();
        let cb = euclidean_distance(&pc, &pb).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
    }

    #[test]
    fn fedavg_of_identical_uploads_is_identity(x in prop::collection::vec(-3.0f64..3.0, 4), counts in prop::collection::vec(1usize..50, 2..6)) {
        let ups: Vec<ClientUpdate> = counts.iter().enumerate().map(|(i, &n)| ClientUpdate {
            client_id: i,
            task_id: 0,
            sample_count: n,
            visual_params: text_set(&x),
            text_params: text_set(&x),
            round: 1,
            stage: Stage::One,
        }).collect();
        let avg = fedavg_aggregate(&ups, |u| &u.visual_params).unwrap();
        for (a, b) in avg.get("a").unwrap().data().iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn checkpoints_round_trip_byte_exact(tensors in prop::collection::vec(shaped(), 1..5), round in 0usize..10) {
        let mut p = ParamSet::new();
        for (i, t) in tensors.into_iter().enumerate() {
            p.insert(format!("g{}.t{i}", i % 2), t);
        }
        let ck = Checkpoint::new(p.clone()).with_meta("round", round);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(&back.params, &p);
    }

    #[test]
    fn gelu_odd_part_is_identity(x in -8.0f64..8.0) {
        prop_assert!((gelu(x) - gelu(-x) - x).abs() < 1e-12);
    }
}
