use proptest::prelude::*;
use rand::Rng;
use ume_tensor::checkpoint::Checkpoint;
use ume_tensor::rng::seeded;
use ume_tensor::{ctc_min_frames, Conv1dAttrs, Graph, Init, ParamStore, Precision, Tensor};

/// Sum over every path of length `frames` whose collapse equals `target`.
fn ctc_brute_force(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let frames = probs.len();
    let symbols = probs[0].len();
    let mut total = 0.0;
    for code in 0..symbols.pow(frames as u32) {
        let mut c = code;
        let path: Vec<usize> = (0..frames)
            .map(|_| {
                let s = c % symbols;
                c /= symbols;
                s
            })
            .collect();
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| probs[t][s]).product::<f64>();
        }
    }
    total
}

fn targets(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for l in 1..=vocab {
                let mut n: Vec<usize> = t.clone();
                n.push(l);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn ctc_forward_equals_path_enumeration() {
    let mut rng = seeded(11, 0);
    let mut cases = 0;
    for frames in 1..=4 {
        for vocab in 1..=2 {
            for target in targets(vocab, 2) {
                if ctc_min_frames(&target) > frames {
                    continue;
                }
                let logits: Vec<f64> = (0..frames * (vocab + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let g = Graph::new();
                let z = g.constant(Tensor::new(vec![frames, vocab + 1], logits).unwrap());
                let lp = g.log_softmax(z, 1).unwrap();
                let probs: Vec<Vec<f64>> = g
                    .value(lp)
                    .data()
                    .chunks(vocab + 1)
                    .map(|r| r.iter().map(|v| v.exp()).collect())
                    .collect();
                let nll = g.ctc(lp, &target, 0).unwrap();
                let expected = -ctc_brute_force(&probs, &target).ln();
                assert!(
                    (g.item(nll).unwrap() - expected).abs() < 1e-9,
                    "T={frames} V={vocab} {target:?}"
                );
                cases += 1;
            }
        }
    }
    assert!(cases >= 30, "{cases}");
}

#[test]
fn ctc_rejects_infeasible_target() {
    let g = Graph::new();
    let lp = g.constant(Tensor::full(vec![2, 3], (1.0f64 / 3.0).ln()));
    let err = g.ctc(lp, &[1, 1], 0).unwrap_err();
    assert!(err.to_string().contains("infeasible"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_is_a_distribution(rows in 1usize..5, cols in 1usize..7, axis in 0usize..2, seed in any::<u64>()) {
        let mut rng = seeded(seed, 1);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let y = g.value(y).clone();
        prop_assert!(y.data().iter().all(|&v| v > 0.0));
        let (outer, n) = if axis == 0 { (cols, rows) } else { (rows, cols) };
        for o in 0..outer {
            let s: f64 = (0..n).map(|j| if axis == 0 { y.data()[j * cols + o] } else { y.data()[o * cols + j] }).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_then_transpose_restores_length(kernel in 1usize..8, stride in 1usize..5, blocks in 0usize..20, channels in 1usize..3) {
        prop_assume!(stride <= kernel);
        let len = kernel + blocks * stride;
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![channels, len]));
        let w = g.constant(Tensor::zeros(vec![4, channels, kernel]));
        let h = g.conv1d(x, w, None, Conv1dAttrs { stride, ..Default::default() }).unwrap();
        let wt = g.constant(Tensor::zeros(vec![4, channels, kernel]));
        let y = g.conv_transpose1d(h, wt, stride).unwrap();
        prop_assert_eq!(g.shape(y), vec![channels, len]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(sizes in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
        let mut rng = seeded(seed, 2);
        let mut store = ParamStore::new(Precision::F32);
        for (i, n) in sizes.iter().enumerate() {
            store.add(format!("p{i}"), &[*n, 2], Init::Xavier { fan_in: *n, fan_out: 2 }, &mut rng).unwrap();
        }
        let ck = Checkpoint::from_store(&store, serde_json::json!({"seed": seed}), true);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut fresh = ParamStore::new(Precision::F32);
        for (i, n) in sizes.iter().enumerate() {
            fresh.add(format!("p{i}"), &[*n, 2], Init::Zeros, &mut rng).unwrap();
        }
        back.restore_into(&mut fresh, |_| true, true).unwrap();
        for (id, p) in store.iter() {
            prop_assert_eq!(&fresh.get(id).value, &p.value);
        }
    }
}
