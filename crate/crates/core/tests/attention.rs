use lmn_core::attention::{mask_softmax, qkv_project, qkv_project_scored, single_vector_scores, weighted_sum, Attention};
use lmn_core::memory::parallel_memory;
use lmn_core::{Layout, MemoryTensor, ScoreOrientation, Summarizer};
use lmn_tensor::{grad_check, Rng, Stencil, Tensor};
use proptest::prelude::*;

const ORIENTATIONS: [ScoreOrientation; 2] = [ScoreOrientation::Literal, ScoreOrientation::Swapped];

/// Memory of a random sequence built by the parallel path, so validity and
/// zeros follow the real layout.
fn random_memory(b: usize, l: usize, e: usize, k: usize, seed: u64) -> MemoryTensor<f64> {
    let mut rng = Rng::new(seed);
    let layout = Layout::new(lmn_core::config::levels_for(l.max(2)), k);
    let s = if k == 0 {
        Summarizer::<f64>::linear(e, &mut rng).unwrap()
    } else {
        Summarizer::<f64>::expander(e, k, &mut rng).unwrap()
    };
    let x = Tensor::from_vec(rng.uniform_vec(b * l * e, 1.0), &[b, l, e]).unwrap();
    parallel_memory(&x, &s, &layout).unwrap()
}

fn naive_linear(x: &[f64], w: &Tensor<f64>, bias: &Tensor<f64>, col0: usize, e: usize) -> Vec<f64> {
    let n = w.shape()[1];
    (0..e)
        .map(|j| bias.data()[col0 + j] + (0..e).map(|i| x[i] * w.data()[i * n + col0 + j]).sum::<f64>())
        .collect()
}

/// Softmax over valid scores of one position, computed from scratch.
fn naive_attention(mem: &MemoryTensor<f64>, att: &Attention<f64>, o: ScoreOrientation) -> Vec<f64> {
    let (b, l, d, e) = (mem.batch(), mem.len(), mem.depth(), mem.embed());
    let x = mem.data.data();
    let mut out = Vec::new();
    for bt in 0..b * l {
        let t = bt % l;
        let entry = |i: usize| &x[(bt * d + i) * e..(bt * d + i + 1) * e];
        let proj = |i: usize, part: usize| naive_linear(entry(i), &att.qkv_weight, &att.qkv_bias, part * e, e);
        let valid: Vec<usize> = (0..d).filter(|&i| mem.valid[t * d + i]).collect();
        let scores: Vec<f64> = valid
            .iter()
            .map(|&i| {
                let (q, k) = match o {
                    ScoreOrientation::Literal => (proj(i, 0), proj(0, 1)),
                    ScoreOrientation::Swapped => (proj(0, 0), proj(i, 1)),
                };
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (e as f64).sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        let mut acc = vec![0.0; e];
        for (&i, s) in valid.iter().zip(&scores) {
            let w = (s - m).exp() / z;
            for (a, v) in acc.iter_mut().zip(proj(i, 2)) {
                *a += w * v;
            }
        }
        out.extend(acc);
    }
    out
}

#[test]
fn attend_matches_naive_oracle() {
    let mut rng = Rng::new(11);
    for (k, l) in [(0, 1), (0, 13), (1, 16), (2, 7)] {
        let mem = random_memory(2, l, 5, k, 40 + l as u64);
        let att = Attention::<f64>::new(5, &mut rng).unwrap();
        for o in ORIENTATIONS {
            let got = att.attend(&mem, o).unwrap().values;
            let want = naive_attention(&mem, &att, o);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{o:?} k={k} l={l}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn projection_matches_naive_linear_and_keeps_invalid_rows_zero() {
    let mut rng = Rng::new(12);
    let mem = random_memory(1, 11, 4, 0, 5);
    let att = Attention::<f64>::new(4, &mut rng).unwrap();
    let (q, k, v) = qkv_project(&mem, &att.qkv_weight, &att.qkv_bias).unwrap();
    let (d, e) = (mem.depth(), 4);
    for row in 0..mem.valid.len() {
        let x = &mem.data.data()[row * e..(row + 1) * e];
        for (part, t) in [&q, &k, &v].into_iter().enumerate() {
            let got = &t.data()[row * e..(row + 1) * e];
            if mem.valid[row] {
                let want = naive_linear(x, &att.qkv_weight, &att.qkv_bias, part * e, e);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            } else {
                assert!(got.iter().all(|&g| g == 0.0), "row {row} (entry {}) not zero", row % d);
            }
        }
    }
}

#[test]
fn scored_projection_is_bit_identical_where_read() {
    let mut rng = Rng::new(13);
    let mem = random_memory(2, 19, 6, 1, 6);
    let att = Attention::<f64>::new(6, &mut rng).unwrap();
    let (q, k, v) = qkv_project(&mem, &att.qkv_weight, &att.qkv_bias).unwrap();
    for o in ORIENTATIONS {
        let (qs, ks, vs) = qkv_project_scored(&mem, &att.qkv_weight, &att.qkv_bias, o).unwrap();
        assert_eq!(vs.data(), v.data());
        let full = single_vector_scores(&q, &k, &mem.valid, o).unwrap();
        let pruned = single_vector_scores(&qs, &ks, &mem.valid, o).unwrap();
        assert_eq!(full.data(), pruned.data(), "{o:?}");
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = Rng::new(14);
    let mem = random_memory(1, 6, 3, 1, 7);
    let att = Attention::<f64>::new(3, &mut rng).unwrap();
    let w = Tensor::from_vec(rng.uniform_vec(6 * 3, 1.0), &[1, 6, 3]).unwrap();
    for o in ORIENTATIONS {
        let params = [
            ("memory", mem.data.clone()),
            ("qkv.weight", att.qkv_weight.clone()),
            ("qkv.bias", att.qkv_bias.clone()),
        ];
        let report = grad_check(
            |p| {
                let m = MemoryTensor { data: p[0].clone(), valid: mem.valid.clone() };
                let a = Attention { qkv_weight: p[1].clone(), qkv_bias: p[2].clone(), ..att.clone() };
                a.attend(&m, o).unwrap().values.mul(&w)?.sum()
            },
            &params,
            1e-5,
            Stencil::Central,
        )
        .unwrap();
        // invalid memory entries have no influence at all
        let mut err: f64 = 0.0;
        for e in &report.entries {
            if e.analytic.abs() > 1e-8 || e.numeric.abs() > 1e-8 {
                err = err.max(e.rel_error());
            }
        }
        assert!(err < 1e-6, "{o:?}: {err}");
    }
}

#[test]
fn shift_invariant_bias_third_leaves_weights_unchanged() {
    // adding a constant to the bias of the side that is only read at
    // entry 0 moves every score of a position by the same amount
    let mut rng = Rng::new(15);
    let mem = random_memory(1, 9, 4, 0, 8);
    let att = Attention::<f64>::new(4, &mut rng).unwrap();
    for (o, part) in [(ScoreOrientation::Literal, 0), (ScoreOrientation::Swapped, 1)] {
        let before = att.attend(&mem, o).unwrap().weights;
        let mut shifted = att.clone();
        let mut b = shifted.qkv_bias.to_vec();
        b[part * 4..(part + 1) * 4].iter_mut().for_each(|x| *x += 0.7);
        shifted.qkv_bias = Tensor::from_vec(b, &[12]).unwrap();
        let after = shifted.attend(&mem, o).unwrap().weights;
        for (x, y) in before.data().iter().zip(after.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weights_are_a_distribution_over_valid_entries(
        levels in 1usize..7,
        k in 0usize..3,
        t_frac in 0.0f64..1.0,
        scale in -2.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let layout = Layout::new(levels, k);
        let d = layout.depth();
        let l = 1 + (t_frac * (layout.capacity() - 1) as f64) as usize;
        let valid: Vec<bool> = (0..l).flat_map(|t| layout.valid_row(t)).collect();
        let mut rng = Rng::new(seed);
        let scores = Tensor::<f32>::from_vec(rng.uniform_vec(l * d, 10f64.powf(scale)), &[1, l, d]).unwrap();
        let w = mask_softmax(&scores, &valid).unwrap();
        for t in 0..l {
            let row = &w.data()[t * d..(t + 1) * d];
            let mut sum = 0.0f64;
            for i in 0..d {
                if valid[t * d + i] {
                    prop_assert!(row[i] >= 0.0);
                    sum += row[i] as f64;
                } else {
                    prop_assert_eq!(row[i], 0.0);
                }
            }
            prop_assert!((sum - 1.0).abs() <= 1e-6, "sum {}", sum);
        }
    }

    #[test]
    fn scores_match_dot_product_oracle(
        l in 1usize..20,
        e in 1usize..10,
        swapped in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let layout = Layout::new(5, 0);
        let d = layout.depth();
        let valid: Vec<bool> = (0..l).flat_map(|t| layout.valid_row(t)).collect();
        let mut rng = Rng::new(seed);
        let q = Tensor::<f32>::from_vec(rng.uniform_vec(l * d * e, 1.0), &[1, l, d, e]).unwrap();
        let k = Tensor::<f32>::from_vec(rng.uniform_vec(l * d * e, 1.0), &[1, l, d, e]).unwrap();
        let o = if swapped { ScoreOrientation::Swapped } else { ScoreOrientation::Literal };
        let s = single_vector_scores(&q, &k, &valid, o).unwrap();
        for t in 0..l {
            for i in 0..d {
                let got = s.data()[t * d + i] as f64;
                if !valid[t * d + i] {
                    prop_assert_eq!(got, 0.0);
                    continue;
                }
                let (qi, ki) = if swapped { (0, i) } else { (i, 0) };
                let dot: f64 = (0..e)
                    .map(|c| q.data()[(t * d + qi) * e + c] as f64 * k.data()[(t * d + ki) * e + c] as f64)
                    .sum();
                prop_assert!((got - dot / (e as f64).sqrt()).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn weighted_sum_of_one_hot_picks_the_entry(d in 1usize..8, e in 1usize..6, pick in 0usize..8, seed in any::<u64>()) {
        let pick = pick % d;
        let mut rng = Rng::new(seed);
        let v = Tensor::<f64>::from_vec(rng.uniform_vec(d * e, 1.0), &[1, 1, d, e]).unwrap();
        let mut w = vec![0.0; d];
        w[pick] = 1.0;
        let out = weighted_sum(&Tensor::from_vec(w, &[1, 1, d]).unwrap(), &v).unwrap();
        prop_assert_eq!(out.data(), &v.data()[pick * e..(pick + 1) * e]);
    }
}
