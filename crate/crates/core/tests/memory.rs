use lmn_core::counters;
use lmn_core::memory::{
    build_pyramid, gather_memory, parallel_memory, sequential_memory, with_flipped_concat, Layout, SlotState,
};
use lmn_core::summarizer::expanded_entry_total;
use lmn_core::Summarizer;
use lmn_tensor::{Rng, Tensor};
use proptest::prelude::*;

fn rand_input(seed: u64, b: usize, l: usize, e: usize) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_vec(rng.uniform_vec(b * l * e, 1.0), &[b, l, e]).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Summary of tokens `[start, start + 2^level)` computed from scratch by
/// recursive halving, `[B, w, E]`.
fn block_oracle(x: &Tensor<f64>, s: &Summarizer<f64>, start: usize, level: usize) -> Tensor<f64> {
    if level == 0 {
        return x.narrow(1, start, 1).unwrap();
    }
    let half = 1 << (level - 1);
    let a = block_oracle(x, s, start, level - 1);
    let b = block_oracle(x, s, start + half, level - 1);
    s.merge_pair(&a, &b).unwrap()
}

/// Memory row of position `t` from the greedy decomposition of `[0, t)`
/// into power-of-two blocks, largest first.
fn row_oracle(x: &Tensor<f64>, s: &Summarizer<f64>, layout: &Layout, t: usize) -> Vec<f64> {
    let (b, e) = (x.shape()[0], x.shape()[2]);
    let d = layout.depth();
    let mut row = vec![0.0; b * d * e];
    let mut put = |entry: usize, block: &Tensor<f64>| {
        let w = block.shape()[1];
        for bi in 0..b {
            for j in 0..w {
                for c in 0..e {
                    row[(bi * d + entry + j) * e + c] = block.data()[(bi * w + j) * e + c];
                }
            }
        }
    };
    put(0, &x.narrow(1, t, 1).unwrap());
    let mut start = 0;
    for level in (0..layout.levels()).rev() {
        if start + (1 << level) <= t {
            put(layout.offset(level), &block_oracle(x, s, start, level));
            start += 1 << level;
        }
    }
    assert_eq!(start, t);
    row
}

fn check_against_oracle(s: &Summarizer<f64>, levels: usize, b: usize, l: usize, e: usize, seed: u64) {
    let layout = Layout::new(levels, s.growth());
    let x = rand_input(seed, b, l, e);
    let seq = sequential_memory(&x, s, &layout).unwrap();
    let par = parallel_memory(&x, s, &layout).unwrap();
    let d = layout.depth();
    for t in 0..l {
        let want = row_oracle(&x, s, &layout, t);
        for bi in 0..b {
            for i in 0..d * e {
                let idx = ((bi * l + t) * d) * e + i;
                let w = want[bi * d * e + i];
                assert!((seq.data.data()[idx] - w).abs() < 1e-12, "sequential t={t}");
                assert!((par.data.data()[idx] - w).abs() < 1e-12, "parallel t={t}");
            }
        }
        assert_eq!(seq.valid_at(t), &layout.valid_row(t)[..]);
        assert_eq!(par.valid_at(t), seq.valid_at(t));
    }
}

#[test]
fn carry_chain_matches_prefix_decomposition() {
    let mut rng = Rng::new(1);
    check_against_oracle(&Summarizer::linear(3, &mut rng).unwrap(), 2, 1, 4, 3, 2);
    check_against_oracle(&Summarizer::linear(3, &mut rng).unwrap(), 4, 2, 13, 3, 3);
    check_against_oracle(&Summarizer::dsconv(3, &mut rng).unwrap(), 4, 2, 16, 3, 4);
    check_against_oracle(&Summarizer::expander(3, 1, &mut rng).unwrap(), 4, 2, 11, 3, 5);
    check_against_oracle(&Summarizer::expander(2, 2, &mut rng).unwrap(), 3, 1, 8, 2, 6);
}

#[test]
fn hand_carry_chain_with_averaging_summarizer() {
    // Σ(a, b) = (a + b) / 2 on E = 1
    let s = Summarizer::<f64>::Linear {
        weight: Tensor::from_vec(vec![0.5, 0.5], &[2, 1]).unwrap(),
        bias: Tensor::zeros(&[1]).unwrap(),
    };
    let layout = Layout::new(3, 0);
    let x = Tensor::from_vec(vec![1., 2., 4., 8., 16., 32.], &[1, 6, 1]).unwrap();
    let m = sequential_memory(&x, &s, &layout).unwrap();
    let row = |t: usize| m.data.data()[t * 4..(t + 1) * 4].to_vec();
    assert_eq!(row(0), vec![1., 0., 0., 0.]);
    assert_eq!(row(1), vec![2., 1., 0., 0.]);
    assert_eq!(row(3), vec![8., 4., 1.5, 0.]);
    // 5 = 101: slot 0 = x4, slot 2 = mean(x0..x3)
    assert_eq!(row(5), vec![32., 16., 0., 3.75]);
    assert_eq!(m.valid_at(5), &[true, true, false, true]);
}

#[test]
fn push_examples() {
    let s = Summarizer::<f64>::Linear {
        weight: Tensor::from_vec(vec![1.0, 10.0], &[2, 1]).unwrap(),
        bias: Tensor::zeros(&[1]).unwrap(),
    };
    let mut st = SlotState::new(Layout::new(3, 0), 1, 1);
    let tok = |v: f64| Tensor::from_vec(vec![v], &[1, 1, 1]).unwrap();
    st.push(&tok(1.0), &s).unwrap();
    assert_eq!(st.slot(0).unwrap().data(), &[1.0]);
    st.push(&tok(2.0), &s).unwrap();
    assert!(st.slot(0).is_none());
    // older first: 1·x0 + 10·x1
    assert_eq!(st.slot(1).unwrap().data(), &[21.0]);
    st.push(&tok(3.0), &s).unwrap();
    st.push(&tok(4.0), &s).unwrap();
    // Σ(Σ(x0,x1), Σ(x2,x3)) = 21 + 10·(3 + 40)
    assert_eq!(st.slot(2).unwrap().data(), &[451.0]);
    assert!(st.slot(0).is_none() && st.slot(1).is_none());
    assert_eq!(st.consumed(), 4);
    assert_eq!(st.merges(), 3);
}

#[test]
fn parallel_equals_sequential_at_spec_shape() {
    let mut rng = Rng::new(9);
    for s in [
        Summarizer::<f64>::linear(16, &mut rng).unwrap(),
        Summarizer::dsconv(16, &mut rng).unwrap(),
        Summarizer::expander(16, 1, &mut rng).unwrap(),
    ] {
        let layout = Layout::new(6, s.growth());
        let x = rand_input(10, 2, 64, 16);
        let a = sequential_memory(&x, &s, &layout).unwrap();
        let b = parallel_memory(&x, &s, &layout).unwrap();
        assert!(max_abs_diff(&a.data, &b.data) <= 1e-5);
        assert_eq!(a.valid, b.valid);
    }
    // f32 too
    let s = Summarizer::<f32>::linear(16, &mut rng).unwrap();
    let layout = Layout::new(6, 0);
    let x = Tensor::from_vec(Rng::new(3).uniform_vec::<f32>(2 * 64 * 16, 1.0), &[2, 64, 16]).unwrap();
    let a = sequential_memory(&x, &s, &layout).unwrap();
    let b = parallel_memory(&x, &s, &layout).unwrap();
    let diff = a.data.data().iter().zip(b.data.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff <= 1e-5, "{diff}");
}

#[test]
fn flipped_concat_breaks_equivalence() {
    let s = Summarizer::<f64>::linear(4, &mut Rng::new(2)).unwrap();
    let layout = Layout::new(4, 0);
    let x = rand_input(3, 1, 16, 4);
    let par = parallel_memory(&x, &s, &layout).unwrap();
    let seq = with_flipped_concat(|| sequential_memory(&x, &s, &layout).unwrap());
    assert!(max_abs_diff(&par.data, &seq.data) > 1e-3);
}

#[test]
fn zero_input_zero_bias_gives_zero_memory() {
    let mut rng = Rng::new(5);
    let s = Summarizer::<f64>::Linear {
        weight: rng.uniform_param(&[8, 4], 1.0).unwrap(),
        bias: Tensor::zeros(&[4]).unwrap(),
    };
    let layout = Layout::new(3, 0);
    let m = parallel_memory(&Tensor::zeros(&[1, 7, 4]).unwrap(), &s, &layout).unwrap();
    assert!(m.data.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_position_is_trivial() {
    let s = Summarizer::<f64>::linear(3, &mut Rng::new(0)).unwrap();
    let layout = Layout::new(2, 0);
    let x = rand_input(1, 2, 1, 3);
    let a = sequential_memory(&x, &s, &layout).unwrap();
    let b = parallel_memory(&x, &s, &layout).unwrap();
    assert_eq!(a.data.data(), b.data.data());
    assert_eq!(a.valid, vec![true, false, false]);
}

#[test]
fn pyramid_pairs_adjacent_tokens() {
    let s = Summarizer::<f64>::linear(2, &mut Rng::new(0)).unwrap();
    let x = rand_input(4, 1, 5, 2);
    let p = build_pyramid(&x, &s).unwrap();
    let want = s.merge_pair(&x.narrow(1, 2, 1).unwrap(), &x.narrow(1, 3, 1).unwrap()).unwrap();
    assert_eq!(&p.levels[1].data()[2..4], want.data());
    assert_eq!(p.padded_len(), 8);
}

#[test]
fn merge_counts() {
    let s = Summarizer::<f32>::linear(2, &mut Rng::new(0)).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 1, 2]).unwrap();
    for l in [1usize, 2, 7, 8, 64, 100] {
        let mut st = SlotState::new(Layout::new(8, 0), 1, 2);
        for _ in 0..l {
            st.push(&x, &s).unwrap();
        }
        assert_eq!(st.merges(), (l - l.count_ones() as usize) as u64);
        if l.is_power_of_two() {
            assert_eq!(st.merges(), l as u64 - 1);
        }
        let xs = Tensor::<f32>::zeros(&[1, l, 2]).unwrap();
        let (_, c) = counters::measure(|| build_pyramid(&xs, &s).unwrap());
        assert_eq!(c.summarizer_ops, l.next_power_of_two() as u64 - 1);
    }
}

#[test]
fn over_length_input_is_rejected() {
    let s = Summarizer::<f32>::linear(2, &mut Rng::new(0)).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 9, 2]).unwrap();
    assert!(sequential_memory(&x, &s, &Layout::new(3, 0)).is_err());
    assert!(parallel_memory(&x, &s, &Layout::new(3, 0)).is_err());
    // exactly 2^S positions fit
    let x = Tensor::<f32>::zeros(&[1, 8, 2]).unwrap();
    assert!(sequential_memory(&x, &s, &Layout::new(3, 0)).is_ok());
}

#[test]
fn expander_totals_match_formula() {
    for levels in 1..=14 {
        for k in 0..4 {
            let lay = Layout::new(levels, k);
            assert_eq!(lay.depth() - 1, expanded_entry_total(levels, k));
            let all_ones = (1usize << levels) - 1;
            assert_eq!(lay.valid_count(all_ones), 1 + expanded_entry_total(levels, k));
        }
    }
    assert_eq!(expanded_entry_total(13, 1), 91);
}

fn popcount_bound(t: usize) -> usize {
    (usize::BITS - 1 - t.max(1).leading_zeros()) as usize + 2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn slot_occupancy_tracks_bits(pushes in 0usize..200) {
        let s = Summarizer::<f32>::linear(1, &mut Rng::new(0)).unwrap();
        let mut st = SlotState::new(Layout::new(8, 0), 1, 1);
        let x = Tensor::<f32>::zeros(&[1, 1, 1]).unwrap();
        for _ in 0..pushes {
            st.push(&x, &s).unwrap();
        }
        for level in 0..8 {
            prop_assert_eq!(st.slot(level).is_some(), (pushes >> level) & 1 == 1);
        }
    }

    #[test]
    fn valid_counts_are_popcount_plus_one(t in 0usize..4096, k in 0usize..3) {
        let lay = Layout::new(12, k);
        let expect = 1 + (0..12).filter(|l| (t >> l) & 1 == 1).map(|l| 1 + l * k).sum::<usize>();
        prop_assert_eq!(lay.valid_count(t), expect);
        prop_assert_eq!(lay.valid_row(t).iter().filter(|v| **v).count(), expect);
        if k == 0 {
            prop_assert_eq!(lay.valid_count(t), t.count_ones() as usize + 1);
            prop_assert!(lay.valid_count(t) <= popcount_bound(t));
        }
    }

    #[test]
    fn parallel_matches_sequential_random(l in 1usize..40, b in 1usize..3, seed in any::<u64>(), use_exp in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let s = if use_exp { Summarizer::<f64>::expander(3, 1, &mut rng).unwrap() } else { Summarizer::linear(3, &mut rng).unwrap() };
        let layout = Layout::new(6, s.growth());
        let x = rand_input(seed.wrapping_add(1), b, l, 3);
        let a = sequential_memory(&x, &s, &layout).unwrap();
        let p = build_pyramid(&x, &s).unwrap();
        let g = gather_memory(&p, &layout).unwrap();
        prop_assert!(max_abs_diff(&a.data, &g.data) <= 1e-9);
        prop_assert_eq!(a.valid, g.valid);
    }

    #[test]
    fn memory_is_causal(l in 2usize..33, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let s = Summarizer::<f32>::linear(3, &mut rng).unwrap();
        let layout = Layout::new(6, 0);
        let t = rng.below(l - 1);
        let mut xd: Vec<f32> = rng.uniform_vec(l * 3, 1.0);
        let x0 = Tensor::from_vec(xd.clone(), &[1, l, 3]).unwrap();
        for v in &mut xd[(t + 1) * 3..] { *v += 1.0; }
        let x1 = Tensor::from_vec(xd, &[1, l, 3]).unwrap();
        let d = layout.depth();
        let a = parallel_memory(&x0, &s, &layout).unwrap();
        let b = parallel_memory(&x1, &s, &layout).unwrap();
        prop_assert_eq!(&a.data.data()[..(t + 1) * d * 3], &b.data.data()[..(t + 1) * d * 3]);
    }
}
