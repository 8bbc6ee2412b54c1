//! Self-check suite run by `lmn verify`: every structural and numerical
//! invariant the models rely on, on random weights.

use std::time::Instant;

use lmn_tensor::gradcheck::relative_error;
use lmn_tensor::{grad_check, Float, GradCheckReport, GradEntry, Rng, Stencil, Tensor, TensorError};

use crate::attention::{mask_softmax, single_vector_scores};
use crate::bench::{baseline_score_macs, lmn_score_macs};
use crate::config::{levels_for, slot_widths, ModelConfig, ScoreOrientation, Variant};
use crate::counters;
use crate::error::{LmnError, Result};
use crate::memory::{with_flipped_concat, Layout, SlotState};
use crate::model::{param_count, Mode, Model, Sampling};
use crate::summarizer::{expanded_entry_total, Summarizer};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Smaller shapes and fewer random cases.
    pub quick: bool,
    /// Run everything with the sequential carry chain concatenating in the
    /// wrong order (mutation check: equivalence must fail).
    pub flip_concat: bool,
    pub seed: u64,
}

type Outcome = std::result::Result<String, String>;

fn fail<T: std::fmt::Display>(e: T) -> String {
    e.to_string()
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(vocab)).collect()
}

fn small(variant: Variant, vocab: usize, embed: usize, max_len: usize, seed: u64) -> ModelConfig {
    let mut c = ModelConfig::new(variant);
    c.vocab_size = vocab;
    c.embed = embed;
    c.max_seq_len = max_len;
    c.seed = seed;
    c
}

/// logmem with one and two banks, tiny-logmem and expsum (k = 1).
fn lmn_variants(embed: usize, max_len: usize, seed: u64) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for banks in [1, 2] {
        let mut c = small(Variant::LogMem, 11, embed, max_len, seed);
        c.banks = banks;
        out.push(c);
    }
    out.push(small(Variant::TinyLogMem, 11, embed, max_len, seed));
    out.push(small(Variant::ExpSum, 11, embed, max_len, seed));
    out
}

fn label(c: &ModelConfig) -> String {
    match c.variant {
        Variant::LogMem => format!("{} nb={}", c.variant, c.banks),
        _ => c.variant.to_string(),
    }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn mode_equivalence(o: &VerifyOptions) -> Outcome {
    let (l, e) = if o.quick { (32, 8) } else { (64, 16) };
    let mut rng = Rng::new(o.seed).fork(1);
    let mut worst: f64 = 0.0;
    for c in lmn_variants(e, l, o.seed) {
        let m = Model::<f32>::new(c.clone()).map_err(fail)?;
        let toks = random_tokens(&mut rng, 2 * l, c.vocab_size);
        let p = m.forward(&toks, 2, Mode::Parallel).map_err(fail)?;
        let s = m.forward(&toks, 2, Mode::Sequential).map_err(fail)?;
        let d = max_abs_diff(p.data(), s.data());
        if d > 1e-4 {
            return Err(format!("{}: max |Δlogit| = {d:.3e} > 1e-4", label(&c)));
        }
        worst = worst.max(d);
    }
    Ok(format!("B=2 L={l} E={e}, max |Δlogit| = {worst:.2e}"))
}

/// The QKV-bias third that shifts all scores of a row equally; its true
/// gradient is exactly zero.
pub fn is_shift_invariant(c: &ModelConfig, e: &GradEntry) -> bool {
    let third = match c.orientation {
        ScoreOrientation::Literal => 0,
        ScoreOrientation::Swapped => 1,
    };
    c.variant.is_lmn() && e.name.ends_with("attn.qkv.bias") && e.index / c.embed == third
}

// the closure handed to grad_check speaks TensorError; the model only
// fails with anything else on a bad config, which `Model::new` rejected
fn tensor_error(e: LmnError) -> TensorError {
    match e {
        LmnError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Finite-difference check of the first block's parameters and its input,
/// scalarized with a fixed random weighting of the block output.
pub fn block_gradient_check<T: Float>(c: &ModelConfig, len: usize, eps: f64) -> Result<GradCheckReport> {
    let m = Model::<T>::new(c.clone())?;
    let mut rng = Rng::new(c.seed).fork(3);
    let x = Tensor::<T>::from_vec(rng.uniform_vec(len * c.embed, 1.0), &[1, len, c.embed])?;
    let w = Tensor::<T>::from_vec(rng.uniform_vec(len * c.embed, 1.0), &[1, len, c.embed])?;
    let all = m.named_params();
    let picked: Vec<usize> = (0..all.len()).filter(|&i| all[i].0.starts_with("blocks.0.")).collect();
    let mut params: Vec<(&str, Tensor<T>)> = picked.iter().map(|&i| (all[i].0.as_str(), all[i].1.clone())).collect();
    params.push(("input", x));
    let report = grad_check(
        |p| {
            let mut full: Vec<Tensor<T>> = all.iter().map(|(_, t)| t.clone()).collect();
            for (k, &i) in picked.iter().enumerate() {
                full[i] = p[k].clone();
            }
            let mut mm = m.clone();
            mm.set_params(full).map_err(tensor_error)?;
            let out = mm.block_forward(&mm.blocks[0], &p[p.len() - 1], Mode::Parallel).map_err(tensor_error)?;
            out.mul(&w)?.sum()
        },
        &params,
        eps,
        Stencil::Central,
    )?;
    Ok(report)
}

fn gradcheck_configs(seed: u64) -> Vec<ModelConfig> {
    let mut c = small(Variant::LogMem, 5, 4, 8, seed);
    c.banks = 2;
    let mut swapped = c.clone();
    swapped.orientation = ScoreOrientation::Swapped;
    vec![
        c,
        swapped,
        small(Variant::TinyLogMem, 5, 4, 8, seed),
        small(Variant::ExpSum, 5, 4, 8, seed),
        small(Variant::Baseline, 5, 4, 8, seed),
    ]
}

fn gradient_check_f64(o: &VerifyOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for c in gradcheck_configs(o.seed) {
        let r = block_gradient_check::<f64>(&c, 8, 1e-4).map_err(fail)?;
        let err = r.max_rel_error_where(|e| !is_shift_invariant(&c, e));
        if err > 1e-4 {
            return Err(format!("{}: max relative error {err:.3e} > 1e-4", label(&c)));
        }
        if let Some(e) = r.entries.iter().find(|e| is_shift_invariant(&c, e) && (e.analytic.abs() > 1e-9 || e.numeric.abs() > 1e-9)) {
            return Err(format!("{}: shift-invariant bias gradient {} is not zero", label(&c), e.analytic));
        }
        worst = worst.max(err);
    }
    Ok(format!("E=4 L=8 B=1 nb=2, 64-bit, max relative error {worst:.2e}"))
}

fn gradient_check_f32(o: &VerifyOptions) -> Outcome {
    let mut worst: f64 = 0.0;
    for c in gradcheck_configs(o.seed) {
        let r64 = block_gradient_check::<f64>(&c, 8, 1e-4).map_err(fail)?;
        let r32 = block_gradient_check::<f32>(&c, 8, 1e-2).map_err(fail)?;
        for (a, b) in r32.entries.iter().zip(&r64.entries) {
            if !is_shift_invariant(&c, a) {
                worst = worst.max(relative_error(a.analytic, b.numeric));
            }
        }
        if worst > 1e-2 {
            return Err(format!("{}: 32-bit gradients off by {worst:.3e} > 1e-2", label(&c)));
        }
    }
    Ok(format!("32-bit backward vs 64-bit differences, max relative error {worst:.2e}"))
}

fn causality(o: &VerifyOptions) -> Outcome {
    let (cases, max_len) = if o.quick { (20, 16) } else { (100, 32) };
    let mut rng = Rng::new(o.seed).fork(4);
    let mut all = lmn_variants(8, max_len, o.seed);
    all.push(small(Variant::Baseline, 11, 8, max_len, o.seed));
    for c in &all {
        let m = Model::<f32>::new(c.clone()).map_err(fail)?;
        for _ in 0..cases {
            let l = 2 + rng.below(max_len - 1);
            let t = rng.below(l - 1);
            let a = random_tokens(&mut rng, l, c.vocab_size);
            let mut b = a.clone();
            for v in &mut b[t + 1..] {
                *v = (*v + 1 + rng.below(c.vocab_size - 1)) % c.vocab_size;
            }
            for mode in [Mode::Parallel, Mode::Sequential] {
                let la = m.forward(&a, 1, mode).map_err(fail)?;
                let lb = m.forward(&b, 1, mode).map_err(fail)?;
                let n = (t + 1) * c.vocab_size;
                if la.data()[..n] != lb.data()[..n] {
                    return Err(format!("{} {mode}: prefix up to {t} changed when later tokens changed", label(c)));
                }
            }
        }
    }
    Ok(format!("{cases} cases x {} variants x 2 modes, prefixes bit-identical", all.len()))
}

fn softmax_mask(o: &VerifyOptions) -> Outcome {
    let cases = if o.quick { 200 } else { 1000 };
    let mut rng = Rng::new(o.seed).fork(5);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let levels = 1 + rng.below(6);
        let layout = Layout::new(levels, rng.below(3));
        let d = layout.depth();
        let l = 1 + rng.below(layout.capacity());
        let valid: Vec<bool> = (0..l).flat_map(|t| layout.valid_row(t)).collect();
        let scale = 10f64.powf(rng.uniform(-1.0, 2.0));
        let scores = Tensor::<f32>::from_vec(rng.uniform_vec(l * d, scale), &[1, l, d]).map_err(fail)?;
        let w = mask_softmax(&scores, &valid).map_err(fail)?;
        for t in 0..l {
            let row = &w.data()[t * d..(t + 1) * d];
            let mut sum = 0.0f64;
            for (i, &p) in row.iter().enumerate() {
                if valid[t * d + i] {
                    sum += p as f64;
                } else if p != 0.0 {
                    return Err(format!("weight {p} at invalid entry {i} of position {t}"));
                }
            }
            worst = worst.max((sum - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("weights sum off by {worst:.3e} > 1e-6"));
    }
    Ok(format!("{cases} random cases, max |Σw − 1| = {worst:.2e}, invalid entries exactly 0"))
}

fn score_oracle(o: &VerifyOptions) -> Outcome {
    let cases = if o.quick { 50 } else { 200 };
    let mut rng = Rng::new(o.seed).fork(6);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let layout = Layout::new(1 + rng.below(5), rng.below(2));
        let (b, d, e) = (1 + rng.below(2), layout.depth(), 1 + rng.below(9));
        let l = 1 + rng.below(layout.capacity());
        let valid: Vec<bool> = (0..l).flat_map(|t| layout.valid_row(t)).collect();
        let q = Tensor::<f32>::from_vec(rng.uniform_vec(b * l * d * e, 1.0), &[b, l, d, e]).map_err(fail)?;
        let k = Tensor::<f32>::from_vec(rng.uniform_vec(b * l * d * e, 1.0), &[b, l, d, e]).map_err(fail)?;
        for orientation in [ScoreOrientation::Literal, ScoreOrientation::Swapped] {
            let s = single_vector_scores(&q, &k, &valid, orientation).map_err(fail)?;
            for bt in 0..b * l {
                for i in 0..d {
                    if !valid[(bt % l) * d + i] {
                        continue;
                    }
                    let (qi, ki) = match orientation {
                        ScoreOrientation::Literal => (i, 0),
                        ScoreOrientation::Swapped => (0, i),
                    };
                    let mut dot = 0.0f64;
                    for c in 0..e {
                        dot += q.data()[(bt * d + qi) * e + c] as f64 * k.data()[(bt * d + ki) * e + c] as f64;
                    }
                    let want = dot / (e as f64).sqrt();
                    worst = worst.max((s.data()[bt * d + i] as f64 - want).abs());
                }
            }
        }
    }
    if worst > 1e-5 {
        return Err(format!("scores differ from the dot-product oracle by {worst:.3e}"));
    }
    Ok(format!("{cases} random cases, both orientations, max error {worst:.2e}"))
}

/// Entries a position sees by decomposing its prefix into aligned
/// power-of-two blocks (largest first).
fn prefix_decomposition_entries(t: usize, k: usize) -> usize {
    let (mut pos, mut entries) = (0, 1);
    while pos < t {
        let mut size = 1;
        while pos % (size * 2) == 0 && pos + size * 2 <= t {
            size *= 2;
        }
        entries += 1 + size.trailing_zeros() as usize * k;
        pos += size;
    }
    entries
}

fn slot_counts(o: &VerifyOptions) -> Outcome {
    let n = if o.quick { 1024 } else { 4096 };
    let levels = levels_for(n);
    for k in [0, 1, 2] {
        let layout = Layout::new(levels, k);
        for t in 0..n {
            let want = prefix_decomposition_entries(t, k);
            if layout.valid_count(t) != want {
                return Err(format!("k={k} t={t}: {} entries, oracle {want}", layout.valid_count(t)));
            }
            if k == 0 && want != t.count_ones() as usize + 1 {
                return Err(format!("t={t}: {want} entries, expected popcount + 1"));
            }
        }
    }
    // the live binary counter occupies exactly the set bits of t
    let mut rng = Rng::new(o.seed).fork(7);
    let s = Summarizer::<f32>::linear(1, &mut rng).map_err(fail)?;
    let mut state = SlotState::<f32>::new(Layout::new(levels, 0), 1, 1);
    let x = Tensor::from_vec(vec![0.5f32], &[1, 1, 1]).map_err(fail)?;
    for t in 0..n {
        let occupied: usize = (0..levels).filter(|&l| state.slot(l).is_some()).map(|l| 1 << l).sum();
        if occupied != t {
            return Err(format!("after {t} pushes the occupied slots spell {occupied}"));
        }
        if t + 1 < n {
            state.push(&x, &s).map_err(fail)?;
        }
    }
    Ok(format!("t < {n}: plain popcount(t)+1 and expander k∈{{1,2}} counts match the prefix oracle"))
}

fn expander_widths(_: &VerifyOptions) -> Outcome {
    for s in 1..=16 {
        for k in 0..=4 {
            let widths = slot_widths(s, k);
            if widths.iter().enumerate().any(|(l, &w)| w != 1 + l * k) {
                return Err(format!("S={s} k={k}: widths {widths:?}"));
            }
            let total: usize = widths.iter().sum();
            let formula = s + k * s * (s - 1) / 2;
            if total != formula || expanded_entry_total(s, k) != formula {
                return Err(format!("S={s} k={k}: total {total}, formula {formula}"));
            }
        }
    }
    Ok("widths 1+ℓk and totals S + k·S(S−1)/2 for S ≤ 16, k ≤ 4".into())
}

fn op_counters(o: &VerifyOptions) -> Outcome {
    let lens: &[usize] = if o.quick { &[1, 7, 64, 100] } else { &[1, 7, 64, 100, 1000] };
    let mut rng = Rng::new(o.seed).fork(8);
    for &l in lens {
        for (variant, banks) in [(Variant::LogMem, 1), (Variant::LogMem, 2), (Variant::Baseline, 1)] {
            let mut c = small(variant, 11, 8, l.next_power_of_two().max(2), o.seed);
            c.banks = banks;
            let m = Model::<f32>::new(c.clone()).map_err(fail)?;
            let toks = random_tokens(&mut rng, l, 11);
            for mode in [Mode::Parallel, Mode::Sequential] {
                let (r, counts) = counters::measure(|| lmn_tensor::no_grad(|| m.forward(&toks, 1, mode)));
                r.map_err(fail)?;
                let want = match variant {
                    Variant::Baseline => baseline_score_macs(8, l),
                    _ => lmn_score_macs(8, banks, l),
                };
                if counts.score_macs != want {
                    return Err(format!("{} L={l} {mode}: counted {}, closed form {want}", label(&c), counts.score_macs));
                }
            }
        }
    }
    Ok("score MACs equal E·nb·Σ(popcount(t)+1) and E·L(L+1)/2 exactly".into())
}

fn generation_consistency(o: &VerifyOptions) -> Outcome {
    let prompts = if o.quick { 3 } else { 10 };
    let mut rng = Rng::new(o.seed).fork(9);
    let mut all = lmn_variants(8, 64, o.seed);
    all.push(small(Variant::Baseline, 11, 8, 64, o.seed));
    let mut worst: f64 = 0.0;
    for c in &all {
        let m = Model::<f32>::new(c.clone()).map_err(fail)?;
        for _ in 0..prompts {
            let n = 1 + rng.below(8);
            let prompt = random_tokens(&mut rng, n, c.vocab_size);
            let mut sample_rng = Rng::new(rng.below(1 << 30) as u64);
            let g = m.generate(&prompt, 24, Sampling::default(), &mut sample_rng).map_err(fail)?;
            let n = g.logits.len();
            let forced = m.forward(&g.tokens[..n], 1, Mode::Parallel).map_err(fail)?;
            let v = c.vocab_size;
            for (t, row) in g.logits.iter().enumerate() {
                let d = max_abs_diff(row, &forced.data()[t * v..(t + 1) * v]);
                if d > 1e-4 {
                    return Err(format!("{} step {t}: |Δlogit| = {d:.3e} > 1e-4", label(c)));
                }
                worst = worst.max(d);
            }
        }
    }
    Ok(format!("{prompts} prompts x {} variants, max |Δlogit| = {worst:.2e}", all.len()))
}

fn parameter_counts(_: &VerifyOptions) -> Outcome {
    for v in Variant::ALL {
        for tie in [false, true] {
            let mut c = ModelConfig::table_preset(v);
            c.tie_embeddings = tie;
            let m = Model::<f32>::new(c.clone()).map_err(fail)?;
            if m.num_params() != param_count(&c) {
                return Err(format!("{v}: model holds {}, formula {}", m.num_params(), param_count(&c)));
            }
        }
    }
    let n = |v| param_count(&ModelConfig::table_preset(v));
    if n(Variant::TinyLogMem) >= n(Variant::LogMem) {
        return Err("tiny-logmem is not smaller than logmem".into());
    }
    Ok(format!(
        "logmem {}, tiny-logmem {}, baseline {}, expsum {}",
        n(Variant::LogMem),
        n(Variant::TinyLogMem),
        n(Variant::Baseline),
        n(Variant::ExpSum)
    ))
}

type Check = (&'static str, fn(&VerifyOptions) -> Outcome);

pub const CHECKS: &[Check] = &[
    ("mode_equivalence", mode_equivalence),
    ("gradient_check_64", gradient_check_f64),
    ("gradient_check_32", gradient_check_f32),
    ("causality", causality),
    ("softmax_mask", softmax_mask),
    ("score_oracle", score_oracle),
    ("slot_counts", slot_counts),
    ("expander_widths", expander_widths),
    ("op_counters", op_counters),
    ("generation_consistency", generation_consistency),
    ("parameter_counts", parameter_counts),
];

fn run_one(name: &'static str, check: fn(&VerifyOptions) -> Outcome, opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(|| check(opts)).unwrap_or_else(|_| Err("panicked".to_string()));
    CheckResult {
        name,
        passed: outcome.is_ok(),
        detail: outcome.unwrap_or_else(|e| e),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the check called `name`, or returns `None` for an unknown name.
pub fn run_check(name: &str, opts: &VerifyOptions) -> Option<CheckResult> {
    let &(name, check) = CHECKS.iter().find(|(n, _)| *n == name)?;
    let go = || run_one(name, check, opts);
    Some(if opts.flip_concat { with_flipped_concat(go) } else { go() })
}

/// Runs every check in order, reporting each as it finishes. A check that
/// panics counts as failed.
pub fn run(opts: &VerifyOptions, mut on_result: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let mut body = || {
        CHECKS
            .iter()
            .map(|&(name, check)| {
                let r = run_one(name, check, opts);
                on_result(&r);
                r
            })
            .collect()
    };
    if opts.flip_concat {
        with_flipped_concat(body)
    } else {
        body()
    }
}

pub fn format_row(r: &CheckResult) -> String {
    format!(
        "{:<24} {:<4} {:>7.2}s  {}",
        r.name,
        if r.passed { "PASS" } else { "FAIL" },
        r.seconds,
        r.detail
    )
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}
