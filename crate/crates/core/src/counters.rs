//! Per-thread operation counters. Counting is always on; the cost is one
//! thread-local add per fused op call.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-accumulates spent on attention scores.
    pub score_macs: u64,
    /// Pair merges performed by summarizers (one per merged block pair).
    pub summarizer_ops: u64,
    /// Expander applications (one per widened block).
    pub expander_ops: u64,
}

impl std::ops::Sub for OpCounts {
    type Output = OpCounts;
    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            score_macs: self.score_macs - rhs.score_macs,
            summarizer_ops: self.summarizer_ops - rhs.summarizer_ops,
            expander_ops: self.expander_ops - rhs.expander_ops,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { score_macs: 0, summarizer_ops: 0, expander_ops: 0 }) };
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.get())
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// Counts accumulated while running `f`.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let before = snapshot();
    let r = f();
    (r, snapshot() - before)
}

fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn add_score_macs(n: u64) {
    bump(|c| c.score_macs += n);
}

pub(crate) fn add_summarizer_ops(n: u64) {
    bump(|c| c.summarizer_ops += n);
}

pub(crate) fn add_expander_ops(n: u64) {
    bump(|c| c.expander_ops += n);
}
