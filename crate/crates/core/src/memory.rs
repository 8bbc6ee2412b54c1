//! Logarithmic tree memory.
//!
//! Position `t` sees the current token plus one block per set bit of `t`:
//! bit `ℓ` contributes the summary of the `2^ℓ` tokens
//! `[2^(ℓ+1)·(t >> (ℓ+1)), 2^(ℓ+1)·(t >> (ℓ+1)) + 2^ℓ)`. Sequential mode
//! maintains those blocks as a binary counter ([`SlotState`]); parallel
//! mode builds every aligned block at once ([`Pyramid`]) and gathers.
//!
//! Entry layout of a memory row: index 0 is the current token, followed
//! by the `w_ℓ` entries of level `ℓ` for `ℓ = 0..S` in ascending order.

use std::cell::Cell;

use lmn_tensor::{Float, Tensor};

use crate::error::{LmnError, Result};
use crate::summarizer::Summarizer;

thread_local! {
    static FLIP_CONCAT: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the sequential carry chain concatenating newer‖older
/// instead of older‖newer. Only for mutation testing of the
/// equivalence checks.
#[doc(hidden)]
pub fn with_flipped_concat<R>(f: impl FnOnce() -> R) -> R {
    let prev = FLIP_CONCAT.with(|c| c.replace(true));
    let r = f();
    FLIP_CONCAT.with(|c| c.set(prev));
    r
}

/// One pointer step: `(prev + 1, prev XOR (prev + 1))`. Bits below the
/// highest set bit of the mask are merges; the highest is the write.
pub fn summarize_table(prev_pointer: u64) -> (u64, u64) {
    let next = prev_pointer + 1;
    (next, prev_pointer ^ next)
}

/// Where each level's entries live inside a memory row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    widths: Vec<usize>,
    offsets: Vec<usize>,
    depth: usize,
}

impl Layout {
    pub fn new(levels: usize, k: usize) -> Self {
        let widths = crate::config::slot_widths(levels, k);
        let mut offsets = Vec::with_capacity(levels);
        let mut at = 1;
        for &w in &widths {
            offsets.push(at);
            at += w;
        }
        Layout {
            widths,
            offsets,
            depth: at,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.widths[level]
    }

    pub fn offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    /// Entries per row, `1 + Σ w_ℓ`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn growth(&self) -> usize {
        if self.widths.len() > 1 {
            self.widths[1] - 1
        } else {
            0
        }
    }

    pub fn valid_row(&self, t: usize) -> Vec<bool> {
        let mut v = vec![false; self.depth];
        v[0] = true;
        for l in 0..self.levels() {
            if (t >> l) & 1 == 1 {
                v[self.offsets[l]..self.offsets[l] + self.widths[l]].fill(true);
            }
        }
        v
    }

    /// `1 + Σ_{bit ℓ of t set} w_ℓ`.
    pub fn valid_count(&self, t: usize) -> usize {
        1 + (0..self.levels()).filter(|&l| (t >> l) & 1 == 1).map(|l| self.widths[l]).sum::<usize>()
    }

    /// Positions this layout can address: `2^S`.
    pub fn capacity(&self) -> usize {
        1usize << self.levels()
    }
}

/// Per-position memory `[B, L, D, E]` with validity mask `[L, D]`.
/// Entries at invalid positions are exactly zero.
#[derive(Clone, Debug)]
pub struct MemoryTensor<T: Float = f32> {
    pub data: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Float> MemoryTensor<T> {
    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn embed(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn valid_at(&self, t: usize) -> &[bool] {
        let d = self.depth();
        &self.valid[t * d..(t + 1) * d]
    }

    /// Concatenates banks along the entry axis.
    pub fn combine(banks: &[MemoryTensor<T>]) -> Result<MemoryTensor<T>> {
        let first = banks
            .first()
            .ok_or_else(|| LmnError::Config("no memory banks to combine".into()))?;
        if banks.len() == 1 {
            return Ok(first.clone());
        }
        let (l, mut d_total) = (first.len(), 0);
        for b in banks {
            if b.len() != l || b.batch() != first.batch() || b.embed() != first.embed() {
                return Err(LmnError::Config(format!(
                    "incompatible memory banks {:?} and {:?}",
                    first.data.shape(),
                    b.data.shape()
                )));
            }
            d_total += b.depth();
        }
        let data = Tensor::concat(&banks.iter().map(|b| b.data.clone()).collect::<Vec<_>>(), 2)?;
        let mut valid = Vec::with_capacity(l * d_total);
        for t in 0..l {
            for b in banks {
                valid.extend_from_slice(b.valid_at(t));
            }
        }
        Ok(MemoryTensor { data, valid })
    }
}

/// The binary-counter memory state of one bank: slot `ℓ` holds a
/// `[B, w_ℓ, E]` block covering `2^ℓ` tokens iff bit `ℓ` of `consumed`
/// is set.
#[derive(Clone, Debug)]
pub struct SlotState<T: Float = f32> {
    layout: Layout,
    slots: Vec<Option<Tensor<T>>>,
    consumed: usize,
    batch: usize,
    embed: usize,
    merges: u64,
}

impl<T: Float> SlotState<T> {
    pub fn new(layout: Layout, batch: usize, embed: usize) -> Self {
        SlotState {
            slots: vec![None; layout.levels()],
            layout,
            consumed: 0,
            batch,
            embed,
            merges: 0,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn slot(&self, level: usize) -> Option<&Tensor<T>> {
        self.slots[level].as_ref()
    }

    /// Summarizer applications performed so far.
    pub fn merges(&self) -> u64 {
        self.merges
    }

    /// Floats held by occupied slots.
    pub fn live_floats(&self) -> usize {
        self.slots.iter().flatten().map(|s| s.numel()).sum()
    }

    /// Pushes one token `[B, 1, E]`, running the carry chain.
    pub fn push(&mut self, x: &Tensor<T>, summarizer: &Summarizer<T>) -> Result<()> {
        if x.shape() != [self.batch, 1, self.embed] {
            return Err(LmnError::Config(format!(
                "push expects [{}, 1, {}], got {:?}",
                self.batch,
                self.embed,
                x.shape()
            )));
        }
        let carries = self.consumed.trailing_ones() as usize;
        if carries >= self.layout.levels() {
            return Err(LmnError::Capacity {
                position: self.consumed,
                levels: self.layout.levels(),
                max_seq_len: self.layout.capacity(),
            });
        }
        let flip = FLIP_CONCAT.with(|c| c.get());
        let mut carry = x.clone();
        for level in 0..carries {
            let older = self.slots[level].take().expect("occupied slot below the carry");
            carry = if flip {
                summarizer.merge_pair(&carry, &older)?
            } else {
                summarizer.merge_pair(&older, &carry)?
            };
            self.merges += 1;
        }
        debug_assert_eq!(carry.shape()[1], self.layout.width(carries));
        self.slots[carries] = Some(carry);
        self.consumed += 1;
        Ok(())
    }

    /// Memory row for the token at position `consumed`: `[B, D, E]` plus
    /// validity.
    pub fn snapshot(&self, current: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
        let mut parts = Vec::with_capacity(1 + self.layout.levels());
        parts.push(current.clone());
        for (level, slot) in self.slots.iter().enumerate() {
            match slot {
                Some(s) => parts.push(s.clone()),
                None => parts.push(Tensor::zeros(&[self.batch, self.layout.width(level), self.embed])?),
            }
        }
        Ok((Tensor::concat(&parts, 1)?, self.layout.valid_row(self.consumed)))
    }
}

fn check_input<T: Float>(x: &Tensor<T>, layout: &Layout) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(LmnError::Config(format!("memory input must be [B, L, E], got {:?}", x.shape())));
    }
    let (b, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if l > layout.capacity() {
        return Err(LmnError::TooLong {
            len: l,
            max_seq_len: layout.capacity(),
        });
    }
    Ok((b, l, e))
}

/// Builds the memory position by position: snapshot, then push.
pub fn sequential_memory<T: Float>(
    x: &Tensor<T>,
    summarizer: &Summarizer<T>,
    layout: &Layout,
) -> Result<MemoryTensor<T>> {
    let (b, l, e) = check_input(x, layout)?;
    let d = layout.depth();
    let mut state = SlotState::new(layout.clone(), b, e);
    let mut rows = Vec::with_capacity(l);
    let mut valid = Vec::with_capacity(l * d);
    for t in 0..l {
        let xt = x.narrow(1, t, 1)?;
        let (row, v) = state.snapshot(&xt)?;
        rows.push(row.reshape(&[b, 1, d, e])?);
        valid.extend(v);
        // the last token is never observed, and pushing it would overflow
        // when L = 2^S
        if t + 1 < l {
            state.push(&xt, summarizer)?;
        }
    }
    Ok(MemoryTensor {
        data: Tensor::concat(&rows, 1)?,
        valid,
    })
}

/// All aligned block summaries. `levels[ℓ]` is `[B, L_pad / 2^ℓ, w_ℓ, E]`.
#[derive(Clone, Debug)]
pub struct Pyramid<T: Float = f32> {
    pub levels: Vec<Tensor<T>>,
    pub len: usize,
}

impl<T: Float> Pyramid<T> {
    pub fn padded_len(&self) -> usize {
        self.levels[0].shape()[1]
    }
}

/// Zero-pads to a power of two and merges adjacent pairs level by level
/// up to a single block.
pub fn build_pyramid<T: Float>(x: &Tensor<T>, summarizer: &Summarizer<T>) -> Result<Pyramid<T>> {
    if x.rank() != 3 {
        return Err(LmnError::Config(format!("memory input must be [B, L, E], got {:?}", x.shape())));
    }
    let (b, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let l_pad = l.next_power_of_two();
    let base = if l_pad > l {
        Tensor::concat(&[x.clone(), Tensor::zeros(&[b, l_pad - l, e])?], 1)?
    } else {
        x.clone()
    };
    let mut levels = vec![base.reshape(&[b, l_pad, 1, e])?];
    let mut n = l_pad;
    while n > 1 {
        let prev = levels.last().unwrap();
        let w = prev.shape()[2];
        let merged = summarizer.merge(&prev.reshape(&[b * n / 2, 2 * w, e])?)?;
        let w_next = merged.shape()[1];
        levels.push(merged.reshape(&[b, n / 2, w_next, e])?);
        n /= 2;
    }
    Ok(Pyramid { levels, len: l })
}

/// Block index into pyramid level `ℓ` used by position `t` (bit `ℓ` of `t`
/// must be set).
pub fn block_index(t: usize, level: usize) -> usize {
    2 * (t >> (level + 1))
}

/// Per-position gather from the pyramid; invalid entries are zero.
pub fn gather_memory<T: Float>(p: &Pyramid<T>, layout: &Layout) -> Result<MemoryTensor<T>> {
    let l = p.len;
    if l > layout.capacity() {
        return Err(LmnError::TooLong {
            len: l,
            max_seq_len: layout.capacity(),
        });
    }
    let (b, e) = (p.levels[0].shape()[0], p.levels[0].shape()[3]);
    // only levels some position can reference
    let used = layout.levels().min(p.levels.len());
    let mut flat = Vec::with_capacity(used);
    let mut row_offset = Vec::with_capacity(used);
    let mut rows = 0;
    for lvl in &p.levels[..used] {
        let (n, w) = (lvl.shape()[1], lvl.shape()[2]);
        flat.push(lvl.reshape(&[b, n * w, e])?);
        row_offset.push(rows);
        rows += n * w;
    }
    let d = layout.depth();
    let mut index = vec![None; l * d];
    let mut valid = vec![false; l * d];
    for t in 0..l {
        let row = &mut index[t * d..(t + 1) * d];
        row[0] = Some(t);
        valid[t * d] = true;
        for level in 0..used {
            if (t >> level) & 1 == 1 {
                let w = layout.width(level);
                let base = row_offset[level] + block_index(t, level) * w;
                for j in 0..w {
                    row[layout.offset(level) + j] = Some(base + j);
                    valid[t * d + layout.offset(level) + j] = true;
                }
            }
        }
    }
    let table = if flat.len() == 1 { flat.pop().unwrap() } else { Tensor::concat(&flat, 1)? };
    let gathered = table.index_select(1, &index)?;
    debug_assert!(rows > 0);
    Ok(MemoryTensor {
        data: gathered.reshape(&[b, l, d, e])?,
        valid,
    })
}

pub fn parallel_memory<T: Float>(
    x: &Tensor<T>,
    summarizer: &Summarizer<T>,
    layout: &Layout,
) -> Result<MemoryTensor<T>> {
    check_input(x, layout)?;
    gather_memory(&build_pyramid(x, summarizer)?, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lmn_tensor::Rng;

    #[test]
    fn pointer_table() {
        assert_eq!(summarize_table(3), (4, 0b111));
        assert_eq!(summarize_table(0), (1, 0b001));
        assert_eq!(summarize_table(5), (6, 0b011));
    }

    #[test]
    fn layout_valid_rows() {
        let lay = Layout::new(3, 0);
        assert_eq!(lay.depth(), 4);
        assert_eq!(lay.valid_row(5), vec![true, true, false, true]);
        assert_eq!(lay.valid_row(6), vec![true, false, true, true]);
        assert_eq!(lay.valid_row(0), vec![true, false, false, false]);
        let ex = Layout::new(3, 1);
        assert_eq!(ex.depth(), 1 + 1 + 2 + 3);
        assert_eq!(ex.valid_count(5), 5);
    }

    #[test]
    fn pyramid_level_sizes() {
        let s = Summarizer::<f32>::linear(2, &mut Rng::new(0)).unwrap();
        let sizes = |l: usize| -> Vec<usize> {
            let x = Tensor::zeros(&[1, l, 2]).unwrap();
            build_pyramid(&x, &s).unwrap().levels.iter().map(|t| t.shape()[1]).collect()
        };
        assert_eq!(sizes(4), vec![4, 2, 1]);
        assert_eq!(sizes(5), vec![8, 4, 2, 1]);
    }

    #[test]
    fn block_indices() {
        assert_eq!(block_index(5, 2), 0);
        assert_eq!(block_index(5, 0), 4);
        assert_eq!(block_index(6, 1), 2);
    }

    #[test]
    fn capacity_error_on_overflow() {
        let s = Summarizer::<f32>::linear(2, &mut Rng::new(0)).unwrap();
        let mut st = SlotState::new(Layout::new(2, 0), 1, 2);
        let x = Tensor::zeros(&[1, 1, 2]).unwrap();
        for _ in 0..3 {
            st.push(&x, &s).unwrap();
        }
        assert!(matches!(st.push(&x, &s), Err(LmnError::Capacity { position: 3, .. })));
        assert_eq!(st.consumed(), 3);
    }
}
